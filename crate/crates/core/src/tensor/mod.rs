//! Dense NCHW tensors in double precision and the layer kernels built on them.
//!
//! Every kernel is a pure function: inputs are borrowed, outputs are freshly
//! allocated. Backward kernels take whatever the forward pass recorded (input,
//! argmax map, normalization cache) and return gradients with respect to the
//! forward inputs.

mod activation;
mod batchnorm;
mod conv;
mod gram;
mod pad;
mod pool;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use activation::{clamp_unit, relu, relu_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNorm, BatchNormCache, BatchNormGrads, BnMode,
    BN_EPS, BN_MOMENTUM,
};
pub use conv::{
    conv2d_backward, conv2d_backward_input, conv2d_forward, ConvGrads, ConvLayerParams, Padding,
};
pub use gram::{gram, gram_pullback, GramMatrix};
pub use pad::{mirror_pad, mirror_pad_backward};
pub use pool::{avgpool2x2, avgpool2x2_backward, maxpool2x2, maxpool2x2_backward, PoolIndex};

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for {shape}", shape.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous `(h, w)` plane of one channel of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n` as one contiguous slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape("Tensor::reshape", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_shape("Tensor::add_assign", other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn ensure_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, expected, self.shape));
        }
        Ok(())
    }

    /// Copies the window `[y0, y0+h) x [x0, x0+w)` out of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(Error::invalid(
                "Tensor::crop",
                format!("window {h}x{w} at ({y0}, {x0}) exceeds {}x{}", s.h, s.w),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    let row = (y0 + y) * s.w + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[row..row + w]);
                }
            }
        }
        Ok(out)
    }

    /// Writes `patch` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, patch: &Tensor, y0: usize, x0: usize) -> Result<()> {
        let s = self.shape;
        let p = patch.shape;
        if p.n != s.n || p.c != s.c || y0 + p.h > s.h || x0 + p.w > s.w {
            return Err(Error::invalid(
                "Tensor::paste",
                format!("patch {p} at ({y0}, {x0}) does not fit {s}"),
            ));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                let src = patch.plane(n, c);
                let dst = self.plane_mut(n, c);
                for y in 0..p.h {
                    let row = (y0 + y) * s.w + x0;
                    dst[row..row + p.w].copy_from_slice(&src[y * p.w..(y + 1) * p.w]);
                }
            }
        }
        Ok(())
    }
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for t in parts {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape("concat_channels", first, s));
        }
        channels += s.c;
    }
    let shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..first.n {
        for t in parts {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = t.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(Error::invalid(
            "split_channels",
            format!("sizes {sizes:?} do not sum to {} channels", s.c),
        ));
    }
    let plane = s.plane();
    let mut outs: Vec<Tensor> = sizes
        .iter()
        .map(|&c| Tensor::zeros(Shape::new(s.n, c, s.h, s.w)))
        .collect();
    for n in 0..s.n {
        let item = t.item(n);
        let mut offset = 0;
        for (out, &c) in outs.iter_mut().zip(sizes) {
            out.item_mut(n)
                .copy_from_slice(&item[offset * plane..(offset + c) * plane]);
            offset += c;
        }
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_fn(Shape::new(2, 1, 2, 2), |n, _, y, x| {
            (n * 10 + y * 2 + x) as f64
        });
        let b = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| {
            -((n * 100 + c * 10 + y * 2 + x) as f64)
        });
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 2, 2));
        assert_eq!(cat.at(1, 0, 1, 1), a.at(1, 0, 1, 1));
        assert_eq!(cat.at(1, 2, 0, 1), b.at(1, 1, 0, 1));
        let parts = split_channels(&cat, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn crop_paste_round_trip() {
        let t = Tensor::from_fn(Shape::new(1, 2, 6, 5), |_, c, y, x| {
            (c * 100 + y * 10 + x) as f64
        });
        let patch = t.crop(2, 1, 3, 2).unwrap();
        assert_eq!(patch.at(0, 1, 0, 0), 121.0);
        let mut blank = Tensor::zeros(t.shape());
        blank.paste(&patch, 2, 1).unwrap();
        assert_eq!(blank.at(0, 1, 4, 2), t.at(0, 1, 4, 2));
        assert!(t.crop(4, 0, 3, 1).is_err());
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
