use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::pad::{mirror_pad, mirror_pad_backward};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Reflect by `(k - 1) / 2` pixels.
    Mirror,
    /// Zero-fill by `(k - 1) / 2` pixels.
    Zero,
    None,
}

/// Square convolution with odd kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    /// `(out_channels, in_channels, k, k)`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub pad: Padding,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvLayerParams {
    pub fn new(weights: Tensor, bias: Vec<f64>, pad: Padding, stride: usize) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.h.is_multiple_of(2) {
            return Err(Error::invalid(
                "ConvLayerParams",
                format!("kernel must be square with odd size, got {}x{}", s.h, s.w),
            ));
        }
        if bias.len() != s.n {
            return Err(Error::shape(
                "ConvLayerParams",
                format!("{} biases", s.n),
                format!("{} biases", bias.len()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("ConvLayerParams", "stride must be positive"));
        }
        Ok(ConvLayerParams {
            weights,
            bias,
            pad,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn pad_width(&self) -> usize {
        match self.pad {
            Padding::None => 0,
            _ => (self.kernel() - 1) / 2,
        }
    }

    /// Output shape for an input of shape `s`, without touching any data.
    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        if s.c != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("input with {} channels", self.in_channels()),
                format!("input {s} against weights {}", self.weights.shape()),
            ));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("empty spatial extent in {s}"),
            ));
        }
        let p = self.pad_width();
        let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
        let k = self.kernel();
        if hp < k || wp < k {
            return Err(Error::invalid(
                "conv2d",
                format!("input {s} smaller than the {k}x{k} kernel"),
            ));
        }
        if self.pad == Padding::Mirror && p > 0 && (p >= s.h || p >= s.w) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "mirror padding {p} needs an input larger than {}x{}",
                    s.h, s.w
                ),
            ));
        }
        Ok(Shape::new(
            s.n,
            self.out_channels(),
            (hp - k) / self.stride + 1,
            (wp - k) / self.stride + 1,
        ))
    }

    fn padded(&self, input: &Tensor) -> Result<Tensor> {
        let p = self.pad_width();
        match self.pad {
            Padding::Mirror => mirror_pad(input, p),
            Padding::Zero if p > 0 => {
                let s = input.shape();
                let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h + 2 * p, s.w + 2 * p));
                out.paste(input, p, p)?;
                Ok(out)
            }
            _ => Ok(input.clone()),
        }
    }

    fn unpad_grad(&self, grad_padded: &Tensor, input_shape: Shape) -> Result<Tensor> {
        let p = self.pad_width();
        match self.pad {
            Padding::Mirror => mirror_pad_backward(grad_padded, p),
            Padding::Zero if p > 0 => grad_padded.crop(p, p, input_shape.h, input_shape.w),
            _ => Ok(grad_padded.clone()),
        }
    }
}

// Stride-1 convolution is evaluated as k*k GEMMs over shifted views of the
// padded input. Output row y lives at columns [y*wp, y*wp + wo) of a
// (out_channels x span) buffer; the trailing wp - wo columns of each row are
// scratch and never read back.
struct ShiftedLayout {
    ic: usize,
    oc: usize,
    k: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

impl ShiftedLayout {
    fn span(&self) -> usize {
        (self.ho - 1) * self.wp + self.wo
    }

    fn input_view<'a>(&self, padded_item: &'a [f64], ky: usize, kx: usize) -> ArrayView2<'a, f64> {
        let off = ky * self.wp + kx;
        ArrayView2::from_shape(
            (self.ic, self.span()).strides((self.hp * self.wp, 1)),
            &padded_item[off..],
        )
        .expect("shifted input view in bounds")
    }

    fn weight_view<'a>(&self, weights: &'a [f64], ky: usize, kx: usize) -> ArrayView2<'a, f64> {
        let kk = self.k * self.k;
        ArrayView2::from_shape(
            (self.oc, self.ic).strides((self.ic * kk, kk)),
            &weights[ky * self.k + kx..],
        )
        .expect("kernel tap view in bounds")
    }
}

fn layout(params: &ConvLayerParams, input: Shape, out: Shape) -> ShiftedLayout {
    let p = params.pad_width();
    ShiftedLayout {
        ic: input.c,
        oc: out.c,
        k: params.kernel(),
        hp: input.h + 2 * p,
        wp: input.w + 2 * p,
        ho: out.h,
        wo: out.w,
    }
}

pub fn conv2d_forward(input: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    let os = params.output_shape(input.shape())?;
    let padded = params.padded(input)?;
    if params.stride != 1 {
        return Ok(conv_forward_direct(&padded, params, os));
    }
    let lay = layout(params, input.shape(), os);
    let span = lay.span();
    let mut out = Tensor::zeros(os);
    let mut acc = ndarray::Array2::<f64>::zeros((lay.oc, span));
    for n in 0..os.n {
        acc.fill(0.0);
        let item = padded.item(n);
        for ky in 0..lay.k {
            for kx in 0..lay.k {
                let a = lay.weight_view(params.weights.data(), ky, kx);
                let b = lay.input_view(item, ky, kx);
                general_mat_mul(1.0, &a, &b, 1.0, &mut acc);
            }
        }
        for o in 0..lay.oc {
            let row = acc.row(o);
            let row = row.as_slice().expect("contiguous accumulator row");
            let b = params.bias[o];
            let dst = out.plane_mut(n, o);
            for y in 0..lay.ho {
                for x in 0..lay.wo {
                    dst[y * lay.wo + x] = row[y * lay.wp + x] + b;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    backward_impl(input, params, grad_out, true)
}

/// Input gradient only; skips the weight-gradient products.
pub fn conv2d_backward_input(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    Ok(backward_impl(input, params, grad_out, false)?.input)
}

fn backward_impl(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_out: &Tensor,
    need_weights: bool,
) -> Result<ConvGrads> {
    let is = input.shape();
    let os = params.output_shape(is)?;
    grad_out.ensure_shape("conv2d_backward", os)?;
    let padded = params.padded(input)?;
    let mut grad_bias = vec![0.0; os.c];
    for n in 0..os.n {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.plane(n, o).iter().sum::<f64>();
        }
    }
    let (grad_padded, grad_weights) = if params.stride != 1 {
        conv_backward_direct(&padded, params, grad_out)
    } else {
        let lay = layout(params, is, os);
        let span = lay.span();
        let kk = lay.k * lay.k;
        let mut grad_padded = Tensor::zeros(padded.shape());
        let mut grad_weights = Tensor::zeros(params.weights.shape());
        let mut g = ndarray::Array2::<f64>::zeros((lay.oc, span));
        for n in 0..os.n {
            for o in 0..lay.oc {
                let src = grad_out.plane(n, o);
                let mut row = g.row_mut(o);
                let row = row.as_slice_mut().expect("contiguous gradient row");
                for y in 0..lay.ho {
                    row[y * lay.wp..y * lay.wp + lay.wo]
                        .copy_from_slice(&src[y * lay.wo..(y + 1) * lay.wo]);
                }
            }
            let item = padded.item(n);
            for ky in 0..lay.k {
                for kx in 0..lay.k {
                    if need_weights {
                        let b = lay.input_view(item, ky, kx);
                        let off = ky * lay.k + kx;
                        let mut gw = ArrayViewMut2::from_shape(
                            (lay.oc, lay.ic).strides((lay.ic * kk, kk)),
                            &mut grad_weights.data_mut()[off..],
                        )
                        .expect("kernel tap gradient view in bounds");
                        general_mat_mul(1.0, &g, &b.t(), 1.0, &mut gw);
                    }

                    let a = lay.weight_view(params.weights.data(), ky, kx);
                    let off = ky * lay.wp + kx;
                    let mut gi = ArrayViewMut2::from_shape(
                        (lay.ic, span).strides((lay.hp * lay.wp, 1)),
                        &mut grad_padded.item_mut(n)[off..],
                    )
                    .expect("shifted gradient view in bounds");
                    general_mat_mul(1.0, &a.t(), &g, 1.0, &mut gi);
                }
            }
        }
        (grad_padded, grad_weights)
    };
    Ok(ConvGrads {
        input: params.unpad_grad(&grad_padded, is)?,
        weights: grad_weights,
        bias: grad_bias,
    })
}

fn conv_forward_direct(padded: &Tensor, params: &ConvLayerParams, os: Shape) -> Tensor {
    let (k, st) = (params.kernel(), params.stride);
    let ic = params.in_channels();
    let w = &params.weights;
    Tensor::from_fn(os, |n, o, y, x| {
        let mut acc = params.bias[o];
        for c in 0..ic {
            for ky in 0..k {
                for kx in 0..k {
                    acc += w.at(o, c, ky, kx) * padded.at(n, c, y * st + ky, x * st + kx);
                }
            }
        }
        acc
    })
}

fn conv_backward_direct(
    padded: &Tensor,
    params: &ConvLayerParams,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (k, st) = (params.kernel(), params.stride);
    let ic = params.in_channels();
    let os = grad_out.shape();
    let w = &params.weights;
    let mut gp = Tensor::zeros(padded.shape());
    let mut gw = Tensor::zeros(w.shape());
    for n in 0..os.n {
        for o in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    let g = grad_out.at(n, o, y, x);
                    for c in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (py, px) = (y * st + ky, x * st + kx);
                                *gw.at_mut(o, c, ky, kx) += g * padded.at(n, c, py, px);
                                *gp.at_mut(n, c, py, px) += g * w.at(o, c, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (gp, gw)
}
