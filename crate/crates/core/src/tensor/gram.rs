use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Channel inner-product matrix of a single feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    /// Row-major `channels x channels`.
    pub values: Vec<f64>,
    pub channels: usize,
    /// Spatial element count `h * w` of the source map.
    pub m: usize,
}

impl GramMatrix {
    pub fn zeros(channels: usize, m: usize) -> Self {
        GramMatrix {
            values: vec![0.0; channels * channels],
            channels,
            m,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.channels).map(|i| self.get(i, i)).sum()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.channels, self.channels), &self.values)
            .expect("square gram storage")
    }
}

fn feature_view(feature: &Tensor) -> ArrayView2<'_, f64> {
    let s = feature.shape();
    ArrayView2::from_shape((s.c, s.plane()), feature.data()).expect("contiguous feature map")
}

/// `G_ij = sum over positions of F_i * F_j`. The upper triangle is mirrored so the
/// result is exactly symmetric.
pub fn gram(feature: &Tensor) -> Result<GramMatrix> {
    let s = feature.shape();
    if s.n != 1 {
        return Err(Error::invalid(
            "gram",
            format!("batch size must be 1, got {s}"),
        ));
    }
    let f = feature_view(feature);
    let mut g = Array2::<f64>::zeros((s.c, s.c));
    general_mat_mul(1.0, &f, &f.t(), 0.0, &mut g);
    let mut out = GramMatrix::zeros(s.c, s.plane());
    for i in 0..s.c {
        for j in i..s.c {
            let v = g[[i, j]];
            out.values[i * s.c + j] = v;
            out.values[j * s.c + i] = v;
        }
    }
    Ok(out)
}

/// Returns `coeff * F` reshaped to the feature map, the pullback of a Gram-space
/// gradient when `coeff` already holds `dL/dG + dL/dG^T`.
pub fn gram_pullback(feature: &Tensor, coeff: &GramMatrix) -> Result<Tensor> {
    let s = feature.shape();
    if s.n != 1 || coeff.channels != s.c {
        return Err(Error::shape(
            "gram_pullback",
            format!("1x{}xHxW feature", coeff.channels),
            s,
        ));
    }
    let mut out = Tensor::zeros(Shape::new(1, s.c, s.h, s.w));
    {
        let mut o = ArrayViewMut2::from_shape((s.c, s.plane()), out.data_mut())
            .expect("contiguous output map");
        general_mat_mul(1.0, &coeff.view(), &feature_view(feature), 0.0, &mut o);
    }
    Ok(out)
}
