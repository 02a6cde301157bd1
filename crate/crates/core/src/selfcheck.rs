//! Finite-difference checks of every backward kernel and loss gradient on
//! random double-precision fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{central_difference_at, relative_error};
use crate::sketch::{component_loss, content_loss, style_loss, total_loss_and_grad, LossWeights};
use crate::style::{target_grams, Region};
use crate::tensor::{
    avgpool2x2, avgpool2x2_backward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, BatchNorm, BnMode,
    ConvLayerParams, Padding, Shape, Tensor,
};
use crate::tensorfile::Normalization;
use crate::vgg::{synthetic_weight_file, Pooling, StyleLayer, TapGrads, VggWeights};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub fixtures: usize,
    /// Largest relative error over all fixtures.
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn coords(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    (0..k.min(len)).map(|_| rng.random_range(0..len)).collect()
}

/// Relative error of `analytic` against central differences of `f` at sampled coordinates.
fn probe(
    rng: &mut ChaCha8Rng,
    x: &[f64],
    analytic: &[f64],
    samples: usize,
    f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let c = coords(rng, x.len(), samples);
    let numeric = central_difference_at(x, &c, FD_STEP, f);
    let a: Vec<f64> = c.iter().map(|&i| analytic[i]).collect();
    relative_error(&a, &numeric)
}

fn rand_t(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::uniform(s, -1.0, 1.0, rng)
}

fn with(shape: Shape, v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).expect("probe shape")
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let pad = [Padding::Mirror, Padding::Zero, Padding::None][rng.random_range(0..3)];
    let stride = if pad == Padding::Mirror {
        1
    } else {
        rng.random_range(1..=2)
    };
    let (ic, oc) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let xs = Shape::new(rng.random_range(1..=2), ic, 8, 8);
    let x = rand_t(rng, xs);
    let ws = Shape::new(oc, ic, k, k);
    let w = rand_t(rng, ws);
    let b: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = ConvLayerParams::new(w.clone(), b.clone(), pad, stride)?;
    let y = conv2d_forward(&x, &params)?;
    let up = rand_t(rng, y.shape());
    let g = conv2d_backward(&x, &params, &up)?;
    let loss = |x: &Tensor, p: &ConvLayerParams| conv2d_forward(x, p).expect("conv").dot(&up);
    let e_in = probe(rng, x.data(), g.input.data(), 12, |v| {
        loss(&with(xs, v), &params)
    });
    let e_w = probe(rng, w.data(), g.weights.data(), 12, |v| {
        let p = ConvLayerParams::new(with(ws, v), b.clone(), pad, stride).expect("conv");
        loss(&x, &p)
    });
    let e_b = probe(rng, &b, &g.bias, 3, |v| {
        let p = ConvLayerParams::new(w.clone(), v.to_vec(), pad, stride).expect("conv");
        loss(&x, &p)
    });
    Ok(e_in.max(e_w).max(e_b))
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape::new(1, 2, 6, 8);
    let x = rand_t(rng, s);
    let (y, idx) = maxpool2x2(&x)?;
    let up = rand_t(rng, y.shape());
    let g = maxpool2x2_backward(&idx, &up)?;
    Ok(probe(rng, x.data(), g.data(), 16, |v| {
        maxpool2x2(&with(s, v)).expect("pool").0.dot(&up)
    }))
}

fn check_avgpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape::new(2, 1, 4, 6);
    let x = rand_t(rng, s);
    let up = rand_t(rng, avgpool2x2(&x)?.shape());
    let g = avgpool2x2_backward(s, &up)?;
    Ok(probe(rng, x.data(), g.data(), 16, |v| {
        avgpool2x2(&with(s, v)).expect("pool").dot(&up)
    }))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape::new(1, 3, 5, 5);
    let x = rand_t(rng, s);
    let up = rand_t(rng, s);
    let g = relu_backward(&x, &up)?;
    Ok(probe(rng, x.data(), g.data(), 16, |v| {
        relu(&with(s, v)).dot(&up)
    }))
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(1..=3);
    let s = Shape::new(2, c, 4, 4);
    let x = rand_t(rng, s);
    let mut bn = BatchNorm::identity(c);
    bn.gamma = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (y, cache) = batchnorm_forward(&x, &bn, BnMode::Train)?;
    let up = rand_t(rng, y.shape());
    let g = batchnorm_backward(&cache, &bn, &up)?;
    let loss = |x: &Tensor, bn: &BatchNorm| {
        batchnorm_forward(x, bn, BnMode::Train)
            .expect("bn")
            .0
            .dot(&up)
    };
    let e_in = probe(rng, x.data(), g.input.data(), 16, |v| {
        loss(&with(s, v), &bn)
    });
    let e_g = probe(rng, &bn.gamma.clone(), &g.gamma, c, |v| {
        let mut b = bn.clone();
        b.gamma = v.to_vec();
        loss(&x, &b)
    });
    let e_b = probe(rng, &bn.beta.clone(), &g.beta, c, |v| {
        let mut b = bn.clone();
        b.beta = v.to_vec();
        loss(&x, &b)
    });
    Ok(e_in.max(e_g).max(e_b))
}

/// A narrow random VGG for loss fixtures.
pub fn fixture_vgg(seed: u64, pooling: Pooling) -> VggWeights {
    let f = synthetic_weight_file([4, 6, 8, 8, 8], seed, Normalization::identity(3));
    let mut v = VggWeights::from_tensor_file(&f, format!("synthetic-{seed}")).expect("fixture vgg");
    v.pooling = pooling;
    v
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::uniform(Shape::new(1, 1, size, size), 0.0, 1.0, rng)
}

type TapLoss<'a> = &'a dyn Fn(&VggWeights, &Tensor) -> Result<(f64, TapGrads)>;

/// Image-space gradient of a tap-level loss, checked through the whole network.
fn check_image_loss(
    rng: &mut ChaCha8Rng,
    size: usize,
    deepest: StyleLayer,
    loss: TapLoss,
) -> Result<f64> {
    let pooling = if rng.random_bool(0.5) {
        Pooling::Max
    } else {
        Pooling::Average
    };
    let vgg = fixture_vgg(rng.random(), pooling);
    let x = image(rng, size);
    let s = x.shape();
    let (_, taps) = loss(&vgg, &x)?;
    let g = vgg.backprop_to_image(&x, &taps)?;
    debug_assert!(taps.deepest().is_none_or(|d| d <= deepest));
    Ok(probe(rng, x.data(), g.data(), 12, |v| {
        loss(&vgg, &with(s, v)).expect("loss").0
    }))
}

fn check_content(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = image(rng, 32);
    check_image_loss(rng, 32, StyleLayer::Conv1_1, &|vgg, x| {
        let (v, g) = content_loss(&vgg.conv1_1(x)?, &vgg.conv1_1(&c)?)?;
        let mut t = TapGrads::new();
        t.set(StyleLayer::Conv1_1, g);
        Ok((v, t))
    })
}

fn check_style(rng: &mut ChaCha8Rng) -> Result<f64> {
    let other = image(rng, 32);
    let only = StyleLayer::ALL[rng.random_range(0..5)];
    // Single-layer and all-layer variants alternate.
    let single = rng.random_bool(0.5);
    check_image_loss(rng, 32, StyleLayer::Conv5_1, &move |vgg, x| {
        let target = target_grams(&vgg.extract(&other)?, Region::new(0, 0, 16, 16))?;
        let (v, g) = style_loss(&vgg.extract(x)?, &target)?;
        if !single {
            return Ok((v, g));
        }
        let mut t = TapGrads::new();
        t.set(only, g.get(only).expect("tap").clone());
        let value = crate::sketch::gram_loss(vgg.extract(x)?.get(only), target.full(only))?.0;
        Ok((value, t))
    })
}

fn check_component(rng: &mut ChaCha8Rng) -> Result<f64> {
    let other = image(rng, 64);
    let region = Region::new(
        16 * rng.random_range(0..4),
        16 * rng.random_range(0..4),
        16,
        16,
    );
    check_image_loss(rng, 64, StyleLayer::Conv5_1, &move |vgg, x| {
        let target = target_grams(&vgg.extract(&other)?, region)?;
        component_loss(&vgg.extract(x)?, &target, region)
    })
}

fn check_total(rng: &mut ChaCha8Rng) -> Result<f64> {
    let pooling = if rng.random_bool(0.5) {
        Pooling::Max
    } else {
        Pooling::Average
    };
    let vgg = fixture_vgg(rng.random(), pooling);
    let target = target_grams(&vgg.extract(&image(rng, 32))?, Region::new(16, 0, 16, 16))?;
    let tap = vgg.conv1_1(&image(rng, 32))?;
    let w = LossWeights {
        alpha: rng.random_range(0.001..0.01),
        beta1: rng.random_range(0.5..2.0),
        beta2: rng.random_range(0.0..1.0),
    };
    let x = image(rng, 32);
    let (_, g) = total_loss_and_grad(&x, &tap, &target, &w, &vgg)?;
    let s = x.shape();
    Ok(probe(rng, x.data(), g.data(), 12, |v| {
        total_loss_and_grad(&with(s, v), &tap, &target, &w, &vgg)
            .expect("total")
            .0
            .total
    }))
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

pub const CHECKS: [(&str, Check); 9] = [
    ("conv2d", check_conv),
    ("maxpool", check_maxpool),
    ("avgpool", check_avgpool),
    ("relu", check_relu),
    ("batchnorm", check_batchnorm),
    ("content loss", check_content),
    ("style loss", check_style),
    ("component loss", check_component),
    ("total loss", check_total),
];

/// Runs every check on `fixtures` random fixtures each.
pub fn gradient_suite(fixtures: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(CHECKS.len());
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..fixtures {
            let e = check(&mut rng)?;
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
        }
        out.push(CheckResult {
            name,
            fixtures,
            worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        for r in gradient_suite(2, 99).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
