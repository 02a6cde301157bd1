use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by running statistics.
    Infer,
}

/// Per-channel affine batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    /// `gamma = 1`, `beta = 0`, running statistics at the unit normal.
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the batch statistics from a training-mode forward into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = cache.count as f64;
        let unbias = if cache.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] =
                BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * cache.mean[c];
            self.running_var[c] =
                BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * cache.var[c] * unbias;
        }
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: BnMode,
    normalized: Tensor,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn check(op: &'static str, s: Shape, bn: &BatchNorm) -> Result<()> {
    if bn.gamma.len() != s.c
        || bn.beta.len() != s.c
        || bn.running_mean.len() != s.c
        || bn.running_var.len() != s.c
    {
        return Err(Error::shape(
            op,
            format!("{} per-channel parameters", s.c),
            format!("gamma {} / beta {}", bn.gamma.len(), bn.beta.len()),
        ));
    }
    if s.n * s.plane() == 0 {
        return Err(Error::invalid(op, format!("zero spatial extent in {s}")));
    }
    Ok(())
}

pub fn batchnorm_forward(
    input: &Tensor,
    bn: &BatchNorm,
    mode: BnMode,
) -> Result<(Tensor, BatchNormCache)> {
    let s = input.shape();
    check("batchnorm_forward", s, bn)?;
    let count = s.n * s.plane();
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let sum: f64 = (0..s.n)
                    .map(|n| input.plane(n, c).iter().sum::<f64>())
                    .sum();
                let mu = sum / count as f64;
                let sq: f64 = (0..s.n)
                    .map(|n| {
                        input
                            .plane(n, c)
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>()
                    })
                    .sum();
                mean[c] = mu;
                var[c] = sq / count as f64;
            }
            (mean, var)
        }
        BnMode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let xhat = normalized.plane_mut(n, c);
            for (h, &v) in xhat.iter_mut().zip(src) {
                *h = (v - mean[c]) * inv_std[c];
            }
            let (g, b) = (bn.gamma[c], bn.beta[c]);
            let xhat = normalized.plane(n, c).to_vec();
            for (o, h) in out.plane_mut(n, c).iter_mut().zip(xhat) {
                *o = g * h + b;
            }
        }
    }
    let cache = BatchNormCache {
        mode,
        normalized,
        mean,
        var,
        inv_std,
        count,
    };
    Ok((out, cache))
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    bn: &BatchNorm,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let s = cache.normalized.shape();
    grad_out.ensure_shape("batchnorm_backward", s)?;
    check("batchnorm_backward", s, bn)?;
    let m = cache.count as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &h) in grad_out
                .plane(n, c)
                .iter()
                .zip(cache.normalized.plane(n, c))
            {
                dbeta[c] += g;
                dgamma[c] += g * h;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c {
        let k = bn.gamma[c] * cache.inv_std[c];
        for n in 0..s.n {
            let go = grad_out.plane(n, c);
            let xh = cache.normalized.plane(n, c);
            let dst = dx.plane_mut(n, c);
            match cache.mode {
                BnMode::Train => {
                    for i in 0..dst.len() {
                        dst[i] = k / m * (m * go[i] - dbeta[c] - xh[i] * dgamma[c]);
                    }
                }
                BnMode::Infer => {
                    for i in 0..dst.len() {
                        dst[i] = k * go[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(3, 2, 4, 5), 5.0, &mut rng).map(|v| v + 7.0);
        let (y, _) = batchnorm_forward(&x, &BatchNorm::identity(2), BnMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(2, 2, 3, 3), 1.0, &mut rng);
        let mut bn = BatchNorm::identity(2);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.3, -1.5];
        for mode in [BnMode::Train, BnMode::Infer] {
            let (y, _) = batchnorm_forward(&x, &bn, mode).unwrap();
            for n in 0..2 {
                assert!(y.plane(n, 0).iter().all(|&v| v == 0.3));
                assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
            }
        }
    }

    #[test]
    fn running_stats_use_momentum() {
        let x = Tensor::from_fn(Shape::new(1, 1, 1, 4), |_, _, _, i| i as f64);
        let mut bn = BatchNorm::identity(1);
        let (_, cache) = batchnorm_forward(&x, &bn, BnMode::Train).unwrap();
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.15).abs() < 1e-15);
        // unbiased batch variance of 0..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(batchnorm_forward(&x, &BatchNorm::identity(2), BnMode::Train).is_err());
        let empty = Tensor::zeros(Shape::new(1, 2, 0, 2));
        assert!(batchnorm_forward(&empty, &BatchNorm::identity(2), BnMode::Train).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let mode = if trial % 2 == 0 {
                BnMode::Train
            } else {
                BnMode::Infer
            };
            let s = Shape::new(2, 3, 3, 4);
            let x = Tensor::randn(s, 1.5, &mut rng);
            let g = Tensor::randn(s, 1.0, &mut rng);
            let mut bn = BatchNorm::identity(3);
            bn.gamma = vec![0.7, -1.2, 2.0];
            bn.beta = vec![0.1, 0.2, -0.3];
            bn.running_mean = vec![0.5, -0.1, 0.0];
            bn.running_var = vec![1.3, 0.4, 2.2];
            let (_, cache) = batchnorm_forward(&x, &bn, mode).unwrap();
            let grads = batchnorm_backward(&cache, &bn, &g).unwrap();
            let numeric = central_difference(x.data(), 1e-5, |v| {
                let t = Tensor::from_vec(s, v.to_vec()).unwrap();
                batchnorm_forward(&t, &bn, mode).unwrap().0.dot(&g)
            });
            assert!(relative_error(grads.input.data(), &numeric) < 1e-4);
            let numeric = central_difference(&bn.gamma, 1e-5, |v| {
                let mut b = bn.clone();
                b.gamma = v.to_vec();
                batchnorm_forward(&x, &b, mode).unwrap().0.dot(&g)
            });
            assert!(relative_error(&grads.gamma, &numeric) < 1e-4);
        }
    }
}
