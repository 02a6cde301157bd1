//! Feed-forward content network: two inception blocks, 1x1 feature
//! integration and 3x3 reconstruction, trained with an L1 loss via Adadelta.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adadelta;
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, clamp_unit, concat_channels, conv2d_backward,
    conv2d_forward, relu, relu_backward, split_channels, BatchNorm, BatchNormCache, BnMode,
    ConvLayerParams, Padding, Shape, Tensor,
};
use crate::tensorfile::{Normalization, Record, TensorFile};

pub const INPUT_CHANNELS: usize = 4;
pub const DOG_SIGMAS: (f64, f64) = (1.0, 2.0);
const ARCH_VERSION: f64 = 1.0;

/// Normalized 1-D Gaussian truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a single plane with replicated borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + clampi(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clampi(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// The four network input channels: photo, x ramp, y ramp, difference of Gaussians.
pub struct ContentInput;

impl ContentInput {
    pub fn build(photo: &Tensor) -> Result<Tensor> {
        let s = photo.shape();
        if s.n != 1 || s.c != 1 || s.h < 3 || s.w < 3 {
            return Err(Error::shape(
                "ContentInput::build",
                "1x1xHxW photo, H, W >= 3",
                s,
            ));
        }
        let (h, w) = (s.h, s.w);
        let p = photo.plane(0, 0);
        let g1 = gaussian_blur(p, h, w, DOG_SIGMAS.0);
        let g2 = gaussian_blur(p, h, w, DOG_SIGMAS.1);
        Ok(Tensor::from_fn(
            Shape::new(1, INPUT_CHANNELS, h, w),
            |_, c, y, x| match c {
                0 => p[y * w + x],
                1 => x as f64 / (w - 1) as f64,
                2 => y as f64 / (h - 1) as f64,
                _ => g1[y * w + x] - g2[y * w + x],
            },
        ))
    }
}

/// Channel counts of every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentNetConfig {
    /// Branch widths for kernel sizes 1, 3 and 5.
    pub inception: [usize; 3],
    pub integration: [usize; 3],
    pub reconstruction: usize,
}

impl Default for ContentNetConfig {
    fn default() -> Self {
        ContentNetConfig {
            inception: [32, 32, 32],
            integration: [64, 64, 32],
            reconstruction: 32,
        }
    }
}

impl ContentNetConfig {
    pub fn inception_width(&self) -> usize {
        self.inception.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.inception.contains(&0) || self.integration.contains(&0) || self.reconstruction == 0
        {
            return Err(Error::invalid(
                "ContentNetConfig",
                format!("zero width in {self:?}"),
            ));
        }
        Ok(())
    }

    fn to_record(self) -> Record {
        let mut v = vec![ARCH_VERSION];
        v.extend(
            self.inception
                .iter()
                .chain(&self.integration)
                .map(|&c| c as f64),
        );
        v.push(self.reconstruction as f64);
        Record::vector("arch", &v)
    }

    fn from_record(r: &Record) -> Result<Self> {
        let bad = |msg: &str| Error::invalid("ContentNetConfig", format!("arch record: {msg}"));
        if r.data.len() != 8 || r.data[0] != ARCH_VERSION {
            return Err(bad("expected version 1 with 7 widths"));
        }
        let w: Vec<usize> = r.data[1..]
            .iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(bad("widths must be positive integers"))
                }
            })
            .collect::<Result<_>>()?;
        Ok(ContentNetConfig {
            inception: [w[0], w[1], w[2]],
            integration: [w[3], w[4], w[5]],
            reconstruction: w[6],
        })
    }
}

/// A convolution, optionally followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
struct Unit {
    name: String,
    conv: ConvLayerParams,
    bn: Option<BatchNorm>,
}

struct UnitCache {
    input: Tensor,
    pre_relu: Tensor,
    bn: Option<BatchNormCache>,
}

impl Unit {
    fn he(name: String, ic: usize, oc: usize, k: usize, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        let pad = if k == 1 {
            Padding::None
        } else {
            Padding::Mirror
        };
        let w = Tensor::randn(Shape::new(oc, ic, k, k), std, rng);
        Unit {
            name,
            conv: ConvLayerParams::new(w, vec![0.0; oc], pad, 1).expect("valid unit"),
            bn: bn.then(|| BatchNorm::identity(oc)),
        }
    }

    fn forward(&self, input: &Tensor, mode: BnMode) -> Result<(Tensor, UnitCache)> {
        let z = conv2d_forward(input, &self.conv)?;
        let Some(bn) = &self.bn else {
            let cache = UnitCache {
                input: input.clone(),
                pre_relu: z.clone(),
                bn: None,
            };
            return Ok((z, cache));
        };
        let (y, bc) = batchnorm_forward(&z, bn, mode)?;
        let out = relu(&y);
        Ok((
            out,
            UnitCache {
                input: input.clone(),
                pre_relu: y,
                bn: Some(bc),
            },
        ))
    }

    /// Returns the input gradient and appends parameter gradients in `flat` order.
    fn backward(
        &self,
        cache: &UnitCache,
        grad_out: &Tensor,
        grads: &mut Vec<f64>,
    ) -> Result<Tensor> {
        let (gz, bn_grads) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(bc)) => {
                let gy = relu_backward(&cache.pre_relu, grad_out)?;
                let g = batchnorm_backward(bc, bn, &gy)?;
                (g.input, Some((g.gamma, g.beta)))
            }
            _ => (grad_out.clone(), None),
        };
        let cg = conv2d_backward(&cache.input, &self.conv, &gz)?;
        grads.extend_from_slice(cg.weights.data());
        grads.extend_from_slice(&cg.bias);
        if let Some((gamma, beta)) = bn_grads {
            grads.extend_from_slice(&gamma);
            grads.extend_from_slice(&beta);
        }
        Ok(cg.input)
    }

    fn param_count(&self) -> usize {
        self.conv.weights.len()
            + self.conv.bias.len()
            + self.bn.as_ref().map_or(0, |b| 2 * b.channels())
    }

    fn gather(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.conv.weights.data());
        out.extend_from_slice(&self.conv.bias);
        if let Some(bn) = &self.bn {
            out.extend_from_slice(&bn.gamma);
            out.extend_from_slice(&bn.beta);
        }
    }

    fn scatter(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[at..at + dst.len()]);
            at += dst.len();
        };
        take(self.conv.weights.data_mut());
        take(&mut self.conv.bias);
        if let Some(bn) = &mut self.bn {
            take(&mut bn.gamma);
            take(&mut bn.beta);
        }
        at
    }
}

/// The content network. Units are stored in forward order:
/// two inception blocks of three branches each, three 1x1 integration
/// convs, one 3x3 reconstruction conv and the linear 3x3 output conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentNet {
    pub config: ContentNetConfig,
    units: Vec<Unit>,
}

/// Activations kept for the backward pass.
pub struct ContentTrace {
    caches: Vec<UnitCache>,
    /// Unclamped network output.
    pub output: Tensor,
}

const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

impl ContentNet {
    pub fn new(config: ContentNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut units = Vec::new();
        let mut ic = INPUT_CHANNELS;
        for block in 1..=2 {
            for (b, &k) in BRANCH_KERNELS.iter().enumerate() {
                let name = format!("inception{block}.k{k}");
                units.push(Unit::he(name, ic, config.inception[b], k, true, &mut rng));
            }
            ic = config.inception_width();
        }
        for (i, &oc) in config.integration.iter().enumerate() {
            units.push(Unit::he(
                format!("integrate{}", i + 1),
                ic,
                oc,
                1,
                true,
                &mut rng,
            ));
            ic = oc;
        }
        let rc = config.reconstruction;
        units.push(Unit::he("reconstruct".into(), ic, rc, 3, true, &mut rng));
        units.push(Unit::he("output".into(), rc, 1, 3, false, &mut rng));
        Ok(ContentNet { config, units })
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(Unit::param_count).sum()
    }

    /// Trainable parameters flattened: per unit, weights, bias, then BN gamma and beta.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for u in &self.units {
            u.gather(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "ContentNet::set_params",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut at = 0;
        for u in &mut self.units {
            at += u.scatter(&flat[at..]);
        }
        Ok(())
    }

    /// Sets every parameter of the output conv to zero.
    pub fn zero_output_layer(&mut self) {
        let out = self.units.last_mut().expect("output unit");
        out.conv.weights.scale(0.0);
        out.conv.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn trace(&self, input: &Tensor, mode: BnMode) -> Result<ContentTrace> {
        let s = input.shape();
        if s.c != INPUT_CHANNELS {
            return Err(Error::shape(
                "ContentNet",
                format!("Nx{INPUT_CHANNELS}xHxW input"),
                s,
            ));
        }
        let mut caches = Vec::with_capacity(self.units.len());
        let mut x = input.clone();
        for block in 0..2 {
            let mut outs = Vec::with_capacity(3);
            for u in &self.units[block * 3..block * 3 + 3] {
                let (y, c) = u.forward(&x, mode)?;
                outs.push(y);
                caches.push(c);
            }
            x = concat_channels(&outs.iter().collect::<Vec<_>>())?;
        }
        for u in &self.units[6..] {
            let (y, c) = u.forward(&x, mode)?;
            x = y;
            caches.push(c);
        }
        Ok(ContentTrace { caches, output: x })
    }

    /// Content image for a batch of inputs, clamped to [0, 1].
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(clamp_unit(&self.trace(input, BnMode::Infer)?.output))
    }

    /// Content image for a single grayscale photo.
    pub fn predict(&self, photo: &Tensor) -> Result<Tensor> {
        self.forward(&ContentInput::build(photo)?)
    }

    /// Flat parameter gradient, in `params()` order, for an output gradient.
    pub fn backward(&self, trace: &ContentTrace, grad_out: &Tensor) -> Result<Vec<f64>> {
        let mut per_unit: Vec<Vec<f64>> = vec![Vec::new(); self.units.len()];
        let mut g = grad_out.clone();
        for i in (6..self.units.len()).rev() {
            g = self.units[i].backward(&trace.caches[i], &g, &mut per_unit[i])?;
        }
        for block in (0..2).rev() {
            let sizes = self.config.inception;
            let parts = split_channels(&g, &sizes)?;
            let mut acc: Option<Tensor> = None;
            for (b, part) in parts.iter().enumerate() {
                let i = block * 3 + b;
                let gi = self.units[i].backward(&trace.caches[i], part, &mut per_unit[i])?;
                match &mut acc {
                    Some(a) => a.add_assign(&gi)?,
                    None => acc = Some(gi),
                }
            }
            g = acc.expect("three branches");
        }
        Ok(per_unit.concat())
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, trace: &ContentTrace) {
        for (u, c) in self.units.iter_mut().zip(&trace.caches) {
            if let (Some(bn), Some(bc)) = (&mut u.bn, &c.bn) {
                bn.update_running(bc);
            }
        }
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(Normalization::identity(INPUT_CHANNELS));
        f.push(self.config.to_record());
        for u in &self.units {
            f.push(Record::from_tensor(
                format!("{}.weight", u.name),
                &u.conv.weights,
            ));
            f.push(Record::vector(format!("{}.bias", u.name), &u.conv.bias));
            if let Some(bn) = &u.bn {
                f.push(Record::vector(format!("{}.bn.gamma", u.name), &bn.gamma));
                f.push(Record::vector(format!("{}.bn.beta", u.name), &bn.beta));
                f.push(Record::vector(
                    format!("{}.bn.mean", u.name),
                    &bn.running_mean,
                ));
                f.push(Record::vector(
                    format!("{}.bn.var", u.name),
                    &bn.running_var,
                ));
            }
        }
        f
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let arch = file
            .get("arch")
            .ok_or_else(|| Error::invalid("ContentNet", "checkpoint has no arch record"))?;
        let mut net = ContentNet::new(ContentNetConfig::from_record(arch)?, 0)?;
        for u in &mut net.units {
            let get = |suffix: &str, len: usize| -> Result<Vec<f64>> {
                let name = format!("{}.{suffix}", u.name);
                let r = file.get(&name).ok_or_else(|| {
                    Error::invalid("ContentNet", format!("missing record {name}"))
                })?;
                if r.data.len() != len {
                    return Err(Error::shape(
                        "ContentNet",
                        format!("{name} of {len} values"),
                        r.data.len(),
                    ));
                }
                Ok(r.data.clone())
            };
            let ws = u.conv.weights.shape();
            let w = get("weight", ws.len())?;
            u.conv.weights = Tensor::from_vec(ws, w)?;
            u.conv.bias = get("bias", ws.n)?;
            if let Some(bn) = &mut u.bn {
                let c = bn.channels();
                bn.gamma = get("bn.gamma", c)?;
                bn.beta = get("bn.beta", c)?;
                bn.running_mean = get("bn.mean", c)?;
                bn.running_var = get("bn.var", c)?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        Self::from_tensor_file(&file).map_err(|e| Error::TensorFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Mean over the batch of per-image absolute-difference sums, with its subgradient.
pub fn l1_loss(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    output.ensure_shape("l1_loss", target.shape())?;
    let n = output.shape().n.max(1) as f64;
    let mut grad = Tensor::zeros(output.shape());
    let mut sum = 0.0;
    for ((g, a), b) in grad
        .data_mut()
        .iter_mut()
        .zip(output.data())
        .zip(target.data())
    {
        let d = a - b;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// One training example: a network input and its ground-truth sketch.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

impl Sample {
    pub fn from_pair(photo: &Tensor, sketch: &Tensor) -> Result<Self> {
        sketch.ensure_shape("Sample", photo.shape())?;
        Ok(Sample {
            input: ContentInput::build(photo)?,
            target: sketch.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.1,
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// Losses after one epoch, measured with inference-mode batch norm and clamped outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss
    /// (training loss when the validation split is empty).
    pub net: ContentNet,
    pub best_epoch: usize,
    pub curve: Vec<EpochStats>,
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items[0].shape();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        t.ensure_shape("stack", first)?;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(items.len(), first.c, first.h, first.w), data)
}

/// Mean per-image L1 loss of the clamped inference output.
pub fn evaluate(net: &ContentNet, samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = net.forward(&s.input)?;
        total += l1_loss(&out, &s.target)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `net` on `data` with Adadelta. Deterministic for a fixed seed.
pub fn train(
    mut net: ContentNet,
    data: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * opts.val_fraction).floor() as usize;
    let n_val = n_val.min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let mut params = net.params();
    let mut opt = Adadelta::with_params(params.len(), opts.rho, opts.eps, opts.lr);
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, ContentNet)> = None;
    for epoch in 1..=opts.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(opts.batch_size) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].input).collect();
            let targets: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].target).collect();
            let trace = net.trace(&stack(&inputs)?, BnMode::Train)?;
            let (loss, grad) = l1_loss(&trace.output, &stack(&targets)?)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("content network training loss"));
            }
            let g = net.backward(&trace, &grad)?;
            opt.step(&mut params, &g)?;
            net.set_params(&params)?;
            net.update_running_stats(&trace);
        }
        let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &data[i]).collect();
        let stats = EpochStats {
            epoch,
            train_loss: evaluate(&net, &train_set)?,
            val_loss: if val.is_empty() {
                None
            } else {
                Some(evaluate(&net, &val)?)
            },
        };
        if !stats.train_loss.is_finite() || stats.val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite("content network evaluation loss"));
        }
        let score = stats.val_loss.unwrap_or(stats.train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, net.clone()));
        }
        on_epoch(&stats);
        curve.push(stats);
    }
    let (net, best_epoch) = match best {
        Some((_, e, n)) => (n, e),
        None => (net, 0),
    };
    Ok(TrainOutcome {
        net,
        best_epoch,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference_at, relative_error};
    use rand::Rng;

    fn tiny() -> ContentNetConfig {
        ContentNetConfig {
            inception: [2, 3, 2],
            integration: [4, 3, 3],
            reconstruction: 3,
        }
    }

    fn photo(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(Shape::new(1, 1, size, size), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn coordinate_channels() {
        let input = ContentInput::build(&photo(1, 8)).unwrap();
        assert_eq!(input.at(0, 1, 3, 0), 0.0);
        assert_eq!(input.at(0, 1, 3, 7), 1.0);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(input.at(0, 2, r, c), input.at(0, 1, c, r));
            }
        }
    }

    #[test]
    fn constant_photo_has_flat_dog() {
        let input = ContentInput::build(&Tensor::full(Shape::new(1, 1, 16, 16), 0.7)).unwrap();
        assert!(input.plane(0, 3).iter().all(|v| v.abs() < 1e-12));
        assert!(ContentInput::build(&Tensor::zeros(Shape::new(1, 2, 16, 16))).is_err());
    }

    #[test]
    fn dog_stays_in_range() {
        let input = ContentInput::build(&photo(2, 24)).unwrap();
        assert!(input.plane(0, 3).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn output_shape_and_clamp() {
        let net = ContentNet::new(ContentNetConfig::default(), 0).unwrap();
        let out = net.predict(&photo(3, 16)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 16, 16));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn inception_concat_width() {
        let net = ContentNet::new(tiny(), 0).unwrap();
        let trace = net
            .trace(&ContentInput::build(&photo(4, 8)).unwrap(), BnMode::Train)
            .unwrap();
        // Integration input carries the concatenated branches.
        assert_eq!(trace.caches[6].input.shape().c, 7);
        assert_eq!(trace.caches[3].input.shape().c, 7);
    }

    #[test]
    fn zero_output_layer_gives_constant_image() {
        let mut net = ContentNet::new(tiny(), 0).unwrap();
        net.zero_output_layer();
        let out = net.predict(&photo(5, 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn l1_cases() {
        let a = Tensor::full(Shape::new(1, 1, 1, 1), 0.25);
        let b = Tensor::full(Shape::new(1, 1, 1, 1), 0.75);
        assert_eq!(l1_loss(&a, &b).unwrap().0, 0.5);
        assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        assert_eq!(l1_loss(&a, &a).unwrap().1.data(), &[0.0]);
    }

    #[test]
    fn params_round_trip() {
        let mut net = ContentNet::new(tiny(), 1).unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v + 0.5).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[1..]).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = ContentNet::new(tiny(), 2).unwrap();
        let x = stack(&[
            &ContentInput::build(&photo(6, 8)).unwrap(),
            &ContentInput::build(&photo(7, 8)).unwrap(),
        ])
        .unwrap();
        let trace = net.trace(&x, BnMode::Train).unwrap();
        // Target far from the output keeps every residual away from the kink.
        let target = trace.output.map(|v| v + 3.0);
        let (_, gout) = l1_loss(&trace.output, &target).unwrap();
        let analytic = net.backward(&trace, &gout).unwrap();
        let p0 = net.params();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coords: Vec<usize> = (0..30).map(|_| rng.random_range(0..p0.len())).collect();
        let mut probe = net.clone();
        let numeric = central_difference_at(&p0, &coords, 1e-5, |p| {
            probe.set_params(p).unwrap();
            let out = probe.trace(&x, BnMode::Train).unwrap().output;
            l1_loss(&out, &target).unwrap().0
        });
        let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        let err = relative_error(&a, &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.sktf");
        let mut net = ContentNet::new(tiny(), 3).unwrap();
        let trace = net
            .trace(&ContentInput::build(&photo(9, 8)).unwrap(), BnMode::Train)
            .unwrap();
        net.update_running_stats(&trace);
        net.save(&path).unwrap();
        assert_eq!(ContentNet::load(&path).unwrap(), net);
    }

    #[test]
    fn checkpoint_without_arch_rejected() {
        let mut f = ContentNet::new(tiny(), 3).unwrap().to_tensor_file();
        f.records.retain(|r| r.name != "arch");
        assert!(ContentNet::from_tensor_file(&f).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<Sample> = (0..3)
            .map(|i| Sample::from_pair(&photo(10 + i, 8), &photo(20 + i, 8)).unwrap())
            .collect();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        };
        let run = || train(ContentNet::new(tiny(), 5).unwrap(), &data, &opts, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.iter().all(|s| s.train_loss.is_finite()));
        assert!(train(ContentNet::new(tiny(), 5).unwrap(), &[], &opts, |_| {}).is_err());
    }
}
