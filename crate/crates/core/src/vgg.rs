//! VGG-19 truncated after `conv5_1`, run on single-channel images.
//!
//! The RGB first layer stored in the weight file is folded to one input channel
//! at load time by summing its three input kernels. Feature taps sit after the
//! ReLU of the first convolution in each of the five blocks.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    avgpool2x2, avgpool2x2_backward, conv2d_backward_input, conv2d_forward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, ConvLayerParams, Padding, PoolIndex, Shape, Tensor,
};
use crate::tensorfile::{Normalization, Record, TensorFile};

/// Convolution layers of VGG-19 up to and including `conv5_1`, in network order.
pub const LAYER_NAMES: [&str; 13] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4", "conv5_1",
];

/// Canonical per-block channel counts.
pub const VGG19_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

const BLOCK_OF_LAYER: [usize; 13] = [0, 0, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4];
const TAP_LAYERS: [usize; 5] = [0, 2, 4, 8, 12];

fn pooled_after(layer: usize) -> bool {
    matches!(layer, 1 | 3 | 7 | 11)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StyleLayer {
    Conv1_1,
    Conv2_1,
    Conv3_1,
    Conv4_1,
    Conv5_1,
}

impl StyleLayer {
    pub const ALL: [StyleLayer; 5] = [
        StyleLayer::Conv1_1,
        StyleLayer::Conv2_1,
        StyleLayer::Conv3_1,
        StyleLayer::Conv4_1,
        StyleLayer::Conv5_1,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Downsampling factor of the tap relative to the input image.
    pub fn stride(self) -> usize {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        LAYER_NAMES[TAP_LAYERS[self.index()]]
    }

    fn conv_index(self) -> usize {
        TAP_LAYERS[self.index()]
    }
}

impl fmt::Display for StyleLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

/// Sums the R, G and B kernels of an RGB first layer into a single-channel layer.
pub fn fold_gray_weights(rgb: &ConvLayerParams) -> Result<ConvLayerParams> {
    let s = rgb.weights.shape();
    if s.c != 3 {
        return Err(Error::invalid(
            "fold_gray_weights",
            format!("first layer must have 3 input channels, got {}", s.c),
        ));
    }
    let folded = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |o, _, y, x| {
        rgb.weights.at(o, 0, y, x) + rgb.weights.at(o, 1, y, x) + rgb.weights.at(o, 2, y, x)
    });
    ConvLayerParams::new(folded, rgb.bias.clone(), rgb.pad, rgb.stride)
}

/// Gray-input VGG convolution stack with its preprocessing convention.
#[derive(Debug, Clone)]
pub struct VggWeights {
    pub layers: Vec<ConvLayerParams>,
    /// Gray input channel is `scale * (pixel - mean)`.
    pub mean: f64,
    pub scale: f64,
    pub pooling: Pooling,
    /// SHA-256 of the weight file, or a description for in-memory weights.
    pub provenance: String,
}

impl VggWeights {
    pub fn load(path: &Path) -> Result<Self> {
        let (file, hash) = TensorFile::read_with_hash(path)?;
        Self::from_tensor_file(&file, hash).map_err(|e| match e {
            Error::InvalidArgument { msg, .. } | Error::ShapeMismatch { got: msg, .. } => {
                Error::TensorFile {
                    path: path.to_path_buf(),
                    msg,
                }
            }
            e => e,
        })
    }

    pub fn from_tensor_file(file: &TensorFile, provenance: String) -> Result<Self> {
        let op = "VggWeights";
        let mut layers = Vec::with_capacity(LAYER_NAMES.len());
        for name in LAYER_NAMES {
            let w = file
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::invalid(op, format!("missing record {name}.weight")))?
                .to_tensor()?;
            let b = file
                .get(&format!("{name}.bias"))
                .ok_or_else(|| Error::invalid(op, format!("missing record {name}.bias")))?;
            let ws = w.shape();
            if ws.h != 3 || ws.w != 3 || b.data.len() != ws.n {
                return Err(Error::invalid(
                    op,
                    format!("{name}: expected 3x3 kernels with one bias per filter, got {ws}"),
                ));
            }
            if let Some(prev) = layers.last().map(ConvLayerParams::out_channels) {
                if ws.c != prev {
                    return Err(Error::invalid(
                        op,
                        format!(
                            "{name}: {} input channels after a {prev}-channel layer",
                            ws.c
                        ),
                    ));
                }
            }
            layers.push(ConvLayerParams::new(w, b.data.clone(), Padding::Zero, 1)?);
        }
        layers[0] = fold_gray_weights(&layers[0])?;
        let norm = &file.normalization;
        if norm.mean.is_empty() || norm.mean.len() != norm.scale.len() {
            return Err(Error::invalid(op, "header lacks input normalization"));
        }
        let k = norm.mean.len() as f64;
        Ok(VggWeights {
            layers,
            mean: norm.mean.iter().sum::<f64>() / k,
            scale: norm.scale.iter().sum::<f64>() / k,
            pooling: Pooling::Max,
            provenance,
        })
    }

    /// Channel counts of the five blocks.
    pub fn widths(&self) -> [usize; 5] {
        let mut w = [0; 5];
        for (i, layer) in self.layers.iter().enumerate() {
            w[BLOCK_OF_LAYER[i]] = layer.out_channels();
        }
        w
    }

    /// True for the full-width network (64/128/256/512/512).
    pub fn is_canonical(&self) -> bool {
        self.widths() == VGG19_WIDTHS
    }

    pub fn channels(&self, layer: StyleLayer) -> usize {
        self.layers[layer.conv_index()].out_channels()
    }

    /// Sides must be multiples of the stride of the deepest layer computed.
    fn check_image(&self, op: &'static str, image: &Tensor, deepest: StyleLayer) -> Result<()> {
        let s = image.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape(op, "1x1xHxW image", s));
        }
        let k = deepest.stride();
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
            return Err(Error::invalid(
                op,
                format!(
                    "image size {}x{} must be a positive multiple of {k}",
                    s.h, s.w
                ),
            ));
        }
        Ok(())
    }

    /// Tap shapes for an image of the given size, computed without running the network.
    pub fn tap_shapes(&self, h: usize, w: usize) -> [Shape; 5] {
        StyleLayer::ALL.map(|l| Shape::new(1, self.channels(l), h / l.stride(), w / l.stride()))
    }

    /// Runs the network up to `deepest` and keeps everything backpropagation needs.
    pub fn forward(&self, image: &Tensor, deepest: StyleLayer) -> Result<VggTrace> {
        self.check_image("vgg forward", image, deepest)?;
        let input = image.map(|v| self.scale * (v - self.mean));
        let last = deepest.conv_index();
        let mut conv_inputs = Vec::with_capacity(last + 1);
        let mut outputs = Vec::with_capacity(last + 1);
        let mut pools = Vec::new();
        let mut x = input;
        for i in 0..=last {
            let h = relu(&conv2d_forward(&x, &self.layers[i])?);
            conv_inputs.push(x);
            x = if pooled_after(i) && i < last {
                match self.pooling {
                    Pooling::Max => {
                        let (p, idx) = maxpool2x2(&h)?;
                        pools.push(PoolRecord::Max(idx));
                        p
                    }
                    Pooling::Average => {
                        pools.push(PoolRecord::Average(h.shape()));
                        avgpool2x2(&h)?
                    }
                }
            } else {
                h.clone()
            };
            outputs.push(h);
        }
        Ok(VggTrace {
            conv_inputs,
            outputs,
            pools,
            scale: self.scale,
        })
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.forward(image, StyleLayer::Conv5_1)?.pyramid())
    }

    /// The conv1_1 map alone.
    pub fn conv1_1(&self, image: &Tensor) -> Result<Tensor> {
        let mut trace = self.forward(image, StyleLayer::Conv1_1)?;
        Ok(trace.outputs.swap_remove(StyleLayer::Conv1_1.conv_index()))
    }

    /// Image-space gradient of `sum over taps of <tap_grad, tap>`.
    pub fn backprop_to_image(&self, image: &Tensor, tap_grads: &TapGrads) -> Result<Tensor> {
        let deepest = match tap_grads.deepest() {
            Some(l) => l,
            None => {
                self.check_image("backprop_to_image", image, StyleLayer::Conv1_1)?;
                return Ok(Tensor::zeros(image.shape()));
            }
        };
        let trace = self.forward(image, deepest)?;
        self.backprop(&trace, tap_grads)
    }

    /// Backpropagates tap gradients through a recorded forward pass.
    pub fn backprop(&self, trace: &VggTrace, tap_grads: &TapGrads) -> Result<Tensor> {
        let last = trace.outputs.len() - 1;
        let input_shape = trace.conv_inputs[0].shape();
        for layer in StyleLayer::ALL {
            if let Some(g) = tap_grads.get(layer) {
                if layer.conv_index() > last {
                    return Err(Error::invalid(
                        "backprop",
                        format!("gradient for {layer} beyond the traced depth"),
                    ));
                }
                g.ensure_shape("backprop", trace.outputs[layer.conv_index()].shape())?;
            }
        }
        let mut grad = Tensor::zeros(trace.outputs[last].shape());
        let mut pools = trace.pools.iter().rev();
        for i in (0..=last).rev() {
            if let Some(pos) = TAP_LAYERS.iter().position(|&t| t == i) {
                if let Some(g) = tap_grads.get(StyleLayer::ALL[pos]) {
                    grad.add_assign(g)?;
                }
            }
            grad = relu_backward(&trace.outputs[i], &grad)?;
            grad = conv2d_backward_input(&trace.conv_inputs[i], &self.layers[i], &grad)?;
            if i > 0 && pooled_after(i - 1) {
                grad = match pools.next().expect("one pool record per pooled layer") {
                    PoolRecord::Max(idx) => maxpool2x2_backward(idx, &grad)?,
                    PoolRecord::Average(shape) => avgpool2x2_backward(*shape, &grad)?,
                };
            }
        }
        grad.scale(trace.scale);
        debug_assert_eq!(grad.shape(), input_shape);
        Ok(grad)
    }
}

#[derive(Debug, Clone)]
enum PoolRecord {
    Max(PoolIndex),
    Average(Shape),
}

/// Activations recorded by [`VggWeights::forward`].
#[derive(Debug, Clone)]
pub struct VggTrace {
    conv_inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    pools: Vec<PoolRecord>,
    scale: f64,
}

impl VggTrace {
    /// Tap at `layer`, if the trace reaches it.
    pub fn tap(&self, layer: StyleLayer) -> Option<&Tensor> {
        self.outputs.get(layer.conv_index())
    }

    /// All five taps; panics if the trace stops short of `conv5_1`.
    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            maps: StyleLayer::ALL.map(|l| self.tap(l).expect("trace reaches conv5_1").clone()),
        }
    }
}

/// Feature maps at the five style taps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: [Tensor; 5],
}

impl FeaturePyramid {
    pub fn get(&self, layer: StyleLayer) -> &Tensor {
        &self.maps[layer.index()]
    }

    pub fn get_mut(&mut self, layer: StyleLayer) -> &mut Tensor {
        &mut self.maps[layer.index()]
    }

    pub fn channels(&self, layer: StyleLayer) -> usize {
        self.get(layer).shape().c
    }

    /// Height and width of the image the pyramid was extracted from.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.maps[0].shape();
        (s.h, s.w)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(Normalization::identity(1));
        for l in StyleLayer::ALL {
            f.push(Record::from_tensor(l.name(), self.get(l)));
        }
        f
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let mut maps = Vec::with_capacity(5);
        for l in StyleLayer::ALL {
            let r = file
                .get(l.name())
                .ok_or_else(|| Error::invalid("FeaturePyramid", format!("missing tap {l}")))?;
            maps.push(r.to_tensor()?);
        }
        let maps: [Tensor; 5] = maps.try_into().expect("five taps");
        let (h, w) = (maps[0].shape().h, maps[0].shape().w);
        for l in StyleLayer::ALL {
            let s = maps[l.index()].shape();
            if s.n != 1 || s.h * l.stride() != h || s.w * l.stride() != w {
                return Err(Error::shape(
                    "FeaturePyramid",
                    format!("{l} at stride {} of {h}x{w}", l.stride()),
                    s,
                ));
            }
        }
        Ok(FeaturePyramid { maps })
    }
}

/// Per-tap upstream gradients; `None` stands for an all-zero gradient.
#[derive(Debug, Clone, Default)]
pub struct TapGrads {
    grads: [Option<Tensor>; 5],
}

impl TapGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, layer: StyleLayer) -> Option<&Tensor> {
        self.grads[layer.index()].as_ref()
    }

    pub fn set(&mut self, layer: StyleLayer, grad: Tensor) {
        self.grads[layer.index()] = Some(grad);
    }

    /// Adds `grad * weight` into the slot for `layer`.
    pub fn accumulate(&mut self, layer: StyleLayer, grad: &Tensor, weight: f64) -> Result<()> {
        match &mut self.grads[layer.index()] {
            Some(g) => {
                g.ensure_shape("TapGrads::accumulate", grad.shape())?;
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += weight * b;
                }
            }
            slot @ None => {
                let mut g = grad.clone();
                g.scale(weight);
                *slot = Some(g);
            }
        }
        Ok(())
    }

    /// Deepest layer carrying a gradient.
    pub fn deepest(&self) -> Option<StyleLayer> {
        StyleLayer::ALL
            .iter()
            .rev()
            .copied()
            .find(|l| self.grads[l.index()].is_some())
    }
}

/// A VGG-19-shaped weight file with He-initialized random weights and an
/// unfolded RGB first layer. Useful where the published weights are unavailable.
pub fn synthetic_weight_file(widths: [usize; 5], seed: u64, norm: Normalization) -> TensorFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = TensorFile::new(norm);
    let mut in_c = 3;
    for (i, name) in LAYER_NAMES.iter().enumerate() {
        let out_c = widths[BLOCK_OF_LAYER[i]];
        let std = (2.0 / (in_c * 9) as f64).sqrt();
        let w = Tensor::randn(Shape::new(out_c, in_c, 3, 3), std, &mut rng);
        let b = Tensor::randn(Shape::new(1, 1, 1, out_c), 0.05, &mut rng);
        file.push(Record::from_tensor(format!("{name}.weight"), &w));
        file.push(Record::vector(format!("{name}.bias"), b.data()));
        in_c = out_c;
    }
    file
}
