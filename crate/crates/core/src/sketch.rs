//! Sketch synthesis as loss minimization: content, style and component
//! terms over VGG features, minimized with bounded L-BFGS from the content image.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize, LbfgsOptions, LbfgsReport, Objective};
use crate::style::{GramSet, Region};
use crate::tensor::{gram, gram_pullback, GramMatrix, Tensor};
use crate::vgg::{FeaturePyramid, StyleLayer, TapGrads, VggWeights};

/// Weights of the content, style and component terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.004,
            beta1: 1.0,
            beta2: 0.1,
        }
    }
}

impl LossWeights {
    /// For unaligned photos: no component term.
    pub const WILD: LossWeights = LossWeights {
        alpha: 0.004,
        beta1: 1.0,
        beta2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta1, self.beta2]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid(
                "LossWeights",
                format!("weights must be finite and non-negative, got {self:?}"),
            ))
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            alpha: self.alpha * k,
            beta1: self.beta1 * k,
            beta2: self.beta2 * k,
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub component: f64,
}

/// Squared distance between two conv1_1 maps and its gradient w.r.t. `x_tap`.
pub fn content_loss(x_tap: &Tensor, c_tap: &Tensor) -> Result<(f64, Tensor)> {
    x_tap.ensure_shape("content_loss", c_tap.shape())?;
    let mut grad = x_tap.clone();
    let mut loss = 0.0;
    for (g, c) in grad.data_mut().iter_mut().zip(c_tap.data()) {
        let d = *g - c;
        loss += d * d;
        *g = 2.0 * d;
    }
    Ok((loss, grad))
}

/// `|G(F) - T|^2 / (4 M^2 N^2)` and its gradient w.r.t. `F`.
pub fn gram_loss(feature: &Tensor, target: &GramMatrix) -> Result<(f64, Tensor)> {
    let g = gram(feature)?;
    if g.channels != target.channels || g.m != target.m {
        return Err(Error::shape(
            "gram_loss",
            format!(
                "gram of {} channels over {} positions",
                target.channels, target.m
            ),
            format!("{} channels over {} positions", g.channels, g.m),
        ));
    }
    let (n, m) = (g.channels as f64, g.m as f64);
    let mut diff = g;
    let mut sq = 0.0;
    for (d, t) in diff.values.iter_mut().zip(&target.values) {
        *d -= t;
        sq += *d * *d;
    }
    let norm = 1.0 / (m * m * n * n);
    for d in &mut diff.values {
        *d *= norm;
    }
    Ok((0.25 * norm * sq, gram_pullback(feature, &diff)?))
}

/// Full-canvas Gram loss summed over the five taps.
pub fn style_loss(x: &FeaturePyramid, target: &GramSet) -> Result<(f64, TapGrads)> {
    let mut loss = 0.0;
    let mut grads = TapGrads::new();
    for l in StyleLayer::ALL {
        let (v, g) = gram_loss(x.get(l), target.full(l))?;
        loss += v;
        grads.set(l, g);
    }
    Ok((loss, grads))
}

/// Gram loss over the region crop of every tap; gradients vanish outside the region.
pub fn component_loss(
    x: &FeaturePyramid,
    target: &GramSet,
    region: Region,
) -> Result<(f64, TapGrads)> {
    if region != target.region_rect {
        return Err(Error::invalid(
            "component_loss",
            format!(
                "region {region:?} differs from the target's {:?}",
                target.region_rect
            ),
        ));
    }
    let (h, w) = x.image_size();
    region.validate(h, w)?;
    let mut loss = 0.0;
    let mut grads = TapGrads::new();
    for l in StyleLayer::ALL {
        let map = x.get(l);
        let r = region.scaled(l.stride());
        let (v, g) = gram_loss(&region.crop(map, l.stride())?, target.region(l))?;
        let mut full = Tensor::zeros(map.shape());
        full.paste(&g, r.y, r.x)?;
        loss += v;
        grads.set(l, full);
    }
    Ok((loss, grads))
}

fn add_all(into: &mut TapGrads, from: &TapGrads, weight: f64) -> Result<()> {
    for l in StyleLayer::ALL {
        if let Some(t) = from.get(l) {
            into.accumulate(l, t, weight)?;
        }
    }
    Ok(())
}

/// Total weighted loss of `x` and its gradient w.r.t. the image.
///
/// `content_tap` is the conv1_1 map of the content image. Terms with zero
/// weight are skipped and reported as 0.
pub fn total_loss_and_grad(
    x: &Tensor,
    content_tap: &Tensor,
    target: &GramSet,
    w: &LossWeights,
    vgg: &VggWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let use_style = w.beta1 > 0.0 || w.beta2 > 0.0;
    let deepest = if use_style {
        StyleLayer::Conv5_1
    } else {
        StyleLayer::Conv1_1
    };
    let trace = vgg.forward(x, deepest)?;
    let mut grads = TapGrads::new();
    let mut out = LossBreakdown::default();
    if w.alpha > 0.0 {
        let tap = trace.tap(StyleLayer::Conv1_1).expect("conv1_1 computed");
        let (v, g) = content_loss(tap, content_tap)?;
        out.content = v;
        grads.accumulate(StyleLayer::Conv1_1, &g, w.alpha)?;
    }
    if use_style {
        let pyramid = trace.pyramid();
        if w.beta1 > 0.0 {
            let (v, g) = style_loss(&pyramid, target)?;
            out.style = v;
            add_all(&mut grads, &g, w.beta1)?;
        }
        if w.beta2 > 0.0 {
            let (v, g) = component_loss(&pyramid, target, target.region_rect)?;
            out.component = v;
            add_all(&mut grads, &g, w.beta2)?;
        }
    }
    out.total = w.alpha * out.content + w.beta1 * out.style + w.beta2 * out.component;
    let grad = if grads.deepest().is_some() {
        vgg.backprop(&trace, &grads)?
    } else {
        Tensor::zeros(x.shape())
    };
    Ok((out, grad))
}

/// The sketch loss as an L-BFGS objective over flattened pixels.
pub struct SketchObjective<'a> {
    pub vgg: &'a VggWeights,
    pub content_tap: Tensor,
    pub target: &'a GramSet,
    pub weights: LossWeights,
    shape: crate::tensor::Shape,
}

impl<'a> SketchObjective<'a> {
    pub fn new(
        vgg: &'a VggWeights,
        content: &Tensor,
        target: &'a GramSet,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let content_tap = vgg.conv1_1(content)?;
        Ok(SketchObjective {
            vgg,
            content_tap,
            target,
            weights,
            shape: content.shape(),
        })
    }
}

impl Objective for SketchObjective<'_> {
    type Aux = LossBreakdown;

    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>, LossBreakdown)> {
        let image = Tensor::from_vec(self.shape, x.to_vec())?;
        let (b, g) = total_loss_and_grad(
            &image,
            &self.content_tap,
            self.target,
            &self.weights,
            self.vgg,
        )?;
        Ok((b.total, g.into_vec(), b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchOptions {
    pub weights: LossWeights,
    pub lbfgs: LbfgsOptions,
}

impl Default for SketchOptions {
    fn default() -> Self {
        SketchOptions {
            weights: LossWeights::default(),
            lbfgs: LbfgsOptions {
                bounds: Some((0.0, 1.0)),
                ..LbfgsOptions::default()
            },
        }
    }
}

/// Final image plus the optimizer record (iterations, loss history, stop reason).
#[derive(Debug, Clone)]
pub struct OptimState {
    pub image: Tensor,
    pub report: LbfgsReport<LossBreakdown>,
}

/// Header of the per-iteration loss log.
pub const LOSS_LOG_HEADER: &str = "iteration\ttotal\tcontent\tstyle\tcomponent";

/// Minimizes the sketch loss starting from the content image. When `log` is
/// given, one tab-separated line is written per accepted iterate.
pub fn optimize_sketch(
    content: &Tensor,
    target: &GramSet,
    vgg: &VggWeights,
    opts: &SketchOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<OptimState> {
    let mut obj = SketchObjective::new(vgg, content, target, opts.weights)?;
    let mut log_err = None;
    if let Some(w) = log.as_deref_mut() {
        if let Err(e) = writeln!(w, "{LOSS_LOG_HEADER}") {
            log_err = Some(e);
        }
    }
    let report = minimize(&mut obj, content.data(), &opts.lbfgs, |it| {
        if let (Some(w), None) = (log.as_deref_mut(), &log_err) {
            let b = it.aux;
            if let Err(e) = writeln!(
                w,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}",
                it.iteration, b.total, b.content, b.style, b.component
            ) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io("loss log", e));
    }
    log::debug!(
        "sketch optimization stopped after {} iterations ({:?}), loss {:e}",
        report.iterations,
        report.stop,
        report.loss
    );
    let image = Tensor::from_vec(content.shape(), report.x.clone())?;
    Ok(OptimState { image, report })
}
