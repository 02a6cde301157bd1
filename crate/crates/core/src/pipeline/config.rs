//! Synthesis settings, stored as flat TOML key-value pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::align::{Canvas, Eyes};
use crate::error::{Error, Result};
use crate::optim::LbfgsOptions;
use crate::sketch::{LossWeights, SketchOptions};
use crate::style::{Region, SearchWindow, StyleComposition, StyleOptions, MAX_STRIDE};
use crate::vgg::Pooling;

/// Named loss-weight settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Aligned studio photos.
    Studio,
    /// Photos in the wild: no component term.
    Wild,
}

impl Preset {
    pub fn weights(self) -> LossWeights {
        match self {
            Preset::Studio => LossWeights::default(),
            Preset::Wild => LossWeights::WILD,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "studio" => Ok(Preset::Studio),
            "wild" => Ok(Preset::Wild),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected studio or wild)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// When set, overrides `alpha`, `beta1` and `beta2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub canvas: usize,
    pub patch: usize,
    /// Search radius in pixels around a cell's own location.
    pub window: usize,
    pub step: usize,
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    /// Component region as `[x, y, width, height]`.
    pub region: [usize; 4],
    pub max_iters: usize,
    pub tol: f64,
    pub rel_tol: f64,
    pub memory: usize,
    pub pooling: Pooling,
    pub composition: StyleComposition,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vgg_weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_net: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplar_cache: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        SynthesisConfig {
            preset: None,
            alpha: w.alpha,
            beta1: w.beta1,
            beta2: w.beta2,
            canvas: 288,
            patch: 16,
            window: 16,
            step: 16,
            left_eye: [112.0, 128.0],
            right_eye: [160.0, 128.0],
            region: [112, 128, 48, 48],
            max_iters: 300,
            tol: 1e-6,
            rel_tol: 1e-8,
            memory: 10,
            pooling: Pooling::Max,
            composition: StyleComposition::FeatureSpace,
            vgg_weights: None,
            content_net: None,
            exemplars: None,
            exemplar_cache: None,
        }
    }
}

impl SynthesisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: SynthesisConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = c.preset {
            c.apply_preset(p);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut c.vgg_weights,
            &mut c.content_net,
            &mut c.exemplars,
            &mut c.exemplar_cache,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn apply_preset(&mut self, p: Preset) {
        let w = p.weights();
        self.preset = Some(p);
        self.alpha = w.alpha;
        self.beta1 = w.beta1;
        self.beta2 = w.beta2;
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn canvas(&self) -> Canvas {
        Canvas {
            size: self.canvas,
            eyes: Eyes::new(
                self.left_eye[0],
                self.left_eye[1],
                self.right_eye[0],
                self.right_eye[1],
            ),
        }
    }

    pub fn region(&self) -> Region {
        let [x, y, w, h] = self.region;
        Region::new(x, y, w, h)
    }

    pub fn style_options(&self) -> StyleOptions {
        StyleOptions {
            patch: self.patch,
            window: SearchWindow {
                radius: self.window,
                step: self.step,
            },
            region: self.region(),
            composition: self.composition,
        }
    }

    pub fn sketch_options(&self) -> SketchOptions {
        SketchOptions {
            weights: self.weights(),
            lbfgs: LbfgsOptions {
                memory: self.memory,
                max_iters: self.max_iters,
                grad_tol: self.tol,
                rel_tol: self.rel_tol,
                bounds: Some((0.0, 1.0)),
                ..LbfgsOptions::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.weights()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.canvas == 0 || !self.canvas.is_multiple_of(MAX_STRIDE) {
            return bad(format!(
                "canvas {} must be a positive multiple of {MAX_STRIDE}",
                self.canvas
            ));
        }
        if self.patch == 0
            || !self.patch.is_multiple_of(MAX_STRIDE)
            || !self.canvas.is_multiple_of(self.patch)
        {
            return bad(format!(
                "patch {} must be a multiple of {MAX_STRIDE} dividing the canvas",
                self.patch
            ));
        }
        if self.step == 0 || !self.step.is_multiple_of(MAX_STRIDE) {
            return bad(format!(
                "step {} must be a positive multiple of {MAX_STRIDE}",
                self.step
            ));
        }
        if self.memory == 0 {
            return bad("memory must be positive".into());
        }
        if !(self.tol >= 0.0 && self.rel_tol >= 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        let eyes = self.left_eye.iter().chain(&self.right_eye);
        if eyes.clone().any(|v| !v.is_finite()) || self.left_eye == self.right_eye {
            return bad("canonical eyes must be finite and distinct".into());
        }
        self.region()
            .validate(self.canvas, self.canvas)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_shipped_weights() {
        let c = SynthesisConfig::default();
        assert_eq!(
            c.weights(),
            LossWeights {
                alpha: 0.004,
                beta1: 1.0,
                beta2: 0.1
            }
        );
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut c = SynthesisConfig {
            alpha: 0.1 + 0.2,
            tol: 1e-300,
            vgg_weights: Some("w.sktf".into()),
            pooling: Pooling::Average,
            composition: StyleComposition::PixelSpace,
            ..Default::default()
        };
        c.left_eye = [std::f64::consts::PI, 128.0];
        let back = SynthesisConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_overrides_weights() {
        let c = SynthesisConfig::from_toml("preset = \"wild\"\nbeta2 = 0.7\n").unwrap();
        assert_eq!(c.weights(), LossWeights::WILD);
        assert!("bogus".parse::<Preset>().is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "canvas = 100",
            "patch = 24",
            "step = 8",
            "alpha = -1.0",
            "region = [120, 128, 48, 48]",
            "region = [256, 128, 48, 48]",
            "unknown_key = 1",
            "left_eye = [160.0, 128.0]",
        ] {
            assert!(SynthesisConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "vgg_weights = \"w.sktf\"\nexemplars = \"/abs/m.tsv\"\n").unwrap();
        let c = SynthesisConfig::load(&p).unwrap();
        assert_eq!(c.vgg_weights, Some(dir.path().join("w.sktf")));
        assert_eq!(c.exemplars, Some(PathBuf::from("/abs/m.tsv")));
    }
}
