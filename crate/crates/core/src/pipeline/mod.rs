//! End-to-end synthesis: align, content image, style target, optimization, restore.

pub mod align;
pub mod config;
pub mod image_io;
pub mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::content::ContentNet;
use crate::error::{Error, Result};
use crate::sketch::{optimize_sketch, OptimState};
use crate::style::{estimate_style, ExemplarSet, StyleEstimate};
use crate::tensor::Tensor;
use crate::tensorfile::{sha256_hex, TensorFile};
use crate::vgg::{FeaturePyramid, VggWeights};

use align::{Alignment, Canvas, Eyes};
pub use config::{Preset, SynthesisConfig};
pub use manifest::{DatasetManifest, ManifestRecord};

/// Reads a photo/sketch pair and aligns both with the record's eyes.
pub fn load_aligned_pair(rec: &ManifestRecord, canvas: &Canvas) -> Result<(Tensor, Tensor)> {
    let sketch_path = rec
        .sketch
        .as_ref()
        .ok_or_else(|| Error::invalid("load_aligned_pair", "record has no sketch"))?;
    let photo = image_io::load_gray(&rec.photo)?;
    let sketch = image_io::load_gray(sketch_path)?;
    if sketch.shape() != photo.shape() {
        return Err(Error::shape(
            "load_aligned_pair",
            format!("{} sized like its photo", sketch_path.display()),
            sketch.shape(),
        ));
    }
    let s = photo.shape();
    let a = Alignment::new(s.h, s.w, Some(rec.eyes), canvas)?;
    Ok((a.align(&photo)?, a.align(&sketch)?))
}

/// On-disk store of sketch pyramids. Keys hash the weights together with the sketch bytes and canvas geometry.
#[derive(Debug, Clone)]
pub struct ExemplarCache {
    pub dir: PathBuf,
}

impl ExemplarCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ExemplarCache { dir })
    }

    pub fn key(vgg: &VggWeights, sketch_hash: &str, eyes: Eyes, canvas: &Canvas) -> String {
        let mut h = Sha256::new();
        h.update(vgg.provenance.as_bytes());
        h.update(b"|");
        h.update(sketch_hash.as_bytes());
        h.update(format!(
            "|{:?}|{:?}|{}|{:?}",
            eyes, canvas.eyes, canvas.size, vgg.pooling
        ));
        hex::encode(h.finalize())
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.sktf"))
    }

    pub fn get(&self, key: &str) -> Result<Option<FeaturePyramid>> {
        let p = self.path_for(key);
        if !p.exists() {
            return Ok(None);
        }
        let f = TensorFile::read(&p)?;
        Ok(Some(FeaturePyramid::from_tensor_file(&f)?))
    }

    pub fn put(&self, key: &str, pyramid: &FeaturePyramid) -> Result<()> {
        // Write then rename so concurrent readers never see a partial file.
        let tmp = self.dir.join(format!("{key}.tmp{}", std::process::id()));
        pyramid.to_tensor_file().write(&tmp)?;
        let dst = self.path_for(key);
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}

/// Builds the exemplar set from every manifest record that has a sketch.
/// Returns the set and the number of pyramids served from the cache.
pub fn load_exemplars(
    manifest: &DatasetManifest,
    canvas: &Canvas,
    vgg: &VggWeights,
    cache: Option<&ExemplarCache>,
) -> Result<(ExemplarSet, usize)> {
    let mut set = ExemplarSet::new();
    let mut hits = 0;
    for rec in manifest.pairs() {
        let (photo, sketch) = load_aligned_pair(rec, canvas)?;
        let pyramid = match cache {
            Some(c) => {
                let sketch_path = rec.sketch.as_ref().expect("pair");
                let bytes = std::fs::read(sketch_path).map_err(|e| Error::io(sketch_path, e))?;
                let key = ExemplarCache::key(vgg, &sha256_hex(&bytes), rec.eyes, canvas);
                match c.get(&key)? {
                    Some(p) if p.image_size() == (canvas.size, canvas.size) => {
                        hits += 1;
                        p
                    }
                    _ => {
                        let p = vgg.extract(&sketch)?;
                        c.put(&key, &p)?;
                        p
                    }
                }
            }
            None => vgg.extract(&sketch)?,
        };
        set.push(photo, sketch, pyramid)?;
    }
    if set.is_empty() {
        return Err(Error::invalid(
            "load_exemplars",
            "manifest lists no photo-sketch pairs",
        ));
    }
    Ok((set, hits))
}

/// Everything produced by one synthesis run.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Final sketch in the source frame.
    pub sketch: Tensor,
    /// Final sketch on the canvas, before restoring.
    pub canvas_sketch: Tensor,
    pub aligned_photo: Tensor,
    pub content: Tensor,
    pub style: StyleEstimate,
    pub optim: OptimState,
}

/// Loaded models and exemplars, shareable across runs.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub config: SynthesisConfig,
    pub vgg: VggWeights,
    /// Without a content network the aligned photo serves as the content image.
    pub content_net: Option<ContentNet>,
    pub exemplars: ExemplarSet,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn check_canvas(name: &'static str, t: &Tensor, size: usize) -> Result<()> {
    let s = t.shape();
    if (s.n, s.c, s.h, s.w) != (1, 1, size, size) {
        return Err(Error::shape(name, format!("1x1x{size}x{size}"), s).in_stage(name));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(name).in_stage(name));
    }
    Ok(())
}

impl Synthesizer {
    /// Loads everything `config` points at. The content network is optional.
    pub fn from_config(config: SynthesisConfig) -> Result<Self> {
        stage("config", config.validate())?;
        let mut vgg = stage(
            "load-weights",
            config
                .require(&config.vgg_weights, "vgg_weights")
                .and_then(VggWeights::load),
        )?;
        vgg.pooling = config.pooling;
        let content_net = match &config.content_net {
            Some(p) => Some(stage("load-content-net", ContentNet::load(p))?),
            None => None,
        };
        let exemplars = stage("load-exemplars", {
            (|| {
                let manifest =
                    DatasetManifest::load(config.require(&config.exemplars, "exemplars")?)?;
                let cache = match &config.exemplar_cache {
                    Some(d) => Some(ExemplarCache::new(d)?),
                    None => None,
                };
                Ok(load_exemplars(&manifest, &config.canvas(), &vgg, cache.as_ref())?.0)
            })()
        })?;
        Ok(Synthesizer {
            config,
            vgg,
            content_net,
            exemplars,
        })
    }

    /// Synthesizes a sketch for a grayscale photo. With `debug_dir`, intermediates
    /// and the loss log are written there.
    pub fn synthesize(
        &self,
        photo: &Tensor,
        eyes: Option<Eyes>,
        debug_dir: Option<&Path>,
    ) -> Result<Synthesis> {
        let cfg = &self.config;
        let canvas = cfg.canvas();
        let n = canvas.size;
        if let Some(d) = debug_dir {
            stage(
                "debug",
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
            )?;
        }
        let s = photo.shape();
        let alignment = stage("align", Alignment::new(s.h, s.w, eyes, &canvas))?;
        let aligned = stage("align", alignment.align(photo))?;
        check_canvas("align", &aligned, n)?;

        let content = match &self.content_net {
            Some(net) => stage("content", net.predict(&aligned))?,
            None => aligned.clone(),
        };
        check_canvas("content", &content, n)?;

        let style = stage(
            "style",
            estimate_style(&aligned, &self.exemplars, &self.vgg, &cfg.style_options()),
        )?;

        let optim = stage("optimize", {
            let mut log_file = match debug_dir {
                Some(d) => {
                    let p = d.join("loss.tsv");
                    Some(BufWriter::new(
                        File::create(&p).map_err(|e| Error::io(&p, e))?,
                    ))
                }
                None => None,
            };
            let r = optimize_sketch(
                &content,
                &style.grams,
                &self.vgg,
                &cfg.sketch_options(),
                log_file.as_mut().map(|w| w as &mut dyn Write),
            );
            if let Some(mut w) = log_file {
                w.flush().map_err(|e| Error::io("loss.tsv", e))?;
            }
            r
        })?;
        check_canvas("optimize", &optim.image, n)?;

        let sketch = stage("restore", alignment.restore(&optim.image))?;
        if let Some(d) = debug_dir {
            stage(
                "debug",
                write_debug(d, &aligned, &content, &style, &optim.image),
            )?;
        }
        Ok(Synthesis {
            sketch,
            canvas_sketch: optim.image.clone(),
            aligned_photo: aligned,
            content,
            style,
            optim,
        })
    }
}

fn write_debug(
    dir: &Path,
    aligned: &Tensor,
    content: &Tensor,
    style: &StyleEstimate,
    sketch: &Tensor,
) -> Result<()> {
    image_io::save_gray(aligned, &dir.join("aligned.png"))?;
    image_io::save_gray(content, &dir.join("content.png"))?;
    image_io::save_gray(sketch, &dir.join("canvas_sketch.png"))?;
    if let Some(c) = &style.composite {
        image_io::save_gray(c, &dir.join("style_composite.png"))?;
    }
    let p = dir.join("matches.tsv");
    let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
    let mut body = String::from("cell_row\tcell_col\tpair\trow\tcol\tcost\n");
    for (cell, m) in &style.matches {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:e}\n",
            cell.row, cell.col, m.pair_index, m.row, m.col, m.cost
        ));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&p, e))
}
