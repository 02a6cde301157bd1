#![allow(dead_code)]

use std::path::PathBuf;

use facesketch::tensorfile::{Normalization, Record, TensorFile};
use facesketch::vgg::{synthetic_weight_file, VggWeights};
use facesketch::{Shape, Tensor};

pub const FIXTURE_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];
pub const FIXTURE_SEED: u64 = 7;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture_weights_path() -> PathBuf {
    fixture_dir().join("vgg19_narrow.sktf")
}

pub fn probe_path() -> PathBuf {
    fixture_dir().join("conv1_1_probe.sktf")
}

pub fn imagenet_norm() -> Normalization {
    Normalization {
        mean: vec![0.485, 0.456, 0.406],
        scale: vec![1.0 / 0.229, 1.0 / 0.224, 1.0 / 0.225],
    }
}

/// The generator behind the checked-in weight fixture.
pub fn fixture_weight_file() -> TensorFile {
    synthetic_weight_file(FIXTURE_WIDTHS, FIXTURE_SEED, imagenet_norm())
}

pub fn fixture_vgg() -> VggWeights {
    VggWeights::load(&fixture_weights_path()).expect("checked-in weight fixture")
}

/// Reference conv1_1: the unfolded RGB layer applied to the gray image
/// replicated into three channels, zero padding, then ReLU. Each channel is
/// normalized with the channel-averaged mean and scale.
pub fn naive_rgb_conv1_1(file: &TensorFile, image: &Tensor) -> Tensor {
    let w = file.get("conv1_1.weight").unwrap().to_tensor().unwrap();
    let b = &file.get("conv1_1.bias").unwrap().data;
    let n = &file.normalization;
    let m = n.mean.iter().sum::<f64>() / n.mean.len() as f64;
    let s = n.scale.iter().sum::<f64>() / n.scale.len() as f64;
    let ws = w.shape();
    let is = image.shape();
    Tensor::from_fn(Shape::new(1, ws.n, is.h, is.w), |_, o, y, x| {
        let mut acc = b[o];
        for c in 0..ws.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if yy < 0 || xx < 0 || yy >= is.h as isize || xx >= is.w as isize {
                        continue;
                    }
                    let v = s * (image.at(0, 0, yy as usize, xx as usize) - m);
                    acc += w.at(o, c, ky, kx) * v;
                }
            }
        }
        acc.max(0.0)
    })
}

pub fn probe_image() -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| {
        ((y * 8 + x) as f64 * 0.37).sin() * 0.5 + 0.5
    })
}

/// The generator behind the checked-in conv1_1 probe fixture.
pub fn probe_file() -> TensorFile {
    let image = probe_image();
    let act = naive_rgb_conv1_1(&fixture_weight_file(), &image);
    let mut f = TensorFile::new(Normalization::identity(1));
    f.push(Record::from_tensor("image", &image));
    f.push(Record::from_tensor("conv1_1", &act));
    f
}

/// Canvas side used by the end-to-end fixtures.
pub const SMALL_CANVAS: usize = 96;

/// Config for a 96-pixel canvas using the checked-in weights.
pub fn small_config(manifest: &std::path::Path) -> facesketch::pipeline::SynthesisConfig {
    facesketch::pipeline::SynthesisConfig {
        canvas: SMALL_CANVAS,
        left_eye: [36.0, 40.0],
        right_eye: [60.0, 40.0],
        region: [32, 32, 48, 48],
        max_iters: 40,
        vgg_weights: Some(fixture_weights_path()),
        exemplars: Some(manifest.to_path_buf()),
        ..Default::default()
    }
}

/// Smooth face-like test image with a seed-dependent pattern.
pub fn synthetic_photo(seed: u64, h: usize, w: usize) -> Tensor {
    let f = seed as f64 * 0.7 + 1.0;
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        (0.5 + 0.3 * (f * 6.0 * u).sin() * (f * 4.0 * v + 0.3).cos() + 0.1 * (20.0 * u * v).sin())
            .clamp(0.0, 1.0)
    })
}

/// Sketch-like counterpart: darkened edges of the photo on a light background.
pub fn synthetic_sketch(photo: &Tensor) -> Tensor {
    let s = photo.shape();
    Tensor::from_fn(s, |_, _, y, x| {
        let gx = photo.at(0, 0, y, (x + 1).min(s.w - 1)) - photo.at(0, 0, y, x.saturating_sub(1));
        let gy = photo.at(0, 0, (y + 1).min(s.h - 1), x) - photo.at(0, 0, y.saturating_sub(1), x);
        (0.9 - 4.0 * (gx * gx + gy * gy).sqrt() - 0.2 * (1.0 - photo.at(0, 0, y, x)))
            .clamp(0.0, 1.0)
    })
}

/// Writes `pairs` photo/sketch PNGs plus one test photo and a manifest into
/// `dir`. Eyes sit on the small canvas's canonical points, scaled to `size`.
/// Returns the manifest path.
pub fn write_dataset(dir: &std::path::Path, pairs: usize, size: usize) -> PathBuf {
    use facesketch::pipeline::image_io::save_gray;
    let k = size as f64 / SMALL_CANVAS as f64;
    let eyes = format!("{}\t{}\t{}\t{}", 36.0 * k, 40.0 * k, 60.0 * k, 40.0 * k);
    let mut manifest = String::from("# photo\tsketch\tlx\tly\trx\try\n");
    for i in 0..pairs {
        let photo = synthetic_photo(i as u64, size, size);
        save_gray(&photo, &dir.join(format!("photo{i}.png"))).unwrap();
        save_gray(
            &synthetic_sketch(&photo),
            &dir.join(format!("sketch{i}.png")),
        )
        .unwrap();
        manifest.push_str(&format!("photo{i}.png\tsketch{i}.png\t{eyes}\n"));
    }
    save_gray(&synthetic_photo(99, size, size), &dir.join("test.png")).unwrap();
    manifest.push_str(&format!("test.png\t-\t{eyes}\n"));
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}
