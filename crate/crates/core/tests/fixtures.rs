mod common;

use common::*;
use facesketch::tensorfile::TensorFile;
use facesketch::vgg::{StyleLayer, VggWeights};

/// Rewrites the checked-in fixtures. Run with `--ignored` after changing a generator.
#[test]
#[ignore]
fn regenerate_fixtures() {
    std::fs::create_dir_all(fixture_dir()).unwrap();
    fixture_weight_file()
        .write(&fixture_weights_path())
        .unwrap();
    probe_file().write(&probe_path()).unwrap();
}

#[test]
fn weight_fixture_is_reproducible() {
    let on_disk = std::fs::read(fixture_weights_path()).unwrap();
    assert_eq!(on_disk, fixture_weight_file().to_bytes());
    let probe = std::fs::read(probe_path()).unwrap();
    assert_eq!(probe, probe_file().to_bytes());
}

#[test]
fn weight_fixture_layout() {
    let f = TensorFile::read(&fixture_weights_path()).unwrap();
    assert_eq!(f.records.len(), 26);
    assert_eq!(f.get("conv1_1.weight").unwrap().dims, vec![8, 3, 3, 3]);
    assert_eq!(f.normalization.mean.len(), 3);
    let vgg = fixture_vgg();
    assert_eq!(vgg.widths(), FIXTURE_WIDTHS);
    assert!(!vgg.is_canonical());
    assert_eq!(vgg.provenance.len(), 64);
}

#[test]
fn frozen_conv1_1_activation_reproduces() {
    let probe = TensorFile::read(&probe_path()).unwrap();
    let image = probe.get("image").unwrap().to_tensor().unwrap();
    let expected = probe.get("conv1_1").unwrap().to_tensor().unwrap();
    let vgg = VggWeights::load(&fixture_weights_path()).unwrap();
    let got = vgg.forward(&image, StyleLayer::Conv1_1).unwrap();
    let got = got.tap(StyleLayer::Conv1_1).unwrap();
    assert_eq!(got.shape(), expected.shape());
    assert!(got.max_abs_diff(&expected) < 1e-6);
}

#[test]
fn tensor_file_round_trip_is_byte_identical() {
    let bytes = std::fs::read(fixture_weights_path()).unwrap();
    let f = TensorFile::from_bytes(&bytes).unwrap();
    assert_eq!(f.to_bytes(), bytes);
}
