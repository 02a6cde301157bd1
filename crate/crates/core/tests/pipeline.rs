mod common;

use common::*;
use facesketch::content::{ContentNet, ContentNetConfig};
use facesketch::pipeline::align::Eyes;
use facesketch::pipeline::image_io::load_gray;
use facesketch::pipeline::{load_exemplars, DatasetManifest, ExemplarCache, Synthesizer};
use facesketch::sketch::{total_loss_and_grad, LOSS_LOG_HEADER};
use facesketch::style::target_grams;
use facesketch::Error;

fn test_eyes(size: usize) -> Eyes {
    let k = size as f64 / SMALL_CANVAS as f64;
    Eyes::new(36.0 * k, 40.0 * k, 60.0 * k, 40.0 * k)
}

#[test]
fn synthesis_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 3, 120);
    let synth = Synthesizer::from_config(small_config(&manifest)).unwrap();
    assert_eq!(synth.exemplars.len(), 3);
    let photo = load_gray(&dir.path().join("test.png")).unwrap();
    let out = synth
        .synthesize(&photo, Some(test_eyes(120)), None)
        .unwrap();
    assert_eq!(out.sketch.shape(), photo.shape());
    assert_eq!(out.canvas_sketch.shape().h, SMALL_CANVAS);
    assert_eq!(out.style.matches.len(), 36);
    assert!(out.sketch.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let h = &out.optim.report.history;
    assert!(h.windows(2).all(|w| w[1] <= w[0]));
    assert!(h.last().unwrap() < &h[0], "optimizer made no progress");
}

#[test]
fn synthesis_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 96);
    let mut cfg = small_config(&manifest);
    cfg.max_iters = 10;
    let photo = load_gray(&dir.path().join("test.png")).unwrap();
    let run = || {
        Synthesizer::from_config(cfg.clone())
            .unwrap()
            .synthesize(&photo, Some(test_eyes(96)), None)
            .unwrap()
            .sketch
    };
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(run);
        let hb = s.spawn(run);
        (ha.join().unwrap(), hb.join().unwrap())
    });
    assert_eq!(a, b);
}

#[test]
fn content_network_feeds_the_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 96);
    let mut net = ContentNet::new(ContentNetConfig::default(), 3).unwrap();
    net.zero_output_layer();
    let net_path = dir.path().join("content.sktf");
    net.save(&net_path).unwrap();
    let mut cfg = small_config(&manifest);
    cfg.content_net = Some(net_path);
    cfg.max_iters = 5;
    let synth = Synthesizer::from_config(cfg).unwrap();
    let photo = load_gray(&dir.path().join("test.png")).unwrap();
    let out = synth.synthesize(&photo, Some(test_eyes(96)), None).unwrap();
    // A zeroed output layer predicts a constant image.
    let first = out.content.data()[0];
    assert!(out.content.data().iter().all(|&v| v == first));
    assert_ne!(out.content, out.aligned_photo);
}

#[test]
fn exemplar_cache_hits_on_second_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = write_dataset(dir.path(), 2, 96);
    let cfg = small_config(&manifest_path);
    let vgg = facesketch::vgg::VggWeights::load(&fixture_weights_path()).unwrap();
    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    let cache = ExemplarCache::new(dir.path().join("cache")).unwrap();
    let (cold, hits) = load_exemplars(&manifest, &cfg.canvas(), &vgg, Some(&cache)).unwrap();
    assert_eq!(hits, 0);
    let (warm, hits) = load_exemplars(&manifest, &cfg.canvas(), &vgg, Some(&cache)).unwrap();
    assert_eq!(hits, 2);
    assert_eq!(cold.pyramids, warm.pyramids);
    let entries = std::fs::read_dir(&cache.dir).unwrap().count();
    assert_eq!(entries, 2);

    // Changing the sketch bytes changes the key.
    let s0 = dir.path().join("sketch0.png");
    let img = load_gray(&s0).unwrap().map(|v| 1.0 - v);
    facesketch::pipeline::image_io::save_gray(&img, &s0).unwrap();
    let (_, hits) = load_exemplars(&manifest, &cfg.canvas(), &vgg, Some(&cache)).unwrap();
    assert_eq!(hits, 1);
}

#[test]
fn debug_dir_receives_intermediates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 96);
    let mut cfg = small_config(&manifest);
    cfg.max_iters = 3;
    cfg.composition = facesketch::style::StyleComposition::PixelSpace;
    let synth = Synthesizer::from_config(cfg).unwrap();
    let photo = load_gray(&dir.path().join("test.png")).unwrap();
    let debug = dir.path().join("debug");
    let out = synth.synthesize(&photo, None, Some(&debug)).unwrap();
    for f in [
        "aligned.png",
        "content.png",
        "canvas_sketch.png",
        "style_composite.png",
        "matches.tsv",
        "loss.tsv",
    ] {
        assert!(debug.join(f).is_file(), "{f} missing");
    }
    let matches = std::fs::read_to_string(debug.join("matches.tsv")).unwrap();
    assert_eq!(matches.lines().count(), 37);
    let log = std::fs::read_to_string(debug.join("loss.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOSS_LOG_HEADER));
    assert_eq!(lines.count(), out.optim.report.history.len());
}

fn stage_of(e: &Error) -> &'static str {
    match e {
        Error::Stage { stage, .. } => stage,
        other => panic!("expected a stage error, got {other}"),
    }
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 96);

    let mut cfg = small_config(&manifest);
    cfg.vgg_weights = Some(dir.path().join("missing.sktf"));
    let e = Synthesizer::from_config(cfg).unwrap_err();
    assert_eq!(stage_of(&e), "load-weights");
    assert!(e.to_string().contains("missing.sktf"), "{e}");

    let mut cfg = small_config(&manifest);
    cfg.content_net = Some(dir.path().join("photo0.png"));
    assert_eq!(
        stage_of(&Synthesizer::from_config(cfg).unwrap_err()),
        "load-content-net"
    );

    let mut cfg = small_config(&manifest);
    cfg.exemplars = None;
    assert_eq!(
        stage_of(&Synthesizer::from_config(cfg).unwrap_err()),
        "load-exemplars"
    );

    let mut cfg = small_config(&manifest);
    cfg.patch = 24;
    assert_eq!(
        stage_of(&Synthesizer::from_config(cfg).unwrap_err()),
        "config"
    );

    let synth = Synthesizer::from_config(small_config(&manifest)).unwrap();
    let photo = load_gray(&dir.path().join("test.png")).unwrap();
    let e = synth
        .synthesize(&photo, Some(Eyes::new(10.0, 10.0, 500.0, 10.0)), None)
        .unwrap_err();
    assert_eq!(stage_of(&e), "align");
}

#[test]
fn training_photo_reconstructs_its_style() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 96);
    let mut cfg = small_config(&manifest);
    cfg.window = 0;
    cfg.max_iters = 100;
    let synth = Synthesizer::from_config(cfg).unwrap();
    let photo = load_gray(&dir.path().join("photo0.png")).unwrap();
    let out = synth.synthesize(&photo, Some(test_eyes(96)), None).unwrap();
    assert!(out
        .style
        .matches
        .iter()
        .all(|(_, m)| m.pair_index == 0 && m.cost == 0.0));

    // Canonical eyes on a canvas-sized image: no resampling, so the target is
    // exactly the training sketch's own statistics.
    let sketch = load_gray(&dir.path().join("sketch0.png")).unwrap();
    let own = target_grams(&synth.vgg.extract(&sketch).unwrap(), synth.config.region()).unwrap();
    assert_eq!(out.style.grams, own);

    let w = synth.config.weights();
    let tap = synth.vgg.conv1_1(&out.content).unwrap();
    let start = total_loss_and_grad(&out.content, &tap, &own, &w, &synth.vgg)
        .unwrap()
        .0;
    let end = total_loss_and_grad(&out.canvas_sketch, &tap, &own, &w, &synth.vgg)
        .unwrap()
        .0;
    assert!(
        end.style < 0.9 * start.style,
        "{} -> {}",
        start.style,
        end.style
    );
    let at_sketch = total_loss_and_grad(
        &sketch,
        &synth.vgg.conv1_1(&sketch).unwrap(),
        &own,
        &w,
        &synth.vgg,
    )
    .unwrap()
    .0;
    assert!(at_sketch.total < 1e-10);
}
