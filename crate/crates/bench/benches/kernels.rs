use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use facesketch::sketch::{total_loss_and_grad, LossWeights};
use facesketch::style::{match_patch, target_grams, Region, SearchWindow};
use facesketch::tensor::{conv2d_backward, conv2d_forward, gram, ConvLayerParams, Padding};
use facesketch::vgg::VggWeights;
use facesketch::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(1)
}

fn fixture_vgg() -> VggWeights {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/vgg19_narrow.sktf");
    VggWeights::load(&p).expect("weight fixture")
}

fn conv(c: &mut Criterion) {
    let mut r = rng();
    let x = Tensor::uniform(Shape::new(1, 32, 72, 72), -1.0, 1.0, &mut r);
    let w = Tensor::randn(Shape::new(32, 32, 3, 3), 0.1, &mut r);
    let p = ConvLayerParams::new(w, vec![0.0; 32], Padding::Zero, 1).unwrap();
    c.bench_function("conv3x3 32->32 72x72 forward", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &p).unwrap())
    });
    let up = Tensor::uniform(Shape::new(1, 32, 72, 72), -1.0, 1.0, &mut r);
    c.bench_function("conv3x3 32->32 72x72 backward", |b| {
        b.iter(|| conv2d_backward(black_box(&x), &p, &up).unwrap())
    });
}

fn gram_bench(c: &mut Criterion) {
    let f = Tensor::uniform(Shape::new(1, 64, 144, 144), 0.0, 1.0, &mut rng());
    c.bench_function("gram 64ch 144x144", |b| {
        b.iter(|| gram(black_box(&f)).unwrap())
    });
}

fn vgg(c: &mut Criterion) {
    let vgg = fixture_vgg();
    let img = Tensor::uniform(Shape::new(1, 1, 96, 96), 0.0, 1.0, &mut rng());
    c.bench_function("narrow vgg extract 96x96", |b| {
        b.iter(|| vgg.extract(black_box(&img)).unwrap())
    });
    let target = target_grams(&vgg.extract(&img).unwrap(), Region::new(32, 32, 48, 48)).unwrap();
    let tap = vgg.conv1_1(&img).unwrap();
    let x = Tensor::uniform(Shape::new(1, 1, 96, 96), 0.0, 1.0, &mut rng());
    let w = LossWeights::default();
    c.bench_function("total loss and gradient 96x96", |b| {
        b.iter(|| total_loss_and_grad(black_box(&x), &tap, &target, &w, &vgg).unwrap())
    });
}

fn matching(c: &mut Criterion) {
    let mut r = rng();
    let photos: Vec<Tensor> = (0..10)
        .map(|_| Tensor::uniform(Shape::new(1, 1, 288, 288), 0.0, 1.0, &mut r))
        .collect();
    let patch = Tensor::uniform(Shape::new(1, 1, 16, 16), 0.0, 1.0, &mut r);
    c.bench_function("match_patch 10 exemplars window 16", |b| {
        b.iter(|| {
            match_patch(
                black_box(&patch),
                &photos,
                (128, 128),
                SearchWindow::default(),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, conv, gram_bench, vgg, matching);
criterion_main!(benches);
