use criterion::{Criterion, criterion_group, criterion_main};

use pvadv_core::attacks::{AttackConfig, fgsm, pgd};
use pvadv_core::classifier::{ArchSpec, CnnClassifier, TrainConfig};
use pvadv_core::data::synthetic_dataset;
use pvadv_core::rng::stage_rng;
use pvadv_core::tensor::Tape;
use pvadv_core::vulnmap::{VulnMap, sample_hard_mask, sample_relaxed_mask};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

fn setup() -> (CnnClassifier<f32>, pvadv_core::data::Dataset<f32>) {
    let ds = synthetic_dataset::<f32>(1, 64, 16, 16, 4).unwrap();
    let arch = ArchSpec::tiny(1, 16, 16, 4).unwrap();
    let mut model = CnnClassifier::init(arch, 1).unwrap();
    model.train(&ds, &TrainConfig { epochs: 2, batch_size: 32, lr: 1e-3, seed: 1 }).unwrap();
    (model, ds)
}

fn bench_attacks(c: &mut Criterion) {
    let (model, ds) = setup();
    let cfg = AttackConfig::new(0.3, 7);
    c.bench_function("fgsm_64x16x16", |b| {
        b.iter(|| fgsm(&model, &ds, &cfg).unwrap())
    });
    let mut pgd_cfg = cfg.clone();
    pgd_cfg.steps = 5;
    c.bench_function("pgd5_64x16x16", |b| {
        b.iter(|| pgd(&model, &ds, &pgd_cfg).unwrap())
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = stage_rng(2, "bench-conv");
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[16, 8, 28, 28]), || rng.gen_range(-1.0f32..1.0));
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[16, 8, 3, 3]), || rng.gen_range(-0.5f32..0.5));
    c.bench_function("conv2d_fwd_bwd_16x8x28x28", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
        })
    });
}

fn bench_masks(c: &mut Criterion) {
    let n = 28 * 28;
    let mut rng = stage_rng(3, "bench-mask");
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs = Array2::from_shape_vec((28, 28), raw.iter().map(|v| v / total).collect()).unwrap();
    let theta_raw = probs.mapv(|p: f64| p.ln());
    let map = VulnMap { theta_raw, probs };
    c.bench_function("hard_mask_m235_28x28", |b| {
        let mut rng = stage_rng(4, "bench-hm");
        b.iter(|| sample_hard_mask(&map.probs, 235, &mut rng).unwrap())
    });
    c.bench_function("relaxed_mask_m235_28x28", |b| {
        b.iter(|| sample_relaxed_mask(&map, 235, 0.5, 5).unwrap())
    });
}

criterion_group!(benches, bench_attacks, bench_conv, bench_masks);
criterion_main!(benches);
