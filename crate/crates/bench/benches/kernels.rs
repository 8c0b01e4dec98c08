use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use groundlab::fusion::spherical_mask;
use groundlab::harness::{evaluate, toy_example, train, RunConfig};
use groundlab::{Graph, Model, Tensor};

fn tensor(rows: usize, cols: usize, salt: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i as f64 + salt) * 0.618).sin()).collect();
    Tensor::new([rows, cols], data).unwrap()
}

fn kernels(c: &mut Criterion) {
    let (a, b) = (tensor(64, 38, 1.0), tensor(38, 64, 2.0));
    c.bench_function("matmul_fwd_bwd_64x38x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.variable(a.clone()), g.variable(b.clone()));
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z);
            g.backward(s).unwrap();
            black_box(g.grad(x).map(|v| v[0]))
        })
    });

    let logits = tensor(8, 8, 3.0);
    let centroids: Vec<[f64; 3]> = (0..8).map(|i| [i as f64 * 0.4, (i as f64).cos(), 0.5]).collect();
    let mask = spherical_mask(&centroids, 1.0);
    c.bench_function("masked_softmax_8x8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.variable(logits.clone());
            black_box(g.masked_softmax(x, Some(&mask)).unwrap())
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let model = Model::new(cfg.architecture(), 0).unwrap();
    let (scene, referral) = toy_example(0);
    let schedule = cfg.radius_schedule().unwrap();
    let objective = cfg.objective();
    c.bench_function("referral_loss_fwd_bwd_desk", |bench| {
        bench.iter(|| {
            let mut g = model.graph();
            let inst = model.encode_scene(&mut g, &scene).unwrap();
            let (loss, _) = model.referral_loss(&mut g, &scene, &inst, &referral, &schedule, &objective).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).item())
        })
    });

    let small = RunConfig {
        epochs: 1,
        train_referrals: 48,
        eval_referrals: 48,
        ..RunConfig::desk()
    };
    let (train_set, eval_set) = groundlab::harness::benchmark(&small).unwrap();
    let mut group = c.benchmark_group("harness");
    group.sample_size(10);
    group.bench_function("train_epoch_48_referrals", |bench| {
        bench.iter_batched(|| small.clone(), |cfg| black_box(train(&cfg, &train_set).unwrap().log.len()), BatchSize::LargeInput)
    });
    group.bench_function("evaluate_48_referrals", |bench| {
        bench.iter(|| black_box(evaluate(&model, &schedule, &eval_set).unwrap().overall))
    });
    group.finish();
}

criterion_group!(benches, kernels, model);
criterion_main!(benches);
