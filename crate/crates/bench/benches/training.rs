use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mrtl_core::data::{encode_at, generate};
use mrtl_core::model::SpatialModel;
use mrtl_core::tensor::{cp_als, cp_reconstruct};
use mrtl_core::{
    mrtl_train, CpFactors, CriterionConfig, CriterionKind, FactoredModel, FullTensorModel, Grid, RegConfig,
    ResolutionSchedule, RunOptions, SyntheticSpec, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn minibatch_gradients(c: &mut Criterion) {
    let spec = SyntheticSpec { n_samples: 2000, ..SyntheticSpec::benchmark(0) };
    let (ds, _) = generate(&spec).unwrap();
    let batch = encode_at(&ds, &spec.grid_b, &spec.grid_c).unwrap()[..32].to_vec();
    let dims = (spec.n_tasks, spec.grid_b.cell_count(), spec.grid_c.cell_count());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reg = RegConfig { l2_dense: 1e-4, l1_sparse: 1e-4 };
    let full = FullTensorModel::zeros(spec.n_tasks, spec.grid_b, spec.grid_c);
    let fac = FactoredModel::new(
        CpFactors::random_uniform(dims, 2, 0.5, &mut rng),
        CpFactors::random_uniform(dims, 2, 0.5, &mut rng),
        vec![0.0; spec.n_tasks],
        spec.grid_b,
        spec.grid_c,
    )
    .unwrap();
    let mut g = c.benchmark_group("loss_and_grad_batch32_32x32x8x8");
    g.bench_function("full", |b| b.iter(|| full.loss_and_grad(&batch, &reg).unwrap()));
    g.bench_function("factored_rank2+2", |b| b.iter(|| fac.loss_and_grad(&batch, &reg).unwrap()));
    g.finish();
}

fn als(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = cp_reconstruct(&CpFactors::random_uniform((8, 64, 16), 4, 1.0, &mut rng));
    c.bench_function("cp_als_8x64x16_rank4", |b| b.iter(|| cp_als(&t, 4, 200, 1e-10, 0).unwrap()));
}

fn short_run(c: &mut Criterion) {
    let spec = SyntheticSpec { n_samples: 5000, ..SyntheticSpec::benchmark(0) };
    let (ds, _) = generate(&spec).unwrap();
    let (train, _) = ds.split(0.2, 0);
    let schedule = ResolutionSchedule::dyadic(
        Grid::new(4, 4, 8.0, [0.0, 0.0]).unwrap(),
        Grid::new(1, 1, 8.0, [0.0, 0.0]).unwrap(),
        4,
        2,
    )
    .unwrap();
    let mut crit = CriterionConfig::new(CriterionKind::EntropyThreshold);
    crit.tau_s = Some(1e-3);
    let mut cfg = TrainConfig::new(0.035, crit, 2, 2);
    cfg.max_steps_per_stage = 200;
    cfg.eval_every = None;
    c.bench_function("mrtl_train_4_stages", |b| {
        b.iter_batched(
            RunOptions::default,
            |opts| mrtl_train(&schedule, &train, &cfg, opts).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = minibatch_gradients, als, short_run
}
criterion_main!(benches);
