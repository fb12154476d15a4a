use mrtl_core::data::{encode_at, generate};
use mrtl_core::model::SpatialModel;
use mrtl_core::{
    mrtl_train, CriterionConfig, CriterionKind, Grid, ResolutionSchedule, RunOptions, SyntheticSpec, TrainConfig,
};

#[test]
fn multi_resolution_training_approaches_the_generating_model() {
    let spec = SyntheticSpec {
        n_tasks: 2,
        grid_b: Grid::new(8, 8, 1.0, [0.0, 0.0]).unwrap(),
        grid_c: Grid::new(4, 4, 2.0, [0.0, 0.0]).unwrap(),
        dense_rank: 1,
        sparse_rank: 1,
        n_samples: 20_000,
        label_noise: 0.05,
        ..SyntheticSpec::benchmark(3)
    };
    let (ds, truth) = generate(&spec).unwrap();
    let (train, val) = ds.split(0.2, 0);
    let schedule = ResolutionSchedule::dyadic(
        Grid::new(2, 2, 4.0, [0.0, 0.0]).unwrap(),
        Grid::new(1, 1, 8.0, [0.0, 0.0]).unwrap(),
        3,
        2,
    )
    .unwrap();
    let mut crit = CriterionConfig::new(CriterionKind::LossConvergence);
    crit.tau_l = Some(1e-3);
    crit.check_every = 50;
    crit.window = 50;
    let mut cfg = TrainConfig::new(0.02, crit, 1, 1);
    cfg.max_steps_per_stage = 2000;
    cfg.patience = None;
    let (model, report) =
        mrtl_train(&schedule, &train, &cfg, RunOptions { val: Some(&val), ..Default::default() }).unwrap();
    assert_eq!(report.factorized_at, Some(2));

    let (gb, gc) = schedule.finest();
    let enc = encode_at(&val, &gb, &gc).unwrap();
    let oracle = truth.mean_log_loss(&enc).unwrap();
    let learned = model.as_dyn().mean_log_loss(&enc).unwrap();
    assert!(learned <= 1.05 * oracle, "learned {learned:.4} vs generator {oracle:.4}");
}
