use mrtl_core::model::SpatialModel;
use mrtl_core::mrtl::{finegrain_factors, finegrain_full};
use mrtl_core::{CpFactors, DenseTensor3, Example, FactoredModel, FeatureVector, FullTensorModel, Grid, RefinementMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A fine example and its coarse counterpart obtained through the maps.
fn paired_examples<R: Rng>(rng: &mut R, na: usize, rm_b: &RefinementMap, rm_c: &RefinementMap) -> (Example, Example) {
    let fine_b = rng.random_range(0..rm_b.fine.cell_count());
    // occupancy encoding: at most one active child per coarse context cell,
    // so coarse occupancy and the summed coarsening coincide
    let mut used = vec![false; rm_c.coarse.cell_count()];
    let mut ctx: Vec<usize> = Vec::new();
    for i in 0..rm_c.fine.cell_count() {
        let p = rm_c.parent(i).unwrap();
        if !used[p] && rng.random_bool(0.3) {
            used[p] = true;
            ctx.push(i);
        }
    }
    if ctx.is_empty() {
        ctx.push(0);
    }
    let n = ctx.len();
    let fine = Example {
        phi: FeatureVector::one_hot(rm_b.fine.cell_count(), fine_b),
        psi: FeatureVector::new(rm_c.fine.cell_count(), ctx, vec![1.0; n]).unwrap(),
        labels: vec![1.0; na],
        task_mask: vec![true; na],
    };
    let coarse = Example { phi: fine.phi.coarsen(rm_b).unwrap(), psi: fine.psi.coarsen(rm_c).unwrap(), ..fine.clone() };
    (coarse, fine)
}

fn maps(rb: usize, cb: usize, rc: usize, cc: usize, refine_c: bool) -> (RefinementMap, RefinementMap) {
    let gb = Grid::new(rb, cb, 2.0, [0.0, 0.0]).unwrap();
    let gc = Grid::new(rc, cc, 1.0, [-1.0, 0.5]).unwrap();
    let rm_c = if refine_c { gc.refine_dyadic().1 } else { RefinementMap::identity(gc) };
    (gb.refine_dyadic().1, rm_c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn full_finegrain_preserves_outputs(
        seed in any::<u64>(),
        na in 1usize..4, rb in 1usize..4, cb in 1usize..4, rc in 1usize..3, cc in 1usize..3,
        refine_c in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rm_b, rm_c) = maps(rb, cb, rc, cc, refine_c);
        let dims = (na, rm_b.coarse.cell_count(), rm_c.coarse.cell_count());
        let w = DenseTensor3::from_fn(dims, |_, _, _| rng.random_range(-3.0..3.0));
        let bias = (0..na).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = FullTensorModel::new(w, bias, rm_b.coarse, rm_c.coarse).unwrap();
        let f = finegrain_full(&m, &rm_b, &rm_c).unwrap();
        for _ in 0..100 {
            let (ce, fe) = paired_examples(&mut rng, na, &rm_b, &rm_c);
            for (x, y) in m.forward(&ce).unwrap().iter().zip(f.forward(&fe).unwrap()) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn factored_finegrain_preserves_outputs(
        seed in any::<u64>(),
        na in 1usize..4, rb in 1usize..4, cb in 1usize..4, rc in 1usize..3, cc in 1usize..3,
        kd in 1usize..4, ks in 1usize..3,
        refine_c in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rm_b, rm_c) = maps(rb, cb, rc, cc, refine_c);
        let dims = (na, rm_b.coarse.cell_count(), rm_c.coarse.cell_count());
        let m = FactoredModel::new(
            CpFactors::random_uniform(dims, kd, 1.5, &mut rng),
            CpFactors::random_uniform(dims, ks, 1.5, &mut rng),
            (0..na).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rm_b.coarse,
            rm_c.coarse,
        ).unwrap();
        let f = finegrain_factors(&m, &rm_b, &rm_c).unwrap();
        prop_assert_eq!(&f.dense.a, &m.dense.a);
        prop_assert_eq!(&f.sparse.a, &m.sparse.a);
        prop_assert_eq!(&f.bias, &m.bias);
        for _ in 0..100 {
            let (ce, fe) = paired_examples(&mut rng, na, &rm_b, &rm_c);
            for (x, y) in m.forward(&ce).unwrap().iter().zip(f.forward(&fe).unwrap()) {
                prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn parameter_count_grows_across_stages(rb in 1usize..4, cb in 1usize..4, na in 1usize..4) {
        let (rm_b, rm_c) = maps(rb, cb, 1, 1, true);
        let m = FullTensorModel::zeros(na, rm_b.coarse, rm_c.coarse);
        let f = finegrain_full(&m, &rm_b, &rm_c).unwrap();
        prop_assert!(f.param_count() > m.param_count());
    }
}
