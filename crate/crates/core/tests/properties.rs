//! Randomized properties of the diagnostics, dataset plumbing, evaluation
//! and trainer.

mod common;

use mfedch::dataset::{read_labels_csv, read_matrix_csv, split_indices, write_labels_csv, write_matrix_csv};
use mfedch::diagnostics::{
    column_sum_residual, column_sum_residual_unchecked, laplacian_equivalence_gap, laplacian_gap_bound,
    normalize_columns, scatter_matrix,
};
use mfedch::trainer::ModelMeta;
use mfedch::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random `W` whose columns sum to 1. Entries are shifted positive so no
/// column sum sits near zero before rescaling.
fn l1_normalized(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(n, n, |_, _| {
        rng.random_range(0.05..1.0) + 0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    let raw = raw.map(f64::abs).add_scalar(0.01);
    normalize_columns(&raw).unwrap()
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian(rng, d, d).qr().q()
}

fn model_from(projections: Vec<DMatrix<f64>>) -> Model {
    Model {
        projections,
        hyper: Hyperparams::default(),
        meta: ModelMeta {
            seed: 0,
            iterations: 0,
            final_loss: 0.0,
            converged: false,
            wall_clock_secs: 0.0,
        },
    }
}

#[test]
fn scatter_is_symmetric_and_matches_triple_loop() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let w = gaussian(&mut rng, n, n);
        let s = scatter_matrix(&w).unwrap().s;
        for i in 0..n {
            for k in 0..n {
                let mut wwt = 0.0;
                for j in 0..n {
                    wwt += w[(i, j)] * w[(k, j)];
                }
                let expect = w[(i, k)] + w[(k, i)] - wwt;
                assert!((s[(i, k)] - expect).abs() <= 1e-12, "seed {seed} ({i},{k})");
                assert!((s[(i, k)] - s[(k, i)]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn column_sum_identity_over_normalized_w() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=4);
        let w = l1_normalized(&mut rng, n);
        let y = gaussian(&mut rng, d, n).scale(rng.random_range(0.1..10.0));
        let residual = column_sum_residual(&w).unwrap();
        assert!(residual <= 1e-10, "seed {seed}: residual {residual:e}");
        let gap = laplacian_equivalence_gap(&y, &w).unwrap();
        assert!(gap <= laplacian_gap_bound(&y), "seed {seed}: gap {gap:e}");
    }
}

#[test]
fn unnormalized_fixture_breaks_column_sum_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w = gaussian(&mut rng, 6, 6);
    assert!(column_sum_residual_unchecked(&w) > 1e-3);
    assert!(column_sum_residual(&w).is_err());
}

#[test]
fn split_partitions_every_class() {
    let ds = synth_blobs(&BlobSpec::new(2, 4, 9, vec![3, 2], 1.0, 5)).unwrap();
    for r in 0..20 {
        let spec = SplitSpec {
            per_class: 1 + r as usize % 8,
            seed: 11,
            repeat_index: r,
        };
        let (train, test) = split_indices(&ds, &spec).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.n_samples()).collect::<Vec<_>>());
        let labels = ds.labels().unwrap();
        for c in 0..4 {
            assert_eq!(train.iter().filter(|&&i| labels[i] == c).count(), spec.per_class);
        }
    }
}

#[test]
fn knn_invariant_under_isometry() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=4);
        let (n1, n2) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let train = gaussian(&mut rng, d, n1);
        let test = gaussian(&mut rng, d, n2);
        let tl: Vec<usize> = (0..n1).map(|_| rng.random_range(0..3)).collect();
        let sl: Vec<usize> = (0..n2).map(|_| rng.random_range(0..3)).collect();
        let q = orthogonal(&mut rng, d);
        let shift = gaussian(&mut rng, d, 1);
        let move_all = |x: &DMatrix<f64>| {
            let mut y = &q * x;
            for mut c in y.column_iter_mut() {
                c += &shift;
            }
            y
        };
        let a = knn_accuracy(&train, &tl, &test, &sl, 1).unwrap();
        let b = knn_accuracy(&move_all(&train), &tl, &move_all(&test), &sl, 1).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn project_is_linear_and_fuse_sums_views() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.random_range(1..=5), rng.random_range(1..=5)];
        let d = rng.random_range(1..=dims[0].min(dims[1]));
        let n = rng.random_range(2..=7);
        let model = model_from(dims.iter().map(|&dm| gaussian(&mut rng, dm, d)).collect());
        let xs: Vec<DMatrix<f64>> = dims.iter().map(|&dm| gaussian(&mut rng, dm, n)).collect();
        let xs2: Vec<DMatrix<f64>> = dims.iter().map(|&dm| gaussian(&mut rng, dm, n)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let comb: Vec<DMatrix<f64>> = xs.iter().zip(&xs2).map(|(x, x2)| x * a + x2 * b).collect();
        let ds = |v: Vec<DMatrix<f64>>| MultiViewDataset::new(v, None).unwrap();
        let y1 = project(&model, &ds(xs.clone())).unwrap();
        let y2 = project(&model, &ds(xs2)).unwrap();
        let yc = project(&model, &ds(comb)).unwrap();
        for m in 0..2 {
            let expect = &y1[m] * a + &y2[m] * b;
            assert!((&yc[m] - expect).amax() <= 1e-12 * (1.0 + yc[m].amax()));
        }
        let fused = fuse(&model, &ds(xs)).unwrap();
        assert_eq!(fused, &y1[0] + &y1[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_ignores_positive_rescaling(
        u in prop::collection::vec(-10.0f64..10.0, 1..6),
        c in 1e-3f64..1e3,
        tau in 0.1f64..5.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..u.len()).map(|_| rng.sample(StandardNormal)).collect();
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
        let a = cosine_sim(&u, &v, tau, 0.0).unwrap();
        let b = cosine_sim(&scaled, &v, tau, 0.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn matrix_csv_round_trip_is_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
        scale_exp in -30i32..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, rows, cols) * 10f64.powi(scale_exp);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_matrix_csv(&path, &x).unwrap();
        prop_assert_eq!(read_matrix_csv(&path).unwrap(), x);
    }

    #[test]
    fn labels_csv_round_trip(labels in prop::collection::vec(0usize..1000, 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        write_labels_csv(&path, &labels).unwrap();
        prop_assert_eq!(read_labels_csv(&path).unwrap(), labels);
    }
}

#[test]
fn adam_moves_each_coordinate_at_most_twice_the_rate() {
    let ds = synth_blobs(&BlobSpec::new(2, 3, 4, vec![4, 3], 0.5, 3)).unwrap();
    let h = Hyperparams {
        d: 2,
        ..Hyperparams::default()
    };
    let mut state = init_state(&ds, &h, 9).unwrap();
    let bound = 2.0 * h.gamma;
    for it in 0..60 {
        let before = state.clone();
        sweep_w(&mut state, &ds, &h, SweepMode::GaussSeidel).unwrap();
        step_p(&mut state, &ds, &h).unwrap();
        let dp = (state.p.stacked() - before.p.stacked()).amax();
        assert!(dp <= bound, "iteration {it}: P moved {dp:e}");
        for (a, b) in state.w.views().iter().zip(before.w.views()) {
            let dw = (a - b).amax();
            assert!(dw <= bound, "iteration {it}: W moved {dw:e}");
        }
    }
}

#[test]
fn fit_is_bit_reproducible() {
    let ds = synth_blobs(&BlobSpec::new(2, 3, 4, vec![4, 3], 0.5, 3)).unwrap();
    let h = Hyperparams {
        max_iters: 40,
        ..Hyperparams::default()
    };
    let a = fit(&ds, &h, 4).unwrap();
    let b = fit(&ds, &h, 4).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.model.projections, b.model.projections);
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_matches_single_thread_pool() {
    let ds = synth_blobs(&BlobSpec::new(3, 3, 4, vec![4, 3, 5], 0.5, 8)).unwrap();
    let h = Hyperparams {
        max_iters: 25,
        ..Hyperparams::default()
    };
    let opts = FitOptions {
        mode: SweepMode::Jacobi,
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let seq = one.install(|| fit_with(&ds, &h, 2, opts).unwrap());
    let par = fit_with(&ds, &h, 2, opts).unwrap();
    assert_eq!(seq.state, par.state);
    let p = seq.state.p.clone();
    let w = seq.state.w.clone();
    let g_seq = one.install(|| grad_p(&p, &w, &ds, &h).unwrap());
    assert_eq!(g_seq, grad_p(&p, &w, &ds, &h).unwrap());
}
