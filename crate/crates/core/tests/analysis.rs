use prodial_core::analysis::{dominance_metrics, layer_sweep, t_det};
use prodial_core::checkpoint::Checkpoint;
use prodial_core::linalg::matmul;
use prodial_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

#[test]
fn recovers_known_transform_64x32() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(&mut rng, 64, 32);
        let t_star = gaussian(&mut rng, 32, 32);
        let est = t_det(&w, &matmul(&w, &t_star).unwrap()).unwrap();
        assert!(!est.rank_deficient);
        let err = est.t.sub(&t_star).unwrap().max_abs();
        assert!(err <= 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn identity_and_diagonal_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = gaussian(&mut rng, 10, 6);
    let est = t_det(&w, &w).unwrap();
    assert!(est.t.sub(&Matrix::identity(6)).unwrap().max_abs() <= 1e-8);

    let d = Matrix::from_diag(&[0.9, 1.1]);
    let est = t_det(&Matrix::identity(2), &d).unwrap();
    assert!(est.t.sub(&d).unwrap().max_abs() <= 1e-12);
    let m = dominance_metrics(&est.t).unwrap();
    assert!(m.offdiag_l1_mass <= 1e-12);
}

#[test]
fn wide_matrix_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = gaussian(&mut rng, 3, 5);
    assert!(t_det(&w, &w).unwrap().rank_deficient);
}

#[test]
fn all_ones_ratio_is_one_over_n() {
    for n in 1..8 {
        let m = dominance_metrics(&Matrix::ones(n, n)).unwrap();
        assert!((m.dominance_ratio - 1.0 / n as f64).abs() <= 1e-15);
    }
    assert!(dominance_metrics(&Matrix::ones(2, 3)).is_err());
}

fn checkpoint(tensors: Vec<(&str, Matrix)>) -> Checkpoint {
    let mut c = Checkpoint::new(serde_json::Value::Null, 0, 0);
    for (n, m) in tensors {
        c.push(n, m);
    }
    c
}

#[test]
fn sweep_of_identical_checkpoints_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pre = checkpoint(vec![
        ("blocks.0.w_in", gaussian(&mut rng, 16, 4)),
        ("blocks.0.a_log", gaussian(&mut rng, 8, 2)),
        ("blocks.0.w_out", gaussian(&mut rng, 4, 8)),
    ]);
    let report = layer_sweep(&pre, &pre, true).unwrap();
    assert_eq!(report.aggregate.count, 2);
    let (tall, wide) = (&report.reports[0], &report.reports[1]);
    assert!(!tall.rank_deficient);
    let t = tall.t_det.as_ref().unwrap();
    assert!(t.sub(&Matrix::identity(4)).unwrap().max_abs() <= 1e-8);
    assert!(tall.metrics.dominance_ratio > 1.0 - 1e-8);
    // the wide out-projector only gets a projection onto its row space
    assert!(wide.rank_deficient);
    let w = pre.get("blocks.0.w_out").unwrap();
    let wt = matmul(w, wide.t_det.as_ref().unwrap()).unwrap();
    assert!(wt.sub(w).unwrap().max_abs() <= 1e-8);
}

#[test]
fn sweep_recovers_synthetic_diagonal_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = gaussian(&mut rng, 24, 8);
    let d_star = Matrix::from_fn(8, 8, |i, j| {
        if i == j {
            1.0 + rng.gen_range(-0.3..0.3)
        } else {
            0.01 * rng.sample::<f64, _>(StandardNormal)
        }
    });
    let pre = checkpoint(vec![("layer0.w_proj", w.clone())]);
    let fine = checkpoint(vec![("layer0.w_proj", matmul(&w, &d_star).unwrap())]);
    let report = layer_sweep(&pre, &fine, false).unwrap();
    let want = dominance_metrics(&d_star).unwrap();
    let got = report.reports[0].metrics;
    assert!((got.dominance_ratio - want.dominance_ratio).abs() <= 1e-10);
    assert!(got.dominance_ratio > 0.8);
    assert!(report.reports[0].t_det.is_none());
}

#[test]
fn sweep_lists_every_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pre = checkpoint(vec![
        ("blocks.0.w_in", gaussian(&mut rng, 8, 4)),
        ("blocks.1.w_in", gaussian(&mut rng, 8, 4)),
        ("blocks.2.w_in", gaussian(&mut rng, 8, 4)),
    ]);
    let fine = checkpoint(vec![
        ("blocks.0.w_in", gaussian(&mut rng, 8, 4)),
        ("blocks.2.w_in", gaussian(&mut rng, 8, 3)),
    ]);
    let msg = layer_sweep(&pre, &fine, false).unwrap_err().to_string();
    assert!(msg.contains("blocks.1.w_in"), "{msg}");
    assert!(msg.contains("blocks.2.w_in"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recovery_property(d_in in 1usize..=64, extra in 0usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_out = (d_in + extra).min(64);
        let w = gaussian(&mut rng, d_out, d_in);
        let t_star = gaussian(&mut rng, d_in, d_in);
        let est = t_det(&w, &matmul(&w, &t_star).unwrap()).unwrap();
        prop_assume!(!est.rank_deficient);
        let err = est.t.sub(&t_star).unwrap().max_abs();
        prop_assert!(err <= 1e-8, "err {err:e}");
    }

    #[test]
    fn ratio_in_unit_interval(n in 1usize..=12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = dominance_metrics(&gaussian(&mut rng, n, n)).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.dominance_ratio));
    }
}
