use prodial_core::linalg::{
    block_diag_assemble, block_diag_extract, matmul, pinv, softplus, BlockLayout,
};
use prodial_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn naive(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(1, 1, 1), (3, 7, 2), (17, 9, 33), (64, 64, 64)] {
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        assert!(max_diff(&matmul(&a, &b).unwrap(), &naive(&a, &b)) < 1e-12);
    }
}

#[test]
fn matmul_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, 40, 50);
    let b = random(&mut rng, 50, 30);
    assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
}

#[test]
fn matmul_associative_on_8x8() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random(&mut rng, 8, 8), random(&mut rng, 8, 8), random(&mut rng, 8, 8));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let rel = left.sub(&right).unwrap().frobenius() / left.frobenius();
        assert!(rel <= 1e-9, "seed {seed}: {rel:e}");
    }
}

#[test]
fn pinv_of_tall_matrix_is_left_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&mut rng, 8, 3);
    let p = pinv(&w).unwrap();
    let wpw = matmul(&matmul(&w, &p).unwrap(), &w).unwrap();
    assert!(max_diff(&wpw, &w) <= 1e-8);
    assert!(max_diff(&matmul(&p, &w).unwrap(), &Matrix::identity(3)) <= 1e-10);
}

fn penrose(w: &Matrix) -> f64 {
    let p = pinv(w).unwrap();
    let wp = matmul(w, &p).unwrap();
    let pw = matmul(&p, w).unwrap();
    let e1 = max_diff(&matmul(&wp, w).unwrap(), w);
    let e2 = max_diff(&matmul(&pw, &p).unwrap(), &p);
    let e3 = max_diff(&wp.transpose(), &wp);
    let e4 = max_diff(&pw.transpose(), &pw);
    e1.max(e2).max(e3).max(e4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn penrose_identities(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, rows, cols);
        prop_assert!(penrose(&w) <= 1e-8);
    }

    #[test]
    fn softplus_odd_part_is_identity(x in -20.0f64..=20.0) {
        prop_assert!((softplus(x) - softplus(-x) - x).abs() <= 1e-12);
    }

    #[test]
    fn block_assemble_extract_round_trip(bs in 1usize..=4, nb in 1usize..=5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = BlockLayout::new(bs * nb, nb).unwrap();
        let blocks: Vec<Matrix> = (0..nb).map(|_| random(&mut rng, bs, bs)).collect();
        let d = block_diag_assemble(&blocks, layout).unwrap();
        prop_assert_eq!(block_diag_extract(&d, layout).unwrap(), blocks);
        for i in 0..bs * nb {
            for j in 0..bs * nb {
                if !layout.in_block(i, j) {
                    prop_assert_eq!(d.get(i, j), 0.0);
                }
            }
        }
    }
}
