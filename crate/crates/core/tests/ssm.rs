use prodial_core::mamba::ssm::{fused_scan_forward, phi, SERIES_THRESHOLD};
use prodial_core::mamba::{block_forward, selective_scan, zoh_discretize, BlockDims, MambaBlockParams, ScanVars, SeqTensor};
use prodial_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(e^z - 1)/z` by Taylor series, accurate for `|z| < 1e-3`.
fn phi_series(z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 2..10 {
        term *= z / k as f64;
        sum += term;
    }
    sum
}

fn closed_form(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let ratio = if z.abs() < 1e-3 { phi_series(z) } else { (z.exp() - 1.0) / z };
    (z.exp(), ratio * delta * b)
}

#[test]
fn zoh_matches_closed_form_on_grid() {
    let a_grid = [-8.0, -2.5, -1.0, -0.31, -1e-2, -1e-4, -3e-7, -1e-9, 2e-8, 1e-5, 0.4];
    let d_grid = [1e-4, 3e-3, 0.05, 0.5, 1.0, 2.7];
    let b_grid = [-1.3, 0.0, 0.7, 2.0];
    for a in a_grid {
        for delta in d_grid {
            for b in b_grid {
                let (ab, bb) = zoh_discretize(a, b, delta).unwrap();
                let (ea, eb) = closed_form(a, b, delta);
                assert!((ab - ea).abs() <= 1e-12, "a_bar at a={a}, dt={delta}");
                assert!((bb - eb).abs() <= 1e-12 * eb.abs().max(1.0), "b_bar at a={a}, dt={delta}, b={b}");
                if a < 0.0 {
                    assert!(ab > 0.0 && ab < 1.0);
                }
            }
        }
    }
}

#[test]
fn series_branch_is_continuous() {
    for side in [-1.0, 1.0] {
        let inside = side * SERIES_THRESHOLD * (1.0 - 1e-9);
        let outside = side * SERIES_THRESHOLD * (1.0 + 1e-9);
        assert!((phi(inside) - phi(outside)).abs() <= 1e-10);
        assert!((phi(inside) - phi_series(inside)).abs() <= 1e-15);
    }
}

fn unrolled(a_bar: &SeqTensor, bx: &SeqTensor, c: &Matrix, d: &Matrix, x: &Matrix) -> Matrix {
    let (l, di, n) = (a_bar.len, a_bar.channels, a_bar.states);
    let mut y = Matrix::zeros(l, di);
    for ch in 0..di {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let mut out = d.get(0, ch) * x.get(t, ch);
            for s in 0..n {
                h[s] = a_bar.get(t, ch, s) * h[s] + bx.get(t, ch, s);
                out += c.get(t, s) * h[s];
            }
            y.set(t, ch, out);
        }
    }
    y
}

fn random_tensor(rng: &mut ChaCha8Rng, l: usize, di: usize, n: usize, lo: f64, hi: f64) -> SeqTensor {
    let mut t = SeqTensor::zeros(l, di, n);
    for v in t.data.iter_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn scan_matches_unrolled_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let l = rng.gen_range(1..=16);
        let di = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4);
        let a_bar = random_tensor(&mut rng, l, di, n, 0.0, 1.0);
        let bx = random_tensor(&mut rng, l, di, n, -1.0, 1.0);
        let c = random(&mut rng, l, n);
        let d = random(&mut rng, 1, di);
        let x = random(&mut rng, l, di);
        let y = selective_scan(&a_bar, &bx, &c, &d, &x).unwrap();
        let oracle = unrolled(&a_bar, &bx, &c, &d, &x);
        assert!(y.sub(&oracle).unwrap().max_abs() <= 1e-12);
    }
}

#[test]
fn fused_scan_equals_discretise_then_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (l, di, n) = (rng.gen_range(1..=10), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random(&mut rng, l, di);
        let delta = Matrix::from_fn(l, di, |_, _| rng.gen_range(0.01..2.0));
        let a = Matrix::from_fn(di, n, |_, _| -rng.gen_range(0.1..3.0));
        let b = random(&mut rng, l, n);
        let c = random(&mut rng, l, n);
        let d = random(&mut rng, 1, di);
        let mut a_bar = SeqTensor::zeros(l, di, n);
        let mut bx = SeqTensor::zeros(l, di, n);
        for t in 0..l {
            for ch in 0..di {
                for s in 0..n {
                    let (ab, bb) = zoh_discretize(a.get(ch, s), b.get(t, s), delta.get(t, ch)).unwrap();
                    a_bar.set(t, ch, s, ab);
                    bx.set(t, ch, s, bb * x.get(t, ch));
                }
            }
        }
        let two_step = selective_scan(&a_bar, &bx, &c, &d, &x).unwrap();
        let vars = ScanVars {
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
        };
        let (fused, _) = fused_scan_forward(&vars, l).unwrap();
        assert!(fused.sub(&two_step).unwrap().max_abs() <= 1e-12);
    }
}

#[test]
fn block_is_causal_under_perturbation() {
    let dims = BlockDims {
        d_model: 4,
        d_inner: 8,
        n_state: 3,
        dt_rank: 2,
        conv_k: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = MambaBlockParams::init(dims, &mut rng).unwrap();
    let u = random(&mut rng, 9, 4);
    let base = block_forward(&p, &u).unwrap();
    for n in 0..9 {
        let mut v = u.clone();
        v.set(n, 1, v.get(n, 1) + 0.5);
        let out = block_forward(&p, &v).unwrap();
        for t in 0..n {
            assert_eq!(out.row(t), base.row(t), "position {t} changed after perturbing {n}");
        }
        assert_ne!(out.row(n), base.row(n));
    }
}
