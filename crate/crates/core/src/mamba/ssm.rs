//! Zero-order-hold discretisation and the selective scan.
//!
//! With a diagonal state matrix every state evolves independently, so the
//! matrix exponential in the ZOH formulas reduces to scalars:
//!
//! ```text
//! a_bar = exp(delta * a)
//! b_bar = (exp(delta * a) - 1) / (delta * a) * delta * b
//! h_n   = a_bar_n * h_{n-1} + b_bar_n * x_n
//! y_n   = <c_n, h_n> + d * x_n
//! ```

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Below this `|delta * a|` the ratio `(e^z - 1)/z` switches to its series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `(e^z - 1) / z`, continuous through `z = 0`.
#[inline]
pub fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
#[inline]
pub fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Exact ZOH for one diagonal state: returns `(a_bar, b_bar)`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::contract(format!(
            "ZOH step must be positive, got {delta}"
        )));
    }
    if !a.is_finite() || !b.is_finite() || !delta.is_finite() {
        return Err(Error::Numerical("ZOH inputs must be finite".into()));
    }
    let z = delta * a;
    Ok((z.exp(), phi(z) * delta * b))
}

/// A `(len, channels, states)` array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor {
    pub len: usize,
    pub channels: usize,
    pub states: usize,
    pub data: Vec<f64>,
}

impl SeqTensor {
    pub fn zeros(len: usize, channels: usize, states: usize) -> Self {
        Self {
            len,
            channels,
            states,
            data: vec![0.0; len * channels * states],
        }
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, s: usize) -> f64 {
        self.data[(n * self.channels + c) * self.states + s]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, s: usize, v: f64) {
        self.data[(n * self.channels + c) * self.states + s] = v;
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.len, self.channels, self.states)
    }
}

/// Runs the discrete recurrence on pre-discretised inputs with `h_0 = 0`.
///
/// `a_bar` and `bx` (the product `b_bar * x`) are `(L, d_inner, N)`; `c` is
/// `L x N`, shared by all channels; `d_skip` is `1 x d_inner`; `x` is
/// `L x d_inner`. Returns `L x d_inner`.
pub fn selective_scan(
    a_bar: &SeqTensor,
    bx: &SeqTensor,
    c: &Matrix,
    d_skip: &Matrix,
    x: &Matrix,
) -> Result<Matrix> {
    let (l, di, n) = a_bar.dims();
    if bx.dims() != (l, di, n)
        || c.shape() != (l, n)
        || d_skip.shape() != (1, di)
        || x.shape() != (l, di)
    {
        return Err(Error::shape(format!(
            "selective_scan: a_bar {:?}, bx {:?}, c {:?}, d {:?}, x {:?}",
            a_bar.dims(),
            bx.dims(),
            c.shape(),
            d_skip.shape(),
            x.shape()
        )));
    }
    let mut h = vec![0.0; di * n];
    let mut y = Matrix::zeros(l, di);
    for t in 0..l {
        for ch in 0..di {
            let mut acc = 0.0;
            for s in 0..n {
                let hs = &mut h[ch * n + s];
                *hs = a_bar.get(t, ch, s) * *hs + bx.get(t, ch, s);
                acc += c.get(t, s) * *hs;
            }
            y.set(t, ch, acc + d_skip.get(0, ch) * x.get(t, ch));
        }
    }
    Ok(y)
}

/// The six inputs of the fused discretise-and-scan kernel.
///
/// Shapes, for `T = batch * seq_len` rows: `x` and `delta` are
/// `T x d_inner`, `a` is `d_inner x N` (already negative), `b` and `c` are
/// `T x N`, `d` is `1 x d_inner`.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars<T> {
    pub x: T,
    pub delta: T,
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Copy> ScanVars<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> ScanVars<U> {
        ScanVars {
            x: f(self.x),
            delta: f(self.delta),
            a: f(self.a),
            b: f(self.b),
            c: f(self.c),
            d: f(self.d),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.x, self.delta, self.a, self.b, self.c, self.d]
    }
}

impl<T> ScanVars<T> {
    pub fn into_vec(self) -> Vec<T> {
        vec![self.x, self.delta, self.a, self.b, self.c, self.d]
    }
}

fn check_scan_shapes(v: &ScanVars<&Matrix>, seq_len: usize) -> Result<(usize, usize, usize)> {
    let (t, di) = v.x.shape();
    let n = v.a.cols();
    let ok = seq_len > 0
        && t % seq_len == 0
        && v.delta.shape() == (t, di)
        && v.a.rows() == di
        && v.b.shape() == (t, n)
        && v.c.shape() == (t, n)
        && v.d.shape() == (1, di);
    if !ok {
        return Err(Error::shape(format!(
            "scan inputs: x {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}, seq_len {seq_len}",
            v.x.shape(),
            v.delta.shape(),
            v.a.shape(),
            v.b.shape(),
            v.c.shape(),
            v.d.shape()
        )));
    }
    Ok((t, di, n))
}

/// Forward pass of the fused kernel. Returns the outputs and every hidden
/// state (`T * d_inner * N` values) for the backward pass.
pub fn fused_scan_forward(v: &ScanVars<&Matrix>, seq_len: usize) -> Result<(Matrix, Vec<f64>)> {
    let (t, di, n) = check_scan_shapes(v, seq_len)?;
    let mut states = vec![0.0; t * di * n];
    let mut y = Matrix::zeros(t, di);
    for r in 0..t {
        let first = r % seq_len == 0;
        let (b_row, c_row) = (v.b.row(r), v.c.row(r));
        for ch in 0..di {
            let dt = v.delta.get(r, ch);
            let xv = v.x.get(r, ch);
            let a_row = v.a.row(ch);
            let base = (r * di + ch) * n;
            let mut acc = 0.0;
            for s in 0..n {
                let z = dt * a_row[s];
                let a_bar = z.exp();
                debug_assert!(a_row[s] >= 0.0 || a_bar <= 1.0);
                let b_bar = phi(z) * dt * b_row[s];
                let prev = if first { 0.0 } else { states[base - di * n + s] };
                let h = a_bar * prev + b_bar * xv;
                states[base + s] = h;
                acc += c_row[s] * h;
            }
            y.set(r, ch, acc + v.d.get(0, ch) * xv);
        }
    }
    Ok((y, states))
}

/// Backpropagation through time for [`fused_scan_forward`].
pub fn fused_scan_backward(
    v: &ScanVars<&Matrix>,
    states: &[f64],
    gy: &Matrix,
    seq_len: usize,
) -> Result<ScanVars<Matrix>> {
    let (t, di, n) = check_scan_shapes(v, seq_len)?;
    if gy.shape() != (t, di) || states.len() != t * di * n {
        return Err(Error::shape("scan backward: gradient or state shape mismatch"));
    }
    let mut g = ScanVars {
        x: Matrix::zeros(t, di),
        delta: Matrix::zeros(t, di),
        a: Matrix::zeros(di, n),
        b: Matrix::zeros(t, n),
        c: Matrix::zeros(t, n),
        d: Matrix::zeros(1, di),
    };
    // carry[ch * n + s] = dL/dh_{r} contribution arriving from step r + 1
    let mut carry = vec![0.0; di * n];
    for r in (0..t).rev() {
        if r % seq_len == seq_len - 1 {
            carry.iter_mut().for_each(|c| *c = 0.0);
        }
        let first = r % seq_len == 0;
        for ch in 0..di {
            let gyv = gy.get(r, ch);
            let xv = v.x.get(r, ch);
            let dt = v.delta.get(r, ch);
            let base = (r * di + ch) * n;
            g.d.data_mut()[ch] += gyv * xv;
            let mut gx = gyv * v.d.get(0, ch);
            let mut gdt = 0.0;
            for s in 0..n {
                let a = v.a.get(ch, s);
                let bv = v.b.get(r, s);
                let cv = v.c.get(r, s);
                let h = states[base + s];
                let prev = if first { 0.0 } else { states[base - di * n + s] };

                let gh = gyv * cv + carry[ch * n + s];
                g.c.data_mut()[r * n + s] += gyv * h;

                let z = dt * a;
                let a_bar = z.exp();
                let ph = phi(z);
                let b_bar = ph * dt * bv;

                let g_abar = gh * prev;
                let g_bbar = gh * xv;
                gx += gh * b_bar;

                // b_bar = phi(z) * dt * b,  z = dt * a
                let gz = g_abar * a_bar + g_bbar * dt * bv * phi_prime(z);
                gdt += gz * a + g_bbar * ph * bv;
                g.a.data_mut()[ch * n + s] += gz * dt;
                g.b.data_mut()[r * n + s] += g_bbar * ph * dt;

                carry[ch * n + s] = gh * a_bar;
            }
            g.x.data_mut()[r * di + ch] += gx;
            g.delta.data_mut()[r * di + ch] += gdt;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_examples() {
        let (a_bar, b_bar) = zoh_discretize(-1.0, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((a_bar - 0.5).abs() < 1e-15);
        // (0.5 - 1) / (-ln 2) * ln 2 = 0.5; the ratio alone is 0.5 / ln 2
        assert!((b_bar - 0.5).abs() < 1e-15);
        assert!((phi(-std::f64::consts::LN_2) - 0.721348).abs() < 1e-6);

        let (_, b_bar) = zoh_discretize(1e-9, 1.0, 1.0).unwrap();
        assert!((b_bar - 1.0).abs() < 1e-8);

        for (a, d) in [(-3.0, 0.1), (0.5, 2.0), (1e-9, 1.0)] {
            assert_eq!(zoh_discretize(a, 0.0, d).unwrap().1, 0.0);
        }
    }

    #[test]
    fn zoh_rejects_non_positive_step() {
        assert!(matches!(zoh_discretize(-1.0, 1.0, 0.0), Err(Error::Contract(_))));
        assert!(matches!(zoh_discretize(-1.0, 1.0, -0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn phi_prime_branches_agree() {
        for z in [-1.5e-3_f64, -1e-3, 1e-3, 1.2e-3] {
            let series = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
            let closed = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((series - closed).abs() < 1e-9, "z={z}");
        }
    }

    #[test]
    fn memoryless_when_a_bar_is_zero() {
        let (l, di, n) = (3, 2, 2);
        let a_bar = SeqTensor::zeros(l, di, n);
        let mut bx = SeqTensor::zeros(l, di, n);
        for (i, v) in bx.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let c = Matrix::from_fn(l, n, |i, j| (i + 2 * j) as f64 * 0.5 - 1.0);
        let d = Matrix::row_vector(&[0.25, -0.75]);
        let x = Matrix::from_fn(l, di, |i, j| (i * di + j) as f64 - 2.0);
        let y = selective_scan(&a_bar, &bx, &c, &d, &x).unwrap();
        for t in 0..l {
            for ch in 0..di {
                let want: f64 = (0..n).map(|s| c.get(t, s) * bx.get(t, ch, s)).sum::<f64>()
                    + d.get(0, ch) * x.get(t, ch);
                assert_eq!(y.get(t, ch), want);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (l, di, n) = (4, 3, 2);
        let mut a_bar = SeqTensor::zeros(l, di, n);
        a_bar.data.iter_mut().for_each(|v| *v = 0.9);
        let y = selective_scan(
            &a_bar,
            &SeqTensor::zeros(l, di, n),
            &Matrix::ones(l, n),
            &Matrix::ones(1, di),
            &Matrix::zeros(l, di),
        )
        .unwrap();
        assert_eq!(y, Matrix::zeros(l, di));
    }

    #[test]
    fn scan_shape_mismatch() {
        let a_bar = SeqTensor::zeros(2, 2, 2);
        let err = selective_scan(
            &a_bar,
            &SeqTensor::zeros(3, 2, 2),
            &Matrix::ones(2, 2),
            &Matrix::ones(1, 2),
            &Matrix::zeros(2, 2),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
