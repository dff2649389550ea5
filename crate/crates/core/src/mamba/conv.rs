//! Depthwise causal 1-D convolution.
//!
//! `v[n, c] = sum_j kernel[c, j] * u[n - k + 1 + j, c] + bias[c]`, with `u`
//! read as zero before the start of each sequence.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn check(u: &Matrix, kernel: &Matrix, seq_len: usize) -> Result<(usize, usize, usize)> {
    let (t, di) = u.shape();
    let k = kernel.cols();
    if kernel.rows() != di || k == 0 || seq_len == 0 || t % seq_len != 0 {
        return Err(Error::shape(format!(
            "causal_conv1d: input {t}x{di}, kernel {}x{k}, seq_len {seq_len}",
            kernel.rows()
        )));
    }
    Ok((t, di, k))
}

/// Convolves each run of `seq_len` rows of `u` independently.
pub fn causal_conv1d_forward(
    u: &Matrix,
    kernel: &Matrix,
    bias: &Matrix,
    seq_len: usize,
) -> Result<Matrix> {
    let (t, di, k) = check(u, kernel, seq_len)?;
    if bias.shape() != (1, di) {
        return Err(Error::shape(format!(
            "causal_conv1d: bias is {}x{}, want 1x{di}",
            bias.rows(),
            bias.cols()
        )));
    }
    let mut v = Matrix::zeros(t, di);
    for r in 0..t {
        let pos = r % seq_len;
        let out = v.row_mut(r);
        out.copy_from_slice(bias.data());
        for j in 0..k {
            // source offset back in time
            let back = k - 1 - j;
            if back > pos {
                continue;
            }
            let src = u.row(r - back);
            for ch in 0..di {
                out[ch] += kernel.get(ch, j) * src[ch];
            }
        }
    }
    Ok(v)
}

/// Gradients with respect to `(u, kernel, bias)`.
pub fn causal_conv1d_backward(
    u: &Matrix,
    kernel: &Matrix,
    g: &Matrix,
    seq_len: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    let (t, di, k) = check(u, kernel, seq_len)?;
    if g.shape() != (t, di) {
        return Err(Error::shape("causal_conv1d backward: gradient shape"));
    }
    let mut gu = Matrix::zeros(t, di);
    let mut gk = Matrix::zeros(di, k);
    let mut gb = Matrix::zeros(1, di);
    for r in 0..t {
        let pos = r % seq_len;
        let grow = g.row(r);
        for (o, v) in gb.data_mut().iter_mut().zip(grow) {
            *o += v;
        }
        for j in 0..k {
            let back = k - 1 - j;
            if back > pos {
                continue;
            }
            let src = r - back;
            for ch in 0..di {
                gk.data_mut()[ch * k + j] += grow[ch] * u.get(src, ch);
                gu.data_mut()[src * di + ch] += grow[ch] * kernel.get(ch, j);
            }
        }
    }
    Ok((gu, gk, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_tap_kernel_is_identity() {
        let u = Matrix::from_fn(5, 2, |i, j| (i * 2 + j) as f64 * 0.7 - 1.0);
        let kernel = Matrix::from_rows(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]);
        let v = causal_conv1d_forward(&u, &kernel, &Matrix::zeros(1, 2), 5).unwrap();
        assert_eq!(v, u);
    }

    #[test]
    fn zero_input_returns_bias() {
        let kernel = Matrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let bias = Matrix::row_vector(&[0.5, -1.0, 2.0]);
        let v = causal_conv1d_forward(&Matrix::zeros(6, 3), &kernel, &bias, 3).unwrap();
        for r in 0..6 {
            assert_eq!(v.row(r), bias.data());
        }
    }

    #[test]
    fn hand_convolution() {
        let u = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let kernel = Matrix::from_rows(&[&[1.0, 1.0]]);
        let v = causal_conv1d_forward(&u, &kernel, &Matrix::zeros(1, 1), 3).unwrap();
        assert_eq!(v.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn sequences_do_not_leak_into_each_other() {
        let u = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Matrix::from_rows(&[&[1.0, 1.0]]);
        let v = causal_conv1d_forward(&u, &kernel, &Matrix::zeros(1, 1), 2).unwrap();
        assert_eq!(v.data(), &[1.0, 3.0, 3.0, 7.0]);
    }

    #[test]
    fn shape_errors() {
        let u = Matrix::zeros(4, 2);
        assert!(causal_conv1d_forward(&u, &Matrix::zeros(3, 2), &Matrix::zeros(1, 2), 4).is_err());
        assert!(causal_conv1d_forward(&u, &Matrix::zeros(2, 2), &Matrix::zeros(1, 3), 4).is_err());
        assert!(causal_conv1d_forward(&u, &Matrix::zeros(2, 2), &Matrix::zeros(1, 2), 3).is_err());
    }
}
