//! Dense real-matrix kernels.
//!
//! Everything here is double precision, row-major and single-threaded.
//! Products go through `matrixmultiply::dgemm`, whose accumulation order
//! is fixed for a given build and target, so results are bit-reproducible
//! from run to run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended
    /// for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    fn zip_with(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        ensure_same_shape(self, other, what)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += k * other`
    pub fn add_scaled_assign(&mut self, other: &Matrix, k: f64) -> Result<()> {
        ensure_same_shape(self, other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn row_scale(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.rows {
            return Err(Error::shape(format!(
                "row_scale: {} factors for {} rows",
                s.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for (i, &k) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }

    /// Multiplies column `j` by `s[j]`.
    pub fn col_scale(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.cols {
            return Err(Error::shape(format!(
                "col_scale: {} factors for {} columns",
                s.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &k) in out.row_mut(i).iter_mut().zip(s) {
                *v *= k;
            }
        }
        Ok(out)
    }

    /// Euclidean norm of each column.
    pub fn col_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v * v;
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(Error::shape(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                self.rows
            )));
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {}) out of {} columns",
                start + len,
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(out)
    }
}

pub(crate) fn ensure_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `op(a) * op(b)` where `op` optionally transposes, without materialising
/// the transpose.
pub fn gemm(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Result<Matrix> {
    let (m, k, rsa, csa) = match ta {
        Trans::No => (a.rows, a.cols, a.cols as isize, 1),
        Trans::Yes => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Trans::No => (b.rows, b.cols, b.cols as isize, 1),
        Trans::Yes => (b.cols, b.rows, 1, b.cols as isize),
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: {}x{}{} times {}x{}{}",
            a.rows,
            a.cols,
            if ta == Trans::Yes { "^T" } else { "" },
            b.rows,
            b.cols,
            if tb == Trans::Yes { "^T" } else { "" },
        )));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    // SAFETY: pointers come from live Vecs whose lengths match the
    // dimensions and strides computed above; `out` does not alias inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Standard product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Trans::No, b, Trans::No)
}

/// Moore-Penrose pseudo-inverse through the SVD.
///
/// Singular values below `max(m, n) * sigma_max * 1e-12` are treated as zero.
pub fn pinv(w: &Matrix) -> Result<Matrix> {
    Ok(pinv_with_rank(w)?.0)
}

/// Pseudo-inverse together with the numerical rank used to build it.
pub fn pinv_with_rank(w: &Matrix) -> Result<(Matrix, usize)> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(Error::shape("pinv of an empty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::Numerical("pinv: non-finite input".into()));
    }
    let dm = nalgebra::DMatrix::from_row_slice(m, n, &w.data);
    let svd = dm
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("SVD of {m}x{n} matrix did not converge")))?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numerical("SVD did not return singular vectors".into())),
    };
    let sigma = svd.singular_values;
    let sigma_max = sigma.iter().fold(0.0_f64, |a, &s| a.max(s));
    let tau = m.max(n) as f64 * sigma_max * 1e-12;
    let mut rank = 0;
    // pinv = V * diag(1/sigma) * U^T, accumulated term by term
    let mut out = Matrix::zeros(n, m);
    for (r, &s) in sigma.iter().enumerate() {
        if s <= tau {
            continue;
        }
        rank += 1;
        let inv = 1.0 / s;
        for i in 0..n {
            let vi = v_t[(r, i)] * inv;
            if vi == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vi * u[(j, r)];
            }
        }
    }
    Ok((out, rank))
}

/// Shape of a block-diagonal matrix: `num_blocks` square blocks of
/// `block_size` tiling a `dim x dim` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    dim: usize,
    num_blocks: usize,
    block_size: usize,
}

impl BlockLayout {
    pub fn new(dim: usize, num_blocks: usize) -> Result<Self> {
        if dim == 0 || num_blocks == 0 || dim % num_blocks != 0 {
            return Err(Error::Config(format!(
                "{num_blocks} blocks do not evenly tile dimension {dim}"
            )));
        }
        Ok(Self {
            dim,
            num_blocks,
            block_size: dim / num_blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of free entries across all blocks, `dim^2 / num_blocks`.
    pub fn entries(&self) -> usize {
        self.dim * self.block_size
    }

    /// Whether `(i, j)` falls inside one of the diagonal blocks.
    pub fn in_block(&self, i: usize, j: usize) -> bool {
        i / self.block_size == j / self.block_size
    }
}

/// Places `blocks[i]` at rows/cols `[i*bs, (i+1)*bs)`; everything else is 0.
pub fn block_diag_assemble(blocks: &[Matrix], layout: BlockLayout) -> Result<Matrix> {
    if blocks.len() != layout.num_blocks {
        return Err(Error::shape(format!(
            "expected {} blocks, got {}",
            layout.num_blocks,
            blocks.len()
        )));
    }
    let bs = layout.block_size;
    let mut out = Matrix::zeros(layout.dim, layout.dim);
    for (b, block) in blocks.iter().enumerate() {
        if block.shape() != (bs, bs) {
            return Err(Error::shape(format!(
                "block {b} is {}x{}, layout wants {bs}x{bs}",
                block.rows, block.cols
            )));
        }
        for i in 0..bs {
            let row = b * bs + i;
            out.row_mut(row)[b * bs..(b + 1) * bs].copy_from_slice(block.row(i));
        }
    }
    Ok(out)
}

/// Inverse of [`block_diag_assemble`] on the block positions.
pub fn block_diag_extract(m: &Matrix, layout: BlockLayout) -> Result<Vec<Matrix>> {
    if m.shape() != (layout.dim, layout.dim) {
        return Err(Error::shape(format!(
            "block extraction wants {0}x{0}, got {1}x{2}",
            layout.dim, m.rows, m.cols
        )));
    }
    let bs = layout.block_size;
    Ok((0..layout.num_blocks)
        .map(|b| Matrix::from_fn(bs, bs, |i, j| m.get(b * bs + i, b * bs + j)))
        .collect())
}

/// Same as [`block_diag_assemble`] but reads blocks stacked vertically in a
/// single `dim x block_size` matrix (block `b` is rows `[b*bs, (b+1)*bs)`).
pub fn block_diag_from_stacked(stacked: &Matrix, layout: BlockLayout) -> Result<Matrix> {
    let bs = layout.block_size;
    if stacked.shape() != (layout.dim, bs) {
        return Err(Error::shape(format!(
            "stacked blocks must be {}x{bs}, got {}x{}",
            layout.dim, stacked.rows, stacked.cols
        )));
    }
    let mut out = Matrix::zeros(layout.dim, layout.dim);
    for r in 0..layout.dim {
        let b = r / bs;
        out.row_mut(r)[b * bs..(b + 1) * bs].copy_from_slice(stacked.row(r));
    }
    Ok(out)
}

/// Gathers the block entries of a square matrix into stacked form.
pub fn block_diag_to_stacked(m: &Matrix, layout: BlockLayout) -> Result<Matrix> {
    if m.shape() != (layout.dim, layout.dim) {
        return Err(Error::shape("block_diag_to_stacked: wrong shape"));
    }
    let bs = layout.block_size;
    Ok(Matrix::from_fn(layout.dim, bs, |r, j| {
        m.get(r, (r / bs) * bs + j)
    }))
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise maps available through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Relu,
    Silu,
    Softplus,
    Exp,
}

impl MapKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            MapKind::Relu => relu(x),
            MapKind::Silu => silu(x),
            MapKind::Softplus => softplus(x),
            MapKind::Exp => x.exp(),
        }
    }

    /// Derivative at `x`; `relu'(0)` is 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            MapKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MapKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            MapKind::Softplus => sigmoid(x),
            MapKind::Exp => x.exp(),
        }
    }
}

pub fn elementwise(kind: MapKind, m: &Matrix) -> Matrix {
    m.map(|v| kind.apply(v))
}

/// Summary norms of a matrix. Diagonal terms run over `min(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1_offdiag: f64,
    pub l1_diag: f64,
    pub max_abs: f64,
    pub fro: f64,
}

pub fn norms(m: &Matrix) -> Norms {
    let mut l1_diag = 0.0;
    let mut l1_offdiag = 0.0;
    for i in 0..m.rows {
        for j in 0..m.cols {
            let a = m.get(i, j).abs();
            if i == j {
                l1_diag += a;
            } else {
                l1_offdiag += a;
            }
        }
    }
    Norms {
        l1_offdiag,
        l1_diag,
        max_abs: m.max_abs(),
        fro: m.frobenius(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn matmul_small_cases() {
        let b = Matrix::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        let z = Matrix::zeros(2, 2);
        let b2 = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&z, &b2).unwrap(), Matrix::zeros(2, 2));
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let expected = naive_matmul(&a, &b2);
        assert_eq!(expected, Matrix::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(matmul(&a, &b2).unwrap(), expected);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn gemm_transposes_match_explicit() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Matrix::from_fn(5, 4, |i, j| ((i + 2 * j) % 7) as f64 - 3.0);
        let got = gemm(&a, Trans::No, &b, Trans::Yes).unwrap();
        assert!(got.sub(&naive_matmul(&a, &b.transpose())).unwrap().max_abs() < 1e-13);
        let got = gemm(&a, Trans::Yes, &a, Trans::No).unwrap();
        assert!(got.sub(&naive_matmul(&a.transpose(), &a)).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn pinv_identity_and_diag() {
        let p = pinv(&Matrix::identity(4)).unwrap();
        assert!(p.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-15);
        let p = pinv(&Matrix::from_diag(&[2.0, 4.0])).unwrap();
        let expected = Matrix::from_diag(&[0.5, 0.25]);
        assert!(p.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn pinv_rank_deficient_drops_null_direction() {
        // rank-1 outer product
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let (p, rank) = pinv_with_rank(&w).unwrap();
        assert_eq!(rank, 1);
        let wpw = matmul(&matmul(&w, &p).unwrap(), &w).unwrap();
        assert!(wpw.sub(&w).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let w = Matrix::from_rows(&[&[1.0, f64::NAN]]);
        assert!(pinv(&w).unwrap_err().is_numerical());
    }

    #[test]
    fn block_layout_rejects_non_divisor() {
        assert!(BlockLayout::new(6, 4).is_err());
        assert!(BlockLayout::new(6, 0).is_err());
        let l = BlockLayout::new(6, 3).unwrap();
        assert_eq!(l.block_size(), 2);
        assert_eq!(l.entries(), 12);
    }

    #[test]
    fn block_diag_cases() {
        let layout = BlockLayout::new(3, 3).unwrap();
        let zeros = vec![Matrix::zeros(1, 1); 3];
        assert_eq!(block_diag_assemble(&zeros, layout).unwrap(), Matrix::zeros(3, 3));

        let layout = BlockLayout::new(2, 2).unwrap();
        let m = block_diag_assemble(
            &[Matrix::from_rows(&[&[3.0]]), Matrix::from_rows(&[&[-7.0]])],
            layout,
        )
        .unwrap();
        assert_eq!(m, Matrix::from_diag(&[3.0, -7.0]));

        let layout = BlockLayout::new(4, 2).unwrap();
        let b0 = Matrix::from_rows(&[&[0.3, -1.2], &[2.5, 0.7]]);
        let b1 = Matrix::from_rows(&[&[-0.4, 0.9], &[1.1, -2.2]]);
        let m = block_diag_assemble(&[b0.clone(), b1.clone()], layout).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if (i < 2) != (j < 2) {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
        }
        assert_eq!(block_diag_extract(&m, layout).unwrap(), vec![b0, b1]);
        let stacked = block_diag_to_stacked(&m, layout).unwrap();
        assert_eq!(block_diag_from_stacked(&stacked, layout).unwrap(), m);
    }

    #[test]
    fn block_diag_wrong_inputs() {
        let layout = BlockLayout::new(4, 2).unwrap();
        assert!(block_diag_assemble(&[Matrix::zeros(2, 2)], layout).is_err());
        assert!(block_diag_assemble(&[Matrix::zeros(2, 2), Matrix::zeros(1, 1)], layout).is_err());
    }

    #[test]
    fn elementwise_maps() {
        let x = Matrix::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(elementwise(MapKind::Relu, &x), Matrix::row_vector(&[0.0, 0.0, 2.0]));
        assert_eq!(silu(0.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0) - 0.693147).abs() < 1e-6);
        // overflow-safe branch
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        let a = Matrix::row_vector(&[1.0, 2.0]);
        assert!(a.hadamard(&x).is_err());
    }

    #[test]
    fn norms_cases() {
        let n = norms(&Matrix::identity(3));
        assert_eq!((n.l1_diag, n.l1_offdiag), (3.0, 0.0));
        let n = norms(&Matrix::zeros(2, 3));
        assert_eq!((n.l1_diag, n.l1_offdiag, n.max_abs, n.fro), (0.0, 0.0, 0.0, 0.0));
        let n = norms(&Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 4.0]]));
        assert_eq!(n.l1_diag, 5.0);
        assert_eq!(n.l1_offdiag, 5.0);
        assert_eq!(n.max_abs, 4.0);
        assert!((n.fro - 30f64.sqrt()).abs() < 1e-15);
    }
}
