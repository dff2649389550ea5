//! Synthetic datasets.

use prodial_core::linalg::{block_diag_assemble, matmul, BlockLayout};
use prodial_core::{Error, Matrix, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{SeqConfig, Structure, TeacherConfig};

/// Mixes a tag into a seed so that independent consumers get unrelated
/// streams (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Regression onto `W* = W T*` with `W` frozen.
#[derive(Clone, Debug)]
pub struct TeacherTask {
    /// `d_out x d_in`, entries `N(0, 1/d_in)`.
    pub w: Matrix,
    /// The transform the fine-tune should find, `d_in x d_in`.
    pub t_star: Matrix,
    pub w_star: Matrix,
    /// Inputs are rows.
    pub train_u: Matrix,
    pub train_y: Matrix,
    pub test_u: Matrix,
    pub test_y: Matrix,
}

/// Block-structured transform around the identity.
fn structured_transform(rng: &mut ChaCha8Rng, cfg: &TeacherConfig) -> Result<Matrix> {
    let n = cfg.d_in;
    if cfg.structure == Structure::Full {
        let pert = gaussian(rng, n, n, cfg.diag_scale);
        return Matrix::identity(n).add(&pert);
    }
    let layout = BlockLayout::new(n, cfg.blocks)?;
    let bs = layout.block_size();
    let (diag_scale, off_std) = match cfg.structure {
        Structure::DiagDominant => (cfg.diag_scale, cfg.offdiag_std),
        _ => (0.0, cfg.diag_scale.max(cfg.offdiag_std)),
    };
    let off = Normal::new(0.0, off_std).map_err(|e| Error::Config(format!("teacher.offdiag_std: {e}")))?;
    let blocks: Vec<Matrix> = (0..cfg.blocks)
        .map(|_| {
            Matrix::from_fn(bs, bs, |i, j| {
                if i == j {
                    let dev = if diag_scale > 0.0 {
                        rng.gen_range(-diag_scale..diag_scale)
                    } else {
                        0.0
                    };
                    1.0 + dev
                } else {
                    off.sample(rng)
                }
            })
        })
        .collect();
    block_diag_assemble(&blocks, layout)
}

/// Builds the frozen weight, the target and an 80/20 split of noisy pairs.
pub fn gen_teacher_task(seed: u64, cfg: &TeacherConfig) -> Result<TeacherTask> {
    let (d_in, d_out) = (cfg.d_in, cfg.d_out);
    if d_in == 0 || d_out < d_in {
        return Err(Error::Config(format!("teacher needs 0 < d_in <= d_out, got {d_out}x{d_in}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let w = gaussian(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt());
    let mut t_star = structured_transform(&mut rng, cfg)?;
    if cfg.eps_rank > 0 && cfg.eps_scale > 0.0 {
        // eps = W b with b low rank keeps the target inside col(W)
        let p = gaussian(&mut rng, d_in, cfg.eps_rank, 1.0);
        let q = gaussian(&mut rng, cfg.eps_rank, d_in, 1.0);
        let b = matmul(&p, &q)?;
        let eps_norm = matmul(&w, &b)?.frobenius();
        let k = cfg.eps_scale * w.frobenius() / eps_norm;
        t_star.add_scaled_assign(&b, k)?;
    }
    let w_star = matmul(&w, &t_star)?;

    let n_train = cfg.samples * 4 / 5;
    let n_test = cfg.samples - n_train;
    let mut pairs = |n: usize| -> Result<(Matrix, Matrix)> {
        let u = gaussian(&mut rng, n, d_in, 1.0);
        let mut y = matmul(&u, &w_star.transpose())?;
        if cfg.noise_std > 0.0 {
            let noise = gaussian(&mut rng, n, d_out, cfg.noise_std);
            y.add_scaled_assign(&noise, 1.0)?;
        }
        Ok((u, y))
    };
    let (train_u, train_y) = pairs(n_train)?;
    let (test_u, test_y) = pairs(n_test)?;
    Ok(TeacherTask {
        w,
        t_star,
        w_star,
        train_u,
        train_y,
        test_u,
        test_y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    /// Labels moved by `c -> (c + 1) mod classes`.
    Shifted,
}

/// Token reserved as the payload marker.
pub const MARKER: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqDataset {
    pub train: Vec<SeqExample>,
    pub test: Vec<SeqExample>,
    pub classes: usize,
}

/// The label permutation of the shifted variant.
pub fn shift_label(label: usize, classes: usize) -> usize {
    (label + 1) % classes
}

/// Class of a payload: sum of token residues mod `classes`.
pub fn payload_class(payload: &[usize], classes: usize) -> usize {
    payload.iter().map(|t| t % classes).sum::<usize>() % classes
}

fn example(rng: &mut ChaCha8Rng, cfg: &SeqConfig, vocab: usize, classes: usize, class: usize) -> SeqExample {
    let len = cfg.seq_len;
    let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
    // payload slots are disjoint (marker, payload) pairs
    let mut slots: Vec<usize> = (0..len / 2).collect();
    slots.shuffle(rng);
    let mut slots = slots[..cfg.payload].to_vec();
    slots.sort_unstable();
    let mut payload: Vec<usize> = (0..cfg.payload - 1).map(|_| rng.gen_range(1..vocab)).collect();
    let partial = payload_class(&payload, classes);
    let need = (class + classes - partial) % classes;
    let last: Vec<usize> = (1..vocab).filter(|t| t % classes == need).collect();
    payload.push(*last.choose(rng).expect("every class has a token"));
    for (&slot, &p) in slots.iter().zip(&payload) {
        tokens[2 * slot] = MARKER;
        tokens[2 * slot + 1] = p;
    }
    SeqExample { tokens, label: class }
}

/// Noise sequences with marked payloads. Classes are balanced by
/// construction: example `i` has base class `i mod classes`.
pub fn gen_seq_task(seed: u64, cfg: &SeqConfig, vocab: usize, classes: usize, variant: Variant) -> Result<SeqDataset> {
    if vocab < 8 || classes < 2 || classes > vocab - 1 {
        return Err(Error::Config(format!("need vocab >= 8 and 2 <= classes < vocab, got {vocab}, {classes}")));
    }
    if cfg.seq_len < 16 || cfg.payload == 0 || 2 * cfg.payload > cfg.seq_len {
        return Err(Error::Config("need seq_len >= 16 and 1 <= payload <= seq_len/2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut make = |n: usize| -> Vec<SeqExample> {
        (0..n)
            .map(|i| {
                let mut ex = example(&mut rng, cfg, vocab, classes, i % classes);
                if variant == Variant::Shifted {
                    ex.label = shift_label(ex.label, classes);
                }
                ex
            })
            .collect()
    };
    let train = make(cfg.train_size);
    let test = make(cfg.test_size);
    Ok(SeqDataset { train, test, classes })
}
