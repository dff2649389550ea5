//! A fixed suite of finite-difference checks covering every differentiable
//! op, the Mamba block, the classifier and each adapter family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{AdapterSpec, Family, ProjAdapter, Projector};
use crate::autodiff::{finite_diff_check, Graph, Var};
use crate::error::Result;
use crate::linalg::{BlockLayout, Matrix, Trans};
use crate::mamba::{
    block_forward_graph, model_forward_graph, BlockDims, BlockVars, MambaBlockParams, Model,
    ModelDims, ModelVars, ScanVars,
};

/// Default finite-difference step.
pub const DEFAULT_H: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Matrix>,
    f: Objective,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Uniform entries with magnitude in `[0.2, 1)`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `out` to a scalar with fixed random weights so that every
/// output entry contributes a distinct amount.
fn probe(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.hadamard(out, w)?;
    Ok(g.sum(p))
}

fn unary(name: &'static str, x: Matrix, probe_w: Matrix, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case {
        name,
        params: vec![x],
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            probe(g, y, &probe_w)
        }),
    }
}

fn binary(
    name: &'static str,
    a: Matrix,
    b: Matrix,
    probe_w: Matrix,
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        params: vec![a, b],
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            probe(g, y, &probe_w)
        }),
    }
}

/// Sizes used by one pass over the suite.
#[derive(Clone, Copy, Debug)]
struct Shape {
    r: usize,
    c: usize,
    k: usize,
    /// Sequences per batch and their length.
    batch: usize,
    seq_len: usize,
    block: BlockDims,
    /// `(d_out, d_in, r_b)` of the adapted projector.
    proj: (usize, usize, usize),
}

const SHAPES: [Shape; 3] = [
    Shape {
        r: 3,
        c: 4,
        k: 2,
        batch: 2,
        seq_len: 4,
        block: BlockDims {
            d_model: 3,
            d_inner: 4,
            n_state: 2,
            dt_rank: 2,
            conv_k: 3,
        },
        proj: (6, 4, 2),
    },
    Shape {
        r: 1,
        c: 5,
        k: 3,
        batch: 1,
        seq_len: 6,
        block: BlockDims {
            d_model: 2,
            d_inner: 4,
            n_state: 3,
            dt_rank: 1,
            conv_k: 2,
        },
        proj: (3, 6, 3),
    },
    Shape {
        r: 4,
        c: 2,
        k: 5,
        batch: 3,
        seq_len: 3,
        block: BlockDims {
            d_model: 4,
            d_inner: 8,
            n_state: 1,
            dt_rank: 2,
            conv_k: 4,
        },
        proj: (8, 4, 1),
    },
];

/// Number of shape combinations each seed runs.
pub const SHAPE_COUNT: usize = SHAPES.len();

fn block_from(vars: &[Var]) -> BlockVars {
    BlockVars {
        w_in: vars[0],
        conv_kernel: vars[1],
        conv_bias: vars[2],
        w_x: vars[3],
        w_delta: vars[4],
        a_log: vars[5],
        d_skip: vars[6],
        w_out: vars[7],
    }
}

/// Random block with O(1) tensors. The default init keeps the SSM path
/// small, which leaves gradients near the finite-difference noise floor.
/// Step sizes stay moderate so the state does not decay to nothing.
fn random_block(dims: BlockDims, rng: &mut ChaCha8Rng) -> Result<MambaBlockParams> {
    let mut p = MambaBlockParams::init(dims, rng)?;
    for name in crate::mamba::BLOCK_TENSORS {
        let m = p.tensor_mut(name).expect("known");
        *m = uniform(rng, m.rows(), m.cols());
    }
    p.ssm.w_delta = p.ssm.w_delta.scale(0.5);
    p.ssm.a_log = p.ssm.a_log.map(|x| 0.5 * x - 1.0);
    Ok(p)
}

fn block_tensors(p: &MambaBlockParams) -> Vec<Matrix> {
    crate::mamba::BLOCK_TENSORS
        .iter()
        .map(|n| p.tensor(n).expect("known").clone())
        .collect()
}

fn adapter_case(name: &'static str, family: Family, sh: Shape, rng: &mut ChaCha8Rng) -> Result<Case> {
    let (d_out, d_in, r_b) = sh.proj;
    let spec = AdapterSpec {
        family,
        r_b_in: r_b,
        r_eps: 2,
        rank: 2,
        alpha: 3.0,
        ..AdapterSpec::default()
    };
    let w = uniform(rng, d_out, d_in);
    let mut ad = ProjAdapter::init(&spec, Projector::In, w, rng)?;
    // move off the initial point so every path carries gradient
    let names: Vec<&str> = ad.params().iter().map(|(n, _)| *n).collect();
    for n in names {
        let m = ad.param_mut(n).expect("listed");
        let fresh = match n {
            "prodial.blocks" => away_from_zero(rng, m.rows(), m.cols()).scale(0.5),
            "prodial.s" | "dora.m" => uniform(rng, m.rows(), m.cols()).map(|x| 1.0 + 0.5 * x),
            _ => uniform(rng, m.rows(), m.cols()).scale(0.5),
        };
        *m = fresh;
    }
    let params: Vec<Matrix> = ad.params().into_iter().map(|(_, m)| m.clone()).collect();
    let x = uniform(rng, sh.r + 2, d_in);
    let probe_w = uniform(rng, sh.r + 2, d_out);
    Ok(Case {
        name,
        params,
        f: Box::new(move |g, v| {
            let eff = ad.effective_graph(g, v)?;
            let xv = g.constant(x.clone());
            let y = g.matmul_nt(xv, eff)?;
            probe(g, y, &probe_w)
        }),
    })
}

fn cases(rng: &mut ChaCha8Rng, sh: Shape) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let Shape { r, c, k, .. } = sh;

    out.push(binary("matmul", uniform(rng, r, k), uniform(rng, k, c), uniform(rng, r, c), |g, a, b| {
        g.matmul(a, b)
    }));
    out.push(binary("matmul_nt", uniform(rng, r, k), uniform(rng, c, k), uniform(rng, r, c), |g, a, b| {
        g.matmul_nt(a, b)
    }));
    out.push(binary("gemm_tn", uniform(rng, k, r), uniform(rng, k, c), uniform(rng, r, c), |g, a, b| {
        g.gemm(a, Trans::Yes, b, Trans::No)
    }));
    out.push(binary("add", uniform(rng, r, c), uniform(rng, r, c), uniform(rng, r, c), |g, a, b| g.add(a, b)));
    out.push(binary("sub", uniform(rng, r, c), uniform(rng, r, c), uniform(rng, r, c), |g, a, b| g.sub(a, b)));
    out.push(binary("hadamard", uniform(rng, r, c), uniform(rng, r, c), uniform(rng, r, c), |g, a, b| {
        g.hadamard(a, b)
    }));
    out.push(binary("add_row", uniform(rng, r, c), uniform(rng, 1, c), uniform(rng, r, c), |g, a, b| {
        g.add_row(a, b)
    }));
    out.push(binary("row_scale", uniform(rng, 1, r), uniform(rng, r, c), uniform(rng, r, c), |g, s, m| {
        g.row_scale(s, m)
    }));
    out.push(binary("col_scale", uniform(rng, r, c), uniform(rng, 1, c), uniform(rng, r, c), |g, m, s| {
        g.col_scale(m, s)
    }));
    out.push(unary("scale", uniform(rng, r, c), uniform(rng, r, c), |g, a| Ok(g.scale(a, -1.7))));
    out.push(unary("relu", away_from_zero(rng, r, c), uniform(rng, r, c), |g, a| Ok(g.relu(a))));
    out.push(unary("silu", uniform(rng, r, c).scale(3.0), uniform(rng, r, c), |g, a| Ok(g.silu(a))));
    out.push(unary("softplus", uniform(rng, r, c).scale(3.0), uniform(rng, r, c), |g, a| {
        Ok(g.softplus(a))
    }));
    out.push(unary("exp", uniform(rng, r, c), uniform(rng, r, c), |g, a| Ok(g.exp(a))));
    out.push(unary("transpose", uniform(rng, r, c), uniform(rng, c, r), |g, a| Ok(g.transpose(a))));
    // a single-row column normalises to its sign, with zero gradient
    out.push(unary("col_normalize", away_from_zero(rng, r + 1, c), uniform(rng, r + 1, c), |g, a| {
        g.col_normalize(a)
    }));
    out.push(unary("sum", uniform(rng, r, c), Matrix::filled(1, 1, 0.7), |g, a| Ok(g.sum(a))));
    out.push(unary("mean", uniform(rng, r, c), Matrix::filled(1, 1, -1.3), |g, a| Ok(g.mean(a))));
    let (bt, sl) = (sh.batch, sh.seq_len);
    let probe_seg = uniform(rng, bt, c);
    out.push(Case {
        name: "segment_mean",
        params: vec![uniform(rng, bt * sl, c)],
        f: Box::new(move |g, v| {
            let y = g.segment_mean(v[0], sl)?;
            probe(g, y, &probe_seg)
        }),
    });
    let probe_slice = uniform(rng, r, 2);
    out.push(Case {
        name: "slice_cols",
        params: vec![uniform(rng, r, k + 3)],
        f: Box::new(move |g, v| {
            let y = g.slice_cols(v[0], k, 2)?;
            probe(g, y, &probe_slice)
        }),
    });
    out.push(binary("concat_rows", uniform(rng, r, c), uniform(rng, k, c), uniform(rng, r + k, c), |g, a, b| {
        g.concat_rows(&[a, b])
    }));
    let idx: Vec<usize> = (0..r + k).map(|_| rng.gen_range(0..c)).collect();
    let probe_gather = uniform(rng, r + k, k);
    out.push(Case {
        name: "gather_rows",
        params: vec![uniform(rng, c, k)],
        f: Box::new(move |g, v| {
            let y = g.gather_rows(v[0], &idx)?;
            probe(g, y, &probe_gather)
        }),
    });
    let (_, d_in, r_b) = sh.proj;
    let layout = BlockLayout::new(d_in, r_b)?;
    let probe_bd = uniform(rng, d_in, d_in);
    out.push(Case {
        name: "block_diag",
        params: vec![uniform(rng, d_in, layout.block_size())],
        f: Box::new(move |g, v| {
            let y = g.block_diag(v[0], layout)?;
            probe(g, y, &probe_bd)
        }),
    });
    out.push(Case {
        name: "squared_error",
        params: vec![uniform(rng, r, c), uniform(rng, r, c)],
        f: Box::new(|g, v| g.squared_error(v[0], v[1])),
    });
    let labels: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..c)).collect();
    out.push(Case {
        name: "softmax_cross_entropy",
        params: vec![uniform(rng, r + 2, c).scale(2.0)],
        f: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    });

    let t = bt * sl;
    let probe_conv = uniform(rng, t, c);
    out.push(Case {
        name: "causal_conv1d",
        params: vec![uniform(rng, t, c), uniform(rng, c, k), uniform(rng, 1, c)],
        f: Box::new(move |g, v| {
            let y = g.causal_conv1d(v[0], v[1], v[2], sl)?;
            probe(g, y, &probe_conv)
        }),
    });

    let (di, n) = (c, k);
    let delta = Matrix::from_fn(t, di, |_, _| rng.gen_range(0.1..1.0));
    let a = Matrix::from_fn(di, n, |_, _| -rng.gen_range(0.2..2.0));
    let probe_scan = uniform(rng, t, di);
    out.push(Case {
        name: "selective_scan",
        params: vec![
            uniform(rng, t, di),
            delta,
            a,
            uniform(rng, t, n),
            uniform(rng, t, n),
            uniform(rng, 1, di),
        ],
        f: Box::new(move |g, v| {
            let y = g.selective_scan(
                ScanVars {
                    x: v[0],
                    delta: v[1],
                    a: v[2],
                    b: v[3],
                    c: v[4],
                    d: v[5],
                },
                sl,
            )?;
            probe(g, y, &probe_scan)
        }),
    });

    let dims = sh.block;
    let block = random_block(dims, rng)?;
    let mut params = block_tensors(&block);
    params.push(uniform(rng, t, dims.d_model));
    let target = uniform(rng, t, dims.d_model);
    out.push(Case {
        name: "mamba_block",
        params,
        f: Box::new(move |g, v| {
            let bv = block_from(v);
            let y = block_forward_graph(g, &dims, &bv, v[8], sl)?;
            let tv = g.constant(target.clone());
            g.squared_error(y, tv)
        }),
    });

    let mdims = ModelDims {
        block: dims,
        layers: 1,
        vocab: 5,
        classes: 3,
    };
    let mut model = Model::init(mdims, rng)?;
    model.embedding = uniform(rng, 5, dims.d_model);
    for b in model.blocks.iter_mut() {
        *b = random_block(dims, rng)?;
    }
    model.head_w = uniform(rng, 3, dims.d_model).scale(0.5);
    model.head_b = uniform(rng, 1, 3);
    let params: Vec<Matrix> = model.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..5)).collect();
    let probe_logits = uniform(rng, bt, 3);
    out.push(Case {
        name: "model",
        params,
        f: Box::new(move |g, v| {
            let layers = (v.len() - 3) / 8;
            let vars = ModelVars {
                embedding: v[0],
                blocks: (0..layers).map(|l| block_from(&v[1 + 8 * l..9 + 8 * l])).collect(),
                head_w: v[v.len() - 2],
                head_b: v[v.len() - 1],
            };
            let logits = model_forward_graph(g, &dims, &vars, &tokens, sl)?;
            probe(g, logits, &probe_logits)
        }),
    });

    out.push(adapter_case("prodial", Family::Prodial, sh, rng)?);
    out.push(adapter_case("lora", Family::Lora, sh, rng)?);
    out.push(adapter_case("dora", Family::Dora, sh, rng)?);
    Ok(out)
}

/// Names of the suite's cases for one shape, in execution order.
pub fn case_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    cases(&mut rng, SHAPES[0])
        .expect("suite builds")
        .into_iter()
        .map(|c| c.name)
        .collect()
}

/// Runs every case at every shape for one seed with step `h`. Results are
/// named `case/shape`.
pub fn run_suite(seed: u64, h: f64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, sh) in SHAPES.iter().enumerate() {
        for c in cases(&mut rng, *sh)? {
            out.push(CaseResult {
                name: format!("{}/{i}", c.name),
                max_rel_err: finite_diff_check(&c.params, h, c.f)?,
            });
        }
    }
    Ok(out)
}
