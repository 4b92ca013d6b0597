//! Finite-difference verification of adjoints.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{CustomOp, Op, OpKind};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

const SEEDS: [u64; 3] = [11, 23, 37];

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    /// Worst relative error per seed.
    pub per_seed: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub message: Option<String>,
}

impl GradCheckReport {
    fn from_errors(name: &str, tol: f64, per_seed: Vec<f64>) -> Self {
        let max_rel_err = per_seed.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            tol,
            passed: per_seed.iter().all(|e| *e < tol),
            per_seed,
            max_rel_err,
            message: None,
        }
    }

    fn failed(name: &str, tol: f64, err: Error) -> Self {
        Self {
            name: name.to_string(),
            tol,
            per_seed: Vec::new(),
            max_rel_err: f64::INFINITY,
            passed: false,
            message: Some(err.to_string()),
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between the tape gradient and central differences
/// of the scalar map `f`, over every coordinate of every input.
pub fn max_rel_error<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]);
        let failure = std::cell::RefCell::new(None);
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == idx { probe.clone() } else { t.clone() }))
                    .collect();
                match f(&tape, &vars) {
                    Ok(v) => v.value().item(),
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input,
            h,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        for (a, b) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(worst)
}

/// Checks a composed scalar map once at the given inputs.
pub fn check_function<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let err = max_rel_error(&f, inputs, FD_STEP)?;
    Ok(GradCheckReport::from_errors("composed", tol, vec![err]))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Input shapes used when the caller passes none.
pub fn default_shapes(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![vec![3, 4], vec![3, 4]],
        OpKind::AddBroadcast => vec![vec![2, 3, 4], vec![4]],
        OpKind::MatMul => vec![vec![4, 3], vec![3, 2]],
        OpKind::LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
        OpKind::Stack0 => vec![vec![2, 3], vec![2, 3], vec![2, 3]],
        OpKind::ScaleRows => vec![vec![4, 2, 3], vec![4]],
        OpKind::SelectEntries | OpKind::TopKRenorm => vec![vec![4, 5]],
        OpKind::Fft2 => vec![vec![2, 4, 8]],
        OpKind::Ifft2Re => vec![vec![2, 3, 4, 4]],
        OpKind::Attention | OpKind::AttentionTiled => vec![vec![2, 5, 4]; 3],
        OpKind::RelL2 => vec![vec![2, 2, 4, 4]],
        OpKind::MeanAxis | OpKind::GatherRows | OpKind::ScatterAddRows | OpKind::Index0 => vec![vec![4, 3, 2]],
        _ => vec![vec![3, 4]],
    }
}

fn build_op(kind: OpKind, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<Op> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Config("grad_check needs at least one input shape".into()))?;
    let rows = first[0];
    Ok(match kind {
        OpKind::Leaf | OpKind::Custom => {
            return Err(Error::Config(format!("{} cannot be checked by name", kind.name())))
        }
        OpKind::Add => Op::Add,
        OpKind::Sub => Op::Sub,
        OpKind::Mul => Op::Mul,
        OpKind::Scale => Op::Scale(-1.7),
        OpKind::AddBroadcast => Op::AddBroadcast,
        OpKind::MatMul => Op::MatMul,
        OpKind::Reshape => Op::Reshape(vec![first.iter().product()]),
        OpKind::Permute => Op::Permute((0..first.len()).rev().collect()),
        OpKind::Relu => Op::Relu,
        OpKind::Gelu => Op::Gelu,
        OpKind::Softmax => Op::Softmax,
        OpKind::LayerNorm => Op::LayerNorm { eps: 1e-5 },
        OpKind::Sum => Op::Sum,
        OpKind::MeanAxis => Op::MeanAxis(first.len() - 1),
        OpKind::Index0 => Op::Index0(rows - 1),
        OpKind::Stack0 => Op::Stack0,
        OpKind::GatherRows => Op::GatherRows(vec![rows - 1, 0, rows - 1].into()),
        OpKind::ScatterAddRows => Op::ScatterAddRows {
            indices: (0..rows).map(|j| j / 2).collect::<Vec<_>>().into(),
            rows: rows / 2 + 1,
        },
        OpKind::ScaleRows => Op::ScaleRows,
        OpKind::SelectEntries => {
            let cols = first[1];
            Op::SelectEntries(vec![(0, 0), (rows - 1, cols - 1), (0, 0), (rows / 2, cols / 2)].into())
        }
        OpKind::TopKRenorm => {
            let cols = first[1];
            let k = cols.min(2);
            let sel = (0..rows)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..cols).collect();
                    for i in 0..k {
                        let j = rng.gen_range(i..cols);
                        idx.swap(i, j);
                    }
                    let mut chosen = idx[..k].to_vec();
                    chosen.sort_unstable();
                    chosen
                })
                .collect::<Vec<_>>();
            Op::TopKRenorm(sel.into())
        }
        OpKind::Fft2 => Op::Fft2,
        OpKind::Ifft2Re => Op::Ifft2Re,
        OpKind::Attention | OpKind::AttentionTiled => {
            let c = *first.last().expect("rank >= 1");
            let heads = if c % 2 == 0 { 2 } else { 1 };
            if kind == OpKind::Attention {
                Op::Attention { heads }
            } else {
                Op::AttentionTiled { heads, tile: 2 }
            }
        }
        OpKind::RelL2 => Op::RelL2 {
            truth: Rc::new(random_tensor(rng, first, -1.0, 1.0)),
            eps: 1e-10,
        },
    })
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn input_range(kind: OpKind) -> (f64, f64) {
    match kind {
        OpKind::TopKRenorm => (0.1, 1.0),
        _ => (-1.0, 1.0),
    }
}

fn check_op(
    name: &str,
    op: impl Fn(&mut ChaCha8Rng) -> Result<Op>,
    shapes: &[Vec<usize>],
    range: (f64, f64),
    tol: f64,
) -> GradCheckReport {
    let mut per_seed = Vec::with_capacity(SEEDS.len());
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let result = (|| {
            let op = op(&mut rng)?;
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| random_tensor(&mut rng, s, range.0, range.1))
                .collect();
            // Fixed random cotangent so the check does not rely on a plain sum.
            let probe = {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
                let out = tape.apply(op.clone(), &vars)?;
                let shape = out.shape();
                random_tensor(&mut rng, &shape, -1.0, 1.0)
            };
            let f = higher_ranked(move |tape, xs| {
                let out = tape.apply(op.clone(), xs)?;
                let w = tape.leaf(probe.clone());
                out.mul(w)?.sum()
            });
            max_rel_error(&f, &inputs, FD_STEP)
        })();
        match result {
            Ok(e) => per_seed.push(e),
            Err(e) => return GradCheckReport::failed(name, tol, e),
        }
    }
    GradCheckReport::from_errors(name, tol, per_seed)
}

/// Checks one registered op over three seeds. Empty `shapes` selects the
/// op's default shapes. Never fails: errors are reported as a failed check.
pub fn grad_check(kind: OpKind, shapes: &[Vec<usize>], tol: f64) -> GradCheckReport {
    let shapes = if shapes.is_empty() {
        default_shapes(kind)
    } else {
        shapes.to_vec()
    };
    let s = shapes.clone();
    check_op(
        kind.name(),
        move |rng| build_op(kind, &s, rng),
        &shapes,
        input_range(kind),
        tol,
    )
}

/// Checks every differentiable op in the registry at its default shapes.
pub fn grad_check_all(tol: f64) -> Vec<GradCheckReport> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&k| grad_check(k, &[], tol))
        .collect()
}

/// Checks a user-defined op.
pub fn grad_check_custom(op: Rc<dyn CustomOp>, shapes: &[Vec<usize>], tol: f64) -> GradCheckReport {
    let name = op.name().to_string();
    check_op(&name, move |_| Ok(Op::Custom(Rc::clone(&op))), shapes, (-1.0, 1.0), tol)
}
