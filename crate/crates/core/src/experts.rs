//! Expert blocks: the spectral (AFNO) shared expert, the attention expert
//! whose feed-forward sub-layer is a token-routed Sub-MoE, and the two-layer
//! MLP used inside the Sub-MoE.
//!
//! Every block is written in delta form (`block(x) − x`) so that with the
//! documented zero initialization of final projections each block is an
//! exact identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoding::uniform_init;
use crate::error::{Error, Result};
use crate::routing::{accumulate_stats, decisions_from_probs, gate_probs_var, GateParams, LoadBalanceStats, RoutingDecision};
use crate::tensor::{ComplexTensor, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Activation applied to the mixed spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralActivation {
    #[default]
    Relu,
    Gelu,
}

/// Attention core evaluation strategy. Both give the same result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "tile")]
pub enum AttentionKernel {
    #[default]
    Naive,
    Tiled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub heads: usize,
    pub kernel: AttentionKernel,
    pub spectral_activation: SpectralActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    /// `[C, r·C]`
    pub w1: T,
    pub b1: T,
    /// `[r·C, C]`
    pub w2: T,
    pub b2: T,
}

impl<T> MlpParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

impl MlpParams<Tensor> {
    /// First layer uniform, second layer zero.
    pub fn init(dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * ratio;
        Self {
            w1: uniform_init(rng, &[dim, hidden], dim),
            b1: uniform_init(rng, &[hidden], dim),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn random(dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * ratio;
        Self {
            w1: uniform_init(rng, &[dim, hidden], dim),
            b1: uniform_init(rng, &[hidden], dim),
            w2: uniform_init(rng, &[hidden, dim], hidden),
            b2: uniform_init(rng, &[dim], hidden),
        }
    }

    pub fn zeros(dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfnoParams<T> {
    pub w_re: T,
    pub w_im: T,
    pub b_re: T,
    pub b_im: T,
    pub norm_g: T,
    pub norm_b: T,
    pub mlp: MlpParams<T>,
}

impl<T> AfnoParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_re"), &self.w_re);
        f(format!("{prefix}.w_im"), &self.w_im);
        f(format!("{prefix}.b_re"), &self.b_re);
        f(format!("{prefix}.b_im"), &self.b_im);
        f(format!("{prefix}.norm_g"), &self.norm_g);
        f(format!("{prefix}.norm_b"), &self.norm_b);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AfnoParams<U> {
        AfnoParams {
            w_re: f(&self.w_re),
            w_im: f(&self.w_im),
            b_re: f(&self.b_re),
            b_im: f(&self.b_im),
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
            mlp: self.mlp.map(f),
        }
    }
}

impl AfnoParams<Tensor> {
    /// Spectral weights and the MLP output layer start at zero.
    pub fn init(dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_re: Tensor::zeros(&[dim, dim]),
            w_im: Tensor::zeros(&[dim, dim]),
            b_re: Tensor::zeros(&[dim]),
            b_im: Tensor::zeros(&[dim]),
            norm_g: Tensor::ones(&[dim]),
            norm_b: Tensor::zeros(&[dim]),
            mlp: MlpParams::init(dim, ratio, rng),
        }
    }

    pub fn random(dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_re: uniform_init(rng, &[dim, dim], dim),
            w_im: uniform_init(rng, &[dim, dim], dim),
            b_re: uniform_init(rng, &[dim], dim),
            b_im: uniform_init(rng, &[dim], dim),
            norm_g: Tensor::from_fn(&[dim], |_| rng.gen_range(0.5..1.5)),
            norm_b: uniform_init(rng, &[dim], dim),
            mlp: MlpParams::random(dim, ratio, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubMoeParams<T> {
    pub gate: GateParams<T>,
    pub routed: Vec<MlpParams<T>>,
    pub shared: Vec<MlpParams<T>>,
    pub k: usize,
}

impl<T> SubMoeParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.gate.visit(&format!("{prefix}.gate"), f);
        for (i, e) in self.routed.iter().enumerate() {
            e.visit(&format!("{prefix}.routed{i}"), f);
        }
        for (i, e) in self.shared.iter().enumerate() {
            e.visit(&format!("{prefix}.shared{i}"), f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SubMoeParams<U> {
        SubMoeParams {
            gate: self.gate.map(f),
            routed: self.routed.iter().map(|e| e.map(f)).collect(),
            shared: self.shared.iter().map(|e| e.map(f)).collect(),
            k: self.k,
        }
    }
}

impl SubMoeParams<Tensor> {
    pub fn init(dim: usize, ratio: usize, routed: usize, shared: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: GateParams::init(routed, dim, rng),
            routed: (0..routed).map(|_| MlpParams::init(dim, ratio, rng)).collect(),
            shared: (0..shared).map(|_| MlpParams::init(dim, ratio, rng)).collect(),
            k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub norm1_g: T,
    pub norm1_b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub norm2_g: T,
    pub norm2_b: T,
    pub sub_moe: SubMoeParams<T>,
}

impl<T> AttentionParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.norm1_g"), &self.norm1_g);
        f(format!("{prefix}.norm1_b"), &self.norm1_b);
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.norm2_g"), &self.norm2_g);
        f(format!("{prefix}.norm2_b"), &self.norm2_b);
        self.sub_moe.visit(&format!("{prefix}.sub_moe"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            norm1_g: f(&self.norm1_g),
            norm1_b: f(&self.norm1_b),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            norm2_g: f(&self.norm2_g),
            norm2_b: f(&self.norm2_b),
            sub_moe: self.sub_moe.map(f),
        }
    }
}

impl AttentionParams<Tensor> {
    /// Output projection and Sub-MoE output layers start at zero.
    pub fn init(dim: usize, sub_moe: SubMoeParams<Tensor>, rng: &mut impl Rng) -> Self {
        Self {
            norm1_g: Tensor::ones(&[dim]),
            norm1_b: Tensor::zeros(&[dim]),
            wq: uniform_init(rng, &[dim, dim], dim),
            wk: uniform_init(rng, &[dim, dim], dim),
            wv: uniform_init(rng, &[dim, dim], dim),
            wo: Tensor::zeros(&[dim, dim]),
            norm2_g: Tensor::ones(&[dim]),
            norm2_b: Tensor::zeros(&[dim]),
            sub_moe,
        }
    }
}

/// Gate probabilities on the tape plus the (constant) decisions drawn from them.
#[derive(Debug, Clone)]
pub struct GateTrace<'t> {
    /// `[R, E]` routing probabilities.
    pub probs: Var<'t>,
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadBalanceStats,
}

/// Routing records collected during a forward pass.
#[derive(Debug, Default)]
pub struct RoutingTrace<'t> {
    pub image: Vec<GateTrace<'t>>,
    pub token: Vec<GateTrace<'t>>,
}

/// Runs the gate over `[R, C]` rows and returns the trace.
pub fn route_rows<'t>(rows: Var<'t>, gate: &GateParams<Var<'t>>, k: usize) -> Result<GateTrace<'t>> {
    let experts = gate.weight.shape()[0];
    if k == 0 || k > experts {
        return Err(Error::Config(format!("k = {k} exceeds {experts} routed experts")));
    }
    let probs = gate_probs_var(rows, gate)?;
    let decisions = decisions_from_probs(&probs.value(), k)?;
    let stats = accumulate_stats(&decisions)?;
    Ok(GateTrace { probs, decisions, stats })
}

/// `Σ_i w_{r,i} · expert_i(rows routed to i)`, scattered back to all rows.
///
/// Experts run on just the rows that selected them; accumulation order is
/// by expert index. Selections are constants; gradients reach the gate
/// through the renormalized weights of selected experts.
pub fn combine_routed<'t>(
    input: Var<'t>,
    trace: &GateTrace<'t>,
    mut expert: impl FnMut(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<Option<Var<'t>>> {
    let rows = trace.decisions.len();
    let experts = trace.stats.experts();
    let weights = trace
        .probs
        .topk_renorm(trace.decisions.iter().map(|d| d.selected.clone()).collect())?;
    let mut acc: Option<Var<'t>> = None;
    for e in 0..experts {
        let picked: Vec<usize> = (0..rows).filter(|&r| trace.decisions[r].selected.contains(&e)).collect();
        if picked.is_empty() {
            continue;
        }
        let out = expert(e, input.gather_rows(&picked)?)?;
        let at: Vec<(usize, usize)> = picked.iter().map(|&r| (r, e)).collect();
        let scaled = out.scale_rows(weights.select_entries(&at)?)?;
        let full = scaled.scatter_add_rows(&picked, rows)?;
        acc = Some(match acc {
            Some(a) => a.add(full)?,
            None => full,
        });
    }
    Ok(acc)
}

/// `h = xW1 + b1; a = GELU(h); y = aW2 + b2` over the last axis.
pub fn expert_mlp_var<'t>(x: Var<'t>, p: &MlpParams<Var<'t>>) -> Result<Var<'t>> {
    x.linear(p.w1, p.b1)?.gelu()?.linear(p.w2, p.b2)
}

pub fn expert_mlp(x: &Tensor, p: &MlpParams<Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = p.map(&mut |t| tape.leaf(t.clone()));
    Ok((*expert_mlp_var(tape.leaf(x.clone()), &pv)?.value()).clone())
}

/// Token-routed MLP mixture over `[B, N, C]`: shared experts added
/// unweighted, routed experts weighted by their renormalized gate weights.
pub fn sub_moe_var<'t>(
    tokens: Var<'t>,
    p: &SubMoeParams<Var<'t>>,
    trace: &mut RoutingTrace<'t>,
) -> Result<Var<'t>> {
    let shape = tokens.shape();
    let c = *shape.last().expect("rank >= 1");
    let rows = tokens.reshape(&[shape.iter().product::<usize>() / c, c])?;
    let gate = route_rows(rows, &p.gate, p.k)?;
    let mut acc = combine_routed(rows, &gate, |e, sub| expert_mlp_var(sub, &p.routed[e]))?;
    for shared in &p.shared {
        let y = expert_mlp_var(rows, shared)?;
        acc = Some(match acc {
            Some(a) => a.add(y)?,
            None => y,
        });
    }
    trace.token.push(gate);
    acc.ok_or(Error::EmptyBatch("sub_moe"))?.reshape(&shape)
}

pub fn sub_moe(tokens: &Tensor, p: &SubMoeParams<Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = p.map(&mut |t| tape.leaf(t.clone()));
    let mut trace = RoutingTrace::default();
    Ok((*sub_moe_var(tape.leaf(tokens.clone()), &pv, &mut trace)?.value()).clone())
}

/// Per-bin complex channel mix on a packed `[2, ..., C]` spectrum:
/// `re' = σ(re·W_r − im·W_i + b_r)`, `im' = σ(im·W_r + re·W_i + b_i)`.
pub fn spectral_mix_var<'t>(
    packed: Var<'t>,
    p: &AfnoParams<Var<'t>>,
    act: SpectralActivation,
) -> Result<Var<'t>> {
    let re = packed.index0(0)?;
    let im = packed.index0(1)?;
    let new_re = re.matmul(p.w_re)?.sub(im.matmul(p.w_im)?)?.add_broadcast(p.b_re)?;
    let new_im = im.matmul(p.w_re)?.add(re.matmul(p.w_im)?)?.add_broadcast(p.b_im)?;
    let apply = |v: Var<'t>| match act {
        SpectralActivation::Relu => v.relu(),
        SpectralActivation::Gelu => v.gelu(),
    };
    Var::stack(&[apply(new_re)?, apply(new_im)?])
}

/// Channel-last complex spectrum `[..., C]` through [`spectral_mix_var`].
pub fn spectral_mix(x: &ComplexTensor, p: &AfnoParams<Tensor>, act: SpectralActivation) -> Result<ComplexTensor> {
    let tape = Tape::new();
    let pv = p.map(&mut |t| tape.leaf(t.clone()));
    let packed = Tensor::stack(&[&x.real_part(), &x.imag_part()])?;
    let out = spectral_mix_var(tape.leaf(packed), &pv, act)?.value();
    let half = out.len() / 2;
    ComplexTensor::new(x.shape().to_vec(), out.data()[..half].to_vec(), out.data()[half..].to_vec())
}

/// Spectral branch on a `[B, gh, gw, C]` latent: FFT over the lattice,
/// channel mix per bin, real part of the inverse FFT.
pub fn afno_spectral_var<'t>(x: Var<'t>, p: &AfnoParams<Var<'t>>, act: SpectralActivation) -> Result<Var<'t>> {
    let spec = x.permute(&[0, 3, 1, 2])?.fft2()?.permute(&[0, 1, 3, 4, 2])?;
    spectral_mix_var(spec, p, act)?
        .permute(&[0, 1, 4, 2, 3])?
        .ifft2_re()?
        .permute(&[0, 2, 3, 1])
}

/// `afno(x) − x` where `afno(x) = z + MLP(LN(z))`, `z = x + spectral(x)`.
pub fn afno_delta_var<'t>(x: Var<'t>, p: &AfnoParams<Var<'t>>, act: SpectralActivation) -> Result<Var<'t>> {
    let spectral = afno_spectral_var(x, p, act)?;
    let z = x.add(spectral)?;
    let mlp = expert_mlp_var(z.layer_norm(p.norm_g, p.norm_b, LN_EPS)?, &p.mlp)?;
    spectral.add(mlp)
}

pub fn afno_expert(x: &Tensor, p: &AfnoParams<Tensor>, act: SpectralActivation) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = p.map(&mut |t| tape.leaf(t.clone()));
    let xv = tape.leaf(x.clone());
    Ok((*xv.add(afno_delta_var(xv, &pv, act)?)?.value()).clone())
}

fn attention_core<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, kernel: AttentionKernel) -> Result<Var<'t>> {
    match kernel {
        AttentionKernel::Naive => q.attention(k, v, heads),
        AttentionKernel::Tiled(tile) => q.attention_tiled(k, v, heads, tile),
    }
}

/// `block(x) − x` for tokens `[B, N, C]`:
/// `z = x + Attn(LN₁(x))·W_o`, `Z̃ = LN₂(z)`, `block(x) = z + SubMoE(Z̃)`.
pub fn attention_delta_var<'t>(
    x: Var<'t>,
    p: &AttentionParams<Var<'t>>,
    opts: &BlockOptions,
    trace: &mut RoutingTrace<'t>,
) -> Result<Var<'t>> {
    let h = x.layer_norm(p.norm1_g, p.norm1_b, LN_EPS)?;
    let attn = attention_core(h.matmul(p.wq)?, h.matmul(p.wk)?, h.matmul(p.wv)?, opts.heads, opts.kernel)?
        .matmul(p.wo)?;
    let z = x.add(attn)?;
    let normed = z.layer_norm(p.norm2_g, p.norm2_b, LN_EPS)?;
    attn.add(sub_moe_var(normed, &p.sub_moe, trace)?)
}

fn attention_block(tokens: &Tensor, p: &AttentionParams<Tensor>, opts: &BlockOptions) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = p.map(&mut |t| tape.leaf(t.clone()));
    let x = tape.leaf(tokens.clone());
    let mut trace = RoutingTrace::default();
    Ok((*x.add(attention_delta_var(x, &pv, opts, &mut trace)?)?.value()).clone())
}

/// Attention expert with the exact (naive) core.
pub fn attention(tokens: &Tensor, p: &AttentionParams<Tensor>, heads: usize) -> Result<Tensor> {
    attention_block(
        tokens,
        p,
        &BlockOptions {
            heads,
            kernel: AttentionKernel::Naive,
            spectral_activation: SpectralActivation::Relu,
        },
    )
}

/// Attention expert with the streaming-softmax tiled core.
pub fn attention_tiled(tokens: &Tensor, p: &AttentionParams<Tensor>, heads: usize, tile: usize) -> Result<Tensor> {
    if tile == 0 {
        return Err(Error::Config("tile must be >= 1".into()));
    }
    attention_block(
        tokens,
        p,
        &BlockOptions {
            heads,
            kernel: AttentionKernel::Tiled(tile),
            spectral_activation: SpectralActivation::Relu,
        },
    )
}
