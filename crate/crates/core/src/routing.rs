//! Top-k gating at image and token level.
//!
//! Gates score only the routed experts; shared experts bypass gating. The
//! pipeline is linear scores → softmax → top-k → renormalization over the
//! selected set. Equal probabilities resolve to the lower expert index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoding::uniform_init;
use crate::error::{Error, Result};
use crate::tensor::{global_avg_pool, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// `[E, C_in]`
    pub weight: T,
    /// `[E]`
    pub bias: T,
}

impl<T> GateParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GateParams<U> {
        GateParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl GateParams<Tensor> {
    pub fn init(experts: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(rng, &[experts, in_dim], in_dim),
            bias: uniform_init(rng, &[experts], in_dim),
        }
    }

    pub fn zeros(experts: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[experts, in_dim]),
            bias: Tensor::zeros(&[experts]),
        }
    }

    pub fn experts(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
    /// Renormalized weights, aligned with `selected`.
    pub weights: Vec<f64>,
    /// Full softmax distribution over routed experts.
    pub full_probs: Vec<f64>,
}

impl RoutingDecision {
    /// Top-k of a probability row, ties to the lower index.
    pub fn from_probs(probs: &[f64], k: usize) -> Result<Self> {
        if k == 0 || k > probs.len() {
            return Err(Error::Config(format!(
                "top-k of {k} needs 1 <= k <= {} experts",
                probs.len()
            )));
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut selected = order[..k].to_vec();
        selected.sort_unstable();
        let denom: f64 = selected.iter().map(|&i| probs[i]).sum();
        let weights = selected.iter().map(|&i| probs[i] / denom).collect();
        Ok(Self {
            selected,
            weights,
            full_probs: probs.to_vec(),
        })
    }

    pub fn weight_of(&self, expert: usize) -> Option<f64> {
        self.selected
            .iter()
            .position(|&e| e == expert)
            .map(|i| self.weights[i])
    }
}

/// One decision per row of a `[R, E]` probability matrix.
pub fn decisions_from_probs(probs: &Tensor, k: usize) -> Result<Vec<RoutingDecision>> {
    let e = *probs.shape().last().expect("rank >= 1");
    probs
        .data()
        .chunks_exact(e)
        .map(|row| RoutingDecision::from_probs(row, k))
        .collect()
}

fn check_k(params: &GateParams<Tensor>, k: usize) -> Result<()> {
    if k == 0 || k > params.experts() {
        return Err(Error::Config(format!(
            "k = {k} exceeds {} routed experts",
            params.experts()
        )));
    }
    Ok(())
}

/// Routing probabilities `softmax(x·Wᵀ + b)` for rows `[R, C]`.
pub fn gate_probs_var<'t>(rows: Var<'t>, params: &GateParams<Var<'t>>) -> Result<Var<'t>> {
    rows.matmul(params.weight.permute(&[1, 0])?)?
        .add_broadcast(params.bias)?
        .softmax()
}

fn gate_rows(rows: &Tensor, params: &GateParams<Tensor>, k: usize) -> Result<Vec<RoutingDecision>> {
    check_k(params, k)?;
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.leaf(t.clone()));
    let probs = gate_probs_var(tape.leaf(rows.clone()), &p)?;
    decisions_from_probs(&probs.value(), k)
}

/// Image-level gate: global average pool over `[B, C, H, W]`, then one
/// decision per sample.
pub fn image_gate(x: &Tensor, params: &GateParams<Tensor>, k: usize) -> Result<Vec<RoutingDecision>> {
    gate_rows(&global_avg_pool(x)?, params, k)
}

/// Token-level gate over `[B, N, C]`: one decision per token, row-major.
pub fn token_gate(tokens: &Tensor, params: &GateParams<Tensor>, k: usize) -> Result<Vec<RoutingDecision>> {
    let c = *tokens.shape().last().expect("rank >= 1");
    gate_rows(&tokens.reshape(&[tokens.len() / c, c])?, params, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadBalanceStats {
    /// Mean of the full softmax distribution over routed units.
    pub mean_probs: Vec<f64>,
    /// `n_i / Σ n`.
    pub assign_frac: Vec<f64>,
    pub counts: Vec<u64>,
    /// Routed units (images or tokens).
    pub total: u64,
}

impl LoadBalanceStats {
    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    /// Combines partial statistics; equivalent to accumulating the union.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.experts() != other.experts() {
            return Err(Error::Dimension {
                op: "merge_stats",
                lhs: vec![self.experts()],
                rhs: vec![other.experts()],
            });
        }
        let total = self.total + other.total;
        let mean_probs = self
            .mean_probs
            .iter()
            .zip(&other.mean_probs)
            .map(|(a, b)| (a * self.total as f64 + b * other.total as f64) / total as f64)
            .collect();
        let counts: Vec<u64> = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(Self {
            mean_probs,
            assign_frac: fractions(&counts),
            counts,
            total,
        })
    }
}

fn fractions(counts: &[u64]) -> Vec<f64> {
    let sum: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
        .collect()
}

pub fn accumulate_stats(decisions: &[RoutingDecision]) -> Result<LoadBalanceStats> {
    let first = decisions.first().ok_or(Error::EmptyBatch("accumulate_stats"))?;
    let e = first.full_probs.len();
    let mut prob_sums = vec![0.0; e];
    let mut counts = vec![0u64; e];
    for d in decisions {
        if d.full_probs.len() != e {
            return Err(Error::Dimension {
                op: "accumulate_stats",
                lhs: vec![e],
                rhs: vec![d.full_probs.len()],
            });
        }
        for (s, p) in prob_sums.iter_mut().zip(&d.full_probs) {
            *s += p;
        }
        for &i in &d.selected {
            counts[i] += 1;
        }
    }
    let n = decisions.len() as f64;
    Ok(LoadBalanceStats {
        mean_probs: prob_sums.iter().map(|s| s / n).collect(),
        assign_frac: fractions(&counts),
        counts,
        total: decisions.len() as u64,
    })
}
