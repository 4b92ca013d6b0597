//! Training objectives: relative L2 error, the switch-style load-balancing
//! auxiliary loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::experts::GateTrace;
use crate::routing::LoadBalanceStats;
use crate::tensor::Tensor;

/// Denominator guard for zero-norm truth planes.
pub const L2RE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the image-level balance loss.
    pub alpha: f64,
    /// Weight on the token-level balance loss.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 0.01 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0 (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `E · Σ p_i f_i`.
pub fn load_balance_loss(stats: &LoadBalanceStats) -> Result<f64> {
    if stats.total == 0 || stats.experts() == 0 {
        return Err(Error::EmptyBatch("load_balance_loss"));
    }
    let dot: f64 = stats.mean_probs.iter().zip(&stats.assign_frac).map(|(p, f)| p * f).sum();
    Ok(stats.experts() as f64 * dot)
}

/// Differentiable balance loss for one gate. `p` is the batch mean of the
/// gate's softmax; the assignment fractions enter as constants.
pub fn load_balance_var<'t>(gate: &GateTrace<'t>) -> Result<Var<'t>> {
    if gate.stats.total == 0 {
        return Err(Error::EmptyBatch("load_balance_loss"));
    }
    let e = gate.stats.experts();
    let tape = gate.probs.tape();
    let f = tape.leaf(Tensor::new(vec![e], gate.stats.assign_frac.clone())?);
    gate.probs.mean_axis(0)?.mul(f)?.sum()?.scale(e as f64)
}

/// Mean of the balance losses over a set of gates.
pub fn mean_balance_var<'t>(gates: &[GateTrace<'t>]) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for g in gates {
        let l = load_balance_var(g)?;
        acc = Some(match acc {
            Some(a) => a.add(l)?,
            None => l,
        });
    }
    acc.map(|a| a.scale(1.0 / gates.len() as f64)).transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2reReport {
    pub value: f64,
    /// Flat `b·C + c` indices of truth planes whose norm fell below the guard.
    pub guarded: Vec<usize>,
}

/// Mean over samples and channels of `‖ŷ − y‖₂ / ‖y‖₂` on each `H×W` plane.
pub fn l2re(pred: &Tensor, truth: &Tensor) -> Result<L2reReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension {
            op: "l2re",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    if pred.rank() != 4 {
        return Err(Error::Shape {
            shape: pred.shape().to_vec(),
            reason: "l2re expects [B, C, H, W]".into(),
        });
    }
    let plane = pred.shape()[2] * pred.shape()[3];
    let planes = pred.len() / plane;
    if planes == 0 || plane == 0 {
        return Err(Error::EmptyBatch("l2re"));
    }
    let mut guarded = Vec::new();
    let mut sum = 0.0;
    for (i, (p, t)) in pred
        .data()
        .chunks_exact(plane)
        .zip(truth.data().chunks_exact(plane))
        .enumerate()
    {
        let err = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < L2RE_EPS {
            guarded.push(i);
        }
        sum += err / norm.max(L2RE_EPS);
    }
    Ok(L2reReport {
        value: sum / planes as f64,
        guarded,
    })
}

pub fn l2re_var<'t>(pred: Var<'t>, truth: &Tensor) -> Result<Var<'t>> {
    pred.rel_l2(truth, L2RE_EPS)
}

/// `l2 + α·aux1 + β·aux2`.
pub fn total_loss(l2: f64, aux1: f64, aux2: f64, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [("l2re", l2), ("aux_image", aux1), ("aux_token", aux2)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l2 + cfg.alpha * aux1 + cfg.beta * aux2)
}

pub fn total_loss_var<'t>(l2: Var<'t>, aux1: Option<Var<'t>>, aux2: Option<Var<'t>>, cfg: &LossConfig) -> Result<Var<'t>> {
    let mut total = l2;
    if let Some(a) = aux1 {
        total = total.add(a.scale(cfg.alpha)?)?;
    }
    if let Some(b) = aux2 {
        total = total.add(b.scale(cfg.beta)?)?;
    }
    let v = total.value().item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("total loss = {v}")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::experts::route_rows;
    use crate::routing::{accumulate_stats, decisions_from_probs, GateParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(p: &[f64], f: &[f64]) -> LoadBalanceStats {
        LoadBalanceStats {
            mean_probs: p.to_vec(),
            assign_frac: f.to_vec(),
            counts: vec![1; p.len()],
            total: 10,
        }
    }

    #[test]
    fn balance_examples() {
        for e in 1..8 {
            let u = vec![1.0 / e as f64; e];
            assert!((load_balance_loss(&stats(&u, &u)).unwrap() - 1.0).abs() < 1e-12);
            let mut one = vec![0.0; e];
            one[0] = 1.0;
            assert!((load_balance_loss(&stats(&one, &one)).unwrap() - e as f64).abs() < 1e-12);
        }
        let v = load_balance_loss(&stats(&[0.4, 0.3, 0.2, 0.1], &[0.5, 0.25, 0.15, 0.1])).unwrap();
        assert!((v - 1.26).abs() < 1e-12);
        let mut empty = stats(&[0.5, 0.5], &[0.5, 0.5]);
        empty.total = 0;
        assert!(matches!(load_balance_loss(&empty), Err(Error::EmptyBatch(_))));
    }

    proptest! {
        #[test]
        fn matched_distributions_are_at_least_one(raw in prop::collection::vec(0.01f64..1.0, 1..10)) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let v = load_balance_loss(&stats(&p, &p)).unwrap();
            prop_assert!(v >= 1.0 - 1e-12);
            let uniform = p.iter().all(|x| (x - 1.0 / p.len() as f64).abs() < 1e-9);
            if !uniform {
                prop_assert!(v > 1.0);
            }
        }

        #[test]
        fn l2re_scale_law(a in 0.0f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let v = l2re(&y.scale(a), &y).unwrap().value;
            prop_assert!((v - (a - 1.0).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_var_matches_scalar_and_freezes_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gate = GateParams::init(3, 4, &mut rng);
        let rows = Tensor::from_fn(&[6, 4], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let gv = gate.map(&mut |t| tape.leaf(t.clone()));
        let trace = route_rows(tape.leaf(rows.clone()), &gv, 2).unwrap();
        let l = load_balance_var(&trace).unwrap();
        let scalar = load_balance_loss(&trace.stats).unwrap();
        assert!((l.value().item() - scalar).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        // dL/dp_i = E·f_i/R on every row of the probability matrix
        let dp = grads.get(trace.probs);
        for r in 0..6 {
            for i in 0..3 {
                let want = 3.0 * trace.stats.assign_frac[i] / 6.0;
                assert!((dp.data()[r * 3 + i] - want).abs() < 1e-12);
            }
        }
        let probs = trace.probs.value();
        let recount = accumulate_stats(&decisions_from_probs(&probs, 2).unwrap()).unwrap();
        assert_eq!(recount, trace.stats);
    }

    #[test]
    fn l2re_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(l2re(&y, &y).unwrap().value, 0.0);
        assert!((l2re(&y.scale(2.0), &y).unwrap().value - 1.0).abs() < 1e-12);
        assert!((l2re(&Tensor::zeros(y.shape()), &y).unwrap().value - 1.0).abs() < 1e-12);
        assert!(l2re(&y, &Tensor::zeros(&[3, 2, 4, 2])).is_err());
    }

    #[test]
    fn l2re_guard_flags_zero_planes() {
        let mut y = Tensor::ones(&[1, 2, 2, 2]);
        for v in &mut y.data_mut()[4..] {
            *v = 0.0;
        }
        let r = l2re(&Tensor::zeros(y.shape()), &y).unwrap();
        assert_eq!(r.guarded, vec![1]);
        assert!((r.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l2re_var_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let p = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let v = l2re_var(tape.leaf(p.clone()), &y).unwrap();
        assert!((v.value().item() - l2re(&p, &y).unwrap().value).abs() < 1e-14);
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossConfig { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.37, 5.0, 9.0, &zero).unwrap(), 0.37);
        let cfg = LossConfig::default();
        assert!((total_loss(0.5, 1.0, 1.2, &cfg).unwrap() - 0.522).abs() < 1e-12);
        let any = LossConfig { alpha: 0.3, beta: 0.7 };
        assert!((total_loss(0.25, 1.0, 1.0, &any).unwrap() - 1.25).abs() < 1e-12);
        assert!(matches!(total_loss(f64::NAN, 1.0, 1.0, &cfg), Err(Error::NonFinite(_))));
        assert!(LossConfig { alpha: -1.0, beta: 0.0 }.validate().is_err());
    }

    #[test]
    fn total_loss_linear_in_aux() {
        let cfg = LossConfig { alpha: 0.2, beta: 0.05 };
        let base = total_loss(0.1, 1.0, 1.0, &cfg).unwrap();
        let a = total_loss(0.1, 3.0, 1.0, &cfg).unwrap();
        let b = total_loss(0.1, 1.0, 3.0, &cfg).unwrap();
        assert!((a - base - 2.0 * cfg.alpha).abs() < 1e-12);
        assert!((b - base - 2.0 * cfg.beta).abs() < 1e-12);
    }
}
