//! The full operator: patch encoding, `L` nested mixture-of-experts layers
//! and the linear decoding head, plus rollout, noise injection and
//! parameter accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoding::{decode_head_var, encode_var, EncoderParams, PatchConfig};
use crate::error::{Error, Result};
use crate::experts::{
    afno_delta_var, attention_delta_var, combine_routed, route_rows, AfnoParams, AttentionKernel, AttentionParams,
    BlockOptions, RoutingTrace, SpectralActivation, SubMoeParams,
};
use crate::losses::LossConfig;
use crate::routing::{GateParams, LoadBalanceStats, RoutingDecision};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub history: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_routed: usize,
    pub image_shared: usize,
    pub image_k: usize,
    pub token_routed: usize,
    pub token_shared: usize,
    pub token_k: usize,
    #[serde(default)]
    pub attention_kernel: AttentionKernel,
    #[serde(default)]
    pub spectral_activation: SpectralActivation,
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 4,
            channels: 1,
            height: 16,
            width: 16,
            patch: 4,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 1,
            image_routed: 3,
            image_shared: 1,
            image_k: 2,
            token_routed: 3,
            token_shared: 1,
            token_k: 2,
            attention_kernel: AttentionKernel::Naive,
            spectral_activation: SpectralActivation::Relu,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            patch_h: self.patch,
            patch_w: self.patch,
            embed_dim: self.embed_dim,
        }
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            heads: self.heads,
            kernel: self.attention_kernel,
            spectral_activation: self.spectral_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pc = self.patch_config();
        pc.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.history == 0 {
            return bad("history must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("heads = {} must divide embed_dim = {}", self.heads, self.embed_dim));
        }
        if !pc.grid_h().is_power_of_two() || !pc.grid_w().is_power_of_two() {
            return bad(format!(
                "patch grid {}x{} must have power-of-two sides",
                pc.grid_h(),
                pc.grid_w()
            ));
        }
        for (level, routed, k) in [
            ("image", self.image_routed, self.image_k),
            ("token", self.token_routed, self.token_k),
        ] {
            if routed == 0 {
                return bad(format!("{level}-level routed expert count must be >= 1"));
            }
            if k == 0 || k > routed {
                return bad(format!("{level}-level k = {k} must be in 1..={routed}"));
            }
        }
        if let AttentionKernel::Tiled(0) = self.attention_kernel {
            return bad("attention tile must be >= 1".into());
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub gate: GateParams<T>,
    pub shared: Vec<AfnoParams<T>>,
    pub routed: Vec<AttentionParams<T>>,
}

impl<T> LayerParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.gate.visit(&format!("{prefix}.gate"), f);
        for (i, e) in self.shared.iter().enumerate() {
            e.visit(&format!("{prefix}.shared{i}"), f);
        }
        for (i, e) in self.routed.iter().enumerate() {
            e.visit(&format!("{prefix}.routed{i}"), f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            gate: self.gate.map(f),
            shared: self.shared.iter().map(|e| e.map(f)).collect(),
            routed: self.routed.iter().map(|e| e.map(f)).collect(),
        }
    }
}

/// Parameter tree. [`ModelParams::visit`] defines the flattening order used
/// by checkpoints and the optimizer: encoder, then each layer's gate,
/// shared experts and routed experts in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> ModelParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit("encoder", f);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer{l}"), f);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    /// Rebuilds a tree of this structure from values in flattening order.
    pub fn with_flat<U: Clone>(&self, values: &[U]) -> Result<ModelParams<U>> {
        let count = self.flat().len();
        if values.len() != count {
            return Err(Error::Format(format!(
                "expected {count} parameter tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.iter();
        Ok(self.map(&mut |_| it.next().expect("length checked").clone()))
    }
}

impl ModelParams<Tensor> {
    /// Seeded initialization. Every block's final projection starts at zero
    /// so each layer is the identity and the head predicts zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let encoder = EncoderParams::init(&cfg.patch_config(), cfg.history, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                gate: GateParams::init(cfg.image_routed, d, &mut rng),
                shared: (0..cfg.image_shared)
                    .map(|_| AfnoParams::init(d, cfg.mlp_ratio, &mut rng))
                    .collect(),
                routed: (0..cfg.image_routed)
                    .map(|_| {
                        let sub = SubMoeParams::init(
                            d,
                            cfg.mlp_ratio,
                            cfg.token_routed,
                            cfg.token_shared,
                            cfg.token_k,
                            &mut rng,
                        );
                        AttentionParams::init(d, sub, &mut rng)
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { encoder, layers })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|t| t.all_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }
}

/// One nested layer on a latent `[B, gh, gw, D]`:
/// `out = x + Σ_shared afno_delta(x) + Σ_{i∈I_b} w_{b,i} · attention_delta_i(x_b)`.
pub fn nested_moe_layer_var<'t>(
    x: Var<'t>,
    layer: &LayerParams<Var<'t>>,
    cfg: &ModelConfig,
    trace: &mut RoutingTrace<'t>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape {
            shape,
            reason: "latent must be [B, gh, gw, D]".into(),
        });
    }
    let (b, gh, gw, d) = (shape[0], shape[1], shape[2], shape[3]);
    let n = gh * gw;
    let pooled = x.reshape(&[b, n, d])?.mean_axis(1)?;
    let gate = route_rows(pooled, &layer.gate, cfg.image_k)?;
    let opts = cfg.block_options();
    let mut out = x;
    for shared in &layer.shared {
        out = out.add(afno_delta_var(x, shared, cfg.spectral_activation)?)?;
    }
    let routed = combine_routed(x, &gate, |e, sub| {
        let m = sub.shape()[0];
        attention_delta_var(sub.reshape(&[m, n, d])?, &layer.routed[e], &opts, trace)?.reshape(&[m, gh, gw, d])
    })?;
    if let Some(r) = routed {
        out = out.add(r)?;
    }
    trace.image.push(gate);
    Ok(out)
}

fn check_frames(frames: &[Tensor], cfg: &ModelConfig) -> Result<()> {
    if frames.len() != cfg.history {
        return Err(Error::HistoryLength {
            expected: cfg.history,
            got: frames.len(),
        });
    }
    let first = frames[0].shape();
    let want = [first.first().copied().unwrap_or(0), cfg.channels, cfg.height, cfg.width];
    for f in frames {
        if f.shape() != want {
            return Err(Error::Shape {
                shape: f.shape().to_vec(),
                reason: format!("history frame must be {want:?}"),
            });
        }
    }
    if want[0] == 0 {
        return Err(Error::EmptyBatch("forward"));
    }
    Ok(())
}

/// Latent after encoding and all nested layers, before the head.
pub fn latent_var<'t>(
    tape: &'t Tape,
    frames: &[Tensor],
    params: &ModelParams<Var<'t>>,
    cfg: &ModelConfig,
    trace: &mut RoutingTrace<'t>,
) -> Result<Var<'t>> {
    check_frames(frames, cfg)?;
    let mut x = encode_var(tape, frames, &params.encoder, &cfg.patch_config())?;
    for layer in &params.layers {
        x = nested_moe_layer_var(x, layer, cfg, trace)?;
    }
    Ok(x)
}

/// Next-frame prediction `[B, C, H, W]` and the routing records of every gate.
pub fn forward_var<'t>(
    tape: &'t Tape,
    frames: &[Tensor],
    params: &ModelParams<Var<'t>>,
    cfg: &ModelConfig,
) -> Result<(Var<'t>, RoutingTrace<'t>)> {
    let mut trace = RoutingTrace::default();
    let latent = latent_var(tape, frames, params, cfg, &mut trace)?;
    let pred = decode_head_var(latent, &params.encoder, &cfg.patch_config())?;
    Ok((pred, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub prediction: Tensor,
    /// One entry per layer.
    pub image_stats: Vec<LoadBalanceStats>,
    /// Per-layer image decisions, one per sample.
    pub image_decisions: Vec<Vec<RoutingDecision>>,
    /// One entry per Sub-MoE invocation, in execution order.
    pub token_stats: Vec<LoadBalanceStats>,
}

pub fn forward(frames: &[Tensor], params: &ModelParams<Tensor>, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let pv = params.bind(&tape);
    let (pred, trace) = forward_var(&tape, frames, &pv, cfg)?;
    Ok(ForwardOutput {
        prediction: (*pred.value()).clone(),
        image_stats: trace.image.iter().map(|g| g.stats.clone()).collect(),
        image_decisions: trace.image.iter().map(|g| g.decisions.clone()).collect(),
        token_stats: trace.token.iter().map(|g| g.stats.clone()).collect(),
    })
}

/// Autoregressive prediction of `steps` frames from a `T`-frame window.
pub fn rollout(initial: &[Tensor], params: &ModelParams<Tensor>, cfg: &ModelConfig, steps: usize) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut window = initial.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = forward(&window, params, cfg)?.prediction;
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Adds `N(0, (ε·std)²)` noise to each frame, with `std` measured per sample
/// over that sample's `C×H×W` values.
pub fn inject_noise(frames: &[Tensor], eps: f64, seed: u64) -> Result<Vec<Tensor>> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("noise scale must be finite and >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(frames.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    frames
        .iter()
        .map(|f| {
            let b = f.shape().first().copied().unwrap_or(1).max(1);
            let mut out = f.clone();
            let per = f.len() / b;
            for chunk in out.data_mut().chunks_mut(per.max(1)) {
                let n = chunk.len() as f64;
                let mean = chunk.iter().sum::<f64>() / n;
                let std = (chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                for v in chunk.iter_mut() {
                    *v += eps * std * unit.sample(&mut rng);
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub activated: usize,
    pub ratio: f64,
}

/// Scalars touched by one sample: encoder and head, every gate and shared
/// expert, and `k` routed experts at each level.
pub fn param_counts(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let pc = cfg.patch_config();
    let (d, p, n, t) = (cfg.embed_dim, pc.patch_len(), pc.num_patches(), cfg.history);
    let hidden = cfg.mlp_ratio * d;
    let encoder = p * d + d + n * d + t * d * d + d * p + p;
    let mlp = d * hidden + hidden + hidden * d + d;
    let afno = 2 * d * d + 2 * d + 2 * d + mlp;
    let gate = |experts: usize| experts * d + experts;
    let attn_fixed = 4 * d + 4 * d * d + gate(cfg.token_routed) + cfg.token_shared * mlp;
    let attn_total = attn_fixed + cfg.token_routed * mlp;
    let attn_active = attn_fixed + cfg.token_k * mlp;
    let layer_fixed = gate(cfg.image_routed) + cfg.image_shared * afno;
    let total = encoder + cfg.layers * (layer_fixed + cfg.image_routed * attn_total);
    let activated = encoder + cfg.layers * (layer_fixed + cfg.image_k * attn_active);
    Ok(ParamCounts {
        total,
        activated,
        ratio: activated as f64 / total as f64,
    })
}
