//! Optimization and evaluation: Adam, the warmup/cosine schedule, the seed
//! stream, the training loop, evaluation against a persistence baseline
//! and the per-family routing report.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{pad_and_mask, read_dataset, BalancedSampler, Dataset, DatasetSchema, Family, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{l2re, l2re_var, load_balance_loss, mean_balance_var, total_loss, total_loss_var};
use crate::model::{forward, forward_var, inject_noise, rollout, ModelConfig, ModelParams};
use crate::routing::LoadBalanceStats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments in parameter flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub hp: AdamConfig,
}

impl OptimState {
    pub fn new(params: &ModelParams<Tensor>, hp: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.flat().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hp,
        }
    }
}

/// One bias-corrected Adam update of `params` (flattening order).
pub fn adam_step(params: &mut [Tensor], names: &[String], grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: params[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", names[i])));
        }
    }
    state.t += 1;
    let hp = state.hp;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            let gj = gj + hp.weight_decay * p[j];
            let mj = &mut m.data_mut()[j];
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
            let mj = *mj;
            let vj = &mut v.data_mut()[j];
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
            let vj = *vj;
            p[j] -= lr * (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup over `warmup_epochs`, then one cosine half-period to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let w = self.warmup_epochs as f64;
        let total = self.total_epochs as f64;
        if epoch < w {
            return self.base_lr * ((epoch + 1.0) / w).min(1.0);
        }
        if epoch >= total || total <= w {
            return if total <= w && epoch < total { self.base_lr } else { 0.0 };
        }
        let progress = (epoch - w) / (total - w);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Init = 1,
    Noise = 2,
    Sampler = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix(mix(master ⊕ (stream << 56)) + counter)` with the SplitMix64 finalizer.
/// The noise stream counts global steps and the sampler stream counts epochs.
pub fn sub_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(master ^ ((stream as u64) << 56)).wrapping_add(counter))
}

fn default_lr() -> f64 {
    1e-3
}

fn default_noise() -> f64 {
    1e-3
}

fn default_clip() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    /// Per-dataset sampler weights; equal when absent.
    #[serde(default)]
    pub sampler_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub schema: Option<DatasetSchema>,
    pub epochs: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// When false the `seconds` metrics column is written as 0 so that
    /// reruns produce byte-identical files.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
    /// Start from this checkpoint's parameters (fresh optimizer).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Continue this checkpoint's run (parameters, optimizer, seed state).
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelConfig, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            model,
            datasets: Vec::new(),
            sampler_weights: None,
            schema: None,
            epochs,
            warmup_epochs: 0,
            batch_size,
            seed,
            noise: default_noise(),
            lr: default_lr(),
            adam: AdamConfig::default(),
            clip_norm: default_clip(),
            record_wall_time: true,
            init_checkpoint: None,
            resume: None,
            out_dir: None,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if let Some(schema) = &self.schema {
            if schema.model_channels() != self.model.channels {
                return Err(Error::Config(format!(
                    "schema yields {} channels but the model expects {}",
                    schema.model_channels(),
                    self.model.channels
                )));
            }
        }
        Ok(())
    }

    /// Reads, pads and checks every configured dataset file.
    pub fn load_datasets(&self) -> Result<Vec<Dataset>> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        self.datasets
            .iter()
            .map(|p| {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset {} does not exist", p.display())));
                }
                prepare_dataset(read_dataset(p)?, self.schema.as_ref(), &self.model)
            })
            .collect()
    }
}

/// Applies the padding schema and checks the result against the model.
pub fn prepare_dataset(ds: Dataset, schema: Option<&DatasetSchema>, model: &ModelConfig) -> Result<Dataset> {
    let ds = match schema {
        Some(s) => {
            let trajs = ds
                .trajectories
                .iter()
                .map(|t| pad_and_mask(t, s))
                .collect::<Result<Vec<_>>>()?;
            let [t, _, h, w] = ds.dims;
            Dataset {
                family: ds.family,
                dims: [t, s.model_channels(), h, w],
                trajectories: trajs,
            }
        }
        None => ds,
    };
    let [t, c, h, w] = ds.dims;
    if c != model.channels || h != model.height || w != model.width {
        return Err(Error::Format(format!(
            "{} dataset is {c}x{h}x{w} but the model expects {}x{}x{}",
            ds.family.name(),
            model.channels,
            model.height,
            model.width
        )));
    }
    if t <= model.history {
        return Err(Error::Format(format!(
            "{} trajectories have {t} frames; need more than the history of {}",
            ds.family.name(),
            model.history
        )));
    }
    Ok(ds)
}

pub const METRICS_HEADER: &str = "epoch,lr,l2re,aux_image,aux_token,total,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l2re: f64,
    pub aux_image: f64,
    pub aux_token: f64,
    pub total: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.l2re, self.aux_image, self.aux_token, self.total, self.seconds
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<Tensor>,
    pub optim: OptimState,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg.model, sub_seed(cfg.seed, Stream::Init, 0))?;
        Ok(Self::from_params(params, cfg))
    }

    pub fn from_params(params: ModelParams<Tensor>, cfg: &RunConfig) -> Self {
        let optim = OptimState::new(&params, cfg.adam);
        Self {
            params,
            optim,
            epoch: 0,
            step: 0,
        }
    }
}

/// Stacks `(dataset, window)` picks into `T` history batches and a target batch.
pub fn assemble_batch(data: &[Dataset], picks: &[(usize, usize)], history: usize) -> Result<(Vec<Tensor>, Tensor)> {
    let mut frames: Vec<Vec<Tensor>> = vec![Vec::with_capacity(picks.len()); history];
    let mut targets = Vec::with_capacity(picks.len());
    for &(k, i) in picks {
        let (window, target) = data[k].window(i, history)?;
        for (slot, f) in frames.iter_mut().zip(window) {
            slot.push(f);
        }
        targets.push(target);
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((frames.iter().map(|f| stack(f)).collect::<Result<_>>()?, stack(&targets)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l2re: f64,
    pub aux_image: f64,
    pub aux_token: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss and parameter gradients (flattening order) for one batch.
pub fn loss_and_grads(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    frames: &[Tensor],
    target: &Tensor,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let tape = Tape::new();
    let pv = params.bind(&tape);
    let (pred, trace) = forward_var(&tape, frames, &pv, cfg)?;
    let l2 = l2re_var(pred, target)?;
    let aux1 = mean_balance_var(&trace.image)?;
    let aux2 = mean_balance_var(&trace.token)?;
    let read = |v: Option<crate::autodiff::Var>| v.map(|v| v.value().item()).unwrap_or(0.0);
    let losses = StepLosses {
        l2re: l2.value().item(),
        aux_image: read(aux1),
        aux_token: read(aux2),
        total: 0.0,
        grad_norm: 0.0,
    };
    let total = total_loss_var(l2, aux1, aux2, &cfg.loss)?;
    let grads = tape.backward(total)?;
    let flat: Vec<Tensor> = pv.flat().into_iter().map(|v| grads.get(*v)).collect();
    Ok((
        StepLosses {
            total: total.value().item(),
            ..losses
        },
        flat,
    ))
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Runs epochs `state.epoch..until`, calling `on_epoch` after each one.
pub fn train_epochs(
    cfg: &RunConfig,
    data: &[Dataset],
    state: &mut TrainState,
    until: usize,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let history = cfg.model.history;
    let sizes: Vec<usize> = data.iter().map(|d| d.windows(history)).collect();
    if data.is_empty() || sizes.iter().any(|&n| n == 0) {
        return Err(Error::EmptyBatch("training data"));
    }
    let sampler_cfg = SamplerConfig {
        weights: cfg.sampler_weights.clone().unwrap_or_else(|| vec![1.0; data.len()]),
        sizes: sizes.clone(),
    };
    let steps = sizes.iter().sum::<usize>().div_ceil(cfg.batch_size);
    let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
    let schedule = cfg.schedule();
    let mut out = Vec::new();
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = schedule.lr_at(epoch as f64);
        let mut sampler = BalancedSampler::new(&sampler_cfg, sub_seed(cfg.seed, Stream::Sampler, epoch as u64))?;
        let mut sums = [0.0; 4];
        for s in 0..steps {
            let picks: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| sampler.draw()).collect();
            let (frames, target) = assemble_batch(data, &picks, history)?;
            let frames = inject_noise(&frames, cfg.noise, sub_seed(cfg.seed, Stream::Noise, state.step))?;
            let (losses, mut grads) = loss_and_grads(&state.params, &cfg.model, &frames, &target).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {s}: {msg}")),
                other => other,
            })?;
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut flat: Vec<Tensor> = state.params.flat().into_iter().cloned().collect();
            adam_step(&mut flat, &names, &grads, &mut state.optim, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, step {s}: {e}")))?;
            state.params = state.params.with_flat(&flat)?;
            state.step += 1;
            for (acc, v) in sums.iter_mut().zip([losses.l2re, losses.aux_image, losses.aux_token, losses.total]) {
                *acc += v;
            }
        }
        let n = steps as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            l2re: sums[0] / n,
            aux_image: sums[1] / n,
            aux_token: sums[2] / n,
            total: sums[3] / n,
            seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        state.epoch += 1;
        on_epoch(&metrics, state)?;
        out.push(metrics);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
}

/// Full run from a fresh initialization.
pub fn train(cfg: &RunConfig, data: &[Dataset]) -> Result<TrainOutcome> {
    let mut state = TrainState::fresh(cfg)?;
    let history = train_epochs(cfg, data, &mut state, cfg.epochs, |_, _| Ok(()))?;
    Ok(TrainOutcome { state, history })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyEval {
    pub family: Family,
    pub samples: usize,
    pub one_step_l2re: f64,
    pub persistence_l2re: f64,
    /// Image-level statistics per layer.
    pub image_stats: Vec<LoadBalanceStats>,
    /// Token-level statistics merged over every Sub-MoE invocation.
    pub token_stats: Option<LoadBalanceStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub one_step_l2re: f64,
    pub persistence_l2re: f64,
    /// Mean L2RE at rollout steps `1..=S` over trajectories long enough to score.
    pub rollout_l2re: Vec<f64>,
    pub families: Vec<FamilyEval>,
}

const EVAL_BATCH: usize = 64;

fn merge_into(slot: &mut Option<LoadBalanceStats>, s: &LoadBalanceStats) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(acc) => acc.merge(s)?,
        None => s.clone(),
    });
    Ok(())
}

/// One-step and rollout L2RE without noise, with the persistence baseline
/// (`ŷ = last input frame`) and routing statistics per family.
pub fn evaluate(params: &ModelParams<Tensor>, cfg: &ModelConfig, data: &[Dataset], steps: usize) -> Result<EvalReport> {
    let history = cfg.history;
    let mut families: Vec<FamilyEval> = Vec::new();
    let mut roll_sums = vec![0.0; steps];
    let mut roll_counts = vec![0usize; steps];
    for ds in data {
        let [t, c, h, w] = ds.dims;
        if c != cfg.channels || h != cfg.height || w != cfg.width || t <= history {
            return Err(Error::Format(format!(
                "{} dataset {:?} does not match the model ({}x{}x{}, history {})",
                ds.family.name(),
                ds.dims,
                cfg.channels,
                cfg.height,
                cfg.width,
                history
            )));
        }
        let idx = match families.iter().position(|f| f.family == ds.family) {
            Some(i) => i,
            None => {
                families.push(FamilyEval {
                    family: ds.family,
                    samples: 0,
                    one_step_l2re: 0.0,
                    persistence_l2re: 0.0,
                    image_stats: Vec::new(),
                    token_stats: None,
                });
                families.len() - 1
            }
        };
        let fam = &mut families[idx];
        let n = ds.windows(history);
        let mut image: Vec<Option<LoadBalanceStats>> = fam.image_stats.drain(..).map(Some).collect();
        for start in (0..n).step_by(EVAL_BATCH) {
            let picks: Vec<(usize, usize)> = (start..(start + EVAL_BATCH).min(n)).map(|i| (0, i)).collect();
            let (frames, target) = assemble_batch(std::slice::from_ref(ds), &picks, history)?;
            let out = forward(&frames, params, cfg)?;
            let b = picks.len() as f64;
            fam.one_step_l2re += l2re(&out.prediction, &target)?.value * b;
            fam.persistence_l2re += l2re(&frames[history - 1], &target)?.value * b;
            fam.samples += picks.len();
            image.resize(out.image_stats.len(), None);
            for (slot, s) in image.iter_mut().zip(&out.image_stats) {
                merge_into(slot, s)?;
            }
            for s in &out.token_stats {
                merge_into(&mut fam.token_stats, s)?;
            }
        }
        fam.image_stats = image.into_iter().flatten().collect();

        let horizon = steps.min(t - history);
        if horizon > 0 {
            for chunk in ds.trajectories.chunks(EVAL_BATCH) {
                let init: Vec<Tensor> = (0..history)
                    .map(|k| {
                        let f: Vec<Tensor> = chunk.iter().map(|tr| tr.frame(k)).collect::<Result<_>>()?;
                        Tensor::stack(&f.iter().collect::<Vec<_>>())
                    })
                    .collect::<Result<_>>()?;
                let preds = rollout(&init, params, cfg, horizon)?;
                for (s, pred) in preds.iter().enumerate() {
                    let truth: Vec<Tensor> =
                        chunk.iter().map(|tr| tr.frame(history + s)).collect::<Result<_>>()?;
                    let truth = Tensor::stack(&truth.iter().collect::<Vec<_>>())?;
                    roll_sums[s] += l2re(pred, &truth)?.value * chunk.len() as f64;
                    roll_counts[s] += chunk.len();
                }
            }
        }
    }
    let samples: usize = families.iter().map(|f| f.samples).sum();
    if samples == 0 {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let one = families.iter().map(|f| f.one_step_l2re).sum::<f64>() / samples as f64;
    let pers = families.iter().map(|f| f.persistence_l2re).sum::<f64>() / samples as f64;
    for f in &mut families {
        f.one_step_l2re /= f.samples as f64;
        f.persistence_l2re /= f.samples as f64;
    }
    Ok(EvalReport {
        samples,
        one_step_l2re: one,
        persistence_l2re: pers,
        rollout_l2re: roll_sums
            .iter()
            .zip(&roll_counts)
            .take_while(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        families,
    })
}

/// Half the L1 distance between two distributions.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingReport {
    /// Per family: `[layer][expert]` activation percentages.
    pub families: Vec<(Family, Vec<Vec<f64>>)>,
    /// Pairwise total-variation distance, averaged over layers.
    pub tv: Vec<(Family, Family, f64)>,
}

impl RoutingReport {
    pub fn to_csv(&self) -> String {
        let experts = self
            .families
            .iter()
            .flat_map(|(_, layers)| layers.iter().map(|l| l.len()))
            .max()
            .unwrap_or(0);
        let mut out = String::from("family,layer");
        for e in 0..experts {
            let _ = write!(out, ",expert{e}");
        }
        out.push('\n');
        for (family, layers) in &self.families {
            for (l, pct) in layers.iter().enumerate() {
                let _ = write!(out, "{},{l}", family.name());
                for p in pct {
                    let _ = write!(out, ",{p:.2}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn tv_between(&self, a: Family, b: Family) -> Option<f64> {
        self.tv
            .iter()
            .find(|(x, y, _)| (*x, *y) == (a, b) || (*x, *y) == (b, a))
            .map(|t| t.2)
    }
}

/// Per-family image-level expert usage and pairwise distances.
pub fn routing_report(stats: &[(Family, Vec<LoadBalanceStats>)]) -> RoutingReport {
    let families: Vec<(Family, Vec<Vec<f64>>)> = stats
        .iter()
        .map(|(f, layers)| {
            (
                *f,
                layers
                    .iter()
                    .map(|s| s.assign_frac.iter().map(|v| 100.0 * v).collect())
                    .collect(),
            )
        })
        .collect();
    let mut tv = Vec::new();
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            let (a, b) = (&stats[i].1, &stats[j].1);
            let layers = a.len().min(b.len());
            if layers == 0 {
                continue;
            }
            let d = (0..layers)
                .map(|l| tv_distance(&a[l].assign_frac, &b[l].assign_frac))
                .sum::<f64>()
                / layers as f64;
            tv.push((stats[i].0, stats[j].0, d));
        }
    }
    RoutingReport { families, tv }
}

impl EvalReport {
    pub fn routing_report(&self) -> RoutingReport {
        let stats: Vec<(Family, Vec<LoadBalanceStats>)> =
            self.families.iter().map(|f| (f.family, f.image_stats.clone())).collect();
        routing_report(&stats)
    }

    /// Balance losses of the evaluation-time routing, for logging.
    pub fn balance_losses(&self) -> Result<Vec<f64>> {
        self.families
            .iter()
            .flat_map(|f| f.image_stats.iter())
            .map(load_balance_loss)
            .collect()
    }
}

/// Scalar total loss of a batch without building gradients.
pub fn batch_loss(params: &ModelParams<Tensor>, cfg: &ModelConfig, frames: &[Tensor], target: &Tensor) -> Result<f64> {
    let out = forward(frames, params, cfg)?;
    let l2 = l2re(&out.prediction, target)?.value;
    let mean = |s: &[LoadBalanceStats]| -> Result<f64> {
        if s.is_empty() {
            return Ok(0.0);
        }
        Ok(s.iter().map(load_balance_loss).collect::<Result<Vec<_>>>()?.iter().sum::<f64>() / s.len() as f64)
    };
    total_loss(l2, mean(&out.image_stats)?, mean(&out.token_stats)?, &cfg.loss)
}
