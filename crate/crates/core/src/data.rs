//! Synthetic PDE trajectories on periodic grids, channel padding, the
//! size-balanced sampler and the `PDED` dataset file format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PDED";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Heat,
    Advection,
    #[serde(rename = "dr")]
    DiffusionReaction,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Heat, Family::Advection, Family::DiffusionReaction];

    pub fn id(self) -> u16 {
        match self {
            Family::Heat => 0,
            Family::Advection => 1,
            Family::DiffusionReaction => 2,
        }
    }

    pub fn from_id(id: u16) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown family id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Heat => "heat",
            Family::Advection => "advection",
            Family::DiffusionReaction => "dr",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown family '{s}' (expected heat, advection or dr)")))
    }
}

/// Random smooth field: Fourier modes with `|kx|, |ky| ≤ band_limit`,
/// normalized to unit RMS fluctuation, scaled by `amplitude` and shifted
/// by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub seed: u64,
    pub band_limit: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// One trajectory's physics on the unit periodic square. Grid spacing is
/// `1/W` along x and `1/H` along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeInstanceSpec {
    pub family: Family,
    #[serde(default)]
    pub diffusivity: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Logistic reaction rate `κ` in `R(u) = κu(1 − u)`.
    #[serde(default)]
    pub reaction: f64,
    pub initial: InitialCondition,
    pub height: usize,
    pub width: usize,
    pub dt: f64,
    /// Solver steps between stored frames.
    #[serde(default = "one_usize")]
    pub substeps: usize,
    /// Stored frames including `u₀`.
    pub frames: usize,
}

impl PdeInstanceSpec {
    pub fn dx(&self) -> f64 {
        1.0 / self.width as f64
    }

    pub fn dy(&self) -> f64 {
        1.0 / self.height as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.substeps == 0 {
            return Err(Error::Config("grid, frames and substeps must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let finite = [self.diffusivity, self.velocity[0], self.velocity[1], self.reaction];
        if finite.iter().any(|v| !v.is_finite()) || self.diffusivity < 0.0 {
            return Err(Error::Config("coefficients must be finite with D >= 0".into()));
        }
        match self.family {
            Family::Heat | Family::DiffusionReaction => {
                let r = self.diffusivity * self.dt * (1.0 / (self.dx() * self.dx()) + 1.0 / (self.dy() * self.dy()));
                if r > 0.25 + 1e-12 {
                    return Err(Error::Stability(format!(
                        "diffusion number D·dt·(1/dx² + 1/dy²) = {r:.6} exceeds 0.25"
                    )));
                }
            }
            Family::Advection => {
                let c = self.velocity[0].abs() * self.dt / self.dx() + self.velocity[1].abs() * self.dt / self.dy();
                if c > 1.0 + 1e-12 {
                    return Err(Error::Stability(format!(
                        "upwind Courant number |vx|·dt/dx + |vy|·dt/dy = {c:.6} exceeds 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Frames `[T_total, C, H, W]` of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub family: Family,
    pub data: Tensor,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// Frame `t` as `[C, H, W]`.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.data.index0(t)
    }
}

pub fn random_field(ic: &InitialCondition, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(ic.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let band = ic.band_limit as i64;
    let mut field = vec![0.0; height * width];
    for ky in -band..=band {
        for kx in 0..=band {
            // one of each ±k pair
            if (kx == 0 && ky <= 0) || (kx, ky) == (0, 0) {
                continue;
            }
            let (a, b) = (normal.sample(&mut rng), normal.sample(&mut rng));
            for i in 0..height {
                for j in 0..width {
                    let phase = 2.0
                        * std::f64::consts::PI
                        * (kx as f64 * j as f64 / width as f64 + ky as f64 * i as f64 / height as f64);
                    field[i * width + j] += a * phase.cos() + b * phase.sin();
                }
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let rms = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = if rms > 0.0 { ic.amplitude / rms } else { 0.0 };
    Tensor::new(
        vec![height, width],
        field.iter().map(|v| (v - mean) * scale + ic.offset).collect(),
    )
    .expect("consistent shape")
}

fn laplacian(u: &[f64], h: usize, w: usize, dx: f64, dy: f64, out: &mut [f64]) {
    let (ix, iy) = (1.0 / (dx * dx), 1.0 / (dy * dy));
    for i in 0..h {
        let (up, down) = ((i + h - 1) % h, (i + 1) % h);
        for j in 0..w {
            let (left, right) = ((j + w - 1) % w, (j + 1) % w);
            let c = u[i * w + j];
            out[i * w + j] =
                (u[i * w + left] - 2.0 * c + u[i * w + right]) * ix + (u[up * w + j] - 2.0 * c + u[down * w + j]) * iy;
        }
    }
}

fn upwind(u: &[f64], h: usize, w: usize, cx: f64, cy: f64, out: &mut [f64]) {
    for i in 0..h {
        let (up, down) = ((i + h - 1) % h, (i + 1) % h);
        for j in 0..w {
            let (left, right) = ((j + w - 1) % w, (j + 1) % w);
            let nx = if cx >= 0.0 { u[i * w + left] } else { u[i * w + right] };
            let ny = if cy >= 0.0 { u[up * w + j] } else { u[down * w + j] };
            // convex combination; exact shift when one Courant number is 1
            out[i * w + j] = (1.0 - cx.abs() - cy.abs()) * u[i * w + j] + cx.abs() * nx + cy.abs() * ny;
        }
    }
}

/// Steps `u₀` (`[H, W]`) forward under `spec`, storing every `substeps`-th state.
pub fn evolve(spec: &PdeInstanceSpec, u0: &Tensor) -> Result<Trajectory> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    if u0.shape() != [h, w] {
        return Err(Error::Shape {
            shape: u0.shape().to_vec(),
            reason: format!("initial field must be [{h}, {w}]"),
        });
    }
    let mut u = u0.data().to_vec();
    let mut tmp = vec![0.0; h * w];
    let mut data = Vec::with_capacity(spec.frames * h * w);
    data.extend_from_slice(&u);
    let (dx, dy, dt) = (spec.dx(), spec.dy(), spec.dt);
    for _ in 1..spec.frames {
        for _ in 0..spec.substeps {
            match spec.family {
                Family::Heat => {
                    laplacian(&u, h, w, dx, dy, &mut tmp);
                    for (v, l) in u.iter_mut().zip(&tmp) {
                        *v += spec.diffusivity * dt * l;
                    }
                }
                Family::DiffusionReaction => {
                    laplacian(&u, h, w, dx, dy, &mut tmp);
                    for (v, l) in u.iter_mut().zip(&tmp) {
                        let reaction = dt * spec.reaction * *v * (1.0 - *v);
                        *v = *v + spec.diffusivity * dt * l + reaction;
                    }
                }
                Family::Advection => {
                    upwind(&u, h, w, spec.velocity[0] * dt / dx, spec.velocity[1] * dt / dy, &mut tmp);
                    std::mem::swap(&mut u, &mut tmp);
                }
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} trajectory diverged", spec.family.name())));
        }
        data.extend_from_slice(&u);
    }
    Ok(Trajectory {
        family: spec.family,
        data: Tensor::new(vec![spec.frames, 1, h, w], data)?,
    })
}

fn generate(spec: &PdeInstanceSpec, family: Family) -> Result<Trajectory> {
    if spec.family != family {
        return Err(Error::Config(format!(
            "spec is for {} but {} was requested",
            spec.family.name(),
            family.name()
        )));
    }
    spec.validate()?;
    evolve(spec, &random_field(&spec.initial, spec.height, spec.width))
}

/// Periodic FTCS heat equation.
pub fn gen_heat2d(spec: &PdeInstanceSpec) -> Result<Trajectory> {
    generate(spec, Family::Heat)
}

/// First-order upwind periodic transport.
pub fn gen_advection2d(spec: &PdeInstanceSpec) -> Result<Trajectory> {
    generate(spec, Family::Advection)
}

/// FTCS diffusion with an explicit logistic reaction term.
pub fn gen_dr2d(spec: &PdeInstanceSpec) -> Result<Trajectory> {
    generate(spec, Family::DiffusionReaction)
}

pub fn gen_trajectory(spec: &PdeInstanceSpec) -> Result<Trajectory> {
    generate(spec, spec.family)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub c_max: usize,
    #[serde(default)]
    pub mask: bool,
}

impl DatasetSchema {
    /// Channels seen by the model.
    pub fn model_channels(&self) -> usize {
        self.c_max + usize::from(self.mask)
    }
}

/// Pads channels `[C, C_max)` with ones and optionally appends an all-ones
/// mask channel.
pub fn pad_and_mask(traj: &Trajectory, schema: &DatasetSchema) -> Result<Trajectory> {
    let s = traj.data.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c > schema.c_max {
        return Err(Error::Shape {
            shape: s.to_vec(),
            reason: format!("{c} channels exceed schema maximum {}", schema.c_max),
        });
    }
    let out_c = schema.model_channels();
    let plane = h * w;
    let mut data = Vec::with_capacity(t * out_c * plane);
    for frame in traj.data.data().chunks_exact(c * plane) {
        data.extend_from_slice(frame);
        data.resize(data.len() + (out_c - c) * plane, 1.0);
    }
    Ok(Trajectory {
        family: traj.family,
        data: Tensor::new(vec![t, out_c, h, w], data)?,
    })
}

/// Keeps the first `native` channels.
pub fn strip_pads(traj: &Trajectory, native: usize) -> Result<Trajectory> {
    let s = traj.data.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if native > c {
        return Err(Error::Shape {
            shape: s.to_vec(),
            reason: format!("cannot keep {native} of {c} channels"),
        });
    }
    let plane = h * w;
    let data = traj
        .data
        .data()
        .chunks_exact(c * plane)
        .flat_map(|f| f[..native * plane].iter().copied())
        .collect();
    Ok(Trajectory {
        family: traj.family,
        data: Tensor::new(vec![t, native, h, w], data)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub weights: Vec<f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerProbs {
    /// Probability of drawing any single sample of dataset `k`.
    pub per_sample: Vec<f64>,
    /// Factor applied to `w_k / (K·|D_k|·Σw)` so that probabilities sum to one.
    pub correction: f64,
}

impl SamplerProbs {
    /// Total probability of drawing from dataset `k`.
    pub fn dataset_probs(&self, sizes: &[usize]) -> Vec<f64> {
        self.per_sample.iter().zip(sizes).map(|(p, &n)| p * n as f64).collect()
    }
}

pub fn sampler_probs(cfg: &SamplerConfig) -> Result<SamplerProbs> {
    let k = cfg.weights.len();
    if k == 0 || cfg.sizes.len() != k {
        return Err(Error::Config(format!(
            "sampler needs one weight per dataset ({} weights, {} sizes)",
            k,
            cfg.sizes.len()
        )));
    }
    if cfg.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Config("sampler weights must be positive".into()));
    }
    if cfg.sizes.iter().any(|&n| n == 0) {
        return Err(Error::EmptyBatch("sampler dataset"));
    }
    let wsum: f64 = cfg.weights.iter().sum();
    let printed: Vec<f64> = cfg
        .weights
        .iter()
        .zip(&cfg.sizes)
        .map(|(w, &n)| w / (k as f64 * n as f64 * wsum))
        .collect();
    let mass: f64 = printed.iter().zip(&cfg.sizes).map(|(p, &n)| p * n as f64).sum();
    let correction = 1.0 / mass;
    Ok(SamplerProbs {
        per_sample: printed.iter().map(|p| p * correction).collect(),
        correction,
    })
}

/// Draws `(dataset, sample)` pairs with replacement.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    sizes: Vec<usize>,
    datasets: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(cfg: &SamplerConfig, seed: u64) -> Result<Self> {
        let probs = sampler_probs(cfg)?;
        let datasets = WeightedIndex::new(probs.dataset_probs(&cfg.sizes))
            .map_err(|e| Error::Config(format!("sampler weights: {e}")))?;
        Ok(Self {
            sizes: cfg.sizes.clone(),
            datasets,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> (usize, usize) {
        let k = self.datasets.sample(&mut self.rng);
        (k, self.rng.gen_range(0..self.sizes[k]))
    }
}

/// Storage precision of a dataset payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Trajectories of one family sharing `[T_total, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: Family,
    /// `(T_total, C, H, W)`; meaningful even when there are no trajectories.
    pub dims: [usize; 4],
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(family: Family, trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyBatch("dataset"))?;
        let s = first.data.shape();
        let dims = [s[0], s[1], s[2], s[3]];
        for t in &trajectories {
            if t.data.shape() != dims || t.family != family {
                return Err(Error::Shape {
                    shape: t.data.shape().to_vec(),
                    reason: format!("every {} trajectory must be {dims:?}", family.name()),
                });
            }
        }
        Ok(Self {
            family,
            dims,
            trajectories,
        })
    }

    pub fn empty(family: Family, dims: [usize; 4]) -> Self {
        Self {
            family,
            dims,
            trajectories: Vec::new(),
        }
    }

    /// History windows of length `history` followed by one target frame.
    pub fn windows(&self, history: usize) -> usize {
        self.trajectories.len() * self.dims[0].saturating_sub(history)
    }

    /// Window `i`: `history` frames of `[C, H, W]` and the target frame.
    pub fn window(&self, i: usize, history: usize) -> Result<(Vec<Tensor>, Tensor)> {
        let per = self.dims[0].saturating_sub(history);
        if per == 0 || i >= self.windows(history) {
            return Err(Error::Contract(format!("window {i} out of range")));
        }
        let traj = &self.trajectories[i / per];
        let start = i % per;
        let frames = (start..start + history).map(|t| traj.frame(t)).collect::<Result<_>>()?;
        Ok((frames, traj.frame(start + history)?))
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset, dtype: Dtype) -> Result<()> {
    let [t, c, h, w] = ds.dims;
    let mut payload = Vec::with_capacity(ds.trajectories.len() * t * c * h * w * dtype.width());
    for traj in &ds.trajectories {
        for &v in traj.data.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let mut buf = Vec::with_capacity(payload.len() + 40);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&ds.family.id().to_le_bytes());
    for n in [ds.trajectories.len(), t, c, h, w] {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("count {n} does not fit in u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    buf.push(dtype.tag());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a PDED dataset", path.display())));
    }
    let version = cur.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let family = Family::from_id(cur.u16()?)?;
    let mut counts = [0usize; 5];
    for c in &mut counts {
        *c = cur.u32()? as usize;
    }
    let dtype = Dtype::from_tag(cur.take(1)?[0])?;
    let [n, t, c, h, w] = counts;
    let per = t * c * h * w;
    let len = n
        .checked_mul(per)
        .and_then(|v| v.checked_mul(dtype.width()))
        .ok_or_else(|| Error::Format("dataset header overflows".into()))?;
    let payload = cur.take(len)?;
    let stored = cur.u32()?;
    if cur.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checksum", buf.len() - cur.pos)));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    let trajectories = if per == 0 {
        Vec::new()
    } else {
        values
            .chunks_exact(per)
            .map(|chunk| {
                Ok(Trajectory {
                    family,
                    data: Tensor::new(vec![t, c, h, w], chunk.to_vec())?,
                })
            })
            .collect::<Result<_>>()?
    };
    Ok(Dataset {
        family,
        dims: [t, c, h, w],
        trajectories,
    })
}

/// Recipe for a family's trajectories: trajectory `i` uses the template
/// with initial-condition seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub template: PdeInstanceSpec,
    pub count: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn instance(&self, i: usize) -> PdeInstanceSpec {
        let mut spec = self.template;
        spec.initial.seed = self.seed.wrapping_add(i as u64);
        spec
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.template.validate()?;
        let trajs = (0..self.count)
            .map(|i| gen_trajectory(&self.instance(i)))
            .collect::<Result<Vec<_>>>()?;
        if trajs.is_empty() {
            let t = &self.template;
            return Ok(Dataset::empty(t.family, [t.frames, 1, t.height, t.width]));
        }
        Dataset::new(self.template.family, trajs)
    }
}

/// `data.pded` → `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_meta(path: &Path, spec: &GenSpec) -> Result<()> {
    fs::write(meta_path(path), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}
