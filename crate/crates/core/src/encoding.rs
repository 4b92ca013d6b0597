//! Patch embedding, positional table, temporal aggregation and the linear
//! decoding head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.height, self.width, self.patch_h, self.patch_w, self.embed_dim];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("patch config has a zero dimension: {self:?}")));
        }
        if self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} does not divide field {}x{}",
                self.patch_h, self.patch_w, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_w
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Flattened pixels per patch, `C·P_H·P_W`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }
}

/// Learnable encoder/head parameters, generic over storage (`Tensor` for
/// values, `Var` while recording on a tape).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `[C·P_H·P_W, D]`
    pub patch_w: T,
    /// `[D]`
    pub patch_b: T,
    /// `[N, D]`, shared across the batch.
    pub pos_embed: T,
    /// `[T, D, D]`, one mixing matrix per history frame.
    pub temporal: T,
    /// `[D, C·P_H·P_W]`
    pub head_w: T,
    /// `[C·P_H·P_W]`
    pub head_b: T,
}

impl<T> EncoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.patch_w"), &self.patch_w);
        f(format!("{prefix}.patch_b"), &self.patch_b);
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        f(format!("{prefix}.temporal"), &self.temporal);
        f(format!("{prefix}.head_w"), &self.head_w);
        f(format!("{prefix}.head_b"), &self.head_b);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            pos_embed: f(&self.pos_embed),
            temporal: f(&self.temporal),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }
}

/// `uniform(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl EncoderParams<Tensor> {
    /// Projections uniform in `±1/√fan_in`, positional table `N(0, 0.02)`,
    /// head zero so an untrained model predicts the zero field.
    pub fn init(cfg: &PatchConfig, history: usize, rng: &mut impl Rng) -> Self {
        let (p, d, n) = (cfg.patch_len(), cfg.embed_dim, cfg.num_patches());
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Self {
            patch_w: uniform_init(rng, &[p, d], p),
            patch_b: uniform_init(rng, &[d], p),
            pos_embed: Tensor::from_fn(&[n, d], |_| normal.sample(rng)),
            temporal: uniform_init(rng, &[history, d, d], d),
            head_w: Tensor::zeros(&[d, p]),
            head_b: Tensor::zeros(&[p]),
        }
    }

    pub fn zeros(cfg: &PatchConfig, history: usize) -> Self {
        let (p, d, n) = (cfg.patch_len(), cfg.embed_dim, cfg.num_patches());
        Self {
            patch_w: Tensor::zeros(&[p, d]),
            patch_b: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[n, d]),
            temporal: Tensor::zeros(&[history, d, d]),
            head_w: Tensor::zeros(&[d, p]),
            head_b: Tensor::zeros(&[p]),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderParams<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

fn check_field(x: &[usize], cfg: &PatchConfig) -> Result<usize> {
    if x.len() != 4 || x[1] != cfg.channels || x[2] != cfg.height || x[3] != cfg.width {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: x.to_vec(),
            rhs: vec![0, cfg.channels, cfg.height, cfg.width],
        });
    }
    Ok(x[0])
}

/// `[B, C, H, W] → [B, N, C·P_H·P_W]`, patches in row-major lattice order.
pub fn patchify(x: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let b = check_field(x.shape(), cfg)?;
    x.reshape(&[b, cfg.channels, cfg.grid_h(), cfg.patch_h, cfg.grid_w(), cfg.patch_w])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, cfg.num_patches(), cfg.patch_len()])
}

fn unpatchify_axes(b: usize, cfg: &PatchConfig) -> ([usize; 6], [usize; 6], [usize; 4]) {
    (
        [b, cfg.grid_h(), cfg.grid_w(), cfg.channels, cfg.patch_h, cfg.patch_w],
        [0, 3, 1, 4, 2, 5],
        [b, cfg.channels, cfg.height, cfg.width],
    )
}

/// Inverse of [`patchify`].
pub fn unpatchify(p: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    let b = p.shape()[0];
    if p.shape() != [b, cfg.num_patches(), cfg.patch_len()] {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: p.shape().to_vec(),
            rhs: vec![b, cfg.num_patches(), cfg.patch_len()],
        });
    }
    let (split, axes, out) = unpatchify_axes(b, cfg);
    p.reshape(&split)?.permute(&axes)?.reshape(&out)
}

pub fn unpatchify_var<'t>(p: Var<'t>, cfg: &PatchConfig) -> Result<Var<'t>> {
    let b = p.shape()[0];
    let (split, axes, out) = unpatchify_axes(b, cfg);
    p.reshape(&split)?.permute(&axes)?.reshape(&out)
}

/// `X[b,n] = patches[b,n]·W + bias + E_pos[n]`.
pub fn embed_var<'t>(patches: Var<'t>, params: &EncoderParams<Var<'t>>) -> Result<Var<'t>> {
    patches
        .linear(params.patch_w, params.patch_b)?
        .add_broadcast(params.pos_embed)
}

pub fn embed(patches: &Tensor, params: &EncoderParams<Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = embed_var(tape.leaf(patches.clone()), &p)?;
    Ok((*out.value()).clone())
}

/// `Y = Σ_t X_t·W_t` per lattice position over the embedded channels.
pub fn temporal_aggregate_var<'t>(frames: &[Var<'t>], weights: Var<'t>) -> Result<Var<'t>> {
    let history = weights.shape()[0];
    if frames.len() != history {
        return Err(Error::HistoryLength {
            expected: history,
            got: frames.len(),
        });
    }
    let mut acc: Option<Var<'t>> = None;
    for (t, frame) in frames.iter().enumerate() {
        let term = frame.matmul(weights.index0(t)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or(Error::EmptyBatch("temporal_aggregate"))
}

pub fn temporal_aggregate(frames: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<_> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
    let out = temporal_aggregate_var(&vars, tape.leaf(weights.clone()))?;
    Ok((*out.value()).clone())
}

/// Latent `[B, gh, gw, D]` → frame `[B, C, H, W]`.
pub fn decode_head_var<'t>(latent: Var<'t>, params: &EncoderParams<Var<'t>>, cfg: &PatchConfig) -> Result<Var<'t>> {
    let shape = latent.shape();
    if shape.len() != 4 || shape[1] != cfg.grid_h() || shape[2] != cfg.grid_w() || shape[3] != cfg.embed_dim {
        return Err(Error::Dimension {
            op: "decode_head",
            lhs: shape,
            rhs: vec![0, cfg.grid_h(), cfg.grid_w(), cfg.embed_dim],
        });
    }
    let pixels = latent
        .reshape(&[shape[0], cfg.num_patches(), cfg.embed_dim])?
        .linear(params.head_w, params.head_b)?;
    unpatchify_var(pixels, cfg)
}

pub fn decode_head(latent: &Tensor, params: &EncoderParams<Tensor>, cfg: &PatchConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = decode_head_var(tape.leaf(latent.clone()), &p, cfg)?;
    Ok((*out.value()).clone())
}

/// Embeds every history frame and aggregates them: `T × [B,C,H,W] → [B, gh, gw, D]`.
pub fn encode_var<'t>(
    tape: &'t Tape,
    frames: &[Tensor],
    params: &EncoderParams<Var<'t>>,
    cfg: &PatchConfig,
) -> Result<Var<'t>> {
    let mut embedded = Vec::with_capacity(frames.len());
    for f in frames {
        let b = f.shape()[0];
        let tokens = embed_var(tape.leaf(patchify(f, cfg)?), params)?;
        embedded.push(tokens.reshape(&[b, cfg.grid_h(), cfg.grid_w(), cfg.embed_dim])?);
    }
    temporal_aggregate_var(&embedded, params.temporal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_function;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cfg(c: usize, h: usize, w: usize, p: usize, d: usize) -> PatchConfig {
        PatchConfig {
            channels: c,
            height: h,
            width: w,
            patch_h: p,
            patch_w: p,
            embed_dim: d,
        }
    }

    #[test]
    fn unit_patches_are_row_major_pixels() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&x, &cfg(1, 2, 2, 1, 1)).unwrap();
        assert_eq!(p.shape(), &[1, 4, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn first_patch_holds_top_left_block() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = patchify(&x, &cfg(1, 4, 4, 2, 1)).unwrap();
        // pixels (0,0),(0,1),(1,0),(1,1) → flat 0,1,4,5
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn patchify_inverts() {
        let c = cfg(3, 8, 8, 2, 4);
        let x = random(&[2, 3, 8, 8], 1);
        assert_eq!(unpatchify(&patchify(&x, &c).unwrap(), &c).unwrap(), x);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(patchify(&x, &cfg(1, 6, 6, 4, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn embed_examples() {
        let c = cfg(1, 4, 4, 2, 4);
        let mut params = EncoderParams::zeros(&c, 1);
        params.pos_embed = random(&[4, 4], 2);
        let zero = Tensor::zeros(&[2, 4, 4]);
        let out = embed(&zero, &params).unwrap();
        for b in 0..2 {
            assert_eq!(&out.data()[b * 16..(b + 1) * 16], params.pos_embed.data());
        }
        params.pos_embed = Tensor::zeros(&[4, 4]);
        params.patch_w = Tensor::identity(4);
        let x = random(&[2, 4, 4], 3);
        assert_eq!(embed(&x, &params).unwrap(), x);
    }

    #[test]
    fn embed_matches_matmul_oracle() {
        let c = cfg(2, 4, 4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = EncoderParams::init(&c, 1, &mut rng);
        let x = random(&[2, 4, 8], 5);
        let got = embed(&x, &params).unwrap();
        for b in 0..2 {
            let rows = x.index0(b).unwrap();
            let proj = matmul(&rows, &params.patch_w).unwrap();
            for n in 0..4 {
                for d in 0..3 {
                    let want = proj.data()[n * 3 + d] + params.patch_b.data()[d] + params.pos_embed.data()[n * 3 + d];
                    assert!((got.data()[(b * 4 + n) * 3 + d] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_aggregate_examples() {
        let f = random(&[2, 2, 2, 3], 6);
        let w = Tensor::identity(3).reshape(&[1, 3, 3]).unwrap();
        assert_eq!(temporal_aggregate(&[f.clone()], &w).unwrap(), f);

        let avg = Tensor::identity(3).scale(1.0 / 3.0);
        let w3 = Tensor::stack(&[&avg, &avg, &avg]).unwrap();
        let out = temporal_aggregate(&[f.clone(), f.clone(), f.clone()], &w3).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);

        assert!(matches!(
            temporal_aggregate(&[f.clone()], &w3),
            Err(Error::HistoryLength { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn temporal_aggregate_two_term_oracle() {
        let f0 = random(&[1, 2, 2, 3], 7);
        let f1 = random(&[1, 2, 2, 3], 8);
        let w = random(&[2, 3, 3], 9);
        let got = temporal_aggregate(&[f0.clone(), f1.clone()], &w).unwrap();
        let flat = |t: &Tensor| t.reshape(&[4, 3]).unwrap();
        let want = matmul(&flat(&f0), &w.index0(0).unwrap())
            .unwrap()
            .add(&matmul(&flat(&f1), &w.index0(1).unwrap()).unwrap())
            .unwrap();
        assert!(got.reshape(&[4, 3]).unwrap().max_abs_diff(&want) < 1e-12);
        let scaled = temporal_aggregate(&[f0.scale(2.5), f1.scale(2.5)], &w).unwrap();
        assert!(scaled.max_abs_diff(&got.scale(2.5)) < 1e-12);
    }

    #[test]
    fn decode_head_examples() {
        let c = cfg(1, 4, 4, 2, 4);
        let params = EncoderParams::zeros(&c, 1);
        let out = decode_head(&random(&[3, 2, 2, 4], 10), &params, &c).unwrap();
        assert_eq!(out.shape(), &[3, 1, 4, 4]);
        assert!(out.data().iter().all(|v| *v == 0.0));

        // D == patch_len with identity projection: latent is the patch vector itself
        let mut params = EncoderParams::zeros(&c, 1);
        params.head_w = Tensor::identity(4);
        let frame = random(&[1, 1, 4, 4], 11);
        let latent = patchify(&frame, &c).unwrap().reshape(&[1, 2, 2, 4]).unwrap();
        assert_eq!(decode_head(&latent, &params, &c).unwrap(), frame);
    }

    #[test]
    fn translation_by_one_patch_shifts_tokens() {
        let c = cfg(1, 8, 8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = EncoderParams::init(&c, 1, &mut rng);
        params.pos_embed = Tensor::zeros(&[16, 3]);
        let x = random(&[1, 1, 8, 8], 13);
        // roll right by one patch (2 pixels)
        let shifted = Tensor::from_fn(&[1, 1, 8, 8], |i| {
            let (r, col) = (i / 8, i % 8);
            x.data()[r * 8 + (col + 6) % 8]
        });
        let a = embed(&patchify(&x, &c).unwrap(), &params).unwrap();
        let b = embed(&patchify(&shifted, &c).unwrap(), &params).unwrap();
        for gy in 0..4 {
            for gx in 0..4 {
                let src = gy * 4 + (gx + 3) % 4;
                let dst = gy * 4 + gx;
                assert_eq!(&b.data()[dst * 3..dst * 3 + 3], &a.data()[src * 3..src * 3 + 3]);
            }
        }
    }

    #[test]
    fn encoder_and_head_grad_check() {
        let c = cfg(1, 4, 4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = EncoderParams::init(&c, 2, &mut rng);
        params.head_w = uniform_init(&mut rng, &[3, 4], 3);
        params.head_b = uniform_init(&mut rng, &[4], 3);
        let frames = [random(&[2, 1, 4, 4], 15), random(&[2, 1, 4, 4], 16)];
        let mut flat = Vec::new();
        params.visit("enc", &mut |_, t| flat.push(t.clone()));
        let report = check_function(
            |tape, xs| {
                let p = EncoderParams {
                    patch_w: xs[0],
                    patch_b: xs[1],
                    pos_embed: xs[2],
                    temporal: xs[3],
                    head_w: xs[4],
                    head_b: xs[5],
                };
                let latent = encode_var(tape, &frames, &p, &c)?;
                let out = decode_head_var(latent, &p, &c)?;
                out.mul(out)?.sum()
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
