//! Pose-guided video generation: a small causal-style video autoencoder
//! (first frame alone, later frames in groups of four, ×8 spatial), a
//! skeleton encoder with the same layout, and a latent noise-prediction
//! transformer alternating appearance blocks (attending to a reference
//! frame) and motion blocks (attending to previously generated frames).
//! Long videos are produced window by window, each window conditioned on
//! the tail of the previous one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::nn::{sinusoidal, upsample};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Conv, ConvSpec, Graph, Linear, ParamStore, Tensor, Var, Volume};
use crate::transformer::{joint_attention_first, modulate, ContextLayer, StreamLayer, TimeEmbedding};

pub const DIT_V_MAGIC: &[u8; 7] = b"COSHDV1";
/// Frames folded into one latent step after the first frame.
pub const FRAME_GROUP: usize = 4;
pub const SPATIAL_DOWN: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
const GRAD_CLIP: f64 = 1.0;
/// Temporal position given to reference tokens, far from any window.
const REFERENCE_TIME: f64 = -64.0;

/// Latent steps for `frames` video frames (`1 + (K−1)/4`).
pub fn latent_frames(frames: usize) -> Result<usize> {
    if frames == 0 || (frames - 1) % FRAME_GROUP != 0 {
        return Err(Error::shape(format!("{frames} frames is not 1 + 4k")));
    }
    Ok(1 + (frames - 1) / FRAME_GROUP)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    /// Frames per generated window.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub block_pairs: usize,
    pub heads: usize,
    /// Previous frames carried into the next window.
    pub motion_frames: usize,
    pub drop_previous: f64,
    /// Reference frame is drawn within this many frames of the window.
    pub reference_range: usize,
    #[serde(rename = "steps_T")]
    pub train_steps: usize,
    pub sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub ae_channels: usize,
    pub pose_channels: usize,
    pub ae_lr: f64,
    /// Autoencoder optimizer steps in `fit_video`.
    pub ae_iters: usize,
    /// Denoiser optimizer steps in `fit_video`; the rate decays along a
    /// cosine from `lr` to `min_lr`.
    pub iters: usize,
    pub min_lr: f64,
    /// `false` removes every motion block (appearance-only ablation).
    pub motion_blocks: bool,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VideoConfig {
    pub fn desk() -> Self {
        Self {
            frames: 25,
            height: 64,
            width: 64,
            patch: 2,
            embed_dim: 128,
            block_pairs: 4,
            heads: 4,
            motion_frames: 5,
            drop_previous: 0.2,
            reference_range: 30,
            train_steps: 1000,
            sample_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-3,
            ae_channels: 16,
            pose_channels: 16,
            ae_lr: 2e-3,
            ae_iters: 1500,
            iters: 2500,
            min_lr: 1e-5,
            motion_blocks: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        latent_frames(self.frames).map_err(|_| Error::Config(format!("frames {} is not 1 + 4k", self.frames)))?;
        if self.motion_frames > 0 {
            latent_frames(self.motion_frames)
                .map_err(|_| Error::Config(format!("motion_frames {} is not 1 + 4k", self.motion_frames)))?;
        }
        if self.motion_frames >= self.frames {
            return bad("motion_frames must be below frames".into());
        }
        let cell = SPATIAL_DOWN * self.patch;
        if self.patch == 0 || self.height == 0 || self.width == 0 || self.height % cell != 0 || self.width % cell != 0 {
            return bad(format!("{}x{} not divisible by {cell}", self.height, self.width));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim {} incompatible with {} heads", self.embed_dim, self.heads));
        }
        if !(0.0..=1.0).contains(&self.drop_previous) {
            return bad("drop_previous outside [0, 1]".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.train_steps {
            return bad("sample_steps must be in 1..=steps_T".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start < beta_end < 1".into());
        }
        if self.block_pairs == 0 || self.ae_channels == 0 || self.pose_channels == 0 || !(self.lr > 0.0 && self.ae_lr > 0.0 && self.min_lr > 0.0) {
            return bad("block_pairs, channels and learning rates must be positive".into());
        }
        Ok(())
    }

    /// `(latent steps, latent height, latent width)` of one window.
    pub fn latent_grid(&self) -> (usize, usize, usize) {
        (
            1 + (self.frames - 1) / FRAME_GROUP,
            self.height / SPATIAL_DOWN,
            self.width / SPATIAL_DOWN,
        )
    }
}

fn stack_index(groups: usize, hw: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(groups * hw * 12);
    for gi in 0..groups {
        for p in 0..hw {
            for f in 0..FRAME_GROUP {
                for c in 0..3 {
                    idx.push((((1 + FRAME_GROUP * gi + f) * hw + p) * 3 + c) as u32);
                }
            }
        }
    }
    idx
}

fn unstack_index(groups: usize, hw: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(groups * hw * 12);
    for gi in 0..groups {
        for f in 0..FRAME_GROUP {
            for p in 0..hw {
                for c in 0..3 {
                    idx.push(((gi * hw + p) * 12 + f * 3 + c) as u32);
                }
            }
        }
    }
    idx
}

/// `(t, H, W) × c` → `(t, H/2, W/2) × 4c`, each output pixel listing its
/// 2×2 input cell row-major, channels last.
fn space_to_depth_index(t: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = (ti * h + 2 * y + dy) * w + 2 * x + dx;
                        idx.extend((0..c).map(|ci| (row * c + ci) as u32));
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`space_to_depth_index`] for the full-resolution volume.
fn depth_to_space_index(t: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    inverse(&space_to_depth_index(t, h, w, c))
}

/// `x + conv(relu(conv(relu(x))))` at fixed width and resolution.
#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        let k3 = ConvSpec::spatial(3, 1, 1);
        let std = 0.1 / ((9 * ch) as f64).sqrt();
        Self {
            a: Conv::new(store, &format!("{name}.a"), ch, ch, k3, rng),
            b: Conv::with_std(store, &format!("{name}.b"), ch, ch, k3, std, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, v: Volume) -> Result<Var> {
        let h = g.relu(x);
        let (h, _) = self.a.forward(g, h, v)?;
        let h = g.relu(h);
        let (h, _) = self.b.forward(g, h, v)?;
        g.add(x, h)
    }
}

/// Frames → latent-shaped features. The first frame and each later group
/// of four are folded 2×2 into channels and get their own input
/// convolution; a shared stack then halves the resolution twice (×8 in
/// total), widening to `2·ch` at the coarse levels.
#[derive(Clone, Debug)]
pub(crate) struct FrameEncoder {
    first: Conv,
    group: Conv,
    down: [Conv; 2],
    res: Vec<ResBlock>,
    out: Conv,
}

impl FrameEncoder {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        let k3 = ConvSpec::spatial(3, 1, 1);
        let k4 = ConvSpec::spatial(4, 2, 1);
        Self {
            first: Conv::new(store, &format!("{name}.first"), 4 * 3, ch, k3, rng),
            group: Conv::new(store, &format!("{name}.group"), 4 * 3 * FRAME_GROUP, ch, k3, rng),
            down: [
                Conv::new(store, &format!("{name}.down0"), ch, 2 * ch, k4, rng),
                Conv::new(store, &format!("{name}.down1"), 2 * ch, 2 * ch, k4, rng),
            ],
            res: (0..2)
                .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), 2 * ch, rng))
                .collect(),
            out: Conv::new(store, &format!("{name}.out"), 2 * ch, LATENT_CHANNELS, k3, rng),
        }
    }

    /// `x` is `(K·H·W) × 3`; returns `(T·h·w) × 4`.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var, k: usize, h: usize, w: usize) -> Result<Var> {
        let groups = latent_frames(k)? - 1;
        let hw = h * w;
        let (h2, w2) = (h / 2, w / 2);
        let first = g.slice_rows(x, 0, hw)?;
        let first = g.gather(first, space_to_depth_index(1, h, w, 3).into(), &[h2 * w2, 12])?;
        let (mut y, _) = self.first.forward(g, first, Volume::new(1, h2, w2))?;
        if groups > 0 {
            let s = g.gather(x, stack_index(groups, hw).into(), &[groups * hw, 12])?;
            let c = 3 * FRAME_GROUP;
            let s = g.gather(s, space_to_depth_index(groups, h, w, c).into(), &[groups * h2 * w2, 4 * c])?;
            let (b, _) = self.group.forward(g, s, Volume::new(groups, h2, w2))?;
            y = g.concat_rows(&[y, b])?;
        }
        let mut v = Volume::new(1 + groups, h2, w2);
        for conv in &self.down {
            y = g.relu(y);
            let (z, nv) = conv.forward(g, y, v)?;
            y = z;
            v = nv;
        }
        for r in &self.res {
            y = r.forward(g, y, v)?;
        }
        let y = g.relu(y);
        Ok(self.out.forward(g, y, v)?.0)
    }
}

/// Mirror of [`FrameEncoder`]; the last stage predicts 2×2 sub-pixel
/// blocks that are unfolded to full resolution.
#[derive(Clone, Debug)]
struct FrameDecoder {
    input: Conv,
    res: Vec<ResBlock>,
    up: [Conv; 2],
    up_res: ResBlock,
    first: Conv,
    group: Conv,
}

impl FrameDecoder {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        let k3 = ConvSpec::spatial(3, 1, 1);
        Self {
            input: Conv::new(store, &format!("{name}.in"), LATENT_CHANNELS, 2 * ch, k3, rng),
            res: (0..2)
                .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), 2 * ch, rng))
                .collect(),
            up: [
                Conv::new(store, &format!("{name}.up0"), 2 * ch, 2 * ch, k3, rng),
                Conv::new(store, &format!("{name}.up1"), 2 * ch, ch, k3, rng),
            ],
            up_res: ResBlock::new(store, &format!("{name}.up_res"), 2 * ch, rng),
            first: Conv::new(store, &format!("{name}.first"), ch, 4 * 3, k3, rng),
            group: Conv::new(store, &format!("{name}.group"), ch, 4 * 3 * FRAME_GROUP, k3, rng),
        }
    }

    /// `(T·h·w) × 4` → `(K·H·W) × 3`, unclamped.
    fn forward(&self, g: &mut Graph<'_>, z: Var, t: usize, h: usize, w: usize) -> Result<Var> {
        let mut v = Volume::new(t, h, w);
        let (mut y, _) = self.input.forward(g, z, v)?;
        for r in &self.res {
            y = r.forward(g, y, v)?;
        }
        for (i, conv) in self.up.iter().enumerate() {
            let r = g.relu(y);
            let (u, nv) = upsample(g, r, v, [1, 2, 2])?;
            let (c, _) = conv.forward(g, u, nv)?;
            v = nv;
            y = if i == 0 { self.up_res.forward(g, c, v)? } else { c };
        }
        let y = g.relu(y);
        let (h2, w2) = (v.h, v.w);
        let (fh, fw) = (2 * h2, 2 * w2);
        let cell = h2 * w2;
        let first = g.slice_rows(y, 0, cell)?;
        let (out, _) = self.first.forward(g, first, Volume::new(1, h2, w2))?;
        let out = g.gather(out, depth_to_space_index(1, fh, fw, 3).into(), &[fh * fw, 3])?;
        if t == 1 {
            return Ok(out);
        }
        let c = 3 * FRAME_GROUP;
        let rest = g.slice_rows(y, cell, t * cell)?;
        let (r, _) = self.group.forward(g, rest, Volume::new(t - 1, h2, w2))?;
        let r = g.gather(r, depth_to_space_index(t - 1, fh, fw, c).into(), &[(t - 1) * fh * fw, c])?;
        let frames = g.gather(r, unstack_index(t - 1, fh * fw).into(), &[FRAME_GROUP * (t - 1) * fh * fw, 3])?;
        g.concat_rows(&[out, frames])
    }
}

fn check_video(video: &Tensor) -> Result<(usize, usize, usize)> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape(format!("video must be K x H x W x 3, got {s:?}")));
    }
    latent_frames(s[0])?;
    if s[1] == 0 || s[2] == 0 || s[1] % SPATIAL_DOWN != 0 || s[2] % SPATIAL_DOWN != 0 {
        return Err(Error::shape(format!("{}x{} not divisible by {SPATIAL_DOWN}", s[1], s[2])));
    }
    if !video.is_finite() {
        return Err(Error::Numeric("non-finite pixels".into()));
    }
    Ok((s[0], s[1], s[2]))
}

pub(crate) fn as_rows(t: &Tensor) -> Result<Tensor> {
    let c = *t.shape().last().unwrap_or(&0);
    t.clone().reshape(&[t.len() / c.max(1), c])
}

/// Toy video autoencoder; frozen once trained.
#[derive(Clone, Debug)]
pub struct VideoAe {
    pub channels: usize,
    pub store: ParamStore,
    encoder: FrameEncoder,
    decoder: FrameDecoder,
}

impl VideoAe {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = FrameEncoder::new(&mut store, "enc", channels, &mut rng);
        let decoder = FrameDecoder::new(&mut store, "dec", channels, &mut rng);
        Self {
            channels,
            store,
            encoder,
            decoder,
        }
    }

    /// Reconstruction (unclamped) of a `K × H × W × 3` clip on the tape.
    pub(crate) fn reconstruct_graph(&self, g: &mut Graph<'_>, video: &Tensor) -> Result<Var> {
        let (k, h, w) = check_video(video)?;
        let x = g.constant(as_rows(video)?);
        let z = self.encoder.forward(g, x, k, h, w)?;
        self.decoder.forward(g, z, latent_frames(k)?, h / SPATIAL_DOWN, w / SPATIAL_DOWN)
    }

    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        let (k, h, w) = check_video(video)?;
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(as_rows(video)?);
        let z = self.encoder.forward(&mut g, x, k, h, w)?;
        g.value(z)
            .clone()
            .reshape(&[latent_frames(k)?, h / SPATIAL_DOWN, w / SPATIAL_DOWN, LATENT_CHANNELS])
    }

    /// Latent `T × h × w × 4` → frames in `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 4 || s[3] != LATENT_CHANNELS || s[0] == 0 {
            return Err(Error::shape(format!("latent must be T x h x w x 4, got {s:?}")));
        }
        let mut g = Graph::with_params(&self.store);
        let z = g.constant(as_rows(latent)?);
        let y = self.decoder.forward(&mut g, z, s[0], s[1], s[2])?;
        let k = 1 + FRAME_GROUP * (s[0] - 1);
        g.value(y)
            .map(|v| v.clamp(0.0, 1.0))
            .reshape(&[k, s[1] * SPATIAL_DOWN, s[2] * SPATIAL_DOWN, 3])
    }
}

pub fn video_encode(ae: &VideoAe, video: &Tensor) -> Result<Tensor> {
    ae.encode(video)
}

pub fn video_decode(ae: &VideoAe, latent: &Tensor) -> Result<Tensor> {
    ae.decode(latent)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(10.0 * (1.0 / mse.max(1e-20)).log10())
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64)
}

pub fn new_ae_optimizer(ae: &VideoAe, lr: f64) -> Adam {
    Adam::new(&ae.store, AdamConfig::with_lr(lr))
}

/// One reconstruction-MSE step over `clips`; returns the loss before the update.
pub fn ae_train_step(ae: &mut VideoAe, adam: &mut Adam, clips: &[&Tensor]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    ae.store.zero_grads();
    let mut total = 0.0;
    for clip in clips {
        let mut g = Graph::with_params(&ae.store);
        let y = ae.reconstruct_graph(&mut g, clip)?;
        let target = g.constant(as_rows(clip)?);
        let l = g.mse(y, target)?;
        let l = g.scale(l, 1.0 / clips.len() as f64);
        total += g.value(l).data()[0];
        let grads = g.backward(l)?;
        ae.store.accumulate(&grads)?;
    }
    clip_grad_norm(&mut ae.store, GRAD_CLIP);
    adam.step(&mut ae.store)?;
    Ok(total)
}

/// Flat index taking a `T × h × w × c` latent to `(T·h/p·w/p) × (p·p·c)`
/// tokens; each token lists its `p × p` cell row-major, channels last.
pub fn patchify_index(t: usize, h: usize, w: usize, c: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    let mut idx = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        let row = (ti * h + py * p + dy) * w + px * p + dx;
                        idx.extend((0..c).map(|ci| (row * c + ci) as u32));
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn inverse(idx: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j as usize] = i as u32;
    }
    inv
}

pub fn patchify(latent: &Tensor, p: usize) -> Result<Tensor> {
    let s = latent.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("latent must be 4-D, got {s:?}")));
    }
    let idx = patchify_index(s[0], s[1], s[2], s[3], p)?;
    let data = idx.iter().map(|&i| latent.data()[i as usize]).collect();
    Tensor::new(&[latent.len() / (p * p * s[3]), p * p * s[3]], data)
}

pub fn unpatchify(tokens: &Tensor, grid: [usize; 4], p: usize) -> Result<Tensor> {
    let [t, h, w, c] = grid;
    let idx = patchify_index(t, h, w, c, p)?;
    if tokens.len() != idx.len() {
        return Err(Error::shape(format!("{} token values for grid {grid:?}", tokens.len())));
    }
    let data = inverse(&idx).iter().map(|&i| tokens.data()[i as usize]).collect();
    Tensor::new(&grid, data)
}

/// Fixed position code: spatial cell index in the first half, latent time
/// in the second.
fn token_positions(t: usize, hp: usize, wp: usize, t_offset: f64, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t * hp * wp * dim);
    for ti in 0..t {
        for cell in 0..hp * wp {
            data.extend(sinusoidal(cell as f64, dim / 2));
            data.extend(sinusoidal(ti as f64 + t_offset, dim / 2));
        }
    }
    Tensor::new(&[t * hp * wp, dim], data)
}

/// Linear-β Gaussian diffusion with `ᾱ` accumulated by explicit products.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl GaussianSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "invalid linear schedule ({steps}, {beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Evenly spaced timesteps, ascending, starting at 0.
    pub fn strided(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps() {
            return Err(Error::Schedule(format!("{count} sampling steps for T={}", self.steps())));
        }
        Ok((0..count).map(|i| i * self.steps() / count).collect())
    }

    /// `√ᾱ_t x₀ + √(1−ᾱ_t) ε`.
    pub fn add_noise(&self, x0: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        let a = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| Error::Schedule(format!("step {t} outside 0..{}", self.steps())))?;
        x0.zip_map(noise, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)
    }
}

fn randn_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug)]
struct BlockPair {
    appearance: StreamLayer,
    reference: ContextLayer,
    motion: Option<(StreamLayer, ContextLayer)>,
}

/// Denoiser inputs besides the noisy latent; latents are in normalized units.
#[derive(Clone, Debug)]
pub struct VideoConditions {
    /// `K × H × W × 3` skeleton renders for the window.
    pub poses: Tensor,
    /// `1 × h × w × 4`.
    pub reference_latent: Tensor,
    /// `1 × H × W × 3`.
    pub reference_pose: Tensor,
    /// `T_m × h × w × 4`, absent for a first window or when dropped.
    pub previous_latent: Option<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VideoMeta {
    config: VideoConfig,
    latent_shift: f64,
    latent_scale: f64,
}

#[derive(Clone, Debug)]
pub struct DitV {
    pub config: VideoConfig,
    pub ae: VideoAe,
    pub store: ParamStore,
    /// Raw latents are mapped to `(z − shift) / scale` before diffusion.
    pub latent_shift: f64,
    pub latent_scale: f64,
    pose: FrameEncoder,
    embed_target: Linear,
    embed_reference: Linear,
    embed_previous: Linear,
    time: TimeEmbedding,
    pairs: Vec<BlockPair>,
    final_mod: Linear,
    head: Linear,
}

impl DitV {
    pub fn new(config: VideoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = VideoAe::new(config.ae_channels, rng.random());
        let mut store = ParamStore::new();
        let f = config.embed_dim;
        let cell = config.patch * config.patch;
        let pose = FrameEncoder::new(&mut store, "pose", config.pose_channels, &mut rng);
        let embed_target = Linear::new(&mut store, "embed_target", cell * 2 * LATENT_CHANNELS, f, &mut rng);
        let embed_reference = Linear::new(&mut store, "embed_reference", cell * 2 * LATENT_CHANNELS, f, &mut rng);
        let embed_previous = Linear::new(&mut store, "embed_previous", cell * LATENT_CHANNELS, f, &mut rng);
        let time = TimeEmbedding::new(&mut store, "time", f, f, &mut rng);
        let pairs = (0..config.block_pairs)
            .map(|i| BlockPair {
                appearance: StreamLayer::new(&mut store, &format!("pair{i}.appearance"), f, f, &mut rng),
                reference: ContextLayer::new(&mut store, &format!("pair{i}.reference"), f, &mut rng),
                motion: config.motion_blocks.then(|| {
                    (
                        StreamLayer::new(&mut store, &format!("pair{i}.motion"), f, f, &mut rng),
                        ContextLayer::new(&mut store, &format!("pair{i}.previous"), f, &mut rng),
                    )
                }),
            })
            .collect();
        let final_mod = Linear::zeros(&mut store, "final_mod", f, 2 * f);
        let head = Linear::with_std(&mut store, "head", f, cell * LATENT_CHANNELS, 0.02, &mut rng);
        Ok(Self {
            config,
            ae,
            store,
            latent_shift: 0.0,
            latent_scale: 1.0,
            pose,
            embed_target,
            embed_reference,
            embed_previous,
            time,
            pairs,
            final_mod,
            head,
        })
    }

    /// Target tokens after every block pair. `previous` may be `None`, in
    /// which case motion blocks attend to the target alone.
    pub fn am_dit_forward(
        &self,
        g: &mut Graph<'_>,
        target: Var,
        reference: Var,
        previous: Option<Var>,
        t_emb: Var,
    ) -> Result<Var> {
        let n = g.shape(target)[0];
        let heads = self.config.heads;
        let mut x = target;
        for pair in &self.pairs {
            let m = pair.appearance.modulation.forward(g, t_emb, n)?;
            let (q, k, v) = pair.appearance.qkv(g, x, &m)?;
            let (kr, vr) = pair.reference.kv(g, reference)?;
            let a = joint_attention_first(g, q, &[(k, v), (kr, vr)], heads)?;
            x = pair.appearance.finish(g, x, a, &m)?;
            if let Some((layer, ctx)) = &pair.motion {
                let m = layer.modulation.forward(g, t_emb, n)?;
                let (q, k, v) = layer.qkv(g, x, &m)?;
                let mut kv = vec![(k, v)];
                if let Some(p) = previous {
                    kv.push(ctx.kv(g, p)?);
                }
                let a = joint_attention_first(g, q, &kv, heads)?;
                x = layer.finish(g, x, a, &m)?;
            }
        }
        Ok(x)
    }

    fn check_conditions(&self, c: &VideoConditions) -> Result<()> {
        let cfg = &self.config;
        let (_, h, w) = cfg.latent_grid();
        let img = [cfg.height, cfg.width, 3];
        if c.poses.shape() != [cfg.frames, img[0], img[1], 3] {
            return Err(Error::shape(format!("pose renders {:?} for {} frames", c.poses.shape(), cfg.frames)));
        }
        if c.reference_pose.shape() != [1, img[0], img[1], 3] || c.reference_latent.shape() != [1, h, w, LATENT_CHANNELS] {
            return Err(Error::shape("reference image or latent has the wrong shape"));
        }
        if let Some(p) = &c.previous_latent {
            let tm = latent_frames(cfg.motion_frames)?;
            if p.shape() != [tm, h, w, LATENT_CHANNELS] {
                return Err(Error::shape(format!("previous latent {:?}", p.shape())));
            }
        }
        Ok(())
    }

    fn tokens(&self, g: &mut Graph<'_>, x: Var, t: usize, channels: usize) -> Result<Var> {
        let (_, h, w) = self.config.latent_grid();
        let p = self.config.patch;
        let idx = patchify_index(t, h, w, channels, p)?;
        g.gather(x, idx.into(), &[t * h * w / (p * p), p * p * channels])
    }

    fn positions(&self, g: &mut Graph<'_>, x: Var, t: usize, t_offset: f64) -> Result<Var> {
        let (_, h, w) = self.config.latent_grid();
        let p = self.config.patch;
        let pos = token_positions(t, h / p, w / p, t_offset, self.config.embed_dim)?;
        let pos = g.constant(pos);
        g.add(x, pos)
    }

    /// Predicted noise for `x_t` (`(T·h·w) × 4` rows) at step `t`.
    pub fn predict_noise_graph(&self, g: &mut Graph<'_>, x_t: Var, c: &VideoConditions, t: usize) -> Result<Var> {
        self.check_conditions(c)?;
        let cfg = &self.config;
        let (tl, h, w) = cfg.latent_grid();
        if g.shape(x_t) != [tl * h * w, LATENT_CHANNELS] {
            return Err(Error::shape(format!("noisy latent {:?}", g.shape(x_t))));
        }
        if t >= cfg.train_steps {
            return Err(Error::Schedule(format!("step {t} outside 0..{}", cfg.train_steps)));
        }
        let (ih, iw) = (cfg.height, cfg.width);
        let poses = g.constant(as_rows(&c.poses)?);
        let pose_feat = self.pose.forward(g, poses, cfg.frames, ih, iw)?;
        let xin = g.concat_cols(&[x_t, pose_feat])?;
        let xin = self.tokens(g, xin, tl, 2 * LATENT_CHANNELS)?;
        let xin = self.embed_target.forward(g, xin)?;
        let target = self.positions(g, xin, tl, 0.0)?;

        let ref_pose = g.constant(as_rows(&c.reference_pose)?);
        let ref_feat = self.pose.forward(g, ref_pose, 1, ih, iw)?;
        let ref_lat = g.constant(as_rows(&c.reference_latent)?);
        let rin = g.concat_cols(&[ref_lat, ref_feat])?;
        let rin = self.tokens(g, rin, 1, 2 * LATENT_CHANNELS)?;
        let rin = self.embed_reference.forward(g, rin)?;
        let reference = self.positions(g, rin, 1, REFERENCE_TIME)?;

        let previous = match (&c.previous_latent, cfg.motion_blocks) {
            (Some(p), true) => {
                let tm = p.shape()[0];
                let pv = g.constant(as_rows(p)?);
                let pin = self.tokens(g, pv, tm, LATENT_CHANNELS)?;
                let pin = self.embed_previous.forward(g, pin)?;
                Some(self.positions(g, pin, tm, -(tm as f64))?)
            }
            _ => None,
        };

        let t_emb = self.time.forward(g, &[t as f64])?;
        let x = self.am_dit_forward(g, target, reference, previous, t_emb)?;

        let n = g.shape(x)[0];
        let f = cfg.embed_dim;
        let cond = g.silu(t_emb);
        let fm = self.final_mod.forward(g, cond)?;
        let fm = g.gather_rows(fm, &vec![0; n])?;
        let shift = g.slice_cols(fm, 0, f)?;
        let scale = g.slice_cols(fm, f, 2 * f)?;
        let hn = g.layer_norm(x)?;
        let hn = modulate(g, hn, shift, scale)?;
        let out = self.head.forward(g, hn)?;
        let inv = inverse(&patchify_index(tl, h, w, LATENT_CHANNELS, cfg.patch)?);
        g.gather(out, inv.into(), &[tl * h * w, LATENT_CHANNELS])
    }

    /// Diffusion-step embedding fed to every modulation.
    pub fn embed_time(&self, g: &mut Graph<'_>, t: f64) -> Result<Var> {
        self.time.forward(g, &[t])
    }

    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        raw.map(|v| (v - self.latent_shift) / self.latent_scale)
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        z.map(|v| v * self.latent_scale + self.latent_shift)
    }

    /// Set the latent normalization from raw latents.
    pub fn fit_latent_stats(&mut self, latents: &[Tensor]) -> Result<()> {
        let n: usize = latents.iter().map(Tensor::len).sum();
        if n < 2 {
            return Err(Error::Input("need latents to fit normalization".into()));
        }
        let mean = latents.iter().map(Tensor::sum).sum::<f64>() / n as f64;
        let var = latents
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        self.latent_shift = mean;
        self.latent_scale = var.sqrt().max(1e-6);
        Ok(())
    }

    pub fn schedule(&self) -> Result<GaussianSchedule> {
        GaussianSchedule::linear(self.config.train_steps, self.config.beta_start, self.config.beta_end)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = VideoMeta {
            config: self.config,
            latent_shift: self.latent_shift,
            latent_scale: self.latent_scale,
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
        let mut c = Checkpoint::new(DIT_V_MAGIC, "dit_v", meta);
        c.push_prefixed(&self.ae.store, "ae.");
        Ok(c.with_params(&self.store))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta: VideoMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("dit_v meta: {e}")))?;
        let mut m = Self::new(meta.config, 0)?;
        m.latent_shift = meta.latent_shift;
        m.latent_scale = meta.latent_scale;
        c.load_prefixed(&mut m.ae.store, "ae.")?;
        c.load_into(&mut m.store)?;
        Ok(m)
    }
}

/// Plain-tensor noise prediction; `x_t` is `T × h × w × 4`.
pub fn predict_noise(model: &DitV, x_t: &Tensor, c: &VideoConditions, t: usize) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.store);
    let x = g.constant(as_rows(x_t)?);
    let e = model.predict_noise_graph(&mut g, x, c, t)?;
    g.value(e).clone().reshape(x_t.shape())
}

/// One training example: a clean normalized window latent and its conditions.
#[derive(Clone, Debug)]
pub struct VideoExample {
    pub latent: Tensor,
    pub conditions: VideoConditions,
}

/// Noise-prediction MSE at step `t` with the given noise.
pub fn video_loss(g: &mut Graph<'_>, model: &DitV, ex: &VideoExample, t: usize, noise: &Tensor) -> Result<Var> {
    let sched = model.schedule()?;
    let x_t = sched.add_noise(&ex.latent, noise, t)?;
    let x = g.constant(as_rows(&x_t)?);
    let pred = model.predict_noise_graph(g, x, &ex.conditions, t)?;
    let target = g.constant(as_rows(noise)?);
    g.mse(pred, target)
}

pub fn new_video_optimizer(model: &DitV) -> Adam {
    Adam::new(&model.store, AdamConfig::with_lr(model.config.lr))
}

/// One optimizer step; previous frames are dropped with the configured
/// probability. Returns the mean loss before the update.
pub fn train_step_v<R: Rng + ?Sized>(
    model: &mut DitV,
    adam: &mut Adam,
    batch: &[VideoExample],
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    model.store.zero_grads();
    let mut total = 0.0;
    for ex in batch {
        let t = rng.random_range(0..model.config.train_steps);
        let noise = randn_like(ex.latent.shape(), rng);
        let mut ex = ex.clone();
        if rng.random::<f64>() < model.config.drop_previous {
            ex.conditions.previous_latent = None;
        }
        let mut g = Graph::with_params(&model.store);
        let l = video_loss(&mut g, model, &ex, t, &noise)?;
        let l = g.scale(l, 1.0 / batch.len() as f64);
        total += g.value(l).data()[0];
        let grads = g.backward(l)?;
        model.store.accumulate(&grads)?;
    }
    clip_grad_norm(&mut model.store, GRAD_CLIP);
    adam.step(&mut model.store)?;
    Ok(total)
}

/// Deterministic DDIM from Gaussian noise; returns a normalized latent.
pub fn sample_latent<R: Rng + ?Sized>(model: &DitV, c: &VideoConditions, rng: &mut R) -> Result<Tensor> {
    let sched = model.schedule()?;
    let steps = sched.strided(model.config.sample_steps)?;
    let (tl, h, w) = model.config.latent_grid();
    let mut x = randn_like(&[tl, h, w, LATENT_CHANNELS], rng);
    for (i, &t) in steps.iter().enumerate().rev() {
        let a = sched.alpha_bar[t];
        let a_prev = if i == 0 { 1.0 } else { sched.alpha_bar[steps[i - 1]] };
        let eps = predict_noise(model, &x, c, t)?;
        let x0 = x.zip_map(&eps, |xt, e| (xt - (1.0 - a).sqrt() * e) / a.sqrt())?;
        x = x0.zip_map(&eps, |x0, e| a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e)?;
    }
    if !x.is_finite() {
        return Err(Error::Numeric("sampled latent is not finite".into()));
    }
    Ok(x)
}

/// Pixel-space inputs for one window.
#[derive(Clone, Copy, Debug)]
pub struct WindowRequest<'a> {
    /// `K × H × W × 3`.
    pub poses: &'a Tensor,
    /// `1 × H × W × 3` each.
    pub reference_image: &'a Tensor,
    pub reference_pose: &'a Tensor,
    /// The last `M` frames of the preceding window.
    pub previous: Option<&'a Tensor>,
    /// Whether this window continues an earlier one.
    pub continuation: bool,
}

/// Encode pixel-space conditions into model units.
pub fn encode_conditions(model: &DitV, req: &WindowRequest<'_>) -> Result<VideoConditions> {
    if req.continuation && req.previous.is_none() {
        return Err(Error::Contract("continuation window without previous frames".into()));
    }
    let cfg = &model.config;
    if let Some(p) = req.previous {
        if p.shape() != [cfg.motion_frames, cfg.height, cfg.width, 3] {
            return Err(Error::shape(format!("previous frames {:?}", p.shape())));
        }
    }
    let reference_latent = model.normalize(&model.ae.encode(req.reference_image)?);
    let previous_latent = match req.previous {
        Some(p) => Some(model.normalize(&model.ae.encode(p)?)),
        None => None,
    };
    Ok(VideoConditions {
        poses: req.poses.clone(),
        reference_latent,
        reference_pose: req.reference_pose.clone(),
        previous_latent,
    })
}

/// Generate one `K`-frame window in `[0, 1]`.
pub fn synthesize_window<R: Rng + ?Sized>(model: &DitV, req: &WindowRequest<'_>, rng: &mut R) -> Result<Tensor> {
    Ok(synthesize_window_latent(model, req, rng)?.0)
}

/// Like `synthesize_window`, also returning the sampled normalized latent.
pub fn synthesize_window_latent<R: Rng + ?Sized>(
    model: &DitV,
    req: &WindowRequest<'_>,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let c = encode_conditions(model, req)?;
    let z = sample_latent(model, &c, rng)?;
    Ok((model.ae.decode(&model.denormalize(&z))?, z))
}

/// One window of a long synthesis: frames `[start, start + K)` are
/// generated and frames from `keep_from` on are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub keep_from: usize,
}

/// Windows of `k` frames overlapping by `m`, covering `total` frames once.
pub fn window_plan(total: usize, k: usize, m: usize) -> Result<Vec<Window>> {
    if m >= k || total < k {
        return Err(Error::Input(format!("cannot tile {total} frames with windows of {k} overlapping {m}")));
    }
    let mut plan = vec![Window { start: 0, keep_from: 0 }];
    let mut done = k;
    while done < total {
        let start = (done - m).min(total - k);
        plan.push(Window { start, keep_from: done });
        done = start + k;
    }
    Ok(plan)
}

fn frame_range(video: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = video.shape();
    let per = s[1] * s[2] * s[3];
    let data = video.data()[start * per..end * per].to_vec();
    Tensor::new(&[end - start, s[1], s[2], s[3]], data)
}

/// Pixel frames `[start, end)` of a `K × H × W × 3` video.
pub fn frames_between(video: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if video.shape().len() != 4 || start > end || end > video.shape()[0] {
        return Err(Error::shape(format!("frames {start}..{end} of {:?}", video.shape())));
    }
    frame_range(video, start, end)
}

/// Sliding-window generation over `poses` (`N × H × W × 3`); every window
/// after the first is conditioned on the last `M` frames produced so far.
pub fn synthesize_long<R: Rng + ?Sized>(
    model: &DitV,
    reference_image: &Tensor,
    reference_pose: &Tensor,
    poses: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(synthesize_long_traced(model, reference_image, reference_pose, poses, rng)?.0)
}

/// `synthesize_long` that also returns the plan and each window's sampled
/// normalized latent.
pub fn synthesize_long_traced<R: Rng + ?Sized>(
    model: &DitV,
    reference_image: &Tensor,
    reference_pose: &Tensor,
    poses: &Tensor,
    rng: &mut R,
) -> Result<(Tensor, Vec<(Window, Tensor)>)> {
    let cfg = &model.config;
    let s = poses.shape();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(Error::shape(format!("pose renders {s:?}")));
    }
    let plan = window_plan(s[0], cfg.frames, cfg.motion_frames)?;
    let per = s[1] * s[2] * 3;
    let mut out: Vec<f64> = Vec::with_capacity(s[0] * per);
    let mut latents = Vec::with_capacity(plan.len());
    for (i, win) in plan.iter().enumerate() {
        let window_poses = frame_range(poses, win.start, win.start + cfg.frames)?;
        let produced = out.len() / per;
        let previous = if i == 0 || cfg.motion_frames == 0 {
            None
        } else {
            let first = win.start.checked_sub(cfg.motion_frames).ok_or_else(|| {
                Error::Contract(format!("window at {} has no room for previous frames", win.start))
            })?;
            Some(Tensor::new(
                &[cfg.motion_frames, s[1], s[2], 3],
                out[first * per..win.start * per].to_vec(),
            )?)
        };
        debug_assert_eq!(produced, win.keep_from);
        let (frames, z) = synthesize_window_latent(
            model,
            &WindowRequest {
                poses: &window_poses,
                reference_image,
                reference_pose,
                previous: previous.as_ref(),
                continuation: i > 0 && cfg.motion_frames > 0,
            },
            rng,
        )?;
        let skip = win.keep_from - win.start;
        out.extend_from_slice(&frames.data()[skip * per..]);
        latents.push((*win, z));
    }
    Ok((Tensor::new(&[s[0], s[1], s[2], 3], out)?, latents))
}

/// Training window starts for an `n`-frame sequence: step `K − M`,
/// beginning at `M` when the sequence leaves room for previous frames.
pub fn training_starts(n: usize, k: usize, m: usize) -> Vec<usize> {
    let first = if n >= k + m && m > 0 { m } else { 0 };
    (first..)
        .step_by((k - m).max(1))
        .take_while(|s| s + k <= n)
        .collect()
}

/// Cosine decay from `base` at step 0 to `floor` at step `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

/// Which half of `fit_video` a progress report belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStage {
    Autoencoder,
    Denoiser,
}

/// Full training recipe on `(video, pose renders)` sequences: the
/// autoencoder on every training window and its previous frames, latent
/// statistics, then the denoiser with cosine-decayed rate. `progress`
/// receives `(stage, step, loss)` after every step.
pub fn fit_video<R: Rng + ?Sized>(
    model: &mut DitV,
    sequences: &[(Tensor, Tensor)],
    rng: &mut R,
    progress: &mut dyn FnMut(FitStage, usize, f64),
) -> Result<VideoCorpus> {
    let cfg = model.config;
    let (k, m) = (cfg.frames, cfg.motion_frames);
    let mut clips = Vec::new();
    for (video, _) in sequences {
        let n = video.shape().first().copied().unwrap_or(0);
        for start in training_starts(n, k, m) {
            let target = frame_range(video, start, start + k)?;
            let previous = if start >= m && m > 0 { Some(frame_range(video, start - m, start)?) } else { None };
            clips.push((target, previous));
        }
    }
    if clips.is_empty() {
        return Err(Error::Input(format!("no sequence holds a {k}-frame window")));
    }
    let mut adam = new_ae_optimizer(&model.ae, cfg.ae_lr);
    for step in 0..cfg.ae_iters {
        let (target, previous) = &clips[step % clips.len()];
        let mut batch = vec![target];
        batch.extend(previous.as_ref());
        let l = ae_train_step(&mut model.ae, &mut adam, &batch)?;
        progress(FitStage::Autoencoder, step + 1, l);
    }
    let corpus = VideoCorpus::build(&model.ae, &cfg, sequences)?;
    model.fit_latent_stats(&corpus.raw_latents())?;
    let mut adam = new_video_optimizer(model);
    for step in 0..cfg.iters {
        adam.config.learning_rate = cosine_lr(cfg.lr, cfg.min_lr, step, cfg.iters);
        let ex = corpus.sample(model, rng)?;
        let l = train_step_v(model, &mut adam, &[ex], rng)?;
        progress(FitStage::Denoiser, step + 1, l);
    }
    Ok(corpus)
}

/// Resolution-independent training data: one rendered sequence with cached
/// latents for every window start and every candidate reference frame.
#[derive(Clone, Debug)]
pub struct VideoCorpus {
    items: Vec<CorpusSequence>,
}

#[derive(Clone, Debug)]
struct CorpusSequence {
    video: Tensor,
    poses: Tensor,
    /// Raw latent per frame, encoded alone (reference candidates).
    frame_latents: Vec<Tensor>,
    /// `(start, raw target latent, raw previous latent)`.
    windows: Vec<(usize, Tensor, Option<Tensor>)>,
}

impl VideoCorpus {
    /// Window starts step by `K − M`, beginning at `M` when the sequence
    /// leaves room for previous frames and at 0 otherwise.
    pub fn build(ae: &VideoAe, config: &VideoConfig, sequences: &[(Tensor, Tensor)]) -> Result<Self> {
        let (k, m) = (config.frames, config.motion_frames);
        let mut items = Vec::new();
        for (video, poses) in sequences {
            let s = video.shape();
            if s.len() != 4 || poses.shape() != s || s[0] < k || s[1] != config.height || s[2] != config.width {
                return Err(Error::shape(format!("sequence {s:?} vs config {}x{}", config.height, config.width)));
            }
            let n = s[0];
            let mut windows = Vec::new();
            for start in training_starts(n, k, m) {
                let target = ae.encode(&frame_range(video, start, start + k)?)?;
                let previous = if start >= m && m > 0 {
                    Some(ae.encode(&frame_range(video, start - m, start)?)?)
                } else {
                    None
                };
                windows.push((start, target, previous));
            }
            let frame_latents = (0..n)
                .map(|f| ae.encode(&frame_range(video, f, f + 1)?))
                .collect::<Result<Vec<_>>>()?;
            items.push(CorpusSequence {
                video: video.clone(),
                poses: poses.clone(),
                frame_latents,
                windows,
            });
        }
        if items.is_empty() {
            return Err(Error::Input("empty video corpus".into()));
        }
        Ok(Self { items })
    }

    pub fn window_count(&self) -> usize {
        self.items.iter().map(|s| s.windows.len()).sum()
    }

    /// Every raw window latent (for normalization statistics).
    pub fn raw_latents(&self) -> Vec<Tensor> {
        self.items
            .iter()
            .flat_map(|s| s.windows.iter().map(|w| w.1.clone()))
            .collect()
    }

    /// Example for window `w` of sequence `seq` with reference frame `r`.
    pub fn example(&self, model: &DitV, seq: usize, w: usize, r: usize) -> Result<VideoExample> {
        let s = self
            .items
            .get(seq)
            .ok_or_else(|| Error::Input(format!("sequence {seq} out of range")))?;
        let (start, target, previous) = s
            .windows
            .get(w)
            .ok_or_else(|| Error::Input(format!("window {w} out of range")))?;
        let k = model.config.frames;
        Ok(VideoExample {
            latent: model.normalize(target),
            conditions: VideoConditions {
                poses: frame_range(&s.poses, *start, start + k)?,
                reference_latent: model.normalize(&s.frame_latents[r]),
                reference_pose: frame_range(&s.poses, r, r + 1)?,
                previous_latent: previous.as_ref().map(|p| model.normalize(p)),
            },
        })
    }

    /// Random window with a reference within the configured range.
    pub fn sample<R: Rng + ?Sized>(&self, model: &DitV, rng: &mut R) -> Result<VideoExample> {
        let seq = rng.random_range(0..self.items.len());
        let s = &self.items[seq];
        let w = rng.random_range(0..s.windows.len());
        let start = s.windows[w].0;
        let range = model.config.reference_range;
        let lo = start.saturating_sub(range);
        let hi = (start + range).min(s.frame_latents.len() - 1);
        let r = rng.random_range(lo..=hi);
        self.example(model, seq, w, r)
    }

    /// Ground-truth frames, pose renders and reference frame for a window.
    pub fn window_pixels(&self, seq: usize, w: usize, k: usize) -> Result<(Tensor, Tensor, usize)> {
        let s = &self.items[seq];
        let start = s.windows[w].0;
        Ok((frame_range(&s.video, start, start + k)?, frame_range(&s.poses, start, start + k)?, start))
    }

    pub fn video(&self, seq: usize) -> &Tensor {
        &self.items[seq].video
    }

    pub fn poses(&self, seq: usize) -> &Tensor {
        &self.items[seq].poses
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::grad_check;

    pub(crate) fn tiny() -> VideoConfig {
        VideoConfig {
            frames: 5,
            height: 16,
            width: 16,
            patch: 1,
            embed_dim: 8,
            block_pairs: 1,
            heads: 2,
            motion_frames: 1,
            train_steps: 20,
            sample_steps: 4,
            ae_channels: 2,
            pose_channels: 2,
            ..VideoConfig::desk()
        }
    }

    pub(crate) fn randomize(store: &mut ParamStore, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += amp * rng.random_range(-1.0..1.0);
            }
        }
    }

    pub(crate) fn tiny_conditions(model: &DitV, seed: u64, with_previous: bool) -> VideoConditions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &model.config;
        let (_, h, w) = c.latent_grid();
        VideoConditions {
            poses: Tensor::from_fn(&[c.frames, c.height, c.width, 3], |_| rng.random_range(0.0..1.0)),
            reference_latent: Tensor::randn(&[1, h, w, 4], 1.0, &mut rng),
            reference_pose: Tensor::from_fn(&[1, c.height, c.width, 3], |_| rng.random_range(0.0..1.0)),
            previous_latent: with_previous.then(|| {
                Tensor::randn(&[latent_frames(c.motion_frames).unwrap(), h, w, 4], 1.0, &mut rng)
            }),
        }
    }

    #[test]
    fn latent_shapes() {
        let ae = VideoAe::new(2, 0);
        let video = Tensor::from_fn(&[25, 64, 64, 3], |i| (i % 7) as f64 / 7.0);
        let z = video_encode(&ae, &video).unwrap();
        assert_eq!(z.shape(), &[7, 8, 8, 4]);
        let back = video_decode(&ae, &z).unwrap();
        assert_eq!(back.shape(), &[25, 64, 64, 3]);
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(video_encode(&ae, &Tensor::zeros(&[24, 64, 64, 3])).is_err());
        assert!(video_encode(&ae, &Tensor::zeros(&[5, 60, 64, 3])).is_err());
    }

    #[test]
    fn first_frame_latent_ignores_later_frames() {
        let ae = VideoAe::new(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_fn(&[9, 16, 16, 3], |_| rng.random_range(0.0..1.0));
        let mut b = a.clone();
        for v in &mut b.data_mut()[16 * 16 * 3..] {
            *v = 1.0 - *v;
        }
        let (za, zb) = (ae.encode(&a).unwrap(), ae.encode(&b).unwrap());
        let first = 2 * 2 * 4;
        assert_eq!(za.data()[..first], zb.data()[..first]);
        assert_ne!(za.data()[first..], zb.data()[first..]);
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[3, 4, 6, 4], 1.0, &mut rng);
        let t = patchify(&z, 2).unwrap();
        assert_eq!(t.shape(), &[18, 16]);
        // first token: top-left 2x2 cell of step 0
        assert_eq!(t.row(0)[..4], z.data()[..4]);
        assert_eq!(t.row(0)[4..8], z.data()[4..8]);
        assert_eq!(t.row(0)[8..12], z.data()[6 * 4..6 * 4 + 4]);
        assert_eq!(unpatchify(&t, [3, 4, 6, 4], 2).unwrap(), z);
        assert!(patchify(&z, 4).is_err());
    }

    #[test]
    fn schedule_products_and_ddim_grid() {
        let s = GaussianSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        let direct: f64 = s.betas.iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar[999] - direct).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let grid = s.strided(50).unwrap();
        assert_eq!(grid.len(), 50);
        assert_eq!((grid[0], grid[1], grid[49]), (0, 20, 980));
        assert!(s.strided(1001).is_err());
    }

    #[test]
    fn zero_gates_make_identity() {
        let m = DitV::new(tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::with_params(&m.store);
        let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let target = g.constant(x.clone());
        let reference = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let previous = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let t_emb = m.embed_time(&mut g, 7.0).unwrap();
        let y = m.am_dit_forward(&mut g, target, reference, Some(previous), t_emb).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn motion_ablation_ignores_previous_frames() {
        let run = |motion: bool, with_prev: bool| {
            let mut m = DitV::new(VideoConfig { motion_blocks: motion, ..tiny() }, 6).unwrap();
            randomize(&mut m.store, 7, 0.3);
            let c = tiny_conditions(&m, 8, with_prev);
            let x = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
            predict_noise(&m, &x, &c, 3).unwrap()
        };
        assert_eq!(run(false, true), run(false, false));
        assert_ne!(run(true, true), run(true, false));
    }

    #[test]
    fn window_plan_for_65_frames() {
        let plan = window_plan(65, 25, 5).unwrap();
        let got: Vec<(usize, usize)> = plan.iter().map(|w| (w.start, w.keep_from)).collect();
        assert_eq!(got, vec![(0, 0), (20, 25), (40, 45)]);
        // every frame kept exactly once, previous frames always available
        let plan = window_plan(50, 25, 5).unwrap();
        let mut covered = 0;
        for w in &plan {
            assert_eq!(w.keep_from, covered);
            assert!(w.start + 5 <= w.keep_from || w.start == 0);
            covered = w.start + 25;
        }
        assert_eq!(covered, 50);
        assert!(window_plan(24, 25, 5).is_err());
    }

    #[test]
    fn training_starts_and_cosine_schedule() {
        assert_eq!(training_starts(30, 25, 5), vec![5]);
        assert_eq!(training_starts(25, 25, 5), vec![0]);
        assert_eq!(training_starts(70, 25, 5), vec![5, 25, 45]);
        assert!(training_starts(20, 25, 5).is_empty());
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 50, 100) - 0.505e-3).abs() < 1e-15);
        assert!((cosine_lr(1e-3, 1e-5, 100, 100) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn fit_video_reports_every_step() {
        let cfg = VideoConfig { ae_iters: 3, iters: 4, ..tiny() };
        let mut model = DitV::new(cfg, 2).unwrap();
        let seq = crate::render::synth_video_dataset(1, 1, 7, 16, 16).unwrap().remove(0);
        let mut seen = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus = fit_video(&mut model, &[(seq.video, seq.poses)], &mut rng, &mut |st, i, l| {
            assert!(l.is_finite());
            seen.push((st, i));
        })
        .unwrap();
        assert_eq!(corpus.window_count(), 1);
        assert_eq!(seen.len(), 7);
        assert_eq!(seen[2], (FitStage::Autoencoder, 3));
        assert_eq!(seen[6], (FitStage::Denoiser, 4));
        assert!(model.latent_scale > 0.0);
    }

    #[test]
    fn continuation_without_previous_is_a_contract_error() {
        let m = DitV::new(tiny(), 10).unwrap();
        let poses = Tensor::zeros(&[5, 16, 16, 3]);
        let img = Tensor::zeros(&[1, 16, 16, 3]);
        let req = WindowRequest {
            poses: &poses,
            reference_image: &img,
            reference_pose: &img,
            previous: None,
            continuation: true,
        };
        let err = synthesize_window(&m, &req, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn long_synthesis_counts_frames_and_is_deterministic() {
        let m = DitV::new(tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let poses = Tensor::from_fn(&[13, 16, 16, 3], |_| rng.random_range(0.0..1.0));
        let img = Tensor::full(&[1, 16, 16, 3], 0.5);
        let run = |seed| synthesize_long(&m, &img, &img, &poses, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(1);
        assert_eq!(a.shape(), &[13, 16, 16, 3]);
        assert_eq!(a, run(1));
    }

    #[test]
    fn grad_check_denoiser_and_pose_encoder() {
        let mut m = DitV::new(tiny(), 13).unwrap();
        randomize(&mut m.store, 14, 0.2);
        let c = tiny_conditions(&m, 15, true);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ex = VideoExample {
            latent: Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng),
            conditions: c,
        };
        let noise = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng);
        let model = m.clone();
        // conv stacks have thousands of ReLU units; a 1e-5 step straddles a
        // kink for this draw, 1e-6 does not
        let err = grad_check(&mut m.store, 1e-6, |g| video_loss(g, &model, &ex, 9, &noise)).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_autoencoder() {
        let mut ae = VideoAe::new(2, 17);
        randomize(&mut ae.store, 25, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let clip = Tensor::from_fn(&[5, 8, 8, 3], |_| rng.random_range(0.0..1.0));
        let model = ae.clone();
        let err = grad_check(&mut ae.store, 1e-6, |g| {
            let y = model.reconstruct_graph(g, &clip)?;
            let t = g.constant(as_rows(&clip)?);
            g.mse(y, t)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut m = DitV::new(tiny(), 19).unwrap();
        randomize(&mut m.store, 20, 0.1);
        randomize(&mut m.ae.store, 21, 0.1);
        m.latent_shift = 0.123456789;
        m.latent_scale = 1.7;
        let bytes = m.to_checkpoint().unwrap().to_bytes();
        let back = DitV::from_checkpoint(&Checkpoint::from_bytes(&bytes, DIT_V_MAGIC).unwrap()).unwrap();
        let c = tiny_conditions(&m, 22, true);
        let x = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(23));
        assert_eq!(predict_noise(&m, &x, &c, 5).unwrap(), predict_noise(&back, &x, &c, 5).unwrap());
        assert_eq!(back.latent_shift, m.latent_shift);
        let z = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(24));
        assert_eq!(m.ae.decode(&z).unwrap(), back.ae.decode(&z).unwrap());
    }

    #[test]
    fn config_rejects_bad_shapes() {
        assert!(VideoConfig::desk().validate().is_ok());
        assert!(VideoConfig { frames: 24, ..VideoConfig::desk() }.validate().is_err());
        assert!(VideoConfig { height: 40, ..VideoConfig::desk() }.validate().is_err());
        assert!(VideoConfig { motion_frames: 25, ..VideoConfig::desk() }.validate().is_err());
        assert!(VideoConfig { sample_steps: 0, ..VideoConfig::desk() }.validate().is_err());
        assert!(VideoConfig { min_lr: 0.0, ..VideoConfig::desk() }.validate().is_err());
        let parsed: std::result::Result<VideoConfig, _> = toml::from_str("frames = 25\nbogus = 1\n");
        assert!(parsed.is_err());
    }
}
