//! Temporal VQ-VAE over gesture clips: ×8 temporal compression to a
//! `D_c`-wide latent snapped to the nearest of `K_c` codebook entries.
//!
//! Clips in a batch are laid out as a `(F, B, 1)` volume so every
//! convolution runs as one matrix product over the whole batch; row
//! `f·B + b` holds frame `f` of clip `b`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::gesture::{GestureClip, GESTURE_DIM, LENGTHS, TEMPORAL_STRIDE};
use crate::tensor::nn::upsample;
use crate::tensor::{grad_check, Adam, AdamConfig, Conv, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var, Volume};

pub const VQ_MAGIC: &[u8; 7] = b"COSHVQ1";
const STAGES: usize = 3;
const LENGTH_WEIGHT: f64 = 4.0;
const MIN_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub commitment: f64,
    pub revive_after: u64,
    /// Unquantized autoencoder steps before the codebook is seeded.
    pub warmup_steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    /// Training crop length in frames.
    pub window: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            latent_dim: 128,
            hidden: 256,
            commitment: 0.25,
            revive_after: 200,
            warmup_steps: 300,
            learning_rate: 1e-3,
            batch: 8,
            window: 64,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("vq sizes must be positive (codebook ≥ 2)".into()));
        }
        if self.window == 0 || self.window % TEMPORAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "vq window {} must be a multiple of {TEMPORAL_STRIDE}",
                self.window
            )));
        }
        if self.batch == 0 || !(self.learning_rate > 0.0) || !(self.commitment >= 0.0) {
            return Err(Error::Config("vq batch/lr/commitment out of range".into()));
        }
        Ok(())
    }
}

/// `K_c × D_c` code table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() == 0 {
            return Err(Error::shape("codebook must be a non-empty matrix"));
        }
        if !entries.is_finite() {
            return Err(Error::Numeric("codebook has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Nearest entry per row by squared Euclidean distance; ties go to the
    /// lowest index.
    pub fn quantize(&self, latent: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let d = self.dim();
        if latent.cols() != d {
            return Err(Error::shape(format!("latent width {} vs code width {d}", latent.cols())));
        }
        let idx = nearest(&self.entries, latent);
        let q = self.lookup(&idx)?;
        Ok((idx, q))
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.size() {
                return Err(Error::Input(format!("token {i} outside codebook of {}", self.size())));
            }
            data.extend_from_slice(self.entries.row(i));
        }
        Tensor::new(&[indices.len(), d], data)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.size() {
            for j in i + 1..self.size() {
                best = best.min(sq_dist(self.entries.row(i), self.entries.row(j)));
            }
        }
        best.sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(codes: &Tensor, latent: &Tensor) -> Vec<usize> {
    (0..latent.rows())
        .map(|r| {
            let z = latent.row(r);
            let mut best = (0, f64::INFINITY);
            for k in 0..codes.rows() {
                let d = sq_dist(z, codes.row(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            a: Conv::new(store, &format!("{name}.a"), width, width, ConvSpec::temporal(3, 1, 1), rng),
            b: Conv::with_std(
                store,
                &format!("{name}.b"),
                width,
                width,
                ConvSpec::temporal(1, 1, 0),
                0.1 / (width as f64).sqrt(),
                rng,
            ),
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

enum Quantize {
    Off,
    Nearest,
    /// Fixed assignments, `z + (q₀ − z₀)` in place of the straight-through
    /// node and `z₀`, `q₀` in place of the stop-gradient operands: a smooth
    /// function whose true gradient at `(z₀, q₀)` is the surrogate gradient.
    Frozen { indices: Vec<usize>, encoded: Tensor, quantized: Tensor },
}

/// Node handles of one batched forward pass.
#[derive(Clone, Debug)]
pub struct VqForward {
    pub encoded: Var,
    pub quantized: Var,
    pub straight_through: Var,
    pub decoded: Var,
    pub reconstruction: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub total: Var,
    /// Token per latent row, rows in `(position, clip)` order.
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct VqModel {
    pub config: VqConfig,
    pub store: ParamStore,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_res: Vec<ResBlock>,
    enc_out: Conv,
    dec_in: Conv,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<Conv>,
    dec_out: Conv,
    codebook: ParamId,
    mean: Tensor,
    scale: Tensor,
}

impl VqModel {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, dc) = (config.hidden, config.latent_dim);
        let k3 = ConvSpec::temporal(3, 1, 1);
        let enc_in = Conv::new(&mut store, "enc.in", GESTURE_DIM, h, k3, &mut rng);
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        for s in 0..STAGES {
            enc_down.push(Conv::new(
                &mut store,
                &format!("enc.down{s}"),
                h,
                h,
                ConvSpec::temporal(4, 2, 1),
                &mut rng,
            ));
            enc_res.push(ResBlock::new(&mut store, &format!("enc.res{s}"), h, &mut rng));
        }
        let enc_out = Conv::new(&mut store, "enc.out", h, dc, k3, &mut rng);
        let dec_in = Conv::new(&mut store, "dec.in", dc, h, k3, &mut rng);
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        for s in 0..STAGES {
            dec_res.push(ResBlock::new(&mut store, &format!("dec.res{s}"), h, &mut rng));
            dec_up.push(Conv::new(&mut store, &format!("dec.up{s}"), h, h, k3, &mut rng));
        }
        let dec_out = Conv::new(&mut store, "dec.out", h, GESTURE_DIM, k3, &mut rng);
        let codebook = store.add(
            "codebook",
            Tensor::randn(&[config.codebook_size, dc], 1.0, &mut rng),
        );
        Ok(Self {
            config,
            store,
            enc_in,
            enc_down,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
            codebook,
            mean: Tensor::zeros(&[GESTURE_DIM]),
            scale: Tensor::full(&[GESTURE_DIM], 1.0),
        })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.store.value(self.codebook).clone(),
        }
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Per-dimension input standardization (mean, std floored at 0.05).
    pub fn fit_normalization(&mut self, clips: &[GestureClip]) -> Result<()> {
        let n: usize = clips.iter().map(|c| c.len()).sum();
        if n == 0 {
            return Err(Error::Input("no frames to fit normalization".into()));
        }
        let mut mean = vec![0.0; GESTURE_DIM];
        let mut sq = vec![0.0; GESTURE_DIM];
        for c in clips {
            for f in 0..c.len() {
                for (d, &v) in c.row(f).iter().enumerate() {
                    mean[d] += v;
                    sq[d] += v * v;
                }
            }
        }
        let scale = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n as f64;
                (s / n as f64 - *m * *m).max(0.0).sqrt().max(MIN_SCALE)
            })
            .collect();
        self.mean = Tensor::new(&[GESTURE_DIM], mean)?;
        self.scale = Tensor::new(&[GESTURE_DIM], scale)?;
        Ok(())
    }

    /// Batch of equal-length clips as a `(F·B) × 306` normalized matrix.
    fn batch_input(&self, clips: &[&GestureClip]) -> Result<(Tensor, Volume)> {
        let b = clips.len();
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let f = clips[0].len();
        if clips.iter().any(|c| c.len() != f) {
            return Err(Error::shape("clips in a batch must share a length"));
        }
        let mut x = Tensor::zeros(&[f * b, GESTURE_DIM]);
        for t in 0..f {
            for (j, c) in clips.iter().enumerate() {
                let row = x.row_mut(t * b + j);
                for (d, o) in row.iter_mut().enumerate() {
                    *o = (c.row(t)[d] - self.mean.data()[d]) / self.scale.data()[d];
                }
            }
        }
        Ok((x, Volume::new(f, b, 1)))
    }

    fn encode_graph(&self, g: &mut Graph<'_>, x: Var, v: Volume) -> Result<(Var, Volume)> {
        let (mut h, mut v) = self.enc_in.forward(g, x, v)?;
        h = g.relu(h);
        for (down, res) in self.enc_down.iter().zip(&self.enc_res) {
            let (d, nv) = down.forward(g, h, v)?;
            v = nv;
            h = g.relu(d);
            h = res.forward(g, h, v)?;
        }
        self.enc_out.forward(g, h, v)
    }

    fn decode_graph(&self, g: &mut Graph<'_>, z: Var, v: Volume) -> Result<(Var, Volume)> {
        let (mut h, mut v) = self.dec_in.forward(g, z, v)?;
        h = g.relu(h);
        for (res, up) in self.dec_res.iter().zip(&self.dec_up) {
            h = res.forward(g, h, v)?;
            let (u, nv) = upsample(g, h, v, [2, 1, 1])?;
            let (c, nv) = up.forward(g, u, nv)?;
            v = nv;
            h = g.relu(c);
        }
        let (out, v) = self.dec_out.forward(g, h, v)?;
        let scale = g.constant(self.scale.clone());
        let mean = g.constant(self.mean.clone());
        let out = g.mul_row(out, scale)?;
        Ok((g.add_row(out, mean)?, v))
    }

    /// Full surrogate graph for a batch of equal-length clips. With
    /// `quantize` off (autoencoder warm-up) the decoder reads the encoder
    /// output directly and both codebook terms are zero.
    pub fn forward(&self, g: &mut Graph<'_>, clips: &[&GestureClip], quantize: bool) -> Result<VqForward> {
        let mode = if quantize { Quantize::Nearest } else { Quantize::Off };
        self.forward_with(g, clips, &mode)
    }

    fn forward_with(&self, g: &mut Graph<'_>, clips: &[&GestureClip], mode: &Quantize) -> Result<VqForward> {
        let quantize = !matches!(mode, Quantize::Off);
        let (x, v) = self.batch_input(clips)?;
        let b = clips.len();
        let target = Tensor::new(
            &[v.t * b, GESTURE_DIM],
            x.data()
                .chunks(GESTURE_DIM)
                .flat_map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(d, &z)| z * self.scale.data()[d] + self.mean.data()[d])
                })
                .collect(),
        )?;
        let xin = g.constant(x);
        let (encoded, lv) = self.encode_graph(g, xin, v)?;
        let cb = g.param(self.codebook);
        let indices = match mode {
            Quantize::Frozen { indices, .. } => indices.clone(),
            _ => nearest(g.value(cb), g.value(encoded)),
        };
        let quantized = g.gather_rows(cb, &indices)?;
        let straight_through = match mode {
            Quantize::Off => encoded,
            Quantize::Nearest => g.straight_through(encoded, quantized)?,
            Quantize::Frozen { encoded: z0, quantized: q0, .. } => {
                let c = g.constant(q0.zip_map(z0, |q, z| q - z)?);
                g.add(encoded, c)?
            }
        };
        let (decoded, _) = self.decode_graph(g, straight_through, lv)?;

        let target = g.constant(target);
        let diff = g.sub(decoded, target)?;
        let sq = g.square(diff);
        let w = g.constant(Tensor::from_fn(&[GESTURE_DIM], |d| {
            if LENGTHS.contains(&d) { LENGTH_WEIGHT } else { 1.0 }
        }));
        let weighted = g.mul_row(sq, w)?;
        let reconstruction = g.mean(weighted);
        let (codebook_loss, commitment_loss) = if quantize {
            let (enc_sg, q_sg) = match mode {
                Quantize::Frozen { encoded: z0, quantized: q0, .. } => (g.constant(z0.clone()), g.constant(q0.clone())),
                _ => (g.detach(encoded), g.detach(quantized)),
            };
            let codebook_loss = g.mse(enc_sg, quantized)?;
            let commit = g.mse(encoded, q_sg)?;
            (codebook_loss, g.scale(commit, self.config.commitment))
        } else {
            (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
        };
        let t = g.add(reconstruction, codebook_loss)?;
        let total = g.add(t, commitment_loss)?;
        Ok(VqForward {
            encoded,
            quantized,
            straight_through,
            decoded,
            reconstruction,
            codebook_loss,
            commitment_loss,
            total,
            indices,
        })
    }

    /// Continuous latents, `F/8 × D_c`.
    pub fn encode(&self, clip: &GestureClip) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let (x, v) = self.batch_input(&[clip])?;
        let x = g.constant(x);
        let (z, _) = self.encode_graph(&mut g, x, v)?;
        Ok(g.value(z).clone())
    }

    /// Decode quantized latents (`L × D_c`) to `8L` frames of raw output.
    pub fn decode(&self, latent: &Tensor) -> Result<GestureClip> {
        if latent.shape().len() != 2 || latent.rows() == 0 || latent.cols() != self.config.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects L x {} latents, got {:?}",
                self.config.latent_dim,
                latent.shape()
            )));
        }
        let mut g = Graph::with_params(&self.store);
        let z = g.constant(latent.clone());
        let (out, _) = self.decode_graph(&mut g, z, Volume::seq(latent.rows()))?;
        GestureClip::from_raw(g.value(out).clone())
    }

    pub fn tokenize(&self, clip: &GestureClip) -> Result<TokenSequence> {
        let (idx, _) = self.codebook().quantize(&self.encode(clip)?)?;
        TokenSequence::new(idx, self.config.codebook_size)
    }

    /// Codebook lookup then decode; MASK tokens are rejected.
    pub fn decode_tokens(&self, tokens: &TokenSequence) -> Result<GestureClip> {
        if tokens.has_mask() {
            return Err(Error::Input("cannot decode MASK tokens".into()));
        }
        self.decode(&self.codebook().lookup(&tokens.tokens)?)
    }

    /// Quantize then decode.
    pub fn reconstruct(&self, clip: &GestureClip) -> Result<GestureClip> {
        self.decode_tokens(&self.tokenize(clip)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let mut c = Checkpoint::new(VQ_MAGIC, "vq", meta).with_params(&self.store);
        c.push("norm.mean", self.mean.clone());
        c.push("norm.scale", self.scale.clone());
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: VqConfig = serde_json::from_str(&c.meta)
            .map_err(|e| Error::Checkpoint(format!("vq config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        c.load_into(&mut m.store)?;
        m.mean = c.tensor("norm.mean")?.clone();
        m.scale = c.tensor("norm.scale")?.clone();
        Ok(m)
    }
}

/// Optimizer state plus dead-code bookkeeping.
#[derive(Clone, Debug)]
pub struct VqTrainer {
    adam: Adam,
    last_used: Vec<u64>,
    step: u64,
    rng: ChaCha8Rng,
    /// Recent encoder outputs; source for codebook seeding and revival.
    pool: Vec<Vec<f64>>,
    pool_next: usize,
}

const POOL_SIZE: usize = 2048;
const KMEANS_ITERS: usize = 10;

impl VqTrainer {
    pub fn new(model: &VqModel, seed: u64) -> Self {
        Self {
            adam: Adam::new(&model.store, AdamConfig::with_lr(model.config.learning_rate)),
            last_used: vec![0; model.config.codebook_size],
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pool: Vec::new(),
            pool_next: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Whether the next step runs through the quantizer.
    pub fn quantizing(&self, model: &VqModel) -> bool {
        self.step >= model.config.warmup_steps
    }

    fn remember(&mut self, encoded: &Tensor) {
        for r in 0..encoded.rows() {
            let row = encoded.row(r).to_vec();
            if self.pool.len() < POOL_SIZE {
                self.pool.push(row);
            } else {
                self.pool[self.pool_next] = row;
                self.pool_next = (self.pool_next + 1) % POOL_SIZE;
            }
        }
    }

    /// Random equal-length crops (`config.window` frames) from `clips`.
    pub fn sample_batch(&mut self, model: &VqModel, clips: &[GestureClip]) -> Result<Vec<GestureClip>> {
        let w = model.config.window;
        (0..model.config.batch)
            .map(|_| {
                let c = clips
                    .choose(&mut self.rng)
                    .ok_or_else(|| Error::Input("no training clips".into()))?;
                if c.len() < w {
                    return Err(Error::shape(format!("clip of {} frames shorter than window {w}", c.len())));
                }
                let start = self.rng.random_range(0..=c.len() - w);
                let rows = c.frames().data()[start * GESTURE_DIM..(start + w) * GESTURE_DIM].to_vec();
                GestureClip::from_raw(Tensor::new(&[w, GESTURE_DIM], rows)?)
            })
            .collect()
    }
}

/// One optimizer step on `batch`; returns the three losses and the total.
pub fn vq_train_step(model: &mut VqModel, trainer: &mut VqTrainer, batch: &[GestureClip]) -> Result<VqLosses> {
    let refs: Vec<&GestureClip> = batch.iter().collect();
    let quantize = trainer.quantizing(model);
    if quantize && trainer.step == model.config.warmup_steps {
        if trainer.pool.is_empty() {
            let z = encode_batch(model, &refs)?;
            trainer.remember(&z);
        }
        seed_codebook(model, trainer);
    }
    let (losses, encoded, indices, grads) = {
        let mut g = Graph::with_params(&model.store);
        let fw = model.forward(&mut g, &refs, quantize)?;
        let losses = VqLosses {
            reconstruction: g.value(fw.reconstruction).data()[0],
            codebook: g.value(fw.codebook_loss).data()[0],
            commitment: g.value(fw.commitment_loss).data()[0],
            total: g.value(fw.total).data()[0],
        };
        if !losses.total.is_finite() {
            return Err(Error::numeric("vq loss is not finite"));
        }
        let grads = g.backward(fw.total)?;
        (losses, g.value(fw.encoded).clone(), fw.indices, grads)
    };
    model.store.accumulate(&grads)?;
    trainer.adam.step(&mut model.store)?;
    trainer.remember(&encoded);
    trainer.step += 1;
    if !quantize {
        trainer.last_used.fill(trainer.step);
        return Ok(losses);
    }
    for &i in &indices {
        trainer.last_used[i] = trainer.step;
    }
    let dead: Vec<usize> = (0..model.config.codebook_size)
        .filter(|&k| trainer.step - trainer.last_used[k] >= model.config.revive_after)
        .collect();
    let cb = model.codebook;
    for k in dead {
        let r = trainer.rng.random_range(0..trainer.pool.len());
        model.store.value_mut(cb).row_mut(k).copy_from_slice(&trainer.pool[r]);
        trainer.last_used[k] = trainer.step;
    }
    Ok(losses)
}

fn encode_batch(model: &VqModel, batch: &[&GestureClip]) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.store);
    let (x, v) = model.batch_input(batch)?;
    let x = g.constant(x);
    let (z, _) = model.encode_graph(&mut g, x, v)?;
    Ok(g.value(z).clone())
}

/// k-means++ seeding plus a few Lloyd iterations over the latent pool.
fn seed_codebook(model: &mut VqModel, trainer: &mut VqTrainer) {
    let k = model.config.codebook_size;
    let pool = &trainer.pool;
    let rng = &mut trainer.rng;
    let mut centers: Vec<Vec<f64>> = vec![pool[rng.random_range(0..pool.len())].clone()];
    let mut d2: Vec<f64> = pool.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(pool.len() - 1)
        } else {
            rng.random_range(0..pool.len())
        };
        let c = pool[pick].clone();
        for (d, p) in d2.iter_mut().zip(pool) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    let dim = centers[0].len();
    for _ in 0..KMEANS_ITERS {
        let mut sum = vec![vec![0.0; dim]; k];
        let mut count = vec![0usize; k];
        for p in pool {
            let j = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("non-empty");
            count[j] += 1;
            for (s, v) in sum[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if count[j] > 0 {
                centers[j] = sum[j].iter().map(|s| s / count[j] as f64).collect();
            }
        }
    }
    let cb = model.codebook;
    for (j, c) in centers.iter().enumerate() {
        model.store.value_mut(cb).row_mut(j).copy_from_slice(c);
    }
}

/// Fraction of codebook entries used when tokenizing `clips`.
/// Central-difference check of the quantized training objective. Finite
/// differences see neither the straight-through node (piecewise constant
/// in the encoder) nor stop-gradients, so the check runs on the frozen
/// surrogate described at `Quantize::Frozen`, after asserting
/// that its tape gradient equals the straight-through one. Returns the
/// worse of the two discrepancies.
pub fn surrogate_grad_check(model: &mut VqModel, clips: &[GestureClip], perturbation: f64) -> Result<f64> {
    let refs: Vec<&GestureClip> = clips.iter().collect();
    let probe = model.clone();
    let (frozen, st_grads) = {
        let mut g = Graph::with_params(&probe.store);
        let fw = probe.forward(&mut g, &refs, true)?;
        let grads = g.backward(fw.total)?;
        let per: Vec<(ParamId, Tensor)> = grads.param_grads().map(|(id, t)| (id, t.clone())).collect();
        let frozen = Quantize::Frozen {
            indices: fw.indices,
            encoded: g.value(fw.encoded).clone(),
            quantized: g.value(fw.quantized).clone(),
        };
        (frozen, per)
    };
    let mut agreement = 0.0f64;
    {
        let mut g = Graph::with_params(&probe.store);
        let fw = probe.forward_with(&mut g, &refs, &frozen)?;
        let grads = g.backward(fw.total)?;
        let frozen_grads: std::collections::HashMap<ParamId, Tensor> =
            grads.param_grads().map(|(id, t)| (id, t.clone())).collect();
        for (id, a) in &st_grads {
            let b = frozen_grads
                .get(id)
                .ok_or_else(|| Error::numeric("surrogate lost a parameter gradient"))?;
            for (x, y) in a.data().iter().zip(b.data()) {
                agreement = agreement.max((x - y).abs() / x.abs().max(1.0));
            }
        }
    }
    let fd = grad_check(&mut model.store, perturbation, |g| {
        Ok(probe.forward_with(g, &refs, &frozen)?.total)
    })?;
    Ok(fd.max(agreement))
}

pub fn utilization(model: &VqModel, clips: &[GestureClip]) -> Result<f64> {
    let mut used = vec![false; model.config.codebook_size];
    for c in clips {
        for t in model.tokenize(c)?.tokens {
            used[t] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

/// Mean squared error of quantize-then-decode over `clips` (unweighted).
pub fn reconstruction_mse(model: &VqModel, clips: &[GestureClip]) -> Result<f64> {
    let mut total = 0.0;
    for c in clips {
        total += model.reconstruct(c)?.frames().mse(c.frames())?;
    }
    Ok(total / clips.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_gesture_dataset;

    pub(crate) fn tiny() -> VqConfig {
        VqConfig {
            codebook_size: 4,
            latent_dim: 4,
            hidden: 4,
            batch: 2,
            window: 8,
            warmup_steps: 0,
            ..VqConfig::default()
        }
    }

    #[test]
    fn quantize_tie_and_exact_match() {
        let mut e = Tensor::zeros(&[8, 2]);
        e.row_mut(2).copy_from_slice(&[1.0, 0.0]);
        e.row_mut(5).copy_from_slice(&[-1.0, 0.0]);
        e.row_mut(7).copy_from_slice(&[3.0, 3.0]);
        for k in [0, 1, 3, 4, 6] {
            e.row_mut(k).copy_from_slice(&[10.0 + k as f64, 10.0]);
        }
        let cb = Codebook::new(e).unwrap();
        let z = Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        let (idx, q) = cb.quantize(&z).unwrap();
        assert_eq!(idx, vec![2, 7]);
        assert_eq!(q.row(1), &[3.0, 3.0]);
    }

    #[test]
    fn encode_decode_shapes() {
        let m = VqModel::new(tiny(), 0).unwrap();
        let data = synth_gesture_dataset(0, 1, 128).unwrap();
        let z = m.encode(&data[0].clip).unwrap();
        assert_eq!(z.shape(), &[16, 4]);
        assert_eq!(m.decode(&z).unwrap().len(), 128);
        let short = GestureClip::from_raw(Tensor::zeros(&[8, GESTURE_DIM])).unwrap();
        assert_eq!(m.encode(&short).unwrap().rows(), 1);
        assert_eq!(m.encode(&data[0].clip).unwrap(), z);
    }

    #[test]
    fn decode_is_temporally_local() {
        let m = VqModel::new(VqConfig { hidden: 8, latent_dim: 4, ..tiny() }, 1).unwrap();
        let z = Tensor::randn(&[16, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut z2 = z.clone();
        z2.row_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let a = m.decode(&z).unwrap();
        let b = m.decode(&z2).unwrap();
        let changed = |f: usize| a.row(f).iter().zip(b.row(f)).any(|(x, y)| (x - y).abs() > 1e-12);
        assert!(changed(0));
        // receptive field of one token is under five tokens wide
        assert!((40..128).all(|f| !changed(f)));
    }

    #[test]
    fn straight_through_gradient_identity() {
        let m = VqModel::new(tiny(), 3).unwrap();
        let data = synth_gesture_dataset(1, 2, 16).unwrap();
        let clips: Vec<&GestureClip> = data.iter().map(|s| &s.clip).collect();
        let mut g = Graph::with_params(&m.store);
        let fw = m.forward(&mut g, &clips, true).unwrap();
        let grads = g.backward(fw.reconstruction).unwrap();
        assert_eq!(grads.wrt(fw.encoded).unwrap(), grads.wrt(fw.straight_through).unwrap());
    }

    #[test]
    fn quantized_objective_passes_surrogate_grad_check() {
        let mut m = VqModel::new(tiny(), 5).unwrap();
        let data = synth_gesture_dataset(3, 1, 16).unwrap();
        let clips: Vec<GestureClip> = data.into_iter().map(|s| s.clip).collect();
        m.fit_normalization(&clips).unwrap();
        // zero biases park ReLU inputs exactly on the kink
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in m.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let err = surrogate_grad_check(&mut m, &clips, 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn commitment_zero_at_code() {
        let mut m = VqModel::new(tiny(), 4).unwrap();
        let data = synth_gesture_dataset(2, 1, 8).unwrap();
        let z = m.encode(&data[0].clip).unwrap();
        let cb = m.codebook_id();
        m.store.value_mut(cb).row_mut(0).copy_from_slice(z.row(0));
        let mut g = Graph::with_params(&m.store);
        let fw = m.forward(&mut g, &[&data[0].clip], true).unwrap();
        assert_eq!(fw.indices, vec![0]);
        assert_eq!(g.value(fw.commitment_loss).data()[0], 0.0);
        assert_eq!(g.value(fw.codebook_loss).data()[0], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = VqModel::new(tiny(), 5).unwrap();
        let data = synth_gesture_dataset(3, 2, 16).unwrap();
        let clips: Vec<GestureClip> = data.into_iter().map(|s| s.clip).collect();
        m.fit_normalization(&clips).unwrap();
        let bytes = m.to_checkpoint().unwrap().to_bytes();
        let back = VqModel::from_checkpoint(&Checkpoint::from_bytes(&bytes, VQ_MAGIC).unwrap()).unwrap();
        assert_eq!(back.reconstruct(&clips[0]).unwrap(), m.reconstruct(&clips[0]).unwrap());
    }

    #[test]
    fn dead_codes_are_revived() {
        let mut cfg = tiny();
        cfg.revive_after = 3;
        let mut m = VqModel::new(cfg, 6).unwrap();
        let data = synth_gesture_dataset(4, 2, 8).unwrap();
        let clips: Vec<GestureClip> = data.into_iter().map(|s| s.clip).collect();
        m.fit_normalization(&clips).unwrap();
        let mut tr = VqTrainer::new(&m, 0);
        let cb = m.codebook_id();
        m.store.value_mut(cb).row_mut(3).fill(1e6);
        tr.step = 1;
        tr.last_used = vec![1; 4];
        for _ in 0..4 {
            vq_train_step(&mut m, &mut tr, &clips).unwrap();
        }
        assert!(m.codebook().entries().row(3).iter().all(|v| v.abs() < 1e3));
    }

    #[test]
    fn overfits_single_clip() {
        let cfg = VqConfig {
            hidden: 64,
            latent_dim: 16,
            codebook_size: 16,
            batch: 1,
            window: 32,
            learning_rate: 2e-3,
            ..VqConfig::default()
        };
        let mut m = VqModel::new(cfg, 7).unwrap();
        let data = synth_gesture_dataset(5, 1, 32).unwrap();
        let clips = vec![data[0].clip.clone()];
        m.fit_normalization(&clips).unwrap();
        let mut tr = VqTrainer::new(&m, 1);
        for _ in 0..600 {
            vq_train_step(&mut m, &mut tr, &clips).unwrap();
        }
        let mse = reconstruction_mse(&m, &clips).unwrap();
        assert!(mse < 1e-3, "mse {mse}");
    }
}
