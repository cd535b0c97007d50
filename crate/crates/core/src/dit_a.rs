//! Audio-conditioned discrete denoiser: predicts `p(d⁰ | dᵗ, audio)` over
//! the codebook, trained with cross-entropy, sampled by the masked
//! diffusion reverse process with the first `p/8` tokens clamped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioFeatures, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{q_sample, reverse_step, ScheduleParams, TokenSequence, TransitionSchedule};
use crate::error::{Error, Result};
use crate::gesture::{GestureClip, TEMPORAL_STRIDE};
use crate::tensor::nn::position_table;
use crate::tensor::{clip_grad_norm, softmax_rows, Adam, AdamConfig, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{joint_attention_first, modulate, StreamLayer, TimeEmbedding};
use crate::vq::VqModel;

pub const DIT_A_MAGIC: &[u8; 7] = b"COSHDA1";
pub const MAX_GENERATION_RETRIES: usize = 3;
const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Gesture frames per window.
    pub window: usize,
    /// Clamped prefix frames.
    pub prefix: usize,
    pub codebook: usize,
    #[serde(rename = "steps_T")]
    pub steps: usize,
    #[serde(rename = "leak_u")]
    pub leak: f64,
    pub lr: f64,
    pub batch: usize,
    /// Width of `[beat | content]` audio features.
    pub audio_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            window: 128,
            prefix: 16,
            codebook: 128,
            steps: 100,
            leak: 1.0,
            lr: 1e-3,
            batch: 8,
            audio_dim: DEFAULT_BEAT_DIM + DEFAULT_CONTENT_DIM,
        }
    }

    /// Production-scale settings; not exercised by tests.
    pub fn paper() -> Self {
        Self {
            layers: 24,
            model_dim: 512,
            heads: 8,
            batch: 128,
            lr: 1e-4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || self.window % TEMPORAL_STRIDE != 0 {
            return bad(format!("window {} not a multiple of {TEMPORAL_STRIDE}", self.window));
        }
        if self.prefix % TEMPORAL_STRIDE != 0 || self.prefix >= self.window {
            return bad(format!("prefix {} must be a multiple of 8 below the window", self.prefix));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 || self.model_dim % 2 != 0 {
            return bad(format!("model_dim {} incompatible with {} heads", self.model_dim, self.heads));
        }
        if self.layers == 0 || self.codebook < 2 || self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return bad("layers, codebook, steps_T, batch and lr must be positive".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.window / TEMPORAL_STRIDE
    }

    pub fn prefix_tokens(&self) -> usize {
        self.prefix / TEMPORAL_STRIDE
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            codebook_size: self.codebook,
            uniform_leak: self.leak,
        }
    }

    pub fn prefix_flags(&self) -> Vec<bool> {
        (0..self.tokens()).map(|i| i < self.prefix_tokens()).collect()
    }
}

/// Generated tokens and their decoded gestures.
#[derive(Clone, Debug)]
pub struct MotionSample {
    pub tokens: TokenSequence,
    pub decoded: GestureClip,
}

#[derive(Clone, Debug)]
pub struct DitA {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    embed: ParamId,
    in_proj: Linear,
    time: TimeEmbedding,
    blocks: Vec<StreamLayer>,
    final_mod: Linear,
    head: Linear,
}

/// One denoiser input: current tokens, pooled audio, diffusion step.
pub struct DenoiserInput<'a> {
    pub tokens: &'a TokenSequence,
    pub audio: &'a AudioFeatures,
    pub t: usize,
}

impl DitA {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let embed = store.add("embed", Tensor::randn(&[config.codebook + 1, d], 1.0, &mut rng));
        let in_proj = Linear::new(&mut store, "in_proj", d + config.audio_dim, d, &mut rng);
        let time = TimeEmbedding::new(&mut store, "time", d, d, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| StreamLayer::new(&mut store, &format!("block{i}"), d, d, &mut rng))
            .collect();
        let final_mod = Linear::zeros(&mut store, "final_mod", d, 2 * d);
        let head = Linear::with_std(&mut store, "head", d, config.codebook, 0.02, &mut rng);
        Ok(Self {
            config,
            store,
            embed,
            in_proj,
            time,
            blocks,
            final_mod,
            head,
        })
    }

    fn check(&self, x: &DenoiserInput<'_>) -> Result<()> {
        let c = &self.config;
        if x.tokens.len() != c.tokens() || x.tokens.codebook_size != c.codebook {
            return Err(Error::shape(format!(
                "expected {} tokens over {} codes, got {} over {}",
                c.tokens(),
                c.codebook,
                x.tokens.len(),
                x.tokens.codebook_size
            )));
        }
        if x.audio.frames() != c.window || x.audio.width() != c.audio_dim {
            return Err(Error::shape(format!(
                "expected {} x {} audio, got {} x {}",
                c.window,
                c.audio_dim,
                x.audio.frames(),
                x.audio.width()
            )));
        }
        if x.t < 1 || x.t > c.steps {
            return Err(Error::Input(format!("step {} outside 1..={}", x.t, c.steps)));
        }
        Ok(())
    }

    /// Logits `(B·L) × K_c`, sample-major rows.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        inputs: &[DenoiserInput<'_>],
        position_encoding: bool,
    ) -> Result<Var> {
        let c = &self.config;
        let l = c.tokens();
        let mut ids = Vec::with_capacity(inputs.len() * l);
        let mut audio = Vec::with_capacity(inputs.len() * l * c.audio_dim);
        for x in inputs {
            self.check(x)?;
            ids.extend_from_slice(&x.tokens.tokens);
            audio.extend_from_slice(x.audio.pooled(TEMPORAL_STRIDE)?.data());
        }
        let table = g.param(self.embed);
        let emb = g.gather_rows(table, &ids)?;
        let audio = g.constant(Tensor::new(&[ids.len(), c.audio_dim], audio)?);
        let h = g.concat_cols(&[emb, audio])?;
        let mut x = self.in_proj.forward(g, h)?;
        if position_encoding {
            let pe = position_table(l, c.model_dim);
            let tiled: Vec<f64> = (0..inputs.len()).flat_map(|_| pe.data().iter().copied()).collect();
            let pe = g.constant(Tensor::new(&[ids.len(), c.model_dim], tiled)?);
            x = g.add(x, pe)?;
        }
        let steps: Vec<f64> = inputs.iter().map(|x| x.t as f64).collect();
        let temb = self.time.forward(g, &steps)?;
        for block in &self.blocks {
            let m = block.modulation.forward(g, temb, l)?;
            let (q, k, v) = block.qkv(g, x, &m)?;
            let mut outs = Vec::with_capacity(inputs.len());
            for b in 0..inputs.len() {
                let (s, e) = (b * l, (b + 1) * l);
                let qb = g.slice_rows(q, s, e)?;
                let kb = g.slice_rows(k, s, e)?;
                let vb = g.slice_rows(v, s, e)?;
                outs.push(joint_attention_first(g, qb, &[(kb, vb)], c.heads)?);
            }
            let attn = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
            x = block.finish(g, x, attn, &m)?;
        }
        let tc = g.silu(temb);
        let fm = self.final_mod.forward(g, tc)?;
        let idx: Vec<usize> = (0..inputs.len()).flat_map(|b| std::iter::repeat_n(b, l)).collect();
        let fm = g.gather_rows(fm, &idx)?;
        let d = c.model_dim;
        let shift = g.slice_cols(fm, 0, d)?;
        let scale = g.slice_cols(fm, d, 2 * d)?;
        let h = g.layer_norm(x)?;
        let h = modulate(g, h, shift, scale)?;
        self.head.forward(g, h)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        Ok(Checkpoint::new(DIT_A_MAGIC, "dit_a", meta).with_params(&self.store))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_str(&c.meta)
            .map_err(|e| Error::Checkpoint(format!("dit_a config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        c.load_into(&mut m.store)?;
        Ok(m)
    }
}

/// Per-position logits over the `K_c` real codes, `L × K_c`.
pub fn denoiser_forward(model: &DitA, d_t: &TokenSequence, audio: &AudioFeatures, t: usize) -> Result<Tensor> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward_graph(&mut g, &[DenoiserInput { tokens: d_t, audio, t }], true)?;
    Ok(g.value(out).clone())
}

/// Overwrite the prefix positions of `d_t` with clean tokens.
pub fn clamp_prefix(d_t: &TokenSequence, d0: &TokenSequence, prefix_tokens: usize) -> TokenSequence {
    let mut out = d_t.clone();
    out.tokens[..prefix_tokens].copy_from_slice(&d0.tokens[..prefix_tokens]);
    out
}

/// One training example after corruption.
#[derive(Clone, Debug)]
pub struct CorruptedExample<'a> {
    pub clean: &'a TokenSequence,
    pub corrupted: TokenSequence,
    pub audio: &'a AudioFeatures,
    pub t: usize,
}

/// Mean cross-entropy on non-prefix positions; prefix inputs are clamped
/// to the clean tokens first.
pub fn training_loss(g: &mut Graph<'_>, model: &DitA, examples: &[CorruptedExample<'_>]) -> Result<Var> {
    let p = model.config.prefix_tokens();
    let clamped: Vec<TokenSequence> = examples
        .iter()
        .map(|e| clamp_prefix(&e.corrupted, e.clean, p))
        .collect();
    let inputs: Vec<DenoiserInput<'_>> = examples
        .iter()
        .zip(&clamped)
        .map(|(e, tokens)| DenoiserInput {
            tokens,
            audio: e.audio,
            t: e.t,
        })
        .collect();
    let logits = model.forward_graph(g, &inputs, true)?;
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for e in examples {
        if e.clean.has_mask() {
            return Err(Error::Input("clean tokens contain MASK".into()));
        }
        targets.extend_from_slice(&e.clean.tokens);
        mask.extend(model.config.prefix_flags().into_iter().map(|f| !f));
    }
    g.cross_entropy(logits, &targets, &mask)
}

/// Uniform step, corruption outside the prefix.
pub fn corrupt<'a, R: Rng + ?Sized>(
    model: &DitA,
    clean: &'a TokenSequence,
    audio: &'a AudioFeatures,
    schedule: &TransitionSchedule,
    rng: &mut R,
) -> Result<CorruptedExample<'a>> {
    let t = rng.random_range(1..=schedule.steps());
    let d_t = q_sample(clean, t, schedule, rng)?;
    Ok(CorruptedExample {
        clean,
        corrupted: clamp_prefix(&d_t, clean, model.config.prefix_tokens()),
        audio,
        t,
    })
}

pub fn new_optimizer(model: &DitA) -> Adam {
    Adam::new(&model.store, AdamConfig::with_lr(model.config.lr))
}

/// One optimizer step over `batch`; returns the loss before the update.
pub fn train_step_a<R: Rng + ?Sized>(
    model: &mut DitA,
    adam: &mut Adam,
    batch: &[(TokenSequence, AudioFeatures)],
    schedule: &TransitionSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let examples = batch
        .iter()
        .map(|(d0, a)| corrupt(model, d0, a, schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = {
        let mut g = Graph::with_params(&model.store);
        let l = training_loss(&mut g, model, &examples)?;
        (g.value(l).data()[0], g.backward(l)?)
    };
    model.store.accumulate(&grads)?;
    clip_grad_norm(&mut model.store, GRAD_CLIP);
    adam.step(&mut model.store)?;
    Ok(loss)
}

/// Argmax accuracy on non-prefix positions, averaged over corruptions at
/// the given steps (fixed seed).
pub fn token_accuracy(
    model: &DitA,
    data: &[(TokenSequence, AudioFeatures)],
    schedule: &TransitionSchedule,
    steps: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.config.prefix_tokens();
    let (mut hit, mut total) = (0usize, 0usize);
    for (d0, audio) in data {
        for &t in steps {
            let d_t = clamp_prefix(&q_sample(d0, t, schedule, &mut rng)?, d0, p);
            let logits = denoiser_forward(model, &d_t, audio, t)?;
            for i in p..d0.len() {
                let row = logits.row(i);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                hit += (best == d0.tokens[i]) as usize;
                total += 1;
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Reverse diffusion from all-MASK (prefix clamped) down to clean tokens.
pub fn sample_tokens<R: Rng + ?Sized>(
    model: &DitA,
    audio: &AudioFeatures,
    prefix: &[usize],
    schedule: &TransitionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    let c = &model.config;
    if prefix.len() != c.prefix_tokens() {
        return Err(Error::Input(format!(
            "prefix has {} tokens, config expects {}",
            prefix.len(),
            c.prefix_tokens()
        )));
    }
    if prefix.iter().any(|&t| t >= c.codebook) {
        return Err(Error::Input("prefix contains MASK or out-of-range tokens".into()));
    }
    if schedule.params() != c.schedule_params() {
        return Err(Error::Schedule("schedule does not match the model configuration".into()));
    }
    let mut d = TokenSequence::all_mask(c.tokens(), c.codebook);
    d.tokens[..prefix.len()].copy_from_slice(prefix);
    let fixed = c.prefix_flags();
    for t in (1..=schedule.steps()).rev() {
        let p0 = softmax_rows(&denoiser_forward(model, &d, audio, t)?)?;
        let rows: Vec<Vec<f64>> = (0..p0.rows()).map(|i| p0.row(i).to_vec()).collect();
        d = reverse_step(&d, &rows, t, schedule, &fixed, rng)?;
    }
    Ok(d)
}

/// Sample tokens (retrying up to three times on support failures) and
/// decode them to gestures.
pub fn generate_motion<R: Rng + ?Sized>(
    model: &DitA,
    vq: &VqModel,
    audio: &AudioFeatures,
    prefix: &[usize],
    schedule: &TransitionSchedule,
    rng: &mut R,
) -> Result<MotionSample> {
    let mut last = None;
    for _ in 0..=MAX_GENERATION_RETRIES {
        match sample_tokens(model, audio, prefix, schedule, rng) {
            Ok(tokens) if !tokens.has_mask() => {
                let decoded = vq.decode_tokens(&tokens)?;
                return Ok(MotionSample { tokens, decoded });
            }
            Ok(_) => last = Some("sampler left MASK tokens".to_string()),
            Err(Error::Support(m)) => last = Some(m),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no valid sample after {MAX_GENERATION_RETRIES} retries: {}",
        last.unwrap_or_default()
    )))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::audio::synth_audio_features;
    use crate::diffusion::build_schedule;
    use crate::tensor::grad_check;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            window: 16,
            prefix: 8,
            codebook: 8,
            steps: 10,
            leak: 1.0,
            audio_dim: 5,
            batch: 2,
            lr: 1e-3,
        }
    }

    fn tiny_audio(seed: u64) -> AudioFeatures {
        synth_audio_features(seed, 16, 2, 3).unwrap()
    }

    fn randomize(m: &mut DitA, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
    }

    #[test]
    fn output_shape() {
        let m = DitA::new(tiny(), 0).unwrap();
        let d = TokenSequence::all_mask(2, 8);
        let out = denoiser_forward(&m, &d, &tiny_audio(0), 3).unwrap();
        assert_eq!(out.shape(), &[2, 8]);
        assert!(denoiser_forward(&m, &d, &tiny_audio(0), 0).is_err());
        assert!(denoiser_forward(&m, &TokenSequence::all_mask(3, 8), &tiny_audio(0), 3).is_err());
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let cfg = DenoiserConfig { window: 32, ..tiny() };
        let mut m = DitA::new(cfg, 1).unwrap();
        randomize(&mut m, 2);
        let audio = synth_audio_features(3, 32, 2, 3).unwrap();
        let d = TokenSequence::new(vec![1, 8, 3, 5], 8).unwrap();
        let (i, j) = (1, 3);
        let mut dp = d.clone();
        dp.tokens.swap(i, j);
        let swap_block = |t: &Tensor| {
            let c = t.cols();
            let mut out = t.clone();
            for f in 0..8 {
                let (a, b) = ((i * 8 + f) * c, (j * 8 + f) * c);
                for k in 0..c {
                    out.data_mut().swap(a + k, b + k);
                }
            }
            out
        };
        let ap = AudioFeatures::new(swap_block(&audio.beat), swap_block(&audio.content)).unwrap();
        let run = |d: &TokenSequence, a: &AudioFeatures| {
            let mut g = Graph::with_params(&m.store);
            let o = m.forward_graph(&mut g, &[DenoiserInput { tokens: d, audio: a, t: 4 }], false).unwrap();
            g.value(o).clone()
        };
        let (x, y) = (run(&d, &audio), run(&dp, &ap));
        for (r, s) in [(0, 0), (2, 2), (i, j), (j, i)] {
            for (a, b) in x.row(r).iter().zip(y.row(s)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prefix_corruption_does_not_change_loss() {
        let mut m = DitA::new(tiny(), 3).unwrap();
        randomize(&mut m, 4);
        let audio = tiny_audio(5);
        let clean = TokenSequence::new(vec![2, 6], 8).unwrap();
        let loss = |corrupted: Vec<usize>| {
            let ex = CorruptedExample {
                clean: &clean,
                corrupted: TokenSequence::new(corrupted, 8).unwrap(),
                audio: &audio,
                t: 5,
            };
            let mut g = Graph::with_params(&m.store);
            let l = training_loss(&mut g, &m, &[ex]).unwrap();
            g.value(l).data()[0]
        };
        assert_eq!(loss(vec![8, 8]), loss(vec![4, 8]));
        assert_eq!(loss(vec![2, 8]), loss(vec![7, 8]));
    }

    #[test]
    fn initial_loss_near_uniform() {
        let m = DitA::new(DenoiserConfig::desk(), 5).unwrap();
        let schedule = build_schedule(100, 128, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clean = TokenSequence::new((0..16).map(|_| rng.random_range(0..128)).collect(), 128).unwrap();
        let audio = synth_audio_features(7, 128, 4, 32).unwrap();
        let ex = corrupt(&m, &clean, &audio, &schedule, &mut rng).unwrap();
        let mut g = Graph::with_params(&m.store);
        let l = training_loss(&mut g, &m, &[ex]).unwrap();
        assert!((g.value(l).data()[0] - 128f64.ln()).abs() < 0.3);
    }

    #[test]
    fn grad_check_tiny() {
        let mut m = DitA::new(tiny(), 8).unwrap();
        randomize(&mut m, 9);
        let audio = tiny_audio(10);
        let clean = TokenSequence::new(vec![1, 4], 8).unwrap();
        let corrupted = TokenSequence::new(vec![1, 8], 8).unwrap();
        let model = m.clone();
        let err = grad_check(&mut m.store, 1e-5, |g| {
            let ex = CorruptedExample {
                clean: &clean,
                corrupted: corrupted.clone(),
                audio: &audio,
                t: 4,
            };
            training_loss(g, &model, &[ex])
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sampling_contract() {
        let m = DitA::new(tiny(), 11).unwrap();
        let schedule = TransitionSchedule::from_params(&tiny().schedule_params()).unwrap();
        let audio = tiny_audio(12);
        let run = |seed| sample_tokens(&m, &audio, &[5], &schedule, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(1);
        assert_eq!(a.tokens[0], 5);
        assert!(!a.has_mask());
        assert_eq!(a, run(1));
        assert!(sample_tokens(&m, &audio, &[8], &schedule, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_tokens(&m, &audio, &[1, 2], &schedule, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = DitA::new(tiny(), 13).unwrap();
        randomize(&mut m, 14);
        let back = DitA::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes(), DIT_A_MAGIC).unwrap(),
        )
        .unwrap();
        let d = TokenSequence::new(vec![3, 8], 8).unwrap();
        assert_eq!(
            denoiser_forward(&m, &d, &tiny_audio(1), 2).unwrap(),
            denoiser_forward(&back, &d, &tiny_audio(1), 2).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig { prefix: 12, ..tiny() }.validate().is_err());
        assert!(DenoiserConfig { prefix: 16, ..tiny() }.validate().is_err());
        assert!(DenoiserConfig { window: 20, ..tiny() }.validate().is_err());
        let t: DenoiserConfig = toml::from_str("layers = 2\nsteps_T = 50\nleak_u = 0.5").unwrap();
        assert_eq!((t.layers, t.steps, t.leak), (2, 50, 0.5));
        assert!(toml::from_str::<DenoiserConfig>("depth = 2").is_err());
    }
}
