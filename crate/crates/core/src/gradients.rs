//! Central-difference checks of every trainable block at tiny sizes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::synth_audio_features;
use crate::diffusion::TokenSequence;
use crate::dit_a::{training_loss, CorruptedExample, DenoiserConfig, DitA};
use crate::error::Result;
use crate::synth::synth_gesture_dataset;
use crate::tensor::nn::multi_head_attention;
use crate::tensor::{grad_check, Linear, ParamStore, Tensor};
use crate::transformer::{joint_attention, StreamLayer, TimeEmbedding};
use crate::video::{as_rows, latent_frames, video_loss, DitV, FrameEncoder, VideoAe, VideoConditions, VideoConfig, VideoExample};
use crate::vq::{surrogate_grad_check, VqConfig, VqModel};

/// Relative-error bound every block must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub parameters: usize,
    pub rel_error: f64,
    pub seconds: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOLERANCE
    }
}

pub const BLOCKS: [&str; 8] = [
    "attention",
    "layer_norm",
    "modulation",
    "pose_encoder",
    "vq_surrogate",
    "dit_a",
    "dit_v",
    "autoencoder",
];

// Zero-initialized heads and biases sit exactly on ReLU kinks and make
// every modulation gate vanish; shift everything off those points.
fn jitter(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += amp * rng.random_range(-1.0..1.0);
        }
    }
}

fn attention() -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[4, 8], 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(&[3, 8], 1.0, &mut rng));
    let proj: Vec<Linear> = ["q", "k", "v"].iter().map(|n| Linear::new(&mut store, n, 8, 8, &mut rng)).collect();
    let w = Tensor::randn(&[7, 8], 1.0, &mut rng);
    let err = grad_check(&mut store, 1e-5, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let mut streams = Vec::new();
        for x in [a, b] {
            streams.push((proj[0].forward(g, x)?, proj[1].forward(g, x)?, proj[2].forward(g, x)?));
        }
        let outs = joint_attention(g, &streams, 2)?;
        let self_attn = multi_head_attention(g, streams[0].0, streams[1].1, streams[1].2, 4)?;
        let o = g.concat_rows(&[outs[0], outs[1]])?;
        let c = g.constant(w.clone());
        let o = g.add(o, c)?;
        let s = g.square(o);
        let s2 = g.square(self_attn);
        let l1 = g.mean(s);
        let l2 = g.mean(s2);
        g.add(l1, l2)
    })?;
    Ok((store.num_scalars(), err))
}

fn layer_norm() -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(&[5, 6], 2.0, &mut rng));
    let w = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let err = grad_check(&mut store, 1e-5, |g| {
        let x = g.param(x);
        let h = g.layer_norm(x)?;
        let c = g.constant(w.clone());
        let p = g.mul(h, c)?;
        let t = g.tanh(p);
        Ok(g.sum(t))
    })?;
    Ok((store.num_scalars(), err))
}

fn modulation() -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(&[6, 8], 1.0, &mut rng));
    let time = TimeEmbedding::new(&mut store, "t", 8, 8, &mut rng);
    let layer = StreamLayer::new(&mut store, "l", 8, 8, &mut rng);
    jitter(&mut store, 4, 0.2);
    let err = grad_check(&mut store, 1e-5, |g| {
        let c = time.forward(g, &[3.0, 17.0])?;
        let m = layer.modulation.forward(g, c, 3)?;
        let x = g.param(x);
        let (q, k, v) = layer.qkv(g, x, &m)?;
        let a = multi_head_attention(g, q, k, v, 2)?;
        let y = layer.finish(g, x, a, &m)?;
        let s = g.square(y);
        Ok(g.mean(s))
    })?;
    Ok((store.num_scalars(), err))
}

fn pose_encoder() -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = FrameEncoder::new(&mut store, "pose", 2, &mut rng);
    jitter(&mut store, 6, 0.2);
    let poses = Tensor::from_fn(&[5, 16, 16, 3], |_| rng.random_range(0.0..1.0));
    let target = Tensor::randn(&[2 * 2 * 2, 4], 1.0, &mut rng);
    let err = grad_check(&mut store, 1e-6, |g| {
        let x = g.constant(as_rows(&poses)?);
        let y = enc.forward(g, x, 5, 16, 16)?;
        let t = g.constant(target.clone());
        g.mse(y, t)
    })?;
    Ok((store.num_scalars(), err))
}

fn vq_surrogate() -> Result<(usize, f64)> {
    let cfg = VqConfig {
        codebook_size: 4,
        latent_dim: 4,
        hidden: 4,
        batch: 2,
        window: 8,
        warmup_steps: 0,
        ..VqConfig::default()
    };
    let mut m = VqModel::new(cfg, 7)?;
    let clips: Vec<_> = synth_gesture_dataset(8, 1, 16)?.into_iter().map(|s| s.clip).collect();
    m.fit_normalization(&clips)?;
    jitter(&mut m.store, 9, 0.1);
    let err = surrogate_grad_check(&mut m, &clips, 1e-6)?;
    Ok((m.store.num_scalars(), err))
}

fn dit_a() -> Result<(usize, f64)> {
    let cfg = DenoiserConfig {
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
    };
    let mut m = DitA::new(cfg, 10)?;
    jitter(&mut m.store, 11, 0.3);
    let audio = synth_audio_features(12, 16, 2, 3)?;
    let clean = TokenSequence::new(vec![1, 4], 8)?;
    let corrupted = TokenSequence::new(vec![1, 8], 8)?;
    let model = m.clone();
    let err = grad_check(&mut m.store, 1e-5, |g| {
        let ex = CorruptedExample {
            clean: &clean,
            corrupted: corrupted.clone(),
            audio: &audio,
            t: 4,
        };
        training_loss(g, &model, &[ex])
    })?;
    Ok((m.store.num_scalars(), err))
}

fn tiny_video() -> VideoConfig {
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

fn dit_v() -> Result<(usize, f64)> {
    let mut m = DitV::new(tiny_video(), 13)?;
    jitter(&mut m.store, 14, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let c = m.config;
    let (t, h, w) = c.latent_grid();
    let conditions = VideoConditions {
        poses: Tensor::from_fn(&[c.frames, c.height, c.width, 3], |_| rng.random_range(0.0..1.0)),
        reference_latent: Tensor::randn(&[1, h, w, 4], 1.0, &mut rng),
        reference_pose: Tensor::from_fn(&[1, c.height, c.width, 3], |_| rng.random_range(0.0..1.0)),
        previous_latent: Some(Tensor::randn(&[latent_frames(c.motion_frames)?, h, w, 4], 1.0, &mut rng)),
    };
    let ex = VideoExample {
        latent: Tensor::randn(&[t, h, w, 4], 1.0, &mut rng),
        conditions,
    };
    let noise = Tensor::randn(&[t, h, w, 4], 1.0, &mut rng);
    let model = m.clone();
    let err = grad_check(&mut m.store, 1e-6, |g| video_loss(g, &model, &ex, 9, &noise))?;
    Ok((m.store.num_scalars(), err))
}

fn autoencoder() -> Result<(usize, f64)> {
    let mut ae = VideoAe::new(2, 16);
    jitter(&mut ae.store, 17, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let clip = Tensor::from_fn(&[5, 8, 8, 3], |_| rng.random_range(0.0..1.0));
    let model = ae.clone();
    let err = grad_check(&mut ae.store, 1e-6, |g| {
        let y = model.reconstruct_graph(g, &clip)?;
        let t = g.constant(as_rows(&clip)?);
        g.mse(y, t)
    })?;
    Ok((ae.store.num_scalars(), err))
}

/// Run one named block (see [`BLOCKS`]).
pub fn check_block(name: &str) -> Result<BlockCheck> {
    let t0 = Instant::now();
    let (block, (parameters, rel_error)) = match name {
        "attention" => ("attention", attention()?),
        "layer_norm" => ("layer_norm", layer_norm()?),
        "modulation" => ("modulation", modulation()?),
        "pose_encoder" => ("pose_encoder", pose_encoder()?),
        "vq_surrogate" => ("vq_surrogate", vq_surrogate()?),
        "dit_a" => ("dit_a", dit_a()?),
        "dit_v" => ("dit_v", dit_v()?),
        "autoencoder" => ("autoencoder", autoencoder()?),
        other => {
            return Err(crate::Error::Input(format!(
                "unknown block {other}; expected one of {}",
                BLOCKS.join(", ")
            )))
        }
    };
    Ok(BlockCheck {
        block,
        parameters,
        rel_error,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn gradient_suite() -> Result<Vec<BlockCheck>> {
    BLOCKS.iter().map(|b| check_block(b)).collect()
}
