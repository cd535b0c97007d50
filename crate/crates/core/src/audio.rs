//! Speech feature interface: a beat stream and a content stream at 25 fps.
//!
//! Real extractors are out of scope; [`synth_audio_features`] produces a
//! deterministic stand-in with a periodic pulse train and smoothed noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_RATE: f64 = 25.0;
pub const DEFAULT_BEAT_DIM: usize = 4;
pub const DEFAULT_CONTENT_DIM: usize = 32;
const SMOOTH_RADIUS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub beat: Tensor,
    pub content: Tensor,
    pub frame_rate: f64,
}

impl AudioFeatures {
    pub fn new(beat: Tensor, content: Tensor) -> Result<Self> {
        if beat.shape().len() != 2 || content.shape().len() != 2 {
            return Err(Error::shape("audio streams must be matrices"));
        }
        if beat.rows() != content.rows() {
            return Err(Error::shape(format!(
                "beat has {} frames, content {}",
                beat.rows(),
                content.rows()
            )));
        }
        if !beat.is_finite() || !content.is_finite() {
            return Err(Error::Input("audio features contain non-finite values".into()));
        }
        Ok(Self {
            beat,
            content,
            frame_rate: FRAME_RATE,
        })
    }

    pub fn frames(&self) -> usize {
        self.beat.rows()
    }

    pub fn width(&self) -> usize {
        self.beat.cols() + self.content.cols()
    }

    /// `[beat | content]` mean-pooled over non-overlapping windows of
    /// `factor` frames.
    pub fn pooled(&self, factor: usize) -> Result<Tensor> {
        let f = self.frames();
        if factor == 0 || f % factor != 0 {
            return Err(Error::shape(format!("{f} audio frames not divisible by {factor}")));
        }
        let (db, dc) = (self.beat.cols(), self.content.cols());
        let mut out = Tensor::zeros(&[f / factor, db + dc]);
        for i in 0..f {
            let row = out.row_mut(i / factor);
            for (o, v) in row[..db].iter_mut().zip(self.beat.row(i)) {
                *o += v / factor as f64;
            }
            for (o, v) in row[db..].iter_mut().zip(self.content.row(i)) {
                *o += v / factor as f64;
            }
        }
        Ok(out)
    }

    /// Frames `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::shape(format!("window {start}..{end} of {}", self.frames())));
        }
        let cut = |t: &Tensor| {
            let c = t.cols();
            Tensor::new(&[end - start, c], t.data()[start * c..end * c].to_vec())
        };
        Self::new(cut(&self.beat)?, cut(&self.content)?)
    }
}

/// Onset phase of the synthetic beat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatTrack {
    pub period: usize,
    pub offset: usize,
}

impl BeatTrack {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let period = rng.random_range(8..=16);
        Self {
            period,
            offset: rng.random_range(0..period),
        }
    }

    /// Frames since the most recent onset (onsets at `offset + k·period`).
    pub fn since_onset(&self, frame: usize) -> usize {
        (frame + self.period - self.offset % self.period) % self.period
    }

    pub fn phase(&self, frame: usize) -> f64 {
        TAU * (frame as f64 - self.offset as f64) / self.period as f64
    }
}

/// Beat channels: onset pulse, decaying envelope, then sine/cosine pairs
/// of the beat phase and its harmonics.
fn beat_channels(track: &BeatTrack, frames: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[frames, dim], |i| {
        let (f, c) = (i / dim, i % dim);
        let since = track.since_onset(f);
        match c {
            0 => (since == 0) as u8 as f64,
            1 => (-(since as f64) / 3.0).exp(),
            _ => {
                let harmonic = ((c - 2) / 2 + 1) as f64;
                let ph = harmonic * track.phase(f);
                if c % 2 == 0 { ph.sin() } else { ph.cos() }
            }
        }
    })
}

/// Gaussian noise smoothed by a centred moving average, rescaled to unit
/// variance.
fn content_channels<R: Rng + ?Sized>(rng: &mut R, frames: usize, dim: usize) -> Tensor {
    let raw: Vec<f64> = (0..frames * dim).map(|_| rng.sample(StandardNormal)).collect();
    let width = (2 * SMOOTH_RADIUS + 1) as f64;
    Tensor::from_fn(&[frames, dim], |i| {
        let (f, c) = (i / dim, i % dim);
        let lo = f.saturating_sub(SMOOTH_RADIUS);
        let hi = (f + SMOOTH_RADIUS + 1).min(frames);
        let s: f64 = (lo..hi).map(|g| raw[g * dim + c]).sum();
        s / width.sqrt()
    })
}

/// Audio features together with the beat they were built from.
pub fn synth_audio_with_beat(
    seed: u64,
    frames: usize,
    beat_dim: usize,
    content_dim: usize,
) -> Result<(AudioFeatures, BeatTrack)> {
    if frames == 0 {
        return Err(Error::Input("audio needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let track = BeatTrack::draw(&mut rng);
    let beat = beat_channels(&track, frames, beat_dim);
    let content = content_channels(&mut rng, frames, content_dim);
    Ok((AudioFeatures::new(beat, content)?, track))
}

pub fn synth_audio_features(
    seed: u64,
    frames: usize,
    beat_dim: usize,
    content_dim: usize,
) -> Result<AudioFeatures> {
    Ok(synth_audio_with_beat(seed, frames, beat_dim, content_dim)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn shapes_and_determinism() {
        let a = synth_audio_features(3, 128, 4, 32).unwrap();
        assert_eq!(a.beat.shape(), &[128, 4]);
        assert_eq!(a.content.shape(), &[128, 32]);
        assert_eq!(a, synth_audio_features(3, 128, 4, 32).unwrap());
        assert_ne!(a, synth_audio_features(4, 128, 4, 32).unwrap());
    }

    #[test]
    fn pulse_autocorrelation_peaks_at_period() {
        for seed in 0..40 {
            let (a, track) = synth_audio_with_beat(seed, 128, 4, 8).unwrap();
            let pulse: Vec<f64> = (0..128).map(|f| a.beat.at(f, 0)).collect();
            let best = (1..64)
                .max_by(|&x, &y| autocorr(&pulse, x).total_cmp(&autocorr(&pulse, y)).then(y.cmp(&x)))
                .unwrap();
            assert_eq!(best, track.period, "seed {seed}");
        }
    }

    #[test]
    fn onsets_follow_track() {
        let (a, t) = synth_audio_with_beat(11, 64, 2, 1).unwrap();
        for f in 0..64 {
            let on = f >= t.offset && (f - t.offset) % t.period == 0
                || f < t.offset && (t.offset - f) % t.period == 0;
            assert_eq!(a.beat.at(f, 0) == 1.0, on, "frame {f}");
        }
    }

    #[test]
    fn pooling_averages_blocks() {
        let a = synth_audio_features(1, 16, 2, 3).unwrap();
        let p = a.pooled(8).unwrap();
        assert_eq!(p.shape(), &[2, 5]);
        let m: f64 = (8..16).map(|f| a.content.at(f, 1)).sum::<f64>() / 8.0;
        assert!((p.at(1, 3) - m).abs() < 1e-12);
        assert!(a.pooled(3).is_err());
    }

    #[test]
    fn mismatched_streams_rejected() {
        assert!(AudioFeatures::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[5, 2])).is_err());
        assert!(AudioFeatures::new(Tensor::full(&[1, 1], f64::NAN), Tensor::zeros(&[1, 1])).is_err());
    }
}
