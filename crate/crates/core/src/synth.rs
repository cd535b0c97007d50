//! Synthetic gesture corpus: smooth upper-body and hand motion whose swing
//! period is the beat period of the paired audio.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{synth_audio_with_beat, AudioFeatures, BeatTrack, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM};
use crate::error::{Error, Result};
use crate::gesture::rotation::{axis_angle, mat_mul};
use crate::gesture::{
    encode_body, pack_gesture, BodyKeypoints2D, GestureClip, HandPose, HandSide, HybridGesture,
    KinematicTree, NUM_BODY_JOINTS, NUM_HAND_JOINTS, TEMPORAL_STRIDE,
};

/// One clip with its audio and the beat that drives both.
#[derive(Clone, Debug)]
pub struct GestureSample {
    pub clip: GestureClip,
    pub audio: AudioFeatures,
    pub beat: BeatTrack,
}

/// Per-clip motion style.
#[derive(Clone, Copy, Debug)]
struct Style {
    scale: f64,
    amp: [f64; 2],
    bend: [f64; 2],
    lag: f64,
    curl: [f64; 2],
    sway: f64,
    root: [f64; 2],
}

impl Style {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            scale: rng.random_range(0.9..1.1),
            amp: [rng.random_range(0.25..0.6), rng.random_range(0.25..0.6)],
            bend: [rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)],
            lag: rng.random_range(0.0..PI),
            curl: [rng.random_range(0.1..0.4), rng.random_range(0.3..0.9)],
            sway: rng.random_range(0.0..0.02),
            root: [rng.random_range(0.45..0.55), rng.random_range(0.28..0.32)],
        }
    }
}

/// Swing activation in `[0, 1]`.
fn lift(phase: f64) -> f64 {
    0.5 * (1.0 + phase.sin())
}

fn keypoints(style: &Style, phase: f64) -> Result<BodyKeypoints2D> {
    let s = style.scale;
    let mut p = [[0.0; 2]; NUM_BODY_JOINTS];
    p[0] = [style.root[0] + style.sway * (0.5 * phase).sin(), style.root[1]];
    let put = |p: &mut [[f64; 2]; NUM_BODY_JOINTS], from: usize, to: usize, angle: f64, len: f64| {
        p[to] = [p[from][0] + len * angle.cos(), p[from][1] + len * angle.sin()];
    };
    // image coordinates: +y points down
    put(&mut p, 0, 1, -FRAC_PI_2 + 0.08 * phase.sin(), 0.08 * s);
    put(&mut p, 0, 2, 0.0, 0.12 * s);
    put(&mut p, 0, 3, PI, 0.12 * s);
    put(&mut p, 0, 8, FRAC_PI_2, 0.3 * s);
    let swing = [lift(phase), lift(phase + style.lag)];
    let upper = [
        FRAC_PI_2 - 0.2 - style.amp[0] * swing[0],
        FRAC_PI_2 + 0.2 + style.amp[1] * swing[1],
    ];
    let fore = [
        upper[0] - style.bend[0] - 0.6 * style.amp[0] * swing[0],
        upper[1] + style.bend[1] + 0.6 * style.amp[1] * swing[1],
    ];
    put(&mut p, 2, 4, upper[0], 0.15 * s);
    put(&mut p, 3, 5, upper[1], 0.15 * s);
    put(&mut p, 4, 6, fore[0], 0.13 * s);
    put(&mut p, 5, 7, fore[1], 0.13 * s);
    let spread = [-0.5, -0.15, 0.05, 0.3];
    let reach = [0.03, 0.045, 0.05, 0.04];
    for k in 0..4 {
        put(&mut p, 6, 9 + k, fore[0] + spread[k], reach[k] * s);
        put(&mut p, 7, 13 + k, fore[1] - spread[k], reach[k] * s);
    }
    BodyKeypoints2D::new(p)
}

fn hand(style: &Style, phase: f64, side: HandSide) -> HandPose {
    let mirror = match side {
        HandSide::Left => 1.0,
        HandSide::Right => -1.0,
    };
    let act = lift(phase + PI / 2.0);
    let curl = style.curl[0] + style.curl[1] * act;
    let mut pose = HandPose::identity(side);
    pose.joint_rotations[0] = mat_mul(
        &axis_angle([0.0, 0.0, 1.0], mirror * 0.25 * phase.sin()),
        &axis_angle([1.0, 0.0, 0.0], 0.15 * act),
    );
    for j in 1..NUM_HAND_JOINTS {
        let finger = (j - 1) / 3;
        let knuckle = (j - 1) % 3;
        let depth = [1.0, 0.8, 0.5][knuckle];
        pose.joint_rotations[j] = if finger == 4 {
            axis_angle([0.6, mirror * 0.8, 0.0], 0.6 * curl * depth)
        } else {
            let stagger = 1.0 + 0.15 * finger as f64;
            axis_angle([0.0, 0.0, mirror], curl * depth * stagger)
        };
    }
    pose
}

fn frame(style: &Style, tree: &KinematicTree, phase: f64) -> Result<HybridGesture> {
    let body = encode_body(&keypoints(style, phase)?, tree)?;
    pack_gesture(
        &body,
        &hand(style, phase, HandSide::Left),
        &hand(style, phase, HandSide::Right),
    )
}

/// Clip of `frames` rows driven by `beat`.
pub fn gesture_clip<R: Rng + ?Sized>(beat: &BeatTrack, frames: usize, rng: &mut R) -> Result<GestureClip> {
    let style = Style::draw(rng);
    let tree = KinematicTree::default();
    let rows = (0..frames)
        .map(|f| frame(&style, &tree, beat.phase(f)))
        .collect::<Result<Vec<_>>>()?;
    GestureClip::from_gestures(&rows)
}

/// `clips` gesture/audio pairs of `frames` frames each.
pub fn synth_gesture_dataset(seed: u64, clips: usize, frames: usize) -> Result<Vec<GestureSample>> {
    if frames == 0 || frames % TEMPORAL_STRIDE != 0 {
        return Err(Error::shape(format!(
            "clip length {frames} must be a positive multiple of {TEMPORAL_STRIDE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clips)
        .map(|_| {
            let audio_seed = rng.random::<u64>();
            let (audio, beat) =
                synth_audio_with_beat(audio_seed, frames, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM)?;
            let clip = gesture_clip(&beat, frames, &mut rng)?;
            Ok(GestureSample { clip, audio, beat })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gesture::ANGLES;

    #[test]
    fn rows_are_valid_and_deterministic() {
        let a = synth_gesture_dataset(5, 3, 32).unwrap();
        let b = synth_gesture_dataset(5, 3, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.audio, y.audio);
            GestureClip::new(x.clip.frames().clone()).unwrap();
        }
        assert!(synth_gesture_dataset(5, 1, 12).is_err());
    }

    #[test]
    fn arm_swing_follows_beat_period() {
        let data = synth_gesture_dataset(9, 12, 128).unwrap();
        // left upper arm is bone 4; its 6D block starts at 24
        let col = ANGLES.start + 4 * 6 + 1;
        for s in &data {
            let x: Vec<f64> = (0..128).map(|f| s.clip.row(f)[col]).collect();
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let x: Vec<f64> = x.iter().map(|v| v - m).collect();
            let ac = |lag: usize| -> f64 {
                x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>()
            };
            let best = (4..=20).max_by(|&a, &b| ac(a).total_cmp(&ac(b))).unwrap();
            assert_eq!(best, s.beat.period);
        }
    }
}
