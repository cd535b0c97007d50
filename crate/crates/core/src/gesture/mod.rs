//! Hybrid per-frame gesture vector: 2D upper body as bone angles/lengths plus
//! 3D hand joint rotations, all angles in the 6D encoding.
//!
//! Frozen layout of the 306 entries:
//!
//! | range        | content                              |
//! |--------------|--------------------------------------|
//! | `[0, 96)`    | 16 body bones × 6D planar rotation   |
//! | `[96, 112)`  | 16 body bone lengths                 |
//! | `[112, 114)` | root joint `(x, y)`                  |
//! | `[114, 210)` | left hand, 16 joints × 6D            |
//! | `[210, 306)` | right hand, 16 joints × 6D           |
//!
//! Hand joints follow the articulated-hand order: wrist (global orient),
//! then index 1–3, middle 1–3, pinky 1–3, ring 1–3, thumb 1–3.

mod body;
pub mod rotation;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use body::{
    decode_body, encode_body, planar_direction, BodyKeypoints2D, KinematicTree,
    DEFAULT_JOINT_NAMES, MIN_BONE_LENGTH,
};
pub use rotation::{rotation_to_6d, sixd_to_rotation, Mat3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_BODY_JOINTS: usize = 17;
pub const NUM_BONES: usize = 16;
pub const NUM_HAND_JOINTS: usize = 16;
pub const BODY_DIM: usize = NUM_BONES * 6 + NUM_BONES + 2;
pub const HAND_DIM: usize = NUM_HAND_JOINTS * 6;
pub const GESTURE_DIM: usize = BODY_DIM + 2 * HAND_DIM;

pub const ANGLES: Range<usize> = 0..96;
pub const LENGTHS: Range<usize> = 96..112;
pub const ROOT: Range<usize> = 112..114;
pub const LEFT_HAND: Range<usize> = 114..210;
pub const RIGHT_HAND: Range<usize> = 210..306;

pub const HAND_JOINT_NAMES: [&str; NUM_HAND_JOINTS] = [
    "wrist", "index1", "index2", "index3", "middle1", "middle2", "middle3", "pinky1", "pinky2",
    "pinky3", "ring1", "ring2", "ring3", "thumb1", "thumb2", "thumb3",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    pub joint_rotations: [Mat3; NUM_HAND_JOINTS],
    pub side: HandSide,
}

impl HandPose {
    pub fn identity(side: HandSide) -> Self {
        Self {
            joint_rotations: [rotation::IDENTITY; NUM_HAND_JOINTS],
            side,
        }
    }

    /// From 16 row-major 3×3 matrices (9 values each).
    pub fn from_row_major(rows: &[Vec<f64>], side: HandSide) -> Result<Self> {
        if rows.len() != NUM_HAND_JOINTS || rows.iter().any(|r| r.len() != 9) {
            return Err(Error::Validation(format!(
                "hand rotations need {NUM_HAND_JOINTS}×9 values"
            )));
        }
        let joint_rotations = std::array::from_fn(|j| {
            let r = &rows[j];
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]
        });
        let pose = Self {
            joint_rotations,
            side,
        };
        pose.encode()?;
        Ok(pose)
    }

    pub fn to_row_major(&self) -> Vec<Vec<f64>> {
        self.joint_rotations
            .iter()
            .map(|r| r.iter().flatten().copied().collect())
            .collect()
    }

    /// 16 joints × 6D in joint order.
    pub fn encode(&self) -> Result<[f64; HAND_DIM]> {
        let mut out = [0.0; HAND_DIM];
        for (j, r) in self.joint_rotations.iter().enumerate() {
            out[j * 6..j * 6 + 6].copy_from_slice(&rotation_to_6d(r)?);
        }
        Ok(out)
    }

    pub fn decode(v: &[f64], side: HandSide) -> Result<Self> {
        if v.len() != HAND_DIM {
            return Err(Error::shape(format!("hand block has {} entries", v.len())));
        }
        let mut joint_rotations = [rotation::IDENTITY; NUM_HAND_JOINTS];
        for (j, r) in joint_rotations.iter_mut().enumerate() {
            let six: [f64; 6] = v[j * 6..j * 6 + 6].try_into().expect("6 entries");
            *r = sixd_to_rotation(&six)?;
        }
        Ok(Self {
            joint_rotations,
            side,
        })
    }
}

/// The 306-entry per-frame gesture vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridGesture {
    values: Vec<f64>,
}

impl HybridGesture {
    /// Wrap raw values, checking every invariant.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let g = Self::from_vec_unchecked(values)?;
        g.validate()?;
        Ok(g)
    }

    /// Wrap raw values, checking only the length.
    pub fn from_vec_unchecked(values: Vec<f64>) -> Result<Self> {
        if values.len() != GESTURE_DIM {
            return Err(Error::shape(format!(
                "gesture vector needs {GESTURE_DIM} entries, got {}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn body(&self) -> [f64; BODY_DIM] {
        self.values[..BODY_DIM].try_into().expect("body block")
    }

    pub fn left_hand(&self) -> &[f64] {
        &self.values[LEFT_HAND]
    }

    pub fn right_hand(&self) -> &[f64] {
        &self.values[RIGHT_HAND]
    }

    /// Lengths non-negative, root in the unit square, every 6D block a
    /// proper rotation.
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("gesture has non-finite entries".into()));
        }
        if let Some(i) = LENGTHS.clone().find(|&i| self.values[i] < 0.0) {
            return Err(Error::Validation(format!("negative bone length at {i}")));
        }
        if ROOT.clone().any(|i| !(0.0..=1.0).contains(&self.values[i])) {
            return Err(Error::Validation("root outside [0, 1]".into()));
        }
        for start in six_d_block_starts() {
            let six: [f64; 6] = self.values[start..start + 6].try_into().expect("6");
            let r = sixd_to_rotation(&six)?;
            if rotation::determinant(&r) <= 0.0 {
                return Err(Error::Validation(format!("block at {start} is not proper")));
            }
        }
        Ok(())
    }

    /// Project arbitrary network output back onto valid gestures: 6D blocks
    /// re-orthonormalized (body blocks also flattened into the image plane),
    /// lengths clamped at zero, root clamped into the unit square.
    pub fn reorthonormalized(values: &[f64]) -> Result<Self> {
        if values.len() != GESTURE_DIM {
            return Err(Error::shape(format!("gesture vector has {} entries", values.len())));
        }
        let mut v = values.to_vec();
        for b in 0..NUM_BONES {
            let six: [f64; 6] = v[b * 6..b * 6 + 6].try_into().expect("6");
            let (c, s) = planar_direction(&six).unwrap_or((1.0, 0.0));
            v[b * 6..b * 6 + 6].copy_from_slice(&[c, s, 0.0, -s, c, 0.0]);
        }
        for start in (LEFT_HAND.start..RIGHT_HAND.end).step_by(6) {
            let six: [f64; 6] = v[start..start + 6].try_into().expect("6");
            let r = sixd_to_rotation(&six).unwrap_or(rotation::IDENTITY);
            v[start..start + 6].copy_from_slice(&rotation_to_6d(&r)?);
        }
        for i in LENGTHS {
            v[i] = v[i].max(0.0);
        }
        for i in ROOT {
            v[i] = v[i].clamp(0.0, 1.0);
        }
        Self::from_vec(v)
    }
}

fn six_d_block_starts() -> impl Iterator<Item = usize> {
    (0..NUM_BONES)
        .map(|b| b * 6)
        .chain((LEFT_HAND.start..RIGHT_HAND.end).step_by(6))
}

/// Concatenate `[body 114][left 96][right 96]`.
pub fn pack_gesture(
    body: &[f64; BODY_DIM],
    left: &HandPose,
    right: &HandPose,
) -> Result<HybridGesture> {
    if left.side != HandSide::Left || right.side != HandSide::Right {
        return Err(Error::Validation("hand sides swapped".into()));
    }
    let mut values = Vec::with_capacity(GESTURE_DIM);
    values.extend_from_slice(body);
    values.extend_from_slice(&left.encode()?);
    values.extend_from_slice(&right.encode()?);
    HybridGesture::from_vec(values)
}

/// Inverse of [`pack_gesture`].
pub fn unpack_gesture(g: &HybridGesture) -> Result<([f64; BODY_DIM], HandPose, HandPose)> {
    Ok((
        g.body(),
        HandPose::decode(g.left_hand(), HandSide::Left)?,
        HandPose::decode(g.right_hand(), HandSide::Right)?,
    ))
}

/// Temporal compression of the motion tokenizer; clip lengths are multiples.
pub const TEMPORAL_STRIDE: usize = 8;

/// `F × 306` gesture sequence with `F` a multiple of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureClip {
    frames: Tensor,
}

impl GestureClip {
    /// Every row must be a valid gesture.
    pub fn new(frames: Tensor) -> Result<Self> {
        let clip = Self::from_raw(frames)?;
        for f in 0..clip.len() {
            HybridGesture::from_vec(clip.frames.row(f).to_vec())
                .map_err(|e| Error::Validation(format!("frame {f}: {e}")))?;
        }
        Ok(clip)
    }

    /// Shape checks only; for raw network output.
    pub fn from_raw(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != GESTURE_DIM {
            return Err(Error::shape(format!(
                "clip must be F x {GESTURE_DIM}, got {:?}",
                frames.shape()
            )));
        }
        let f = frames.rows();
        if f == 0 || f % TEMPORAL_STRIDE != 0 {
            return Err(Error::shape(format!(
                "clip length {f} is not a positive multiple of {TEMPORAL_STRIDE}"
            )));
        }
        Ok(Self { frames })
    }

    pub fn from_gestures(rows: &[HybridGesture]) -> Result<Self> {
        let data = rows.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
        Self::from_raw(Tensor::new(&[rows.len(), GESTURE_DIM], data)?)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, f: usize) -> &[f64] {
        self.frames.row(f)
    }

    /// Project every row onto the valid gesture set.
    pub fn reorthonormalized(&self) -> Result<Vec<HybridGesture>> {
        (0..self.len())
            .map(|f| HybridGesture::reorthonormalized(self.row(f)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hand(rng: &mut ChaCha8Rng, side: HandSide) -> HandPose {
        HandPose {
            joint_rotations: std::array::from_fn(|_| rotation::random_rotation(rng)),
            side,
        }
    }

    fn default_body() -> [f64; BODY_DIM] {
        let mut body = [0.0; BODY_DIM];
        for b in 0..NUM_BONES {
            body[b * 6..b * 6 + 6].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            body[96 + b] = 0.05;
        }
        body[112] = 0.5;
        body[113] = 0.3;
        body
    }

    #[test]
    fn dimensions() {
        assert_eq!(BODY_DIM, 114);
        assert_eq!(HAND_DIM * 2, 192);
        assert_eq!(GESTURE_DIM, 306);
        assert_eq!(ANGLES.len() + LENGTHS.len() + ROOT.len(), BODY_DIM);
        assert_eq!(RIGHT_HAND.end, GESTURE_DIM);
    }

    #[test]
    fn identity_hands_pack_to_repeated_blocks() {
        let g = pack_gesture(
            &default_body(),
            &HandPose::identity(HandSide::Left),
            &HandPose::identity(HandSide::Right),
        )
        .unwrap();
        assert_eq!(g.as_slice().len(), 306);
        for chunk in g.as_slice()[114..].chunks(6) {
            assert_eq!(chunk, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn pack_unpack_is_exact_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let body = default_body();
        let left = random_hand(&mut rng, HandSide::Left);
        let right = random_hand(&mut rng, HandSide::Right);
        let g = pack_gesture(&body, &left, &right).unwrap();
        let (b2, l2, r2) = unpack_gesture(&g).unwrap();
        assert_eq!(b2, body);
        let g2 = pack_gesture(&b2, &l2, &r2).unwrap();
        for (a, b) in g.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ra, rb) in left.joint_rotations.iter().zip(&l2.joint_rotations) {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((ra[i][j] - rb[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn validation_catches_bad_entries() {
        let g = pack_gesture(
            &default_body(),
            &HandPose::identity(HandSide::Left),
            &HandPose::identity(HandSide::Right),
        )
        .unwrap();
        let mut v = g.into_vec();
        v[100] = -0.1;
        assert!(HybridGesture::from_vec(v.clone()).is_err());
        v[100] = 0.1;
        v[112] = 1.5;
        assert!(HybridGesture::from_vec(v.clone()).is_err());
        v[112] = 0.5;
        v[120..126].copy_from_slice(&[0.0; 6]);
        assert!(HybridGesture::from_vec(v.clone()).is_err());
        let fixed = HybridGesture::reorthonormalized(&v).unwrap();
        fixed.validate().unwrap();
    }

    #[test]
    fn swapped_sides_rejected() {
        let r = pack_gesture(
            &default_body(),
            &HandPose::identity(HandSide::Right),
            &HandPose::identity(HandSide::Left),
        );
        assert!(r.is_err());
    }

    #[test]
    fn row_major_hand_io() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_hand(&mut rng, HandSide::Left);
        let back = HandPose::from_row_major(&h.to_row_major(), HandSide::Left).unwrap();
        assert_eq!(back, h);
        assert!(HandPose::from_row_major(&[vec![0.0; 9]], HandSide::Left).is_err());
    }
}
