//! Condition rendering and the synthetic video corpus.
//!
//! Hands are posed in 3D by forward kinematics over the 16 joint rotations,
//! placed in camera space by fitting their translation to the 2D palm
//! anchors of the body, and projected. Pose renders draw the body skeleton
//! (2 px lines) and projected hand joints on black; video frames draw a soft
//! figure over a fixed smooth background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{HandTranslation, align_sequence, AlignConfig, AlignmentProblem, CameraIntrinsics, DEFAULT_LAMBDA_TR};
use crate::audio::{synth_audio_with_beat, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM};
use crate::error::{Error, Result};
use crate::gesture::rotation::{mat_mul, Mat3};
use crate::gesture::{
    decode_body, unpack_gesture, BodyKeypoints2D, GestureClip, HandPose, HandSide, HybridGesture,
    KinematicTree,
};
use crate::synth::gesture_clip;
use crate::tensor::Tensor;

pub const HAND_POINTS: usize = 21;
/// Palm anchor reach and spread (thumb, index, middle, pinky), shared with
/// the synthetic body so a neutral hand projects onto its anchors.
const ANCHOR_REACH: [f64; 4] = [0.03, 0.045, 0.05, 0.04];
const ANCHOR_SPREAD: [f64; 4] = [-0.5, -0.15, 0.05, 0.3];
const SEGMENTS: [f64; 3] = [0.02, 0.015, 0.012];
/// Body joints paired with hand points `[wrist, thumb1, index1, middle1, pinky1]`.
const LEFT_ANCHORS: [usize; 5] = [6, 9, 10, 11, 12];
const RIGHT_ANCHORS: [usize; 5] = [7, 13, 14, 15, 16];
const HAND_ANCHOR_POINTS: [usize; 5] = [0, 13, 1, 4, 7];

/// `H × W × 3` image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = self.data[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Segment in pixel coordinates. `soft` gives a smooth falloff of one
    /// pixel beyond the half width; otherwise coverage is binary.
    pub fn line(&mut self, a: [f64; 2], b: [f64; 2], width: f64, color: [f64; 3], soft: bool) {
        let half = width / 2.0;
        let reach = half + 1.5;
        let (x0, x1) = (a[0].min(b[0]) - reach, a[0].max(b[0]) + reach);
        let (y0, y1) = (a[1].min(b[1]) - reach, a[1].max(b[1]) + reach);
        for y in clamp_range(y0, y1, self.height) {
            for x in clamp_range(x0, x1, self.width) {
                let d = segment_distance([x as f64 + 0.5, y as f64 + 0.5], a, b);
                let alpha = coverage(d, half, soft);
                if alpha > 0.0 {
                    self.blend(y, x, color, alpha);
                }
            }
        }
    }

    pub fn disc(&mut self, c: [f64; 2], radius: f64, color: [f64; 3], soft: bool) {
        self.line(c, c, 2.0 * radius, color, soft);
    }

    /// Filled ellipse with axes `(ra, rb)` along the direction `a → b`,
    /// centred at their midpoint.
    pub fn ellipse(&mut self, a: [f64; 2], b: [f64; 2], half_width: f64, color: [f64; 3]) {
        let c = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt().max(1e-9);
        let (ux, uy) = (dx / len, dy / len);
        let ra = len / 2.0;
        let r = ra.max(half_width) + 2.0;
        for y in clamp_range(c[1] - r, c[1] + r, self.height) {
            for x in clamp_range(c[0] - r, c[0] + r, self.width) {
                let (px, py) = (x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]);
                let along = (px * ux + py * uy) / ra;
                let across = (-px * uy + py * ux) / half_width;
                let rho = (along * along + across * across).sqrt();
                let alpha = ((1.2 - rho) / 0.4).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(y, x, color, alpha);
                }
            }
        }
    }
}

fn clamp_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize + 1).min(n);
    a.min(b)..b
}

fn coverage(d: f64, half: f64, soft: bool) -> f64 {
    if soft {
        let s = ((half + 1.0 - d) / 2.0).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    } else if d <= half {
        1.0
    } else {
        0.0
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let l2 = abx * abx + aby * aby;
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * abx - p[0], a[1] + t * aby - p[1]);
    (qx * qx + qy * qy).sqrt()
}

fn apply(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// 21 hand points in a wrist-centred frame whose +x runs along `heading`
/// (image-plane angle of the forearm): wrist, 15 finger joints in joint
/// order, then 5 fingertips (index, middle, pinky, ring, thumb).
pub fn hand_points_3d(pose: &HandPose, heading: f64) -> [[f64; 3]; HAND_POINTS] {
    let mirror = match pose.side {
        HandSide::Left => 1.0,
        HandSide::Right => -1.0,
    };
    let (s, c) = heading.sin_cos();
    let image: Mat3 = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let root = mat_mul(&image, &pose.joint_rotations[0]);
    // finger order in the joint table: index, middle, pinky, ring, thumb
    let anchor = |k: usize| -> (f64, f64) {
        match k {
            0 => (ANCHOR_REACH[1], ANCHOR_SPREAD[1]),
            1 => (ANCHOR_REACH[2], ANCHOR_SPREAD[2]),
            2 => (ANCHOR_REACH[3], ANCHOR_SPREAD[3]),
            3 => (
                0.5 * (ANCHOR_REACH[2] + ANCHOR_REACH[3]),
                0.5 * (ANCHOR_SPREAD[2] + ANCHOR_SPREAD[3]),
            ),
            _ => (ANCHOR_REACH[0], ANCHOR_SPREAD[0]),
        }
    };
    let mut out = [[0.0; 3]; HAND_POINTS];
    for finger in 0..5 {
        let (reach, spread) = anchor(finger);
        let spread = mirror * spread;
        let dir = [spread.cos(), spread.sin(), 0.0];
        let mut p = apply(&root, [reach * dir[0], reach * dir[1], 0.0]);
        let mut r = root;
        for (k, seg) in SEGMENTS.iter().enumerate() {
            let j = 1 + finger * 3 + k;
            out[j] = p;
            r = mat_mul(&r, &pose.joint_rotations[j]);
            p = add3(p, apply(&r, [seg * dir[0], seg * dir[1], 0.0]));
        }
        out[16 + finger] = p;
    }
    out
}

/// Pinhole camera mapping normalized image coordinates to pixels.
pub fn camera_for(height: usize, width: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: width as f64,
        fy: height as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// Root-relative 3D points of both hands (left, right), each oriented
/// along its forearm.
pub fn hand_geometry(kp: &BodyKeypoints2D, left: &HandPose, right: &HandPose) -> [[[f64; 3]; HAND_POINTS]; 2] {
    let mut out = [[[0.0; 3]; HAND_POINTS]; 2];
    for (h, (pose, anchors)) in [(left, LEFT_ANCHORS), (right, RIGHT_ANCHORS)].into_iter().enumerate() {
        let elbow = kp.points[anchors[0] - 2];
        let wrist = kp.points[anchors[0]];
        let heading = (wrist[1] - elbow[1]).atan2(wrist[0] - elbow[0]);
        out[h] = hand_points_3d(pose, heading);
    }
    out
}

/// Body keypoints (pixels) and projected hand points (pixels) per frame.
#[derive(Clone, Debug)]
pub struct PosedFrame {
    pub body: [[f64; 2]; 17],
    pub hands: [[[f64; 2]; HAND_POINTS]; 2],
    /// Root-relative 3D hand points before translation.
    pub hands_3d: [[[f64; 3]; HAND_POINTS]; 2],
    /// Fitted per-hand camera-space translation.
    pub translations: [HandTranslation; 2],
}

/// Decode gestures, fit each hand's translation against its palm anchors
/// over the whole sequence, and project. Returns the per-frame geometry and
/// the mean reprojection RMS (pixels) of the fits.
pub fn pose_sequence(
    gestures: &[HybridGesture],
    height: usize,
    width: usize,
) -> Result<(Vec<PosedFrame>, f64)> {
    if gestures.is_empty() {
        return Err(Error::Input("no gestures to render".into()));
    }
    let tree = KinematicTree::default();
    let cam = camera_for(height, width);
    let to_px = |p: [f64; 2]| [p[0] * width as f64, p[1] * height as f64];
    let mut bodies = Vec::with_capacity(gestures.len());
    let mut hand3d: [Vec<Vec<[f64; 3]>>; 2] = [Vec::new(), Vec::new()];
    let mut anchors2d: [Vec<Vec<[f64; 2]>>; 2] = [Vec::new(), Vec::new()];
    for g in gestures {
        let (body, left, right) = unpack_gesture(g)?;
        let kp: BodyKeypoints2D = decode_body(&body, &tree)?;
        let pts = hand_geometry(&kp, &left, &right);
        for (h, anchors) in [LEFT_ANCHORS, RIGHT_ANCHORS].into_iter().enumerate() {
            hand3d[h].push(HAND_ANCHOR_POINTS.iter().map(|&i| pts[h][i]).collect());
            anchors2d[h].push(anchors.iter().map(|&j| to_px(kp.points[j])).collect());
        }
        bodies.push((kp, pts));
    }
    let mut fits = Vec::new();
    for h in 0..2 {
        let problem = AlignmentProblem {
            joints_3d: hand3d[h].clone(),
            joints_2d: anchors2d[h].clone(),
            intrinsics: cam,
            lambda_tr: DEFAULT_LAMBDA_TR,
        };
        fits.push(align_sequence(&problem, &AlignConfig::default())?);
    }
    let rms = fits.iter().flatten().map(|f| f.rms_px).sum::<f64>() / (2 * gestures.len()) as f64;
    let mut frames = Vec::with_capacity(gestures.len());
    for (f, (kp, pts)) in bodies.iter().enumerate() {
        let mut hands = [[[0.0; 2]; HAND_POINTS]; 2];
        for h in 0..2 {
            let t = fits[h][f].translation;
            for (i, p) in pts[h].iter().enumerate() {
                let z = (p[2] + t.z).max(1e-6);
                hands[h][i] = [cam.fx * (p[0] + t.x) / z + cam.cx, cam.fy * (p[1] + t.y) / z + cam.cy];
            }
        }
        frames.push(PosedFrame {
            body: kp.points.map(to_px),
            hands,
            hands_3d: *pts,
            translations: [fits[0][f].translation, fits[1][f].translation],
        });
    }
    Ok((frames, rms))
}

const BONE_COLORS: [[f64; 3]; 4] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
];

/// Skeleton lines (2 px at 64 px height) and hand joint dots on black.
pub fn render_pose(p: &PosedFrame, height: usize, width: usize) -> Frame {
    let mut f = Frame::black(height, width);
    let lw = (2.0 * height as f64 / 64.0).max(1.0);
    let tree = KinematicTree::default();
    for (i, &(a, b)) in tree.bones.iter().enumerate() {
        f.line(p.body[a], p.body[b], lw, BONE_COLORS[i % 4], false);
    }
    for (h, hand) in p.hands.iter().enumerate() {
        let color = if h == 0 { [1.0, 0.5, 0.0] } else { [0.0, 1.0, 1.0] };
        for pt in hand.iter() {
            f.disc(*pt, lw / 2.0, color, false);
        }
    }
    f
}

/// Smooth vertical/horizontal gradient background.
fn background(height: usize, width: usize) -> Frame {
    let mut f = Frame::black(height, width);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let i = (y * width + x) * 3;
            f.data[i] = 0.35 + 0.15 * v;
            f.data[i + 1] = 0.45 + 0.1 * u;
            f.data[i + 2] = 0.55 - 0.1 * v;
        }
    }
    f
}

/// Soft, moderate-contrast figure over the background.
pub fn render_person(p: &PosedFrame, height: usize, width: usize) -> Frame {
    let mut f = background(height, width);
    let scale = height as f64 / 64.0;
    let skin = [0.85, 0.65, 0.5];
    let shirt = [0.2, 0.3, 0.6];
    f.ellipse(p.body[0], p.body[8], 7.0 * scale, shirt);
    f.line(p.body[2], p.body[3], 5.0 * scale, shirt, true);
    for &(a, b) in &[(2usize, 4usize), (3, 5)] {
        f.line(p.body[a], p.body[b], 4.0 * scale, shirt, true);
    }
    for &(a, b) in &[(4usize, 6usize), (5, 7)] {
        f.line(p.body[a], p.body[b], 3.0 * scale, skin, true);
    }
    f.disc(p.body[1], 5.0 * scale, skin, true);
    for hand in &p.hands {
        for pt in hand.iter() {
            f.disc(*pt, 1.0 * scale, skin, true);
        }
    }
    f
}

/// Stack frames into a `K × H × W × 3` tensor.
pub fn frames_to_tensor(frames: &[Frame]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Input("no frames".into()))?;
    let (h, w) = (first.height, first.width);
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::shape("frames differ in size"));
    }
    let data = frames.iter().flat_map(|f| f.data.iter().copied()).collect();
    Tensor::new(&[frames.len(), h, w, 3], data)
}

/// A rendered sequence: video frames and matching pose renders.
#[derive(Clone, Debug)]
pub struct RenderedSequence {
    pub video: Tensor,
    pub poses: Tensor,
    pub rms_px: f64,
}

pub fn render_sequence(gestures: &[HybridGesture], height: usize, width: usize) -> Result<RenderedSequence> {
    let (posed, rms_px) = pose_sequence(gestures, height, width)?;
    let video: Vec<Frame> = posed.iter().map(|p| render_person(p, height, width)).collect();
    let poses: Vec<Frame> = posed.iter().map(|p| render_pose(p, height, width)).collect();
    Ok(RenderedSequence {
        video: frames_to_tensor(&video)?,
        poses: frames_to_tensor(&poses)?,
        rms_px,
    })
}

/// `clips` rendered sequences of `frames` frames at `height × width`.
pub fn synth_video_dataset(
    seed: u64,
    clips: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<RenderedSequence>> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::shape("video dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clips)
        .map(|_| {
            let audio_seed = rng.random::<u64>();
            let (_, beat) = synth_audio_with_beat(audio_seed, 8, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM)?;
            let padded = frames.div_ceil(8) * 8;
            let clip: GestureClip = gesture_clip(&beat, padded, &mut rng)?;
            let rows = clip.reorthonormalized()?;
            render_sequence(&rows[..frames], height, width)
        })
        .collect()
}
