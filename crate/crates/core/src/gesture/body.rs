//! Upper-body 2D keypoints as bone angles and lengths.

use serde::{Deserialize, Serialize};

use super::rotation::{rot_z, rotation_to_6d, sixd_to_rotation};
use super::{BODY_DIM, NUM_BODY_JOINTS, NUM_BONES};
use crate::error::{Error, Result};

/// Shortest bone accepted by [`encode_body`], in normalized image units.
pub const MIN_BONE_LENGTH: f64 = 1e-6;

/// 17 `(x, y)` points in image coordinates divided by frame height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyKeypoints2D {
    pub points: [[f64; 2]; NUM_BODY_JOINTS],
}

impl BodyKeypoints2D {
    pub fn new(points: [[f64; 2]; NUM_BODY_JOINTS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("keypoint coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn from_slice(pts: &[[f64; 2]]) -> Result<Self> {
        let points: [[f64; 2]; NUM_BODY_JOINTS] = pts.try_into().map_err(|_| {
            Error::Validation(format!(
                "expected {NUM_BODY_JOINTS} body keypoints, got {}",
                pts.len()
            ))
        })?;
        Self::new(points)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut points = self.points;
        for p in &mut points {
            p[0] += dx;
            p[1] += dy;
        }
        Self { points }
    }
}

/// Names of the default joint table, by index.
pub const DEFAULT_JOINT_NAMES: [&str; NUM_BODY_JOINTS] = [
    "neck",
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "mid_hip",
    "left_thumb_base",
    "left_index_base",
    "left_middle_base",
    "left_pinky_base",
    "right_thumb_base",
    "right_index_base",
    "right_middle_base",
    "right_pinky_base",
];

/// Bones as `(parent joint, child joint)` pairs, rooted at one joint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicTree {
    pub bones: Vec<(usize, usize)>,
    pub root_joint: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl Default for KinematicTree {
    /// Neck-rooted upper body: head, torso, both arms, four palm anchors
    /// per wrist.
    fn default() -> Self {
        Self::new(
            vec![
                (0, 1),
                (0, 2),
                (0, 3),
                (0, 8),
                (2, 4),
                (3, 5),
                (4, 6),
                (5, 7),
                (6, 9),
                (6, 10),
                (6, 11),
                (6, 12),
                (7, 13),
                (7, 14),
                (7, 15),
                (7, 16),
            ],
            0,
        )
        .expect("default tree is valid")
    }
}

impl KinematicTree {
    pub fn new(bones: Vec<(usize, usize)>, root_joint: usize) -> Result<Self> {
        let mut tree = Self {
            bones,
            root_joint,
            order: Vec::new(),
        };
        tree.order = tree.validate()?;
        Ok(tree)
    }

    /// Checks the tree shape and returns bone indices in parent-first order.
    fn validate(&self) -> Result<Vec<usize>> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.bones.len() != NUM_BONES {
            return bad(format!("tree needs {NUM_BONES} bones, has {}", self.bones.len()));
        }
        if self.root_joint >= NUM_BODY_JOINTS {
            return bad(format!("root joint {} out of range", self.root_joint));
        }
        let mut parent_of = [None; NUM_BODY_JOINTS];
        for &(p, c) in &self.bones {
            if p >= NUM_BODY_JOINTS || c >= NUM_BODY_JOINTS || p == c {
                return bad(format!("invalid bone ({p}, {c})"));
            }
            if c == self.root_joint {
                return bad("root joint cannot be a child".into());
            }
            if parent_of[c].replace(p).is_some() {
                return bad(format!("joint {c} has two parents"));
            }
        }
        // Breadth-first from the root; every bone must be reached.
        let mut placed = [false; NUM_BODY_JOINTS];
        placed[self.root_joint] = true;
        let mut order = Vec::with_capacity(NUM_BONES);
        let mut used = [false; NUM_BONES];
        loop {
            let before = order.len();
            for (i, &(p, c)) in self.bones.iter().enumerate() {
                if !used[i] && placed[p] {
                    used[i] = true;
                    placed[c] = true;
                    order.push(i);
                }
            }
            if order.len() == NUM_BONES {
                return Ok(order);
            }
            if order.len() == before {
                return bad("tree has joints unreachable from the root (cycle or forest)".into());
            }
        }
    }

    fn ordered(&self) -> Vec<usize> {
        if self.order.len() == NUM_BONES {
            self.order.clone()
        } else {
            self.validate().unwrap_or_default()
        }
    }

    /// Re-derives the traversal order, e.g. after deserializing.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.bones, self.root_joint)
    }
}

/// `[16 × 6D angle][16 lengths][root x, y]`.
pub fn encode_body(k: &BodyKeypoints2D, tree: &KinematicTree) -> Result<[f64; BODY_DIM]> {
    let mut out = [0.0; BODY_DIM];
    for (b, &(p, c)) in tree.bones.iter().enumerate() {
        let dx = k.points[c][0] - k.points[p][0];
        let dy = k.points[c][1] - k.points[p][1];
        let len = (dx * dx + dy * dy).sqrt();
        if len < MIN_BONE_LENGTH {
            return Err(Error::Degenerate(format!("bone {b} ({p}->{c}) has zero length")));
        }
        let six = rotation_to_6d(&rot_z(dy.atan2(dx)))?;
        out[b * 6..b * 6 + 6].copy_from_slice(&six);
        out[96 + b] = len;
    }
    out[112] = k.points[tree.root_joint][0];
    out[113] = k.points[tree.root_joint][1];
    Ok(out)
}

/// In-plane direction of a 6D block: the first Gram–Schmidt column
/// projected onto the image plane.
pub fn planar_direction(six: &[f64; 6]) -> Result<(f64, f64)> {
    let r = sixd_to_rotation(six)?;
    let (x, y) = (r[0][0], r[1][0]);
    let n = (x * x + y * y).sqrt();
    if n < 1e-8 {
        return Err(Error::Degenerate("bone direction is out of the image plane".into()));
    }
    Ok((x / n, y / n))
}

/// Forward kinematics from the root.
pub fn decode_body(v: &[f64; BODY_DIM], tree: &KinematicTree) -> Result<BodyKeypoints2D> {
    let mut pts = [[f64::NAN; 2]; NUM_BODY_JOINTS];
    pts[tree.root_joint] = [v[112], v[113]];
    for b in tree.ordered() {
        let (p, c) = tree.bones[b];
        let six: [f64; 6] = v[b * 6..b * 6 + 6].try_into().expect("6 entries");
        let (cx, cy) = planar_direction(&six)?;
        let len = v[96 + b];
        if !(len >= 0.0) {
            return Err(Error::Validation(format!("bone {b} has negative length {len}")));
        }
        pts[c] = [pts[p][0] + len * cx, pts[p][1] + len * cy];
    }
    BodyKeypoints2D::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random valid keypoints: walk the default tree with random bone
    /// directions and lengths.
    fn random_keypoints(rng: &mut ChaCha8Rng, tree: &KinematicTree) -> BodyKeypoints2D {
        let mut pts = [[0.0; 2]; NUM_BODY_JOINTS];
        pts[tree.root_joint] = [rng.random_range(0.3..0.7), rng.random_range(0.2..0.5)];
        for b in tree.ordered() {
            let (p, c) = tree.bones[b];
            let th: f64 = rng.random_range(-3.1..3.1);
            let len: f64 = rng.random_range(0.01..0.2);
            pts[c] = [pts[p][0] + len * th.cos(), pts[p][1] + len * th.sin()];
        }
        BodyKeypoints2D::new(pts).unwrap()
    }

    fn chain_keypoints() -> BodyKeypoints2D {
        // Every bone +x with length 0.1: depth-first x offsets.
        let tree = KinematicTree::default();
        let mut pts = [[0.5, 0.5]; NUM_BODY_JOINTS];
        for b in tree.ordered() {
            let (p, c) = tree.bones[b];
            pts[c] = [pts[p][0] + 0.1, 0.5];
        }
        BodyKeypoints2D::new(pts).unwrap()
    }

    #[test]
    fn zero_angle_chain() {
        let tree = KinematicTree::default();
        let v = encode_body(&chain_keypoints(), &tree).unwrap();
        for b in 0..16 {
            assert_eq!(&v[b * 6..b * 6 + 6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            assert!((v[96 + b] - 0.1).abs() < 1e-12);
        }
        assert_eq!(&v[112..], &[0.5, 0.5]);
        let back = decode_body(&v, &tree).unwrap();
        for (a, b) in back.points.iter().zip(chain_keypoints().points) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_roundtrip() {
        let tree = KinematicTree::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let k = random_keypoints(&mut rng, &tree);
            let v = encode_body(&k, &tree).unwrap();
            let back = decode_body(&v, &tree).unwrap();
            for (a, b) in back.points.iter().zip(k.points) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            let v2 = encode_body(&back, &tree).unwrap();
            for (a, b) in v.iter().zip(v2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_only_moves_root() {
        let tree = KinematicTree::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = random_keypoints(&mut rng, &tree);
        let a = encode_body(&k, &tree).unwrap();
        let b = encode_body(&k.translated(0.125, -0.0625), &tree).unwrap();
        for i in 0..112 {
            assert!((a[i] - b[i]).abs() < 1e-12, "index {i}");
        }
        assert!((b[112] - a[112] - 0.125).abs() < 1e-12);
        assert!((b[113] - a[113] + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn zero_length_bone_is_degenerate() {
        let tree = KinematicTree::default();
        let mut k = chain_keypoints();
        k.points[1] = k.points[0];
        assert!(matches!(encode_body(&k, &tree), Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_trees_rejected() {
        let mut bones = KinematicTree::default().bones;
        bones[3] = (0, 2); // joint 2 gets two parents, joint 8 orphaned
        assert!(KinematicTree::new(bones, 0).is_err());
        let mut bones = KinematicTree::default().bones;
        bones.pop();
        assert!(KinematicTree::new(bones, 0).is_err());
        // cycle disconnected from the root
        let mut bones = KinematicTree::default().bones;
        bones[4] = (6, 4);
        assert!(KinematicTree::new(bones, 0).is_err());
    }

    #[test]
    fn bad_six_d_block_fails_decode() {
        let tree = KinematicTree::default();
        let mut v = encode_body(&chain_keypoints(), &tree).unwrap();
        v[0..6].copy_from_slice(&[0.0; 6]);
        assert!(matches!(decode_body(&v, &tree), Err(Error::Degenerate(_))));
    }
}
