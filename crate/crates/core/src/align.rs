//! Hand translation fitting: find the camera-space offset that makes the
//! perspective projection of 3D hand joints land on their detected 2D
//! positions, with a depth-continuity penalty between consecutive frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

/// Smallest depth treated as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Validation(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Parse `"fx,fy,cx,cy"`.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("bad intrinsics {s:?}: {e}")))?;
        match vals[..] {
            [fx, fy, cx, cy] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::Validation(format!(
                "intrinsics need 4 values, got {}",
                vals.len()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandTranslation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl HandTranslation {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Correspondences for a whole sequence.
#[derive(Clone, Debug)]
pub struct AlignmentProblem {
    pub joints_3d: Vec<Vec<[f64; 3]>>,
    pub joints_2d: Vec<Vec<[f64; 2]>>,
    pub intrinsics: CameraIntrinsics,
    pub lambda_tr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub learning_rate: f64,
    pub first_frame_iterations: usize,
    pub later_frame_iterations: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            first_frame_iterations: 500,
            later_frame_iterations: 250,
        }
    }
}

/// Depth-continuity weight used when none is configured.
pub const DEFAULT_LAMBDA_TR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFit {
    pub translation: HandTranslation,
    pub loss: f64,
    pub rms_px: f64,
}

/// Pinhole projection of a translated camera-space point.
pub fn project_point(p: [f64; 3], t: &HandTranslation, cam: &CameraIntrinsics) -> Result<[f64; 2]> {
    let depth = p[2] + t.z;
    if !(depth > MIN_DEPTH) {
        return Err(Error::BehindCamera(format!("depth {depth:.3e} is not positive")));
    }
    Ok([
        cam.fx * (p[0] + t.x) / depth + cam.cx,
        cam.fy * (p[1] + t.y) / depth + cam.cy,
    ])
}

/// Temporal anchor for frames after the first.
#[derive(Clone, Copy, Debug)]
pub struct DepthPrior {
    pub lambda_tr: f64,
    pub previous_z: f64,
}

struct Objective<'a> {
    joints_3d: &'a [[f64; 3]],
    joints_2d: &'a [[f64; 2]],
    cam: CameraIntrinsics,
    prior: Option<DepthPrior>,
}

impl Objective<'_> {
    fn min_depth(&self, t: &HandTranslation) -> f64 {
        self.joints_3d
            .iter()
            .map(|p| p[2] + t.z)
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-joint mean squared pixel residual plus the depth prior; returns
    /// (loss, gradient, reprojection-only mean).
    fn eval(&self, t: &HandTranslation) -> (f64, [f64; 3], f64) {
        let n = self.joints_3d.len() as f64;
        let c = &self.cam;
        let mut reproj = 0.0;
        let mut grad = [0.0; 3];
        for (p, uv) in self.joints_3d.iter().zip(self.joints_2d) {
            let (x, y, d) = (p[0] + t.x, p[1] + t.y, p[2] + t.z);
            let du = c.fx * x / d + c.cx - uv[0];
            let dv = c.fy * y / d + c.cy - uv[1];
            reproj += du * du + dv * dv;
            grad[0] += 2.0 * du * c.fx / d;
            grad[1] += 2.0 * dv * c.fy / d;
            grad[2] += -2.0 * du * c.fx * x / (d * d) - 2.0 * dv * c.fy * y / (d * d);
        }
        reproj /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        let mut loss = reproj;
        if let Some(DepthPrior {
            lambda_tr,
            previous_z,
        }) = self.prior
        {
            let dz = t.z - previous_z;
            loss += lambda_tr * dz * dz;
            grad[2] += 2.0 * lambda_tr * dz;
        }
        (loss, grad, reproj)
    }
}

fn check_frame(joints_3d: &[[f64; 3]], joints_2d: &[[f64; 2]]) -> Result<()> {
    if joints_3d.is_empty() {
        return Err(Error::Input("frame has no correspondences".into()));
    }
    if joints_3d.len() != joints_2d.len() {
        return Err(Error::Input(format!(
            "{} 3D joints vs {} 2D joints",
            joints_3d.len(),
            joints_2d.len()
        )));
    }
    Ok(())
}

/// Optimize one frame's translation with Adam from `init`.
pub fn align_frame(
    joints_3d: &[[f64; 3]],
    joints_2d: &[[f64; 2]],
    cam: &CameraIntrinsics,
    init: HandTranslation,
    iterations: usize,
    prior: Option<DepthPrior>,
    learning_rate: f64,
) -> Result<FrameFit> {
    check_frame(joints_3d, joints_2d)?;
    let obj = Objective {
        joints_3d,
        joints_2d,
        cam: *cam,
        prior,
    };
    if obj.min_depth(&init) <= MIN_DEPTH {
        return Err(Error::BehindCamera(
            "initial translation puts joints behind the camera".into(),
        ));
    }
    let mut store = ParamStore::new();
    let id = store.add("xyz", Tensor::new(&[3], init.to_array().to_vec())?);
    let mut adam = Adam::new(&store, AdamConfig::with_lr(learning_rate));
    let mut current = init;
    for _ in 0..iterations {
        let (_, grad, _) = obj.eval(&current);
        store.get_mut(id).grad = Tensor::new(&[3], grad.to_vec())?;
        adam.step(&mut store)?;
        let v = store.value(id).data();
        let next = HandTranslation::new(v[0], v[1], v[2]);
        if obj.min_depth(&next) <= MIN_DEPTH {
            return Err(Error::ProjectedDepth {
                frame: 0,
                last_valid: current.to_array(),
            });
        }
        current = next;
    }
    let (loss, _, reproj) = obj.eval(&current);
    Ok(FrameFit {
        translation: current,
        loss,
        rms_px: reproj.sqrt(),
    })
}

/// Frame-0 starting point: zero lateral offset, depth from matching the
/// projected and detected horizontal extents (similar triangles).
pub fn initial_translation(
    joints_3d: &[[f64; 3]],
    joints_2d: &[[f64; 2]],
    cam: &CameraIntrinsics,
) -> HandTranslation {
    let extent = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        hi - lo
    };
    let w3 = extent(&mut joints_3d.iter().map(|p| p[0]));
    let w2 = extent(&mut joints_2d.iter().map(|p| p[0]));
    let h3 = extent(&mut joints_3d.iter().map(|p| p[1]));
    let h2 = extent(&mut joints_2d.iter().map(|p| p[1]));
    let mean_z = joints_3d.iter().map(|p| p[2]).sum::<f64>() / joints_3d.len().max(1) as f64;
    let min_z = joints_3d.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let depth = if w2 > 1e-6 && w3 > 1e-9 {
        cam.fx * w3 / w2
    } else if h2 > 1e-6 && h3 > 1e-9 {
        cam.fy * h3 / h2
    } else {
        1.0
    };
    let mut z = depth - mean_z;
    // keep every joint in front of the camera
    if min_z + z <= MIN_DEPTH {
        z = 0.1 - min_z;
    }
    HandTranslation::new(0.0, 0.0, z)
}

/// Fit every frame in order: frame 0 from the extent-based guess with no
/// prior, later frames warm-started from their predecessor with the depth
/// prior active.
pub fn align_sequence(problem: &AlignmentProblem, config: &AlignConfig) -> Result<Vec<FrameFit>> {
    if problem.joints_3d.is_empty() {
        return Err(Error::Input("alignment needs at least one frame".into()));
    }
    if problem.joints_3d.len() != problem.joints_2d.len() {
        return Err(Error::Input("3D and 2D frame counts differ".into()));
    }
    if !(problem.lambda_tr >= 0.0) {
        return Err(Error::Validation("lambda_tr must be non-negative".into()));
    }
    let cam = &problem.intrinsics;
    let mut fits: Vec<FrameFit> = Vec::with_capacity(problem.joints_3d.len());
    for (f, (j3, j2)) in problem.joints_3d.iter().zip(&problem.joints_2d).enumerate() {
        check_frame(j3, j2)?;
        let result = match fits.last() {
            None => {
                let init = initial_translation(j3, j2, cam);
                align_frame(
                    j3,
                    j2,
                    cam,
                    init,
                    config.first_frame_iterations,
                    None,
                    config.learning_rate,
                )
            }
            Some(prev) => align_frame(
                j3,
                j2,
                cam,
                prev.translation,
                config.later_frame_iterations,
                Some(DepthPrior {
                    lambda_tr: problem.lambda_tr,
                    previous_z: prev.translation.z,
                }),
                config.learning_rate,
            ),
        };
        let fit = result.map_err(|e| match e {
            Error::ProjectedDepth { last_valid, .. } => Error::ProjectedDepth {
                frame: f,
                last_valid,
            },
            other => other,
        })?;
        fits.push(fit);
    }
    Ok(fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    /// Loosely hand-shaped cloud about 8 cm across around the origin.
    fn hand_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-0.04..0.04),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.02..0.02),
                ]
            })
            .collect()
    }

    fn project_all(j3: &[[f64; 3]], t: &HandTranslation) -> Vec<[f64; 2]> {
        j3.iter().map(|p| project_point(*p, t, &cam()).unwrap()).collect()
    }

    #[test]
    fn optical_axis_projects_to_origin() {
        let c = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let uv = project_point([0.0, 0.0, 1.0], &HandTranslation::default(), &c).unwrap();
        assert_eq!(uv, [0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_projection() {
        let c = CameraIntrinsics::new(100.0, 100.0, 50.0, 0.0).unwrap();
        let uv = project_point([1.0, 0.0, 0.0], &HandTranslation::new(0.0, 0.0, 2.0), &c).unwrap();
        assert_eq!(uv[0], 100.0);
    }

    #[test]
    fn projection_is_homogeneous() {
        let p = [0.13, -0.07, 0.4];
        let t = HandTranslation::new(0.02, 0.05, 0.6);
        let a = project_point(p, &t, &cam()).unwrap();
        for s in [0.5, 2.0, 3.7] {
            let ps = [p[0] * s, p[1] * s, p[2] * s];
            let ts = HandTranslation::new(t.x * s, t.y * s, t.z * s);
            let b = project_point(ps, &ts, &cam()).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_rejected() {
        let r = project_point([0.0, 0.0, -1.0], &HandTranslation::default(), &cam());
        assert!(matches!(r, Err(Error::BehindCamera(_))));
    }

    #[test]
    fn intrinsics_parsing() {
        let c = CameraIntrinsics::parse("600, 610,320,240").unwrap();
        assert_eq!(c.fy, 610.0);
        assert!(CameraIntrinsics::parse("1,2,3").is_err());
        assert!(CameraIntrinsics::parse("0,1,2,3").is_err());
    }

    #[test]
    fn already_optimal_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j3 = hand_cloud(&mut rng, 21);
        let truth = HandTranslation::new(0.05, -0.03, 0.8);
        let j2 = project_all(&j3, &truth);
        let fit = align_frame(&j3, &j2, &cam(), truth, 100, None, 0.01).unwrap();
        assert!(fit.loss < 1e-20);
        assert_eq!(fit.translation, truth);
    }

    #[test]
    fn recovers_perturbed_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j3 = hand_cloud(&mut rng, 21);
        let truth = HandTranslation::new(0.05, -0.03, 0.8);
        let j2 = project_all(&j3, &truth);
        let init = HandTranslation::new(truth.x + 0.1, truth.y - 0.1, truth.z + 0.2);
        let initial_loss = Objective {
            joints_3d: &j3,
            joints_2d: &j2,
            cam: cam(),
            prior: None,
        }
        .eval(&init)
        .0;
        let fit = align_frame(&j3, &j2, &cam(), init, 500, None, 0.01).unwrap();
        assert!(fit.translation.distance(&truth) < 1e-3, "{:?}", fit.translation);
        assert!(fit.rms_px < 0.5);
        assert!(fit.loss < 1e-6 * initial_loss);
    }

    #[test]
    fn single_correspondence_reaches_zero_residual() {
        let j3 = vec![[0.01, 0.02, 0.0]];
        let truth = HandTranslation::new(0.0, 0.0, 1.0);
        let j2 = project_all(&j3, &truth);
        let init = HandTranslation::new(0.05, 0.05, 1.2);
        let fit = align_frame(&j3, &j2, &cam(), init, 500, None, 0.01).unwrap();
        // two equations, three unknowns: the residual vanishes, the
        // translation need not equal `truth`
        assert!(fit.rms_px < 0.5, "{}", fit.rms_px);
    }

    #[test]
    fn temporal_term_inactive_on_first_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j3 = hand_cloud(&mut rng, 21);
        let truth = HandTranslation::new(0.0, 0.0, 0.7);
        let j2 = project_all(&j3, &truth);
        let run = |lambda| {
            let p = AlignmentProblem {
                joints_3d: vec![j3.clone()],
                joints_2d: vec![j2.clone()],
                intrinsics: cam(),
                lambda_tr: lambda,
            };
            align_sequence(&p, &AlignConfig::default()).unwrap()[0]
        };
        assert_eq!(run(0.0), run(10.0));
        let single = align_frame(
            &j3,
            &j2,
            &cam(),
            initial_translation(&j3, &j2, &cam()),
            500,
            None,
            0.01,
        )
        .unwrap();
        assert_eq!(run(10.0), single);
    }

    #[test]
    fn depth_prior_reduces_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j3 = hand_cloud(&mut rng, 21);
        let truth = HandTranslation::new(0.02, 0.01, 0.9);
        let clean = project_all(&j3, &truth);
        let noisy: Vec<Vec<[f64; 2]>> = (0..10)
            .map(|_| {
                clean
                    .iter()
                    .map(|uv| {
                        let nu: f64 = rng.sample(StandardNormal);
                        let nv: f64 = rng.sample(StandardNormal);
                        [uv[0] + nu, uv[1] + nv]
                    })
                    .collect()
            })
            .collect();
        let z_std = |lambda| {
            let p = AlignmentProblem {
                joints_3d: vec![j3.clone(); 10],
                joints_2d: noisy.clone(),
                intrinsics: cam(),
                lambda_tr: lambda,
            };
            let zs: Vec<f64> = align_sequence(&p, &AlignConfig::default())
                .unwrap()
                .iter()
                .map(|f| f.translation.z)
                .collect();
            let m = zs.iter().sum::<f64>() / zs.len() as f64;
            (zs.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / zs.len() as f64).sqrt()
        };
        let (with, without) = (z_std(10.0), z_std(0.0));
        assert!(with < without, "{with} vs {without}");
    }

    #[test]
    fn input_errors() {
        assert!(align_frame(&[], &[], &cam(), HandTranslation::default(), 1, None, 0.01).is_err());
        let r = align_frame(
            &[[0.0, 0.0, 0.0]],
            &[[1.0, 1.0], [2.0, 2.0]],
            &cam(),
            HandTranslation::new(0.0, 0.0, 1.0),
            1,
            None,
            0.01,
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn divergence_reports_last_valid_iterate() {
        // Target far off-axis pulls depth toward zero with a huge step.
        let j3 = vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]];
        let j2 = vec![[1e7, 0.0], [1.1e7, 0.0]];
        let init = HandTranslation::new(0.0, 0.0, 0.05);
        let r = align_frame(&j3, &j2, &cam(), init, 500, None, 0.1);
        match r {
            Err(Error::ProjectedDepth { last_valid, .. }) => assert!(last_valid[2] > 0.0),
            other => panic!("expected depth error, got {other:?}"),
        }
    }
}
