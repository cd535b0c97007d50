//! Continuous 6D rotation encoding: the first two matrix columns, decoded by
//! Gram–Schmidt.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Tolerance on `R·Rᵀ = I` accepted by [`rotation_to_6d`].
pub const ORTHONORMAL_TOL: f64 = 1e-4;

const DEGENERATE_NORM: f64 = 1e-8;

pub fn determinant(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Largest entry of `|R·Rᵀ − I|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation by `theta` radians about the z axis.
pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// First two columns of `r`, column-major.
pub fn rotation_to_6d(r: &Mat3) -> Result<[f64; 6]> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("rotation has non-finite entries".into()));
    }
    let err = orthonormality_error(r);
    if err > ORTHONORMAL_TOL {
        return Err(Error::Validation(format!(
            "matrix is not orthonormal (max |RRᵀ−I| = {err:.3e})"
        )));
    }
    if determinant(r) <= 0.0 {
        return Err(Error::Validation("rotation has negative determinant".into()));
    }
    Ok([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Orthonormalize the two encoded columns; the third is their cross product.
pub fn sixd_to_rotation(v: &[f64; 6]) -> Result<Mat3> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("6D block has non-finite entries".into()));
    }
    let n1 = norm(a1);
    if n1 < DEGENERATE_NORM {
        return Err(Error::Degenerate(format!("first column norm {n1:.3e}")));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let r2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(r2);
    if n2 < DEGENERATE_NORM {
        return Err(Error::Degenerate(format!(
            "columns are parallel (residual norm {n2:.3e})"
        )));
    }
    let b2 = [r2[0] / n2, r2[1] / n2, r2[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return quaternion_to_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        }
    }
}

/// Unit quaternion `(w, x, y, z)` to a rotation matrix.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation about a unit axis (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = norm(axis);
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = (angle / 2.0).sin_cos();
    quaternion_to_matrix([c, x * s, y * s, z * s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_encodes_to_first_columns() {
        assert_eq!(rotation_to_6d(&IDENTITY).unwrap(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(sixd_to_rotation(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(rotation_to_6d(&r).unwrap(), [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let rz = rot_z(std::f64::consts::FRAC_PI_2);
        let v = rotation_to_6d(&rz).unwrap();
        for (a, b) in v.iter().zip([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_schmidt_by_hand() {
        let r = sixd_to_rotation(&[2.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(r, IDENTITY);
    }

    #[test]
    fn roundtrip_on_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = sixd_to_rotation(&rotation_to_6d(&r).unwrap()).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r[i][j] - back[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn arbitrary_vectors_decode_to_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v: [f64; 6] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            let r = sixd_to_rotation(&v).unwrap();
            assert!(orthonormality_error(&r) < 1e-10);
            assert!((determinant(&r) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_reflections_and_skew() {
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(rotation_to_6d(&reflect).is_err());
        let skew = [[1.0, 0.01, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(rotation_to_6d(&skew).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            sixd_to_rotation(&[0.0; 6]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            sixd_to_rotation(&[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }
}
