//! Small dense helpers: 3-vector angles and a symmetric 3x3 eigensolver.

use nalgebra::{Matrix3, Vector3};

/// Angle between two non-zero vectors in `[0, pi]`.
///
/// Uses `atan2(|a x b|, a . b)`, which stays accurate near 0 and pi where
/// `acos` of the normalized dot product loses half its digits.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in descending order. Each eigenvector is
/// sign-normalized so that its largest-magnitude component is positive.
pub fn symmetric_eigen3(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));

    if scale > 0.0 {
        for _sweep in 0..64 {
            let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            if off.sqrt() <= 1e-300_f64.max(f64::EPSILON * 1e-3 * scale) {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut rot = Matrix3::<f64>::identity();
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = s;
                rot[(q, p)] = -s;
                a = rot.transpose() * a * rot;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                v *= rot;
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.map(|i| a[(i, i)]);
    let vectors = order.map(|i| fix_sign(v.column(i).into_owned()));
    (values, vectors)
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn fix_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut idx = 0;
    for i in 1..3 {
        if v[i].abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        -v
    } else {
        v
    }
}
