use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{normalized, quat_to_matrix, Camera, Gaussian3D, GaussianGrad, SH_C0};

/// Screen-space dilation added to every projected covariance, px^2.
pub const LOW_PASS: f64 = 0.3;

/// Gaussians at or closer than this view depth (mm) are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// World-space covariance `R diag(s)^2 R^T`, mm^2.
pub fn covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let a = g.rotation_matrix() * Matrix3::from_diagonal(&g.scales());
    a * a.transpose()
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates; pixel (i, j) has its center at (i + 0.5, j + 0.5).
    pub mean: Vector2<f64>,
    /// Dilated 2D covariance, px^2.
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    /// View-space depth, mm.
    pub depth: f64,
    pub opacity: f64,
    pub rgb: Vector3<f64>,
}

impl ProjectedGaussian {
    /// Half extents of the axis-aligned box around the 3-sigma ellipse.
    pub fn extent(&self) -> Vector2<f64> {
        Vector2::new(3.0 * self.cov[(0, 0)].sqrt(), 3.0 * self.cov[(1, 1)].sqrt())
    }
}

fn jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// EWA projection of a Gaussian. Returns `None` when the Gaussian is at or
/// behind the near plane.
pub fn project(g: &Gaussian3D, cam: &Camera) -> Option<ProjectedGaussian> {
    let t = cam.to_view(&g.center);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let m = jacobian(cam, &t) * cam.rotation;
    let cov = m * covariance(g) * m.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    Some(ProjectedGaussian {
        mean: cam.project_view(&t),
        cov,
        conic,
        depth: t.z,
        opacity: g.opacity(),
        rgb: g.rgb(),
    })
}

/// Vector-Jacobian product of [`project`]: maps gradients with respect to the
/// projected mean, conic (as a full 2x2 matrix), opacity and display color
/// back onto the Gaussian's parameters.
pub(crate) fn project_backward(
    g: &Gaussian3D,
    cam: &Camera,
    d_mean: Vector2<f64>,
    d_conic: Matrix2<f64>,
    d_opacity: f64,
    d_rgb: Vector3<f64>,
) -> GaussianGrad {
    let mut out = [0.0; 14];

    let o = g.opacity();
    out[10] = d_opacity * o * (1.0 - o);
    for c in 0..3 {
        let v = SH_C0 * g.color[c] + 0.5;
        if v > 0.0 && v < 1.0 {
            out[11 + c] = d_rgb[c] * SH_C0;
        }
    }

    let w = cam.rotation;
    let t = cam.to_view(&g.center);
    let j = jacobian(cam, &t);
    let m = j * w;
    let qn = normalized(&g.rotation);
    let r = quat_to_matrix(&qn);
    let s = g.scales();
    let a = r * Matrix3::from_diagonal(&s);
    let sigma = a * a.transpose();
    let cov = m * sigma * m.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;

    // conic = cov^-1  =>  dL/dcov = -conic^T G conic^T
    let g_cov = -(conic.transpose() * d_conic * conic.transpose());
    let g_cov_sym = g_cov + g_cov.transpose();
    let g_sigma = m.transpose() * g_cov * m;
    let g_m = g_cov_sym * m * sigma;
    let g_j = g_m * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = j.transpose() * d_mean;
    g_t.x += g_j[(0, 2)] * (-cam.fx * iz2);
    g_t.y += g_j[(1, 2)] * (-cam.fy * iz2);
    g_t.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * t.x * iz3)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * t.y * iz3);
    let g_p = w.transpose() * g_t;
    out[0..3].copy_from_slice(g_p.as_slice());

    let g_a = (g_sigma + g_sigma.transpose()) * a;
    for k in 0..3 {
        let g_s: f64 = (0..3).map(|i| g_a[(i, k)] * r[(i, k)]).sum();
        out[3 + k] = g_s * s[k];
    }
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_r[(i, k)] = g_a[(i, k)] * s[k];
        }
    }
    let g_qn = quat_matrix_vjp(&qn, &g_r);
    let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|i| qn[i] * g_qn[i]).sum();
    for i in 0..4 {
        out[6 + i] = (g_qn[i] - qn[i] * dot) / norm;
    }
    out
}

/// Gradient of `<G, R(q)>` with respect to the quaternion components
/// (w, x, y, z), treating them as independent.
fn quat_matrix_vjp(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let e = |i: usize, j: usize| g[(i, j)];
    [
        2.0 * (-z * e(0, 1) + y * e(0, 2) + z * e(1, 0) - x * e(1, 2) - y * e(2, 0) + x * e(2, 1)),
        2.0 * (y * e(0, 1) + z * e(0, 2) + y * e(1, 0) - 2.0 * x * e(1, 1) - w * e(1, 2)
            + z * e(2, 0)
            + w * e(2, 1)
            - 2.0 * x * e(2, 2)),
        2.0 * (-2.0 * y * e(0, 0) + x * e(0, 1) + w * e(0, 2) + x * e(1, 0) + z * e(1, 2)
            - w * e(2, 0)
            + z * e(2, 1)
            - 2.0 * y * e(2, 2)),
        2.0 * (-2.0 * z * e(0, 0) - w * e(0, 1) + x * e(0, 2) + w * e(1, 0) - 2.0 * z * e(1, 1)
            + y * e(1, 2)
            + x * e(2, 0)
            + y * e(2, 1)),
    ]
}
