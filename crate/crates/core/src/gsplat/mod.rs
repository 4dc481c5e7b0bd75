//! Anisotropic 3D Gaussians grouped per tooth, camera model, and a CPU
//! tile-based differentiable rasterizer.

mod camera;
mod fit;
mod image;
mod ply;
mod project;
mod raster;
mod silhouette;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::jawgraph::{ToothId, ToothLayout};

pub use camera::{look_at, orbit_cameras, Camera, OrbitSpec};
pub use fit::layout_from_gaussians;
pub use image::Image;
pub use ply::{read_gaussians, read_point_cloud, read_ply, write_gaussians, write_point_cloud, write_ply};
pub use project::{covariance, project, ProjectedGaussian, LOW_PASS, NEAR_PLANE};
pub use raster::{render_scene, Contribution, Frame, Rasterizer, TILE_SIZE, TRANSMITTANCE_EPS};
pub use silhouette::render_layout_silhouette;

/// Scalars per Gaussian: center (3), log-scale (3), quaternion (4, w first),
/// opacity logit (1), color (3).
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Spherical-harmonic degree of the color model. Only the DC band is used.
pub const SH_DEGREE: u32 = 0;

/// Gradient (or any per-parameter quantity) laid out like
/// [`Gaussian3D::to_params`].
pub type GaussianGrad = [f64; PARAMS_PER_GAUSSIAN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Color,
    ];

    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ParamGroup::Position => 0..3,
            ParamGroup::Scale => 3..6,
            ParamGroup::Rotation => 6..10,
            ParamGroup::Opacity => 10..11,
            ParamGroup::Color => 11..14,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Color => "color",
        }
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("non-finite parameter in tooth {tooth}, Gaussian {index}")]
    NonFinite { tooth: ToothId, index: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("gradient image has {got} values, expected {expected}")]
    GradientShape { got: usize, expected: usize },
    #[error("PLY error: {0}")]
    Ply(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Degree-0 spherical-harmonic coefficients per RGB channel.
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn isotropic(center: Vector3<f64>, scale: f64) -> Self {
        Gaussian3D {
            center,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Display color, clamped to [0, 1].
    pub fn rgb(&self) -> Vector3<f64> {
        self.color.map(|c| (SH_C0 * c + 0.5).clamp(0.0, 1.0))
    }

    pub fn to_params(&self) -> GaussianGrad {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[0..3].copy_from_slice(self.center.as_slice());
        p[3..6].copy_from_slice(self.log_scale.as_slice());
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &GaussianGrad) -> Self {
        Gaussian3D {
            center: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }

    /// Rescales the quaternion to unit length.
    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalized(&self.rotation))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn normalized(q: &[f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub(crate) fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion (w, x, y, z) of a rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    [q.w, q.i, q.j, q.k]
}

/// The Gaussians of one tooth together with its layout box.
#[derive(Debug, Clone, PartialEq)]
pub struct ToothGaussians {
    pub tooth_id: ToothId,
    pub layout: ToothLayout,
    pub gaussians: Vec<Gaussian3D>,
}

impl ToothGaussians {
    pub fn centers(&self) -> Vec<Point3<f64>> {
        self.gaussians.iter().map(|g| Point3::from(g.center)).collect()
    }
}

/// Composition of per-tooth Gaussian sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGaussians {
    pub teeth: Vec<ToothGaussians>,
}

impl SceneGaussians {
    pub fn new(teeth: Vec<ToothGaussians>) -> Self {
        SceneGaussians { teeth }
    }

    pub fn find(&self, id: ToothId) -> Option<usize> {
        self.teeth.iter().position(|t| t.tooth_id == id)
    }

    pub fn num_gaussians(&self) -> usize {
        self.teeth.iter().map(|t| t.gaussians.len()).sum()
    }

    /// Checks that tooth ids are unique and every tooth has a Gaussian.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.teeth {
            if !seen.insert(t.tooth_id) {
                return Err(format!("duplicate tooth {}", t.tooth_id));
            }
            if t.gaussians.is_empty() {
                return Err(format!("tooth {} has no Gaussians", t.tooth_id));
            }
        }
        Ok(())
    }

    pub fn refs(&self) -> Vec<&ToothGaussians> {
        self.teeth.iter().collect()
    }
}

/// Places `n` isotropic mid-gray Gaussians uniformly inside the layout box.
pub fn init_from_layout(
    tooth_id: ToothId,
    layout: &ToothLayout,
    n: usize,
    seed: u64,
) -> ToothGaussians {
    let n = n.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(tooth_id.0) << 40));
    let half = layout.half_extents();
    let scale = layout.h.min(layout.w).min(layout.l) / (2.0 * (n as f64).cbrt());
    let gaussians = (0..n)
        .map(|_| {
            let u = Vector3::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            );
            let p = layout.to_world(u.component_mul(&half));
            Gaussian3D::isotropic(p.coords, scale)
        })
        .collect();
    ToothGaussians {
        tooth_id,
        layout: *layout,
        gaussians,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ToothLayout {
        ToothLayout {
            x: 3.0,
            y: -2.0,
            z: 1.0,
            h: 9.0,
            w: 7.0,
            l: 6.0,
            k: 0.4,
            r: -0.1,
        }
    }

    #[test]
    fn init_single_gaussian_inside_box() {
        let t = init_from_layout(ToothId(11), &layout(), 1, 0);
        assert_eq!(t.gaussians.len(), 1);
        assert!(layout().contains(&Point3::from(t.gaussians[0].center), 1e-12));
        assert_eq!(t.gaussians[0].opacity(), 0.5);
        assert_eq!(t.gaussians[0].rgb(), Vector3::repeat(0.5));
        assert!((t.gaussians[0].scales()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn init_centroid_near_box_center() {
        let l = layout();
        let t = init_from_layout(ToothId(11), &l, 10_000, 3);
        let c = t
            .gaussians
            .iter()
            .fold(Vector3::zeros(), |a, g| a + g.center)
            / 10_000.0;
        let err = c - l.center().coords;
        // within 2% of the box size on every axis
        let half = l.half_extents();
        let local = l.rotation().transpose() * err;
        for i in 0..3 {
            assert!(local[i].abs() < 0.02 * 2.0 * half[i], "{local:?}");
        }
        assert!(t.gaussians.iter().all(|g| l.contains(&Point3::from(g.center), 1e-9)));
    }

    #[test]
    fn init_deterministic() {
        let a = init_from_layout(ToothId(11), &layout(), 32, 5);
        assert_eq!(a, init_from_layout(ToothId(11), &layout(), 32, 5));
        assert_ne!(a, init_from_layout(ToothId(11), &layout(), 32, 6));
    }

    #[test]
    fn params_round_trip() {
        let g = Gaussian3D {
            center: Vector3::new(1.0, 2.0, 3.0),
            log_scale: Vector3::new(-1.0, 0.0, 0.5),
            rotation: [0.5, 0.5, 0.5, 0.5],
            opacity_logit: 0.3,
            color: Vector3::new(0.1, -0.2, 0.3),
        };
        assert_eq!(Gaussian3D::from_params(&g.to_params()), g);
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        let q = normalized(&[0.9, 0.1, -0.3, 0.2]);
        let m = quat_to_matrix(&q);
        assert!((m * m.transpose() - Matrix3::identity()).norm() < 1e-12);
        let back = matrix_to_quat(&m);
        let dot: f64 = q.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-12);
    }
}
