use nalgebra::{Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::RenderError;

/// Pinhole camera. `rotation` and `translation` map world to view space;
/// the view frame has x right, y down and z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("empty image".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) || !(self.rotation.determinant() > 0.0) {
            return Err(RenderError::InvalidCamera(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        Ok(())
    }

    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection of a view-space point.
    pub fn project_view(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    pub fn eye(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// World-space origin and unit direction of the ray through the center
    /// of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> (Point3<f64>, Vector3<f64>) {
        let d = Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        (self.eye(), (self.rotation.transpose() * d).normalize())
    }
}

/// Camera at `eye` looking at `target` with the given world up direction.
pub fn look_at(
    eye: Point3<f64>,
    target: Point3<f64>,
    up: Vector3<f64>,
    focal: f64,
    width: usize,
    height: usize,
) -> Camera {
    let z = (target - eye).normalize();
    let mut x = z.cross(&up);
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Camera {
        translation: -(rotation * eye.coords),
        rotation,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

/// Ring of cameras around a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    /// Azimuth samples per elevation ring.
    pub azimuths: usize,
    pub elevations_deg: Vec<f64>,
    /// Orbit radius as a multiple of the subject extent.
    pub radius_factor: f64,
    pub fov_deg: f64,
    pub image_size: usize,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            azimuths: 12,
            elevations_deg: vec![-10.0, 20.0],
            radius_factor: 3.0,
            fov_deg: 30.0,
            image_size: 256,
        }
    }
}

impl OrbitSpec {
    pub fn num_views(&self) -> usize {
        self.azimuths * self.elevations_deg.len()
    }
}

/// Cameras on an orbit around `center` with z as world up. Elevations are
/// outer, azimuths inner; the first azimuth looks along +y.
pub fn orbit_cameras(spec: &OrbitSpec, center: Point3<f64>, extent: f64) -> Vec<Camera> {
    let radius = spec.radius_factor * extent.max(1e-6);
    let focal = spec.image_size as f64 / 2.0 / (spec.fov_deg.to_radians() / 2.0).tan();
    let mut out = Vec::with_capacity(spec.num_views());
    for &el in &spec.elevations_deg {
        let el = el.to_radians();
        for a in 0..spec.azimuths {
            let az = -std::f64::consts::FRAC_PI_2
                + 2.0 * std::f64::consts::PI * a as f64 / spec.azimuths as f64;
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            out.push(look_at(
                center + dir * radius,
                center,
                Vector3::z(),
                focal,
                spec.image_size,
                spec.image_size,
            ));
        }
    }
    out
}
