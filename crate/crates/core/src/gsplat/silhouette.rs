use nalgebra::{Point3, Vector3};

use super::{Camera, Image};
use crate::jawgraph::ToothLayout;

/// Whether the ray `o + s d` (s > 0) meets the oriented layout box.
fn ray_hits_box(o: &Point3<f64>, d: &Vector3<f64>, l: &ToothLayout) -> bool {
    let rt = l.rotation().transpose();
    let lo = rt * (o - l.center());
    let ld = rt * d;
    let half = l.half_extents();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if ld[i].abs() < 1e-15 {
            if lo[i].abs() > half[i] {
                return false;
            }
            continue;
        }
        let a = (-half[i] - lo[i]) / ld[i];
        let b = (half[i] - lo[i]) / ld[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Filled silhouettes of layout boxes: 1 on every channel where a pixel ray
/// meets any box, 0 elsewhere.
pub fn render_layout_silhouette(layouts: &[ToothLayout], cam: &Camera) -> Image {
    let mut img = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (o, d) = cam.pixel_ray(x, y);
            if layouts.iter().any(|l| ray_hits_box(&o, &d, l)) {
                let i = (y * cam.width + x) * 3;
                img.data[i..i + 3].fill(1.0);
            }
        }
    }
    img
}
