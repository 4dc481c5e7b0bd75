use nalgebra::{Matrix3, Vector3};

use super::ToothGaussians;
use crate::jawgraph::{angles_from_rotation, rotation_from_angles, ToothLayout};

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Re-estimates a tooth's layout box from its Gaussians.
///
/// The center is the mean Gaussian center. Orientation comes from the
/// principal axes of the centers, each matched to the nearest axis of the
/// current layout so width, length and height keep their meaning; clouds
/// with fewer than four points or no distinct principal axis keep the
/// current orientation. Extents are the spread of the centers along each
/// box axis plus three median axis scales on either side.
pub fn layout_from_gaussians(tooth: &ToothGaussians) -> ToothLayout {
    let gs = &tooth.gaussians;
    let n = gs.len().max(1) as f64;
    let mean = gs.iter().fold(Vector3::zeros(), |a, g| a + g.center) / n;

    let prior = tooth.layout.rotation();
    let (k, r) = match principal_axes(tooth, &mean) {
        Some(axes) => angles_from_rotation(&match_axes(&prior, &axes)),
        None => (tooth.layout.k, tooth.layout.r),
    };
    let rot = rotation_from_angles(k, r);

    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for g in gs {
        let local = rot.transpose() * (g.center - mean);
        lo = lo.inf(&local);
        hi = hi.sup(&local);
    }
    let mut scales: Vec<f64> = gs.iter().flat_map(|g| g.scales().iter().copied().collect::<Vec<_>>()).collect();
    scales.sort_by(f64::total_cmp);
    let median = if scales.is_empty() {
        0.0
    } else if scales.len() % 2 == 1 {
        scales[scales.len() / 2]
    } else {
        0.5 * (scales[scales.len() / 2 - 1] + scales[scales.len() / 2])
    };
    let ext = (hi - lo).map(|v| if v.is_finite() { v } else { 0.0 }) + Vector3::repeat(6.0 * median);

    ToothLayout {
        x: mean.x,
        y: mean.y,
        z: mean.z,
        w: ext.x,
        l: ext.y,
        h: ext.z,
        k,
        r,
    }
    .wrapped()
}

fn principal_axes(tooth: &ToothGaussians, mean: &Vector3<f64>) -> Option<Matrix3<f64>> {
    if tooth.gaussians.len() < 4 {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for g in &tooth.gaussians {
        let d = g.center - mean;
        cov += d * d.transpose();
    }
    cov /= tooth.gaussians.len() as f64;
    let eig = cov.symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return None;
    }
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    // every eigenvalue repeated: no axis is singled out
    if vals[2] - vals[0] <= 1e-9 * top {
        return None;
    }
    Some(eig.eigenvectors)
}

/// Permutes and flips the columns of `axes` to best align with `prior`,
/// keeping a right-handed frame.
fn match_axes(prior: &Matrix3<f64>, axes: &Matrix3<f64>) -> Matrix3<f64> {
    let dots = prior.transpose() * axes;
    let best = PERMUTATIONS
        .iter()
        .max_by(|a, b| {
            let s = |p: &[usize; 3]| (0..3).map(|i| dots[(i, p[i])].abs()).sum::<f64>();
            s(a).total_cmp(&s(b))
        })
        .unwrap();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let sign = if dots[(i, best[i])] < 0.0 { -1.0 } else { 1.0 };
        out.set_column(i, &(axes.column(best[i]) * sign));
    }
    if out.determinant() < 0.0 {
        let weakest = (0..3)
            .min_by(|&a, &b| dots[(a, best[a])].abs().total_cmp(&dots[(b, best[b])].abs()))
            .unwrap();
        let c = -out.column(weakest);
        out.set_column(weakest, &c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::{init_from_layout, Gaussian3D};
    use crate::jawgraph::ToothId;

    fn layout() -> ToothLayout {
        ToothLayout {
            x: 4.0,
            y: -3.0,
            z: 2.0,
            h: 10.0,
            w: 6.0,
            l: 3.0,
            k: 0.5,
            r: 0.1,
        }
    }

    #[test]
    fn single_gaussian_gives_six_mm_cube() {
        let t = ToothGaussians {
            tooth_id: ToothId(11),
            layout: layout(),
            gaussians: vec![Gaussian3D::isotropic(Vector3::zeros(), 1.0)],
        };
        let l = layout_from_gaussians(&t);
        assert_eq!((l.x, l.y, l.z), (0.0, 0.0, 0.0));
        assert!((l.w - 6.0).abs() < 1e-12 && (l.l - 6.0).abs() < 1e-12 && (l.h - 6.0).abs() < 1e-12);
        assert_eq!((l.k, l.r), (0.5, 0.1));
    }

    #[test]
    fn translation_moves_center_exactly() {
        let t = init_from_layout(ToothId(21), &layout(), 200, 1);
        let a = layout_from_gaussians(&t);
        let mut moved = t.clone();
        let shift = Vector3::new(0.25, -0.5, 1.0);
        for g in &mut moved.gaussians {
            g.center += shift;
        }
        let b = layout_from_gaussians(&moved);
        assert!((b.x - a.x - shift.x).abs() < 1e-12);
        assert!((b.y - a.y - shift.y).abs() < 1e-12);
        assert!((b.z - a.z - shift.z).abs() < 1e-12);
        assert!((b.k - a.k).abs() < 1e-9 && (b.w - a.w).abs() < 1e-9);
    }

    #[test]
    fn duplicated_set_is_identical() {
        let t = init_from_layout(ToothId(21), &layout(), 50, 2);
        let mut d = t.clone();
        d.gaussians.extend(t.gaussians.iter().copied());
        let a = layout_from_gaussians(&t);
        let b = layout_from_gaussians(&d);
        for (u, v) in a.to_array().iter().zip(b.to_array()) {
            assert!((u - v).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn recovers_box_orientation() {
        let l = layout();
        let t = init_from_layout(ToothId(21), &l, 4000, 3);
        let f = layout_from_gaussians(&t);
        assert!((f.k - l.k).abs() < 0.05, "k {}", f.k);
        assert!((f.r - l.r).abs() < 0.05, "r {}", f.r);
        assert!(f.h > f.w && f.w > f.l);
    }
}
