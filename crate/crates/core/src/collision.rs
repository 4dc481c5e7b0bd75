//! Hinge penalty keeping neighboring teeth apart, measured on Gaussian
//! centers against each tooth's centroid and intravariance radius.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gsplat::SceneGaussians;
use crate::jawgraph::ToothId;

#[derive(Debug, Error, PartialEq)]
pub enum CollisionError {
    #[error("point set is empty")]
    Empty,
}

pub fn centroid(points: &[Point3<f64>]) -> Result<Point3<f64>, CollisionError> {
    if points.is_empty() {
        return Err(CollisionError::Empty);
    }
    let sum = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords);
    Ok(Point3::from(sum / points.len() as f64))
}

/// Mean distance of the points to their centroid.
pub fn intravariance(points: &[Point3<f64>]) -> Result<f64, CollisionError> {
    let m = centroid(points)?;
    Ok(points.iter().map(|p| (p - m).norm()).sum::<f64>() / points.len() as f64)
}

/// `sum over neighbor points q of max(0, R - |q - m|)` where `m` and `R` are
/// the anchor's centroid and intravariance. Absent neighbors contribute 0, as
/// does an empty anchor.
pub fn collision_loss(
    anchor: &[Point3<f64>],
    left: Option<&[Point3<f64>]>,
    right: Option<&[Point3<f64>]>,
) -> f64 {
    let (Ok(m), Ok(r)) = (centroid(anchor), intravariance(anchor)) else {
        return 0.0;
    };
    [left, right]
        .into_iter()
        .flatten()
        .flat_map(|pts| pts.iter())
        .map(|q| (r - (q - m).norm()).max(0.0))
        .sum()
}

/// Gradients of [`collision_loss`] with respect to every point.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionGrad {
    pub anchor: Vec<Vector3<f64>>,
    pub left: Vec<Vector3<f64>>,
    pub right: Vec<Vector3<f64>>,
}

fn unit_or_zero(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

/// Exact gradient of [`collision_loss`]. A hinge sitting exactly at its kink
/// (distance equal to the radius) is treated as inactive.
pub fn collision_grad(
    anchor: &[Point3<f64>],
    left: Option<&[Point3<f64>]>,
    right: Option<&[Point3<f64>]>,
) -> CollisionGrad {
    let mut out = CollisionGrad {
        anchor: vec![Vector3::zeros(); anchor.len()],
        left: vec![Vector3::zeros(); left.map_or(0, <[_]>::len)],
        right: vec![Vector3::zeros(); right.map_or(0, <[_]>::len)],
    };
    let (Ok(m), Ok(r)) = (centroid(anchor), intravariance(anchor)) else {
        return out;
    };
    let k = anchor.len() as f64;

    let mut n_active = 0usize;
    // sum over active hinges of the unit vector from m to q
    let mut pull = Vector3::zeros();
    for (pts, grads) in [(left, &mut out.left), (right, &mut out.right)] {
        let Some(pts) = pts else { continue };
        for (q, g) in pts.iter().zip(grads.iter_mut()) {
            let d = q - m;
            if r - d.norm() > 0.0 {
                let u = unit_or_zero(d);
                *g = -u;
                pull += u;
                n_active += 1;
            }
        }
    }
    if n_active == 0 {
        return out;
    }

    let units: Vec<Vector3<f64>> = anchor.iter().map(|a| unit_or_zero(a - m)).collect();
    let unit_sum = units.iter().fold(Vector3::zeros(), |s, u| s + u);
    for (g, u) in out.anchor.iter_mut().zip(&units) {
        let d_r = u / k - unit_sum / (k * k);
        *g = d_r * n_active as f64 + pull / k;
    }
    out
}

/// Teeth of the scene sorted along the arch; consecutive entries are
/// neighbors.
pub fn arch_sequence(scene: &SceneGaussians) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scene.teeth.len()).collect();
    idx.sort_by_key(|&i| (scene.teeth[i].tooth_id.arch_rank(), scene.teeth[i].tooth_id));
    idx
}

/// Collision loss of every anchor tooth with its arch neighbors, and the
/// gradient of their sum with respect to every Gaussian center, indexed like
/// `scene.teeth`.
pub fn scene_collision(scene: &SceneGaussians) -> (Vec<f64>, Vec<Vec<Vector3<f64>>>) {
    let centers: Vec<Vec<Point3<f64>>> = scene.teeth.iter().map(|t| t.centers()).collect();
    let order = arch_sequence(scene);
    let mut losses = vec![0.0; scene.teeth.len()];
    let mut grads: Vec<Vec<Vector3<f64>>> =
        centers.iter().map(|c| vec![Vector3::zeros(); c.len()]).collect();
    for (pos, &i) in order.iter().enumerate() {
        let left = pos.checked_sub(1).map(|p| order[p]);
        let right = order.get(pos + 1).copied();
        let l = left.map(|j| centers[j].as_slice());
        let r = right.map(|j| centers[j].as_slice());
        losses[i] = collision_loss(&centers[i], l, r);
        if losses[i] == 0.0 {
            continue;
        }
        let g = collision_grad(&centers[i], l, r);
        for (dst, src) in [(Some(i), &g.anchor), (left, &g.left), (right, &g.right)] {
            if let Some(j) = dst {
                for (a, b) in grads[j].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
    (losses, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPenetration {
    pub a: ToothId,
    pub b: ToothId,
    pub depth_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub pairs: Vec<PairPenetration>,
    /// Collision loss with each tooth as the anchor, in scene order.
    pub per_tooth: Vec<(ToothId, f64)>,
    pub total_loss: f64,
    /// Mean pair depth; 0 when the scene has fewer than two teeth.
    pub pd_mm: f64,
}

/// Deepest hinge violation of `points` against the ball of radius `R`
/// around the anchor's centroid.
fn depth_into(anchor: &[Point3<f64>], points: &[Point3<f64>]) -> f64 {
    let (Ok(m), Ok(r)) = (centroid(anchor), intravariance(anchor)) else {
        return 0.0;
    };
    points
        .iter()
        .map(|q| (r - (q - m).norm()).max(0.0))
        .fold(0.0, f64::max)
}

pub fn penetration_distance(scene: &SceneGaussians) -> CollisionReport {
    let centers: Vec<Vec<Point3<f64>>> = scene.teeth.iter().map(|t| t.centers()).collect();
    let order = arch_sequence(scene);
    let pairs: Vec<PairPenetration> = order
        .windows(2)
        .map(|w| {
            let (i, j) = (w[0], w[1]);
            PairPenetration {
                a: scene.teeth[i].tooth_id,
                b: scene.teeth[j].tooth_id,
                depth_mm: depth_into(&centers[i], &centers[j]).max(depth_into(&centers[j], &centers[i])),
            }
        })
        .collect();
    let (losses, _) = scene_collision(scene);
    let pd_mm = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.depth_mm).sum::<f64>() / pairs.len() as f64
    };
    CollisionReport {
        per_tooth: scene.teeth.iter().map(|t| t.tooth_id).zip(losses.iter().copied()).collect(),
        total_loss: losses.iter().sum(),
        pairs,
        pd_mm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::{Gaussian3D, ToothGaussians};
    use crate::jawgraph::ToothLayout;

    fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    fn tooth(id: u8, pts: &[Point3<f64>]) -> ToothGaussians {
        ToothGaussians {
            tooth_id: ToothId(id),
            layout: ToothLayout::from_array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]),
            gaussians: pts.iter().map(|q| Gaussian3D::isotropic(q.coords, 0.1)).collect(),
        }
    }

    #[test]
    fn centroid_and_radius() {
        let pts = [p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)];
        assert_eq!(centroid(&pts).unwrap(), p(1.0, 0.0, 0.0));
        assert_eq!(intravariance(&pts).unwrap(), 1.0);
        assert_eq!(centroid(&[p(3.0, 4.0, 5.0)]).unwrap(), p(3.0, 4.0, 5.0));
        assert_eq!(intravariance(&[p(1.0, 1.0, 1.0); 4]).unwrap(), 0.0);
        assert_eq!(centroid(&[]), Err(CollisionError::Empty));
        assert_eq!(intravariance(&[]), Err(CollisionError::Empty));
    }

    #[test]
    fn hand_case() {
        let anchor = [p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)];
        let nb = [p(1.5, 0.0, 0.0)];
        assert!((collision_loss(&anchor, None, Some(&nb)) - 0.5).abs() < 1e-12);
        assert_eq!(collision_loss(&anchor, None, Some(&[p(2.0, 0.0, 0.0)])), 0.0);
        assert_eq!(collision_loss(&anchor, None, Some(&[p(1.0, 0.0, 0.0)])), 1.0);
        let g = collision_grad(&anchor, None, Some(&nb));
        assert_eq!(g.right[0], Vector3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn kink_takes_zero_branch() {
        let anchor = [p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)];
        let g = collision_grad(&anchor, Some(&[p(1.0, 1.0, 0.0)]), None);
        assert!(g.left[0] == Vector3::zeros() && g.anchor.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn penetration_hand_case() {
        let scene = SceneGaussians::new(vec![
            tooth(11, &[p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]),
            tooth(12, &[p(1.5, 0.0, 0.0)]),
        ]);
        let r = penetration_distance(&scene);
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pd_mm - 0.5).abs() < 1e-12);
        let swapped = SceneGaussians::new(vec![scene.teeth[1].clone(), scene.teeth[0].clone()]);
        assert_eq!(penetration_distance(&swapped).pd_mm, r.pd_mm);
        assert!((r.total_loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separated_teeth_have_no_penetration() {
        let scene = SceneGaussians::new(vec![
            tooth(11, &[p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]),
            tooth(21, &[p(-5.0, 0.0, 0.0), p(-7.0, 0.0, 0.0)]),
            tooth(12, &[p(6.0, 0.0, 0.0), p(7.0, 1.0, 0.0)]),
        ]);
        let r = penetration_distance(&scene);
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.pd_mm, 0.0);
        assert_eq!(r.total_loss, 0.0);
        // arch order is 12, 11, 21
        assert_eq!((r.pairs[0].a, r.pairs[0].b), (ToothId(12), ToothId(11)));
    }

    #[test]
    fn scene_gradient_sums_anchor_terms() {
        let a = [p(0.0, 0.0, 0.0), p(2.0, 0.3, 0.0), p(1.0, -0.5, 0.4)];
        let b = [p(1.6, 0.1, 0.0), p(2.5, 0.0, 0.2)];
        let scene = SceneGaussians::new(vec![tooth(11, &a), tooth(12, &b)]);
        let (losses, grads) = scene_collision(&scene);
        let ga = collision_grad(&a, None, Some(&b));
        let gb = collision_grad(&b, Some(&a), None);
        assert_eq!(losses[0], collision_loss(&a, None, Some(&b)));
        for i in 0..3 {
            assert!((grads[0][i] - ga.anchor[i] - gb.left[i]).norm() < 1e-15);
        }
        for i in 0..2 {
            assert!((grads[1][i] - ga.right[i] - gb.anchor[i]).norm() < 1e-15);
        }
    }
}
