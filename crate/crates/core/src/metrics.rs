//! Image and point-set metrics.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::penetration_distance;
use crate::gsplat::{render_scene, Camera, Image, RenderError, SceneGaussians};
use crate::jawgraph::ToothId;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Default F-score distance threshold, mm.
pub const DEFAULT_TAU_MM: f64 = 0.3;

/// Above this many points nearest neighbors come from a uniform grid instead
/// of a linear scan. Both are exact.
const BRUTE_FORCE_LIMIT: usize = 100_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("max_val must be positive")]
    BadMaxVal,
    #[error("empty point set")]
    EmptySet,
    #[error("tau must be positive")]
    BadTau,
    #[error("{0} cameras but {1} target images")]
    ViewCount(usize, usize),
    #[error("tooth {0} has ground truth but no prediction")]
    MissingPrediction(ToothId),
    #[error(transparent)]
    Render(#[from] RenderError),
}

pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    if !(max_val > 0.0) {
        return Err(MetricsError::BadMaxVal);
    }
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Exact nearest-neighbor distances from each query to `targets`.
pub fn nearest_distances(queries: &[Point3<f64>], targets: &[Point3<f64>]) -> Vec<f64> {
    if queries.len().max(targets.len()) <= BRUTE_FORCE_LIMIT {
        queries
            .par_iter()
            .map(|q| {
                targets
                    .iter()
                    .map(|t| (q - t).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    } else {
        let grid = Grid::new(targets);
        queries.par_iter().map(|q| grid.nearest(q)).collect()
    }
}

struct Grid<'a> {
    points: &'a [Point3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Point3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        let span = (hi - lo).map(|v| v.max(1e-9));
        let cell = (span.x * span.y * span.z / points.len() as f64).cbrt().max(span.max() / 1024.0);
        let dims = [0, 1, 2].map(|i| ((span[i] / cell).floor() as usize + 1).min(1024));
        let mut grid = Grid {
            points,
            origin: lo,
            cell,
            dims,
            start: vec![0; dims[0] * dims[1] * dims[2] + 1],
            order: Vec::with_capacity(points.len()),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.coords(p))).collect();
        for &k in &keys {
            grid.start[k + 1] += 1;
        }
        for i in 1..grid.start.len() {
            grid.start[i] += grid.start[i - 1];
        }
        let mut fill = grid.start.clone();
        grid.order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            grid.order[fill[k]] = i;
            fill[k] += 1;
        }
        grid
    }

    fn coords(&self, p: &Point3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|i| {
            let c = ((p[i] - self.origin[i]) / self.cell).floor() as i64;
            c.clamp(0, self.dims[i] as i64 - 1)
        })
    }

    fn key(&self, c: [i64; 3]) -> usize {
        (c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0] + c[0] as usize
    }

    fn nearest(&self, q: &Point3<f64>) -> f64 {
        let c = self.coords(q);
        let mut best = f64::INFINITY;
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        for ring in 0..=max_ring {
            // every point in ring r is at least (r - 1) cells away
            let bound = (ring - 1).max(0) as f64 * self.cell;
            if bound * bound > best {
                break;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|i| n[i] < 0 || n[i] >= self.dims[i] as i64) {
                            continue;
                        }
                        let k = self.key(n);
                        for &i in &self.order[self.start[k]..self.start[k + 1]] {
                            best = best.min((self.points[i] - q).norm_squared());
                        }
                    }
                }
            }
        }
        best.sqrt()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric Chamfer distance with unsquared distances, mm.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(0.5 * (mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a))))
}

/// Harmonic mean of precision (share of `a` within `tau` of `b`) and recall
/// (share of `b` within `tau` of `a`).
pub fn fscore(a: &[Point3<f64>], b: &[Point3<f64>], tau: f64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if !(tau > 0.0) {
        return Err(MetricsError::BadTau);
    }
    let share = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let precision = share(nearest_distances(a, b));
    let recall = share(nearest_distances(b, a));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean over views; `None` when no views were given.
    pub psnr_db: Option<f64>,
    pub chamfer_mm: f64,
    pub fscore: f64,
    pub tau_mm: f64,
    pub pd_mm: f64,
}

impl EvalSummary {
    pub fn header() -> String {
        format!("{:>10} {:>12} {:>8} {:>7} {:>8}", "psnr_db", "chamfer_mm", "fscore", "tau_mm", "pd_mm")
    }

    pub fn row(&self) -> String {
        let psnr = self.psnr_db.map_or("-".to_string(), |p| format!("{p:.3}"));
        format!(
            "{:>10} {:>12.4} {:>8.4} {:>7.3} {:>8.4}",
            psnr, self.chamfer_mm, self.fscore, self.tau_mm, self.pd_mm
        )
    }
}

/// Scores a predicted scene. Chamfer distance and F-score compare each
/// ground-truth tooth's points with the Gaussian centers of the same
/// predicted tooth and are averaged over teeth; PSNR is averaged over views
/// rendered against a white background.
pub fn evaluate(
    predicted: &SceneGaussians,
    truth: &[(ToothId, Vec<Point3<f64>>)],
    cameras: &[Camera],
    targets: &[Image],
    tau: f64,
) -> Result<EvalSummary, MetricsError> {
    if cameras.len() != targets.len() {
        return Err(MetricsError::ViewCount(cameras.len(), targets.len()));
    }
    let mut cds = Vec::new();
    let mut fs = Vec::new();
    for (id, pts) in truth {
        let i = predicted.find(*id).ok_or(MetricsError::MissingPrediction(*id))?;
        let centers = predicted.teeth[i].centers();
        cds.push(chamfer(&centers, pts)?);
        fs.push(fscore(&centers, pts, tau)?);
    }
    let mut psnrs = Vec::with_capacity(cameras.len());
    for (cam, target) in cameras.iter().zip(targets) {
        let frame = render_scene(predicted, cam, Vector3::repeat(1.0))?;
        psnrs.push(psnr(&frame.image, target, 1.0)?);
    }
    Ok(EvalSummary {
        psnr_db: (!psnrs.is_empty()).then(|| mean(&psnrs)),
        chamfer_mm: if cds.is_empty() { 0.0 } else { mean(&cds) },
        fscore: if fs.is_empty() { 1.0 } else { mean(&fs) },
        tau_mm: tau,
        pd_mm: penetration_distance(predicted).pd_mm,
    })
}
