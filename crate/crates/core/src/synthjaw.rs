//! Procedural ground-truth jaws: tooth boxes placed along a symmetric arch
//! curve, plus superellipsoid point samples per tooth.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gsplat::{matrix_to_quat, Gaussian3D, SceneGaussians, ToothGaussians, SH_C0};

use crate::jawgraph::{
    wrap_angle, JawGraph, JawGraphError, JawSide, ToothId, ToothLayout, ToothNode, FEATURE_DIM,
};

/// Largest number of teeth [`mask_missing`] will withhold at once.
pub const MAX_MISSING: usize = 4;

/// Exponent of the superellipsoid used as the tooth proxy shape.
pub const SUPERELLIPSOID_EXPONENT: f64 = 0.8;

/// Teeth per generated jaw: positions 1..=7 in both quadrants.
pub const TEETH_PER_JAW: usize = 14;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid arch parameters: {0}")]
    InvalidParams(String),
    #[error("cannot place tooth {tooth}: {reason}")]
    Placement { tooth: ToothId, reason: String },
    #[error("tooth {0} is not in the jaw")]
    UnknownTooth(ToothId),
    #[error("tooth {0} is already missing")]
    AlreadyMissing(ToothId),
    #[error("at most {MAX_MISSING} missing teeth supported (requested {0})")]
    TooManyMissing(usize),
    #[error(transparent)]
    Graph(#[from] JawGraphError),
}

/// Mean and standard deviation of the (h, w, l) box extents of one tooth
/// position, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtentPrior {
    pub mean: [f64; 3],
    pub sigma: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub jaw_side: JawSide,
    /// Width of the arch curve between its two `|x| = arch_width / 2` points, mm.
    pub arch_width: f64,
    /// Depth of the curve at `|x| = arch_width / 2`, mm.
    pub arch_depth: f64,
    pub curvature: f64,
    /// Extent priors indexed by FDI position (1..=7), shared by both sides.
    pub extent_priors: [ExtentPrior; 7],
    /// Independent left/right perturbation of extents, mm.
    pub side_jitter: f64,
    pub position_jitter: f64,
    pub angle_jitter: f64,
    /// Minimum clearance between arch-adjacent boxes, mm.
    pub min_gap: f64,
}

impl ArchParams {
    pub fn default_for(side: JawSide) -> Self {
        let prior = |h: f64, w: f64, l: f64| ExtentPrior {
            mean: [h, w, l],
            sigma: [0.3, 0.3, 0.3],
        };
        let (arch_width, arch_depth, extent_priors) = match side {
            JawSide::Upper => (
                52.0,
                28.0,
                [
                    prior(10.0, 8.5, 7.0),
                    prior(9.0, 6.5, 6.0),
                    prior(10.0, 7.5, 8.0),
                    prior(8.5, 7.0, 9.0),
                    prior(8.0, 6.5, 9.0),
                    prior(7.5, 10.0, 11.0),
                    prior(7.0, 9.0, 10.5),
                ],
            ),
            JawSide::Lower => (
                46.0,
                24.0,
                [
                    prior(9.0, 5.5, 6.0),
                    prior(9.5, 6.0, 6.5),
                    prior(10.5, 7.0, 7.5),
                    prior(8.5, 7.0, 7.5),
                    prior(8.0, 7.0, 8.0),
                    prior(7.5, 11.0, 10.5),
                    prior(7.0, 10.5, 10.0),
                ],
            ),
        };
        ArchParams {
            jaw_side: side,
            arch_width,
            arch_depth,
            curvature: 2.0,
            extent_priors,
            side_jitter: 0.1,
            position_jitter: 0.1,
            angle_jitter: 0.02,
            min_gap: 0.1,
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
        if !(self.arch_width > 0.0 && self.arch_depth > 0.0) {
            return bad("arch_width and arch_depth must be positive");
        }
        if !(self.curvature >= 1.0) {
            return bad("curvature exponent must be >= 1");
        }
        if self
            .extent_priors
            .iter()
            .any(|p| p.sigma.iter().any(|s| !(*s >= 0.0)))
            || !(self.side_jitter >= 0.0 && self.position_jitter >= 0.0 && self.angle_jitter >= 0.0)
        {
            return bad("standard deviations must be non-negative");
        }
        if !(self.min_gap >= 0.0) {
            return bad("min_gap must be non-negative");
        }
        Ok(())
    }
}

impl Default for ArchParams {
    fn default() -> Self {
        ArchParams::default_for(JawSide::Upper)
    }
}

/// Arc-length parametrized half arch (x >= 0).
struct ArchCurve {
    half_width: f64,
    depth: f64,
    curvature: f64,
    xs: Vec<f64>,
    arc: Vec<f64>,
}

impl ArchCurve {
    const SAMPLES: usize = 8192;

    fn new(p: &ArchParams) -> Self {
        let half_width = p.arch_width / 2.0;
        let x_max = 3.0 * half_width;
        let mut c = ArchCurve {
            half_width,
            depth: p.arch_depth,
            curvature: p.curvature,
            xs: Vec::with_capacity(Self::SAMPLES + 1),
            arc: Vec::with_capacity(Self::SAMPLES + 1),
        };
        let dx = x_max / Self::SAMPLES as f64;
        let mut s = 0.0;
        c.xs.push(0.0);
        c.arc.push(0.0);
        for i in 1..=Self::SAMPLES {
            let (x0, x1) = ((i - 1) as f64 * dx, i as f64 * dx);
            let xm = 0.5 * (x0 + x1);
            // Simpson on |r'(x)|
            let speed = |x: f64| (1.0 + c.slope(x).powi(2)).sqrt();
            s += dx / 6.0 * (speed(x0) + 4.0 * speed(xm) + speed(x1));
            c.xs.push(x1);
            c.arc.push(s);
        }
        c
    }

    fn y(&self, x: f64) -> f64 {
        -self.depth * (x / self.half_width).powf(self.curvature)
    }

    fn slope(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        -self.depth * self.curvature / self.half_width
            * (x / self.half_width).powf(self.curvature - 1.0)
    }

    fn x_at(&self, s: f64) -> Option<f64> {
        if s < 0.0 || s > *self.arc.last().unwrap() {
            return None;
        }
        let i = self.arc.partition_point(|&a| a < s).max(1);
        let t = (s - self.arc[i - 1]) / (self.arc[i] - self.arc[i - 1]);
        Some(self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1]))
    }
}

struct Jitter {
    along: f64,
    normal: f64,
    dz: f64,
    dk: f64,
    dr: f64,
}

/// Samples a complete 14-tooth jaw. Deterministic for a fixed seed.
pub fn sample_jaw(params: &ArchParams, seed: u64) -> Result<JawGraph, SynthError> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };

    // Per-position extents, then independent left/right perturbations.
    let mut base = [[0.0; 3]; 7];
    for (p, prior) in params.extent_priors.iter().enumerate() {
        for c in 0..3 {
            base[p][c] = prior.mean[c] + prior.sigma[c] * normal();
        }
    }
    let mut extents = [[[0.0; 3]; 7]; 2];
    for side in &mut extents {
        for p in 0..7 {
            for c in 0..3 {
                side[p][c] = base[p][c] + params.side_jitter * normal();
            }
        }
    }
    for side in &extents {
        for (p, e) in side.iter().enumerate() {
            if e.iter().any(|&v| !(v > 0.5)) {
                return Err(SynthError::InvalidParams(format!(
                    "extent prior for position {} produced a non-positive box ({:.3}, {:.3}, {:.3})",
                    p + 1,
                    e[0],
                    e[1],
                    e[2]
                )));
            }
        }
    }
    let mut jitter = Vec::with_capacity(TEETH_PER_JAW);
    for _ in 0..TEETH_PER_JAW {
        jitter.push(Jitter {
            along: params.position_jitter * normal(),
            normal: params.position_jitter * normal(),
            dz: params.position_jitter * normal(),
            dk: params.angle_jitter * normal(),
            dr: params.angle_jitter * normal(),
        });
    }

    let curve = ArchCurve::new(params);
    let (right_q, left_q) = match params.jaw_side {
        JawSide::Upper => (1u8, 2u8),
        JawSide::Lower => (4u8, 3u8),
    };

    // Both halves are laid out on x >= 0; the right half is then mirrored.
    let mut central_offset = 0.0;
    let (right, left) = loop {
        let right = place_half(params, &curve, &extents[0], &jitter[..7], right_q, central_offset)?;
        let left = place_half(params, &curve, &extents[1], &jitter[7..], left_q, central_offset)?;
        let right: Vec<ToothLayout> = right.into_iter().map(mirror_layout).collect();
        if !boxes_overlap(&right[0], &left[0], params.min_gap / 2.0) {
            break (right, left);
        }
        central_offset += 0.02;
        if central_offset > 20.0 {
            return Err(SynthError::Placement {
                tooth: ToothId(right_q * 10 + 1),
                reason: "central incisors cannot be separated".into(),
            });
        }
    };

    let mut nodes = Vec::with_capacity(TEETH_PER_JAW);
    for (p, layout) in right.iter().enumerate().rev() {
        nodes.push(ToothNode::present(ToothId(right_q * 10 + p as u8 + 1), *layout));
    }
    for (p, layout) in left.iter().enumerate() {
        nodes.push(ToothNode::present(ToothId(left_q * 10 + p as u8 + 1), *layout));
    }
    Ok(JawGraph::new(params.jaw_side, nodes)?)
}

fn mirror_layout(l: ToothLayout) -> ToothLayout {
    ToothLayout {
        x: -l.x,
        k: wrap_angle(-l.k),
        ..l
    }
}

fn place_half(
    params: &ArchParams,
    curve: &ArchCurve,
    extents: &[[f64; 3]; 7],
    jitter: &[Jitter],
    quadrant: u8,
    central_offset: f64,
) -> Result<Vec<ToothLayout>, SynthError> {
    const STEP: f64 = 0.02;
    const MAX_STEPS: usize = 5000;
    let mut out: Vec<ToothLayout> = Vec::with_capacity(7);
    let mut s_prev_end = params.min_gap / 2.0 + central_offset;
    for p in 0..7 {
        let [h, w, l] = extents[p];
        let tooth = ToothId(quadrant * 10 + p as u8 + 1);
        let j = &jitter[p];
        let mut s = s_prev_end + w / 2.0 + if p == 0 { 0.0 } else { params.min_gap };
        let mut placed = None;
        for _ in 0..MAX_STEPS {
            let x = curve.x_at(s + j.along).ok_or_else(|| SynthError::Placement {
                tooth,
                reason: "teeth run past the end of the arch curve".into(),
            })?;
            let theta = curve.slope(x).atan();
            let (sin, cos) = theta.sin_cos();
            // Outward normal of the arch (towards the cheek) for x >= 0.
            let n = Vector3::new(-sin, cos, 0.0);
            let pos = Vector3::new(x, curve.y(x), 0.0) + n * j.normal;
            let cand = ToothLayout {
                x: pos.x,
                y: pos.y,
                z: j.dz,
                h,
                w,
                l,
                k: wrap_angle(theta + j.dk),
                r: wrap_angle(j.dr),
            };
            let clear = match out.last() {
                Some(prev) => !boxes_overlap(prev, &cand, params.min_gap / 2.0),
                None => true,
            };
            if clear {
                placed = Some((cand, s));
                break;
            }
            s += STEP;
        }
        let (layout, s_center) = placed.ok_or_else(|| SynthError::Placement {
            tooth,
            reason: format!("no clearance of {} mm within the search range", params.min_gap),
        })?;
        out.push(layout);
        s_prev_end = s_center + w / 2.0;
    }
    Ok(out)
}

fn box_axes(l: &ToothLayout) -> Matrix3<f64> {
    l.rotation()
}

/// Separating-axis test for two oriented boxes, each grown by `inflate` on
/// every face.
pub fn boxes_overlap(a: &ToothLayout, b: &ToothLayout, inflate: f64) -> bool {
    let ra = box_axes(a);
    let rb = box_axes(b);
    let ha = a.half_extents().add_scalar(inflate);
    let hb = b.half_extents().add_scalar(inflate);
    let d = b.center() - a.center();
    let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(15);
    for i in 0..3 {
        axes.push(ra.column(i).into_owned());
        axes.push(rb.column(i).into_owned());
    }
    for i in 0..3 {
        for j in 0..3 {
            let c = ra.column(i).cross(&rb.column(j));
            if c.norm_squared() > 1e-12 {
                axes.push(c.normalize());
            }
        }
    }
    for axis in axes {
        let pa: f64 = (0..3).map(|i| ha[i] * ra.column(i).dot(&axis).abs()).sum();
        let pb: f64 = (0..3).map(|i| hb[i] * rb.column(i).dot(&axis).abs()).sum();
        if d.dot(&axis).abs() > pa + pb {
            return false;
        }
    }
    true
}

/// Marks the given teeth missing and returns the withheld layouts.
pub fn mask_missing(
    graph: &JawGraph,
    tooth_ids: &[ToothId],
) -> Result<(JawGraph, BTreeMap<ToothId, ToothLayout>), SynthError> {
    if tooth_ids.len() > MAX_MISSING {
        return Err(SynthError::TooManyMissing(tooth_ids.len()));
    }
    let mut out = graph.clone();
    let mut truth = BTreeMap::new();
    for &id in tooth_ids {
        let i = out.find(id).ok_or(SynthError::UnknownTooth(id))?;
        let node = &mut out.nodes[i];
        let layout = node.layout.take().ok_or(SynthError::AlreadyMissing(id))?;
        node.missing = true;
        node.features = vec![0.0; FEATURE_DIM];
        truth.insert(id, layout);
    }
    Ok((out, truth))
}

/// Samples `n` points uniformly from the superellipsoid inscribed in the
/// layout box. A single-point sample is the tooth center.
pub fn sample_tooth_points(
    layout: &ToothLayout,
    category: ToothId,
    n: usize,
    seed: u64,
) -> Vec<Point3<f64>> {
    if n == 1 {
        return vec![layout.center()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(category.0) << 48));
    let half = layout.half_extents();
    let e = 2.0 / SUPERELLIPSOID_EXPONENT;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if u.iter().map(|c: &f64| c.abs().powf(e)).sum::<f64>() <= 1.0 {
            out.push(layout.to_world(u.component_mul(&half)));
        }
    }
    out
}

/// Point samples for every tooth of a complete jaw, keyed by tooth id.
pub fn sample_jaw_points(
    graph: &JawGraph,
    n: usize,
    seed: u64,
) -> BTreeMap<ToothId, Vec<Point3<f64>>> {
    graph
        .nodes
        .iter()
        .filter_map(|node| {
            node.layout
                .map(|l| (node.tooth_id, sample_tooth_points(&l, node.tooth_id, n, seed)))
        })
        .collect()
}

/// Base color of a synthetic tooth: ivory, darkening slightly towards the
/// molars so that neighbors are distinguishable in renders.
pub fn tooth_shade(id: ToothId) -> [f64; 3] {
    let p = f64::from(id.position().clamp(1, 8) - 1) / 7.0;
    let f = 1.0 - 0.25 * p;
    [0.86 * f, 0.80 * f, 0.64 * f]
}

/// Ground-truth Gaussians of one tooth: `n` opaque ellipsoids at uniform
/// samples of the tooth volume, aligned with the layout box and colored
/// with [`tooth_shade`].
pub fn truth_tooth(layout: &ToothLayout, id: ToothId, n: usize, seed: u64) -> ToothGaussians {
    let n = n.max(1);
    let points = sample_tooth_points(layout, id, n, seed);
    let half = layout.half_extents();
    // cover the volume with roughly one Gaussian per cell
    let cell = 0.9 / (n as f64).cbrt();
    let log_scale = (half * cell).map(|v| v.max(1e-3).ln());
    let rotation = matrix_to_quat(&layout.rotation());
    let color = Vector3::from(tooth_shade(id).map(|c| (c - 0.5) / SH_C0));
    let gaussians = points
        .into_iter()
        .map(|p| Gaussian3D {
            center: p.coords,
            log_scale,
            rotation,
            opacity_logit: 3.0,
            color,
        })
        .collect();
    ToothGaussians {
        tooth_id: id,
        layout: *layout,
        gaussians,
    }
}

/// Ground-truth Gaussians for every tooth of `graph` that has a layout.
pub fn truth_scene(graph: &JawGraph, n_per_tooth: usize, seed: u64) -> SceneGaussians {
    SceneGaussians::new(
        graph
            .nodes
            .iter()
            .filter_map(|node| {
                node.layout
                    .map(|l| truth_tooth(&l, node.tooth_id, n_per_tooth, seed))
            })
            .collect(),
    )
}
