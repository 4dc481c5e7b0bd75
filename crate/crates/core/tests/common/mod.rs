//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use dentoforge::gsplat::{render_scene, Camera, Gaussian3D, Image, ParamGroup, SceneGaussians, ToothGaussians};
use dentoforge::jawgraph::{ToothId, ToothLayout};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Projection written out from first principles: camera-space mean, the
/// perspective Jacobian, and the 0.3 px^2 dilation.
fn oracle_project(g: &Gaussian3D, cam: &Camera) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let t = cam.rotation * g.center + cam.translation;
    if t.z <= 0.01 {
        return None;
    }
    let [w, x, y, z] = {
        let q = g.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    };
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    let s = Matrix3::from_diagonal(&g.log_scale.map(|v| (2.0 * v).exp()));
    let sigma = r * s * r.transpose();
    let j = nalgebra::Matrix2x3::new(
        cam.fx / t.z,
        0.0,
        -cam.fx * t.x / (t.z * t.z),
        0.0,
        cam.fy / t.z,
        -cam.fy * t.y / (t.z * t.z),
    );
    let jw = j * cam.rotation;
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * 0.3;
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    Some((mean, cov, t.z))
}

/// Per-pixel compositor: every Gaussian is tested at every pixel, sorted by
/// (depth, global index) with a full sort, no tiling.
pub fn brute_force_render(scene: &SceneGaussians, cam: &Camera, bg: Vector3<f64>) -> (Image, Vec<f64>) {
    let mut splats = Vec::new();
    let mut global = 0usize;
    for t in &scene.teeth {
        for g in &t.gaussians {
            if let Some((mean, cov, depth)) = oracle_project(g, cam) {
                let inv = cov.try_inverse().unwrap();
                let o = 1.0 / (1.0 + (-g.opacity_logit).exp());
                let c = g.color.map(|v| (0.5 + 0.282_094_791_773_878_14 * v).clamp(0.0, 1.0));
                splats.push((depth, global, mean, inv, o, c));
            }
            global += 1;
        }
    }
    splats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut img = Image::new(cam.width, cam.height);
    let mut trans = vec![0.0; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            for (_, _, mean, inv, o, col) in &splats {
                let d = p - mean;
                let m = (d.transpose() * inv * d)[0];
                if m > 9.0 {
                    continue;
                }
                let a = o * (-0.5 * m).exp();
                c += col * (a * t);
                t *= 1.0 - a;
                if t < 1e-4 {
                    break;
                }
            }
            c += bg * t;
            let i = (y * cam.width + x) * 3;
            img.data[i..i + 3].copy_from_slice(c.as_slice());
            trans[y * cam.width + x] = t;
        }
    }
    (img, trans)
}

fn unit_layout() -> ToothLayout {
    ToothLayout::from_array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
}

/// Random anisotropic Gaussians spread over a few teeth in front of a camera
/// looking at the origin from -y.
pub fn random_scene(seed: u64, n: usize) -> SceneGaussians {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_teeth = rng.random_range(1..=3usize).min(n.max(1));
    let mut teeth: Vec<ToothGaussians> = (0..n_teeth)
        .map(|i| ToothGaussians {
            tooth_id: ToothId(11 + i as u8),
            layout: unit_layout(),
            gaussians: Vec::new(),
        })
        .collect();
    for i in 0..n {
        let g = Gaussian3D {
            center: Vector3::new(
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.5..2.5),
            ),
            log_scale: Vector3::new(
                rng.random_range(-1.3..-0.2),
                rng.random_range(-1.3..-0.2),
                rng.random_range(-1.3..-0.2),
            ),
            rotation: [
                rng.random_range(0.2..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            opacity_logit: rng.random_range(-2.0..2.0),
            color: Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            ),
        };
        teeth[i % n_teeth].gaussians.push(g);
    }
    teeth.retain(|t| !t.gaussians.is_empty());
    SceneGaussians::new(teeth)
}

pub fn test_camera(size: usize) -> Camera {
    dentoforge::gsplat::look_at(
        nalgebra::Point3::new(0.3, -12.0, 0.8),
        nalgebra::Point3::origin(),
        Vector3::z(),
        size as f64 * 1.6,
        size,
        size,
    )
}

/// Loss `sum(weights * image)`; returns the value and the pixel coverage
/// counts so finite differences across a footprint edge can be detected.
fn weighted(scene: &SceneGaussians, weights: &[f64]) -> (f64, Vec<u32>) {
    let f = render_scene(scene, &test_camera(24), Vector3::new(1.0, 1.0, 1.0)).unwrap();
    let v = f.image.data.iter().zip(weights).map(|(a, b)| a * b).sum();
    (v, f.n_contrib)
}

/// Central differences (step 1e-4 in parameter space) against the analytic
/// backward pass, grouped by parameter kind. Coordinates whose perturbation
/// changes which Gaussians reach some pixel sit on a footprint discontinuity
/// and are skipped. Returns the worst per-group relative error.
pub fn gradient_check(seed: u64) -> [f64; 5] {
    let scene = random_scene(seed, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let weights: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cam = test_camera(24);
    let frame = render_scene(&scene, &cam, Vector3::new(1.0, 1.0, 1.0)).unwrap();
    let grads = frame.backward(&scene.refs(), &weights).unwrap();
    let h = 1e-4;
    let mut num = [0.0; 5];
    let mut den = [0.0; 5];
    let mut used = 0;
    let mut total = 0;
    for (ti, t) in scene.teeth.iter().enumerate() {
        for (gi, g) in t.gaussians.iter().enumerate() {
            for (k, group) in ParamGroup::ALL.iter().enumerate() {
                for p in group.range() {
                    total += 1;
                    let eval = |delta: f64| {
                        let mut s = scene.clone();
                        let mut params = g.to_params();
                        params[p] += delta;
                        s.teeth[ti].gaussians[gi] = Gaussian3D::from_params(&params);
                        weighted(&s, &weights)
                    };
                    let (fp, cp) = eval(h);
                    let (fm, cm) = eval(-h);
                    if cp != frame.n_contrib || cm != frame.n_contrib {
                        continue;
                    }
                    used += 1;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads[ti][gi][p];
                    num[k] += (fd - an).powi(2);
                    den[k] += fd.powi(2).max(an.powi(2));
                }
            }
        }
    }
    assert!(used * 10 >= total * 8, "only {used}/{total} coordinates were smooth");
    let mut out = [0.0; 5];
    for k in 0..5 {
        out[k] = if den[k] > 0.0 { (num[k] / den[k]).sqrt() } else { 0.0 };
    }
    out
}


/// Three overlapping point clouds (left, anchor, right) along the x axis.
pub fn random_triplet(seed: u64) -> [Vec<nalgebra::Point3<f64>>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |cx: f64, n: usize| -> Vec<nalgebra::Point3<f64>> {
        (0..n)
            .map(|_| {
                nalgebra::Point3::new(
                    cx + rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    };
    let a = cloud(-2.0, 9);
    let b = cloud(0.0, 12);
    let c = cloud(2.0, 7);
    [a, b, c]
}

/// Worst relative error of the analytic collision gradient against central
/// differences with step `h`, skipping coordinates whose perturbation
/// flips a hinge. Returns `(error, coordinates checked)`.
pub fn collision_gradient_error(seed: u64, h: f64) -> (f64, usize) {
    use dentoforge::collision::{centroid, collision_grad, collision_loss, intravariance};
    let [l, a, r] = random_triplet(seed);
    let active = |l: &[nalgebra::Point3<f64>], a: &[nalgebra::Point3<f64>], r: &[nalgebra::Point3<f64>]| {
        let m = centroid(a).unwrap();
        let rad = intravariance(a).unwrap();
        l.iter().chain(r).map(|q| rad - (q - m).norm() > 0.0).collect::<Vec<_>>()
    };
    let base_active = active(&l, &a, &r);
    let g = collision_grad(&a, Some(&l), Some(&r));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for set in 0..3 {
        let n = [l.len(), a.len(), r.len()][set];
        for i in 0..n {
            for c in 0..3 {
                let eval = |d: f64| {
                    let mut s = [l.clone(), a.clone(), r.clone()];
                    s[set][i][c] += d;
                    (
                        collision_loss(&s[1], Some(&s[0]), Some(&s[2])),
                        active(&s[0], &s[1], &s[2]),
                    )
                };
                let (fp, ap) = eval(h);
                let (fm, am) = eval(-h);
                if ap != base_active || am != base_active {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let an = [&g.left, &g.anchor, &g.right][set][i][c];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Central incisors 11 and 21 of a seeded synthetic upper jaw, each
/// initialized from its layout box moved `shift` mm toward the other, with
/// reference targets rendered from the ground-truth teeth.
pub struct OverlapScenario {
    pub ids: Vec<ToothId>,
    pub scene: SceneGaussians,
    pub truth: SceneGaussians,
    pub scene_cameras: Vec<Camera>,
    pub instance_cameras: std::collections::BTreeMap<ToothId, Vec<Camera>>,
    pub reference: dentoforge::distill::ReferenceScore,
    pub monitor: Vec<Image>,
    pub schedule: dentoforge::layoutdiffusion::NoiseSchedule,
    pub text: dentoforge::layoutdiffusion::TextEmbedding,
}

pub fn overlap_scenario(shift: f64, n: usize, size: usize) -> OverlapScenario {
    use dentoforge::distill::{instance_cameras, ReferenceScore};
    use dentoforge::gsplat::{init_from_layout, orbit_cameras, OrbitSpec};
    use dentoforge::jawgraph::JawSide;
    use dentoforge::layoutdiffusion::{embed_text, make_schedule, ScheduleKind};
    use dentoforge::synthjaw::{sample_jaw, truth_tooth, ArchParams};

    let jaw = sample_jaw(&ArchParams::default_for(JawSide::Upper), 0).unwrap();
    let ids = vec![ToothId(11), ToothId(21)];
    let truth_layouts: Vec<ToothLayout> =
        ids.iter().map(|id| jaw.nodes[jaw.find(*id).unwrap()].layout.unwrap()).collect();
    let truth = SceneGaussians::new(
        ids.iter().zip(&truth_layouts).map(|(id, l)| truth_tooth(l, *id, n, 7)).collect(),
    );
    let d = (truth_layouts[1].center() - truth_layouts[0].center()).normalize() * shift;
    let mut init = truth_layouts.clone();
    init[0].x += d.x;
    init[0].y += d.y;
    init[1].x -= d.x;
    init[1].y -= d.y;
    let scene = SceneGaussians::new(ids.iter().zip(&init).map(|(id, l)| init_from_layout(*id, l, n, 3)).collect());

    let center = nalgebra::Point3::from((init[0].center().coords + init[1].center().coords) / 2.0);
    let spec = OrbitSpec {
        azimuths: 6,
        elevations_deg: vec![-10.0, 20.0],
        radius_factor: 3.0,
        fov_deg: 30.0,
        image_size: size,
    };
    let scene_cameras = orbit_cameras(&spec, center, 10.0);
    let ispec = OrbitSpec { azimuths: 4, ..spec };
    let instance_cameras: std::collections::BTreeMap<ToothId, Vec<Camera>> =
        ids.iter().zip(&init).map(|(id, l)| (*id, instance_cameras(l, &ispec))).collect();
    let reference = ReferenceScore::from_truth(&truth, &scene_cameras, &instance_cameras).unwrap();
    let monitor = reference.scene_targets(scene_cameras.len()).unwrap();
    OverlapScenario {
        ids,
        scene,
        truth,
        scene_cameras,
        instance_cameras,
        reference,
        monitor,
        schedule: make_schedule(1000, ScheduleKind::Cosine).unwrap(),
        text: embed_text("an upper jaw").unwrap(),
    }
}

impl OverlapScenario {
    pub fn inputs(&self) -> dentoforge::distill::OptimizeInputs<'_> {
        dentoforge::distill::OptimizeInputs {
            scene_cameras: &self.scene_cameras,
            instance_cameras: &self.instance_cameras,
            missing: &self.ids,
            scene_text: &self.text,
            scene_provider: &self.reference,
            instance_provider: &self.reference,
            schedule: &self.schedule,
            monitor: Some(&self.monitor),
        }
    }
}
