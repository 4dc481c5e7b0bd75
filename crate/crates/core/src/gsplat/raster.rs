use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::project::project_backward;
use super::{project, Camera, GaussianGrad, Image, ProjectedGaussian, RenderError, SceneGaussians, ToothGaussians};

/// Side length of a square screen tile, px.
pub const TILE_SIZE: usize = 16;

/// Compositing along a pixel stops once transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

/// Squared Mahalanobis radius of the 3-sigma ellipse. A Gaussian contributes
/// nothing outside it, which keeps tile binning exact.
const CUTOFF: f64 = 9.0;

#[derive(Debug, Clone)]
struct Splat {
    tooth: usize,
    index: usize,
    proj: ProjectedGaussian,
}

/// Per-pixel weight of a splat. Returns `(alpha, falloff, d)` where
/// `d = pixel - mean` and `alpha = opacity * falloff`.
#[inline]
fn evaluate(p: &ProjectedGaussian, px: f64, py: f64) -> Option<(f64, f64, Vector2<f64>)> {
    let d = Vector2::new(px - p.mean.x, py - p.mean.y);
    let m = d.dot(&(p.conic * d));
    if !(m <= CUTOFF) {
        return None;
    }
    let f = (-0.5 * m).exp();
    Some((p.opacity * f, f, d))
}

/// One Gaussian's share of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub tooth: usize,
    pub index: usize,
    /// `alpha_i * prod_{j<i} (1 - alpha_j)`.
    pub weight: f64,
}

/// Renders scenes from one camera against a fixed background color.
#[derive(Debug, Clone)]
pub struct Rasterizer {
    pub camera: Camera,
    pub background: Vector3<f64>,
}

impl Rasterizer {
    pub fn new(camera: Camera, background: Vector3<f64>) -> Result<Self, RenderError> {
        camera.validate()?;
        Ok(Rasterizer { camera, background })
    }

    pub fn render(&self, teeth: &[&ToothGaussians]) -> Result<Frame, RenderError> {
        let cam = &self.camera;
        let mut splats = Vec::new();
        for (ti, t) in teeth.iter().enumerate() {
            for (gi, g) in t.gaussians.iter().enumerate() {
                if !g.is_finite() {
                    return Err(RenderError::NonFinite {
                        tooth: t.tooth_id,
                        index: gi,
                    });
                }
                if let Some(proj) = project(g, cam) {
                    splats.push(Splat {
                        tooth: ti,
                        index: gi,
                        proj,
                    });
                }
            }
        }
        // splats are already in global index order, so a stable sort by depth
        // gives the index tie-break
        splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth));

        let tiles_x = cam.width.div_ceil(TILE_SIZE);
        let tiles_y = cam.height.div_ceil(TILE_SIZE);
        let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        for (si, s) in splats.iter().enumerate() {
            let ext = s.proj.extent();
            // one pixel of slack against rounding at the ellipse boundary
            let lo_x = s.proj.mean.x - ext.x - 1.0;
            let hi_x = s.proj.mean.x + ext.x + 1.0;
            let lo_y = s.proj.mean.y - ext.y - 1.0;
            let hi_y = s.proj.mean.y + ext.y + 1.0;
            if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x < cam.width as f64 && lo_y < cam.height as f64)
            {
                continue;
            }
            let tx0 = (lo_x.max(0.0) / TILE_SIZE as f64) as usize;
            let ty0 = (lo_y.max(0.0) / TILE_SIZE as f64) as usize;
            let tx1 = ((hi_x / TILE_SIZE as f64) as usize).min(tiles_x - 1);
            let ty1 = ((hi_y / TILE_SIZE as f64) as usize).min(tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(si as u32);
                }
            }
        }

        let bg = self.background;
        let tile_out: Vec<Vec<(usize, [f64; 3], f64, u32)>> = (0..tiles.len())
            .into_par_iter()
            .map(|tile| {
                let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, cam);
                let list = &tiles[tile];
                let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let mut t = 1.0;
                        let mut c = Vector3::zeros();
                        let mut n = 0u32;
                        for &si in list {
                            let s = &splats[si as usize];
                            let Some((a, _, _)) = evaluate(&s.proj, px, py) else {
                                continue;
                            };
                            c += s.proj.rgb * (a * t);
                            t *= 1.0 - a;
                            n += 1;
                            if t < TRANSMITTANCE_EPS {
                                break;
                            }
                        }
                        c += bg * t;
                        out.push((y * cam.width + x, [c.x, c.y, c.z], t, n));
                    }
                }
                out
            })
            .collect();

        let mut image = Image::new(cam.width, cam.height);
        let mut transmittance = vec![1.0; cam.num_pixels()];
        let mut n_contrib = vec![0u32; cam.num_pixels()];
        for px in tile_out.into_iter().flatten() {
            image.data[px.0 * 3..px.0 * 3 + 3].copy_from_slice(&px.1);
            transmittance[px.0] = px.2;
            n_contrib[px.0] = px.3;
        }
        Ok(Frame {
            image,
            transmittance,
            n_contrib,
            camera: cam.clone(),
            background: bg,
            splats,
            tiles,
            tiles_x,
        })
    }
}

fn tile_bounds(tile: usize, tiles_x: usize, cam: &Camera) -> (usize, usize, usize, usize) {
    let x0 = (tile % tiles_x) * TILE_SIZE;
    let y0 = (tile / tiles_x) * TILE_SIZE;
    (
        x0,
        y0,
        (x0 + TILE_SIZE).min(cam.width),
        (y0 + TILE_SIZE).min(cam.height),
    )
}

/// Gradient of a scalar loss with respect to one splat's screen-space
/// quantities: mean (2), conic (4, row-major), opacity (1), rgb (3).
type ScreenGrad = [f64; 10];

/// A rendered view together with what is needed to backpropagate through it.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Image,
    /// Final transmittance per pixel (the background weight).
    pub transmittance: Vec<f64>,
    /// Number of Gaussians composited into each pixel.
    pub n_contrib: Vec<u32>,
    camera: Camera,
    background: Vector3<f64>,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl Frame {
    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Compositing weights of the Gaussians that reach pixel `(x, y)`, front
    /// to back.
    pub fn contributions(&self, x: usize, y: usize) -> Vec<Contribution> {
        let tile = (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut out = Vec::new();
        for &si in &self.tiles[tile] {
            let s = &self.splats[si as usize];
            let Some((a, _, _)) = evaluate(&s.proj, px, py) else {
                continue;
            };
            out.push(Contribution {
                tooth: s.tooth,
                index: s.index,
                weight: a * t,
            });
            t *= 1.0 - a;
            if t < TRANSMITTANCE_EPS {
                break;
            }
        }
        out
    }

    /// Backpropagates `d_image` (dL/d pixel value, same layout as
    /// `image.data`) onto every Gaussian of `teeth`, which must be the scene
    /// this frame was rendered from. Returns one gradient per Gaussian,
    /// grouped per tooth.
    pub fn backward(
        &self,
        teeth: &[&ToothGaussians],
        d_image: &[f64],
    ) -> Result<Vec<Vec<GaussianGrad>>, RenderError> {
        let cam = &self.camera;
        if d_image.len() != self.image.data.len() {
            return Err(RenderError::GradientShape {
                got: d_image.len(),
                expected: self.image.data.len(),
            });
        }
        let bg = self.background;

        let per_tile: Vec<Vec<ScreenGrad>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &self.tiles[tile];
                let mut acc = vec![[0.0; 10]; list.len()];
                if list.is_empty() {
                    return acc;
                }
                let (x0, y0, x1, y1) = tile_bounds(tile, self.tiles_x, cam);
                // (list slot, alpha, falloff, d, T before)
                let mut hits: Vec<(usize, f64, f64, Vector2<f64>, f64)> = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * cam.width + x;
                        let g = Vector3::new(d_image[p * 3], d_image[p * 3 + 1], d_image[p * 3 + 2]);
                        if g == Vector3::zeros() {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        hits.clear();
                        let mut t = 1.0;
                        for (slot, &si) in list.iter().enumerate() {
                            let s = &self.splats[si as usize];
                            let Some((a, f, d)) = evaluate(&s.proj, px, py) else {
                                continue;
                            };
                            hits.push((slot, a, f, d, t));
                            t *= 1.0 - a;
                            if t < TRANSMITTANCE_EPS {
                                break;
                            }
                        }
                        // color of everything behind the current splat
                        let mut behind = bg;
                        for &(slot, a, f, d, t_i) in hits.iter().rev() {
                            let s = &self.splats[list[slot] as usize].proj;
                            let d_alpha = t_i * g.dot(&(s.rgb - behind));
                            behind = s.rgb * a + behind * (1.0 - a);
                            let e = &mut acc[slot];
                            for c in 0..3 {
                                e[7 + c] += a * t_i * g[c];
                            }
                            e[6] += d_alpha * f;
                            // alpha = o exp(-m/2), m = d^T Q d, d = pixel - mean
                            let d_m = -0.5 * a * d_alpha;
                            let qd = (s.conic + s.conic.transpose()) * d;
                            e[0] -= d_m * qd.x;
                            e[1] -= d_m * qd.y;
                            e[2] += d_m * d.x * d.x;
                            e[3] += d_m * d.x * d.y;
                            e[4] += d_m * d.y * d.x;
                            e[5] += d_m * d.y * d.y;
                        }
                    }
                }
                acc
            })
            .collect();

        let mut screen = vec![[0.0; 10]; self.splats.len()];
        for (tile, acc) in per_tile.iter().enumerate() {
            for (slot, e) in acc.iter().enumerate() {
                let dst = &mut screen[self.tiles[tile][slot] as usize];
                for k in 0..10 {
                    dst[k] += e[k];
                }
            }
        }

        let per_splat: Vec<GaussianGrad> = self
            .splats
            .par_iter()
            .zip(screen.par_iter())
            .map(|(s, e)| {
                let g = &teeth[s.tooth].gaussians[s.index];
                project_backward(
                    g,
                    cam,
                    Vector2::new(e[0], e[1]),
                    Matrix2::new(e[2], e[3], e[4], e[5]),
                    e[6],
                    Vector3::new(e[7], e[8], e[9]),
                )
            })
            .collect();

        let mut out: Vec<Vec<GaussianGrad>> = teeth
            .iter()
            .map(|t| vec![[0.0; 14]; t.gaussians.len()])
            .collect();
        for (s, g) in self.splats.iter().zip(per_splat) {
            out[s.tooth][s.index] = g;
        }
        Ok(out)
    }
}

/// Renders a whole scene.
pub fn render_scene(
    scene: &SceneGaussians,
    camera: &Camera,
    background: Vector3<f64>,
) -> Result<Frame, RenderError> {
    Rasterizer::new(camera.clone(), background)?.render(&scene.refs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::{look_at, Gaussian3D};
    use crate::jawgraph::{ToothId, ToothLayout};
    use nalgebra::Point3;

    fn camera(w: usize, h: usize) -> Camera {
        look_at(
            Point3::new(0.0, -20.0, 0.0),
            Point3::origin(),
            Vector3::z(),
            40.0,
            w,
            h,
        )
    }

    fn tooth(gaussians: Vec<Gaussian3D>) -> ToothGaussians {
        ToothGaussians {
            tooth_id: ToothId(11),
            layout: ToothLayout {
                x: 0.0,
                y: 0.0,
                z: 0.0,
                h: 1.0,
                w: 1.0,
                l: 1.0,
                k: 0.0,
                r: 0.0,
            },
            gaussians,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = Vector3::new(1.0, 0.5, 0.25);
        let f = render_scene(&SceneGaussians::default(), &camera(20, 10), bg).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(f.image.pixel(x, y), [1.0, 0.5, 0.25]);
            }
        }
        assert!(f.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn two_layer_compositing() {
        let cam = camera(16, 16);
        let mut front = Gaussian3D::isotropic(Vector3::new(0.0, -1.0, 0.0), 1.0);
        front.opacity_logit = 0.3;
        front.color = Vector3::new(1.0, 0.0, -1.0);
        let mut back = Gaussian3D::isotropic(Vector3::new(0.2, 2.0, 0.1), 1.5);
        back.opacity_logit = -0.4;
        back.color = Vector3::new(-0.5, 0.8, 0.2);
        let bg = Vector3::new(0.1, 0.2, 0.3);
        // input order is back-to-front; the renderer must sort
        let t = tooth(vec![back, front]);
        let f = Rasterizer::new(cam.clone(), bg).unwrap().render(&[&t]).unwrap();
        let (px, py) = (8.5, 8.5);
        let w = |g: &Gaussian3D| {
            let p = project(g, &cam).unwrap();
            let d = Vector2::new(px - p.mean.x, py - p.mean.y);
            (p.opacity * (-0.5 * d.dot(&(p.conic * d))).exp(), p.rgb)
        };
        let (a1, c1) = w(&front);
        let (a2, c2) = w(&back);
        let expect = c1 * a1 + c2 * a2 * (1.0 - a1) + bg * (1.0 - a1) * (1.0 - a2);
        let got = f.image.pixel(8, 8);
        for c in 0..3 {
            assert!((got[c] - expect[c]).abs() < 1e-12);
        }
        let cs = f.contributions(8, 8);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].index, 1);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 1.0);
        g.color.x = f64::NAN;
        let t = tooth(vec![Gaussian3D::isotropic(Vector3::zeros(), 1.0), g]);
        let err = Rasterizer::new(camera(8, 8), Vector3::zeros())
            .unwrap()
            .render(&[&t])
            .unwrap_err();
        assert!(matches!(err, RenderError::NonFinite { tooth: ToothId(11), index: 1 }));
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let t = tooth(vec![Gaussian3D::isotropic(Vector3::zeros(), 1.0)]);
        let f = Rasterizer::new(camera(8, 8), Vector3::zeros())
            .unwrap()
            .render(&[&t])
            .unwrap();
        assert!(f.backward(&[&t], &[0.0; 5]).is_err());
    }

    #[test]
    fn opaque_stack_terminates_early() {
        let gs: Vec<_> = (0..20)
            .map(|i| {
                let mut g = Gaussian3D::isotropic(Vector3::new(0.0, i as f64 * 0.1, 0.0), 3.0);
                g.opacity_logit = 8.0;
                g
            })
            .collect();
        let t = tooth(gs);
        let f = Rasterizer::new(camera(16, 16), Vector3::zeros())
            .unwrap()
            .render(&[&t])
            .unwrap();
        let p = 8 * 16 + 8;
        assert!(f.transmittance[p] < TRANSMITTANCE_EPS);
        assert!(f.n_contrib[p] < 20);
    }
}
