//! Procedural multi-view scenes with analytic ground truth.
//!
//! A scene is a handful of textured primitives (infinite planes, finite
//! rectangles, spheres, axis-aligned boxes) plus a small camera rig looking
//! at it. Depth maps come from exact ray–primitive intersection along each
//! pixel ray — never from rasterization — so ground truth is good to f64
//! precision and the same query works at non-integer pixels, which is what
//! the co-visibility and cross-view oracles lean on.
//!
//! Surface color is a function of the 3-D surface point only (value noise
//! octaves plus linear gradients), so a Lambertian-consistent pixel in two
//! views sees the same color. An optional per-view gain/bias jitter breaks
//! exactly that assumption on purpose, to emulate exposure differences.

use crate::geometry::CameraModel;
use crate::grid::Grid;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const DEPTH_MIN: f64 = 3.0;
pub const DEPTH_MAX: f64 = 6.0;
const FOCAL: f64 = 100.0;
/// Rig target point; primitives are laid out around it.
const TARGET: Vector3<f64> = Vector3::new(0.0, 0.0, 4.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    /// A tilted backdrop plane with two floating tilted rectangles.
    TiltedPlanes,
    /// A backdrop plane with a sphere in front of it.
    SphereOnPlane,
    /// A backdrop plane with two boxes, giving step discontinuities.
    StepRelief,
}

impl GeometryKind {
    pub const ALL: [GeometryKind; 3] = [
        GeometryKind::TiltedPlanes,
        GeometryKind::SphereOnPlane,
        GeometryKind::StepRelief,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub kind: GeometryKind,
    pub height: usize,
    pub width: usize,
    pub n_views: usize,
    /// Per-view gain/bias perturbation of the rendered images.
    pub lighting_jitter: bool,
}

#[derive(Debug, Clone)]
pub enum Primitive {
    /// Infinite plane `n · X = c`.
    Plane { n: Vector3<f64>, c: f64 },
    /// Finite rectangle: center, orthonormal tangents, half extents.
    Rect {
        p0: Vector3<f64>,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
        half1: f64,
        half2: f64,
    },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box given by its min/max corners.
    Box { lo: Vector3<f64>, hi: Vector3<f64> },
}

impl Primitive {
    /// Smallest positive ray parameter `λ` with `o + λ·dir` on the surface.
    fn hit(&self, o: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Primitive::Plane { n, c } => {
                let denom = n.dot(dir);
                if denom.abs() < EPS {
                    return None;
                }
                let t = (c - n.dot(o)) / denom;
                (t > EPS).then_some(t)
            }
            Primitive::Rect {
                p0,
                e1,
                e2,
                half1,
                half2,
            } => {
                let n = e1.cross(e2);
                let denom = n.dot(dir);
                if denom.abs() < EPS {
                    return None;
                }
                let t = (n.dot(&(p0 - o))) / denom;
                if t <= EPS {
                    return None;
                }
                let x = o + dir * t - p0;
                (x.dot(e1).abs() <= *half1 && x.dot(e2).abs() <= *half2).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = o - center;
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let c2 = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c2;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Box { lo, hi } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < EPS {
                        if o[a] < lo[a] || o[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (t0, t1) = {
                        let ta = (lo[a] - o[a]) * inv;
                        let tb = (hi[a] - o[a]) * inv;
                        if ta < tb { (ta, tb) } else { (tb, ta) }
                    };
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                (t_near > EPS && t_near <= t_far).then_some(t_near)
            }
        }
    }

    /// Unsigned distance from `p` to the primitive's surface (not its
    /// interior: a point inside a sphere or box is measured to the shell).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane { n, c } => (n.dot(p) - c).abs() / n.norm(),
            Primitive::Rect {
                p0,
                e1,
                e2,
                half1,
                half2,
            } => {
                let d = p - p0;
                let u = d.dot(e1).clamp(-*half1, *half1);
                let v = d.dot(e2).clamp(-*half2, *half2);
                (d - e1 * u - e2 * v).norm()
            }
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Box { lo, hi } => {
                let outside = Vector3::new(
                    (lo.x - p.x).max(p.x - hi.x).max(0.0),
                    (lo.y - p.y).max(p.y - hi.y).max(0.0),
                    (lo.z - p.z).max(p.z - hi.z).max(0.0),
                );
                let out = outside.norm();
                if out > 0.0 {
                    out
                } else {
                    // inside: closest shell point lies on the nearest face
                    (0..3)
                        .map(|a| (p[a] - lo[a]).min(hi[a] - p[a]))
                        .fold(f64::INFINITY, f64::min)
                }
            }
        }
    }
}

/// World-point → RGB texture: shared luminance value-noise octaves, a small
/// per-channel tint octave, and a linear gradient per channel. Purely a
/// function of the 3-D point.
#[derive(Debug, Clone)]
pub struct Texture {
    seed: u64,
    /// (frequency, amplitude) octaves shared by all channels; frequencies
    /// in cycles per world unit.
    luminance: Vec<(f64, f64)>,
    /// Sinusoidal waves (wave vector in radians per unit, phase, amplitude)
    /// shared by all channels. Value noise goes flat wherever neighboring
    /// lattice values agree; the plaid has no such cells, so every patch
    /// keeps a usable intensity gradient.
    plaid: [(Vector3<f64>, f64, f64); 4],
    /// One coarse per-channel octave so channels don't collapse to gray.
    tint: (f64, f64),
    /// Per-channel linear gradient directions (world units⁻¹).
    gradients: [Vector3<f64>; 3],
    base: f64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        // Octave cells are ~1.1 and ~0.5 world units: roughly 26 px and
        // 13 px at the rig's working distance, and the plaid period is
        // ~40 px. Keeping everything this coarse bounds the bilinear
        // interpolation error of a warped image under the 1e-3
        // photometric-oracle budget; the plaid plus the gradients put a
        // floor under patch contrast.
        let tau = std::f64::consts::TAU;
        Texture {
            seed,
            luminance: vec![(0.9, 0.30), (1.9, 0.13)],
            plaid: [
                (
                    tau * 0.7 * Vector3::new(0.85, 0.35, 0.30).normalize(),
                    tau * hash3(11, 7, 3, seed),
                    0.13,
                ),
                (
                    tau * 0.7 * Vector3::new(-0.33, 0.88, 0.25).normalize(),
                    tau * hash3(5, 23, 17, seed),
                    0.13,
                ),
                (
                    tau * 1.2 * Vector3::new(0.52, -0.78, 0.35).normalize(),
                    tau * hash3(29, 13, 41, seed),
                    0.05,
                ),
                (
                    tau * 1.2 * Vector3::new(0.70, 0.65, -0.29).normalize(),
                    tau * hash3(3, 37, 19, seed),
                    0.05,
                ),
            ],
            tint: (0.7, 0.09),
            gradients: [
                Vector3::new(0.26, 0.05, 0.0),
                Vector3::new(0.15, 0.19, 0.03),
                Vector3::new(0.01, 0.13, 0.05),
            ],
            base: 0.5,
        }
    }

    pub fn sample(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut lum = 0.0;
        for (oi, &(freq, amp)) in self.luminance.iter().enumerate() {
            let s = self.seed ^ ((oi as u64 + 1) << 16);
            lum += amp * (value_noise3(&(p * freq), s) - 0.5) * 2.0;
        }
        for &(k, phase, amp) in &self.plaid {
            lum += amp * (k.dot(p) + phase).sin();
        }
        let mut rgb = [0.0f64; 3];
        // gradients are measured from the rig target so they don't act as a
        // large constant offset that drives channels into clipping
        let q = p - TARGET;
        for (ch, out) in rgb.iter_mut().enumerate() {
            let s = self.seed ^ ((ch as u64 + 1) << 8);
            let tint = self.tint.1 * (value_noise3(&(p * self.tint.0), s) - 0.5) * 2.0;
            let v = self.base + self.gradients[ch].dot(&q) + lum + tint;
            // smooth range compression: a hard clamp would flatten bright
            // and dark regions outright, killing their matchable contrast
            *out = 0.5 + 0.46 * ((v - 0.5) / 0.46).tanh();
        }
        rgb
    }
}

fn hash3(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (iz as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(u: f64) -> f64 {
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

/// Trilinear value noise with a quintic fade, C² across lattice cells.
fn value_noise3(p: &Vector3<f64>, seed: u64) -> f64 {
    let (x0, y0, z0) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (fx, fy, fz) = (fade(p.x - x0), fade(p.y - y0), fade(p.z - z0));
    let (ix, iy, iz) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// The geometric + photometric content of a scene, queryable analytically.
#[derive(Debug, Clone)]
pub struct SceneShape {
    pub primitives: Vec<Primitive>,
    pub texture: Texture,
}

impl SceneShape {
    /// Nearest surface hit along the ray of (possibly non-integer) pixel
    /// `(x, y)` of `cam`: camera-frame depth and the primitive index.
    pub fn hit_at(&self, cam: &CameraModel, x: f64, y: f64) -> Option<(f64, usize)> {
        let o = cam.center();
        let k_inv = cam.k.try_inverse().expect("intrinsics invertible");
        // direction scaled so the ray parameter equals camera-frame depth
        let dir = cam.r.transpose() * (k_inv * Vector3::new(x, y, 1.0));
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.hit(&o, &dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
    }

    pub fn depth_at(&self, cam: &CameraModel, x: f64, y: f64) -> Option<f64> {
        self.hit_at(cam, x, y).map(|(t, _)| t)
    }

    pub fn color_at(&self, cam: &CameraModel, x: f64, y: f64) -> Option<[f64; 3]> {
        let d = self.depth_at(cam, x, y)?;
        let p = cam.lift(x, y, d);
        Some(self.texture.sample(&p))
    }

    /// Unsigned distance from `p` to the nearest primitive surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub spec: SceneSpec,
    pub cams: Vec<CameraModel>,
    /// H×W×3 images in [0, 1], one per view.
    pub images: Vec<Grid>,
    /// H×W×1 analytic depth maps, one per view.
    pub gt_depth: Vec<Grid>,
    pub shape: SceneShape,
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let f = (target - center).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0); // world y runs downward, like image y
    let r = up.cross(&f).normalize();
    let y = f.cross(&r);
    let rot = Matrix3::from_rows(&[r.transpose(), y.transpose(), f.transpose()]);
    let t = -rot * center;
    (rot, t)
}

/// The camera arc for a scene: `n_views` cameras spread along world x with
/// slight height/depth jitter, all aimed at the scene target.
pub fn build_rig(spec: &SceneSpec) -> Vec<CameraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0052_4947);
    let k = Matrix3::new(
        FOCAL,
        0.0,
        (spec.width - 1) as f64 / 2.0,
        0.0,
        FOCAL,
        (spec.height - 1) as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let n = spec.n_views;
    let spread = 0.24; // adjacent-camera baseline in world units
    (0..n)
        .map(|i| {
            let u = i as f64 - (n - 1) as f64 / 2.0;
            let center = Vector3::new(
                u * spread + rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.06..0.06),
                rng.gen_range(-0.05..0.05),
            );
            let (r, t) = look_at(center, TARGET);
            CameraModel {
                k,
                r,
                t,
                depth_min: DEPTH_MIN,
                depth_max: DEPTH_MAX,
            }
        })
        .collect()
}

fn build_shape(spec: &SceneSpec) -> SceneShape {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5348_4150);
    let mut j = |lo: f64, hi: f64| rng.gen_range(lo..hi);

    let backdrop = {
        let n = Vector3::new(j(-0.22, 0.22), j(-0.18, 0.18), -1.0).normalize();
        let p0 = Vector3::new(0.0, 0.0, 5.0 + j(-0.2, 0.2));
        Primitive::Plane { n, c: n.dot(&p0) }
    };
    let mut primitives = vec![backdrop];
    match spec.kind {
        GeometryKind::TiltedPlanes => {
            for side in [-1.0, 1.0] {
                let p0 = Vector3::new(
                    side * j(0.35, 0.6),
                    side * j(-0.45, -0.2),
                    j(4.0, 4.6),
                );
                let tilt = Vector3::new(j(-0.35, 0.35), j(-0.35, 0.35), -1.0).normalize();
                let e1 = tilt.cross(&Vector3::new(0.0, 1.0, 0.0)).normalize();
                let e2 = tilt.cross(&e1);
                primitives.push(Primitive::Rect {
                    p0,
                    e1,
                    e2,
                    half1: j(0.4, 0.6),
                    half2: j(0.3, 0.5),
                });
            }
        }
        GeometryKind::SphereOnPlane => {
            primitives.push(Primitive::Sphere {
                center: Vector3::new(j(-0.3, 0.3), j(-0.25, 0.25), j(4.1, 4.5)),
                radius: j(0.35, 0.55),
            });
        }
        GeometryKind::StepRelief => {
            let lo1 = Vector3::new(j(-1.0, -0.8), j(-0.7, -0.5), j(4.3, 4.5));
            primitives.push(Primitive::Box {
                lo: lo1,
                hi: lo1 + Vector3::new(j(0.6, 0.9), j(0.6, 0.9), 1.2),
            });
            let lo2 = Vector3::new(j(0.1, 0.3), j(-0.2, 0.0), j(3.9, 4.1));
            primitives.push(Primitive::Box {
                lo: lo2,
                hi: lo2 + Vector3::new(j(0.5, 0.7), j(0.5, 0.7), 1.5),
            });
        }
    }
    SceneShape {
        primitives,
        texture: Texture::new(spec.seed ^ 0x0054_4558),
    }
}

/// Renders all views of a scene: images, analytic depth maps, cameras.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    if spec.n_views < 2 {
        return Err(Error::InvalidArgument("need at least 2 views".into()));
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} too small",
            spec.height, spec.width
        )));
    }
    let cams = build_rig(spec);
    let shape = build_shape(spec);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x004C_4947);
    let mut images = Vec::with_capacity(spec.n_views);
    let mut gt_depth = Vec::with_capacity(spec.n_views);
    for cam in &cams {
        let (gain, bias) = if spec.lighting_jitter {
            (
                jitter_rng.gen_range(0.88..1.12),
                jitter_rng.gen_range(-0.06..0.06),
            )
        } else {
            (1.0, 0.0)
        };
        let mut img = Grid::zeros(spec.height, spec.width, 3);
        let mut depth = Grid::zeros(spec.height, spec.width, 1);
        let w = spec.width;
        // rows are independent and written to disjoint slices, so the
        // result is identical for any worker count
        let row_results: Vec<Result<()>> = img
            .data_mut()
            .par_chunks_mut(w * 3)
            .zip(depth.data_mut().par_chunks_mut(w))
            .enumerate()
            .map(|(y, (img_row, depth_row))| {
                for x in 0..w {
                    let d = shape
                        .depth_at(cam, x as f64, y as f64)
                        .ok_or_else(|| {
                            Error::Numeric("pixel ray escaped the scene".into())
                        })?;
                    depth_row[x] = d;
                    let p = cam.lift(x as f64, y as f64, d);
                    let rgb = shape.texture.sample(&p);
                    for ch in 0..3 {
                        img_row[x * 3 + ch] = (gain * rgb[ch] + bias).clamp(0.0, 1.0);
                    }
                }
                Ok(())
            })
            .collect();
        row_results.into_iter().collect::<Result<Vec<()>>>()?;
        images.push(img);
        gt_depth.push(depth);
    }
    Ok(RenderedScene {
        spec: spec.clone(),
        cams,
        images,
        gt_depth,
        shape,
    })
}

impl RenderedScene {
    /// Mask of reference pixels whose surface point is visible (not
    /// occluded, inside the frame) in `src_view`, decided by re-casting the
    /// source ray analytically.
    pub fn covisibility(&self, ref_view: usize, src_view: usize) -> Grid {
        self.covisibility_inner(ref_view, src_view, false)
    }

    /// Like [`covisibility`](Self::covisibility), but additionally requires
    /// the whole bilinear support in the source view to lie on the same
    /// primitive at a nearby depth. Pixels whose interpolation footprint
    /// straddles an occlusion edge mix foreground and background colors no
    /// matter how accurate the depth is, so photometric-consistency
    /// analyses should exclude them.
    pub fn covisibility_clean(&self, ref_view: usize, src_view: usize) -> Grid {
        self.covisibility_inner(ref_view, src_view, true)
    }

    fn covisibility_inner(&self, ref_view: usize, src_view: usize, clean: bool) -> Grid {
        let rc = &self.cams[ref_view];
        let sc = &self.cams[src_view];
        let depth = &self.gt_depth[ref_view];
        let (h, w) = (depth.h(), depth.w());
        Grid::from_fn(h, w, |y, x| {
            let d = depth.at(y, x, 0);
            let p = rc.lift(x as f64, y as f64, d);
            let (sx, sy, sz) = sc.project(&p);
            if sz <= 0.0
                || sx < 0.0
                || sy < 0.0
                || sx > (w - 1) as f64
                || sy > (h - 1) as f64
            {
                return 0.0;
            }
            let hit = match self.shape.hit_at(sc, sx, sy) {
                Some((ds, i)) if (ds - sz).abs() <= 1e-6 * sz => i,
                _ => return 0.0,
            };
            if clean {
                let x0 = (sx.floor() as usize).min(w - 2);
                let y0 = (sy.floor() as usize).min(h - 2);
                for (cx, cy) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
                    match self.shape.hit_at(sc, cx as f64, cy as f64) {
                        Some((dc, i)) if i == hit && (dc - sz).abs() <= 0.05 * sz => {}
                        _ => return 0.0,
                    }
                }
            }
            1.0
        })
    }

    /// Fraction of reference pixels co-visible in at least `min_views`
    /// source views.
    pub fn covisible_ratio(&self, ref_view: usize, min_views: usize) -> f64 {
        let (h, w) = (
            self.gt_depth[ref_view].h(),
            self.gt_depth[ref_view].w(),
        );
        let masks: Vec<Grid> = (0..self.spec.n_views)
            .filter(|&v| v != ref_view)
            .map(|v| self.covisibility(ref_view, v))
            .collect();
        let mut hit = 0usize;
        for px in 0..h * w {
            let count = masks.iter().filter(|m| m.data()[px] > 0.5).count();
            if count >= min_views {
                hit += 1;
            }
        }
        hit as f64 / (h * w) as f64
    }
}
