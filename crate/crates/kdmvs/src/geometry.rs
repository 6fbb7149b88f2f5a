//! Pinhole camera geometry: projection, depth-induced cross-view warps, and
//! per-stage depth hypothesis sampling.
//!
//! Conventions (fixed project-wide):
//! * extrinsics map world to camera: `x_cam = R · x_world + t`;
//! * pixel coordinates are pixel-center based — `(0, 0)` is the center of
//!   the top-left pixel, `(w-1, h-1)` the center of the bottom-right one;
//! * depth is the z coordinate in the camera frame.
//!
//! The warp of reference pixel `p` at depth `d` into source view `i` is
//! `p̂ ~ K_i (R_i (K_0⁻¹ p d) + t_i)` with the relative pose
//! `R_i = R_src R_refᵀ`, `t_i = t_src − R_i t_ref`.

use crate::diff::{concat_channels, Var};
use crate::grid::Grid;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraModel {
    /// Checks the structural invariants: orthonormal right-handed `R`,
    /// upper-triangular `K` with positive diagonal, positive depth range.
    pub fn validate(&self) -> Result<()> {
        let rtr = self.r.transpose() * self.r;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {dev:.2e})"
            )));
        }
        if (self.r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(
                "rotation determinant is not +1".into(),
            ));
        }
        let k = &self.k;
        let lower_dev = k[(1, 0)].abs() + k[(2, 0)].abs() + k[(2, 1)].abs();
        if lower_dev > 1e-12 || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(
                "intrinsics must be upper triangular with K[2,2] = 1".into(),
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::InvalidArgument(
                "intrinsics need positive focal lengths".into(),
            ));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::InvalidArgument(format!(
                "bad depth range [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Lifts a pixel at depth `d` to a world-space point.
    pub fn lift(&self, x: f64, y: f64, d: f64) -> Vector3<f64> {
        let k_inv = self.k.try_inverse().expect("intrinsics invertible");
        let x_cam = k_inv * Vector3::new(x, y, 1.0) * d;
        self.r.transpose() * (x_cam - self.t)
    }

    /// Projects a world point: returns pixel coordinates and camera-frame
    /// depth (which may be ≤ 0 for points behind the camera).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let x_cam = self.r * p + self.t;
        let q = self.k * x_cam;
        (q.x / q.z, q.y / q.z, x_cam.z)
    }

    /// The camera for an image downsampled by an integer `factor` with
    /// area averaging. Under the pixel-center convention the block of
    /// pixels `f·x' .. f·x'+f-1` has center `f·x' + (f-1)/2`, which fixes
    /// the intrinsic rescaling exactly.
    pub fn scaled_by(&self, factor: usize) -> CameraModel {
        let f = factor as f64;
        let off = (f - 1.0) / 2.0;
        let mut k = self.k;
        k[(0, 0)] /= f;
        k[(1, 1)] /= f;
        k[(0, 1)] /= f;
        k[(0, 2)] = (k[(0, 2)] - off) / f;
        k[(1, 2)] = (k[(1, 2)] - off) / f;
        CameraModel { k, ..self.clone() }
    }

    /// The camera for a lattice produced by stride-`factor` convolutions
    /// ("same" padding): output sample `x'` sits over input pixel `f·x'`,
    /// so pixel 0 stays at pixel 0 and the whole intrinsic matrix divides
    /// by the factor. Distinct from [`scaled_by`](Self::scaled_by), whose
    /// area-averaged blocks shift the origin by `(f-1)/2`.
    pub fn scaled_origin_aligned(&self, factor: usize) -> CameraModel {
        let f = factor as f64;
        let mut k = self.k;
        k[(0, 0)] /= f;
        k[(1, 1)] /= f;
        k[(0, 1)] /= f;
        k[(0, 2)] /= f;
        k[(1, 2)] /= f;
        CameraModel { k, ..self.clone() }
    }
}

/// Relative pose taking reference-camera coordinates to source-camera
/// coordinates. Identity for identical cameras.
pub fn relative_pose(ref_cam: &CameraModel, src_cam: &CameraModel) -> (Matrix3<f64>, Vector3<f64>) {
    let r = src_cam.r * ref_cam.r.transpose();
    let t = src_cam.t - r * ref_cam.t;
    (r, t)
}

/// Precomputed depth-to-source-pixel map for one (reference, source) pair:
/// `(u, v, w) = M · (x, y, 1) · d + b`, source pixel `(u/w, v/w)`, source
/// depth `w`.
#[derive(Debug, Clone)]
pub struct WarpMap {
    m: Matrix3<f64>,
    b: Vector3<f64>,
}

impl WarpMap {
    pub fn new(ref_cam: &CameraModel, src_cam: &CameraModel) -> Self {
        let (r_rel, t_rel) = relative_pose(ref_cam, src_cam);
        let k_inv = ref_cam.k.try_inverse().expect("intrinsics invertible");
        WarpMap {
            m: src_cam.k * r_rel * k_inv,
            b: src_cam.k * t_rel,
        }
    }

    /// Warps one reference pixel at depth `d`. Returns the source pixel and
    /// the depth of the point in the source frame; `in_front` is false when
    /// the point lies at or behind the source image plane.
    pub fn apply(&self, x: f64, y: f64, d: f64) -> WarpedPixel {
        let v = self.m * Vector3::new(x, y, 1.0) * d + self.b;
        WarpedPixel {
            x: v.x / v.z,
            y: v.y / v.z,
            depth: v.z,
            in_front: v.z > 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WarpedPixel {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub in_front: bool,
}

/// Convenience wrapper building the [`WarpMap`] on the fly.
pub fn warp_pixel(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    x: f64,
    y: f64,
    d: f64,
) -> WarpedPixel {
    WarpMap::new(ref_cam, src_cam).apply(x, y, d)
}

/// Differentiable per-pixel warp coordinates for an H×W×1 depth var.
/// Returns the (H,W,2) source-pixel coordinate var and the constant
/// "in front of the source camera" mask. Division happens on-tape, so
/// gradients flow from the coordinates back into the depth.
pub fn warp_coords(
    depth: &Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
) -> (Var, Grid) {
    let s = depth.shape();
    assert_eq!(s.c, 1, "depth must be H×W×1");
    let (h, w) = (s.h, s.w);
    let map = WarpMap::new(ref_cam, src_cam);
    // per-pixel linear coefficients a = M · (x, y, 1)
    let mut a0 = Grid::zeros(h, w, 1);
    let mut a1 = Grid::zeros(h, w, 1);
    let mut a2 = Grid::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let a = map.m * Vector3::new(x as f64, y as f64, 1.0);
            a0.set(y, x, 0, a.x);
            a1.set(y, x, 0, a.y);
            a2.set(y, x, 0, a.z);
        }
    }
    let b0 = Grid::new(h, w, 1, map.b.x);
    let b1 = Grid::new(h, w, 1, map.b.y);
    let b2 = Grid::new(h, w, 1, map.b.z);
    let u = depth.mul_cgrid(&a0).add_cgrid(&b0);
    let v = depth.mul_cgrid(&a1).add_cgrid(&b1);
    let zw = depth.mul_cgrid(&a2).add_cgrid(&b2);
    let front = zw.value().map(|z| if z > 1e-9 { 1.0 } else { 0.0 });
    let px = u.div(&zw);
    let py = v.div(&zw);
    (concat_channels(&[&px, &py]), front)
}

/// Warps a source-view grid into the reference view at the given per-pixel
/// depth. Returns the warped values and the validity mask (in front of the
/// source camera AND bilinear support inside the image); invalid pixels are
/// exactly 0 so masks compose multiplicatively.
pub fn warp_grid(
    src: &Var,
    depth: &Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
) -> Result<(Var, Grid)> {
    let ds = depth.shape();
    if ds.c != 1 {
        return Err(Error::InvalidArgument(format!(
            "warp_grid depth must be H×W×1, got {ds}"
        )));
    }
    let (coords, front) = warp_coords(depth, ref_cam, src_cam);
    let (vals, sample_mask) = src.bilinear_sample(&coords);
    let mask = sample_mask.map_binary(&front, crate::grid::BinaryOp::Mul)?;
    Ok((vals.mul_mask(&front), mask))
}

/// A per-pixel set of depth hypotheses for one cascade stage, strictly
/// increasing along the channel axis.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    /// H×W×D depth values.
    pub depths: Grid,
    /// Spacing between consecutive hypotheses (world units).
    pub interval: f64,
}

/// Stage-0 hypotheses: `d_count` uniform samples spanning the full
/// `[depth_min, depth_max]` range at every pixel.
pub fn uniform_hypotheses(
    h: usize,
    w: usize,
    d_count: usize,
    depth_min: f64,
    depth_max: f64,
) -> Result<HypothesisSet> {
    if d_count < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 depth hypotheses".into(),
        ));
    }
    if !(depth_min > 0.0 && depth_max > depth_min) {
        return Err(Error::InvalidArgument(format!(
            "bad depth range [{depth_min}, {depth_max}]"
        )));
    }
    let interval = (depth_max - depth_min) / (d_count - 1) as f64;
    let mut depths = Grid::zeros(h, w, d_count);
    for px in 0..h * w {
        for k in 0..d_count {
            depths.data_mut()[px * d_count + k] = depth_min + k as f64 * interval;
        }
    }
    Ok(HypothesisSet { depths, interval })
}

/// Window center positions for a refined stage: the previous stage's depth,
/// nearest-neighbor upsampled, with the window shifted (not truncated) so
/// all `d_count` samples stay inside `[depth_min, depth_max]` and remain
/// strictly increasing.
fn window_bounds(d_count: usize, interval: f64, depth_min: f64, depth_max: f64) -> (f64, f64) {
    let half = (d_count - 1) as f64 / 2.0 * interval;
    let lo = depth_min + half;
    let hi = depth_max - half;
    (lo, hi)
}

/// Refined hypotheses around an upsampled previous-stage depth map.
/// `interval` is this stage's hypothesis spacing. The window must fit in
/// the depth range (`(d_count-1)·interval ≤ depth_max − depth_min`).
pub fn refined_hypotheses(
    prev_depth: &Grid,
    upsample: usize,
    d_count: usize,
    interval: f64,
    depth_min: f64,
    depth_max: f64,
) -> Result<HypothesisSet> {
    if d_count < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 depth hypotheses".into(),
        ));
    }
    let (lo, hi) = window_bounds(d_count, interval, depth_min, depth_max);
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "hypothesis window ({} samples × {interval}) exceeds depth range [{depth_min}, {depth_max}]",
            d_count
        )));
    }
    let up = prev_depth.upsample_nearest(upsample);
    let (h, w) = (up.h(), up.w());
    let mut depths = Grid::zeros(h, w, d_count);
    for px in 0..h * w {
        let center = up.data()[px].clamp(lo, hi);
        for k in 0..d_count {
            let off = (k as f64 - (d_count - 1) as f64 / 2.0) * interval;
            depths.data_mut()[px * d_count + k] = center + off;
        }
    }
    Ok(HypothesisSet { depths, interval })
}

/// Differentiable twin of [`refined_hypotheses`]: identical values, but the
/// hypotheses stay on the tape so gradients reach the previous stage's
/// depth through the window centers. Returns one H×W×1 var per hypothesis
/// (plane-sweep warps consume them individually; [`concat_channels`] turns
/// them back into an H×W×D volume).
pub fn refined_hypotheses_diff(
    prev_depth: &Var,
    upsample: usize,
    d_count: usize,
    interval: f64,
    depth_min: f64,
    depth_max: f64,
) -> Result<Vec<Var>> {
    let (lo, hi) = window_bounds(d_count, interval, depth_min, depth_max);
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "hypothesis window ({} samples × {interval}) exceeds depth range [{depth_min}, {depth_max}]",
            d_count
        )));
    }
    let center = prev_depth.upsample_nearest(upsample).clamp(lo, hi);
    let s = center.shape();
    Ok((0..d_count)
        .map(|k| {
            let off = (k as f64 - (d_count - 1) as f64 / 2.0) * interval;
            center.add_cgrid(&Grid::new(s.h, s.w, 1, off))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{backward, Tape};
    use proptest::prelude::*;

    fn simple_camera() -> CameraModel {
        CameraModel {
            k: Matrix3::new(100.0, 0.0, 40.0, 0.0, 100.0, 30.0, 0.0, 0.0, 1.0),
            r: Matrix3::identity(),
            t: Vector3::zeros(),
            depth_min: 1.0,
            depth_max: 10.0,
        }
    }

    fn rotation_about_y(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    #[test]
    fn identity_pair_warps_every_pixel_onto_itself() {
        let cam = simple_camera();
        let map = WarpMap::new(&cam, &cam);
        for &(x, y) in &[(0.0, 0.0), (12.25, 3.5), (79.0, 59.0)] {
            for &d in &[1.0, 2.5, 9.9] {
                let p = map.apply(x, y, d);
                assert!((p.x - x).abs() < 1e-12, "x {x} d {d} -> {}", p.x);
                assert!((p.y - y).abs() < 1e-12);
                assert!((p.depth - d).abs() < 1e-12);
                assert!(p.in_front);
            }
        }
    }

    #[test]
    fn rectified_pair_shifts_by_focal_times_baseline_over_depth() {
        let ref_cam = simple_camera();
        let mut src_cam = ref_cam.clone();
        // camera shifted +0.2 along world x; world-to-camera t = -R·C
        src_cam.t = Vector3::new(-0.2, 0.0, 0.0);
        let p = warp_pixel(&ref_cam, &src_cam, 17.0, 23.0, 4.0);
        let expected_shift = 100.0 * 0.2 / 4.0; // f·b/d = 5 px
        assert!((p.x - (17.0 - expected_shift)).abs() < 1e-9);
        assert!((p.y - 23.0).abs() < 1e-9);
        assert!((p.depth - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lift_then_project_round_trips() {
        let mut cam = simple_camera();
        cam.r = rotation_about_y(0.3);
        cam.t = Vector3::new(0.1, -0.2, 0.05);
        for &(x, y, d) in &[(5.0, 7.0, 2.0), (63.5, 12.25, 7.3), (0.0, 59.0, 1.1)] {
            let p = cam.lift(x, y, d);
            let (px, py, pd) = cam.project(&p);
            assert!((px - x).abs() < 1e-9);
            assert!((py - y).abs() < 1e-9);
            assert!((pd - d).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_pose_of_identical_cameras_is_identity() {
        let mut cam = simple_camera();
        cam.r = rotation_about_y(-0.4);
        cam.t = Vector3::new(1.0, 2.0, 3.0);
        let (r, t) = relative_pose(&cam, &cam);
        assert!((r - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.norm() < 1e-12);
    }

    #[test]
    fn validate_rejects_non_orthonormal_rotation() {
        let mut cam = simple_camera();
        cam.r[(0, 0)] = 1.5;
        assert!(cam.validate().is_err());
        assert!(simple_camera().validate().is_ok());
    }

    #[test]
    fn scaled_camera_projects_consistently_with_block_centers() {
        let mut cam = simple_camera();
        cam.r = rotation_about_y(0.2);
        cam.t = Vector3::new(0.3, 0.1, -0.2);
        let half = cam.scaled_by(2);
        let p = cam.lift(20.0, 16.0, 3.0);
        let (fx, fy, _) = cam.project(&p);
        let (hx, hy, _) = half.project(&p);
        // full-res coordinate x maps to half-res (x - 0.5) / 2
        assert!((hx - (fx - 0.5) / 2.0).abs() < 1e-9);
        assert!((hy - (fy - 0.5) / 2.0).abs() < 1e-9);
        assert!((cam.scaled_by(1).k - cam.k).abs().max() < 1e-15);
    }

    #[test]
    fn origin_aligned_scaling_keeps_pixel_zero_fixed() {
        let mut cam = simple_camera();
        cam.r = rotation_about_y(-0.15);
        cam.t = Vector3::new(-0.1, 0.2, 0.1);
        let quarter = cam.scaled_origin_aligned(4);
        let p = cam.lift(20.0, 16.0, 3.0);
        let (fx, fy, _) = cam.project(&p);
        let (qx, qy, _) = quarter.project(&p);
        // stride-4 sampling keeps the origin: full-res x maps to x / 4
        assert!((qx - fx / 4.0).abs() < 1e-9);
        assert!((qy - fy / 4.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_hypotheses_span_range_inclusively() {
        let set = uniform_hypotheses(1, 1, 5, 2.0, 10.0).unwrap();
        assert_eq!(set.depths.pixel(0, 0), &[2.0, 4.0, 6.0, 8.0, 10.0]);
        assert!((set.interval - 2.0).abs() < 1e-15);
    }

    #[test]
    fn refined_hypotheses_center_on_previous_depth() {
        let prev = Grid::new(1, 1, 1, 5.0);
        // stage-2 spacing: base interval 1.0 decayed by 0.25
        let set = refined_hypotheses(&prev, 1, 4, 0.25, 2.0, 10.0).unwrap();
        let got = set.depths.pixel(0, 0);
        let want = [4.625, 4.875, 5.125, 5.375];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn refined_hypotheses_shift_window_at_range_edges() {
        let prev = Grid::new(1, 1, 1, 2.05); // close to depth_min
        let set = refined_hypotheses(&prev, 1, 4, 0.25, 2.0, 10.0).unwrap();
        let got = set.depths.pixel(0, 0);
        for v in got {
            assert!(*v >= 2.0 - 1e-12 && *v <= 10.0 + 1e-12);
        }
        for pair in got.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn diff_hypotheses_match_plain_version_and_carry_gradients() {
        let prev = Grid::from_vec(1, 2, 1, vec![4.0, 6.5]).unwrap();
        let plain = refined_hypotheses(&prev, 2, 4, 0.5, 2.0, 10.0).unwrap();
        let tape = Tape::new();
        let pv = tape.param(prev.clone());
        let parts = refined_hypotheses_diff(&pv, 2, 4, 0.5, 2.0, 10.0).unwrap();
        let refs: Vec<&Var> = parts.iter().collect();
        let dv = concat_channels(&refs);
        assert_eq!(dv.value().data(), plain.depths.data());
        let loss = dv.sum();
        let g = backward(&loss).unwrap().wrt(&pv);
        // each source pixel feeds 2x2 upsampled pixels x 4 hypotheses with
        // unit weight (window interior, clamp inactive)
        assert_eq!(g.data(), &[16.0, 16.0]);
    }

    #[test]
    fn warp_grid_depth_gradient_matches_finite_differences() {
        let ref_cam = simple_camera();
        let mut src_cam = simple_camera();
        src_cam.r = rotation_about_y(0.05);
        src_cam.t = Vector3::new(-0.15, 0.02, 0.0);
        let mut src_img = Grid::zeros(60, 80, 1);
        for y in 0..60 {
            for x in 0..80 {
                src_img.set(y, x, 0, (x as f64 * 0.11).sin() + (y as f64 * 0.07).cos());
            }
        }
        let depth0 = Grid::from_fn(4, 5, |y, x| 3.0 + 0.1 * (x as f64) + 0.05 * (y as f64));
        let eval = |d: &Grid| -> f64 {
            let t = Tape::new();
            let dv = t.param(d.clone());
            let sv = t.constant(src_img.clone());
            let (w, _m) = warp_grid(&sv, &dv, &ref_cam, &src_cam).unwrap();
            w.sum().scalar()
        };
        let t = Tape::new();
        let dv = t.param(depth0.clone());
        let sv = t.constant(src_img.clone());
        let (w, mask) = warp_grid(&sv, &dv, &ref_cam, &src_cam).unwrap();
        assert!(mask.mask_ratio() > 0.9, "test setup should be mostly valid");
        let loss = w.sum();
        let analytic = backward(&loss).unwrap().wrt(&dv);
        let eps = 1e-5;
        for i in 0..depth0.len() {
            let mut dp = depth0.clone();
            let mut dm = depth0.clone();
            dp.data_mut()[i] += eps;
            dm.data_mut()[i] -= eps;
            let fd = (eval(&dp) - eval(&dm)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() / fd.abs().max(a.abs()).max(1.0) < 1e-4,
                "pixel {i}: fd {fd} vs {a}"
            );
        }
    }

    proptest! {
        #[test]
        fn refined_windows_stay_in_range_and_strictly_increase(
            center in 0.5f64..12.0,
            d_count in 2usize..9,
            interval in 0.01f64..0.4,
        ) {
            let prev = Grid::new(1, 1, 1, center);
            let set = refined_hypotheses(&prev, 1, d_count, interval, 1.0, 8.0).unwrap();
            let ds = set.depths.pixel(0, 0);
            for v in ds {
                prop_assert!(*v >= 1.0 - 1e-12 && *v <= 8.0 + 1e-12);
            }
            for pair in ds.windows(2) {
                prop_assert!(pair[1] > pair[0]);
                prop_assert!((pair[1] - pair[0] - interval).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_warp_property(x in 0.0f64..80.0, y in 0.0f64..60.0, d in 0.5f64..20.0) {
            let cam = simple_camera();
            let p = warp_pixel(&cam, &cam, x, y, d);
            prop_assert!((p.x - x).abs() < 1e-9);
            prop_assert!((p.y - y).abs() < 1e-9);
        }
    }
}
