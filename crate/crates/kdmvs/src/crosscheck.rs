//! Cross-view consistency filtering of inferred depth maps.
//!
//! A reference pixel survives only if every source view agrees with it: the
//! pixel is forward-cast into the source at its own depth, the source's
//! depth there throws it back, and both the landing error in pixels and the
//! relative depth error must stay under threshold, for all N−1 sources.
//! Surviving pixels carry the N reference-frame depth observations
//! {D̃_0(P_i)} for downstream label fitting; everything else is discarded.
//!
//! Source depth is sampled nearest-neighbor, not bilinear: interpolating
//! across a depth discontinuity fabricates depths that exist on neither side
//! of the edge. The landing error uses the Euclidean norm. A source pixel
//! outside the image, a nonpositive sampled depth, or a throw-back that
//! lands behind the reference camera all fail that view conservatively.

use rayon::prelude::*;

use crate::geometry::{CameraModel, WarpMap};
use crate::grid::Grid;
use crate::io::sidecar::ValidatedDepths;
use crate::{Error, Result};

/// Acceptance thresholds: confidence strictly above `conf`, both errors
/// strictly below `reproj` (pixels) and `geo` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckThresholds {
    pub conf: f64,
    pub reproj: f64,
    pub geo: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        CheckThresholds {
            conf: 0.15,
            reproj: 1.0,
            geo: 0.01,
        }
    }
}

impl CheckThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf", self.conf),
            ("reproj", self.reproj),
            ("geo", self.geo),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!(
                    "threshold {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Where a reference pixel lands after the round trip through one source
/// view: the reference-image coordinates of the thrown-back point and its
/// depth in the reference frame, D̃_0(P_i).
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Round-trips reference pixel `(x0, y0)` through one source view. `None`
/// means the view cannot vouch for the pixel at all (off-frame, bad depth,
/// behind a camera); the caller treats that as a failed check.
pub fn reproject(
    x0: usize,
    y0: usize,
    ref_depth: &Grid,
    src_depth: &Grid,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
) -> Option<Reprojection> {
    let forward = WarpMap::new(ref_cam, src_cam);
    let backward = WarpMap::new(src_cam, ref_cam);
    reproject_mapped(x0, y0, ref_depth.at(y0, x0, 0), src_depth, &forward, &backward)
}

fn reproject_mapped(
    x0: usize,
    y0: usize,
    d0: f64,
    src_depth: &Grid,
    forward: &WarpMap,
    backward: &WarpMap,
) -> Option<Reprojection> {
    if d0 <= 0.0 || !d0.is_finite() {
        return None;
    }
    let cast = forward.apply(x0 as f64, y0 as f64, d0);
    if !cast.in_front {
        return None;
    }
    let qx = cast.x.round();
    let qy = cast.y.round();
    let (h, w) = (src_depth.h() as f64, src_depth.w() as f64);
    if qx < 0.0 || qy < 0.0 || qx > w - 1.0 || qy > h - 1.0 {
        return None;
    }
    let di = src_depth.at(qy as usize, qx as usize, 0);
    if di <= 0.0 || !di.is_finite() {
        return None;
    }
    // lift the continuous landing point (not the snapped pixel) at the
    // sampled depth; snapping the ray too would fold pixel quantization
    // into the landing error twice
    let back = backward.apply(cast.x, cast.y, di);
    if !back.in_front {
        return None;
    }
    Some(Reprojection {
        x: back.x,
        y: back.y,
        depth: back.depth,
    })
}

/// Landing error in pixels and relative depth error of one round trip.
/// `d0` must be the reference depth the round trip started from (positive).
pub fn per_view_errors(x0: usize, y0: usize, d0: f64, rp: &Reprojection) -> (f64, f64) {
    let dx = x0 as f64 - rp.x;
    let dy = y0 as f64 - rp.y;
    let e_reproj = (dx * dx + dy * dy).sqrt();
    let e_geo = (d0 - rp.depth).abs() / d0;
    (e_reproj, e_geo)
}

/// Runs the full check for one reference view. `depths[0]`/`cams[0]` are the
/// reference; the rest are sources. `confidence` is the model's per-pixel
/// score for the reference depth map, tested once per pixel. An empty result
/// is legal and reportable, not an error.
pub fn validate(
    depths: &[Grid],
    confidence: &Grid,
    cams: &[CameraModel],
    thresholds: &CheckThresholds,
) -> Result<ValidatedDepths> {
    thresholds.validate()?;
    if depths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-view check needs at least 2 views, got {}",
            depths.len()
        )));
    }
    if depths.len() != cams.len() {
        return Err(Error::InvalidArgument(format!(
            "{} depth maps vs {} cameras",
            depths.len(),
            cams.len()
        )));
    }
    let shape = depths[0].shape();
    if shape.c != 1 {
        return Err(Error::InvalidArgument(format!(
            "depth maps must be single-channel, got {} channels",
            shape.c
        )));
    }
    for d in &depths[1..] {
        if d.shape() != shape {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: d.shape(),
                context: "depth maps across views",
            });
        }
    }
    if confidence.shape() != shape {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: confidence.shape(),
            context: "confidence vs depth",
        });
    }

    let n = depths.len();
    let maps: Vec<(WarpMap, WarpMap)> = (1..n)
        .map(|i| {
            (
                WarpMap::new(&cams[0], &cams[i]),
                WarpMap::new(&cams[i], &cams[0]),
            )
        })
        .collect();

    let (h, w) = (shape.h, shape.w);
    let rows: Vec<Vec<(u32, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::new();
            'pixel: for x in 0..w {
                // negated so a NaN confidence fails the gate
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(confidence.at(y, x, 0) > thresholds.conf) {
                    continue;
                }
                let d0 = depths[0].at(y, x, 0);
                if d0 <= 0.0 || !d0.is_finite() {
                    continue;
                }
                let mut observed = Vec::with_capacity(n);
                observed.push(d0);
                for (i, (fwd, bwd)) in maps.iter().enumerate() {
                    let Some(rp) = reproject_mapped(x, y, d0, &depths[i + 1], fwd, bwd)
                    else {
                        continue 'pixel;
                    };
                    let (e_reproj, e_geo) = per_view_errors(x, y, d0, &rp);
                    if !(e_reproj < thresholds.reproj && e_geo < thresholds.geo) {
                        continue 'pixel;
                    }
                    observed.push(rp.depth);
                }
                row.push(((y * w + x) as u32, observed));
            }
            row
        })
        .collect();

    Ok(ValidatedDepths {
        h,
        w,
        n_views: n,
        entries: rows.into_iter().flatten().collect(),
    })
}

/// 0/1 mask of validated pixels, ready for PFM export.
pub fn validated_mask(v: &ValidatedDepths) -> Grid {
    let mut mask = Grid::zeros(v.h, v.w, 1);
    for &(px, _) in &v.entries {
        mask.data_mut()[px as usize] = 1.0;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, GeometryKind, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // power-of-two focal and dyadic principal point keep K·K⁻¹ exactly the
    // identity in f64, so identity-rig round trips are bit-exact
    fn ident_cam(h: usize, w: usize) -> CameraModel {
        let mut k = nalgebra::Matrix3::identity();
        k[(0, 0)] = 128.0;
        k[(1, 1)] = 128.0;
        k[(0, 2)] = (w as f64 - 1.0) / 2.0;
        k[(1, 2)] = (h as f64 - 1.0) / 2.0;
        CameraModel {
            k,
            r: nalgebra::Matrix3::identity(),
            t: nalgebra::Vector3::zeros(),
            depth_min: 3.0,
            depth_max: 6.0,
        }
    }

    fn translated(cam: &CameraModel, dx: f64) -> CameraModel {
        let mut c = cam.clone();
        c.t = nalgebra::Vector3::new(-dx, 0.0, 0.0);
        c
    }

    #[test]
    fn default_thresholds_and_positivity() {
        let t = CheckThresholds::default();
        assert_eq!((t.conf, t.reproj, t.geo), (0.15, 1.0, 0.01));
        assert!(t.validate().is_ok());
        assert!(CheckThresholds { conf: 0.0, ..t }.validate().is_err());
        assert!(CheckThresholds { reproj: -1.0, ..t }.validate().is_err());
        assert!(CheckThresholds {
            geo: f64::NAN,
            ..t
        }
        .validate()
        .is_err());
    }

    #[test]
    fn identity_rig_round_trips_exactly() {
        let cam = ident_cam(6, 8);
        let depth = Grid::new(6, 8, 1, 4.5);
        for (y, x) in [(0usize, 0usize), (3, 4), (5, 7)] {
            let rp = reproject(x, y, &depth, &depth, &cam, &cam).unwrap();
            assert_eq!((rp.x, rp.y), (x as f64, y as f64));
            assert_eq!(rp.depth, 4.5);
            let (er, eg) = per_view_errors(x, y, depth.at(y, x, 0), &rp);
            assert_eq!((er, eg), (0.0, 0.0));
        }
    }

    #[test]
    fn frozen_error_arithmetic() {
        // landing displaced by (0.6, 0.8) px → Euclidean error exactly 1
        let rp = Reprojection {
            x: 3.6,
            y: 4.8,
            depth: 5.0,
        };
        let (er, eg) = per_view_errors(3, 4, 5.0, &rp);
        assert!((er - 1.0).abs() < 1e-12);
        assert_eq!(eg, 0.0);

        // observed 5.1 against own 5.0 → relative error 0.02
        let rp = Reprojection {
            x: 3.0,
            y: 4.0,
            depth: 5.1,
        };
        let (er, eg) = per_view_errors(3, 4, 5.0, &rp);
        assert_eq!(er, 0.0);
        assert!((eg - 0.02).abs() < 1e-12);
    }

    #[test]
    fn constant_depth_rig_round_trips_to_machine_precision() {
        // fronto-parallel plane seen by two translated, unrotated cameras:
        // the depth grids are exact at every continuous location, so the
        // only error left is the transform chain's own arithmetic
        let (h, w) = (12usize, 16);
        let c0 = ident_cam(h, w);
        let c1 = translated(&c0, 0.2);
        let depth = Grid::new(h, w, 1, 4.0);
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                let Some(rp) = reproject(x, y, &depth, &depth, &c0, &c1) else {
                    continue;
                };
                let (er, eg) = per_view_errors(x, y, 4.0, &rp);
                assert!(er < 1e-6, "landing error {er} at ({y},{x})");
                assert!(eg < 1e-12, "depth error {eg} at ({y},{x})");
                checked += 1;
            }
        }
        assert!(checked > h * w / 2, "only {checked} pixels round-tripped");
    }

    #[test]
    fn perturbed_source_depth_makes_both_errors_positive() {
        let (h, w) = (12usize, 16);
        let c0 = ident_cam(h, w);
        let c1 = translated(&c0, 0.3);
        let depth = Grid::new(h, w, 1, 4.0);
        let bumped = Grid::new(h, w, 1, 4.4);
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                let Some(rp) = reproject(x, y, &depth, &bumped, &c0, &c1) else {
                    continue;
                };
                let (er, eg) = per_view_errors(x, y, 4.0, &rp);
                assert!(er > 0.0, "landing error not positive at ({y},{x})");
                assert!(eg > 0.0, "depth error not positive at ({y},{x})");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn out_of_frame_and_bad_depths_fail_the_view() {
        let (h, w) = (8usize, 10);
        let c0 = ident_cam(h, w);
        // huge baseline throws every pixel out of the source frame
        let far = translated(&c0, 100.0);
        let depth = Grid::new(h, w, 1, 4.0);
        assert!(reproject(4, 4, &depth, &depth, &c0, &far).is_none());

        // nonpositive sampled source depth
        let c1 = translated(&c0, 0.3);
        let dead = Grid::new(h, w, 1, -1.0);
        assert!(reproject(4, 4, &depth, &dead, &c0, &c1).is_none());

        // nonpositive reference depth
        let zero = Grid::new(h, w, 1, 0.0);
        assert!(reproject(4, 4, &zero, &depth, &c0, &c1).is_none());
    }

    #[test]
    fn gt_depths_validate_nearly_all_covisible_pixels() {
        let scene = render_scene(&SceneSpec {
            seed: 11,
            kind: GeometryKind::SphereOnPlane,
            height: 64,
            width: 80,
            n_views: 4,
            lighting_jitter: false,
        })
        .unwrap();
        let conf = Grid::new(64, 80, 1, 1.0);
        let v = validate(
            &scene.gt_depth,
            &conf,
            &scene.cams,
            &CheckThresholds::default(),
        )
        .unwrap();
        let validated_ratio = v.entries.len() as f64 / (64.0 * 80.0);
        let covis = scene.covisible_ratio(0, scene.spec.n_views - 1);
        assert!(
            validated_ratio >= covis - 0.02,
            "validated {validated_ratio:.4} vs co-visible {covis:.4}"
        );
    }

    #[test]
    fn zero_confidence_empties_the_set_and_boundaries_are_strict() {
        let (h, w) = (8usize, 10);
        let c0 = ident_cam(h, w);
        let c1 = translated(&c0, 0.2);
        let cams = [c0, c1];
        let depths = [Grid::new(h, w, 1, 4.0), Grid::new(h, w, 1, 4.0)];

        let none = validate(
            &depths,
            &Grid::zeros(h, w, 1),
            &cams,
            &CheckThresholds::default(),
        )
        .unwrap();
        assert!(none.entries.is_empty());

        // confidence exactly at the threshold fails the strict ">"
        let at = validate(
            &depths,
            &Grid::new(h, w, 1, 0.15),
            &cams,
            &CheckThresholds::default(),
        )
        .unwrap();
        assert!(at.entries.is_empty());
        let above = validate(
            &depths,
            &Grid::new(h, w, 1, 0.15 + 1e-9),
            &cams,
            &CheckThresholds::default(),
        )
        .unwrap();
        assert!(!above.entries.is_empty());

        // identity-rig pair with ref depth 4 and source depth 5 gives a
        // relative depth error of exactly 0.25; "<" must reject it
        let ident = [ident_cam(h, w), ident_cam(h, w)];
        let split = [Grid::new(h, w, 1, 4.0), Grid::new(h, w, 1, 5.0)];
        let conf = Grid::new(h, w, 1, 1.0);
        let t_at = CheckThresholds {
            geo: 0.25,
            reproj: 10.0,
            ..CheckThresholds::default()
        };
        assert!(validate(&split, &conf, &ident, &t_at)
            .unwrap()
            .entries
            .is_empty());
        let t_above = CheckThresholds {
            geo: 0.2500001,
            ..t_at
        };
        assert_eq!(
            validate(&split, &conf, &ident, &t_above).unwrap().entries.len(),
            h * w
        );
    }

    /// Straight-line single-threaded reimplementation used as an oracle.
    fn validate_by_hand(
        depths: &[Grid],
        confidence: &Grid,
        cams: &[CameraModel],
        t: &CheckThresholds,
    ) -> Vec<(u32, Vec<f64>)> {
        let (h, w) = (depths[0].h(), depths[0].w());
        let mut out = Vec::new();
        for y in 0..h {
            'px: for x in 0..w {
                if confidence.at(y, x, 0) <= t.conf {
                    continue;
                }
                let d0 = depths[0].at(y, x, 0);
                if d0 <= 0.0 {
                    continue;
                }
                let mut obs = vec![d0];
                for i in 1..depths.len() {
                    let Some(rp) = reproject(x, y, &depths[0], &depths[i], &cams[0], &cams[i])
                    else {
                        continue 'px;
                    };
                    let (er, eg) = per_view_errors(x, y, d0, &rp);
                    if er >= t.reproj || eg >= t.geo {
                        continue 'px;
                    }
                    obs.push(rp.depth);
                }
                out.push(((y * w + x) as u32, obs));
            }
        }
        out
    }

    fn noisy_instance(seed: u64, h: usize, w: usize) -> (Vec<Grid>, Grid, Vec<CameraModel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = ident_cam(h, w);
        let cams = vec![
            c0.clone(),
            translated(&c0, 0.1),
            translated(&c0, -0.08),
        ];
        let depths: Vec<Grid> = (0..3)
            .map(|_| {
                let mut g = Grid::new(h, w, 1, 4.0);
                for v in g.data_mut() {
                    *v += rng.gen_range(-0.05..0.05);
                }
                g
            })
            .collect();
        let conf = {
            let mut g = Grid::zeros(h, w, 1);
            for v in g.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            g
        };
        (depths, conf, cams)
    }

    #[test]
    fn matches_brute_force_reference_on_random_instance() {
        let (depths, conf, cams) = noisy_instance(17, 16, 16);
        let t = CheckThresholds::default();
        let fast = validate(&depths, &conf, &cams, &t).unwrap();
        let slow = validate_by_hand(&depths, &conf, &cams, &t);
        assert!(!slow.is_empty(), "degenerate instance: nothing validated");
        assert!(slow.len() < 256, "degenerate instance: everything validated");
        assert_eq!(fast.entries, slow);
    }

    #[test]
    fn tightening_thresholds_never_grows_the_set() {
        let (depths, conf, cams) = noisy_instance(29, 16, 16);
        let grids = [
            CheckThresholds {
                conf: 0.30,
                reproj: 2.0,
                geo: 0.020,
            },
            CheckThresholds {
                conf: 0.20,
                reproj: 1.5,
                geo: 0.015,
            },
            CheckThresholds {
                conf: 0.15,
                reproj: 1.0,
                geo: 0.010,
            },
            CheckThresholds {
                conf: 0.10,
                reproj: 0.5,
                geo: 0.005,
            },
        ];
        // note conf moves the opposite way: smaller conf threshold ADMITS
        // more pixels, so these four settings are not mutually nested —
        // compare each against its direct error-tightened successor with
        // conf pinned, and separately check conf monotonicity alone
        for pair in grids.windows(2) {
            let loose = CheckThresholds {
                conf: 0.15,
                ..pair[0]
            };
            let tight = CheckThresholds {
                conf: 0.15,
                ..pair[1]
            };
            let a = validate(&depths, &conf, &cams, &loose).unwrap();
            let b = validate(&depths, &conf, &cams, &tight).unwrap();
            let set: std::collections::HashSet<u32> =
                a.entries.iter().map(|e| e.0).collect();
            assert!(
                b.entries.len() <= a.entries.len(),
                "tightening grew the set: {} -> {}",
                a.entries.len(),
                b.entries.len()
            );
            assert!(b.entries.iter().all(|e| set.contains(&e.0)));
        }
        for pair in grids.windows(2) {
            let lo = CheckThresholds {
                reproj: 1.0,
                geo: 0.010,
                ..pair[0]
            };
            let hi = CheckThresholds {
                reproj: 1.0,
                geo: 0.010,
                ..pair[1]
            };
            let a = validate(&depths, &conf, &cams, &lo).unwrap();
            let b = validate(&depths, &conf, &cams, &hi).unwrap();
            // raising the confidence bar can only shrink the set
            assert!(b.entries.len() >= a.entries.len());
        }
    }

    #[test]
    fn validated_pixels_have_better_depth_than_rejected_covisible_ones() {
        // teacher-like depths: accurate in a quiet zone, corrupted by
        // independent per-view noise in a band — cross-view agreement
        // should keep the quiet zone and drop the band
        let scene = render_scene(&SceneSpec {
            seed: 23,
            kind: GeometryKind::TiltedPlanes,
            height: 32,
            width: 40,
            n_views: 3,
            lighting_jitter: false,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let depths: Vec<Grid> = scene
            .gt_depth
            .iter()
            .map(|g| {
                let mut d = g.clone();
                let w = d.w();
                for (px, v) in d.data_mut().iter_mut().enumerate() {
                    let x = px % w;
                    if x >= w / 2 {
                        *v += rng.gen_range(-0.4..0.4);
                    }
                }
                d
            })
            .collect();
        let conf = Grid::new(32, 40, 1, 1.0);
        let v = validate(
            &depths,
            &conf,
            &scene.cams,
            &CheckThresholds::default(),
        )
        .unwrap();
        let mask = validated_mask(&v);

        let covis: Vec<Grid> = (1..3).map(|i| scene.covisibility(0, i)).collect();
        let mut val_err = Vec::new();
        let mut rej_err = Vec::new();
        for y in 0..32 {
            for x in 0..40 {
                if covis.iter().any(|m| m.at(y, x, 0) < 0.5) {
                    continue;
                }
                let err = (depths[0].at(y, x, 0) - scene.gt_depth[0].at(y, x, 0)).abs();
                if mask.at(y, x, 0) > 0.5 {
                    val_err.push(err);
                } else {
                    rej_err.push(err);
                }
            }
        }
        let median = |v: &mut Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(val_err.len() > 50, "only {} validated", val_err.len());
        assert!(rej_err.len() > 50, "only {} rejected", rej_err.len());
        let mv = median(&mut val_err);
        let mr = median(&mut rej_err);
        assert!(
            mv < mr,
            "validated median {mv} not better than rejected {mr}"
        );
    }

    #[test]
    fn mask_and_sidecar_round_trip_through_files() {
        let (depths, conf, cams) = noisy_instance(31, 12, 12);
        let v = validate(&depths, &conf, &cams, &CheckThresholds::default()).unwrap();
        assert!(!v.entries.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let mask_path = dir.path().join("mask.pfm");
        let side_path = dir.path().join("depths.kdvd");
        crate::io::pfm::write(&mask_path, &validated_mask(&v)).unwrap();
        crate::io::sidecar::write_validated(&side_path, &v).unwrap();

        let mask_back = crate::io::pfm::read(&mask_path).unwrap();
        assert_eq!(mask_back.data(), validated_mask(&v).data());
        let side_back = crate::io::sidecar::read_validated(&side_path).unwrap();
        assert_eq!(side_back, v);

        // every flagged pixel carries N depths; unflagged pixels carry none
        assert!(v.entries.iter().all(|(_, d)| d.len() == v.n_views));
        let flagged: std::collections::HashSet<u32> =
            v.entries.iter().map(|e| e.0).collect();
        for px in 0..144u32 {
            let on = validated_mask(&v).data()[px as usize] > 0.5;
            assert_eq!(on, flagged.contains(&px));
        }
    }
}
