//! Depth-map fusion into point clouds and the evaluation metrics.
//!
//! Fusion lifts every masked pixel of every view to a world point through
//! its camera and concatenates the views, with optional voxel
//! de-duplication. Cloud quality is scored by bidirectional capped
//! nearest-neighbor distance (accuracy = prediction→reference,
//! completeness = reference→prediction, overall = their mean); depth maps
//! by endpoint error and outlier percentages after normalizing the depth
//! range to a fixed span so scenes with different ranges compare.

use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashMap;
use std::path::Path;

use crate::geometry::CameraModel;
use crate::grid::Grid;
use crate::{io, Error, Result};

/// World-space points with optional per-point color.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    /// Validates finiteness and color count.
    pub fn new(points: Vec<[f64; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite point coordinate {p:?}"
            )));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        io::ply::write(path, &self.points, self.colors.as_deref())
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let (points, colors) = io::ply::read(path)?;
        PointCloud::new(points, colors)
    }
}

/// Lifts every pixel with mask > 0.5 to a world point; views concatenate
/// in order, pixels in row-major order. `images` (H×W×3, values in [0,1])
/// attaches colors; `voxel` keeps only the first point landing in each
/// cubic cell of that size. Empty output is legal.
pub fn fuse(
    depths: &[Grid],
    masks: &[Grid],
    cams: &[CameraModel],
    images: Option<&[Grid]>,
    voxel: Option<f64>,
) -> Result<PointCloud> {
    if depths.len() != masks.len() || depths.len() != cams.len() {
        return Err(Error::InvalidArgument(format!(
            "{} depth maps, {} masks, {} cameras",
            depths.len(),
            masks.len(),
            cams.len()
        )));
    }
    if let Some(imgs) = images {
        if imgs.len() != depths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} depth maps",
                imgs.len(),
                depths.len()
            )));
        }
    }
    if let Some(v) = voxel {
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "voxel cell size must be positive, got {v}"
            )));
        }
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (view, (depth, mask)) in depths.iter().zip(masks).enumerate() {
        let shape = depth.shape();
        if mask.shape().h != shape.h || mask.shape().w != shape.w {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: mask.shape(),
                context: "fuse: depth vs mask",
            });
        }
        let cam = &cams[view];
        for y in 0..shape.h {
            for x in 0..shape.w {
                if mask.at(y, x, 0) <= 0.5 {
                    continue;
                }
                let d = depth.at(y, x, 0);
                if d <= 0.0 || !d.is_finite() {
                    continue;
                }
                let p = cam.lift(x as f64, y as f64, d);
                points.push([p.x, p.y, p.z]);
                if let Some(imgs) = images {
                    let px = imgs[view].pixel(y, x);
                    colors.push([
                        (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]);
                }
            }
        }
    }
    if let Some(cell) = voxel {
        let mut seen: HashMap<[i64; 3], ()> = HashMap::new();
        let mut kept_points = Vec::new();
        let mut kept_colors = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let key = [
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                (p[2] / cell).floor() as i64,
            ];
            if seen.insert(key, ()).is_none() {
                kept_points.push(*p);
                if images.is_some() {
                    kept_colors.push(colors[i]);
                }
            }
        }
        points = kept_points;
        colors = kept_colors;
    }
    PointCloud::new(points, images.map(|_| colors))
}

/// Uniform spatial hash with cell size = the distance cap: a query whose
/// true nearest neighbor is farther than one cell in any axis is at least
/// `cap` away, so scanning the 3×3×3 neighborhood gives the exact capped
/// distance.
struct HashGrid<'a> {
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: &'a [[f64; 3]],
    cell: f64,
}

impl<'a> HashGrid<'a> {
    fn build(points: &'a [[f64; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        HashGrid {
            cells,
            points,
            cell,
        }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Distance from `q` to the nearest stored point, capped at the cell
    /// size.
    fn capped_distance(&self, q: &[f64; 3]) -> f64 {
        let k = Self::key(q, self.cell);
        let mut best_sq = self.cell * self.cell;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &i in ids {
                        let p = &self.points[i];
                        let d_sq = (p[0] - q[0]).powi(2)
                            + (p[1] - q[1]).powi(2)
                            + (p[2] - q[2]).powi(2);
                        best_sq = best_sq.min(d_sq);
                    }
                }
            }
        }
        // min() again because sqrt(cell²) can land one ulp above cell
        best_sq.sqrt().min(self.cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccComp {
    /// Mean capped distance from predicted points to the reference cloud.
    pub accuracy: f64,
    /// Mean capped distance from reference points to the predicted cloud.
    pub completeness: f64,
    pub overall: f64,
}

/// Bidirectional capped nearest-neighbor score between two clouds.
pub fn acc_comp(pred: &PointCloud, gt: &PointCloud, d_max: f64) -> Result<AccComp> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "predicted point cloud is empty".into(),
        ));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument(
            "reference point cloud is empty".into(),
        ));
    }
    if d_max <= 0.0 || !d_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "distance cap must be positive, got {d_max}"
        )));
    }
    let mean_capped = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let grid = HashGrid::build(to, d_max);
        // parallel distance evaluation, then an ordered sequential sum so
        // the reduction is deterministic
        let dists: Vec<f64> = from.par_iter().map(|q| grid.capped_distance(q)).collect();
        dists.iter().sum::<f64>() / from.len() as f64
    };
    let accuracy = mean_capped(&pred.points, &gt.points);
    let completeness = mean_capped(&gt.points, &pred.points);
    Ok(AccComp {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
    })
}

/// Span every depth range is normalized to before computing depth errors.
pub const DEPTH_NORM_DEFAULT: f64 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute normalized depth error over the mask.
    pub epe: f64,
    /// Percentage of masked pixels with normalized error > 1, in [0, 100].
    pub e1: f64,
    /// Percentage of masked pixels with normalized error > 3, in [0, 100].
    pub e3: f64,
}

/// Depth error metrics over masked pixels, after scaling depths by
/// `norm / (depth_max − depth_min)`.
pub fn depth_metrics(
    pred: &Grid,
    gt: &Grid,
    mask: &Grid,
    depth_min: f64,
    depth_max: f64,
    norm: f64,
) -> Result<DepthMetrics> {
    let shape = pred.shape();
    if gt.shape() != shape || mask.shape().h != shape.h || mask.shape().w != shape.w {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: if gt.shape() != shape {
                gt.shape()
            } else {
                mask.shape()
            },
            context: "depth_metrics",
        });
    }
    // negated so NaN bounds are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(depth_max > depth_min) || norm <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate depth range [{depth_min}, {depth_max}] or norm {norm}"
        )));
    }
    let s = norm / (depth_max - depth_min);
    let rows: Vec<(f64, usize, usize, usize)> = (0..shape.h)
        .into_par_iter()
        .map(|y| {
            let (mut sum, mut n, mut n1, mut n3) = (0.0, 0usize, 0usize, 0usize);
            for x in 0..shape.w {
                if mask.at(y, x, 0) <= 0.5 {
                    continue;
                }
                let err = (s * (pred.at(y, x, 0) - gt.at(y, x, 0))).abs();
                sum += err;
                n += 1;
                n1 += (err > 1.0) as usize;
                n3 += (err > 3.0) as usize;
            }
            (sum, n, n1, n3)
        })
        .collect();
    let (sum, n, n1, n3) = rows.iter().fold((0.0, 0, 0, 0), |a, r| {
        (a.0 + r.0, a.1 + r.1, a.2 + r.2, a.3 + r.3)
    });
    if n == 0 {
        return Err(Error::InvalidArgument(
            "depth metric mask selects no pixels".into(),
        ));
    }
    Ok(DepthMetrics {
        epe: sum / n as f64,
        e1: 100.0 * n1 as f64 / n as f64,
        e3: 100.0 * n3 as f64 / n as f64,
    })
}

/// Cloud points as nalgebra vectors, for geometric checks.
pub fn as_vectors(cloud: &PointCloud) -> Vec<Vector3<f64>> {
    cloud
        .points
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect()
}
