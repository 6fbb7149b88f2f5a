//! Self-supervised consistency objective for teacher training.
//!
//! Two terms per (stage, source view): a photometric term comparing the
//! reference image against the source image warped at the predicted depth,
//! and a featuremetric term doing the same on the model's own feature maps.
//! Both are mean-over-channels ℓ1 on the warp-valid set; each view's sum is
//! divided by that view's own valid count before weighting, so a view with
//! little overlap doesn't get drowned out by well-covered ones.
//!
//! Lattice conventions differ between the two terms: feature maps live on
//! the stride-convolution lattice (intrinsics divided by the stage factor),
//! while stage-resolution images come from area downsampling, whose pixel
//! centers sit at block centers. Each term warps with the matching camera
//! model.

use crate::diff::{Tape, Var};
use crate::geometry::{warp_grid, CameraModel};
use crate::grid::Grid;
use crate::model::{stage_cameras, CascadeForward, STAGE_COUNT, STAGE_FACTORS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_fea: f64,
    pub lambda_photo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fea: 4.0,
            lambda_photo: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_fea < 0.0 || self.lambda_photo < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Distance used by the featuremetric term. L2 is the squared form, which
/// keeps the gradient finite at zero residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureDistance {
    #[default]
    L1,
    L2,
}

/// Sum over warp-valid pixels of the mean-over-channels ℓ1 difference
/// between the reference image and the source image warped at `depth`,
/// plus the validity mask. Averaging is the caller's job.
pub fn photometric_loss(
    ref_img: &Var,
    src_img: &Var,
    depth: &Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
) -> Result<(Var, Grid)> {
    if ref_img.shape().c != 3 || src_img.shape().c != 3 {
        return Err(Error::InvalidArgument(
            "photometric loss expects 3-channel images".into(),
        ));
    }
    masked_residual_sum(ref_img, src_img, depth, ref_cam, src_cam, FeatureDistance::L1)
}

/// Same warp-and-compare on feature grids from the online model; gradients
/// flow into both the depth and (through the features) the extractor.
pub fn featuremetric_loss(
    ref_feat: &Var,
    src_feat: &Var,
    depth: &Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    distance: FeatureDistance,
) -> Result<(Var, Grid)> {
    masked_residual_sum(ref_feat, src_feat, depth, ref_cam, src_cam, distance)
}

fn masked_residual_sum(
    ref_grid: &Var,
    src_grid: &Var,
    depth: &Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    distance: FeatureDistance,
) -> Result<(Var, Grid)> {
    if ref_grid.shape() != src_grid.shape() {
        return Err(Error::ShapeMismatch {
            left: ref_grid.shape(),
            right: src_grid.shape(),
            context: "reference vs source grid",
        });
    }
    let (warped, mask) = warp_grid(src_grid, depth, ref_cam, src_cam)?;
    let diff = warped.sub(ref_grid);
    let per_channel = match distance {
        FeatureDistance::L1 => diff.abs(),
        FeatureDistance::L2 => diff.square(),
    };
    let c = ref_grid.shape().c as f64;
    let per_pixel = per_channel.sum_channels().scale(1.0 / c);
    Ok((per_pixel.mul_mask(&mask).sum(), mask))
}

fn valid_count(mask: &Grid) -> usize {
    mask.sum().round() as usize
}

/// One (stage, view) contribution, for reporting.
#[derive(Debug, Clone)]
pub struct StageViewTerm {
    pub stage: usize,
    pub view: usize,
    /// Mean photometric residual over that view's valid pixels.
    pub photo: f64,
    pub fea: f64,
    pub photo_valid: usize,
    pub fea_valid: usize,
}

pub struct TeacherLoss {
    pub total: Var,
    pub terms: Vec<StageViewTerm>,
}

/// Full objective over all stages and source views:
/// Σ_stage Σ_view λ_photo·(photo sum / valid) + λ_fea·(fea sum / valid).
/// Views with an empty valid set contribute nothing and are logged.
pub fn total_teacher_loss(
    tape: &Tape,
    fwd: &CascadeForward,
    images: &[Grid],
    cams: &[CameraModel],
    weights: &LossWeights,
    distance: FeatureDistance,
) -> Result<TeacherLoss> {
    weights.validate()?;
    let n = images.len();
    if n != cams.len() || n != fwd.pyramids.len() || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} images, {} cameras, {} pyramids; need matching counts >= 2",
            n,
            cams.len(),
            fwd.pyramids.len()
        )));
    }
    let mut total = tape.constant(Grid::zeros(1, 1, 1));
    let mut terms = Vec::new();
    for (stage, &factor) in STAGE_FACTORS.iter().enumerate().take(STAGE_COUNT) {
        let stage_imgs: Vec<Var> = images
            .iter()
            .map(|img| tape.constant(img.downsample_area(factor)))
            .collect();
        let photo_cams: Vec<CameraModel> = cams.iter().map(|c| c.scaled_by(factor)).collect();
        let feat_cams = stage_cameras(cams, stage);
        let depth = &fwd.stages[stage].depth;
        for view in 1..n {
            let (photo_sum, photo_mask) = photometric_loss(
                &stage_imgs[0],
                &stage_imgs[view],
                depth,
                &photo_cams[0],
                &photo_cams[view],
            )?;
            let (fea_sum, fea_mask) = featuremetric_loss(
                fwd.pyramids[0].stage(stage),
                fwd.pyramids[view].stage(stage),
                depth,
                &feat_cams[0],
                &feat_cams[view],
                distance,
            )?;
            let np = valid_count(&photo_mask);
            let nf = valid_count(&fea_mask);
            if np == 0 || nf == 0 {
                eprintln!(
                    "warning: stage {stage} view {view} has an empty valid set \
                     (photo {np}, fea {nf}); skipping this pair"
                );
                terms.push(StageViewTerm {
                    stage,
                    view,
                    photo: 0.0,
                    fea: 0.0,
                    photo_valid: np,
                    fea_valid: nf,
                });
                continue;
            }
            let term = photo_sum
                .scale(weights.lambda_photo / np as f64)
                .add(&fea_sum.scale(weights.lambda_fea / nf as f64));
            total = total.add(&term);
            terms.push(StageViewTerm {
                stage,
                view,
                photo: photo_sum.scalar() / np as f64,
                fea: fea_sum.scalar() / nf as f64,
                photo_valid: np,
                fea_valid: nf,
            });
        }
    }
    Ok(TeacherLoss { total, terms })
}

/// Mean over channels of the spatial variance of a feature grid. A collapsed
/// (constant) feature map scores 0.
pub fn feature_variance(feat: &Grid) -> f64 {
    let (h, w, c) = (feat.h(), feat.w(), feat.c());
    let n = (h * w) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = feat.at(y, x, ch);
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / n;
        total += (sum_sq / n - mean * mean).max(0.0);
    }
    total / c as f64
}
