//! Miniature coarse-to-fine plane-sweep stereo network.
//!
//! Three cascade stages at 1/4, 1/2 and full resolution share one small
//! convolutional feature extractor. Each stage sweeps a set of depth
//! hypotheses, warps every source view's features to the reference view at
//! each hypothesis, aggregates them into a variance cost volume, regularizes
//! it with two 3-D convolutions, and regresses depth as the probability-
//! weighted mean over hypotheses (soft argmin). Later stages re-center their
//! (finer) hypothesis windows on the upsampled previous depth; those window
//! centers stay on the tape, so one backward pass reaches the parameters
//! through the entire cascade.
//!
//! Per-stage confidence is the probability mass of the 4 hypotheses nearest
//! the regressed depth; the exported confidence map is the product over
//! stages. Confidence is reporting-only and deliberately off the tape.

use crate::diff::{concat_channels, Tape, Var};
use crate::geometry::{
    refined_hypotheses_diff, uniform_hypotheses, warp_grid, CameraModel, HypothesisSet,
};
use crate::grid::{BinaryOp, Grid, Shape};
use crate::io::checkpoint::Checkpoint;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FEAT_CHANNELS: usize = 8;
pub const STAGE_COUNT: usize = 3;
/// Downsampling factor of each stage relative to the input image.
pub const STAGE_FACTORS: [usize; STAGE_COUNT] = [4, 2, 1];
/// Cost assigned where fewer than 2 views see a hypothesis.
pub const SENTINEL_COST: f64 = 1e3;

/// Regularizer weights start as identity plus this much uniform noise, so
/// early probability volumes track the raw costs.
const REG_INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Depth hypotheses per stage, coarse to fine.
    pub d_counts: [usize; STAGE_COUNT],
    /// Per-stage hypothesis spacing as a multiple of the stage-0 interval.
    pub interval_scales: [f64; STAGE_COUNT],
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            d_counts: [32, 16, 8],
            interval_scales: [1.0, 0.5, 0.25],
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_counts.iter().any(|&d| d < 2) {
            return Err(Error::Config(
                "each stage needs at least 2 depth hypotheses".into(),
            ));
        }
        if self.interval_scales.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("interval scales must be positive".into()));
        }
        Ok(())
    }

    /// Stage-0 hypothesis spacing for a camera's depth range.
    pub fn base_interval(&self, cam: &CameraModel) -> f64 {
        (cam.depth_max - cam.depth_min) / (self.d_counts[0] - 1) as f64
    }

    /// Hypothesis spacing of `stage`.
    pub fn stage_interval(&self, cam: &CameraModel, stage: usize) -> f64 {
        self.base_interval(cam) * self.interval_scales[stage]
    }
}

/// (name, input channels, output channels, stride) of the six feature
/// convolutions. The stride-2 layers step down to the next pyramid level.
const FEATURE_LAYERS: [(&str, usize, usize, usize); 6] = [
    ("feat.c0", 3, FEAT_CHANNELS, 1),
    ("feat.c1", FEAT_CHANNELS, FEAT_CHANNELS, 1),
    ("feat.c2", FEAT_CHANNELS, FEAT_CHANNELS, 2),
    ("feat.c3", FEAT_CHANNELS, FEAT_CHANNELS, 1),
    ("feat.c4", FEAT_CHANNELS, FEAT_CHANNELS, 2),
    ("feat.c5", FEAT_CHANNELS, FEAT_CHANNELS, 1),
];

fn layer_shapes() -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    for &(name, cin, cout, _) in &FEATURE_LAYERS {
        out.push((format!("{name}.w"), Shape { h: 9 * cin, w: cout, c: 1 }));
        out.push((format!("{name}.b"), Shape { h: 1, w: 1, c: cout }));
    }
    for s in 0..STAGE_COUNT {
        for layer in 0..2 {
            out.push((format!("reg.s{s}.c{layer}.w"), Shape { h: 3, w: 3, c: 3 }));
            out.push((format!("reg.s{s}.c{layer}.b"), Shape { h: 1, w: 1, c: 1 }));
        }
    }
    out
}

/// All trainable parameters as named grids, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub seed: u64,
    entries: Vec<(String, Grid)>,
}

impl ModelParams {
    /// He-style uniform initialization of the feature extractor and
    /// near-identity initialization of the regularizers, deterministic in
    /// `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape) in layer_shapes() {
            let grid = if name.starts_with("feat.") && name.ends_with(".w") {
                let fan_in = shape.h; // 9 · cin for a 3×3 kernel
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut g = Grid::zeros(shape.h, shape.w, shape.c);
                for v in g.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
                g
            } else if name.starts_with("reg.") && name.ends_with(".w") {
                let mut g = Grid::zeros(3, 3, 3);
                for v in g.data_mut() {
                    *v = rng.gen_range(-REG_INIT_NOISE..REG_INIT_NOISE);
                }
                let center = g.at(1, 1, 1);
                g.set(1, 1, 1, 1.0 + center);
                g
            } else {
                Grid::zeros(shape.h, shape.w, shape.c)
            };
            entries.push((name, grid));
        }
        ModelParams { seed, entries }
    }

    pub fn entries(&self) -> &[(String, Grid)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Grid)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.all_finite())
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            config_hash,
            params: self.entries.clone(),
        }
    }

    /// Rebuilds parameters from a checkpoint, insisting on exactly the
    /// layer names and shapes this architecture defines.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let expected = layer_shapes();
        if ck.params.len() != expected.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter grids, expected {}",
                ck.params.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&ck.params) {
            if name != got_name {
                return Err(Error::Config(format!(
                    "checkpoint parameter '{got_name}' where '{name}' was expected"
                )));
            }
            if got.shape() != *shape {
                return Err(Error::ShapeMismatch {
                    left: got.shape(),
                    right: *shape,
                    context: "checkpoint parameter",
                });
            }
        }
        Ok(ModelParams {
            seed: ck.seed,
            entries: ck.params.clone(),
        })
    }

    /// Puts every parameter on `tape` as a trainable var.
    pub fn bind(&self, tape: &Tape) -> TapeParams {
        TapeParams {
            vars: self
                .entries
                .iter()
                .map(|(n, g)| (n.clone(), tape.param(g.clone())))
                .collect(),
        }
    }
}

/// The parameters of one forward pass, bound to a tape.
pub struct TapeParams {
    vars: Vec<(String, Var)>,
}

impl TapeParams {
    fn var(&self, name: &str) -> &Var {
        &self
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

/// Reference-frame feature grids at 1/4, 1/2 and full resolution.
pub struct FeaturePyramid {
    pub levels: [Var; STAGE_COUNT],
}

impl FeaturePyramid {
    /// The features consumed by `stage` (stage 0 is the 1/4 level).
    pub fn stage(&self, stage: usize) -> &Var {
        &self.levels[stage]
    }
}

/// Runs the shared feature extractor on one H×W×3 image var.
pub fn extract_features(image: &Var, params: &TapeParams) -> Result<FeaturePyramid> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::InvalidArgument(format!(
            "feature extractor expects 3 channels, got {s}"
        )));
    }
    if s.h % 4 != 0 || s.w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} not divisible by 4",
            s.h, s.w
        )));
    }
    let conv = |x: &Var, name: &str, stride: usize| {
        x.conv2d(
            params.var(&format!("{name}.w")),
            params.var(&format!("{name}.b")),
            3,
            stride,
        )
    };
    let full = conv(&conv(image, "feat.c0", 1).leaky_relu(0.1), "feat.c1", 1);
    let half = conv(&conv(&full, "feat.c2", 2).leaky_relu(0.1), "feat.c3", 1);
    let quarter = conv(&conv(&half, "feat.c4", 2).leaky_relu(0.1), "feat.c5", 1);
    Ok(FeaturePyramid {
        levels: [quarter, half, full],
    })
}

pub struct CostVolume {
    /// H×W×D masked feature variance per hypothesis.
    pub cost: Var,
    /// H×W×1, 1.0 where some hypothesis saw fewer than 2 views.
    pub low_support: Grid,
}

/// A total order on cameras so aggregation order — and therefore every last
/// floating-point bit — is independent of the order views are passed in.
fn camera_sort_key(cam: &CameraModel) -> Vec<f64> {
    let mut key = vec![cam.t.x, cam.t.y, cam.t.z];
    key.extend(cam.r.iter());
    key.extend(cam.k.iter());
    key
}

/// Plane-sweep cost volume: for each hypothesis, every source feature map is
/// warped into the reference view at that (per-pixel) depth and the views —
/// reference included — are aggregated by masked per-channel variance,
/// averaged over channels. Pixels seen by fewer than 2 views get
/// [`SENTINEL_COST`] and a flag.
pub fn build_cost_volume(
    ref_feat: &Var,
    src_feats: &[Var],
    ref_cam: &CameraModel,
    src_cams: &[CameraModel],
    hyp_depths: &[Var],
) -> Result<CostVolume> {
    if src_feats.is_empty() {
        return Err(Error::InvalidArgument(
            "cost volume needs at least one source view".into(),
        ));
    }
    if src_feats.len() != src_cams.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source features vs {} source cameras",
            src_feats.len(),
            src_cams.len()
        )));
    }
    let fs = ref_feat.shape();
    let (h, w, c) = (fs.h, fs.w, fs.c);
    for sf in src_feats {
        if sf.shape() != fs {
            return Err(Error::ShapeMismatch {
                left: sf.shape(),
                right: fs,
                context: "source feature grid",
            });
        }
    }
    let mut order: Vec<usize> = (0..src_feats.len()).collect();
    order.sort_by(|&a, &b| {
        camera_sort_key(&src_cams[a])
            .partial_cmp(&camera_sort_key(&src_cams[b]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut slices = Vec::with_capacity(hyp_depths.len());
    let mut low_support = Grid::zeros(h, w, 1);
    for depth_k in hyp_depths {
        let mut count = Grid::new(h, w, 1, 1.0); // reference always counts
        let mut sum = ref_feat.clone();
        let mut sum_sq = ref_feat.square();
        for &i in &order {
            let (warped, mask) = warp_grid(&src_feats[i], depth_k, ref_cam, &src_cams[i])?;
            count = count.map_binary(&mask, BinaryOp::Add)?;
            sum = sum.add(&warped);
            sum_sq = sum_sq.add(&warped.square());
        }
        let inv = count.map(|m| 1.0 / m);
        let mean = sum.mul_mask(&inv);
        let var = sum_sq.mul_mask(&inv).sub(&mean.square());
        let cost_k = var.sum_channels().scale(1.0 / c as f64);

        let supported = count.map(|m| if m >= 2.0 { 1.0 } else { 0.0 });
        for (f, s) in low_support.data_mut().iter_mut().zip(supported.data()) {
            if *s < 0.5 {
                *f = 1.0;
            }
        }
        let sentinel = supported.map(|s| (1.0 - s) * SENTINEL_COST);
        slices.push(cost_k.mul_mask(&supported).add_cgrid(&sentinel));
    }
    let refs: Vec<&Var> = slices.iter().collect();
    Ok(CostVolume {
        cost: concat_channels(&refs),
        low_support,
    })
}

/// Cost volume → per-pixel distribution over hypotheses: negate (low cost =
/// good), two 3×3×3 convolutions over space × hypothesis with a leaky-ReLU
/// between, softmax over hypotheses.
pub fn regularize_to_probability(cost: &Var, params: &TapeParams, stage: usize) -> Var {
    let conv = |x: &Var, layer: usize| {
        x.conv3d_volume(
            params.var(&format!("reg.s{stage}.c{layer}.w")),
            params.var(&format!("reg.s{stage}.c{layer}.b")),
        )
    };
    let scores = conv(&conv(&cost.scale(-1.0), 0).leaky_relu(0.1), 1);
    scores.softmax_channels()
}

/// Probability-weighted mean of the hypothesis depths (H×W×D each).
pub fn soft_argmin(prob: &Var, hyp_volume: &Var) -> Var {
    prob.mul(hyp_volume).sum_channels()
}

/// Probability mass of the 4 hypotheses nearest the regressed depth
/// (all of them when D < 4), clamped to [0, 1]. Reporting-only.
pub fn confidence(prob: &Grid, hyps: &Grid, depth: &Grid) -> Grid {
    let (h, w, d) = (prob.h(), prob.w(), prob.c());
    Grid::from_fn(h, w, |y, x| {
        if d <= 4 {
            return prob.pixel(y, x).iter().sum::<f64>().clamp(0.0, 1.0);
        }
        let target = depth.at(y, x, 0);
        let hp = hyps.pixel(y, x);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| {
            (hp[a] - target)
                .abs()
                .partial_cmp(&(hp[b] - target).abs())
                .unwrap()
        });
        idx[..4]
            .iter()
            .map(|&k| prob.at(y, x, k))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    })
}

/// Everything one cascade stage produces. `depth` and `probability` live on
/// the tape (losses differentiate through them); the rest are plain grids.
pub struct StageOutput {
    pub depth: Var,
    pub probability: Var,
    pub hypotheses: HypothesisSet,
    pub confidence: Grid,
    pub low_support: Grid,
}

pub struct CascadeForward {
    pub stages: Vec<StageOutput>,
    /// Product of the per-stage confidences, upsampled to full resolution.
    pub final_confidence: Grid,
    /// The parameter vars of this pass, for gradient extraction by name.
    pub params: TapeParams,
    /// Per-view feature pyramids (index 0 = reference), still on the tape;
    /// consistency losses warp these across views.
    pub pyramids: Vec<FeaturePyramid>,
}

/// The per-stage camera models the cascade works with: intrinsics divided by
/// the stage factor so pixel (0,0) of the strided feature lattice stays on
/// the full-resolution pixel (0,0) ray.
pub fn stage_cameras(cams: &[CameraModel], stage: usize) -> Vec<CameraModel> {
    cams.iter()
        .map(|c| c.scaled_origin_aligned(STAGE_FACTORS[stage]))
        .collect()
}

/// Full three-stage forward pass. `images[0]`/`cams[0]` is the reference
/// view. All grids f64; images H×W×3 with H, W divisible by 4.
pub fn forward_cascade(
    tape: &Tape,
    images: &[Grid],
    cams: &[CameraModel],
    params: &ModelParams,
    cfg: &CascadeConfig,
) -> Result<CascadeForward> {
    cfg.validate()?;
    if images.len() < 2 || images.len() != cams.len() {
        return Err(Error::InvalidArgument(format!(
            "need n images with n cameras, n >= 2; got {} and {}",
            images.len(),
            cams.len()
        )));
    }
    let s0 = images[0].shape();
    for img in images {
        if img.shape() != s0 {
            return Err(Error::ShapeMismatch {
                left: img.shape(),
                right: s0,
                context: "input image",
            });
        }
    }
    for cam in cams {
        cam.validate()?;
    }
    let ref_cam = &cams[0];
    let (depth_min, depth_max) = (ref_cam.depth_min, ref_cam.depth_max);
    let base_interval = cfg.base_interval(ref_cam);

    let bound = params.bind(tape);
    let pyramids: Vec<FeaturePyramid> = images
        .iter()
        .map(|img| extract_features(&tape.constant(img.clone()), &bound))
        .collect::<Result<_>>()?;

    let mut stages: Vec<StageOutput> = Vec::with_capacity(STAGE_COUNT);
    for stage in 0..STAGE_COUNT {
        let factor = STAGE_FACTORS[stage];
        let (hs, ws) = (s0.h / factor, s0.w / factor);
        let stage_cams = stage_cameras(cams, stage);
        let interval = base_interval * cfg.interval_scales[stage];

        let hyp_vars: Vec<Var> = if stage == 0 {
            let set = uniform_hypotheses(hs, ws, cfg.d_counts[0], depth_min, depth_max)?;
            (0..cfg.d_counts[0])
                .map(|k| tape.constant(set.depths.channel(k)))
                .collect()
        } else {
            refined_hypotheses_diff(
                &stages[stage - 1].depth,
                2,
                cfg.d_counts[stage],
                interval,
                depth_min,
                depth_max,
            )?
        };

        let ref_feat = pyramids[0].stage(stage);
        let src_feats: Vec<Var> = pyramids[1..]
            .iter()
            .map(|p| p.stage(stage).clone())
            .collect();
        let volume = build_cost_volume(
            ref_feat,
            &src_feats,
            &stage_cams[0],
            &stage_cams[1..],
            &hyp_vars,
        )?;
        let prob = regularize_to_probability(&volume.cost, &bound, stage);
        let hyp_refs: Vec<&Var> = hyp_vars.iter().collect();
        let hyp_volume = concat_channels(&hyp_refs);
        let depth = soft_argmin(&prob, &hyp_volume);

        let prob_plain = prob.detach();
        let hyps_plain = hyp_volume.detach();
        let conf = confidence(&prob_plain, &hyps_plain, &depth.detach());
        stages.push(StageOutput {
            depth,
            probability: prob,
            hypotheses: HypothesisSet {
                depths: hyps_plain,
                interval,
            },
            confidence: conf,
            low_support: volume.low_support,
        });
    }

    let mut final_confidence = Grid::new(s0.h, s0.w, 1, 1.0);
    for (stage, out) in stages.iter().enumerate() {
        let up = out.confidence.upsample_nearest(STAGE_FACTORS[stage]);
        final_confidence = final_confidence.map_binary(&up, BinaryOp::Mul)?;
    }
    Ok(CascadeForward {
        stages,
        final_confidence,
        params: bound,
        pyramids,
    })
}
