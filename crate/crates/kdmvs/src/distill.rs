//! Gaussian pseudo-labels and the distributional distillation loss.
//!
//! Validated depth observations for a pixel become a Gaussian (μ, σ²) by
//! maximum likelihood: μ is the mean of the N observations, σ² their biased
//! (1/N) variance, floored so a zero-spread pixel still has finite width.
//! A student trained against these labels may hypothesize depths anywhere,
//! so the Gaussian is re-discretized per stage onto the student's own
//! per-pixel hypothesis depths at every step — labels transfer between
//! models that never share a depth sampling.
//!
//! The loss is the symmetric divergence Σ_k (P_k − P̂_k)·log(P_k/P̂_k)
//! (equal to forward KL plus reverse KL), averaged over validated pixels
//! and summed over stages. The target P is a plain constant on the tape:
//! gradients reach the student only through its predicted volume P̂. Both
//! ratio arguments are floored at 1e-12 inside the log so a fully confident
//! prediction meeting an underflowed target stays finite either way.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::grid::Grid;
use crate::io::sidecar::{PseudoLabelFile, ValidatedDepths};
use crate::model::{CascadeForward, STAGE_FACTORS};
use crate::{Error, Result};

/// Floor applied to both probability arguments inside the log ratio.
pub const LOG_FLOOR: f64 = 1e-12;

/// How Gaussian density values over the hypothesis grid turn into a
/// discrete distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeMode {
    /// Softmax of the density values themselves. Default; scale-sensitive
    /// in σ (a sharp Gaussian's peak density towers over the rest, a wide
    /// one's densities tie and the softmax flattens toward uniform).
    #[default]
    Softmax,
    /// Densities normalized by their sum — the distribution a shrinking
    /// bin width converges to.
    Sum,
}

/// Divergence used by [`distill_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// Σ (P−P̂)·log(P/P̂): forward plus reverse KL, symmetric in value.
    #[default]
    Jeffreys,
    /// Σ P·log(P/P̂): plain forward KL, for ablation.
    KlForward,
}

/// σ² floor: a twentieth of the finest-stage hypothesis interval, squared.
/// Keeps zero-spread labels from becoming delta spikes whose log-ratios
/// explode.
pub fn variance_floor(finest_interval: f64) -> f64 {
    (0.05 * finest_interval).powi(2)
}

/// Fits one Gaussian per validated pixel. μ is clamped into
/// [depth_min, depth_max]; σ² is floored at `eps`.
pub fn encode(
    validated: &ValidatedDepths,
    eps: f64,
    depth_min: f64,
    depth_max: f64,
) -> Result<PseudoLabelFile> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!(
            "variance floor must be positive, got {eps}"
        )));
    }
    if validated.n_views == 0 {
        return Err(Error::InvalidArgument(
            "validated depth set reports zero views".into(),
        ));
    }
    let n = validated.n_views as f64;
    let entries = validated
        .entries
        .iter()
        .map(|(px, depths)| {
            let mu = depths.iter().sum::<f64>() / n;
            let var = depths.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
            (*px, mu.clamp(depth_min, depth_max), var.max(eps))
        })
        .collect();
    Ok(PseudoLabelFile {
        h: validated.h,
        w: validated.w,
        entries,
    })
}

/// Discretizes one Gaussian onto strictly increasing hypothesis depths.
/// Returns `None` when every density underflows to zero (mean far outside
/// the hypothesis span) — the pixel cannot be distilled on this grid.
pub fn gaussian_weights(
    mu: f64,
    sigma_sq: f64,
    depths: &[f64],
    mode: DiscretizeMode,
) -> Option<Vec<f64>> {
    debug_assert!(sigma_sq > 0.0);
    debug_assert!(
        depths.windows(2).all(|w| w[1] > w[0]),
        "hypothesis depths must be strictly increasing"
    );
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma_sq).sqrt();
    let densities: Vec<f64> = depths
        .iter()
        .map(|d| (-(d - mu) * (d - mu) / (2.0 * sigma_sq)).exp() * norm)
        .collect();
    if densities.iter().all(|&g| g == 0.0) {
        return None;
    }
    let mut weights = match mode {
        DiscretizeMode::Sum => densities,
        DiscretizeMode::Softmax => {
            // densities reach 1/(σ√2π), far past exp's overflow point at
            // the floored σ — shift by the max before exponentiating
            let top = densities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            densities.iter().map(|g| (g - top).exp()).collect()
        }
    };
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Some(weights)
}

/// Per-pixel divergence between a constant target volume and the student's
/// predicted volume, summed over hypotheses: H×W×D → H×W×1. Pixels whose
/// target rows are all zero produce garbage here and must be masked off by
/// the caller.
pub fn pairwise_divergence(target: &Grid, predicted: &Var, div: Divergence) -> Var {
    let log_target = target.map(|p| p.max(LOG_FLOOR).ln());
    let log_ratio = predicted
        .log_clamped(LOG_FLOOR)
        .scale(-1.0)
        .add_cgrid(&log_target);
    match div {
        Divergence::Jeffreys => predicted
            .scale(-1.0)
            .add_cgrid(target)
            .mul(&log_ratio)
            .sum_channels(),
        Divergence::KlForward => log_ratio.mul_cgrid(target).sum_channels(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DistillStats {
    /// Stage-pixels that contributed a divergence term.
    pub used: usize,
    /// Stage-pixels dropped because every density underflowed.
    pub dropped: usize,
    /// Stages skipped entirely for lack of validated pixels.
    pub empty_stages: usize,
}

/// Distillation loss of a cascade forward pass against pseudo-labels,
/// averaged over validated pixels per stage and summed over stages.
///
/// Labels live on the full-resolution grid; a coarse stage trains on the
/// labels at its origin-aligned sample points (full pixel (y·f, x·f)),
/// matching the strided feature lattice. Stages with no validated pixel
/// are skipped with a warning; if that happens everywhere the loss is a
/// plain zero.
pub fn distill_loss(
    tape: &Tape,
    fwd: &CascadeForward,
    labels: &PseudoLabelFile,
    mode: DiscretizeMode,
    div: Divergence,
) -> Result<(Var, DistillStats)> {
    let full = fwd.stages.last().expect("cascade has stages").depth.shape();
    if labels.h != full.h || labels.w != full.w {
        return Err(Error::InvalidArgument(format!(
            "labels are {}x{} but the cascade is {}x{}",
            labels.h, labels.w, full.h, full.w
        )));
    }
    let mut stats = DistillStats::default();
    let mut total: Option<Var> = None;
    for (stage, out) in fwd.stages.iter().enumerate() {
        let f = STAGE_FACTORS[stage];
        let shape = out.probability.shape();
        let (h, w, d) = (shape.h, shape.w, shape.c);
        let mut target = Grid::zeros(h, w, d);
        let mut mask = Grid::zeros(h, w, 1);
        let mut count = 0usize;
        for &(px, mu, var) in &labels.entries {
            let (y, x) = (px as usize / labels.w, px as usize % labels.w);
            if y % f != 0 || x % f != 0 {
                continue;
            }
            let (ys, xs) = (y / f, x / f);
            let hyps = out.hypotheses.depths.pixel(ys, xs);
            match gaussian_weights(mu, var, hyps, mode) {
                Some(weights) => {
                    for (k, wk) in weights.iter().enumerate() {
                        target.set(ys, xs, k, *wk);
                    }
                    mask.set(ys, xs, 0, 1.0);
                    count += 1;
                }
                None => stats.dropped += 1,
            }
        }
        if count == 0 {
            eprintln!(
                "warning: no validated pixels reach stage {stage}; skipping its distillation term"
            );
            stats.empty_stages += 1;
            continue;
        }
        stats.used += count;
        let loss = pairwise_divergence(&target, &out.probability, div)
            .mul_mask(&mask)
            .sum()
            .scale(1.0 / count as f64);
        total = Some(match total {
            Some(t) => t.add(&loss),
            None => loss,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => {
            eprintln!("warning: no stage had validated pixels; distillation loss is zero");
            tape.constant(Grid::zeros(1, 1, 1)).sum()
        }
    };
    Ok((loss, stats))
}
