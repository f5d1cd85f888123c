//! The four training loss components and the combined generator /
//! discriminator objectives.
//!
//! Conventions: expectations are realized as means over batch and
//! score-map/voxel elements; discriminator scores are post-sigmoid
//! probabilities clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before logs; the
//! generator adversarial term defaults to the non-saturating
//! `-log D(G(..))` form.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::volume::TracerId;

/// Clamp applied to discriminator scores before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Mean absolute difference between a prediction and its paired ground
/// truth (the supervised pair term).
pub fn pair_loss(pred: &ndarray::ArrayViewD<f64>, gt: &ndarray::ArrayViewD<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape(), "pair_loss"));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Cross-entropy adversarial terms from post-sigmoid score maps.
///
/// Returns `(adv_d, adv_g)`:
/// `adv_d = -mean(log d_real) - mean(log(1 - d_fake))`, and `adv_g` is the
/// non-saturating `-mean(log d_fake)` unless `saturating` is set, in which
/// case it is `mean(log(1 - d_fake))`.
pub fn adversarial_losses(
    d_real_scores: &[ndarray::ArrayViewD<f64>],
    d_fake_scores: &[ndarray::ArrayViewD<f64>],
    saturating: bool,
) -> (f64, f64) {
    let mean_log = |maps: &[ndarray::ArrayViewD<f64>], f: &dyn Fn(f64) -> f64| -> f64 {
        let total: usize = maps.iter().map(|m| m.len()).sum();
        let s: f64 = maps
            .iter()
            .flat_map(|m| m.iter())
            .map(|&v| f(v.clamp(SCORE_EPS, 1.0 - SCORE_EPS)))
            .sum();
        s / total as f64
    };
    let log_real = mean_log(d_real_scores, &|v| v.ln());
    let log_one_minus_fake = mean_log(d_fake_scores, &|v| (1.0 - v).ln());
    let adv_d = -log_real - log_one_minus_fake;
    let adv_g = if saturating {
        log_one_minus_fake
    } else {
        -mean_log(d_fake_scores, &|v| v.ln())
    };
    (adv_d, adv_g)
}

/// Negative log-softmax probability of the target tracer class.
pub fn classification_loss(logits: &[f64; 3], target: TracerId) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target.ordinal()]
}

/// Mean absolute difference between the original volume and its
/// double-translation reconstruction.
pub fn cyclic_reconstruction_loss(
    x_pet: &ndarray::ArrayViewD<f64>,
    x_cyc: &ndarray::ArrayViewD<f64>,
) -> Result<f64> {
    if x_pet.shape() != x_cyc.shape() {
        return Err(Error::shape(
            x_pet.shape(),
            x_cyc.shape(),
            "cyclic_reconstruction_loss",
        ));
    }
    pair_loss(x_cyc, x_pet)
}

/// Raw loss terms measured on a batch, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub pair: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub clsf_real: f64,
    pub clsf_fake: f64,
    pub rec: f64,
}

/// All loss terms plus the two weighted totals, as logged per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pair: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub clsf_real: f64,
    pub clsf_fake: f64,
    pub rec: f64,
    pub total_g: f64,
    pub total_d: f64,
}

/// Combines raw parts into the two objectives:
/// `total_g = pair + a_rec*rec + a_adv*adv_g + a_clsf*clsf_fake` and
/// `total_d = a_adv*adv_d + a_clsf*clsf_real`.
pub fn combine(parts: &LossParts, cfg: &TrainConfig) -> Result<LossBreakdown> {
    for (name, v) in [
        ("pair", parts.pair),
        ("adv_g", parts.adv_g),
        ("adv_d", parts.adv_d),
        ("clsf_real", parts.clsf_real),
        ("clsf_fake", parts.clsf_fake),
        ("rec", parts.rec),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                value: v,
            });
        }
    }
    Ok(LossBreakdown {
        pair: parts.pair,
        adv_g: parts.adv_g,
        adv_d: parts.adv_d,
        clsf_real: parts.clsf_real,
        clsf_fake: parts.clsf_fake,
        rec: parts.rec,
        total_g: parts.pair
            + cfg.alpha_rec * parts.rec
            + cfg.alpha_adv * parts.adv_g
            + cfg.alpha_clsf * parts.clsf_fake,
        total_d: cfg.alpha_adv * parts.adv_d + cfg.alpha_clsf * parts.clsf_real,
    })
}
