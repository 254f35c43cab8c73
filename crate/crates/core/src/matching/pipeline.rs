//! End-to-end matching of one image pair: hyperpixels → (optional head) →
//! correlation → affinity or OT plan → optional Hough re-weighting → read-out.

use alloc::vec::Vec;

use super::{
    affinity, correlation, match_keypoints, rhm, sinkhorn_ot, uniform_marginal, CorrelationMatrix,
    HoughConfig, SinkhornConfig,
};
use crate::features::{attention_map, hyperpixel, FeatureMap, FeatureStack, HeadParams};
use crate::{Error, Result, Tensor};

/// What Sinkhorn consumes as similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OtSimilarity {
    /// The correlation matrix itself.
    #[default]
    Raw,
    /// `exp(R / t)` with the matching temperature.
    Exponentiated,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Marginals {
    #[default]
    Uniform,
    /// Rescaled self-attention plus `floor`, renormalized.
    Attention { floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OtConfig {
    pub sinkhorn: SinkhornConfig,
    pub similarity: OtSimilarity,
    pub marginals: Marginals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    /// Layers forming the hyperpixel; empty selects every layer.
    pub layers: Vec<usize>,
    /// Affinity temperature.
    pub temperature: f64,
    pub ot: Option<OtConfig>,
    pub rhm: Option<HoughConfig>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            temperature: 0.0007,
            ot: Some(OtConfig::default()),
            rhm: Some(HoughConfig::default()),
        }
    }
}

impl MatchConfig {
    /// No OT and no Hough re-weighting.
    pub fn raw(layers: Vec<usize>, temperature: f64) -> Self {
        Self {
            layers,
            temperature,
            ot: None,
            rhm: None,
        }
    }

    pub fn layer_ids(&self, stack: &FeatureStack) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..stack.layers.len()).collect()
        } else {
            self.layers.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct MatchDiagnostics {
    pub sinkhorn_iters: Option<usize>,
    pub marginal_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    pub predictions: Vec<(f64, f64)>,
    pub diagnostics: MatchDiagnostics,
}

/// Matching descriptors: the hyperpixel, optionally projected by `head` and
/// re-normalized per cell.
pub fn matching_features(
    stack: &FeatureStack,
    layers: &[usize],
    head: Option<&HeadParams>,
) -> Result<FeatureMap> {
    let hp = hyperpixel(stack, layers)?;
    match head {
        Some(h) => Ok(h.project(&hp)?.l2_normalized()),
        None => Ok(hp),
    }
}

fn attention_marginal(stack: &FeatureStack, grid: (usize, usize), floor: f64) -> Result<Vec<f64>> {
    let att = attention_map(stack)?.rescaled_on(grid.0, grid.1)?;
    let weights: Vec<f64> = att.iter().map(|&a| a as f64 + floor).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("attention marginal has no mass".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Final match scores between the two descriptor grids.
pub fn match_scores(
    src: &FeatureStack,
    trg: &FeatureStack,
    src_feat: &FeatureMap,
    trg_feat: &FeatureMap,
    cfg: &MatchConfig,
) -> Result<(Tensor, MatchDiagnostics)> {
    let r = correlation(src_feat, trg_feat)?;
    let mut diag = MatchDiagnostics::default();
    let scores = match &cfg.ot {
        None => affinity(&r, cfg.temperature)?.values,
        Some(ot) => {
            let sim = match ot.similarity {
                OtSimilarity::Raw => r,
                OtSimilarity::Exponentiated => exponentiated(&r, cfg.temperature)?,
            };
            let (mu, nu) = match ot.marginals {
                Marginals::Uniform => (
                    uniform_marginal(sim.values.rows()),
                    uniform_marginal(sim.values.cols()),
                ),
                Marginals::Attention { floor } => (
                    attention_marginal(src, sim.src_grid, floor)?,
                    attention_marginal(trg, sim.trg_grid, floor)?,
                ),
            };
            let plan = sinkhorn_ot(&sim, &mu, &nu, &ot.sinkhorn)?;
            diag.sinkhorn_iters = Some(plan.iterations);
            diag.marginal_violation = Some(plan.violation);
            plan.values
        }
    };
    let scores = match &cfg.rhm {
        Some(h) => rhm(&scores, src_feat.dims(), trg_feat.dims(), h)?,
        None => scores,
    };
    Ok((scores, diag))
}

/// `exp((R − max R) / t)`; the shift leaves the min-max rescaled cost unchanged.
fn exponentiated(r: &CorrelationMatrix, t: f64) -> Result<CorrelationMatrix> {
    let max = r.values.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let values = r
        .values
        .map(|v| crate::math::exp((v as f64 - max) / t) as f32)?;
    Ok(CorrelationMatrix { values, ..r.clone() })
}

/// Predicts target-pixel positions of `src_kps`.
pub fn match_pair(
    src: &FeatureStack,
    trg: &FeatureStack,
    src_kps: &[(f64, f64)],
    cfg: &MatchConfig,
    head: Option<&HeadParams>,
) -> Result<MatchOutput> {
    let src_feat = matching_features(src, &cfg.layer_ids(src), head)?;
    let trg_feat = matching_features(trg, &cfg.layer_ids(trg), head)?;
    let (scores, diagnostics) = match_scores(src, trg, &src_feat, &trg_feat, cfg)?;
    let predictions = match_keypoints(
        &scores,
        src_kps,
        src_feat.dims(),
        trg_feat.dims(),
        image_dims(src),
        image_dims(trg),
    )?;
    Ok(MatchOutput {
        predictions,
        diagnostics,
    })
}

fn image_dims(stack: &FeatureStack) -> (f64, f64) {
    (stack.image_dims.0 as f64, stack.image_dims.1 as f64)
}
