use alloc::format;
use alloc::vec::Vec;

use super::queue::{check_unit, NegativeQueue};
use crate::features::{valid_indices, AugmentationRecord, HeadParams};
use crate::graph::Graph;
use crate::matching::{CorrelationMatrix, PositionGrid};
use crate::math;
use crate::{Error, NodeId, Result, Tensor};

/// Added to clamped correlations before row normalization in the entropy.
pub const ENTROPY_EPS: f64 = 1e-12;

/// Loss weights and temperatures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// λ_p, pixel cycle loss.
    pub pixel: f64,
    /// λ_q, InfoNCE.
    pub image: f64,
    /// λ_r, correlation entropy.
    pub entropy: f64,
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Affinity temperature t.
    pub temperature: f64,
    /// Key-encoder momentum m.
    pub momentum: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 0.0005,
            image: 1.0,
            entropy: 0.001,
            tau: 0.07,
            temperature: 0.0007,
            momentum: 0.999,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.pixel, self.image, self.entropy]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if !weights_ok {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// How the pixel cycle loss aggregates over cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelLossScale {
    /// `‖P − P̂‖₂` over the masked rows.
    #[default]
    Total,
    /// `‖P − P̂‖₂ / √n`: root-mean-square displacement, comparable across grid sizes.
    PerCell,
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub pixel: f64,
    pub image: f64,
    pub entropy: f64,
}

/// InfoNCE node for `1×D` query and key nodes against a `K×D` negatives node.
///
/// Computed as `ln(1 + Σᵢ exp((q·fᵢ − q·k)/τ))`, which equals the
/// (K+1)-way cross-entropy with the positive as target.
pub fn info_nce_node(
    g: &mut Graph,
    query: NodeId,
    key: NodeId,
    negatives: Option<NodeId>,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let Some(neg) = negatives else {
        return g.filled(1, 1, 0.0);
    };
    let kt = g.transpose(key)?;
    let pos = g.matmul(query, kt)?;
    let nt = g.transpose(neg)?;
    let logits = g.matmul(query, nt)?;
    let k = g.shape(neg).0;
    let ones = g.filled(1, k, 1.0)?;
    let pos_row = g.matmul(pos, ones)?;
    let margin = g.sub(logits, pos_row)?;
    let scaled = g.scale(margin, 1.0 / tau)?;
    let e = g.exp(scaled)?;
    let s = g.sum(e)?;
    let one = g.filled(1, 1, 1.0)?;
    let inner = g.add(s, one)?;
    g.ln(inner)
}

/// InfoNCE of unit-norm `f_q`, `f_k` with the queue entries as negatives.
pub fn info_nce(f_q: &[f32], f_k: &[f32], queue: &NegativeQueue, tau: f64) -> Result<f64> {
    if f_q.len() != f_k.len() {
        return Err(Error::LengthMismatch {
            left: f_q.len(),
            right: f_k.len(),
        });
    }
    if f_q.len() != queue.dim() {
        return Err(Error::LengthMismatch {
            left: f_q.len(),
            right: queue.dim(),
        });
    }
    check_unit("query embedding", f_q)?;
    check_unit("key embedding", f_k)?;
    let d = f_q.len();
    let mut g = Graph::new();
    let q = g.constant(&Tensor::matrix(1, d, f_q.to_vec())?);
    let k = g.constant(&Tensor::matrix(1, d, f_k.to_vec())?);
    let neg = queue.to_tensor().map(|t| g.constant(&t));
    let out = info_nce_node(&mut g, q, k, neg, tau)?;
    g.set_output(out);
    g.value(&Default::default())
}

/// `m·θ_k + (1 − m)·θ_q`, element-wise.
pub fn momentum_update_tensor(key: &Tensor, query: &Tensor, m: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {m}")));
    }
    if key.dims() != query.dims() {
        return Err(Error::InvalidArgument(format!(
            "momentum update shape mismatch: {:?} vs {:?}",
            key.dims(),
            query.dims()
        )));
    }
    let data: Vec<f64> = key
        .data()
        .iter()
        .zip(query.data())
        .map(|(&k, &q)| m * k as f64 + (1.0 - m) * q as f64)
        .collect();
    Tensor::from_f64(key.dims().to_vec(), &data)
}

/// Momentum update of every key-head tensor toward the query head.
pub fn momentum_update(key: &HeadParams, query: &HeadParams, m: f64) -> Result<HeadParams> {
    if key.shape() != query.shape() {
        return Err(Error::InvalidArgument("query and key shapes differ".into()));
    }
    let q = query.tensors();
    let mut out = key.clone();
    out.update_each(|i, k| momentum_update_tensor(k, q[i], m))?;
    Ok(out)
}

/// Where each augmented cell sits in the source grid, as normalized
/// `(x, y)`, together with the mask of cells that stay inside the source.
pub fn ground_truth_positions(
    record: &AugmentationRecord,
    aug_grid: &PositionGrid,
) -> Result<(PositionGrid, Vec<bool>)> {
    let (ah, aw) = record.augmented_dims();
    if aug_grid.grid != (ah, aw) {
        return Err(Error::InvalidArgument(format!(
            "record produces a {ah}x{aw} grid, positions are {:?}",
            aug_grid.grid
        )));
    }
    let (sh, sw) = record.source_dims;
    let mut data = Vec::with_capacity(ah * aw * 2);
    for y in 0..ah {
        for x in 0..aw {
            let (sx, sy) = record.to_source(x as f64, y as f64);
            data.push((sx + 0.5) / sw as f64);
            data.push((sy + 0.5) / sh as f64);
        }
    }
    let values = Tensor::from_f64(alloc::vec![ah * aw, 2], &data)?;
    Ok((PositionGrid::from_values((ah, aw), values)?, record.valid_mask.clone()))
}

fn masked_rows(mask: &[bool], rows: usize) -> Result<Vec<usize>> {
    if mask.len() != rows {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: rows,
        });
    }
    let idx = valid_indices(mask);
    if idx.is_empty() {
        return Err(Error::NoValidCells);
    }
    Ok(idx)
}

/// Pixel cycle loss node over the rows of `p` / `p_hat` selected by `mask`.
pub fn pixel_cycle_loss_node(
    g: &mut Graph,
    p: NodeId,
    p_hat: NodeId,
    mask: &[bool],
    scale: PixelLossScale,
) -> Result<NodeId> {
    let idx = masked_rows(mask, g.shape(p).0)?;
    let a = g.gather_rows(p, &idx)?;
    let b = g.gather_rows(p_hat, &idx)?;
    let d = g.squared_distance(a, b)?;
    let d = match scale {
        PixelLossScale::Total => d,
        PixelLossScale::PerCell => g.scale(d, 1.0 / idx.len() as f64)?,
    };
    g.sqrt(d)
}

pub fn pixel_cycle_loss(
    p: &PositionGrid,
    p_hat: &PositionGrid,
    mask: &[bool],
    scale: PixelLossScale,
) -> Result<f64> {
    if p.values.dims() != p_hat.values.dims() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: p_hat.len(),
        });
    }
    let idx = masked_rows(mask, p.len())?;
    let sq: f64 = idx
        .iter()
        .map(|&i| {
            let (a, b) = (p.point(i), p_hat.point(i));
            (a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1)
        })
        .sum();
    Ok(match scale {
        PixelLossScale::Total => math::sqrt(sq),
        PixelLossScale::PerCell => math::sqrt(sq / idx.len() as f64),
    })
}

/// Correlation entropy node. Negative correlations are clamped to zero and
/// [`ENTROPY_EPS`] is added before row L1 normalization, so a row with no
/// positive entry becomes uniform.
pub fn correlation_entropy_node(g: &mut Graph, r: NodeId) -> Result<NodeId> {
    let (n, m) = g.shape(r);
    let pos = g.relu(r)?;
    let eps = g.filled(n, m, ENTROPY_EPS)?;
    let shifted = g.add(pos, eps)?;
    let phi = g.row_l1_normalize(shifted)?;
    let log_phi = g.ln(phi)?;
    let plogp = g.mul(phi, log_phi)?;
    let total = g.sum(plogp)?;
    g.scale(total, -1.0 / n as f64)
}

pub fn correlation_entropy(r: &CorrelationMatrix) -> f64 {
    let m = r.values.cols();
    let n = r.values.rows();
    let mut total = 0.0;
    for row in r.values.data().chunks_exact(m) {
        let shifted: Vec<f64> = row.iter().map(|&v| (v as f64).max(0.0) + ENTROPY_EPS).collect();
        let s: f64 = shifted.iter().sum();
        total -= shifted
            .iter()
            .map(|v| {
                let p = v / s;
                p * math::ln(p)
            })
            .sum::<f64>();
    }
    total / n as f64
}

/// `H(R₀₁) + H(R₁₀)`.
pub fn entropy_loss_node(g: &mut Graph, r01: NodeId, r10: NodeId) -> Result<NodeId> {
    let a = correlation_entropy_node(g, r01)?;
    let b = correlation_entropy_node(g, r10)?;
    g.add(a, b)
}

pub fn entropy_loss(r01: &CorrelationMatrix, r10: &CorrelationMatrix) -> f64 {
    correlation_entropy(r01) + correlation_entropy(r10)
}

/// `λ_p L_p + λ_q L_q + λ_r L_r` as a node.
pub fn total_loss_node(
    g: &mut Graph,
    pixel: NodeId,
    image: NodeId,
    entropy: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let p = g.scale(pixel, w.pixel)?;
    let q = g.scale(image, w.image)?;
    let r = g.scale(entropy, w.entropy)?;
    let pq = g.add(p, q)?;
    g.add(pq, r)
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("pixel", terms.pixel), ("image", terms.image), ("entropy", terms.entropy)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(w.pixel * terms.pixel + w.image * terms.image + w.entropy * terms.entropy)
}
