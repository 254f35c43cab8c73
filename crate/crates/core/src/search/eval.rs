use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::pck::{pck, PckBasis};
use crate::features::{FeatureStack, HeadParams};
use crate::matching::{match_pair, MatchConfig, MatchDiagnostics};
use crate::{Error, Result};

/// `(x, y, width, height)` in pixels.
pub type BBox = (f64, f64, f64, f64);

/// One annotated image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub src_id: String,
    pub trg_id: String,
    pub src_kps: Vec<(f64, f64)>,
    pub trg_kps: Vec<(f64, f64)>,
    pub src_bbox: BBox,
    pub trg_bbox: BBox,
    pub category: String,
}

fn inside(kps: &[(f64, f64)], dims: (u32, u32)) -> Option<usize> {
    kps.iter().position(|&(x, y)| {
        !((0.0..=dims.0 as f64).contains(&x) && (0.0..=dims.1 as f64).contains(&y))
    })
}

impl PairAnnotation {
    /// Checks keypoint counts and, given image `(width, height)`s, bounds.
    pub fn validate(&self, src_dims: Option<(u32, u32)>, trg_dims: Option<(u32, u32)>) -> Result<()> {
        if self.src_kps.len() != self.trg_kps.len() {
            return Err(Error::LengthMismatch {
                left: self.src_kps.len(),
                right: self.trg_kps.len(),
            });
        }
        if self.src_kps.is_empty() {
            return Err(Error::Empty("keypoint list"));
        }
        for (kps, dims) in [(&self.src_kps, src_dims), (&self.trg_kps, trg_dims)] {
            if let Some(d) = dims {
                if let Some(index) = inside(kps, d) {
                    return Err(Error::KeypointOutOfBounds {
                        index,
                        x: kps[index].0,
                        y: kps[index].1,
                        width: d.0 as f64,
                        height: d.1 as f64,
                    });
                }
            }
        }
        Ok(())
    }

    /// `(width, height)` setting the PCK threshold.
    pub fn pck_extent(&self, basis: PckBasis, trg_image: (u32, u32)) -> (f64, f64) {
        match basis {
            PckBasis::Img => (trg_image.0 as f64, trg_image.1 as f64),
            PckBasis::Bbox => (self.trg_bbox.2, self.trg_bbox.3),
        }
    }
}

/// Audit record of one evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub src_id: String,
    pub trg_id: String,
    pub category: String,
    pub predictions: Vec<(f64, f64)>,
    /// PCK at each requested alpha, in order.
    pub pck: Vec<f64>,
    pub sinkhorn_iters: Option<usize>,
    pub marginal_violation: Option<f64>,
}

/// Mean PCK over pairs, overall and per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckTable {
    pub alphas: Vec<f64>,
    pub basis: PckBasis,
    pub pairs: usize,
    pub mean: Vec<f64>,
    pub per_category: BTreeMap<String, Vec<f64>>,
}

/// Matches the source keypoints of `ann` and scores them at every alpha.
pub fn evaluate_pair(
    ann: &PairAnnotation,
    src: &FeatureStack,
    trg: &FeatureStack,
    cfg: &MatchConfig,
    head: Option<&HeadParams>,
    alphas: &[f64],
    basis: PckBasis,
) -> Result<PairRecord> {
    ann.validate(Some(src.image_dims), Some(trg.image_dims))?;
    let out = match_pair(src, trg, &ann.src_kps, cfg, head)?;
    let extent = ann.pck_extent(basis, trg.image_dims);
    let pck = alphas
        .iter()
        .map(|&a| pck(&out.predictions, &ann.trg_kps, a, extent))
        .collect::<Result<Vec<_>>>()?;
    let MatchDiagnostics {
        sinkhorn_iters,
        marginal_violation,
    } = out.diagnostics;
    Ok(PairRecord {
        src_id: ann.src_id.clone(),
        trg_id: ann.trg_id.clone(),
        category: ann.category.clone(),
        predictions: out.predictions,
        pck,
        sinkhorn_iters,
        marginal_violation,
    })
}

/// Averages per-pair PCK. Records are summed in `(src_id, trg_id)` order, so
/// the table does not depend on the order they arrive in.
pub fn summarize(records: &[PairRecord], alphas: &[f64], basis: PckBasis) -> Result<PckTable> {
    if records.is_empty() {
        return Err(Error::Empty("pair set"));
    }
    if let Some(r) = records.iter().find(|r| r.pck.len() != alphas.len()) {
        return Err(Error::LengthMismatch {
            left: r.pck.len(),
            right: alphas.len(),
        });
    }
    let mut sorted: Vec<&PairRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.src_id, &a.trg_id, &a.category).cmp(&(&b.src_id, &b.trg_id, &b.category)));
    let mut total = vec![0.0; alphas.len()];
    let mut by_cat: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &sorted {
        let entry = by_cat
            .entry(r.category.clone())
            .or_insert_with(|| (vec![0.0; alphas.len()], 0));
        entry.1 += 1;
        for (k, &v) in r.pck.iter().enumerate() {
            total[k] += v;
            entry.0[k] += v;
        }
    }
    let n = sorted.len() as f64;
    Ok(PckTable {
        alphas: alphas.to_vec(),
        basis,
        pairs: sorted.len(),
        mean: total.iter().map(|t| t / n).collect(),
        per_category: by_cat
            .into_iter()
            .map(|(c, (sums, count))| (c, sums.iter().map(|s| s / count as f64).collect()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn record(src: &str, cat: &str, pck: Vec<f64>) -> PairRecord {
        PairRecord {
            src_id: src.to_string(),
            trg_id: "t".to_string(),
            category: cat.to_string(),
            predictions: Vec::new(),
            pck,
            sinkhorn_iters: None,
            marginal_violation: None,
        }
    }

    #[test]
    fn summary_is_order_invariant() {
        let a = record("a", "x", vec![0.1, 0.5]);
        let b = record("b", "y", vec![0.3, 0.7]);
        let c = record("c", "x", vec![0.2, 0.9]);
        let s1 = summarize(&[a.clone(), b.clone(), c.clone()], &[0.05, 0.1], PckBasis::Img).unwrap();
        let s2 = summarize(&[c, a, b], &[0.05, 0.1], PckBasis::Img).unwrap();
        assert_eq!(s1, s2);
        assert!((s1.mean[0] - 0.2).abs() < 1e-12);
        assert!((s1.per_category["x"][1] - 0.7).abs() < 1e-12);
        assert!(summarize(&[], &[0.1], PckBasis::Img).is_err());
    }

    #[test]
    fn annotation_validation() {
        let mut ann = PairAnnotation {
            src_id: "s".into(),
            trg_id: "t".into(),
            src_kps: vec![(1.0, 1.0)],
            trg_kps: vec![(2.0, 2.0)],
            src_bbox: (0.0, 0.0, 4.0, 4.0),
            trg_bbox: (0.0, 0.0, 4.0, 6.0),
            category: "c".into(),
        };
        assert!(ann.validate(Some((4, 4)), Some((4, 4))).is_ok());
        assert_eq!(ann.pck_extent(PckBasis::Bbox, (10, 10)), (4.0, 6.0));
        ann.trg_kps[0] = (5.0, 1.0);
        assert!(matches!(
            ann.validate(None, Some((4, 4))),
            Err(Error::KeypointOutOfBounds { index: 0, .. })
        ));
        ann.trg_kps.push((0.0, 0.0));
        assert!(matches!(ann.validate(None, None), Err(Error::LengthMismatch { .. })));
    }
}
