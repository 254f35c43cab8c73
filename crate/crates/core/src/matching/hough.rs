//! Translation-offset Hough voting over candidate matches.
//!
//! Each candidate `(i, j)` votes with its score for the bin holding the offset
//! `target(j) − source(i)` in normalized coordinates; its score is then scaled
//! by the total vote of that bin plus a floor.

use alloc::vec;
use alloc::vec::Vec;

use super::{Grid, PositionGrid};
use crate::math;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughConfig {
    /// `(B_x, B_y)` bins over the offset square `[-1, 1]²`.
    pub bins: (usize, usize),
    pub score_floor: f64,
}

impl Default for HoughConfig {
    fn default() -> Self {
        Self {
            bins: (16, 16),
            score_floor: 1e-4,
        }
    }
}

fn bin_of(offset: f64, bins: usize) -> usize {
    let b = math::floor((offset + 1.0) / 2.0 * bins as f64);
    (b.max(0.0) as usize).min(bins - 1)
}

/// Offset bin index of every candidate match, row-major over `(i, j)`.
pub fn offset_bins(src_grid: Grid, trg_grid: Grid, bins: (usize, usize)) -> Result<Vec<usize>> {
    let src = PositionGrid::new(src_grid)?;
    let trg = PositionGrid::new(trg_grid)?;
    let mut out = Vec::with_capacity(src.len() * trg.len());
    for i in 0..src.len() {
        let (sx, sy) = src.point(i);
        for j in 0..trg.len() {
            let (tx, ty) = trg.point(j);
            out.push(bin_of(ty - sy, bins.1) * bins.0 + bin_of(tx - sx, bins.0));
        }
    }
    Ok(out)
}

/// Scores re-weighted by the vote mass of their offset bin.
pub fn rhm(scores: &Tensor, src_grid: Grid, trg_grid: Grid, cfg: &HoughConfig) -> Result<Tensor> {
    if cfg.bins.0 == 0 || cfg.bins.1 == 0 {
        return Err(Error::InvalidArgument("Hough bins must be positive".into()));
    }
    if !(cfg.score_floor >= 0.0) {
        return Err(Error::InvalidArgument("score floor must be non-negative".into()));
    }
    let (n, m) = (src_grid.0 * src_grid.1, trg_grid.0 * trg_grid.1);
    if scores.dims() != [n, m] {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: n * m,
        });
    }
    if let Some(k) = scores.data().iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeScore {
            row: k / m,
            col: k % m,
            value: scores.data()[k],
        });
    }
    let bins = offset_bins(src_grid, trg_grid, cfg.bins)?;
    let mut votes = vec![0.0f64; cfg.bins.0 * cfg.bins.1];
    for (&b, &s) in bins.iter().zip(scores.data()) {
        votes[b] += s as f64;
    }
    let out: Vec<f64> = bins
        .iter()
        .zip(scores.data())
        .map(|(&b, &s)| s as f64 * (votes[b] + cfg.score_floor))
        .collect();
    Tensor::from_f64(vec![n, m], &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bin_scales_everything_equally() {
        let s = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.2, 0.3, 0.3, 0.4]).unwrap();
        let cfg = HoughConfig { bins: (1, 1), score_floor: 0.5 };
        let out = rhm(&s, (1, 2), (1, 3), &cfg).unwrap();
        let factor = 1.8 + 0.5;
        for (a, b) in out.data().iter().zip(s.data()) {
            assert!((a - b * factor).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_scores_vote_into_the_central_bin() {
        let n = 9;
        let s = Tensor::matrix(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let cfg = HoughConfig::default();
        let bins = offset_bins((3, 3), (3, 3), cfg.bins).unwrap();
        for i in 0..n {
            assert_eq!(bins[i * n + i], 8 * 16 + 8);
        }
        let out = rhm(&s, (3, 3), (3, 3), &cfg).unwrap();
        for i in 0..n {
            assert!((out.get(i, i) as f64 - (n as f64 + 1e-4)).abs() < 1e-5);
        }
    }

    #[test]
    fn negative_scores_are_rejected() {
        let s = Tensor::matrix(1, 2, vec![0.5, -0.1]).unwrap();
        assert!(matches!(
            rhm(&s, (1, 1), (1, 2), &HoughConfig::default()),
            Err(Error::NegativeScore { row: 0, col: 1, .. })
        ));
    }
}
