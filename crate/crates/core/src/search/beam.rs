//! Beam search over layer subsets, scored by a caller-supplied loss where
//! lower is better.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::features::FeatureStack;
use crate::objectives::{cycle_indicator, CycleConfig};
use crate::{Error, Result};

/// Most pairs scored per candidate subset.
pub const MAX_SEARCH_PAIRS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_layers: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_layers: 5,
        }
    }
}

/// A scored layer subset; indices are ascending and distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub layers: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: BeamState,
    /// Beam kept at each depth, best first.
    pub beams: Vec<Vec<BeamState>>,
    /// Number of distinct subsets scored.
    pub evaluated: usize,
}

/// Lower score first; equal scores fall back to lexicographic subset order.
fn rank(a: &BeamState, b: &BeamState) -> Ordering {
    a.score
        .partial_cmp(&b.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.layers.cmp(&b.layers))
}

/// Grows subsets of `0..n_layers` one layer at a time, keeping the
/// `beam_width` best per depth, and returns the best subset seen anywhere.
pub fn beam_search(
    n_layers: usize,
    cfg: &BeamConfig,
    mut score: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<BeamResult> {
    if n_layers == 0 {
        return Err(Error::Empty("layer set"));
    }
    if cfg.beam_width == 0 || cfg.max_layers == 0 {
        return Err(Error::InvalidArgument(
            "beam width and subset size must be at least 1".into(),
        ));
    }
    let mut cache: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut evaluate = |layers: Vec<usize>| -> Result<BeamState> {
        if let Some(&s) = cache.get(&layers) {
            return Ok(BeamState { layers, score: s });
        }
        let s = score(&layers)?;
        if !s.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite score for layers {layers:?}")));
        }
        cache.insert(layers.clone(), s);
        Ok(BeamState { layers, score: s })
    };

    let mut beams: Vec<Vec<BeamState>> = Vec::new();
    let mut frontier: BTreeSet<Vec<usize>> = (0..n_layers).map(|i| alloc::vec![i]).collect();
    let mut best: Option<BeamState> = None;
    for _ in 0..cfg.max_layers.min(n_layers) {
        if frontier.is_empty() {
            break;
        }
        let mut scored = frontier
            .into_iter()
            .map(&mut evaluate)
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(rank);
        scored.truncate(cfg.beam_width);
        if best.as_ref().is_none_or(|b| rank(&scored[0], b) == Ordering::Less) {
            best = Some(scored[0].clone());
        }
        frontier = BTreeSet::new();
        for state in &scored {
            for j in 0..n_layers {
                if !state.layers.contains(&j) {
                    let mut next = state.layers.clone();
                    next.push(j);
                    next.sort_unstable();
                    frontier.insert(next);
                }
            }
        }
        beams.push(scored);
    }
    let evaluated = cache.len();
    Ok(BeamResult {
        best: best.ok_or(Error::Empty("layer set"))?,
        beams,
        evaluated,
    })
}

/// Beam search scored by the mean pixel cycle loss over up to
/// [`MAX_SEARCH_PAIRS`] unlabeled pairs. Pair `k` uses crop seed `seed + k`.
pub fn select_layers(
    pairs: &[(&FeatureStack, &FeatureStack)],
    cfg: &BeamConfig,
    cycle: &CycleConfig,
    seed: u64,
) -> Result<BeamResult> {
    let (first, _) = pairs.first().ok_or(Error::Empty("pair set"))?;
    let used = &pairs[..pairs.len().min(MAX_SEARCH_PAIRS)];
    beam_search(first.layers.len(), cfg, |layers| {
        let mut total = 0.0;
        for (k, (src, trg)) in used.iter().enumerate() {
            total += cycle_indicator(src, trg, layers, None, cycle, seed.wrapping_add(k as u64))?;
        }
        Ok(total / used.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_layer() {
        let r = beam_search(1, &BeamConfig::default(), |_| Ok(1.0)).unwrap();
        assert_eq!(r.best.layers, vec![0]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let r = beam_search(3, &BeamConfig { beam_width: 2, max_layers: 3 }, |_| Ok(0.5)).unwrap();
        assert_eq!(r.best.layers, vec![0]);
        assert_eq!(r.beams[1][0].layers, vec![0, 1]);
    }

    #[test]
    fn finds_an_additive_optimum() {
        // each layer contributes a fixed amount, negative ones help
        let gain = [0.3, -0.2, 0.1, -0.4];
        let r = beam_search(4, &BeamConfig { beam_width: 2, max_layers: 4 }, |l| {
            Ok(1.0 + l.iter().map(|&i| gain[i]).sum::<f64>())
        })
        .unwrap();
        assert_eq!(r.best.layers, vec![1, 3]);
    }

    #[test]
    fn errors() {
        assert!(beam_search(0, &BeamConfig::default(), |_| Ok(0.0)).is_err());
        assert!(beam_search(2, &BeamConfig { beam_width: 0, max_layers: 1 }, |_| Ok(0.0)).is_err());
        assert!(beam_search(2, &BeamConfig::default(), |_| Ok(f64::NAN)).is_err());
        assert!(beam_search(2, &BeamConfig::default(), |_| Err(Error::Empty("pair set"))).is_err());
    }
}
