use alloc::vec::Vec;

use super::{FeatureMap, FeatureStack, HeadParams};
use crate::math;
use crate::{Error, Result};

/// Cosine similarity of each cell of the final layer to the pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    rescaled: Vec<f32>,
}

/// Where the pooled vector `f0` and the per-cell features come from.
#[derive(Debug, Clone, Copy, Default)]
pub enum PooledSource<'a> {
    /// Global mean of the raw final layer against its raw cells.
    #[default]
    Raw,
    /// Both sides passed through the projection heads first.
    Head(&'a HeadParams),
}

impl AttentionMap {
    /// Builds a map from raw cosines, computing the min-max rescaled copy.
    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: height * width,
            });
        }
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let rescaled = if hi > lo {
            values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            alloc::vec![1.0; values.len()]
        };
        Ok(Self {
            height,
            width,
            values,
            rescaled,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Cosines in `[-1, 1]`, row-major.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Min-max rescaled copy in `[0, 1]` (all ones for a constant map).
    pub fn rescaled(&self) -> &[f32] {
        &self.rescaled
    }

    pub fn rescaled_at(&self, y: usize, x: usize) -> f32 {
        self.rescaled[y * self.width + x]
    }

    /// Rescaled map bilinearly resampled onto another grid.
    pub fn rescaled_on(&self, height: usize, width: usize) -> Result<Vec<f32>> {
        let m = FeatureMap::new(1, self.height, self.width, self.rescaled.clone())?;
        Ok(m.resize_bilinear(height, width)?.data().to_vec())
    }
}

/// Self-attention map of a stack's final layer under the raw pooled feature.
pub fn attention_map(stack: &FeatureStack) -> Result<AttentionMap> {
    attention_map_with(stack, PooledSource::Raw)
}

pub fn attention_map_with(stack: &FeatureStack, source: PooledSource<'_>) -> Result<AttentionMap> {
    let last = stack.final_layer();
    let (cells, pooled): (Vec<Vec<f64>>, Vec<f64>) = match source {
        PooledSource::Raw => {
            let cells = last
                .data()
                .chunks_exact(last.channels())
                .map(|c| c.iter().map(|&v| v as f64).collect())
                .collect();
            (cells, last.global_mean())
        }
        PooledSource::Head(head) => {
            let projected = head.project(last)?;
            let cells = projected
                .data()
                .chunks_exact(projected.channels())
                .map(|c| {
                    let x: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                    head.image.apply(&x)
                })
                .collect();
            (cells, head.image.apply(&projected.global_mean()))
        }
    };
    let pooled_norm = norm(&pooled);
    if pooled_norm == 0.0 {
        return Err(Error::DegeneratePooledFeature);
    }
    let values = cells
        .iter()
        .map(|cell| {
            let n = norm(cell);
            if n == 0.0 {
                0.0
            } else {
                let dot: f64 = cell.iter().zip(&pooled).map(|(a, b)| a * b).sum();
                (dot / (n * pooled_norm)).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    AttentionMap::from_values(last.height(), last.width(), values)
}

fn norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}
