use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::FeatureMap;
use crate::graph;
use crate::{Error, Result, Tensor};

/// Grid extent `(height, width)`.
pub type Grid = (usize, usize);

/// Pixel-level similarity between every source and every target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    /// `(H₀W₀) × (H₁W₁)`, source cells along rows.
    pub values: Tensor,
    pub src_grid: Grid,
    pub trg_grid: Grid,
}

/// Row-stochastic transition matrix between two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Tensor,
    /// Softmax temperature, `None` for products of affinities.
    pub temperature: Option<f64>,
    pub src_grid: Grid,
    pub trg_grid: Grid,
}

/// Normalized `(x, y)` positions, one row per cell of `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    /// `(H·W) × 2`.
    pub values: Tensor,
    pub grid: Grid,
}

impl PositionGrid {
    /// Cell centres `((x + 0.5) / W, (y + 0.5) / H)`, row-major.
    pub fn new(grid: Grid) -> Result<Self> {
        let (h, w) = grid;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("grid extents must be positive".into()));
        }
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                data.push(((x as f64 + 0.5) / w as f64) as f32);
                data.push(((y as f64 + 0.5) / h as f64) as f32);
            }
        }
        Ok(Self {
            values: Tensor::matrix(h * w, 2, data)?,
            grid,
        })
    }

    pub fn from_values(grid: Grid, values: Tensor) -> Result<Self> {
        if values.dims() != [grid.0 * grid.1, 2] {
            return Err(Error::InvalidArgument(format!(
                "position grid for {grid:?} must be {}x2, got {:?}",
                grid.0 * grid.1,
                values.dims()
            )));
        }
        Ok(Self { values, grid })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        let r = self.values.row(i);
        (r[0] as f64, r[1] as f64)
    }
}

/// `R = F₀ F₁ᵀ` over position-major features (cosines for unit-norm cells).
pub fn correlation(f0: &FeatureMap, f1: &FeatureMap) -> Result<CorrelationMatrix> {
    if f0.channels() != f1.channels() {
        return Err(Error::ChannelMismatch {
            expected: f0.channels(),
            found: f1.channels(),
        });
    }
    let c = f0.channels();
    let (n0, n1) = (f0.cells(), f1.cells());
    let mut data = Vec::with_capacity(n0 * n1);
    for a in f0.data().chunks_exact(c) {
        for b in f1.data().chunks_exact(c) {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            data.push(dot as f32);
        }
    }
    Ok(CorrelationMatrix {
        values: Tensor::matrix(n0, n1, data)?,
        src_grid: f0.dims(),
        trg_grid: f1.dims(),
    })
}

/// Row-wise `softmax(R / t)`.
pub fn affinity(r: &CorrelationMatrix, temperature: f64) -> Result<AffinityMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let cols = r.values.cols();
    let soft = graph::row_softmax(&r.values.to_f64(), cols, temperature);
    Ok(AffinityMatrix {
        values: Tensor::from_f64(r.values.dims().to_vec(), &soft)?,
        temperature: Some(temperature),
        src_grid: r.src_grid,
        trg_grid: r.trg_grid,
    })
}

/// `P = A · G`: each source cell's expected target position.
pub fn transfer_positions(a: &AffinityMatrix, g: &PositionGrid) -> Result<PositionGrid> {
    if a.values.cols() != g.len() {
        return Err(Error::LengthMismatch {
            left: a.values.cols(),
            right: g.len(),
        });
    }
    let n = a.values.rows();
    let p = graph::matmul(&a.values.to_f64(), &g.values.to_f64(), n, g.len(), 2);
    PositionGrid::from_values(a.src_grid, Tensor::from_f64(vec![n, 2], &p)?)
}

/// `A_ab · A_bc`, again row-stochastic.
pub fn cycle_affinity(ab: &AffinityMatrix, bc: &AffinityMatrix) -> Result<AffinityMatrix> {
    let (m, k) = (ab.values.rows(), ab.values.cols());
    if k != bc.values.rows() {
        return Err(Error::LengthMismatch {
            left: k,
            right: bc.values.rows(),
        });
    }
    let n = bc.values.cols();
    let prod = graph::matmul(&ab.values.to_f64(), &bc.values.to_f64(), m, k, n);
    Ok(AffinityMatrix {
        values: Tensor::from_f64(vec![m, n], &prod)?,
        temperature: None,
        src_grid: ab.src_grid,
        trg_grid: bc.trg_grid,
    })
}
