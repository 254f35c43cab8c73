use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

/// Allowed deviation from unit norm for vectors entering a loss or the queue.
pub const NORM_TOLERANCE: f64 = 1e-3;

pub(crate) fn check_unit(what: &'static str, v: &[f32]) -> Result<f64> {
    let norm = math::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum());
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotNormalized { what, norm });
    }
    Ok(norm)
}

/// FIFO store of the most recent `capacity` key embeddings, used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f32>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "queue capacity and dimension must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends `keys` in order, evicting the oldest entries beyond capacity.
    /// Nothing is stored unless every key is valid.
    pub fn push(&mut self, keys: &[Vec<f32>]) -> Result<()> {
        let mut normalized = Vec::with_capacity(keys.len());
        for k in keys {
            if k.len() != self.dim {
                return Err(Error::LengthMismatch {
                    left: k.len(),
                    right: self.dim,
                });
            }
            let norm = check_unit("queue key", k)?;
            normalized.push(k.iter().map(|&x| (x as f64 / norm) as f32).collect());
        }
        for k in normalized {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(k);
        }
        Ok(())
    }

    /// `len × dim` matrix of the entries, oldest first; `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Tensor::matrix(self.entries.len(), self.dim, data).ok()
    }

    /// Rebuilds a queue from a snapshot produced by [`Self::to_tensor`].
    pub fn from_tensor(capacity: usize, snapshot: &Tensor) -> Result<Self> {
        if snapshot.dims().len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "queue snapshot must be a matrix, got {:?}",
                snapshot.dims()
            )));
        }
        if snapshot.rows() > capacity {
            return Err(Error::InvalidArgument(format!(
                "snapshot holds {} keys but capacity is {capacity}",
                snapshot.rows()
            )));
        }
        let mut q = Self::new(capacity, snapshot.cols())?;
        let keys: Vec<Vec<f32>> = (0..snapshot.rows()).map(|r| snapshot.row(r).to_vec()).collect();
        q.push(&keys)?;
        Ok(q)
    }
}
