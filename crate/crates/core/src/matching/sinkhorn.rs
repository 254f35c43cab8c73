//! Entropic optimal transport solved with log-domain Sinkhorn iterations.
//!
//! Similarities are min-max rescaled to `[0, 1]` and turned into the cost
//! `1 − rescaled`, so the plan maximizes total similarity. Potentials live in
//! log space, which keeps small `eps` from underflowing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{CorrelationMatrix, Grid};
use crate::math;
use crate::{Error, Result, Tensor};

/// Marginal tolerance for the intermediate eps stages.
const STAGE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub max_iters: usize,
    /// Stop once the largest marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportMatrix {
    pub values: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub iterations: usize,
    /// Largest `|row sum − μ|` or `|column sum − ν|` of the returned plan.
    pub violation: f64,
    pub src_grid: Grid,
    pub trg_grid: Grid,
}

/// Uniform marginal of length `n`.
pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(which: &'static str, m: &[f64], expected_len: usize) -> Result<()> {
    if m.len() != expected_len {
        return Err(Error::LengthMismatch {
            left: m.len(),
            right: expected_len,
        });
    }
    if m.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "{which} marginal has a negative or non-finite entry"
        )));
    }
    let sum: f64 = m.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::MarginalNotNormalized { which, sum });
    }
    Ok(())
}

/// `1 − (s − min) / (max − min)`, or all zeros when every similarity is equal.
pub fn similarity_cost(similarity: &[f32]) -> Vec<f64> {
    let (lo, hi) = similarity
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if hi > lo {
        similarity
            .iter()
            .map(|&v| 1.0 - (v as f64 - lo) / (hi - lo))
            .collect()
    } else {
        vec![0.0; similarity.len()]
    }
}

pub fn sinkhorn_ot(
    similarity: &CorrelationMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SinkhornConfig,
) -> Result<TransportMatrix> {
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", cfg.eps)));
    }
    let (n, m) = (similarity.values.rows(), similarity.values.cols());
    check_marginal("row", mu, n)?;
    check_marginal("column", nu, m)?;

    let cost = similarity_cost(similarity.values.data());
    let log_mu: Vec<f64> = mu.iter().map(|&v| if v > 0.0 { math::ln(v) } else { f64::NEG_INFINITY }).collect();
    let log_nu: Vec<f64> = nu.iter().map(|&v| if v > 0.0 { math::ln(v) } else { f64::NEG_INFINITY }).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut kernel = vec![0.0; n * m];

    // Anneal eps from the cost range down to the target, warm-starting the
    // potentials; the fixed point is that of the target eps alone.
    let mut stage_eps = cfg.eps.max(1.0);
    let mut iterations = 0;
    let mut violation;
    loop {
        let last = stage_eps <= cfg.eps;
        let stage_tol = if last { cfg.tol } else { cfg.tol.max(STAGE_TOL) };
        kernel.iter_mut().zip(&cost).for_each(|(k, c)| *k = -c / stage_eps);
        violation = f64::INFINITY;
        while iterations < cfg.max_iters {
            iterations += 1;
            for i in 0..n {
                f[i] = if log_mu[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let row = &kernel[i * m..(i + 1) * m];
                    log_mu[i] - math::log_sum_exp(row.iter().zip(&g).map(|(k, gj)| k + gj))
                };
            }
            for j in 0..m {
                g[j] = if log_nu[j] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    log_nu[j] - math::log_sum_exp((0..n).map(|i| kernel[i * m + j] + f[i]))
                };
            }
            violation = marginal_violation(&kernel, &f, &g, mu, nu);
            if violation < stage_tol {
                break;
            }
        }
        if last || iterations >= cfg.max_iters {
            if !last {
                violation = marginal_violation(&kernel, &f, &g, mu, nu);
            }
            break;
        }
        let next = (stage_eps * 0.5).max(cfg.eps);
        let ratio = stage_eps / next;
        f.iter_mut().chain(g.iter_mut()).for_each(|v| *v *= ratio);
        stage_eps = next;
    }

    let plan: Vec<f64> = (0..n * m)
        .map(|k| {
            let (i, j) = (k / m, k % m);
            let e = f[i] + g[j] + kernel[k];
            if e == f64::NEG_INFINITY {
                0.0
            } else {
                math::exp(e)
            }
        })
        .collect();
    Ok(TransportMatrix {
        values: Tensor::from_f64(vec![n, m], &plan)?,
        row_marginal: mu.to_vec(),
        col_marginal: nu.to_vec(),
        iterations,
        violation,
        src_grid: similarity.src_grid,
        trg_grid: similarity.trg_grid,
    })
}

fn marginal_violation(kernel: &[f64], f: &[f64], g: &[f64], mu: &[f64], nu: &[f64]) -> f64 {
    let (n, m) = (f.len(), g.len());
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; m];
    for i in 0..n {
        if f[i] == f64::NEG_INFINITY {
            continue;
        }
        for j in 0..m {
            let e = f[i] + g[j] + kernel[i * m + j];
            if e > f64::NEG_INFINITY {
                let p = math::exp(e);
                rows[i] += p;
                cols[j] += p;
            }
        }
    }
    let r = rows.iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.max(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(n: usize, m: usize, data: Vec<f32>) -> CorrelationMatrix {
        CorrelationMatrix {
            values: Tensor::matrix(n, m, data).unwrap(),
            src_grid: (1, n),
            trg_grid: (1, m),
        }
    }

    #[test]
    fn uniform_similarity_gives_uniform_plan() {
        let s = sim(2, 2, vec![0.3; 4]);
        let u = uniform_marginal(2);
        let t = sinkhorn_ot(&s, &u, &u, &SinkhornConfig::default()).unwrap();
        assert!(t.values.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(t.violation < 1e-6);
    }

    #[test]
    fn block_diagonal_concentrates_on_blocks() {
        // 4x4 with two 2x2 high-similarity blocks on the diagonal
        let mut d = vec![0.1f32; 16];
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)] {
            d[i * 4 + j] = 0.9;
        }
        let u = uniform_marginal(4);
        let cfg = SinkhornConfig { eps: 0.01, max_iters: 1000, tol: 1e-9 };
        let t = sinkhorn_ot(&sim(4, 4, d), &u, &u, &cfg).unwrap();
        let off: f32 = (0..16)
            .filter(|k| (k / 4 < 2) != (k % 4 < 2))
            .map(|k| t.values.data()[k])
            .sum();
        assert!(off < 0.01);
    }

    #[test]
    fn marginals_are_validated() {
        let s = sim(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let bad = [0.7, 0.7];
        let u = uniform_marginal(2);
        assert!(matches!(
            sinkhorn_ot(&s, &bad, &u, &SinkhornConfig::default()),
            Err(Error::MarginalNotNormalized { which: "row", .. })
        ));
        assert!(sinkhorn_ot(&s, &u, &[1.0], &SinkhornConfig::default()).is_err());
        let cfg = SinkhornConfig { eps: 0.0, ..SinkhornConfig::default() };
        assert!(sinkhorn_ot(&s, &u, &u, &cfg).is_err());
    }

    #[test]
    fn zero_mass_rows_stay_empty() {
        let s = sim(3, 2, vec![0.1, 0.9, 0.8, 0.2, 0.5, 0.5]);
        let mu = [0.5, 0.5, 0.0];
        let nu = uniform_marginal(2);
        let t = sinkhorn_ot(&s, &mu, &nu, &SinkhornConfig::default()).unwrap();
        assert_eq!(t.values.row(2), &[0.0, 0.0]);
        assert!(t.violation < 1e-6);
    }
}
