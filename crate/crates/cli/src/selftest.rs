//! Gradient and invariant checks run by the `selftest` command.

use cyclecorr::features::AugmentConfig;
use cyclecorr::matching::{affinity, cycle_affinity, sinkhorn_ot, CorrelationMatrix, PositionGrid, SinkhornConfig};
use cyclecorr::objectives::{
    cycle_indicator, entropy_loss_node, info_nce, info_nce_node, pixel_cycle_loss_node,
    total_loss_node, AttentionSource, CycleConfig, LossWeights, NegativeQueue, PixelLossScale,
};
use cyclecorr::search::{generate_synthetic_pairs, pck, SynthConfig};
use cyclecorr::{finite_diff_check, Graph, NamedTensors, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

const STEP: f64 = 5e-4;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const INSTANCES: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v = uniform(rng, d, -1.0, 1.0);
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

struct Instance {
    rng: ChaCha8Rng,
    graph: Graph,
    inputs: NamedTensors,
    wrt: Vec<&'static str>,
}

impl Instance {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            graph: Graph::new(),
            inputs: NamedTensors::new(),
            wrt: Vec::new(),
        }
    }

    fn input(&mut self, name: &'static str, rows: usize, cols: usize, lo: f32, hi: f32) -> Result<NodeId> {
        let id = self.graph.input(name, rows, cols)?;
        let data = uniform(&mut self.rng, rows * cols, lo, hi);
        self.inputs.insert(name.to_string(), Tensor::matrix(rows, cols, data)?);
        self.wrt.push(name);
        Ok(id)
    }

    fn info_nce(&mut self) -> Result<NodeId> {
        let d = self.rng.random_range(2..=8);
        let k = self.rng.random_range(1..=6);
        let tau = self.rng.random_range(0.2..1.0);
        let q = self.input("query", 1, d, -1.0, 1.0)?;
        let key = self.input("key", 1, d, -1.0, 1.0)?;
        let neg = self.input("negatives", k, d, -1.0, 1.0)?;
        let g = &mut self.graph;
        let (q, key, neg) = (g.row_l2_normalize(q)?, g.row_l2_normalize(key)?, g.row_l2_normalize(neg)?);
        Ok(info_nce_node(g, q, key, Some(neg), tau)?)
    }

    /// Soft cycle `aug → trg → src` against random target positions.
    fn pixel_cycle(&mut self) -> Result<NodeId> {
        let grid = |r: &mut ChaCha8Rng| (r.random_range(2..=6usize), r.random_range(2..=6usize));
        let (g0, g1, ga) = (grid(&mut self.rng), grid(&mut self.rng), grid(&mut self.rng));
        let c = self.rng.random_range(2..=8);
        let t = self.rng.random_range(0.1..0.5);
        let src = self.input("src", g0.0 * g0.1, c, -1.0, 1.0)?;
        let trg = self.input("trg", g1.0 * g1.1, c, -1.0, 1.0)?;
        let aug = self.input("aug", ga.0 * ga.1, c, -1.0, 1.0)?;
        let na = ga.0 * ga.1;
        let mut mask: Vec<bool> = (0..na).map(|_| self.rng.random_bool(0.7)).collect();
        mask[0] = true;
        let p_hat = Tensor::matrix(na, 2, uniform(&mut self.rng, na * 2, 0.0, 1.0))?;
        let positions = PositionGrid::new(g0)?.values;
        let g = &mut self.graph;
        let (e0, e1, ea) = (g.row_l2_normalize(src)?, g.row_l2_normalize(trg)?, g.row_l2_normalize(aug)?);
        let e1t = g.transpose(e1)?;
        let e0t = g.transpose(e0)?;
        let ra1 = g.matmul(ea, e1t)?;
        let r10 = g.matmul(e1, e0t)?;
        let aa1 = g.row_softmax(ra1, t)?;
        let a10 = g.row_softmax(r10, t)?;
        let cycle = g.matmul(aa1, a10)?;
        let grid0 = g.constant(&positions);
        let p = g.matmul(cycle, grid0)?;
        let p_hat = g.constant(&p_hat);
        Ok(pixel_cycle_loss_node(g, p, p_hat, &mask, PixelLossScale::PerCell)?)
    }

    fn entropy(&mut self) -> Result<NodeId> {
        let n = self.rng.random_range(2..=36);
        let m = self.rng.random_range(2..=36);
        let r01 = self.input("r01", n, m, 0.05, 1.0)?;
        let r10 = self.input("r10", m, n, 0.05, 1.0)?;
        Ok(entropy_loss_node(&mut self.graph, r01, r10)?)
    }

    fn total(&mut self) -> Result<NodeId> {
        let pixel = self.pixel_cycle()?;
        let image = self.info_nce()?;
        let entropy = self.entropy()?;
        let w = LossWeights {
            pixel: self.rng.random_range(0.1..2.0),
            image: self.rng.random_range(0.1..2.0),
            entropy: self.rng.random_range(0.1..2.0),
            ..LossWeights::default()
        };
        Ok(total_loss_node(&mut self.graph, pixel, image, entropy, &w)?)
    }

    fn worst_error(mut self, out: NodeId) -> Result<f64> {
        self.graph.set_output(out);
        Ok(finite_diff_check(&self.graph, &self.inputs, &self.wrt, STEP)?)
    }
}

fn gradient_check(name: &'static str, seed: u64, build: fn(&mut Instance) -> Result<NodeId>) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut inst = Instance::new(seed.wrapping_add(k));
        let out = build(&mut inst)?;
        worst = worst.max(inst.worst_error(out)?);
    }
    Ok(Check {
        name,
        passed: worst < GRADIENT_TOLERANCE,
        detail: format!("worst relative error {worst:.1e} over {INSTANCES} instances"),
    })
}

fn affinity_rows(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let t = rng.random_range(0.01..1.0);
        let corr = |rows, cols, rng: &mut ChaCha8Rng| -> Result<CorrelationMatrix> {
            Ok(CorrelationMatrix {
                values: Tensor::matrix(rows, cols, uniform(rng, rows * cols, -1.0, 1.0))?,
                src_grid: (1, rows),
                trg_grid: (1, cols),
            })
        };
        let a = affinity(&corr(n, m, rng)?, t)?;
        let b = affinity(&corr(m, n, rng)?, t)?;
        let c = cycle_affinity(&a, &b)?;
        for mat in [&a.values, &b.values, &c.values] {
            for r in 0..mat.rows() {
                let s: f64 = mat.row(r).iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    Ok(Check {
        name: "affinity rows sum to one",
        passed: worst < 1e-5,
        detail: format!("worst deviation {worst:.1e}"),
    })
}

fn sinkhorn_marginals(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let cfg = SinkhornConfig { eps: 0.05, max_iters: 400_000, tol: 1e-8 };
    for _ in 0..20 {
        let n = rng.random_range(2..=3);
        let r = CorrelationMatrix {
            values: Tensor::matrix(n, n, uniform(rng, n * n, -1.0, 1.0))?,
            src_grid: (1, n),
            trg_grid: (1, n),
        };
        let mu = vec![1.0 / n as f64; n];
        let plan = sinkhorn_ot(&r, &mu, &mu, &cfg)?.values.to_f64();
        for i in 0..n {
            let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
            let col: f64 = (0..n).map(|k| plan[k * n + i]).sum();
            worst = worst.max((row - mu[i]).abs()).max((col - mu[i]).abs());
        }
    }
    Ok(Check {
        name: "sinkhorn marginals",
        passed: worst < 1e-6,
        detail: format!("worst deviation {worst:.1e}"),
    })
}

fn info_nce_oracle(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (d, k) = (rng.random_range(2..=16), rng.random_range(1..=16));
        let tau = rng.random_range(0.05..1.0);
        let (q, key) = (unit(rng, d), unit(rng, d));
        let mut queue = NegativeQueue::new(k, d)?;
        queue.push(&(0..k).map(|_| unit(rng, d)).collect::<Vec<_>>())?;
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() / tau;
        let logits: Vec<f64> = std::iter::once(dot(&q, &key)).chain(queue.iter().map(|n| dot(&q, n))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ce = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[0];
        worst = worst.max((info_nce(&q, &key, &queue, tau)? - ce).abs());
    }
    Ok(Check {
        name: "infonce equals softmax cross-entropy",
        passed: worst < 1e-6,
        detail: format!("worst deviation {worst:.1e}"),
    })
}

fn pck_monotone(rng: &mut ChaCha8Rng) -> Result<Check> {
    let alphas = [0.01, 0.05, 0.1, 0.15, 0.2];
    let mut monotone = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        let gt: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let pred: Vec<(f64, f64)> = gt.iter().map(|g| (g.0 + rng.random_range(-30.0..30.0), g.1 + rng.random_range(-30.0..30.0))).collect();
        let v = alphas.iter().map(|&a| pck(&pred, &gt, a, (100.0, 100.0))).collect::<cyclecorr::Result<Vec<_>>>()?;
        if v.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
    }
    Ok(Check {
        name: "pck monotone in alpha",
        passed: monotone == 200,
        detail: format!("{monotone}/200 instances"),
    })
}

fn identical_cycle(seed: u64) -> Result<Check> {
    let synth = SynthConfig { categories: 1, pairs_per_category: 1, ..SynthConfig::default() };
    let ds = generate_synthetic_pairs(seed, &synth)?;
    let again = generate_synthetic_pairs(seed, &synth)?;
    let stack = &ds.stacks[&ds.annotations[0].src_id];
    let cfg = CycleConfig {
        augment: AugmentConfig::identity(),
        attention: AttentionSource::Off,
        ..CycleConfig::default()
    };
    let layers: Vec<usize> = (0..stack.layers.len()).collect();
    let loss = cycle_indicator(stack, stack, &layers, None, &cfg, seed)?;
    let reproducible = ds.annotations == again.annotations && ds.stacks == again.stacks;
    Ok(Check {
        name: "identical pair closes the cycle",
        passed: loss < 1e-3 && reproducible,
        detail: format!("cycle loss {loss:.1e}, synthetic data reproducible {reproducible}"),
    })
}

/// Runs every check; an `Err` means a check could not run at all.
pub fn run_selftest(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        gradient_check("info_nce gradient", seed, Instance::info_nce)?,
        gradient_check("pixel_cycle_loss gradient", seed, Instance::pixel_cycle)?,
        gradient_check("entropy_loss gradient", seed, Instance::entropy)?,
        gradient_check("total_loss gradient", seed, Instance::total)?,
        affinity_rows(&mut rng)?,
        sinkhorn_marginals(&mut rng)?,
        info_nce_oracle(&mut rng)?,
        pck_monotone(&mut rng)?,
        identical_cycle(seed)?,
    ])
}

pub fn render_report(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out: String = checks
        .iter()
        .map(|c| {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            format!("{verdict}  {:<width$}  {}\n", c.name, c.detail)
        })
        .collect();
    let passed = checks.iter().filter(|c| c.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", checks.len()));
    out
}
