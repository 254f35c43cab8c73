//! Seeded instance builders shared by the integration tests.
#![allow(dead_code)]

use cyclecorr::matching::PositionGrid;
use cyclecorr::objectives::{
    entropy_loss_node, info_nce_node, pixel_cycle_loss_node, total_loss_node, LossWeights,
    PixelLossScale,
};
use cyclecorr::{Graph, NamedTensors, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v = uniform(rng, d, -1.0, 1.0);
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

/// A scalar loss graph, the values of its inputs and the inputs to
/// differentiate with respect to.
pub struct LossInstance {
    pub graph: Graph,
    pub inputs: NamedTensors,
    pub wrt: Vec<&'static str>,
}

struct Builder {
    rng: ChaCha8Rng,
    graph: Graph,
    inputs: NamedTensors,
    wrt: Vec<&'static str>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: rng(seed),
            graph: Graph::new(),
            inputs: NamedTensors::new(),
            wrt: Vec::new(),
        }
    }

    fn input(&mut self, name: &'static str, rows: usize, cols: usize, lo: f32, hi: f32) -> NodeId {
        let id = self.graph.input(name, rows, cols).unwrap();
        let data = uniform(&mut self.rng, rows * cols, lo, hi);
        self.inputs.insert(name.to_string(), Tensor::matrix(rows, cols, data).unwrap());
        self.wrt.push(name);
        id
    }

    fn finish(mut self, out: NodeId) -> LossInstance {
        self.graph.set_output(out);
        LossInstance {
            graph: self.graph,
            inputs: self.inputs,
            wrt: self.wrt,
        }
    }

    fn info_nce(&mut self) -> NodeId {
        let d = self.rng.random_range(2..=8);
        let k = self.rng.random_range(1..=6);
        let tau = self.rng.random_range(0.2..1.0);
        let q = self.input("query", 1, d, -1.0, 1.0);
        let key = self.input("key", 1, d, -1.0, 1.0);
        let neg = self.input("negatives", k, d, -1.0, 1.0);
        let g = &mut self.graph;
        let (q, key, neg) = (
            g.row_l2_normalize(q).unwrap(),
            g.row_l2_normalize(key).unwrap(),
            g.row_l2_normalize(neg).unwrap(),
        );
        info_nce_node(g, q, key, Some(neg), tau).unwrap()
    }

    /// Soft cycle `aug → trg → src` over unit descriptors, against random
    /// ground-truth positions with a random non-empty mask.
    fn pixel_cycle(&mut self) -> NodeId {
        let grid = |r: &mut ChaCha8Rng| (r.random_range(2..=6usize), r.random_range(2..=6usize));
        let (g0, g1, ga) = (grid(&mut self.rng), grid(&mut self.rng), grid(&mut self.rng));
        let c = self.rng.random_range(2..=8);
        let t = self.rng.random_range(0.1..0.5);
        let scale = if self.rng.random_bool(0.5) {
            PixelLossScale::Total
        } else {
            PixelLossScale::PerCell
        };
        let src = self.input("src", g0.0 * g0.1, c, -1.0, 1.0);
        let trg = self.input("trg", g1.0 * g1.1, c, -1.0, 1.0);
        let aug = self.input("aug", ga.0 * ga.1, c, -1.0, 1.0);
        let na = ga.0 * ga.1;
        let mut mask: Vec<bool> = (0..na).map(|_| self.rng.random_bool(0.7)).collect();
        mask[0] = true;
        let p_hat = Tensor::matrix(na, 2, uniform(&mut self.rng, na * 2, 0.0, 1.0)).unwrap();
        let positions = PositionGrid::new(g0).unwrap().values;
        let g = &mut self.graph;
        let e0 = g.row_l2_normalize(src).unwrap();
        let e1 = g.row_l2_normalize(trg).unwrap();
        let ea = g.row_l2_normalize(aug).unwrap();
        let e1t = g.transpose(e1).unwrap();
        let ra1 = g.matmul(ea, e1t).unwrap();
        let e0t = g.transpose(e0).unwrap();
        let r10 = g.matmul(e1, e0t).unwrap();
        let aa1 = g.row_softmax(ra1, t).unwrap();
        let a10 = g.row_softmax(r10, t).unwrap();
        let cycle = g.matmul(aa1, a10).unwrap();
        let grid0 = g.constant(&positions);
        let p = g.matmul(cycle, grid0).unwrap();
        let p_hat = g.constant(&p_hat);
        pixel_cycle_loss_node(g, p, p_hat, &mask, scale).unwrap()
    }

    /// Entropy of two random correlation matrices, entries kept away from
    /// the clamp at zero.
    fn entropy(&mut self) -> NodeId {
        let n = self.rng.random_range(2..=36);
        let m = self.rng.random_range(2..=36);
        let r01 = self.input("r01", n, m, 0.05, 1.0);
        let r10 = self.input("r10", m, n, 0.05, 1.0);
        entropy_loss_node(&mut self.graph, r01, r10).unwrap()
    }
}

pub fn info_nce_instance(seed: u64) -> LossInstance {
    let mut b = Builder::new(seed);
    let out = b.info_nce();
    b.finish(out)
}

pub fn pixel_cycle_instance(seed: u64) -> LossInstance {
    let mut b = Builder::new(seed);
    let out = b.pixel_cycle();
    b.finish(out)
}

pub fn entropy_instance(seed: u64) -> LossInstance {
    let mut b = Builder::new(seed);
    let out = b.entropy();
    b.finish(out)
}

/// All three terms under random positive weights.
pub fn total_instance(seed: u64) -> LossInstance {
    let mut b = Builder::new(seed);
    let pixel = b.pixel_cycle();
    let image = b.info_nce();
    let entropy = b.entropy();
    let w = LossWeights {
        pixel: b.rng.random_range(0.1..2.0),
        image: b.rng.random_range(0.1..2.0),
        entropy: b.rng.random_range(0.1..2.0),
        ..LossWeights::default()
    };
    let out = total_loss_node(&mut b.graph, pixel, image, entropy, &w).unwrap();
    b.finish(out)
}

/// Worst relative gradient error over `count` seeded instances.
pub fn worst_gradient_error(build: fn(u64) -> LossInstance, count: u64, step: f64) -> f64 {
    (0..count)
        .map(|seed| {
            let inst = build(seed);
            cyclecorr::finite_diff_check(&inst.graph, &inst.inputs, &inst.wrt, step).unwrap()
        })
        .fold(0.0, f64::max)
}
