//! Trainable projection heads standing in for the backbone.
//!
//! The pixel head maps every cell through `linear → max(·, 0) → linear`; the
//! image head pools the pixel-head output over all cells and applies another
//! two-layer map to produce a `D`-dimensional image embedding. Query and key
//! copies share one shape; the key copy only moves through
//! [`momentum_update`](crate::objectives::momentum_update).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeatureMap;
use crate::graph::{Graph, NamedTensors, NodeId};
use crate::math;
use crate::{Error, Result, Tensor};

/// `y = x · weight + bias` with `weight: [in, out]`, `bias: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs, outputs]).expect("positive dims"),
            bias: Tensor::zeros(vec![1, outputs]).expect("positive dims"),
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = math::sqrt(2.0 / inputs as f64);
        let w = (0..inputs * outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * std) as f32
            })
            .collect();
        Self {
            weight: Tensor::matrix(inputs, outputs, w).expect("finite"),
            bias: Tensor::zeros(vec![1, outputs]).expect("positive dims"),
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        let (i, o) = (self.inputs(), self.outputs());
        out.clear();
        out.extend(self.bias.data().iter().map(|&b| b as f64));
        let w = self.weight.data();
        for (k, &xv) in x.iter().enumerate().take(i) {
            if xv == 0.0 {
                continue;
            }
            for (acc, &wv) in out.iter_mut().zip(&w[k * o..(k + 1) * o]) {
                *acc += xv * wv as f64;
            }
        }
    }
}

/// `linear → max(·, 0) → linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub first: Linear,
    pub second: Linear,
}

impl ProjectionHead {
    pub fn inputs(&self) -> usize {
        self.first.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.second.outputs()
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.first.bias.len() == self.first.outputs()
            && self.second.bias.len() == self.second.outputs()
            && self.first.outputs() == self.second.inputs();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent {what} head shapes")))
        }
    }

    /// Identity map through a `c → 2c → c` head: `relu(x) − relu(−x) = x`.
    pub fn identity(channels: usize) -> Self {
        let c = channels;
        let mut w1 = vec![0.0; c * 2 * c];
        let mut w2 = vec![0.0; 2 * c * c];
        for k in 0..c {
            w1[k * 2 * c + k] = 1.0;
            w1[k * 2 * c + c + k] = -1.0;
            w2[k * c + k] = 1.0;
            w2[(c + k) * c + k] = -1.0;
        }
        Self {
            first: Linear {
                weight: Tensor::matrix(c, 2 * c, w1).expect("finite"),
                bias: Tensor::zeros(vec![1, 2 * c]).expect("positive dims"),
            },
            second: Linear {
                weight: Tensor::matrix(2 * c, c, w2).expect("finite"),
                bias: Tensor::zeros(vec![1, c]).expect("positive dims"),
            },
        }
    }

    /// Applies the head to one input vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = Vec::new();
        self.first.apply(x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let mut out = Vec::new();
        self.second.apply(&hidden, &mut out);
        out
    }
}

/// Sizes of one head pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub image_hidden: usize,
    pub embed_dim: usize,
}

impl EncoderShape {
    pub fn for_channels(channels: usize) -> Self {
        Self {
            in_channels: channels,
            hidden: 2 * channels,
            out_channels: channels,
            image_hidden: 2 * channels,
            embed_dim: channels,
        }
    }
}

/// One parameter copy (θ_q or θ_k): pixel head plus image head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub pixel: ProjectionHead,
    pub image: ProjectionHead,
}

/// Names of the eight parameter tensors, in canonical order.
pub const PARAM_NAMES: [&str; 8] = [
    "pixel.w1", "pixel.b1", "pixel.w2", "pixel.b2", "image.w1", "image.b1", "image.w2",
    "image.b2",
];

impl HeadParams {
    pub fn random(shape: EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            pixel: ProjectionHead {
                first: Linear::random(shape.in_channels, shape.hidden, &mut rng),
                second: Linear::random(shape.hidden, shape.out_channels, &mut rng),
            },
            image: ProjectionHead {
                first: Linear::random(shape.out_channels, shape.image_hidden, &mut rng),
                second: Linear::random(shape.image_hidden, shape.embed_dim, &mut rng),
            },
        }
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        Self {
            pixel: ProjectionHead {
                first: Linear::zeros(shape.in_channels, shape.hidden),
                second: Linear::zeros(shape.hidden, shape.out_channels),
            },
            image: ProjectionHead {
                first: Linear::zeros(shape.out_channels, shape.image_hidden),
                second: Linear::zeros(shape.image_hidden, shape.embed_dim),
            },
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            pixel: ProjectionHead::identity(channels),
            image: ProjectionHead::identity(channels),
        }
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            in_channels: self.pixel.inputs(),
            hidden: self.pixel.first.outputs(),
            out_channels: self.pixel.outputs(),
            image_hidden: self.image.first.outputs(),
            embed_dim: self.image.outputs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pixel.validate("pixel")?;
        self.image.validate("image")?;
        if self.pixel.outputs() != self.image.inputs() {
            return Err(Error::InvalidArgument(
                "image head input must match pixel head output".into(),
            ));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.pixel.first.weight,
            &self.pixel.first.bias,
            &self.pixel.second.weight,
            &self.pixel.second.bias,
            &self.image.first.weight,
            &self.image.first.bias,
            &self.image.second.weight,
            &self.image.second.bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.pixel.first.weight,
            &mut self.pixel.first.bias,
            &mut self.pixel.second.weight,
            &mut self.pixel.second.bias,
            &mut self.image.first.weight,
            &mut self.image.first.bias,
            &mut self.image.second.weight,
            &mut self.image.second.bias,
        ]
    }

    /// Parameters keyed by `prefix` + [`PARAM_NAMES`].
    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    pub fn from_named(named: &NamedTensors, prefix: &str) -> Result<Self> {
        let get = |n: &str| -> Result<Tensor> {
            let key = format!("{prefix}{n}");
            let t = named
                .get(&key)
                .ok_or_else(|| Error::MissingInput(key.clone()))?;
            // accept rank-1 biases
            if t.dims().len() == 1 {
                Tensor::new(vec![1, t.len()], t.data().to_vec())
            } else {
                Ok(t.clone())
            }
        };
        let p = Self {
            pixel: ProjectionHead {
                first: Linear {
                    weight: get(PARAM_NAMES[0])?,
                    bias: get(PARAM_NAMES[1])?,
                },
                second: Linear {
                    weight: get(PARAM_NAMES[2])?,
                    bias: get(PARAM_NAMES[3])?,
                },
            },
            image: ProjectionHead {
                first: Linear {
                    weight: get(PARAM_NAMES[4])?,
                    bias: get(PARAM_NAMES[5])?,
                },
                second: Linear {
                    weight: get(PARAM_NAMES[6])?,
                    bias: get(PARAM_NAMES[7])?,
                },
            },
        };
        p.validate()?;
        Ok(p)
    }

    /// Replaces every tensor by `f(name_index, current)`; shapes are kept.
    pub(crate) fn update_each(
        &mut self,
        mut f: impl FnMut(usize, &Tensor) -> Result<Tensor>,
    ) -> Result<()> {
        let mut next = Vec::with_capacity(8);
        for (i, t) in self.tensors().into_iter().enumerate() {
            let n = f(i, t)?;
            if n.dims() != t.dims() {
                return Err(Error::InvalidArgument(format!(
                    "update changed the shape of {}",
                    PARAM_NAMES[i]
                )));
            }
            next.push(n);
        }
        for (slot, n) in self.tensors_mut().into_iter().zip(next) {
            *slot = n;
        }
        Ok(())
    }

    /// Per-cell pixel-head projection.
    pub fn project(&self, features: &FeatureMap) -> Result<FeatureMap> {
        if features.channels() != self.pixel.inputs() {
            return Err(Error::ChannelMismatch {
                expected: self.pixel.inputs(),
                found: features.channels(),
            });
        }
        let c = features.channels();
        let mut x = vec![0.0; c];
        let mut data = Vec::with_capacity(features.cells() * self.pixel.outputs());
        for cell in features.data().chunks_exact(c) {
            x.iter_mut().zip(cell).for_each(|(d, &s)| *d = s as f64);
            data.extend(self.pixel.apply(&x).into_iter().map(|v| v as f32));
        }
        FeatureMap::new(self.pixel.outputs(), features.height(), features.width(), data)
    }

    /// Unit-norm image embedding: image head over the pooled pixel-head output.
    pub fn embed(&self, features: &FeatureMap) -> Result<Vec<f32>> {
        let projected = self.project(features)?;
        let pooled = projected.global_mean();
        let z = self.image.apply(&pooled);
        let n = math::sqrt(z.iter().map(|v| v * v).sum());
        if n == 0.0 {
            return Err(Error::DegeneratePooledFeature);
        }
        Ok(z.iter().map(|v| (v / n) as f32).collect())
    }
}

/// Which parameter copy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branch {
    #[default]
    Query,
    Key,
}

/// Query and key copies of the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub query: HeadParams,
    pub key: HeadParams,
}

impl EncoderParams {
    /// Random query weights; the key copy starts equal to the query copy.
    pub fn random(shape: EncoderShape, seed: u64) -> Self {
        let query = HeadParams::random(shape, seed);
        Self {
            key: query.clone(),
            query,
        }
    }

    pub fn identity(channels: usize) -> Self {
        let query = HeadParams::identity(channels);
        Self {
            key: query.clone(),
            query,
        }
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        let query = HeadParams::zeros(shape);
        Self {
            key: query.clone(),
            query,
        }
    }

    pub fn branch(&self, which: Branch) -> &HeadParams {
        match which {
            Branch::Query => &self.query,
            Branch::Key => &self.key,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        self.key.validate()?;
        if self.query.shape() != self.key.shape() {
            return Err(Error::InvalidArgument("query and key shapes differ".into()));
        }
        Ok(())
    }
}

/// Per-cell projection through the chosen branch's pixel head.
pub fn encode(features: &FeatureMap, params: &EncoderParams, which: Branch) -> Result<FeatureMap> {
    params.branch(which).project(features)
}

/// Graph inputs for one head copy, named `prefix` + [`PARAM_NAMES`].
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub pixel_w1: NodeId,
    pub pixel_b1: NodeId,
    pub pixel_w2: NodeId,
    pub pixel_b2: NodeId,
    pub image_w1: NodeId,
    pub image_b1: NodeId,
    pub image_w2: NodeId,
    pub image_b2: NodeId,
}

impl HeadNodes {
    pub fn declare(g: &mut Graph, prefix: &str, shape: EncoderShape) -> Result<Self> {
        let s = shape;
        let mut inp = |name: &str, r: usize, c: usize| g.input(&format!("{prefix}{name}"), r, c);
        Ok(Self {
            pixel_w1: inp(PARAM_NAMES[0], s.in_channels, s.hidden)?,
            pixel_b1: inp(PARAM_NAMES[1], 1, s.hidden)?,
            pixel_w2: inp(PARAM_NAMES[2], s.hidden, s.out_channels)?,
            pixel_b2: inp(PARAM_NAMES[3], 1, s.out_channels)?,
            image_w1: inp(PARAM_NAMES[4], s.out_channels, s.image_hidden)?,
            image_b1: inp(PARAM_NAMES[5], 1, s.image_hidden)?,
            image_w2: inp(PARAM_NAMES[6], s.image_hidden, s.embed_dim)?,
            image_b2: inp(PARAM_NAMES[7], 1, s.embed_dim)?,
        })
    }

    /// Pixel head applied to every row of a position-major feature node.
    pub fn pixel(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, self.pixel_w1, self.pixel_b1)?;
        let h = g.relu(h)?;
        g.linear(h, self.pixel_w2, self.pixel_b2)
    }

    /// Unit-norm `1×D` embedding of a position-major feature node.
    pub fn image(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let p = self.pixel(g, x)?;
        let pooled = g.mean_rows(p)?;
        let h = g.linear(pooled, self.image_w1, self.image_b1)?;
        let h = g.relu(h)?;
        let z = g.linear(h, self.image_w2, self.image_b2)?;
        g.row_l2_normalize(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn identity_heads_reproduce_input() {
        let f = map(5, 3, 4, 1);
        let p = EncoderParams::identity(5);
        let out = encode(&f, &p, Branch::Query).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let f = map(4, 2, 2, 2);
        let p = EncoderParams::zeros(EncoderShape::for_channels(4));
        let out = encode(&f, &p, Branch::Key).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let f = map(4, 2, 2, 3);
        let p = EncoderParams::identity(5);
        assert!(matches!(
            encode(&f, &p, Branch::Query),
            Err(Error::ChannelMismatch { expected: 5, found: 4 })
        ));
    }

    #[test]
    fn query_equals_key_when_copies_match() {
        let f = map(6, 3, 3, 4);
        let p = EncoderParams::random(EncoderShape::for_channels(6), 9);
        assert_eq!(
            encode(&f, &p, Branch::Query).unwrap(),
            encode(&f, &p, Branch::Key).unwrap()
        );
    }

    #[test]
    fn graph_head_matches_direct_projection() {
        let f = map(3, 2, 3, 5);
        let mut p = HeadParams::random(EncoderShape::for_channels(3), 11);
        p.update_each(|i, t| if i % 2 == 1 { t.map(|_| 0.1) } else { Ok(t.clone()) })
            .unwrap();
        let mut g = Graph::new();
        let nodes = HeadNodes::declare(&mut g, "q.", p.shape()).unwrap();
        let x = g.constant(&f.to_matrix());
        let y = nodes.pixel(&mut g, x).unwrap();
        let emb = nodes.image(&mut g, x).unwrap();
        let inputs = p.to_named("q.");
        let via_graph = g.evaluate(y, &inputs).unwrap();
        let direct = p.project(&f).unwrap().to_matrix();
        assert!(via_graph.max_abs_diff(&direct) < 1e-6);
        let e = g.evaluate(emb, &inputs).unwrap();
        let direct = p.embed(&f).unwrap();
        assert!(e.data().iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn named_round_trip() {
        let p = HeadParams::random(EncoderShape::for_channels(4), 3);
        let back = HeadParams::from_named(&p.to_named("k."), "k.").unwrap();
        assert_eq!(p, back);
    }
}
