//! One optimization step of the joint image- and pixel-level objective.
//!
//! The query heads are trained by SGD with momentum; the key heads follow by
//! momentum update and provide the positive key pushed onto the queue.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{
    entropy_loss_node, ground_truth_positions, info_nce_node, momentum_update,
    pixel_cycle_loss, pixel_cycle_loss_node, total_loss, total_loss_node, LossTerms, LossWeights,
    PixelLossScale,
};
use super::queue::NegativeQueue;
use crate::features::{
    attention_guided_crop, attention_map_with, hyperpixel, AttentionMap, AugmentConfig,
    AugmentationRecord, Branch, EncoderParams, FeatureMap, FeatureStack, HeadNodes, HeadParams,
    PooledSource, PARAM_NAMES,
};
use crate::graph::{value_grad_probes, Graph};
use crate::matching::{affinity, correlation, cycle_affinity, transfer_positions, PositionGrid};
use crate::math;
use crate::{Error, NodeId, Result, Tensor};

/// Where crop sampling gets its attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionSource {
    /// Uniform attention: every crop is accepted.
    Off,
    /// Raw backbone features.
    Raw,
    /// The current query heads.
    #[default]
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Cosine decay horizon; 0 keeps the rate constant.
    pub total_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            total_steps: 0,
        }
    }
}

impl SgdConfig {
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let progress = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// `None` drops the pixel cycle term.
    pub pixel_loss: Option<PixelLossScale>,
    /// Layers forming the training hyperpixel; empty selects every layer.
    pub layers: Vec<usize>,
    pub augment: AugmentConfig,
    pub attention: AttentionSource,
    /// Encoder used for the second image in the cycle.
    pub target_branch: Branch,
    pub optimizer: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pixel_loss: Some(PixelLossScale::Total),
            layers: Vec::new(),
            augment: AugmentConfig::default(),
            attention: AttentionSource::default(),
            target_branch: Branch::Query,
            optimizer: SgdConfig::default(),
        }
    }
}

/// Parameters, negative queue and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub queue: NegativeQueue,
    pub velocity: HeadParams,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: EncoderParams, queue_capacity: usize) -> Result<Self> {
        params.validate()?;
        let shape = params.query.shape();
        Ok(Self {
            queue: NegativeQueue::new(queue_capacity, shape.embed_dim)?,
            velocity: HeadParams::zeros(shape),
            params,
            step: 0,
        })
    }
}

/// Loss values of one step, before the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
}

fn layer_ids(layers: &[usize], stack: &FeatureStack) -> Vec<usize> {
    if layers.is_empty() {
        (0..stack.layers.len()).collect()
    } else {
        layers.to_vec()
    }
}

/// Attention for crop sampling; `Head` without a head falls back to `Raw`.
/// The head sees the hyperpixel it was built for, not the final layer.
fn crop_attention(
    stack: &FeatureStack,
    hyper: &FeatureMap,
    source: AttentionSource,
    head: Option<&HeadParams>,
) -> Result<AttentionMap> {
    match (source, head) {
        (AttentionSource::Off, _) => {
            let (h, w) = stack.final_layer().dims();
            AttentionMap::from_values(h, w, vec![1.0; h * w])
        }
        (AttentionSource::Head, Some(head)) => {
            let single =
                FeatureStack::new(vec![hyper.clone()], stack.image_dims, stack.source_id.clone())?;
            attention_map_with(&single, PooledSource::Head(head))
        }
        _ => attention_map_with(stack, PooledSource::Raw),
    }
}

/// `row_l2(pixel_head(x))` for a constant feature matrix.
fn pixel_embedding(g: &mut Graph, heads: &HeadNodes, features: &FeatureMap) -> Result<NodeId> {
    let x = g.constant(&features.to_matrix());
    let p = heads.pixel(g, x)?;
    g.row_l2_normalize(p)
}

/// One step on the pair `(src, trg)`. The input state is left untouched, so
/// a failed step changes nothing.
pub fn train_step(
    state: &TrainState,
    src: &FeatureStack,
    trg: &FeatureStack,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainState, LossBreakdown)> {
    let w = &cfg.weights;
    w.validate()?;
    state.params.validate()?;
    let query = &state.params.query;
    let shape = query.shape();

    let f0 = hyperpixel(src, &layer_ids(&cfg.layers, src))?;
    let f1 = hyperpixel(trg, &layer_ids(&cfg.layers, trg))?;
    let attention = crop_attention(src, &f0, cfg.attention, Some(query))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (view_q, record) = attention_guided_crop(&f0, &attention, rng.random(), &cfg.augment)?;
    let (view_k, _) = attention_guided_crop(&f0, &attention, rng.random(), &cfg.augment)?;

    let mut g = Graph::new();
    let heads = HeadNodes::declare(&mut g, "", shape)?;
    let zero = g.filled(1, 1, 0.0)?;

    let mut pixel = zero;
    let mut entropy = zero;
    if cfg.pixel_loss.is_some() || w.entropy > 0.0 {
        let e0 = pixel_embedding(&mut g, &heads, &f0)?;
        let e1 = match cfg.target_branch {
            Branch::Query => pixel_embedding(&mut g, &heads, &f1)?,
            Branch::Key => g.constant(&state.params.key.project(&f1)?.l2_normalized().to_matrix()),
        };
        let e0t = g.transpose(e0)?;
        let r10 = g.matmul(e1, e0t)?;
        if let Some(scale) = cfg.pixel_loss {
            let ea = pixel_embedding(&mut g, &heads, &view_q)?;
            let e1t = g.transpose(e1)?;
            let ra1 = g.matmul(ea, e1t)?;
            let aa1 = g.row_softmax(ra1, w.temperature)?;
            let a10 = g.row_softmax(r10, w.temperature)?;
            let cycle = g.matmul(aa1, a10)?;
            let grid0 = g.constant(&PositionGrid::new(f0.dims())?.values);
            let p = g.matmul(cycle, grid0)?;
            let (p_hat, mask) =
                ground_truth_positions(&record, &PositionGrid::new(view_q.dims())?)?;
            let p_hat = g.constant(&p_hat.values);
            pixel = pixel_cycle_loss_node(&mut g, p, p_hat, &mask, scale)?;
        }
        if w.entropy > 0.0 {
            let r01 = g.transpose(r10)?;
            entropy = entropy_loss_node(&mut g, r01, r10)?;
        }
    }

    let mut image = zero;
    let mut key_embedding = None;
    if w.image > 0.0 {
        let fk = state.params.key.embed(&view_k)?;
        let xq = g.constant(&view_q.to_matrix());
        let fq = heads.image(&mut g, xq)?;
        let k = g.constant(&Tensor::matrix(1, fk.len(), fk.clone())?);
        let neg = state.queue.to_tensor().map(|t| g.constant(&t));
        image = info_nce_node(&mut g, fq, k, neg, w.tau)?;
        key_embedding = Some(fk);
    }

    let total = total_loss_node(&mut g, pixel, image, entropy, w)?;
    g.set_output(total);
    let (value, grads, probes) =
        value_grad_probes(&g, &query.to_named(""), &PARAM_NAMES, &[pixel, image, entropy])?;
    let terms = LossTerms {
        pixel: probes[0],
        image: probes[1],
        entropy: probes[2],
    };
    let checked = total_loss(&terms, w)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("total"));
    }

    let opt = &cfg.optimizer;
    let lr = opt.rate_at(state.step);
    let mut velocity = state.velocity.clone();
    velocity.update_each(|i, v| {
        let grad = &grads[PARAM_NAMES[i]];
        let data: Vec<f64> = v
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| opt.momentum * v as f64 + g as f64)
            .collect();
        Tensor::from_f64(v.dims().to_vec(), &data)
    })?;
    let mut new_query = query.clone();
    let vel = velocity.tensors();
    new_query.update_each(|i, theta| {
        let data: Vec<f64> = theta
            .data()
            .iter()
            .zip(vel[i].data())
            .map(|(&t, &v)| t as f64 - lr * v as f64)
            .collect();
        Tensor::from_f64(theta.dims().to_vec(), &data)
    })?;
    let new_key = momentum_update(&state.params.key, &new_query, w.momentum)?;
    let mut queue = state.queue.clone();
    if let Some(fk) = key_embedding {
        queue.push(&[fk])?;
    }

    Ok((
        TrainState {
            params: EncoderParams {
                query: new_query,
                key: new_key,
            },
            queue,
            velocity,
            step: state.step + 1,
        },
        LossBreakdown {
            terms,
            total: checked,
        },
    ))
}

/// Settings for evaluating the pixel cycle loss without training.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleConfig {
    pub temperature: f64,
    pub scale: PixelLossScale,
    pub augment: AugmentConfig,
    pub attention: AttentionSource,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0007,
            scale: PixelLossScale::PerCell,
            augment: AugmentConfig::default(),
            attention: AttentionSource::Raw,
        }
    }
}

/// Pixel cycle loss `I₀' → I₁ → I₀` from unit-norm descriptors.
pub fn cycle_loss_from_features(
    src: &FeatureMap,
    trg: &FeatureMap,
    src_aug: &FeatureMap,
    record: &AugmentationRecord,
    temperature: f64,
    scale: PixelLossScale,
) -> Result<f64> {
    let a_aug = affinity(&correlation(src_aug, trg)?, temperature)?;
    let a_back = affinity(&correlation(trg, src)?, temperature)?;
    let cycle = cycle_affinity(&a_aug, &a_back)?;
    let p = transfer_positions(&cycle, &PositionGrid::new(src.dims())?)?;
    let (p_hat, mask) = ground_truth_positions(record, &PositionGrid::new(src_aug.dims())?)?;
    pixel_cycle_loss(&p, &p_hat, &mask, scale)
}

/// Pixel cycle loss of the hyperpixel built from `layers`, optionally through
/// `head`; a ground-truth-free quality indicator for layer selection.
pub fn cycle_indicator(
    src: &FeatureStack,
    trg: &FeatureStack,
    layers: &[usize],
    head: Option<&HeadParams>,
    cfg: &CycleConfig,
    seed: u64,
) -> Result<f64> {
    let describe = |f: FeatureMap| -> Result<FeatureMap> {
        match head {
            Some(h) => Ok(h.project(&f)?.l2_normalized()),
            None => Ok(f.l2_normalized()),
        }
    };
    let h0 = hyperpixel(src, layers)?;
    let h1 = hyperpixel(trg, layers)?;
    let attention = crop_attention(src, &h0, cfg.attention, head)?;
    let (aug, record) = attention_guided_crop(&h0, &attention, seed, &cfg.augment)?;
    cycle_loss_from_features(
        &describe(h0)?,
        &describe(h1)?,
        &describe(aug)?,
        &record,
        cfg.temperature,
        cfg.scale,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{identity_record, EncoderShape};
    use alloc::string::ToString;

    fn stack(seed: u64, c: usize, h: usize, w: usize) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let map = FeatureMap::new(c, h, w, data).unwrap();
        FeatureStack::new(vec![map], (w as u32 * 8, h as u32 * 8), "s".to_string()).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                pixel: 1.0,
                temperature: 0.05,
                ..LossWeights::default()
            },
            pixel_loss: Some(PixelLossScale::PerCell),
            augment: AugmentConfig {
                area: (0.5, 0.8),
                min_attention: 0.0,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_rate_keeps_parameters_and_reports_losses() {
        let params = EncoderParams::random(EncoderShape::for_channels(4), 3);
        let state = TrainState::new(params, 16).unwrap();
        let mut cfg = small_config();
        cfg.optimizer.lr = 0.0;
        let (next, losses) = train_step(&state, &stack(1, 4, 5, 5), &stack(2, 4, 5, 5), &cfg, 9).unwrap();
        assert_eq!(next.params, state.params);
        assert!(losses.terms.pixel > 0.0 && losses.terms.entropy > 0.0);
        assert_eq!(losses.terms.image, 0.0); // empty queue
        assert_eq!(next.queue.len(), 1);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let params = EncoderParams::random(EncoderShape::for_channels(4), 5);
        let state = TrainState::new(params, 16).unwrap();
        let cfg = small_config();
        let (a, b) = (stack(1, 4, 5, 5), stack(2, 4, 5, 5));
        let first = train_step(&state, &a, &b, &cfg, 11).unwrap();
        let second = train_step(&state, &a, &b, &cfg, 11).unwrap();
        assert_eq!(first, second);
        assert_ne!(first.0.params.query, state.params.query);
    }

    #[test]
    fn failing_step_reports_an_error() {
        let params = EncoderParams::random(EncoderShape::for_channels(3), 5);
        let state = TrainState::new(params, 16).unwrap();
        let r = train_step(&state, &stack(1, 4, 5, 5), &stack(2, 4, 5, 5), &small_config(), 1);
        assert!(matches!(r, Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        let s = SgdConfig { lr: 0.1, momentum: 0.9, total_steps: 10 };
        assert_eq!(s.rate_at(0), 0.1);
        assert!((s.rate_at(5) - 0.05).abs() < 1e-12);
        assert!(s.rate_at(10).abs() < 1e-12);
    }

    #[test]
    fn identical_images_close_the_cycle() {
        let s = stack(4, 6, 4, 4);
        let f = s.final_layer().l2_normalized();
        let rec = identity_record(f.dims()).unwrap();
        let l = cycle_loss_from_features(&f, &f, &f, &rec, 0.0007, PixelLossScale::Total).unwrap();
        assert!(l < 1e-3, "{l}");
    }
}
