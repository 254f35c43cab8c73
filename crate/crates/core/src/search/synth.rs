//! Seeded synthetic feature stacks with exact keypoint correspondences.
//!
//! Each category owns a smooth semantic field over an object-centred frame
//! plus a set of part locations in that frame. An instance places the object
//! at a jittered position (optionally scaled and mirrored), so equal frame
//! coordinates carry equal semantics across instances. Background cells carry
//! a category scene field anchored to the image frame. On top sit an
//! instance-specific appearance field in the remaining channels and i.i.d.
//! noise. Layers are pooled, channel-mixed, independently noised views of
//! the same content.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::eval::PairAnnotation;
use crate::features::{FeatureMap, FeatureStack};
use crate::math;
use crate::{Error, Result};

/// One generated layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthLayer {
    /// Pooling factor relative to the base grid.
    pub stride: usize,
    /// Noise std-dev as a multiple of the dataset σ.
    pub noise_scale: f64,
    /// Apply a fixed random rotation to the channels.
    pub mix: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Base grid `(height, width)` in cells.
    pub grid: (usize, usize),
    /// Pixels per base cell.
    pub cell_px: u32,
    pub channels: usize,
    /// Leading channels carrying semantics; the rest carry appearance.
    pub signal_channels: usize,
    pub categories: usize,
    pub instances_per_category: usize,
    pub pairs_per_category: usize,
    pub keypoints: usize,
    /// Object half-extent `(x, y)` in cells; the object spans `2r + 1` cells.
    pub object_radius: (usize, usize),
    /// Largest translation of the object centre, in cells.
    pub jitter: usize,
    pub flip: bool,
    pub scale: (f64, f64),
    /// Scale of the semantic field.
    pub signal: f64,
    /// Scale of the background scene field, relative to `signal`.
    pub scene: f64,
    /// Feature noise σ.
    pub noise: f64,
    /// Appearance field amplitude as a multiple of σ.
    pub appearance: f64,
    /// Cosine terms in each semantic field.
    pub field_terms: usize,
    pub layers: Vec<SynthLayer>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: (12, 12),
            cell_px: 8,
            channels: 16,
            signal_channels: 8,
            categories: 10,
            instances_per_category: 8,
            pairs_per_category: 20,
            keypoints: 6,
            object_radius: (3, 3),
            jitter: 2,
            flip: false,
            scale: (1.0, 1.0),
            signal: 3.0,
            scene: 0.5,
            noise: 0.5,
            appearance: 2.0,
            field_terms: 12,
            layers: vec![
                SynthLayer { stride: 1, noise_scale: 1.0, mix: false },
                SynthLayer { stride: 1, noise_scale: 1.0, mix: true },
                SynthLayer { stride: 2, noise_scale: 1.0, mix: true },
                SynthLayer { stride: 4, noise_scale: 1.0, mix: true },
            ],
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic config: {m}")));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(self.appearance >= 0.0 && self.signal >= 0.0 && self.scene >= 0.0) {
            return bad("appearance, signal and scene must be non-negative");
        }
        if self.channels == 0 || self.signal_channels == 0 || self.signal_channels > self.channels {
            return bad("need 0 < signal_channels <= channels");
        }
        if self.categories == 0 || self.pairs_per_category == 0 || self.keypoints == 0 {
            return bad("categories, pairs and keypoints must be positive");
        }
        if self.instances_per_category < 2 {
            return bad("each category needs at least two instances");
        }
        if self.layers.is_empty() || self.field_terms == 0 || self.cell_px == 0 {
            return bad("need at least one layer, one field term and positive cell size");
        }
        if !(0.0 < self.scale.0 && self.scale.0 <= self.scale.1) {
            return bad("scale range must be positive and ordered");
        }
        let (h, w) = self.grid;
        let (rx, ry) = self.object_radius;
        let span = |r: usize| self.scale.1 * (2 * r + 1) as f64 + 2.0 * self.jitter as f64;
        if span(rx) > w as f64 || span(ry) > h as f64 {
            return Err(Error::LayoutDoesNotFit(format!(
                "object of radius {:?} with jitter {} and scale up to {} needs more than a {h}x{w} grid",
                self.object_radius, self.jitter, self.scale.1
            )));
        }
        let slots = (2 * rx + 1) * (2 * ry + 1);
        if self.keypoints > slots {
            return Err(Error::LayoutDoesNotFit(format!(
                "{} keypoints do not fit in {slots} object cells",
                self.keypoints
            )));
        }
        if let Some(l) = self.layers.iter().find(|l| l.stride == 0 || h % l.stride != 0 || w % l.stride != 0) {
            return Err(Error::LayoutDoesNotFit(format!(
                "stride {} does not divide the {h}x{w} grid",
                l.stride
            )));
        }
        Ok(())
    }
}

/// Generated pairs and the feature stack of every referenced image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub annotations: Vec<PairAnnotation>,
    pub stacks: BTreeMap<String, FeatureStack>,
}

/// Sum of cosines `Σ a_k cos(ω_k · p + φ_k)` with vector amplitudes.
struct Field {
    amplitudes: Vec<Vec<f64>>,
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

impl Field {
    fn random(rng: &mut ChaCha8Rng, dim: usize, terms: usize, freq: (f64, f64)) -> Self {
        let norm = math::sqrt(2.0 / (terms * dim) as f64);
        let amplitudes = (0..terms).map(|_| gaussian(rng, dim, norm)).collect();
        let freqs = (0..terms)
            .map(|_| {
                let angle = rng.random_range(0.0..core::f64::consts::TAU);
                let mag = rng.random_range(freq.0..freq.1);
                (mag * math::cos(angle), mag * math::sin(angle))
            })
            .collect();
        let phases = (0..terms)
            .map(|_| rng.random_range(0.0..core::f64::consts::TAU))
            .collect();
        Self {
            amplitudes,
            freqs,
            phases,
        }
    }

    fn add_at(&self, p: (f64, f64), scale: f64, out: &mut [f64]) {
        for ((a, f), ph) in self.amplitudes.iter().zip(&self.freqs).zip(&self.phases) {
            let c = scale * math::cos(f.0 * p.0 + f.1 * p.1 + ph);
            out.iter_mut().zip(a).for_each(|(o, &ai)| *o += c * ai);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Random orthogonal `n×n` matrix (rows orthonormal), via Gram-Schmidt.
fn rotation(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian(rng, n, 1.0);
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            rows.push(v.iter().map(|x| x / norm).collect());
        }
    }
    rows
}

struct Category {
    field: Field,
    scene: Field,
    objectness: Vec<f64>,
    parts: Vec<(i64, i64)>,
}

/// Generates `categories × pairs_per_category` annotated pairs.
pub fn generate_synthetic_pairs(seed: u64, cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.grid;
    let (c, s) = (cfg.channels, cfg.signal_channels);
    let (rx, ry) = (cfg.object_radius.0 as i64, cfg.object_radius.1 as i64);
    let px = cfg.cell_px as f64;
    let image_dims = (w as u32 * cfg.cell_px, h as u32 * cfg.cell_px);

    let mixers: Vec<Option<Vec<Vec<f64>>>> = cfg
        .layers
        .iter()
        .map(|l| l.mix.then(|| rotation(&mut rng, c)))
        .collect();
    let background: Vec<f64> = unit(&mut rng, s).iter().map(|v| 0.2 * v).collect();

    let mut stacks = BTreeMap::new();
    let mut annotations = Vec::new();
    for cat in 0..cfg.categories {
        let category = Category {
            field: Field::random(&mut rng, s, cfg.field_terms, (0.5, 1.4)),
            scene: Field::random(&mut rng, s, cfg.field_terms, (0.3, 1.0)),
            objectness: unit(&mut rng, s).iter().map(|v| 0.8 * v).collect(),
            parts: {
                let mut slots: Vec<(i64, i64)> = (-ry..=ry)
                    .flat_map(|y| (-rx..=rx).map(move |x| (x, y)))
                    .collect();
                let mut parts = Vec::with_capacity(cfg.keypoints);
                for _ in 0..cfg.keypoints {
                    let k = rng.random_range(0..slots.len());
                    parts.push(slots.swap_remove(k));
                }
                parts
            },
        };

        let mut placed = Vec::with_capacity(cfg.instances_per_category);
        for inst in 0..cfg.instances_per_category {
            let j = cfg.jitter as i64;
            let centre = (
                (w as i64 - 1) / 2 + rng.random_range(-j..=j),
                (h as i64 - 1) / 2 + rng.random_range(-j..=j),
            );
            let scale = if cfg.scale.1 > cfg.scale.0 {
                rng.random_range(cfg.scale.0..cfg.scale.1)
            } else {
                cfg.scale.0
            };
            let mirror = if cfg.flip && rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let appearance = Field::random(&mut rng, c - s, cfg.field_terms, (0.3, 1.0));

            let mut base = vec![0.0f64; h * w * c];
            for y in 0..h {
                for x in 0..w {
                    let cell = &mut base[(y * w + x) * c..(y * w + x + 1) * c];
                    let u = mirror * (x as f64 - centre.0 as f64) / scale;
                    let v = (y as f64 - centre.1 as f64) / scale;
                    let inside = u.abs() <= rx as f64 + 0.5 && v.abs() <= ry as f64 + 0.5;
                    let (sig, app) = cell.split_at_mut(s);
                    if inside {
                        sig.iter_mut().zip(&category.objectness).for_each(|(o, b)| *o += b);
                        category.field.add_at((u, v), cfg.signal, sig);
                    } else {
                        sig.iter_mut().zip(&background).for_each(|(o, b)| *o += b);
                        let anchored = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
                        category.scene.add_at(anchored, cfg.signal * cfg.scene, sig);
                    }
                    if c > s {
                        appearance.add_at((x as f64, y as f64), cfg.appearance * cfg.noise, app);
                    }
                }
            }

            let layers = cfg
                .layers
                .iter()
                .zip(&mixers)
                .map(|(layer, mixer)| render_layer(&base, (h, w), c, layer, mixer.as_deref(), cfg.noise, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let id = format!("c{cat:02}_i{inst:02}");
            stacks.insert(id.clone(), FeatureStack::new(layers, image_dims, id.clone())?);

            let kps = category
                .parts
                .iter()
                .map(|&(pu, pv)| {
                    (
                        (centre.0 as f64 + mirror * scale * pu as f64 + 0.5) * px,
                        (centre.1 as f64 + scale * pv as f64 + 0.5) * px,
                    )
                })
                .collect::<Vec<_>>();
            let bbox = (
                (centre.0 as f64 - scale * (rx as f64 + 0.5) + 0.5) * px,
                (centre.1 as f64 - scale * (ry as f64 + 0.5) + 0.5) * px,
                scale * (2 * rx + 1) as f64 * px,
                scale * (2 * ry + 1) as f64 * px,
            );
            placed.push((id, kps, bbox));
        }

        for _ in 0..cfg.pairs_per_category {
            let a = rng.random_range(0..placed.len());
            let mut b = rng.random_range(0..placed.len() - 1);
            if b >= a {
                b += 1;
            }
            let (src, trg) = (&placed[a], &placed[b]);
            annotations.push(PairAnnotation {
                src_id: src.0.clone(),
                trg_id: trg.0.clone(),
                src_kps: src.1.clone(),
                trg_kps: trg.1.clone(),
                src_bbox: src.2,
                trg_bbox: trg.2,
                category: format!("c{cat:02}"),
            });
        }
    }
    Ok(SyntheticDataset {
        annotations,
        stacks,
    })
}

fn render_layer(
    base: &[f64],
    (h, w): (usize, usize),
    c: usize,
    layer: &SynthLayer,
    mixer: Option<&[Vec<f64>]>,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMap> {
    let st = layer.stride;
    let (lh, lw) = (h / st, w / st);
    let mut data = Vec::with_capacity(lh * lw * c);
    let mut pooled = vec![0.0; c];
    for y in 0..lh {
        for x in 0..lw {
            pooled.iter_mut().for_each(|p| *p = 0.0);
            for by in 0..st {
                for bx in 0..st {
                    let k = ((y * st + by) * w + x * st + bx) * c;
                    pooled.iter_mut().zip(&base[k..k + c]).for_each(|(p, v)| *p += v);
                }
            }
            let norm = (st * st) as f64;
            let cell: Vec<f64> = match mixer {
                Some(m) => m
                    .iter()
                    .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() / norm)
                    .collect(),
                None => pooled.iter().map(|p| p / norm).collect(),
            };
            for v in cell {
                let n: f64 = StandardNormal.sample(rng);
                data.push((v + sigma * layer.noise_scale * n) as f32);
            }
        }
    }
    FeatureMap::new(c, lh, lw, data)
}
