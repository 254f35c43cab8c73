//! Attention-guided crop → flip → rotate augmentation with exact bookkeeping
//! of where every augmented cell came from.
//!
//! Coordinates are cell indices: `(x, y)` = `(column, row)`. The augmented
//! grid has the crop's extent; rotation is about the crop centre.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttentionMap, FeatureMap};
use crate::math;
use crate::{Error, Result};

/// Crop rectangle in source grid units. `x`/`y` may be negative or run past
/// the source; cells that fall outside are marked invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area, sampled uniformly.
    pub area: (f64, f64),
    /// Crop aspect ratio relative to the source, sampled log-uniformly.
    pub aspect: (f64, f64),
    /// Rotation is uniform in `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    /// Minimum mean rescaled attention inside the crop.
    pub min_attention: f64,
    pub max_tries: usize,
    /// Std-dev of Gaussian noise added to valid augmented cells (0 = off).
    pub feature_noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            area: (0.3, 0.8),
            aspect: (0.75, 4.0 / 3.0),
            max_rotation_deg: 15.0,
            flip_prob: 0.5,
            min_attention: 0.5,
            max_tries: 50,
            feature_noise: 0.0,
        }
    }
}

impl AugmentConfig {
    /// Full-grid crop, no flip, no rotation.
    pub fn identity() -> Self {
        Self {
            area: (1.0, 1.0),
            aspect: (1.0, 1.0),
            max_rotation_deg: 0.0,
            flip_prob: 0.0,
            min_attention: 0.0,
            max_tries: 1,
            feature_noise: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.area.0
            && self.area.0 <= self.area.1
            && self.area.1 <= 1.0
            && 0.0 < self.aspect.0
            && self.aspect.0 <= self.aspect.1
            && self.max_rotation_deg >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.max_tries >= 1
            && self.feature_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid augmentation config".into()))
        }
    }
}

/// How an augmented grid maps back onto its source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRecord {
    pub crop_rect: CropRect,
    pub hflip: bool,
    pub rotation_deg: f64,
    /// Maps augmented `(x, y, 1)` to source `(x, y)`.
    pub affine_inverse: [[f64; 3]; 2],
    /// One flag per augmented cell, row-major.
    pub valid_mask: Vec<bool>,
    /// Source grid `(height, width)`.
    pub source_dims: (usize, usize),
}

impl AugmentationRecord {
    pub fn new(
        source_dims: (usize, usize),
        crop_rect: CropRect,
        hflip: bool,
        rotation_deg: f64,
    ) -> Result<Self> {
        if source_dims.0 == 0 || source_dims.1 == 0 || crop_rect.width == 0 || crop_rect.height == 0
        {
            return Err(Error::InvalidArgument("grid extents must be positive".into()));
        }
        let (w, h) = (crop_rect.width as f64, crop_rect.height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let t = rotation_deg.to_radians();
        let (cos, sin) = (math::cos(t), math::sin(t));
        // u = R(-θ)(a - c) + c
        let ux = [cos, sin, cx - cos * cx - sin * cy];
        let uy = [-sin, cos, cy + sin * cx - cos * cy];
        let x_row = if hflip {
            [-ux[0], -ux[1], (w - 1.0) - ux[2] + crop_rect.x as f64]
        } else {
            [ux[0], ux[1], ux[2] + crop_rect.x as f64]
        };
        let y_row = [uy[0], uy[1], uy[2] + crop_rect.y as f64];
        let mut record = Self {
            crop_rect,
            hflip,
            rotation_deg,
            affine_inverse: [x_row, y_row],
            valid_mask: Vec::new(),
            source_dims,
        };
        record.valid_mask = (0..crop_rect.height)
            .flat_map(|y| (0..crop_rect.width).map(move |x| (x, y)))
            .map(|(x, y)| record.source_cell(x, y).is_some())
            .collect();
        Ok(record)
    }

    /// Augmented grid `(height, width)`.
    pub fn augmented_dims(&self) -> (usize, usize) {
        (self.crop_rect.height, self.crop_rect.width)
    }

    /// Source coordinates of augmented point `(x, y)`.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        let [r0, r1] = &self.affine_inverse;
        (
            r0[0] * x + r0[1] * y + r0[2],
            r1[0] * x + r1[1] * y + r1[2],
        )
    }

    /// Augmented coordinates of source point `(x, y)`.
    pub fn to_augmented(&self, x: f64, y: f64) -> (f64, f64) {
        let c = &self.crop_rect;
        let (w, h) = (c.width as f64, c.height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let mut ux = x - c.x as f64;
        let uy = y - c.y as f64;
        if self.hflip {
            ux = (w - 1.0) - ux;
        }
        let t = self.rotation_deg.to_radians();
        let (cos, sin) = (math::cos(t), math::sin(t));
        (
            cos * (ux - cx) - sin * (uy - cy) + cx,
            sin * (ux - cx) + cos * (uy - cy) + cy,
        )
    }

    /// Nearest source cell `(x, y)` of an augmented cell, if inside the source.
    pub fn source_cell(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let (sx, sy) = self.to_source(x as f64, y as f64);
        let (rx, ry) = (math::round(sx), math::round(sy));
        let (h, w) = self.source_dims;
        let inside = rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64;
        inside.then_some((rx as usize, ry as usize))
    }

    fn check_source(&self, map: &FeatureMap) -> Result<()> {
        if map.dims() != self.source_dims {
            return Err(Error::InvalidArgument(alloc::format!(
                "record expects a {:?} source grid, got {:?}",
                self.source_dims,
                map.dims()
            )));
        }
        Ok(())
    }

    /// Nearest-neighbour resampling; invalid cells are zero.
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.check_source(map)?;
        let (h, w) = self.augmented_dims();
        let mut out = FeatureMap::zeros(map.channels(), h, w)?;
        for y in 0..h {
            for x in 0..w {
                if let Some((sx, sy)) = self.source_cell(x, y) {
                    out.cell_mut(y, x).copy_from_slice(map.cell(sy, sx));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resampling (for pixel images); invalid cells are zero.
    pub fn apply_bilinear(&self, map: &FeatureMap) -> Result<FeatureMap> {
        self.check_source(map)?;
        let (h, w) = self.augmented_dims();
        let (sh, sw) = self.source_dims;
        let mut out = FeatureMap::zeros(map.channels(), h, w)?;
        for y in 0..h {
            for x in 0..w {
                if !self.valid_mask[y * w + x] {
                    continue;
                }
                let (sx, sy) = self.to_source(x as f64, y as f64);
                let sx = sx.clamp(0.0, (sw - 1) as f64);
                let sy = sy.clamp(0.0, (sh - 1) as f64);
                let (x0, y0) = (math::floor(sx) as usize, math::floor(sy) as usize);
                let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let cell = out.cell_mut(y, x);
                for (k, v) in cell.iter_mut().enumerate() {
                    let top = map.cell(y0, x0)[k] as f64 * (1.0 - fx) + map.cell(y0, x1)[k] as f64 * fx;
                    let bot = map.cell(y1, x0)[k] as f64 * (1.0 - fx) + map.cell(y1, x1)[k] as f64 * fx;
                    *v = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
        Ok(out)
    }
}

fn sample_crop(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize),
    cfg: &AugmentConfig,
) -> CropRect {
    let (sh, sw) = dims;
    let area = uniform(rng, cfg.area.0, cfg.area.1);
    let aspect = math::exp(uniform(rng, math::ln(cfg.aspect.0), math::ln(cfg.aspect.1)));
    let w = (math::round(sw as f64 * math::sqrt(area * aspect)) as usize).clamp(1, sw);
    let h = (math::round(sh as f64 * math::sqrt(area / aspect)) as usize).clamp(1, sh);
    let x = rng.random_range(0..=(sw - w)) as i64;
    let y = rng.random_range(0..=(sh - h)) as i64;
    CropRect {
        x,
        y,
        width: w,
        height: h,
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a crop whose mean rescaled attention reaches `cfg.min_attention`,
/// then a flip and a rotation, and resamples `map` accordingly.
///
/// The attention map is resampled onto `map`'s grid when their dims differ.
pub fn attention_guided_crop(
    map: &FeatureMap,
    attention: &AttentionMap,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(FeatureMap, AugmentationRecord)> {
    cfg.validate()?;
    let (h, w) = map.dims();
    let att = if attention.dims() == (h, w) {
        attention.rescaled().to_vec()
    } else {
        attention.rescaled_on(h, w)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = None;
    for _ in 0..cfg.max_tries {
        let rect = sample_crop(&mut rng, (h, w), cfg);
        let mut total = 0.0;
        for y in 0..rect.height {
            for x in 0..rect.width {
                total += att[(rect.y as usize + y) * w + rect.x as usize + x] as f64;
            }
        }
        let mean = total / (rect.width * rect.height) as f64;
        if mean >= cfg.min_attention {
            chosen = Some(rect);
            break;
        }
    }
    let rect = chosen.ok_or(Error::CropNotFound {
        threshold: cfg.min_attention,
        tries: cfg.max_tries,
    })?;
    let hflip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let rotation = uniform(&mut rng, -cfg.max_rotation_deg, cfg.max_rotation_deg);
    let record = AugmentationRecord::new((h, w), rect, hflip, rotation)?;
    let mut out = record.apply(map)?;
    if cfg.feature_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.feature_noise)
            .map_err(|_| Error::InvalidArgument("feature noise".into()))?;
        let (ah, aw) = record.augmented_dims();
        for y in 0..ah {
            for x in 0..aw {
                if record.valid_mask[y * aw + x] {
                    for v in out.cell_mut(y, x) {
                        *v += normal.sample(&mut rng) as f32;
                    }
                }
            }
        }
    }
    Ok((out, record))
}

/// Identity record for a `(height, width)` grid.
pub fn identity_record(dims: (usize, usize)) -> Result<AugmentationRecord> {
    AugmentationRecord::new(
        dims,
        CropRect {
            x: 0,
            y: 0,
            width: dims.1,
            height: dims.0,
        },
        false,
        0.0,
    )
}

/// Flat row-major indices of the valid cells.
pub fn valid_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(1, h, w, (0..h * w).map(|v| v as f32).collect()).unwrap()
    }

    fn flat_attention(h: usize, w: usize) -> AttentionMap {
        AttentionMap::from_values(h, w, alloc::vec![0.5; h * w]).unwrap()
    }

    #[test]
    fn identity_config_gives_identity_record() {
        let m = ramp(6, 5);
        let (out, rec) = attention_guided_crop(&m, &flat_attention(6, 5), 3, &AugmentConfig::identity()).unwrap();
        assert_eq!(rec.affine_inverse, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(rec.valid_mask.iter().all(|&v| v));
        assert_eq!(out, m);
    }

    #[test]
    fn hflip_reflects_columns() {
        let rec = AugmentationRecord::new(
            (8, 8),
            CropRect { x: 0, y: 0, width: 8, height: 8 },
            true,
            0.0,
        )
        .unwrap();
        for x in 0..8 {
            let (sx, sy) = rec.to_source(x as f64, 3.0);
            assert_eq!((sx, sy), (7.0 - x as f64, 3.0));
        }
    }

    #[test]
    fn crop_translates() {
        let rec = AugmentationRecord::new(
            (8, 8),
            CropRect { x: 2, y: 2, width: 4, height: 4 },
            false,
            0.0,
        )
        .unwrap();
        assert_eq!(rec.to_source(0.0, 0.0), (2.0, 2.0));
        assert_eq!(rec.source_cell(0, 0), Some((2, 2)));
        let out = rec.apply(&ramp(8, 8)).unwrap();
        assert_eq!(out.cell(0, 0), &[18.0]);
        assert_eq!(out.cell(3, 3), &[45.0]);
    }

    #[test]
    fn out_of_bounds_cells_are_invalid() {
        let rec = AugmentationRecord::new(
            (4, 4),
            CropRect { x: 2, y: 0, width: 4, height: 4 },
            false,
            0.0,
        )
        .unwrap();
        let row: Vec<bool> = rec.valid_mask[..4].to_vec();
        assert_eq!(row, alloc::vec![true, true, false, false]);
        let out = rec.apply(&ramp(4, 4)).unwrap();
        assert_eq!(out.cell(0, 2), &[0.0]);
    }

    #[test]
    fn forward_then_inverse_is_identity() {
        let rec = AugmentationRecord::new(
            (10, 12),
            CropRect { x: 3, y: 1, width: 7, height: 6 },
            true,
            11.0,
        )
        .unwrap();
        for y in 0..6 {
            for x in 0..7 {
                let (sx, sy) = rec.to_source(x as f64, y as f64);
                let (ax, ay) = rec.to_augmented(sx, sy);
                assert!((ax - x as f64).abs() < 1e-9 && (ay - y as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_threshold_failure_suggests_reduction() {
        let m = ramp(6, 6);
        let mut values = alloc::vec![0.0; 36];
        values[0] = 1.0;
        let att = AttentionMap::from_values(6, 6, values).unwrap();
        let cfg = AugmentConfig {
            min_attention: 0.9,
            max_tries: 5,
            ..AugmentConfig::default()
        };
        assert!(matches!(
            attention_guided_crop(&m, &att, 1, &cfg),
            Err(Error::CropNotFound { tries: 5, .. })
        ));
    }

    #[test]
    fn sampled_crops_respect_attention_and_are_deterministic() {
        let m = ramp(12, 12);
        let values = (0..144)
            .map(|i| if (i / 12) < 6 && (i % 12) < 6 { 1.0 } else { 0.0 })
            .collect();
        let att = AttentionMap::from_values(12, 12, values).unwrap();
        let cfg = AugmentConfig {
            area: (0.1, 0.25),
            min_attention: 0.6,
            max_tries: 500,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let (a, ra) = attention_guided_crop(&m, &att, seed, &cfg).unwrap();
            let (b, rb) = attention_guided_crop(&m, &att, seed, &cfg).unwrap();
            assert_eq!((a, &ra), (b, &rb));
            let c = ra.crop_rect;
            let inside = (0..c.height)
                .flat_map(|y| (0..c.width).map(move |x| (x, y)))
                .filter(|&(x, y)| (c.y as usize + y) < 6 && (c.x as usize + x) < 6)
                .count();
            assert!(inside as f64 / (c.width * c.height) as f64 >= 0.6);
        }
    }
}
