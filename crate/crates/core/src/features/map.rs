use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

/// One layer's dense features: `channels` values at each of `height × width`
/// grid cells, stored position-major (`data[(y * width + x) * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidTensor(format!(
                "feature map extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidTensor(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    /// From a `[C, H, W]` channel-major tensor.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.dims() else {
            return Err(Error::InvalidTensor(format!(
                "feature layer must be rank 3 (C, H, W), got {:?}",
                t.dims()
            )));
        };
        let (c, h, w) = (*c, *h, *w);
        let src = t.data();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = src[ch * h * w + p];
            }
        }
        Self::new(c, h, w, data)
    }

    /// To a `[C, H, W]` channel-major tensor.
    pub fn to_chw(&self) -> Tensor {
        let (c, n) = (self.channels, self.height * self.width);
        let mut data = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                data[ch * n + p] = self.data[p * c + ch];
            }
        }
        Tensor::new(vec![c, self.height, self.width], data).expect("valid by construction")
    }

    /// Position-major `[H·W, C]` matrix, one row per cell.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::matrix(self.height * self.width, self.channels, self.data.clone())
            .expect("valid by construction")
    }

    pub fn from_matrix(height: usize, width: usize, m: &Tensor) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::LengthMismatch {
                left: m.rows(),
                right: height * width,
            });
        }
        Self::new(m.cols(), height, width, m.data().to_vec())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub(crate) fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Every cell scaled to unit L2 norm; all-zero cells stay zero.
    pub fn l2_normalized(&self) -> FeatureMap {
        let mut out = self.clone();
        for cell in out.data.chunks_exact_mut(self.channels) {
            let n = math::sqrt(cell.iter().map(|&v| (v as f64) * (v as f64)).sum());
            if n > 0.0 {
                cell.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            }
        }
        out
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<FeatureMap> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Mean feature over all cells.
    pub fn global_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels) {
            for (m, &v) in mean.iter_mut().zip(cell) {
                *m += v as f64;
            }
        }
        let n = self.cells() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<FeatureMap> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let ys: Vec<(usize, usize, f64)> = (0..height)
            .map(|i| sample_axis(i, height, self.height))
            .collect();
        let xs: Vec<(usize, usize, f64)> = (0..width)
            .map(|j| sample_axis(j, width, self.width))
            .collect();
        let c = self.channels;
        let mut data = Vec::with_capacity(c * height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (self.cell(y0, x0), self.cell(y0, x1));
                let (d, e) = (self.cell(y1, x0), self.cell(y1, x1));
                for k in 0..c {
                    let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                    let bottom = d[k] as f64 * (1.0 - fx) + e[k] as f64 * fx;
                    data.push((top * (1.0 - fy) + bottom * fy) as f32);
                }
            }
        }
        Self::new(c, height, width, data)
    }
}

/// Source indices and blend weight for output index `i` of an `out`-long axis
/// resampled from an `input`-long one.
fn sample_axis(i: usize, out: usize, input: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * input as f64 / out as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, pos - lo as f64)
}

/// Per-layer features of one image, shallowest layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<FeatureMap>,
    /// `(width, height)` of the source image in pixels.
    pub image_dims: (u32, u32),
    pub source_id: String,
}

impl FeatureStack {
    pub fn new(layers: Vec<FeatureMap>, image_dims: (u32, u32), source_id: String) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("feature stack"));
        }
        if image_dims.0 == 0 || image_dims.1 == 0 {
            return Err(Error::InvalidArgument("image dims must be positive".into()));
        }
        Ok(Self {
            layers,
            image_dims,
            source_id,
        })
    }

    pub fn final_layer(&self) -> &FeatureMap {
        self.layers.last().expect("stack has at least one layer")
    }

    fn check_ids(&self, layer_ids: &[usize]) -> Result<()> {
        if layer_ids.is_empty() {
            return Err(Error::Empty("layer set"));
        }
        if let Some(&bad) = layer_ids.iter().find(|&&i| i >= self.layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "layer {bad} out of range for a {}-layer stack",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Grid of the shallowest selected layer.
    pub fn reference_dims(&self, layer_ids: &[usize]) -> Result<(usize, usize)> {
        self.check_ids(layer_ids)?;
        let shallowest = *layer_ids.iter().min().expect("non-empty");
        Ok(self.layers[shallowest].dims())
    }
}

/// Resizes each selected layer to `target` `(H, W)`, concatenates channels in
/// the given order and L2-normalizes every cell.
pub fn construct_hyperpixel(
    stack: &FeatureStack,
    layer_ids: &[usize],
    target: (usize, usize),
) -> Result<FeatureMap> {
    stack.check_ids(layer_ids)?;
    let (h, w) = target;
    let resized = layer_ids
        .iter()
        .map(|&i| stack.layers[i].resize_bilinear(h, w))
        .collect::<Result<Vec<_>>>()?;
    let channels: usize = resized.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(channels * h * w);
    for y in 0..h {
        for x in 0..w {
            for m in &resized {
                data.extend_from_slice(m.cell(y, x));
            }
        }
    }
    Ok(FeatureMap::new(channels, h, w, data)?.l2_normalized())
}

/// [`construct_hyperpixel`] at the grid of the shallowest selected layer.
pub fn hyperpixel(stack: &FeatureStack, layer_ids: &[usize]) -> Result<FeatureMap> {
    let dims = stack.reference_dims(layer_ids)?;
    construct_hyperpixel(stack, layer_ids, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn stack(layers: Vec<FeatureMap>) -> FeatureStack {
        FeatureStack::new(layers, (64, 64), "s".to_string()).unwrap()
    }

    #[test]
    fn chw_round_trip() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let m = FeatureMap::from_chw(&t).unwrap();
        assert_eq!(m.cell(0, 1), &[1.0, 7.0]);
        assert_eq!(m.to_chw(), t);
    }

    #[test]
    fn bilinear_ramp_upsample() {
        // 2x2 ramp in x: columns 0 and 1. Half-pixel centres give source
        // coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let m = FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = m.resize_bilinear(4, 4).unwrap();
        for y in 0..4 {
            let row: Vec<f32> = (0..4).map(|x| r.cell(y, x)[0]).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
        // Ramp in both axes: value = x + 2y on the 2x2 grid.
        let m = FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = m.resize_bilinear(4, 4).unwrap();
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let expect = w[x] + 2.0 * w[y];
                assert!((r.cell(y, x)[0] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_layer_at_target_is_just_normalized() {
        let m = FeatureMap::new(2, 1, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let hp = construct_hyperpixel(&stack(vec![m.clone()]), &[0], (1, 2)).unwrap();
        assert_eq!(hp, m.l2_normalized());
        assert_eq!(hp.cell(0, 0), &[0.6, 0.8]);
        assert_eq!(hp.cell(0, 1), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_layers_give_equal_halves() {
        let m = FeatureMap::new(3, 2, 2, (0..12).map(|v| v as f32 - 4.0).collect()).unwrap();
        let hp = hyperpixel(&stack(vec![m.clone(), m]), &[0, 1]).unwrap();
        assert_eq!(hp.channels(), 6);
        for y in 0..2 {
            for x in 0..2 {
                let c = hp.cell(y, x);
                assert_eq!(&c[..3], &c[3..]);
                let n: f32 = c.iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hyperpixel_uses_shallowest_layer_grid() {
        let fine = FeatureMap::zeros(2, 8, 8).unwrap();
        let coarse = FeatureMap::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let s = stack(vec![fine, coarse]);
        let hp = hyperpixel(&s, &[1, 0]).unwrap();
        assert_eq!((hp.channels(), hp.height(), hp.width()), (3, 8, 8));
        // coarse layer first, as ordered by the caller
        assert_eq!(hp.cell(3, 3), &[1.0, 0.0, 0.0]);
        assert!(matches!(hyperpixel(&s, &[]), Err(Error::Empty(_))));
        assert!(hyperpixel(&s, &[2]).is_err());
    }
}
