use alloc::format;

use crate::math;
use crate::{Error, Result};

/// Which extent sets the PCK threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckBasis {
    /// Target image `(width, height)`.
    #[default]
    Img,
    /// Target bounding box `(width, height)`.
    Bbox,
}

/// Fraction of predictions within `alpha · max(w, h)` of the ground truth.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], alpha: f64, dims: (f64, f64)) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::Empty("keypoint list"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(dims.0 > 0.0 && dims.1 > 0.0) {
        return Err(Error::InvalidArgument(format!("PCK extent must be positive, got {dims:?}")));
    }
    let threshold = alpha * dims.0.max(dims.1);
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            let (dx, dy) = (p.0 - g.0, p.1 - g.1);
            math::sqrt(dx * dx + dy * dy) <= threshold
        })
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn examples() {
        let gt = vec![(10.0, 10.0), (50.0, 40.0)];
        assert_eq!(pck(&gt, &gt, 0.05, (100.0, 80.0)).unwrap(), 1.0);
        // threshold 10 on a 100x80 image
        let pred = vec![(19.0, 10.0), (61.0, 40.0)];
        assert_eq!(pck(&pred, &gt, 0.1, (100.0, 80.0)).unwrap(), 0.5);
        assert!(pck(&pred[..1], &gt, 0.1, (100.0, 80.0)).is_err());
        assert!(pck(&pred, &gt, 0.0, (100.0, 80.0)).is_err());
        assert!(pck(&[], &[], 0.1, (100.0, 80.0)).is_err());
    }
}
