use alloc::vec::Vec;

use super::{Grid, PositionGrid};
use crate::{Error, Result, Tensor};

/// Image extent in pixels, `(width, height)`.
pub type ImageDims = (f64, f64);

/// Grid cell containing pixel `(x, y)`, as a row-major index.
pub fn cell_of(point: (f64, f64), grid: Grid, image: ImageDims) -> usize {
    let (h, w) = grid;
    let col = ((point.0 / image.0 * w as f64) as usize).min(w - 1);
    let row = ((point.1 / image.1 * h as f64) as usize).min(h - 1);
    row * w + col
}

/// Transfers source keypoints to the target image.
///
/// Each keypoint snaps to the source cell containing it; its prediction is
/// the score-weighted mean of target cell centres over that cell's row
/// (all-zero rows count as uniform), mapped back to target pixels.
pub fn match_keypoints(
    scores: &Tensor,
    src_kps: &[(f64, f64)],
    src_grid: Grid,
    trg_grid: Grid,
    src_image: ImageDims,
    trg_image: ImageDims,
) -> Result<Vec<(f64, f64)>> {
    let (n, m) = (src_grid.0 * src_grid.1, trg_grid.0 * trg_grid.1);
    if scores.dims() != [n, m] {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: n * m,
        });
    }
    for (index, &(x, y)) in src_kps.iter().enumerate() {
        let inside = (0.0..=src_image.0).contains(&x) && (0.0..=src_image.1).contains(&y);
        if !inside {
            return Err(Error::KeypointOutOfBounds {
                index,
                x,
                y,
                width: src_image.0,
                height: src_image.1,
            });
        }
    }
    let centres = PositionGrid::new(trg_grid)?;
    Ok(src_kps
        .iter()
        .map(|&kp| {
            let row = scores.row(cell_of(kp, src_grid, src_image));
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            let (mut x, mut y) = (0.0, 0.0);
            for (j, &s) in row.iter().enumerate() {
                let w = if total > 0.0 { s as f64 / total } else { 1.0 / m as f64 };
                let (cx, cy) = centres.point(j);
                x += w * cx;
                y += w * cy;
            }
            (x * trg_image.0, y * trg_image.1)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_maps_cell_centres_to_themselves() {
        let s = Tensor::matrix(4, 4, (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let kps = vec![(8.0, 8.0), (24.0, 8.0), (8.0, 24.0), (24.0, 24.0)];
        let out = match_keypoints(&s, &kps, (2, 2), (2, 2), (32.0, 32.0), (32.0, 32.0)).unwrap();
        for (a, b) in out.iter().zip(&kps) {
            assert!((a.0 - b.0).abs() < 1e-5 && (a.1 - b.1).abs() < 1e-5);
        }
    }

    #[test]
    fn one_hot_and_two_peaks() {
        let mut d = vec![0.0f32; 4 * 4];
        d[3] = 1.0; // source cell 0 → target cell 3
        d[4 + 1] = 0.5; // source cell 1 → midpoint of cells 1 and 2
        d[4 + 2] = 0.5;
        let s = Tensor::matrix(4, 4, d).unwrap();
        let out = match_keypoints(&s, &[(1.0, 1.0), (30.0, 2.0)], (2, 2), (2, 2), (32.0, 32.0), (64.0, 32.0)).unwrap();
        assert_eq!(out[0], (48.0, 24.0));
        // centres of cells 1 and 2 in a 64x32 target are (48, 8) and (16, 24)
        assert!((out[1].0 - 32.0).abs() < 1e-9 && (out[1].1 - 16.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_keypoint_names_its_index() {
        let s = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            match_keypoints(&s, &[(1.0, 1.0), (5.0, -1.0)], (1, 1), (1, 1), (4.0, 4.0), (4.0, 4.0)),
            Err(Error::KeypointOutOfBounds { index: 1, .. })
        ));
    }
}
