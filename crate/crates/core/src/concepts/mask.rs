use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{nn_resize, Tensor};

/// `>= threshold` becomes 1, everything else 0.
pub fn binarize_mask(gray: &Tensor, threshold: f32) -> Tensor {
    gray.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Binary masks at every attention resolution, each resampled directly
/// from the latent-resolution base mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: BTreeMap<usize, Tensor>,
}

impl MaskPyramid {
    pub fn level(&self, res: usize) -> Result<&Tensor> {
        self.levels
            .get(&res)
            .ok_or_else(|| Error::Input(format!("mask pyramid has no {res}×{res} level")))
    }
}

pub fn build_mask_pyramid(base: &Tensor, resolutions: &[usize]) -> Result<MaskPyramid> {
    base.shape2()?;
    if base.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("pyramid base mask is not binary".into()));
    }
    let levels = resolutions
        .iter()
        .map(|&r| Ok((r, nn_resize(base, r, r)?)))
        .collect::<Result<_>>()?;
    Ok(MaskPyramid { levels })
}

/// Inclusive per-channel RGB box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorRange {
    pub lo: [f32; 3],
    pub hi: [f32; 3],
}

impl ColorRange {
    pub fn around(rgb: [f32; 3], tol: f32) -> Self {
        Self {
            lo: rgb.map(|c| c - tol),
            hi: rgb.map(|c| c + tol),
        }
    }

    pub fn contains(&self, px: [f32; 3]) -> bool {
        (0..3).all(|k| self.lo[k] <= px[k] && px[k] <= self.hi[k])
    }

    fn overlaps(&self, other: &ColorRange) -> bool {
        (0..3).all(|k| self.lo[k] <= other.hi[k] && other.lo[k] <= self.hi[k])
    }
}

/// One mask per range; a pixel is set when all three channels fall inside.
pub fn threshold_segment(image: &Tensor, ranges: &[ColorRange]) -> Result<Vec<Tensor>> {
    let (h, w) = match image.dims() {
        [3, h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("image must be 3×H×W, got {d:?}"))),
    };
    for (i, a) in ranges.iter().enumerate() {
        for (j, b) in ranges.iter().enumerate().skip(i + 1) {
            if a.overlaps(b) {
                return Err(Error::Config(format!("color ranges {i} and {j} overlap")));
            }
        }
    }
    let plane = h * w;
    let d = image.data();
    Ok(ranges
        .iter()
        .map(|r| {
            let data = (0..plane)
                .map(|i| {
                    let px = [d[i], d[plane + i], d[2 * plane + i]];
                    if r.contains(px) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::from_parts(vec![h, w], data)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn_source_index;

    #[test]
    fn binarize_rules() {
        let g = Tensor::full(&[2, 2], 0.6);
        assert_eq!(binarize_mask(&g, 0.5), Tensor::ones(&[2, 2]));
        let tie = Tensor::full(&[1, 1], 0.5);
        assert_eq!(binarize_mask(&tie, 0.5).data(), &[1.0]);
        let x = Tensor::new(vec![1, 4], vec![0.1, 0.5, 0.49, 0.9]).unwrap();
        let once = binarize_mask(&x, 0.5);
        assert_eq!(binarize_mask(&once, 0.5), once);
    }

    #[test]
    fn pyramid_levels() {
        let p = build_mask_pyramid(&Tensor::ones(&[16, 16]), &[16, 8, 4]).unwrap();
        assert_eq!(p.levels.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16]);
        assert!(p.levels.values().all(|m| m.data().iter().all(|&v| v == 1.0)));
        assert!(build_mask_pyramid(&Tensor::full(&[4, 4], 0.3), &[2]).is_err());
    }

    #[test]
    fn single_cell_pyramid_follows_index_map() {
        for cell in 0..256 {
            let mut base = Tensor::zeros(&[16, 16]);
            base.data_mut()[cell] = 1.0;
            let p = build_mask_pyramid(&base, &[8]).unwrap();
            let lvl = p.level(8).unwrap();
            let active = lvl.data().iter().filter(|&&v| v == 1.0).count();
            assert!(active <= 1);
            let (r, c) = (cell / 16, cell % 16);
            let hit = (0..8).any(|i| nn_source_index(i, 16, 8) == r)
                && (0..8).any(|j| nn_source_index(j, 16, 8) == c);
            assert_eq!(active == 1, hit, "cell {cell}");
        }
    }

    #[test]
    fn segment_exact_colors() {
        let mut img = Tensor::ones(&[3, 4, 4]);
        // red 2×2 block in the corner
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            img.data_mut()[16 + y * 4 + x] = 0.0;
            img.data_mut()[32 + y * 4 + x] = 0.0;
        }
        let red = ColorRange::around([1.0, 0.0, 0.0], 0.1);
        let blue = ColorRange::around([0.0, 0.0, 1.0], 0.1);
        let masks = threshold_segment(&img, &[red, blue]).unwrap();
        let want: Vec<f32> = (0..16).map(|i| if i / 4 < 2 && i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(masks[0].data(), want.as_slice());
        assert!(masks[1].data().iter().all(|&v| v == 0.0));
        let wide = ColorRange::around([0.9, 0.0, 0.0], 0.2);
        assert!(matches!(threshold_segment(&img, &[red, wide]), Err(Error::Config(_))));
    }
}
