use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pastes the masked pixels of `concept_img`, shifted by `offset = (dx, dy)`,
/// onto `base_img`. Returns the composite and the shifted concept mask.
/// Pixels outside the shifted mask always come from `base_img`.
pub fn copy_paste_context(
    base_img: &Tensor,
    base_mask: &Tensor,
    concept_img: &Tensor,
    concept_mask: &Tensor,
    offset: (i64, i64),
) -> Result<(Tensor, Tensor)> {
    let (h, w) = match base_img.dims() {
        [3, h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("base image must be 3×H×W, got {d:?}"))),
    };
    for (what, dims) in [
        ("concept image", concept_img.dims()),
        ("base mask", base_mask.dims()),
        ("concept mask", concept_mask.dims()),
    ] {
        let ok = match dims {
            [3, a, b] => what == "concept image" && (*a, *b) == (h, w),
            [a, b] => what != "concept image" && (*a, *b) == (h, w),
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!("{what} dims {dims:?} do not match canvas {h}×{w}")));
        }
    }
    let (dx, dy) = offset;
    let plane = h * w;
    let mut out = base_img.clone();
    let mut shifted = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if concept_mask.data()[y * w + x] == 0.0 {
                continue;
            }
            let (ty, tx) = (y as i64 + dy, x as i64 + dx);
            if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                return Err(Error::Input(format!(
                    "offset ({dx}, {dy}) moves concept pixel ({x}, {y}) off the {w}×{h} canvas"
                )));
            }
            let (ty, tx) = (ty as usize, tx as usize);
            shifted.data_mut()[ty * w + tx] = 1.0;
            for k in 0..3 {
                out.data_mut()[k * plane + ty * w + tx] = concept_img.data()[k * plane + y * w + x];
            }
        }
    }
    Ok((out, shifted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, PrngStream};

    fn rand_img(seed: u64) -> Tensor {
        gaussian_sample(&[3, 8, 8], PrngStream::new(seed, 0)).0.map(|v| v.abs().min(1.0))
    }

    #[test]
    fn empty_mask_is_identity() {
        let base = rand_img(1);
        let (img, m) =
            copy_paste_context(&base, &Tensor::zeros(&[8, 8]), &rand_img(2), &Tensor::zeros(&[8, 8]), (3, 3)).unwrap();
        assert_eq!(img, base);
        assert_eq!(m, Tensor::zeros(&[8, 8]));
    }

    #[test]
    fn full_mask_zero_offset_copies_concept() {
        let concept = rand_img(2);
        let (img, _) =
            copy_paste_context(&rand_img(1), &Tensor::zeros(&[8, 8]), &concept, &Tensor::ones(&[8, 8]), (0, 0)).unwrap();
        assert_eq!(img, concept);
    }

    #[test]
    fn pasted_region_reads_back_and_rest_untouched() {
        let (base, concept) = (rand_img(1), rand_img(2));
        let mut cm = Tensor::zeros(&[8, 8]);
        for (y, x) in [(1, 1), (1, 2), (2, 2)] {
            cm.data_mut()[y * 8 + x] = 1.0;
        }
        let (img, shifted) = copy_paste_context(&base, &Tensor::zeros(&[8, 8]), &concept, &cm, (3, -1)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for k in 0..3 {
                    let i = k * 64 + y * 8 + x;
                    if shifted.data()[y * 8 + x] == 1.0 {
                        let (sy, sx) = (y + 1, x - 3);
                        assert_eq!(img.data()[i], concept.data()[k * 64 + sy * 8 + sx]);
                    } else {
                        assert_eq!(img.data()[i], base.data()[i]);
                    }
                }
            }
        }
        assert_eq!(shifted.data().iter().filter(|&&v| v == 1.0).count(), 3);
        assert!(matches!(
            copy_paste_context(&base, &Tensor::zeros(&[8, 8]), &concept, &cm, (6, 0)),
            Err(Error::Input(_))
        ));
    }
}
