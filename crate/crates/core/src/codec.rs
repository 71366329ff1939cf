//! Deterministic stand-ins for the image autoencoder and the text encoder.
//!
//! Images are lifted from RGB to four latent channels by a fixed matrix with
//! orthonormal columns and average-pooled by `scale_factor`. Decoding
//! upsamples by repetition and applies the transpose, so piecewise-constant
//! images whose blocks align with the pooling grid round-trip exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, PrngStream, Tensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DEFAULT_SCALE_FACTOR: usize = 4;
pub const CODEC_SEED: u64 = 0x00c0_dec0;
pub const MAX_TOKENS: usize = 16;
pub const TEXT_DIM: usize = 32;
pub const VOCAB_SLOTS: u64 = 4096;
pub const DEFAULT_VOCAB_SEED: u64 = 7;

const EMBED_DOMAIN: u64 = 0xe4b;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub tensor: Tensor,
    pub scale_factor: usize,
}

impl LatentImage {
    pub fn new(tensor: Tensor, scale_factor: usize) -> Result<Self> {
        if tensor.rank() != 3 || scale_factor == 0 {
            return Err(Error::Shape(format!(
                "latent must be c×h×w with positive scale, got {:?} / {scale_factor}",
                tensor.dims()
            )));
        }
        Ok(Self {
            tensor,
            scale_factor,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn with_tensor(&self, tensor: Tensor) -> Result<Self> {
        if tensor.dims() != self.tensor.dims() {
            return Err(Error::Shape(format!(
                "latent dims {:?} do not match {:?}",
                tensor.dims(),
                self.tensor.dims()
            )));
        }
        Ok(Self {
            tensor,
            scale_factor: self.scale_factor,
        })
    }
}

/// Fixed linear image codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    /// Row `c` holds the RGB weights of latent channel `c`; the three
    /// columns are orthonormal.
    pub projection: [[f32; 3]; LATENT_CHANNELS],
    pub scale_factor: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self::new(CODEC_SEED, DEFAULT_SCALE_FACTOR)
    }
}

impl Codec {
    pub fn new(seed: u64, scale_factor: usize) -> Self {
        let (g, _) = gaussian_sample(&[3, LATENT_CHANNELS], PrngStream::new(seed, 0));
        // Gram-Schmidt over the three 4-vectors.
        let mut cols: Vec<[f64; LATENT_CHANNELS]> = Vec::new();
        for k in 0..3 {
            let mut v = [0.0f64; LATENT_CHANNELS];
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = g.data()[k * LATENT_CHANNELS + c] as f64;
            }
            for u in &cols {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        let mut projection = [[0.0f32; 3]; LATENT_CHANNELS];
        for (c, row) in projection.iter_mut().enumerate() {
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = cols[k][c] as f32;
            }
        }
        Self {
            projection,
            scale_factor,
        }
    }

    pub fn encode_image(&self, rgb: &Tensor) -> Result<LatentImage> {
        let (h, w) = match rgb.dims() {
            [3, h, w] => (*h, *w),
            d => return Err(Error::Shape(format!("image must be 3×H×W, got {d:?}"))),
        };
        let s = self.scale_factor;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "image extents {h}×{w} are not divisible by {s}"
            )));
        }
        let (hl, wl) = (h / s, w / s);
        let plane = h * w;
        let px = rgb.data();
        let inv = 1.0 / (s * s) as f32;
        let mut out = vec![0.0f32; LATENT_CHANNELS * hl * wl];
        for i in 0..hl {
            for j in 0..wl {
                let mut mean = [0.0f32; 3];
                for y in i * s..(i + 1) * s {
                    for x in j * s..(j + 1) * s {
                        for (k, m) in mean.iter_mut().enumerate() {
                            *m += px[k * plane + y * w + x];
                        }
                    }
                }
                for (c, row) in self.projection.iter().enumerate() {
                    let v: f32 = row.iter().zip(&mean).map(|(p, m)| p * m * inv).sum();
                    out[c * hl * wl + i * wl + j] = v;
                }
            }
        }
        LatentImage::new(Tensor::from_parts(vec![LATENT_CHANNELS, hl, wl], out), s)
    }

    /// Output is `3 × (h·s) × (w·s)` with every value clamped to `[0, 1]`.
    pub fn decode_latent(&self, z: &LatentImage) -> Result<Tensor> {
        if z.channels() != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "latent has {} channels, codec expects {LATENT_CHANNELS}",
                z.channels()
            )));
        }
        let (hl, wl) = (z.height(), z.width());
        let s = z.scale_factor;
        let (h, w) = (hl * s, wl * s);
        let lat = z.tensor.data();
        let mut out = vec![0.0f32; 3 * h * w];
        for i in 0..hl {
            for j in 0..wl {
                let mut rgb = [0.0f32; 3];
                for (c, row) in self.projection.iter().enumerate() {
                    let zc = lat[c * hl * wl + i * wl + j];
                    for (k, v) in rgb.iter_mut().enumerate() {
                        *v += row[k] * zc;
                    }
                }
                for (k, v) in rgb.iter().enumerate() {
                    let v = v.clamp(0.0, 1.0);
                    for y in i * s..(i + 1) * s {
                        for x in j * s..(j + 1) * s {
                            out[k * h * w + y * w + x] = v;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![3, h, w], out))
    }
}

pub fn encode_image(rgb: &Tensor) -> Result<LatentImage> {
    Codec::default().encode_image(rgb)
}

pub fn decode_latent(z: &LatentImage) -> Result<Tensor> {
    Codec::default().decode_latent(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// `MAX_TOKENS × TEXT_DIM`; rows past `token_count` are zero padding.
    pub tokens: Tensor,
    pub token_count: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// FNV-1a over the token bytes, salted with the vocab seed, folded into the
/// embedding table.
pub fn token_slot(token: &str, vocab_seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ vocab_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h % VOCAB_SLOTS
}

fn slot_vector(slot: u64, vocab_seed: u64) -> Tensor {
    gaussian_sample(&[TEXT_DIM], PrngStream::keyed(vocab_seed, &[EMBED_DOMAIN, slot])).0
}

pub fn embed_prompt(text: &str, vocab_seed: u64) -> Result<PromptEmbedding> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Input("prompt text is empty".into()));
    }
    let token_count = tokens.len().min(MAX_TOKENS);
    let mut data = vec![0.0f32; MAX_TOKENS * TEXT_DIM];
    for (row, tok) in tokens.iter().take(MAX_TOKENS).enumerate() {
        let v = slot_vector(token_slot(tok, vocab_seed), vocab_seed);
        data[row * TEXT_DIM..(row + 1) * TEXT_DIM].copy_from_slice(v.data());
    }
    Ok(PromptEmbedding {
        tokens: Tensor::from_parts(vec![MAX_TOKENS, TEXT_DIM], data),
        token_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::SYNTH_VOCABULARY;

    fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        let mut d = Vec::with_capacity(3 * h * w);
        for k in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(k, y, x));
                }
            }
        }
        Tensor::new(vec![3, h, w], d).unwrap()
    }

    #[test]
    fn projection_columns_are_orthonormal() {
        let p = Codec::default().projection;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f32 = (0..LATENT_CHANNELS).map(|c| p[c][a] * p[c][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_image_gives_projected_constant() {
        let codec = Codec::default();
        let img = Tensor::full(&[3, 64, 64], 0.5);
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.tensor.dims(), &[4, 16, 16]);
        for c in 0..4 {
            let want: f32 = codec.projection[c].iter().map(|p| p * 0.5).sum();
            let plane = &z.tensor.data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|&v| (v - want).abs() < 1e-6));
        }
        let back = codec.decode_latent(&z).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.5).abs() < 1e-3));
    }

    #[test]
    fn gradient_round_trip_error_is_small() {
        let img = image_from_fn(64, 64, |k, y, x| (x as f32 + y as f32 * (k as f32 + 1.0) * 0.3) / 128.0);
        let back = decode_latent(&encode_image(&img).unwrap()).unwrap();
        let worst = img.max_abs_diff(&back);
        assert!(worst < 0.1, "worst {worst}");
    }

    #[test]
    fn pooling_is_local() {
        let a = Tensor::full(&[3, 64, 64], 0.2);
        let mut b = a.clone();
        // perturb the 4×4 block at latent cell (2, 5)
        for k in 0..3 {
            for y in 8..12 {
                for x in 20..24 {
                    b.data_mut()[k * 4096 + y * 64 + x] = 0.9;
                }
            }
        }
        let (za, zb) = (encode_image(&a).unwrap(), encode_image(&b).unwrap());
        for c in 0..4 {
            for i in 0..16 {
                for j in 0..16 {
                    let idx = c * 256 + i * 16 + j;
                    let differs = za.tensor.data()[idx] != zb.tensor.data()[idx];
                    assert_eq!(differs, (i, j) == (2, 5), "cell {c},{i},{j}");
                }
            }
        }
    }

    #[test]
    fn decode_shapes_and_zero() {
        let z = LatentImage::new(Tensor::zeros(&[4, 3, 5]), 4).unwrap();
        let img = decode_latent(&z).unwrap();
        assert_eq!(img.dims(), &[3, 12, 20]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_is_clamped() {
        let (g, _) = gaussian_sample(&[4, 4, 4], PrngStream::new(5, 5));
        let img = decode_latent(&LatentImage::new(g.scale(10.0), 4).unwrap()).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn non_divisible_extent_is_rejected() {
        assert!(matches!(
            encode_image(&Tensor::zeros(&[3, 10, 12])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn prompt_embedding_contract() {
        let a = embed_prompt("hat", DEFAULT_VOCAB_SEED).unwrap();
        let b = embed_prompt("hat", DEFAULT_VOCAB_SEED).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.dims(), &[16, 32]);
        assert_eq!(a.token_count, 1);

        let x = embed_prompt("a hat", DEFAULT_VOCAB_SEED).unwrap();
        let y = embed_prompt("A  sunglasses", DEFAULT_VOCAB_SEED).unwrap();
        for r in 0..16 {
            assert_eq!(x.tokens.row(r) != y.tokens.row(r), r == 1, "row {r}");
        }
        assert!(x.tokens.row(2).iter().all(|&v| v == 0.0));
        assert!(matches!(embed_prompt("  ", 0), Err(Error::Input(_))));

        let long = vec!["dog"; 40].join(" ");
        let e = embed_prompt(&long, DEFAULT_VOCAB_SEED).unwrap();
        assert_eq!((e.tokens.dims(), e.token_count), (&[16usize, 32][..], 16));
    }

    #[test]
    fn synthetic_vocabulary_is_injective() {
        let mut seen = std::collections::BTreeMap::new();
        for w in SYNTH_VOCABULARY {
            let slot = token_slot(w, DEFAULT_VOCAB_SEED);
            if let Some(prev) = seen.insert(slot, *w) {
                panic!("{w} collides with {prev} in slot {slot}");
            }
        }
        assert!(SYNTH_VOCABULARY.len() <= 32);
    }
}
