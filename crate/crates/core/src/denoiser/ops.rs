//! Layer kernels over `C×H×W` feature maps and `L×C` token matrices.

use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

const NORM_EPS: f32 = 1e-5;

pub(crate) fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.dims() {
        [c, h, w] => Ok((*c, *h, *w)),
        d => Err(Error::Shape(format!("expected C×H×W, got {d:?}"))),
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `w` is `C_out × (C_in·9)`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = chw(x)?;
    let (cout, kin) = w.shape2()?;
    if kin != c * 9 {
        return Err(Error::Shape(format!("conv expects {} inputs, weight has {kin}", c * 9)));
    }
    let hw = h * wd;
    let mut col = vec![0.0f32; c * 9 * hw];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..wd {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        col[row + y * wd + xx] = xd[ci * hw + sy as usize * wd + sx as usize];
                    }
                }
            }
        }
    }
    let col = Tensor::from_parts(vec![c * 9, hw], col);
    let mut out = matmul(w, &col)?;
    add_channel_bias(&mut out, b, hw);
    out.reshape(vec![cout, h, wd])
}

/// 1×1 convolution without bias. `w` is `C_out × C_in`.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = chw(x)?;
    let flat = x.clone().reshape(vec![c, h * wd])?;
    let out = matmul(w, &flat)?;
    let cout = out.dims()[0];
    out.reshape(vec![cout, h, wd])
}

fn add_channel_bias(out: &mut Tensor, b: &Tensor, plane: usize) {
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = b.data()[ch];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

/// Adds `bias[c]` to every spatial cell of channel `c`.
pub fn add_channel_vector(x: &mut Tensor, bias: &[f32]) -> Result<()> {
    let (c, h, w) = chw(x)?;
    if bias.len() != c {
        return Err(Error::Shape(format!("bias of {} for {c} channels", bias.len())));
    }
    let b = Tensor::from_parts(vec![c], bias.to_vec());
    add_channel_bias(x, &b, h * w);
    Ok(())
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
    }
    let per = c / groups * h * w;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for (g, chunk) in out.chunks_mut(per).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        for (i, v) in chunk.iter_mut().enumerate() {
            let ch = g * (c / groups) + i / plane;
            *v = ((*v as f64 - mean) * inv) as f32 * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Normalizes every row of an `L×C` matrix.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c) = x.shape2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// `x·W + b` for an `L×C_in` matrix.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul(x, w)?;
    if let Some(b) = b {
        let n = b.len();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Ok(out)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

pub fn gelu(x: &Tensor) -> Tensor {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    x.map(|v| 0.5 * v * (1.0 + (K * (v + 0.044_715 * v * v * v)).tanh()))
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                out.push(0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(d[ch * h * w + (y / 2) * w + xx / 2]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = chw(a)?;
    let (cb, hb, wb) = chw(b)?;
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(format!("spatial dims {h}×{w} vs {hb}×{wb}")));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(vec![ca + cb, h, w], data))
}

/// `C×H×W → (H·W)×C`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    x.clone().reshape(vec![c, h * w])?.transpose2()
}

/// `(H·W)×C → C×H×W`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c) = t.shape2()?;
    t.transpose2()?.reshape(vec![c, h, w])
}
