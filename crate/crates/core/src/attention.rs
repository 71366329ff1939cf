//! Vanilla self-attention and multi-reference self-attention (MRSA).
//!
//! MRSA concatenates the generated image's keys/values with those harvested
//! from `N` reference images, `K' = [K; K1; ...; KN]`, and scales the raw
//! logits of every key column by a weighted mask `[1, w1*M1, ..., wN*MN]`
//! before the `1/sqrt(d)` division and the softmax. The mask scaling is
//! applied first; for a per-column scale the two orders agree algebraically.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::registry::Registry;

pub const HEAD_DIM: usize = 32;

/// Below this many multiply-adds the kernel stays on the calling thread.
const PAR_ATTN_WORK: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct AttentionInputs<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub v: &'a Tensor,
}

impl AttentionInputs<'_> {
    /// Checks shapes and returns `(L_q, L_k, d)`.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let (lq, d) = self.q.shape2()?;
        let (lk, dk) = self.k.shape2()?;
        let (lv, dv) = self.v.shape2()?;
        if d != dk {
            return Err(Error::Shape(format!("q width {d} != k width {dk}")));
        }
        if lk != lv {
            return Err(Error::Shape(format!("k has {lk} rows, v has {lv}")));
        }
        if dv == 0 {
            return Err(Error::Shape("v has zero width".into()));
        }
        Ok((lq, lk, d))
    }
}

/// How a mask value rewrites the raw logit `q·k` of its key column.
pub trait MaskStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn masked_logit(&self, raw: f64, mask: f32) -> f64;
}

/// `M ⊙ (QK'ᵀ)`: a zero mask sends the logit to 0, not to `-inf`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Multiplicative;

impl MaskStrategy for Multiplicative {
    fn name(&self) -> &'static str {
        "multiplicative"
    }
    fn masked_logit(&self, raw: f64, mask: f32) -> f64 {
        raw * mask as f64
    }
}

/// Zero-mask keys are excluded outright; others are scaled as in
/// [`Multiplicative`].
#[derive(Debug, Clone, Copy, Default)]
pub struct NegInf;

impl MaskStrategy for NegInf {
    fn name(&self) -> &'static str {
        "neg_inf"
    }
    fn masked_logit(&self, raw: f64, mask: f32) -> f64 {
        if mask == 0.0 {
            f64::NEG_INFINITY
        } else {
            raw * mask as f64
        }
    }
}

pub const DEFAULT_MASK_MODE: &str = "multiplicative";

pub fn mask_modes() -> Registry<dyn MaskStrategy> {
    let mut reg: Registry<dyn MaskStrategy> = Registry::new("mask mode");
    reg.register("multiplicative", || Box::new(Multiplicative));
    reg.register("neg_inf", || Box::new(NegInf));
    reg
}

/// Per-key-column weights `[1 (self) | w1*M1 | ... | wN*MN]`.
#[derive(Clone, PartialEq)]
pub struct WeightedMask {
    values: Vec<f32>,
    /// Segment offsets, `bounds[0] = 0` and `bounds[N+1] = values.len()`.
    bounds: Vec<usize>,
}

impl fmt::Debug for WeightedMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightedMask")
            .field("len", &self.values.len())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl WeightedMask {
    /// Mask of all ones over a self segment of `self_len` keys and no references.
    pub fn ones(self_len: usize) -> Self {
        Self {
            values: vec![1.0; self_len],
            bounds: vec![0, self_len],
        }
    }

    pub fn from_parts(values: Vec<f32>, bounds: Vec<usize>) -> Result<Self> {
        let ok = bounds.len() >= 2
            && bounds[0] == 0
            && *bounds.last().unwrap() == values.len()
            && bounds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Shape(format!(
                "segment bounds {bounds:?} do not tile {} values",
                values.len()
            )));
        }
        if values[..bounds[1]].iter().any(|&v| v != 1.0) {
            return Err(Error::Consistency("self segment of a weighted mask must be 1".into()));
        }
        Ok(Self { values, bounds })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of reference segments `N`.
    pub fn num_refs(&self) -> usize {
        self.bounds.len() - 2
    }

    /// Key range of segment `i` (0 = self, 1..=N references).
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.values.len()], self.values.clone())
    }
}

/// Builds `M_w = [1, w1*M1, ..., wN*MN]` from binary masks flattened row-major.
pub fn build_weighted_mask(masks: &[Tensor], weights: &[f32], self_len: usize) -> Result<WeightedMask> {
    if masks.len() != weights.len() {
        return Err(Error::Input(format!(
            "{} masks but {} weights",
            masks.len(),
            weights.len()
        )));
    }
    if self_len == 0 {
        return Err(Error::Input("self segment must be non-empty".into()));
    }
    let mut values = vec![1.0f32; self_len];
    let mut bounds = vec![0, self_len];
    for (i, (m, &w)) in masks.iter().zip(weights).enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Input(format!("weight {i} is {w}, must be finite and >= 0")));
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("mask {i} is not binary")));
        }
        values.extend(m.data().iter().map(|&v| v * w));
        bounds.push(values.len());
    }
    WeightedMask::from_parts(values, bounds)
}

/// Harvested reference key/value features for one self-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRecord {
    pub layer: usize,
    pub step: usize,
    pub ref_index: usize,
    pub k: Tensor,
    pub v: Tensor,
}

/// `K' = [K; K1; ...; KN]`, `V'` likewise, plus the segment offsets.
pub fn concat_reference_kv(
    self_k: &Tensor,
    self_v: &Tensor,
    refs: &[&KvRecord],
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (l, d) = self_k.shape2()?;
    let mut bounds = vec![0, l];
    if refs.is_empty() {
        return Ok((self_k.clone(), self_v.clone(), bounds));
    }
    let layer = refs[0].layer;
    for r in refs {
        if r.layer != layer {
            return Err(Error::Consistency(format!(
                "reference {} comes from layer {}, expected layer {layer}",
                r.ref_index, r.layer
            )));
        }
        let (lr, dr) = r.k.shape2()?;
        if dr != d || r.v.shape2()? != (lr, self_v.shape2()?.1) {
            return Err(Error::Shape(format!(
                "reference {} features {:?}/{:?} do not match self {:?}/{:?}",
                r.ref_index,
                r.k.dims(),
                r.v.dims(),
                self_k.dims(),
                self_v.dims()
            )));
        }
        bounds.push(bounds.last().unwrap() + lr);
    }
    let ks: Vec<&Tensor> = std::iter::once(self_k).chain(refs.iter().map(|r| &r.k)).collect();
    let vs: Vec<&Tensor> = std::iter::once(self_v).chain(refs.iter().map(|r| &r.v)).collect();
    Ok((Tensor::concat_rows(&ks)?, Tensor::concat_rows(&vs)?, bounds))
}

type ColumnMask<'a> = Option<(&'a [f32], &'a dyn MaskStrategy)>;

/// Attention logits of one query row, written into `out` (length `L_k`).
fn logits_row(q_row: &[f32], k: &Tensor, scale: f64, mask: ColumnMask<'_>, out: &mut [f64]) {
    let d = q_row.len();
    for (j, slot) in out.iter_mut().enumerate() {
        let k_row = &k.data()[j * d..(j + 1) * d];
        let raw: f64 = q_row.iter().zip(k_row).map(|(&a, &b)| a as f64 * b as f64).sum();
        let raw = match mask {
            Some((m, strategy)) => strategy.masked_logit(raw, m[j]),
            None => raw,
        };
        *slot = raw * scale;
    }
}

/// Softmax in place; an all `-inf` row becomes zeros.
fn softmax_f64(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn attend(inputs: &AttentionInputs<'_>, mask: ColumnMask<'_>) -> Result<Tensor> {
    let (lq, lk, d) = inputs.validate()?;
    let dv = inputs.v.dims()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f32; lq * dv];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let mut probs = vec![0.0f64; lk];
        let mut acc = vec![0.0f64; dv];
        logits_row(inputs.q.row(i), inputs.k, scale, mask, &mut probs);
        softmax_f64(&mut probs);
        for (j, &p) in probs.iter().enumerate() {
            let v_row = &inputs.v.data()[j * dv..(j + 1) * dv];
            for (o, &vv) in acc.iter_mut().zip(v_row) {
                *o += p * vv as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    };
    if lq * lk * d >= PAR_ATTN_WORK && lq > 1 {
        out.par_chunks_mut(dv).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(dv).enumerate().for_each(row_kernel);
    }
    Ok(Tensor::from_parts(vec![lq, dv], out))
}

/// `Softmax(QKᵀ/√d)·V`.
pub fn self_attention(inputs: &AttentionInputs<'_>) -> Result<Tensor> {
    attend(inputs, None)
}

/// `Softmax((M_w ⊙ QK'ᵀ)/√d)·V'` with the zero-mask behaviour chosen by `strategy`.
pub fn mrsa(inputs: &AttentionInputs<'_>, mask: &WeightedMask, strategy: &dyn MaskStrategy) -> Result<Tensor> {
    let (_, lk, _) = inputs.validate()?;
    if mask.len() != lk {
        return Err(Error::Shape(format!(
            "mask has {} entries but K' has {lk} rows",
            mask.len()
        )));
    }
    attend(inputs, Some((mask.values(), strategy)))
}

/// Full softmax row of query `query_index` over every key of `K'`.
pub fn attention_row(
    q: &Tensor,
    k: &Tensor,
    mask: &WeightedMask,
    strategy: &dyn MaskStrategy,
    query_index: usize,
) -> Result<Vec<f32>> {
    let (lq, d) = q.shape2()?;
    let (lk, dk) = k.shape2()?;
    if d != dk {
        return Err(Error::Shape(format!("q width {d} != k width {dk}")));
    }
    if mask.len() != lk {
        return Err(Error::Shape(format!(
            "mask has {} entries but K' has {lk} rows",
            mask.len()
        )));
    }
    if query_index >= lq {
        return Err(Error::Input(format!(
            "query index {query_index} out of range for {lq} queries"
        )));
    }
    let mut row = vec![0.0f64; lk];
    logits_row(q.row(query_index), k, 1.0 / (d as f64).sqrt(), Some((mask.values(), strategy)), &mut row);
    softmax_f64(&mut row);
    Ok(row.into_iter().map(|p| p as f32).collect())
}

/// Multi-attention map of one query: the softmax row split into its `N+1`
/// segments, each reshaped to `H×W`, laid side by side as `H × (N+1)·W`.
pub fn attention_map(
    q: &Tensor,
    k: &Tensor,
    mask: &WeightedMask,
    strategy: &dyn MaskStrategy,
    query_index: usize,
    tile: (usize, usize),
) -> Result<Tensor> {
    let (h, w) = tile;
    let tiles = mask.num_refs() + 1;
    if (0..tiles).any(|s| mask.segment(s).len() != h * w) {
        return Err(Error::Shape(format!(
            "segments {:?} are not all {h}×{w}",
            mask.bounds()
        )));
    }
    let row = attention_row(q, k, mask, strategy, query_index)?;
    let width = tiles * w;
    let mut out = vec![0.0f32; h * width];
    for s in 0..tiles {
        let seg = &row[mask.segment(s)];
        for y in 0..h {
            for x in 0..w {
                out[y * width + s * w + x] = seg[y * w + x];
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, width], out))
}
