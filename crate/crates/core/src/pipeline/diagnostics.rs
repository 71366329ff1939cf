use std::collections::BTreeMap;
use std::time::Duration;

use super::config::{AttentionMapRequest, LayerStep};
use crate::attention::{attention_row, mask_modes, MaskStrategy};
use crate::denoiser::AttentionCapture;
use crate::error::{Error, Result};
use crate::numerics::{nn_resize, Tensor};

/// For every query position, the reference key it is most similar to.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub res: usize,
    pub num_refs: usize,
    /// `(ref_index, key position)` per query, `ref_index` 1-based.
    pub matches: Vec<(usize, usize)>,
}

impl CorrespondenceMap {
    /// `res×res` field holding the matched concept index of each query.
    pub fn labels(&self) -> Tensor {
        let data = self.matches.iter().map(|&(r, _)| r as f32).collect();
        Tensor::from_parts(vec![self.res, self.res], data)
    }

    /// `L×2` table of `(ref_index, position)` pairs, for export.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.matches.iter().flat_map(|&(r, p)| [r as f32, p as f32]).collect();
        Tensor::from_parts(vec![self.matches.len(), 2], data)
    }

    /// Fraction of `region` queries whose match is a set cell of `ref_mask`
    /// in reference `ref_index`. Both masks are `res×res`.
    pub fn in_mask_rate(&self, region: &Tensor, ref_index: usize, ref_mask: &Tensor) -> Result<f32> {
        let n = self.res * self.res;
        if region.len() != n || ref_mask.len() != n {
            return Err(Error::Shape(format!("masks must be {}×{}", self.res, self.res)));
        }
        let mut total = 0usize;
        let mut hits = 0usize;
        for (q, &(r, p)) in self.matches.iter().enumerate() {
            if region.data()[q] > 0.0 {
                total += 1;
                hits += usize::from(r == ref_index && ref_mask.data()[p] > 0.0);
            }
        }
        if total == 0 {
            return Err(Error::Input("region mask is empty".into()));
        }
        Ok(hits as f32 / total as f32)
    }

    /// Self tile plus one tile per reference, `3 × res × (N+1)·res`. Each
    /// query pixel takes the color of the reference pixel it matched; each
    /// reference pixel is drawn in its own color, so matched pairs share one.
    pub fn to_rgb(&self) -> Tensor {
        let (res, tiles) = (self.res, self.num_refs + 1);
        let width = tiles * res;
        let plane = res * width;
        let mut out = vec![0.0f32; 3 * plane];
        let mut put = |tile: usize, pos: usize, rgb: [f32; 3]| {
            let (y, x) = (pos / res, pos % res);
            for (k, c) in rgb.iter().enumerate() {
                out[k * plane + y * width + tile * res + x] = *c;
            }
        };
        for (q, &(r, p)) in self.matches.iter().enumerate() {
            put(0, q, self.color(r, p));
        }
        for r in 1..tiles {
            for p in 0..res * res {
                put(r, p, self.color(r, p));
            }
        }
        Tensor::from_parts(vec![3, res, width], out)
    }

    fn color(&self, ref_index: usize, pos: usize) -> [f32; 3] {
        let span = (self.res.max(2) - 1) as f32;
        [
            (pos % self.res) as f32 / span,
            (pos / self.res) as f32 / span,
            ref_index as f32 / self.num_refs.max(1) as f32,
        ]
    }
}

/// Matches each query row to the reference key with the largest scaled
/// similarity `q·k/√d`, among positions whose mask is set. Ties go to the
/// lowest `(ref, position)`.
pub fn correspondence_map(query: &Tensor, ref_keys: &[&Tensor], masks: &[&[f32]], res: usize) -> Result<CorrespondenceMap> {
    if ref_keys.is_empty() || ref_keys.len() != masks.len() {
        return Err(Error::Input(format!(
            "{} reference key sets with {} masks",
            ref_keys.len(),
            masks.len()
        )));
    }
    let (lq, d) = query.shape2()?;
    if lq != res * res {
        return Err(Error::Shape(format!("{lq} queries do not tile {res}×{res}")));
    }
    let mut candidates = Vec::new();
    for (i, (k, m)) in ref_keys.iter().zip(masks).enumerate() {
        let (lk, dk) = k.shape2()?;
        if dk != d || lk != m.len() {
            return Err(Error::Shape(format!(
                "reference {} keys {:?} do not fit width {d} and mask length {}",
                i + 1,
                k.dims(),
                m.len()
            )));
        }
        candidates.extend((0..lk).filter(|&p| m[p] > 0.0).map(|p| (i + 1, p, k.row(p))));
    }
    if candidates.is_empty() {
        return Err(Error::Input("every reference mask is empty".into()));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let matches = (0..lq)
        .map(|i| {
            let q = query.row(i);
            let mut best = (f32::NEG_INFINITY, 0, 0);
            for &(r, p, k) in &candidates {
                let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                if s > best.0 {
                    best = (s, r, p);
                }
            }
            (best.1, best.2)
        })
        .collect();
    Ok(CorrespondenceMap {
        res,
        num_refs: ref_keys.len(),
        matches,
    })
}

/// Correspondence between the composition path's queries and each
/// reference's masked keys at one captured layer.
pub fn correspondence_from_capture(capture: &AttentionCapture) -> Result<CorrespondenceMap> {
    let mask = &capture.mask;
    if mask.num_refs() == 0 {
        return Err(Error::Input(format!(
            "layer {} at step {} attends to no references",
            capture.layer, capture.step
        )));
    }
    let (_, d) = capture.k.shape2()?;
    let slice_rows = |range: std::ops::Range<usize>| {
        Tensor::new(vec![range.len(), d], capture.k.data()[range.start * d..range.end * d].to_vec())
    };
    let refs = (1..=mask.num_refs())
        .map(|i| slice_rows(mask.segment(i)))
        .collect::<Result<Vec<_>>>()?;
    let ref_masks: Vec<&[f32]> = (1..=mask.num_refs()).map(|i| &mask.values()[mask.segment(i)]).collect();
    correspondence_map(&capture.q, &refs.iter().collect::<Vec<_>>(), &ref_masks, capture.res)
}

/// Mean over the queries set in `region` of the softmax mass that lands on
/// concept `concept_index`'s unmasked keys. `region` is resampled to the
/// layer's grid when its extent differs.
pub fn attention_mass(
    capture: &AttentionCapture,
    strategy: &dyn MaskStrategy,
    concept_index: usize,
    region: &Tensor,
) -> Result<f32> {
    let mask = &capture.mask;
    if concept_index == 0 || concept_index > mask.num_refs() {
        return Err(Error::Input(format!(
            "concept {concept_index} not in 1..={}",
            mask.num_refs()
        )));
    }
    let res = capture.res;
    let (rh, rw) = region.shape2()?;
    let region = if (rh, rw) == (res, res) {
        region.clone()
    } else {
        nn_resize(region, res, res)?
    };
    let seg = mask.segment(concept_index);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (qi, _) in region.data().iter().enumerate().filter(|(_, &v)| v > 0.0) {
        let row = attention_row(&capture.q, &capture.k, mask, strategy, qi)?;
        total += seg
            .clone()
            .filter(|&j| mask.values()[j] > 0.0)
            .map(|j| row[j] as f64)
            .sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("region mask is empty".into()));
    }
    Ok((total / count as f64) as f32)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub harvest: Duration,
    pub compose: Duration,
    pub decode: Duration,
}

/// Everything a run records besides its image.
#[derive(Debug, Clone)]
pub struct RunDiagnostics {
    pub mask_mode: String,
    pub captures: BTreeMap<LayerStep, AttentionCapture>,
    pub attention_maps: Vec<(AttentionMapRequest, Tensor)>,
    pub correspondence: Vec<(LayerStep, CorrespondenceMap)>,
    /// Cache size after the last step.
    pub cache_entries: usize,
    /// Cache fetches per global layer over the whole run.
    pub cache_reads: Vec<usize>,
    pub timings: PhaseTimings,
}

impl RunDiagnostics {
    pub fn capture(&self, layer: usize, step: usize) -> Result<&AttentionCapture> {
        self.captures
            .get(&LayerStep { layer, step })
            .ok_or_else(|| Error::Input(format!("no attention capture at layer {layer}, step {step}")))
    }

    pub fn attention_mass_report(
        &self,
        concept_index: usize,
        region_mask: &Tensor,
        layer: usize,
        step: usize,
    ) -> Result<f32> {
        let strategy = mask_modes().create(&self.mask_mode)?;
        attention_mass(self.capture(layer, step)?, strategy.as_ref(), concept_index, region_mask)
    }
}
