use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work threshold (multiply-adds) above which matmul rows are spread over
/// the rayon pool. Each output row is always reduced in the same order, so
/// the result does not depend on the split.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// Dense row-major f32 array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("head", &head)
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected rank 2, got dims {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = *self.dims.last().expect("rank >= 1");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (_, cols) = first.shape2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.shape2()?;
            if c != cols {
                return Err(Error::Shape(format!("column mismatch {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(vec![rows, cols], data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Little-endian byte image of the payload, used for content hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Softmax along the last axis of a rank-2 tensor, stabilized by subtracting
/// the row maximum. Rows that are entirely `-inf` come back as zeros.
pub fn row_softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.shape2()?;
    let mut out = logits.data.clone();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(logits.dims.clone(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Source index for output index `i` when resampling `src` cells onto `dst`
/// cells: `floor((i + 0.5) * src / dst)`, evaluated exactly in integers.
pub fn nn_source_index(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src) / (2 * dst)
}

/// Nearest-neighbour resample of a rank-2 field using center sampling.
pub fn nn_resize(mask: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = mask.shape2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target {out_h}x{out_w} has a zero extent"
        )));
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let si = nn_source_index(i, h, out_h);
        for j in 0..out_w {
            out.push(mask.data[si * w + nn_source_index(j, w, out_w)]);
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}
