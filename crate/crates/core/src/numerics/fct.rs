//! FCT1 raw tensor dumps: `b"FCT1"`, u32 LE rank, `rank` u32 LE extents,
//! then the f32 LE payload in row-major order.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FCT_MAGIC: &[u8; 4] = b"FCT1";

pub fn encode_fct(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(FCT_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

/// Decodes one FCT1 record from the front of `bytes`, returning the tensor
/// and the number of bytes consumed.
pub fn decode_fct(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let u32_at = |off: usize| -> std::result::Result<u32, String> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| format!("truncated at byte {off}"))
    };
    if bytes.get(..4) != Some(FCT_MAGIC.as_slice()) {
        return Err("bad magic, expected FCT1".into());
    }
    let rank = u32_at(4)? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let n: usize = dims.iter().product();
    let end = start + 4 * n;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| format!("payload truncated: need {end} bytes, have {}", bytes.len()))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
    Ok((t, end))
}

pub fn write_fct(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_fct(t)).map_err(|e| Error::io(path, e))
}

pub fn read_fct(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_fct(&bytes).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_fct(&t);
        let mut want = b"FCT1".to_vec();
        want.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_fct(&bytes).unwrap(), (t, bytes.len()));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_fct(b"FCT2\x01\0\0\0").is_err());
        assert!(decode_fct(b"FCT1\x01\0\0\0\x04\0\0\0").is_err());
    }
}
