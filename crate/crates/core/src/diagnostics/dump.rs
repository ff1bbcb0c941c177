//! `SCGATT1` attention dumps: the magic, a little-endian `u32` count, then per
//! map `step, layer, h, w, L` as `u32` followed by `h·w·L` little-endian `f32`.

use std::path::Path;

use crate::attention::AttentionTensor;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 7] = b"SCGATT1";

pub fn encode_tensors(maps: &[AttentionTensor<f32>]) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit the dump format")))
    };
    let payload: usize = maps.iter().map(|m| 20 + m.rows().len() * 4).sum();
    let mut out = Vec::with_capacity(DUMP_MAGIC.len() + 4 + payload);
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&to_u32(maps.len(), "map count")?.to_le_bytes());
    for m in maps {
        let [h, w, l] = m.dims();
        for (v, what) in [
            (m.step, "step"),
            (m.layer, "layer"),
            (h, "height"),
            (w, "width"),
            (l, "tokens"),
        ] {
            out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
        }
        for v in m.rows() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<AttentionTensor<f32>>> {
    if bytes.len() < DUMP_MAGIC.len() || &bytes[..DUMP_MAGIC.len()] != DUMP_MAGIC {
        return Err(FormatError::BadMagic { expected: "SCGATT1" }.into());
    }
    let mut pos = DUMP_MAGIC.len();
    let count = read_u32(bytes, &mut pos)? as usize;
    let mut maps = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut head = [0usize; 5];
        for v in head.iter_mut() {
            *v = read_u32(bytes, &mut pos)? as usize;
        }
        let [step, layer, h, w, l] = head;
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(l))
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| FormatError::Manifest(format!("record dims {h}x{w}x{l} overflow")))?;
        let raw = take(bytes, &mut pos, n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Tensor::new([h, w, l], data)?;
        maps.push(AttentionTensor::new(step, layer, values)?);
    }
    if pos != bytes.len() {
        return Err(
            FormatError::Manifest(format!("{} trailing bytes after {count} records", bytes.len() - pos)).into(),
        );
    }
    Ok(maps)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let available = bytes.len() - *pos;
    if available < n {
        return Err(FormatError::Truncated {
            offset: *pos,
            needed: n,
            available,
        }
        .into());
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

pub fn dump_tensors(maps: &[AttentionTensor<f32>], path: &Path) -> Result<()> {
    std::fs::write(path, encode_tensors(maps)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<AttentionTensor<f32>>> {
    decode_tensors(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
