//! Binary PPM (P6) and PBM (P4) images.

use std::path::Path;

use crate::attention::ConceptMask;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

/// Encodes an `(h, w, 3)` image in `[0, 1]` as P6 with 8-bit samples.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("PPM needs (h, w, 3)", s, &[0, 0, 3]));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Image("truncated PPM header".into()).into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(FormatError::BadMagic { expected: "P6" }.into());
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::from(FormatError::Image(format!("bad header field {s:?}"))))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(FormatError::Image(format!("only 8-bit PPM is supported, maxval {max}")).into());
    }
    let need = w * h * 3;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < need {
        return Err(FormatError::Truncated {
            offset: pos,
            needed: need,
            available: body.len(),
        }
        .into());
    }
    Tensor::new([h, w, 3], body[..need].iter().map(|&b| b as f32 / 255.0).collect())
}

/// Encodes a mask as P4, set cells black.
pub fn encode_pbm(mask: &ConceptMask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.contains(y * w + x) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend(row);
    }
    out
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pbm(path: &Path, mask: &ConceptMask) -> Result<()> {
    std::fs::write(path, encode_pbm(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_at_8_bits() {
        let img = Tensor::from_fn([2, 3, 3], |i| (i % 5) as f32 / 4.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back).unwrap() <= 0.5 / 255.0 + 1e-6);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn pbm_packs_rows() {
        let mut grid = vec![false; 2 * 9];
        grid[0] = true;
        grid[8] = true;
        grid[9 + 1] = true;
        let m = ConceptMask::new(0, 0, 2, 9, grid).unwrap();
        let bytes = encode_pbm(&m);
        let header = b"P4\n9 2\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0x80, 0x80, 0x40, 0x00]);
    }
}
