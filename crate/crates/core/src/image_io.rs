//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.
//!
//! Images map to `C×H×W` tensors with values in `[0, 1]`; writing rounds to
//! the nearest of 256 levels and clamps out-of-range values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        _ => {
            return Err(Error::invalid(format!(
                "PNM needs a 1- or 3-channel C×H×W image, got {s:?}"
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for k in 0..plane {
        for ch in 0..c {
            let v = image.data()[ch * plane + k];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(Error::format("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PNM header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported PNM magic {other}"))),
    };
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(format!("bad PNM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported PNM maxval {maxval}")));
    }
    let plane = h * w;
    let raster = bytes
        .get(pos..pos + plane * c)
        .ok_or_else(|| Error::format("truncated PNM raster"))?;
    let mut data = vec![0.0; c * plane];
    for k in 0..plane {
        for ch in 0..c {
            data[ch * plane + k] = raster[k * c + ch] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_pnm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Rounds values to the 256 levels a PNM file can hold.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_round_trip() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = encode_pnm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back, quantize(&img));
    }

    #[test]
    fn ppm_interleaves_channels() {
        let img = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_pnm(&img).unwrap();
        let raster = &bytes[bytes.len() - 6..];
        assert_eq!(raster, &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_unknown_magic_and_truncation() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
