//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Samples map to `[0, 1]` as `v / 255` on load and back as
//! `round_half_even(clamp(x, 0, 1) · 255)` on save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a `[1, H, W]` (PGM) or `[3, H, W]` (PPM) tensor. Returns the
/// bytes and whether any value had to be clamped.
pub fn encode(t: &Tensor) -> Result<(Vec<u8>, bool)> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape(
            "netpbm",
            format!("need [1|3, H, W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let mut clamped = false;
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..c {
            let v = t.data()[ch * plane + i];
            let q = v.clamp(0.0, 1.0);
            clamped |= q != v;
            out.push((q * 255.0).round_ties_even() as u8);
        }
    }
    Ok((out, clamped))
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed netpbm header".into()))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a netpbm file".into()));
    }
    let c = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported netpbm variant P{}",
                other as char
            )))
        }
    };
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported, need 255"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero image extent".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator after maxval".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let plane = h * w;
    if payload.len() != plane * c {
        return Err(Error::Format(format!(
            "payload has {} bytes, header says {}x{}x{c}",
            payload.len(),
            w,
            h
        )));
    }
    let mut data = vec![0.0; plane * c];
    for i in 0..plane {
        for ch in 0..c {
            data[ch * plane + i] = payload[i * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Writes an image; returns whether clamping occurred.
pub fn save(path: &Path, t: &Tensor) -> Result<bool> {
    let (bytes, clamped) = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(clamped)
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_exact() {
        let t = Tensor::new(&[1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let (b, clamped) = encode(&t).unwrap();
        // 127.5 rounds to the even neighbour 128.
        assert_eq!(b, b"P5\n3 1\n255\n\x00\x80\xff");
        assert!(!clamped);
    }

    #[test]
    fn ppm_interleaves_channels() {
        let t = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (b, _) = encode(&t).unwrap();
        assert_eq!(&b[b.len() - 6..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode(&b).unwrap(), t.map(|v| (v * 255.0).round() / 255.0));
    }

    #[test]
    fn clamping_reported() {
        let t = Tensor::new(&[1, 1, 2], vec![-0.2, 1.3]).unwrap();
        let (b, clamped) = encode(&t).unwrap();
        assert!(clamped);
        assert_eq!(&b[b.len() - 2..], &[0, 255]);
    }

    #[test]
    fn header_comments_accepted() {
        let b = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let t = decode(b).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
    }

    #[test]
    fn malformed_rejected() {
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\nx 1\n255\n\x00").is_err());
    }
}
