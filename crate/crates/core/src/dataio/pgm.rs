//! Binary PGM (P5) reading and writing, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode(buf: &[u8]) -> std::result::Result<Pgm, String> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("malformed header at byte {start}"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header value out of range".to_string())?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !buf.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| "image dimensions overflow".to_string())?;
    let raster = &buf[pos..];
    if raster.len() < n {
        return Err(format!("raster truncated: {} of {n} bytes", raster.len()));
    }
    if raster.len() > n {
        return Err(format!("{} trailing bytes after raster", raster.len() - n));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u8,
        pixels: raster.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Pgm> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode(width, height, pixels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let p = decode(buf).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (2, 1, 255));
        assert_eq!(p.pixels, vec![0, 255]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").unwrap_err().contains("truncated"));
        assert!(decode(b"P5\nx 2\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn encode_decode() {
        let px: Vec<u8> = (0..12).collect();
        let p = decode(&encode(4, 3, &px)).unwrap();
        assert_eq!((p.width, p.height), (4, 3));
        assert_eq!(p.pixels, px);
    }
}
