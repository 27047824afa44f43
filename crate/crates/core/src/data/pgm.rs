//! Binary PGM (P5) reading and writing, 8- or 16-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Write a P5 file; samples wider than 255 use two big-endian bytes.
pub fn write_pgm(path: &Path, data: &[u16], w: usize, h: usize, maxval: u16) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::config(format!("pgm: {} samples for {w}x{h}", data.len())));
    }
    if maxval == 0 {
        return Err(Error::config("pgm: maxval must be positive"));
    }
    if let Some(&bad) = data.iter().find(|&&v| v > maxval) {
        return Err(Error::config(format!("pgm: sample {bad} exceeds maxval {maxval}")));
    }
    let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        for &v in data {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        bytes.extend(data.iter().map(|&v| v as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a P5 file, returning (samples, width, height, maxval).
pub fn read_pgm(path: &Path) -> Result<(Vec<u16>, usize, usize, u16)> {
    let bytes = fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut pos = 0usize;
    let mut fields: Vec<u64> = Vec::new();

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::data(format!("{}: not a P5 pgm file", path.display())));
    }
    pos += 2;
    // header: three whitespace-separated integers, # comments allowed
    while fields.len() < 3 {
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
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!("{}: malformed pgm header", path.display())));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        fields.push(text.parse().map_err(|_| Error::data(format!("{}: bad header field", path.display())))?);
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval == 0 || maxval > 65_535 {
        return Err(Error::data(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    let maxval = maxval as u16;
    let count = w * h;
    let data = if maxval > 255 {
        if bytes.len() < pos + 2 * count {
            return Err(Error::data(format!("{}: truncated raster", path.display())));
        }
        (0..count)
            .map(|i| u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]))
            .collect()
    } else {
        if bytes.len() < pos + count {
            return Err(Error::data(format!("{}: truncated raster", path.display())));
        }
        bytes[pos..pos + count].iter().map(|&b| b as u16).collect()
    };
    Ok((data, w, h, maxval))
}
