//! Binary Netpbm I/O: P6 (RGB, 8-bit) and P5 (gray, 8- or 16-bit).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Grayscale raster as read from a P5 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub values: Vec<u16>,
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize_unit(v)));
    out
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, values: &[u16]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(values.iter().map(|&v| v.min(maxval) as u8));
    } else {
        for &v in values {
            out.extend_from_slice(&v.min(maxval).to_be_bytes());
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    maxval: u16,
    values: &[u16],
) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, maxval, values)).map_err(|e| Error::io(path, e))
}

/// Splits the three header integers and returns them plus the payload.
fn parse_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    path: &Path,
) -> Result<([usize; 3], &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "bad header field"))?;
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(path, "missing raster separator"));
    }
    Ok((fields, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let ([w, h, maxval], raster) = parse_header(bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if raster.len() != w * h * 3 {
        return Err(Error::format(path, "raster size mismatch"));
    }
    Image::new(h, w, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Gray> {
    let ([width, height, maxval], raster) = parse_header(bytes, b"P5", path)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("bad maxval {maxval}")));
    }
    let n = width * height;
    let values: Vec<u16> = if maxval < 256 {
        if raster.len() != n {
            return Err(Error::format(path, "raster size mismatch"));
        }
        raster.iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() != 2 * n {
            return Err(Error::format(path, "raster size mismatch"));
        }
        raster
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Gray {
        width,
        height,
        maxval: maxval as u16,
        values,
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip() {
        let vals = vec![0, 1, 300, 65535, 12345, 7];
        let bytes = encode_pgm(3, 2, 65535, &vals);
        let g = decode_pgm(&bytes, Path::new("x")).unwrap();
        assert_eq!(g.values, vals);
        assert_eq!((g.width, g.height), (3, 2));
    }

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Image::new(2, 2, data).unwrap();
        let back = decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([3, 4]);
        let g = decode_pgm(&bytes, Path::new("x")).unwrap();
        assert_eq!(g.values, vec![3, 4]);
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0", Path::new("x")).is_err());
    }
}
