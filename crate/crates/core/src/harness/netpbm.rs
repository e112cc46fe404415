//! Binary Netpbm I/O: P6 colour images and P5 grey/label maps, 8-bit only.
//! https://en.wikipedia.org/wiki/Netpbm

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Heatmap, Image, LabelMask};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

/// Parses `magic width height maxval` followed by exactly one whitespace
/// byte, skipping `#` comments.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::invalid(format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("truncated netpbm header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("bad netpbm header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::invalid("netpbm header must end in whitespace"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::invalid("netpbm image has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::invalid(format!("unsupported netpbm maxval {maxval} (8-bit only)")));
    }
    Ok(Header { width, height, maxval, data_start: pos + 1 })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, samples: usize) -> Result<&'a [u8]> {
    bytes
        .get(header.data_start..header.data_start + samples)
        .ok_or_else(|| Error::invalid("netpbm pixel data is truncated"))
}

/// Decodes a binary P6 image into `[0, 1]` channel-major data.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes, b"P6")?;
    let n = header.width * header.height;
    let raw = payload(bytes, &header, 3 * n)?;
    let scale = header.maxval as f64;
    let mut data = vec![0.0; 3 * n];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + p] = (px[c] as f64 / scale).min(1.0);
        }
    }
    Image::new(header.height, header.width, data)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    for p in 0..n {
        for c in 0..3 {
            out.push(to_byte(image.data()[c * n + p]));
        }
    }
    out
}

/// Decodes a binary P5 map as raw 8-bit labels (no rescaling by maxval).
pub fn decode_pgm_labels(bytes: &[u8]) -> Result<LabelMask> {
    let header = parse_header(bytes, b"P5")?;
    let raw = payload(bytes, &header, header.width * header.height)?;
    LabelMask::new(header.height, header.width, raw.to_vec())
}

pub fn encode_pgm(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

pub fn encode_labels(labels: &LabelMask) -> Vec<u8> {
    encode_pgm(labels.height(), labels.width(), labels.data())
}

/// 8-bit heatmap export: `round(255 * A)`.
pub fn encode_heatmap(heatmap: &Heatmap) -> Vec<u8> {
    let values: Vec<u8> = heatmap.data().iter().map(|v| to_byte(*v)).collect();
    encode_pgm(heatmap.height(), heatmap.width(), &values)
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn read_labels(path: &Path) -> Result<LabelMask> {
    decode_pgm_labels(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{minmax_normalize, Map2};

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let img = Image::from_fn(3, 4, |c, y, x| ((c * 40 + y * 17 + x * 5) % 256) as f64 / 255.0).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n3 # width\n 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 255, 4, 5]);
        let labels = decode_pgm_labels(&bytes).unwrap();
        assert_eq!((labels.height(), labels.width()), (2, 3));
        assert_eq!(labels.get(1, 0), 255);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_pgm_labels(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_pgm_labels(b"P5\n1").is_err());
    }

    #[test]
    fn maxval_rescales_colour() {
        let img = decode_ppm(b"P6\n1 1\n15\n\x0f\x00\x05").unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert!((img.data()[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn heatmap_export_rounds() {
        let h = minmax_normalize(&Map2::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap()).unwrap();
        let bytes = encode_heatmap(&h);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
