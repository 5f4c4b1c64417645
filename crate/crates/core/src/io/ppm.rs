//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::{BitMask, Detection};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Error::Image(m.to_string());
    if bytes.len() < 2 {
        return Err(bad("file too short for a header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header: expected a number"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if fields[2] != 255 {
        return Err(Error::Image(format!("maxval {} is not supported (only 255)", fields[2])));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("malformed header: missing separator before pixel data")),
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(bad("zero image extent"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        data_start: pos,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Image("not a binary PPM (P6)".into()));
    }
    let n = h.width * h.height;
    let data = bytes
        .get(h.data_start..h.data_start + 3 * n)
        .ok_or_else(|| Error::Image(format!("pixel data shorter than {}×{}×3 bytes", h.width, h.height)))?;
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in data.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], out)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::Image(format!("expected a 3×H×W image, got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(image.data()[c * n + i]));
        }
    }
    Ok(out)
}

/// Grey image as an `H×W` tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Image("not a binary PGM (P5)".into()));
    }
    let n = h.width * h.height;
    let data = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::Image(format!("pixel data shorter than {}×{} bytes", h.width, h.height)))?;
    Tensor::new(vec![h.height, h.width], data.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// Mask as 0/255 bytes.
pub fn encode_pgm(mask: &BitMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

pub fn mask_from_pgm(t: &Tensor) -> BitMask {
    BitMask {
        height: t.dim(0),
        width: t.dim(1),
        data: t.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read(path)?).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: &Path, mask: &BitMask) -> Result<()> {
    write(path, &encode_pgm(mask))
}

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.7, 0.7, 0.7],
];

/// Fixed overlay color of a label.
pub fn label_color(label: &str) -> [f32; 3] {
    let mut h = crate::params::Fnv::new();
    h.write(label.as_bytes());
    PALETTE[(h.finish() % PALETTE.len() as u64) as usize]
}

/// The image with each detection mask blended in at 50%.
pub fn overlay(image: &Tensor, detections: &[Detection]) -> Tensor {
    let mut out = image.clone();
    let (h, w) = (image.dim(1), image.dim(2));
    let n = h * w;
    for d in detections.iter().rev() {
        let color = label_color(&d.label);
        for (i, &m) in d.mask.data.iter().enumerate().take(n) {
            if m != 0 {
                for (c, col) in color.iter().enumerate() {
                    let v = &mut out.data_mut()[c * n + i];
                    *v = 0.5 * *v + 0.5 * col;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_bytes_scale_to_unit_range() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([0, 1, 2, 3, 4, 5, 6, 7, 8, 255, 254, 253]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[4], 1.0 / 255.0);
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(encode_ppm(&t).unwrap()[b"P6\n2 2\n255\n".len()..], bytes[bytes.len() - 12..]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 x\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let mut m = BitMask::new(3, 2);
        m.set(1, 1, true);
        assert_eq!(mask_from_pgm(&decode_pgm(&encode_pgm(&m)).unwrap()), m);
    }
}
