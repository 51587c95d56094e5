//! Dense row-major 2D arrays and the binary PGM / raw-float file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A row-major `width × height` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Grayscale image with values in `[0, 1]`.
pub type Image = Plane<f32>;
/// Camera-frame z per pixel; non-positive means no surface.
pub type DepthMap = Plane<f32>;
/// Per-pixel detector score in `[0, 1]`, same size as the image.
pub type Heatmap = Plane<f64>;

/// Quantize `[0,1]` values to 8 bits and write a binary (P5) PGM.
pub fn write_pgm(path: &Path, plane: &Plane<f32>) -> Result<()> {
    let bytes: Vec<u8> = plane
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm_bytes(path, plane.width, plane.height, &bytes)
}

/// Round to the values an 8-bit PGM round trip would produce.
pub fn quantize8(plane: &Plane<f32>) -> Image {
    plane.map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0)
}

pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(bytes);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header: magic, width, height, maxval, each separated by whitespace,
    // followed by exactly one whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::malformed(path, format!("bad magic `{}`", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::malformed(path, format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::malformed(path, format!("unsupported maxval {maxval}")));
    }
    if raw.len() < pos + w * h {
        return Err(Error::malformed(path, "truncated PGM raster"));
    }
    let data = raw[pos..pos + w * h]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Plane::from_vec(w, h, data)
}

/// Header line `W H`, then `W·H` little-endian f32 values, row-major.
pub fn write_raw_f32(path: &Path, plane: &Plane<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + plane.data.len() * 4);
    writeln!(buf, "{} {}", plane.width, plane.height).expect("write to Vec");
    for v in &plane.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<Plane<f32>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::malformed(path, "missing header line"))?;
    let header = std::str::from_utf8(&raw[..nl])
        .map_err(|_| Error::malformed(path, "non-utf8 header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::malformed(path, format!("bad header `{header}`")))?;
    let [w, h] = dims[..] else {
        return Err(Error::malformed(path, format!("bad header `{header}`")));
    };
    let body = &raw[nl + 1..];
    if body.len() != w * h * 4 {
        return Err(Error::malformed(
            path,
            format!("expected {} raster bytes, found {}", w * h * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Plane::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Plane::from_fn(7, 5, |x, y| ((x * 5 + y) as f32 / 40.0).min(1.0));
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert!(img.same_shape(&back));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn raw_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        let d = Plane::from_fn(4, 3, |x, y| x as f32 * 0.123_456_7 - y as f32);
        write_raw_f32(&p, &d).unwrap();
        assert_eq!(read_raw_f32(&p).unwrap(), d);
    }

    #[test]
    fn truncated_raw_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        fs::write(&p, b"4 3\n\x00\x00").unwrap();
        assert!(matches!(read_raw_f32(&p), Err(Error::Malformed { .. })));
        fs::write(&p, b"").unwrap();
        assert!(matches!(read_raw_f32(&p), Err(Error::Malformed { .. })));
    }
}
