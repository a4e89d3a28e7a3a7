//! RGB rasters and binary PNM (P5/P6) I/O.

use std::fs;
use std::path::Path;

use a2o_tensor::{Real, Tensor};

use crate::{Error, Result};

/// Planar `[3, H, W]` image with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Invalid(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("rgb value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    /// `f(channel, y, x)`, clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("consistent image")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let s = if s.len() == 4 && s[0] == 1 {
            &s[1..]
        } else {
            s
        };
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Invalid(format!("expected [3,H,W], got {s:?}")));
        }
        Ok(Self {
            height: s[1],
            width: s[2],
            data: t
                .data()
                .iter()
                .map(|v| (Real::to_f64(*v) as f32).clamp(0.0, 1.0))
                .collect(),
        })
    }

    /// 8-bit quantization round trip.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(to_u8(img.get(c, y, x)));
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, maxval, body) = parse_header(path, &raw)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Image {
            path: path.into(),
            detail: format!("expected 8-bit P6, found {magic} with maxval {maxval}"),
        });
    }
    if body.len() < 3 * w * h {
        return Err(truncated(path));
    }
    let mut img = RgbImage::black(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

/// Grayscale raster as read from a P5 file.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

pub fn write_pgm8(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// 16-bit PGM, big-endian samples.
pub fn write_pgm16(path: &Path, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, maxval, body) = parse_header(path, &raw)?;
    if magic != "P5" || maxval == 0 || maxval > 65535 {
        return Err(Error::Image {
            path: path.into(),
            detail: format!("expected P5, found {magic} with maxval {maxval}"),
        });
    }
    let data: Vec<u16> = if maxval < 256 {
        if body.len() < w * h {
            return Err(truncated(path));
        }
        body[..w * h].iter().map(|&b| b as u16).collect()
    } else {
        if body.len() < 2 * w * h {
            return Err(truncated(path));
        }
        body[..2 * w * h]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(GrayImage {
        height: h,
        width: w,
        maxval: maxval as u16,
        data,
    })
}

/// Scales `values` by `scale`, rounding and saturating to 8 bits.
pub fn saturate_u8(values: &[f64], scale: f64) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn truncated(path: &Path) -> Error {
    Error::Image {
        path: path.into(),
        detail: "pixel data truncated".into(),
    }
}

fn parse_header<'a>(path: &Path, raw: &'a [u8]) -> Result<(String, usize, usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < raw.len() && (raw[i].is_ascii_whitespace() || raw[i] == b'#') {
            if raw[i] == b'#' {
                while i < raw.len() && raw[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Image {
                path: path.into(),
                detail: "incomplete header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&raw[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    let body = raw.get(i + 1..).unwrap_or(&[]);
    let num = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Image {
            path: path.into(),
            detail: format!("bad header field `{s}`"),
        })
    };
    Ok((
        fields[0].clone(),
        num(&fields[1])?,
        num(&fields[2])?,
        num(&fields[3])?,
        body,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 7, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f32 / 10.0);
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let data: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_pgm16(&p, 3, 4, &data).unwrap();
        let g = read_pgm(&p).unwrap();
        assert_eq!((g.height, g.width, g.maxval), (3, 4, 65535));
        assert_eq!(g.data, data);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(RgbImage::new(1, 1, vec![0.0, 1.5, 0.2]).is_err());
    }
}
