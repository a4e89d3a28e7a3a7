//! Geometric augmentation applied consistently to image, mask, curves,
//! illumination and auxiliary channel.
//!
//! Flips permute pixels exactly. Rotations map control points analytically,
//! repaint the mask from the rotated curves and resample rasters bilinearly
//! with edge clamping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curve::BezierCurve;
use crate::image::RgbImage;
use crate::synth::{paint_mask, StoredSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotations are drawn uniformly from `±rotation_deg`; zero disables.
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            hflip: true,
            vflip: true,
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        rotation_deg: 0.0,
        hflip: false,
        vflip: false,
    };
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Radians, counter-clockwise on screen.
    pub angle: f64,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        // every draw consumes the same randomness whatever the flags
        let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let a: f64 = rng.random_range(-1.0..=1.0);
        Self {
            hflip: cfg.hflip && h,
            vflip: cfg.vflip && v,
            angle: (a * cfg.rotation_deg).to_radians(),
        }
    }
}

fn flip_plane<T: Copy>(data: &mut [T], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        for row in data.chunks_mut(w) {
            row.reverse();
        }
    } else {
        for i in 0..h / 2 {
            let (top, bot) = data.split_at_mut((h - 1 - i) * w);
            top[i * w..(i + 1) * w].swap_with_slice(&mut bot[..w]);
        }
    }
}

fn flip_image(img: &RgbImage, horizontal: bool) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut data = img.data().to_vec();
    for plane in data.chunks_mut(h * w) {
        flip_plane(plane, h, w, horizontal);
    }
    RgbImage::new(h, w, data).expect("flip keeps the image valid")
}

/// Mirrors across the vertical (`horizontal = true`) or horizontal axis.
pub fn flip(s: &StoredSample, horizontal: bool) -> StoredSample {
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    out.image = flip_image(&s.image, horizontal);
    flip_plane(&mut out.mask, h, w, horizontal);
    flip_plane(&mut out.illum, h, w, horizontal);
    if let Some(a) = &mut out.aux {
        flip_plane(a, h, w, horizontal);
    }
    let axis = usize::from(!horizontal);
    for c in &mut out.curves {
        for p in &mut c.control {
            p[axis] = 1.0 - p[axis];
        }
    }
    out
}

/// Rotates a normalized point by `angle` about the image center, working in
/// pixel units so non-square images rotate rigidly.
pub fn rotate_point(p: [f64; 2], angle: f64, h: usize, w: usize) -> [f64; 2] {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (x, y) = (p[0] * w as f64 - cx, p[1] * h as f64 - cy);
    let (s, c) = angle.sin_cos();
    // y points down, so a counter-clockwise turn on screen negates the sine
    [
        (c * x + s * y + cx) / w as f64,
        (-s * x + c * y + cy) / h as f64,
    ]
}

pub fn rotate_curve(curve: &BezierCurve, angle: f64, h: usize, w: usize) -> BezierCurve {
    BezierCurve {
        control: curve.control.map(|p| rotate_point(p, angle, h, w)),
        ..curve.clone()
    }
}

/// Bilinear resampling of one `h × w` plane under the rotation, edge-clamped.
pub fn rotate_plane(data: &[f32], angle: f64, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            // output pixel center mapped back by the inverse rotation
            let p = [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64];
            let q = rotate_point(p, -angle, h, w);
            let fx = (q[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (q[1] * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let at = |y: usize, x: usize| f64::from(data[y * w + x]);
            let v = (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty)
                + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty;
            out.push(v as f32);
        }
    }
    out
}

pub fn rotate(s: &StoredSample, angle: f64) -> StoredSample {
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    let data: Vec<f32> = s
        .image
        .data()
        .chunks(h * w)
        .flat_map(|plane| rotate_plane(plane, angle, h, w))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    out.image = RgbImage::new(h, w, data).expect("rotation keeps the image valid");
    out.illum = rotate_plane(&s.illum, angle, h, w);
    out.aux = s.aux.as_ref().map(|a| rotate_plane(a, angle, h, w));
    out.curves = s
        .curves
        .iter()
        .map(|c| rotate_curve(c, angle, h, w))
        .collect();
    out.mask = paint_mask(&out.curves, h, w, s.thickness);
    out
}

pub fn apply(s: &StoredSample, draw: &AugmentDraw) -> StoredSample {
    let mut out = s.clone();
    if draw.hflip {
        out = flip(&out, true);
    }
    if draw.vflip {
        out = flip(&out, false);
    }
    if draw.angle != 0.0 {
        out = rotate(&out, draw.angle);
    }
    out
}
