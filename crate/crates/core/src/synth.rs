//! Procedural low-light scenes with exact ground truth.
//!
//! A scene is a tissue-like background with optional stripe texture, up to
//! three class-specific Bézier strokes, darkened by a known illumination field
//! and corrupted by Gaussian noise. The stored mask is the thickened
//! rasterization of the stored curves, and the stored field is the one that
//! darkened the image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curve::{thick_mask, BezierCurve, LandmarkClass, M, NUM_CLASSES};
use crate::image::{self, RgbImage};
use crate::{Error, Result};

/// Stored illumination values are `L · ILLUM_SCALE` in a 16-bit PGM.
pub const ILLUM_SCALE: f64 = 32768.0;
/// Validation sample indices start here so their seeds never meet training's.
pub const VAL_OFFSET: u64 = 1_000_000;
/// Darkest illumination the generator produces.
pub const ILLUM_FLOOR: f64 = 0.02;
/// Control points are kept this far inside the unit square.
const MARGIN: f64 = 0.03;

const STROKE: [[f32; 3]; NUM_CLASSES] =
    [[0.98, 0.86, 0.60], [0.95, 0.95, 0.90], [1.00, 0.66, 0.50]];
const STROKE_MIX: f32 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Vignette strength in `[0, 1]`; also scales the random illumination
    /// dips.
    pub vignette: f64,
    /// Amplitude of the stripe texture.
    pub texture: f64,
    pub present: [bool; NUM_CLASSES],
    /// Stroke width in pixels; the mask is everything within half of it.
    pub thickness: f64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Emit a pseudo-depth auxiliary channel.
    pub aux: bool,
}

impl SceneSpec {
    /// Scene parameters drawn from `seed`: vignette in `[0.4, 0.9]`, texture
    /// up to 0.12, every class present with probability 3/4, 4 px strokes.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ec_u64);
        Self {
            seed,
            height,
            width,
            vignette: rng.random_range(0.4..0.9),
            texture: rng.random_range(0.0..0.12),
            present: [(); NUM_CLASSES].map(|_| rng.random_bool(0.75)),
            thickness: 4.0,
            noise: 0.02,
            aux: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.height > 0
            && self.width > 0
            && (0.0..=1.0).contains(&self.vignette)
            && self.texture >= 0.0
            && self.thickness > 0.0
            && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub image: RgbImage,
    /// The scene before darkening and noise.
    pub clean: RgbImage,
    /// Class-indexed mask, 0 background and `class + 1` elsewhere.
    pub mask: Vec<u8>,
    pub curves: Vec<BezierCurve>,
    /// Illumination field `[H, W]`.
    pub illum: Vec<f32>,
    pub aux: Option<Vec<f32>>,
}

impl Sample {
    /// The sample as training code sees it, without the disk round trip.
    pub fn stored(&self, id: impl Into<String>) -> StoredSample {
        StoredSample {
            id: id.into(),
            image: self.image.clone(),
            mask: self.mask.clone(),
            illum: self.illum.clone(),
            curves: self.curves.clone(),
            aux: self.aux.clone(),
            thickness: self.spec.thickness,
        }
    }
}

/// Smooth field in `[0, 1]`: a `cells × cells` grid of uniform values with
/// bilinear interpolation between cell centers.
fn smooth_field(rng: &mut impl Rng, cells: usize, h: usize, w: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let at = |i: usize, j: usize| grid[i.min(cells - 1) * cells + j.min(cells - 1)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) / h as f64 * cells as f64 - 0.5).max(0.0);
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = ((x as f64 + 0.5) / w as f64 * cells as f64 - 0.5).max(0.0);
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn clamp_point(p: [f64; 2]) -> [f64; 2] {
    p.map(|v| v.clamp(MARGIN, 1.0 - MARGIN))
}

/// Random curve following the class prior: ridges in mid-field at any angle,
/// ligaments along the vertical midline, silhouettes parallel to a border.
pub fn random_curve(rng: &mut impl Rng, class: LandmarkClass) -> BezierCurve {
    let mut control = [[0.0; 2]; M];
    match class {
        LandmarkClass::Ridge => {
            let c = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(0.35..0.6);
            let (dx, dy) = (theta.cos(), theta.sin());
            for (m, p) in control.iter_mut().enumerate() {
                let s = (m as f64 / (M - 1) as f64 - 0.5) * len;
                let off = if m == 0 || m == M - 1 {
                    0.0
                } else {
                    rng.random_range(-0.08..0.08)
                };
                *p = clamp_point([c[0] + s * dx - off * dy, c[1] + s * dy + off * dx]);
            }
        }
        LandmarkClass::Ligament => {
            let x0 = rng.random_range(0.42..0.58);
            let (y0, y1) = (rng.random_range(0.1..0.2), rng.random_range(0.8..0.9));
            for (m, p) in control.iter_mut().enumerate() {
                let t = m as f64 / (M - 1) as f64;
                *p = clamp_point([x0 + rng.random_range(-0.06..0.06), y0 + t * (y1 - y0)]);
            }
        }
        LandmarkClass::Silhouette => {
            let side = rng.random_range(0..4u8);
            let depth = rng.random_range(0.06..0.15);
            let (a, b) = (rng.random_range(0.05..0.25), rng.random_range(0.75..0.95));
            for (m, p) in control.iter_mut().enumerate() {
                let along = a + m as f64 / (M - 1) as f64 * (b - a);
                let d = depth + rng.random_range(-0.04..0.04);
                *p = clamp_point(match side {
                    0 => [along, d],
                    1 => [along, 1.0 - d],
                    2 => [d, along],
                    _ => [1.0 - d, along],
                });
            }
        }
    }
    BezierCurve::new(class, control)
}

/// Class-indexed mask of `curves`, painted in order so later curves win
/// where strokes cross.
pub fn paint_mask(curves: &[BezierCurve], h: usize, w: usize, thickness: f64) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for c in curves {
        for (m, hit) in mask.iter_mut().zip(thick_mask(c, h, w, thickness / 2.0)) {
            if hit {
                *m = c.class.mask_value();
            }
        }
    }
    mask
}

/// Renders the scene described by `spec`. Identical specs give identical
/// samples.
pub fn gen_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let base: [f64; 3] = [
        0.62 + rng.random_range(-0.05..0.05),
        0.32 + rng.random_range(-0.05..0.05),
        0.28 + rng.random_range(-0.05..0.05),
    ];
    let blobs: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(&mut rng, 5, h, w)).collect();
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(5.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let curves: Vec<BezierCurve> = LandmarkClass::ALL
        .into_iter()
        .filter(|c| spec.present[c.index()])
        .map(|c| random_curve(&mut rng, c))
        .collect();
    let dips = smooth_field(&mut rng, 4, h, w);
    let aux_field = smooth_field(&mut rng, 3, h, w);

    let mask = paint_mask(&curves, h, w, spec.thickness);
    let clean = RgbImage::from_fn(h, w, |c, y, x| {
        let k = y * w + x;
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        let stripe =
            (std::f64::consts::TAU * (u * theta.cos() + v * theta.sin()) / period + phase).sin();
        let bg = (base[c] + 0.16 * (blobs[c][k] - 0.5) + spec.texture * stripe) as f32;
        match mask[k] {
            0 => bg,
            m => bg + STROKE_MIX * (STROKE[m as usize - 1][c] - bg),
        }
    });

    let illum: Vec<f32> = (0..h * w)
        .map(|k| {
            let (y, x) = (k / w, k % w);
            let dx = (x as f64 + 0.5) / w as f64 - 0.5;
            let dy = (y as f64 + 0.5) / h as f64 - 0.5;
            let r2 = (dx * dx + dy * dy) / 0.5;
            let l = (1.0 - spec.vignette * r2) * (1.0 - 0.5 * spec.vignette * dips[k]);
            l.max(ILLUM_FLOOR) as f32
        })
        .collect();

    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let mut image = RgbImage::black(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let n = if spec.noise > 0.0 {
                    normal.sample(&mut noise_rng) as f32
                } else {
                    0.0
                };
                image.set(
                    c,
                    y,
                    x,
                    (clean.get(c, y, x) * illum[y * w + x] + n).clamp(0.0, 1.0),
                );
            }
        }
    }
    let aux = spec.aux.then(|| {
        aux_field
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let dy = ((k / w) as f64 + 0.5) / h as f64 - 0.5;
                (0.3 + 0.4 * a + 0.3 * (dy + 0.5)) as f32
            })
            .collect()
    });
    Ok(Sample {
        spec: spec.clone(),
        image,
        clean,
        mask,
        curves,
        illum,
        aux,
    })
}

/// Seed of sample `index` under `master`, from an independent stream per
/// index.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: String,
    pub master_seed: u64,
    /// Sample indices are `first_index..first_index + samples.len()`.
    pub first_index: u64,
    pub samples: Vec<IndexEntry>,
}

fn file(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

/// Writes one sample's files into `dir`.
pub fn write_sample(dir: &Path, id: &str, s: &Sample) -> Result<()> {
    let (h, w) = (s.spec.height, s.spec.width);
    image::write_ppm(&file(dir, id, "img.ppm"), &s.image)?;
    image::write_pgm8(&file(dir, id, "mask.pgm"), h, w, &s.mask)?;
    let illum: Vec<u16> = s.illum.iter().map(|&l| to_u16(l)).collect();
    image::write_pgm16(&file(dir, id, "illum.pgm"), h, w, &illum)?;
    if let Some(a) = &s.aux {
        let aux: Vec<u16> = a.iter().map(|&v| to_u16(v)).collect();
        image::write_pgm16(&file(dir, id, "aux.pgm"), h, w, &aux)?;
    }
    let path = file(dir, id, "curves.json");
    fs::write(&path, serde_json::to_vec_pretty(&s.curves)?).map_err(|e| Error::io(&path, e))
}

fn to_u16(v: f32) -> u16 {
    (f64::from(v) * ILLUM_SCALE).round().clamp(0.0, 65535.0) as u16
}

/// Generates `n` samples of `split` under `root/split`, with sample indices
/// starting at `first_index`, and writes the split's `index.json`.
pub fn gen_split(
    root: &Path,
    split: &str,
    n: usize,
    master_seed: u64,
    first_index: u64,
    size: (usize, usize),
    aux: bool,
) -> Result<DatasetIndex> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let index = first_index + i;
        let spec = SceneSpec {
            aux,
            ..SceneSpec::random(sample_seed(master_seed, index), size.0, size.1)
        };
        let id = format!("{index:07}");
        write_sample(&dir, &id, &gen_scene(&spec)?)?;
        samples.push(IndexEntry { id, spec });
    }
    let index = DatasetIndex {
        split: split.into(),
        master_seed,
        first_index,
        samples,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Training split under `root/train` and validation split under `root/val`.
pub fn gen_dataset(
    root: &Path,
    n_train: usize,
    n_val: usize,
    seed: u64,
    size: (usize, usize),
    aux: bool,
) -> Result<()> {
    gen_split(root, "train", n_train, seed, 0, size, aux)?;
    gen_split(root, "val", n_val, seed, VAL_OFFSET, size, aux)?;
    Ok(())
}

/// A sample as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Vec<u8>,
    pub illum: Vec<f32>,
    pub curves: Vec<BezierCurve>,
    pub aux: Option<Vec<f32>>,
    pub thickness: f64,
}

impl StoredSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Ground-truth curve per class, if present.
    pub fn class_curves(&self) -> [Option<BezierCurve>; NUM_CLASSES] {
        let mut out: [Option<BezierCurve>; NUM_CLASSES] = Default::default();
        for c in &self.curves {
            out[c.class.index()] = Some(c.clone());
        }
        out
    }
}

fn read_gray(path: &Path, h: usize, w: usize) -> Result<Vec<u16>> {
    let g = image::read_pgm(path)?;
    if (g.height, g.width) != (h, w) {
        return Err(Error::Image {
            path: path.into(),
            detail: format!("expected {h}x{w}, found {}x{}", g.height, g.width),
        });
    }
    Ok(g.data)
}

/// A 16-bit plane stored as `v · ILLUM_SCALE`, such as an illumination or
/// auxiliary map.
pub fn read_scaled(path: &Path, h: usize, w: usize) -> Result<Vec<f32>> {
    Ok(read_gray(path, h, w)?
        .into_iter()
        .map(|v| (f64::from(v) / ILLUM_SCALE) as f32)
        .collect())
}

pub fn read_sample(dir: &Path, entry: &IndexEntry) -> Result<StoredSample> {
    let id = &entry.id;
    let image = image::read_ppm(&file(dir, id, "img.ppm"))?;
    let (h, w) = (image.height(), image.width());
    let mask_path = file(dir, id, "mask.pgm");
    let mask: Vec<u8> = read_gray(&mask_path, h, w)?
        .into_iter()
        .map(|v| u8::try_from(v).ok().filter(|&m| m as usize <= NUM_CLASSES))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Image {
            path: mask_path.clone(),
            detail: "mask values must lie in 0..=3".into(),
        })?;
    let illum = read_scaled(&file(dir, id, "illum.pgm"), h, w)?;
    let aux = if entry.spec.aux {
        Some(read_scaled(&file(dir, id, "aux.pgm"), h, w)?)
    } else {
        None
    };
    let path = file(dir, id, "curves.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(StoredSample {
        id: id.clone(),
        image,
        mask,
        illum,
        curves: serde_json::from_slice(&raw)?,
        aux,
        thickness: entry.spec.thickness,
    })
}

/// A whole split held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub samples: Vec<StoredSample>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_slice(&raw)?;
        let samples = index
            .samples
            .iter()
            .map(|e| read_sample(dir, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { index, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
