//! Single-image inference with optional intermediate dumps.

use std::fs;
use std::path::{Path, PathBuf};

use a2o_tensor::{Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::curve::{thick_mask, BezierCurve, LandmarkClass, NUM_CLASSES};
use crate::image::{self, RgbImage};
use crate::model::{self, Mode};
use crate::{Error, Result};

/// Illumination dumps store `L · FIELD_SCALE` in 8 bits, so `L = 2` saturates.
pub const FIELD_SCALE: f64 = 127.5;
/// Gain dumps store `g · GAIN_SCALE` in 8 bits, so `g = 4` saturates.
pub const GAIN_SCALE: f64 = 63.75;
/// Curves at or above this confidence are drawn on the overlay.
pub const DRAW_CONFIDENCE: f64 = 0.5;
const OVERLAY: [[f32; 3]; NUM_CLASSES] = [[1.0, 0.85, 0.0], [0.0, 0.9, 1.0], [1.0, 0.2, 0.8]];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferOptions {
    pub dump_illum: bool,
    pub dump_fosf: bool,
    pub dump_stages: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    /// Class-indexed mask: the highest positive class logit per pixel.
    pub mask: Vec<u8>,
    /// Most confident curve per class; empty without the curve decoder.
    pub curves: Vec<BezierCurve>,
    pub files: Vec<PathBuf>,
}

/// Class-indexed mask from `[3, H, W]` logits.
pub fn mask_from_logits(logits: &[f32], hw: usize) -> Vec<u8> {
    (0..hw)
        .map(|px| {
            let mut best = (0.0f32, 0u8);
            for c in 0..NUM_CLASSES {
                let v = logits[c * hw + px];
                if v > best.0 {
                    best = (v, c as u8 + 1);
                }
            }
            best.1
        })
        .collect()
}

/// Input image with the predicted mask tinted and confident curves drawn.
pub fn overlay(img: &RgbImage, mask: &[u8], curves: &[BezierCurve]) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for (k, &m) in mask.iter().enumerate() {
        if m > 0 {
            let col = OVERLAY[m as usize - 1];
            for (c, &v) in col.iter().enumerate() {
                let (y, x) = (k / w, k % w);
                out.set(c, y, x, 0.5 * out.get(c, y, x) + 0.5 * v);
            }
        }
    }
    for curve in curves.iter().filter(|c| c.confidence >= DRAW_CONFIDENCE) {
        let col = OVERLAY[curve.class.index()];
        for (k, hit) in thick_mask(curve, h, w, 0.75).into_iter().enumerate() {
            if hit {
                for (c, &v) in col.iter().enumerate() {
                    out.set(c, k / w, k % w, v);
                }
            }
        }
    }
    out
}

fn normalized_u8(t: &Tensor<f32>) -> Vec<u8> {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.data()
        .iter()
        .map(|&v| image::to_u8((v - lo) / span))
        .collect()
}

fn scaled_u8(t: &Tensor<f32>, scale: f64) -> Vec<u8> {
    let v: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
    image::saturate_u8(&v, scale)
}

fn write_json(path: &Path, curves: &[BezierCurve]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(curves)?).map_err(|e| Error::io(path, e))
}

/// Runs the checkpointed model on `img` and writes `mask.pgm`,
/// `curves.json`, `overlay.ppm` and any requested dumps into `out`.
pub fn infer(
    ckpt: &Checkpoint,
    img: &RgbImage,
    aux: Option<&[f32]>,
    out: &Path,
    opts: InferOptions,
) -> Result<InferOutput> {
    let cfg = &ckpt.meta.model;
    let (h, w) = (cfg.height, cfg.width);
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::Invalid(format!(
            "checkpoint expects {h}x{w} images, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let g = Graph::new();
    let b = ckpt.params.bind_frozen(&g);
    let aux = aux
        .map(|a| Tensor::new(vec![1, h, w], a.to_vec()))
        .transpose()?;
    let f = model::model_forward(cfg, &b, &g, &img.to_tensor(), aux.as_ref(), Mode::Eval)?;
    let logits = f.logits.value();
    let mask = mask_from_logits(logits.data(), h * w);
    let curves = f.final_curves().map(|p| p.selected()).unwrap_or_default();

    let mut files = Vec::new();
    let mut put = |name: &str| {
        let p = out.join(name);
        files.push(p.clone());
        p
    };
    image::write_pgm8(&put("mask.pgm"), h, w, &mask)?;
    write_json(&put("curves.json"), &curves)?;
    image::write_ppm(&put("overlay.ppm"), &overlay(img, &mask, &curves))?;

    if opts.dump_illum {
        let comp = &f.compensation;
        image::write_pgm8(
            &put("illum_field.pgm"),
            h,
            w,
            &scaled_u8(&comp.field.value(), FIELD_SCALE),
        )?;
        image::write_pgm8(
            &put("illum_gain.pgm"),
            h,
            w,
            &scaled_u8(&comp.gain.value(), GAIN_SCALE),
        )?;
        image::write_ppm(
            &put("compensated.ppm"),
            &RgbImage::from_tensor(&comp.image.value())?,
        )?;
    }
    if opts.dump_fosf {
        // bottleneck first, then skips from the finest level
        let sites = std::iter::once("bneck".to_string())
            .chain((0..cfg.stages()).map(|i| format!("skip{i}")));
        for (site, maps) in sites.zip(&f.fosf_maps) {
            for (kind, v) in [
                ("guidance", maps.guidance),
                ("highfreq", maps.highfreq),
                ("selected", maps.selected),
            ] {
                let t = v.value();
                let s = t.shape();
                let (mh, mw) = (s[s.len() - 2], s[s.len() - 1]);
                image::write_pgm8(
                    &put(&format!("fosf_{site}_{kind}.pgm")),
                    mh,
                    mw,
                    &normalized_u8(&t),
                )?;
            }
        }
    }
    if opts.dump_stages {
        if let Some(p) = &f.proposals {
            write_json(&put("stage_init_curves.json"), &p.curves())?;
        }
        for (s, st) in f.stages.iter().enumerate() {
            let priors = st.priors.value();
            let (ph, pw) = (priors.shape()[2], priors.shape()[3]);
            for (c, plane) in priors.data().chunks(ph * pw).enumerate() {
                let name = LandmarkClass::from_index(c).map_or("?", LandmarkClass::name);
                let v: Vec<f64> = plane.iter().map(|&x| f64::from(x)).collect();
                image::write_pgm8(
                    &put(&format!("stage{s}_prior_{name}.pgm")),
                    ph,
                    pw,
                    &image::saturate_u8(&v, 255.0),
                )?;
            }
            let logits = st.logits.value();
            let (lh, lw) = (logits.shape()[2], logits.shape()[3]);
            image::write_pgm8(
                &put(&format!("stage{s}_mask.pgm")),
                lh,
                lw,
                &mask_from_logits(logits.data(), lh * lw),
            )?;
            write_json(&put(&format!("stage{s}_curves.json")), &st.curves.curves())?;
        }
    }
    Ok(InferOutput {
        mask,
        curves,
        files,
    })
}
