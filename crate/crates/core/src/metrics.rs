//! Region overlap and boundary distance metrics over class-indexed masks.
//!
//! Conventions: two empty masks score 100 on both overlap metrics; an empty
//! mask against a nonempty one scores 0; the boundary distance is undefined
//! whenever either mask is empty and is then left out of every average.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curve::{LandmarkClass, NUM_CLASSES};
use crate::{Error, Result};

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "mask sizes differ: {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let np = pred.iter().filter(|p| **p).count();
    let ng = gt.iter().filter(|g| **g).count();
    (inter, np, ng)
}

/// Dice coefficient in percent.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (inter, np, ng) = counts(pred, gt);
    if np + ng == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (np + ng) as f64)
}

/// Intersection over union in percent.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred, gt)?;
    let (inter, np, ng) = counts(pred, gt);
    let union = np + ng - inter;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Foreground pixels with at least one 4-neighbor in the background. Pixels
/// outside the image count as background.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    if mask.len() != h * w {
        return Err(Error::Invalid(format!(
            "mask of {} pixels is not {h}x{w}",
            mask.len()
        )));
    }
    let at = |i: isize, j: isize| {
        i >= 0
            && j >= 0
            && (i as usize) < h
            && (j as usize) < w
            && mask[i as usize * w + j as usize]
    };
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (ii, jj) = (i as isize, j as isize);
            if mask[i * w + j]
                && !(at(ii - 1, jj) && at(ii + 1, jj) && at(ii, jj - 1) && at(ii, jj + 1))
            {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// 1-D squared distance transform by lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest of
/// `points`, as a row-major `h × w` field.
pub fn squared_distance_field(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(i, j) in points {
        grid[i * w + j] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; n];
    for j in 0..w {
        for i in 0..h {
            col[i] = grid[i * w + j];
        }
        edt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for i in 0..h {
            grid[i * w + j] = tmp[i];
        }
    }
    for i in 0..h {
        let row = grid[i * w..(i + 1) * w].to_vec();
        edt_1d(&row, &mut grid[i * w..(i + 1) * w], &mut v, &mut z);
    }
    grid
}

/// Average symmetric surface distance in pixels, `None` when either mask is
/// empty.
pub fn assd(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<Option<f64>> {
    check_len(pred, gt)?;
    let (bp, bg) = (boundary(pred, h, w)?, boundary(gt, h, w)?);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (dp, dg) = (
        squared_distance_field(&bp, h, w),
        squared_distance_field(&bg, h, w),
    );
    let sum = bp.iter().map(|&(i, j)| dg[i * w + j].sqrt()).sum::<f64>()
        + bg.iter().map(|&(i, j)| dp[i * w + j].sqrt()).sum::<f64>();
    Ok(Some(sum / (bp.len() + bg.len()) as f64))
}

/// Scores of one class in one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dsc: f64,
    pub iou: f64,
    pub assd: Option<f64>,
}

pub fn score(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<ClassScores> {
    Ok(ClassScores {
        dsc: dsc(pred, gt)?,
        iou: iou(pred, gt)?,
        assd: assd(pred, gt, h, w)?,
    })
}

/// Binary mask of class `class` (0-based) in a class-indexed mask.
pub fn class_mask(mask: &[u8], class: usize) -> Vec<bool> {
    let v = class as u8 + 1;
    mask.iter().map(|&m| m == v).collect()
}

/// Per-class binary masks from `[3, H, W]` logits thresholded at zero.
pub fn binarize_logits(logits: &[f32], hw: usize) -> Result<Vec<Vec<bool>>> {
    if logits.len() != NUM_CLASSES * hw {
        return Err(Error::Invalid(format!(
            "expected {} logits, got {}",
            NUM_CLASSES * hw,
            logits.len()
        )));
    }
    Ok(logits
        .chunks(hw)
        .map(|c| c.iter().map(|&v| v > 0.0).collect())
        .collect())
}

/// Per-class binary masks from the per-pixel argmax over background (logit 0)
/// and the class logits.
pub fn argmax_logits(logits: &[f32], hw: usize) -> Result<Vec<Vec<bool>>> {
    binarize_logits(logits, hw)?;
    let mut out = vec![vec![false; hw]; NUM_CLASSES];
    for px in 0..hw {
        let mut best = (0.0f32, None);
        for c in 0..NUM_CLASSES {
            let v = logits[c * hw + px];
            if v > best.0 {
                best = (v, Some(c));
            }
        }
        if let Some(c) = best.1 {
            out[c][px] = true;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub scores: [ClassScores; NUM_CLASSES],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub dsc: f64,
    pub iou: f64,
    /// Mean over samples where it is defined; `None` if it never was.
    pub assd: Option<f64>,
    pub evaluated: usize,
    /// Samples whose boundary distance was undefined.
    pub skipped: usize,
}

/// Per-sample rows, per-class means and their macro average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SampleRow>,
    pub classes: [ClassSummary; NUM_CLASSES],
    pub mean: ClassSummary,
}

impl EvalReport {
    pub fn push(&mut self, id: impl Into<String>, scores: [ClassScores; NUM_CLASSES]) {
        self.rows.push(SampleRow {
            id: id.into(),
            scores,
        });
    }

    /// Recomputes the summaries from the rows.
    pub fn finish(&mut self) {
        let n = self.rows.len();
        for c in 0..NUM_CLASSES {
            let s = &mut self.classes[c];
            *s = ClassSummary::default();
            let defined: Vec<f64> = self.rows.iter().filter_map(|r| r.scores[c].assd).collect();
            if n > 0 {
                s.dsc = self.rows.iter().map(|r| r.scores[c].dsc).sum::<f64>() / n as f64;
                s.iou = self.rows.iter().map(|r| r.scores[c].iou).sum::<f64>() / n as f64;
            }
            s.assd =
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            s.evaluated = defined.len();
            s.skipped = n - defined.len();
        }
        let assds: Vec<f64> = self.classes.iter().filter_map(|c| c.assd).collect();
        self.mean = ClassSummary {
            dsc: self.classes.iter().map(|c| c.dsc).sum::<f64>() / NUM_CLASSES as f64,
            iou: self.classes.iter().map(|c| c.iou).sum::<f64>() / NUM_CLASSES as f64,
            assd: (!assds.is_empty()).then(|| assds.iter().sum::<f64>() / assds.len() as f64),
            evaluated: self.classes.iter().map(|c| c.evaluated).sum(),
            skipped: self.classes.iter().map(|c| c.skipped).sum(),
        };
    }

    pub fn to_csv(&self) -> String {
        let fmt_assd = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut s = String::from("sample_id,class,dsc,iou,assd\n");
        for r in &self.rows {
            for (c, sc) in r.scores.iter().enumerate() {
                let name = LandmarkClass::from_index(c).map_or("?", LandmarkClass::name);
                let _ = writeln!(
                    s,
                    "{},{name},{:.4},{:.4},{}",
                    r.id,
                    sc.dsc,
                    sc.iou,
                    fmt_assd(sc.assd)
                );
            }
        }
        for (c, sm) in self.classes.iter().enumerate() {
            let name = LandmarkClass::from_index(c).map_or("?", LandmarkClass::name);
            let _ = writeln!(
                s,
                "mean,{name},{:.4},{:.4},{}",
                sm.dsc,
                sm.iou,
                fmt_assd(sm.assd)
            );
        }
        let _ = writeln!(
            s,
            "mean,all,{:.4},{:.4},{}",
            self.mean.dsc,
            self.mean.iou,
            fmt_assd(self.mean.assd)
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
