//! Training objective: segmentation, curve and illumination terms.

use a2o_tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::curve::{self, BezierCurve, MinMode, Proposals, NUM_CLASSES};
use crate::{Error, Result};

/// Points per curve compared by the chamfer term.
pub const CHAMFER_SAMPLES: usize = 64;
/// Smooths `sqrt` at zero distance: `d = sqrt(d² + ε²) − ε`.
const DIST_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub curve: f64,
    pub illum: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            curve: 0.2,
            illum: 0.1,
        }
    }
}

/// Per-class binary targets `[3, H, W]` from a class-indexed mask.
pub fn class_targets<T: Real>(mask: &[u8], h: usize, w: usize) -> Result<Tensor<T>> {
    if mask.len() != h * w {
        return Err(Error::Invalid(format!(
            "mask has {} pixels, expected {}",
            mask.len(),
            h * w
        )));
    }
    if let Some(v) = mask.iter().find(|&&v| v as usize > NUM_CLASSES) {
        return Err(Error::Invalid(format!(
            "mask value {v} outside 0..={NUM_CLASSES}"
        )));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[NUM_CLASSES, h, w], |i| {
        T::of(f64::from(u8::from(
            mask[i % plane] as usize == i / plane + 1,
        )))
    }))
}

/// Mean of `softplus(x) − x·q` over all entries; gradient `(σ(x) − q)/n`.
pub fn bce_with_logits<'g, T: Real>(logits: Var<'g, T>, targets: &Tensor<T>) -> Result<Var<'g, T>> {
    if logits.numel() != targets.len() {
        return Err(Error::Invalid(format!(
            "bce: {} logits vs {} targets",
            logits.numel(),
            targets.len()
        )));
    }
    let x = logits.value();
    let n = T::of(x.len() as f64);
    let total = x
        .data()
        .iter()
        .zip(targets.data())
        .fold(T::zero(), |acc, (&x, &q)| acc + softplus(x) - x * q);
    let targets = targets.clone();
    let id = logits.id();
    Ok(logits.graph().custom(
        "bce_with_logits",
        &[logits],
        Tensor::scalar(total / n),
        Box::new(move |g, sink| {
            if let Some(gx) = sink.acc(id) {
                for ((gi, &xi), &q) in gx.iter_mut().zip(x.data()).zip(targets.data()) {
                    *gi = *gi + g[0] * (sigmoid(xi) - q) / n;
                }
            }
        }),
    ))
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^−|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `1 − (2Σpq + 1)/(Σp + Σq + 1)` over all entries of `p`.
pub fn soft_dice<'g, T: Real>(p: Var<'g, T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
    let inter = p.mul(q)?.sum().mul_scalar(T::of(2.0)).add_scalar(T::one());
    let denom = p.sum().add(q.sum())?.add_scalar(T::one());
    Ok(inter.div(denom)?.neg().add_scalar(T::one()))
}

/// Mean over classes of soft-Dice plus BCE for `logits [1, 3, H, W]`.
pub fn seg_loss<'g, T: Real>(logits: Var<'g, T>, mask: &[u8]) -> Result<Var<'g, T>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != NUM_CLASSES {
        return Err(Error::Invalid(format!(
            "seg logits must be [1,3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let g = logits.graph();
    let targets = class_targets::<T>(mask, h, w)?;
    let bce = bce_with_logits(logits, &targets)?;
    let probs = logits.sigmoid().reshape(&[NUM_CLASSES, h * w])?;
    let q = g.constant(targets.reshape(&[NUM_CLASSES, h * w])?);
    let mut dice = g.scalar(T::zero());
    for c in 0..NUM_CLASSES {
        dice = dice.add(soft_dice(probs.narrow(0, c, 1)?, q.narrow(0, c, 1)?)?)?;
    }
    Ok(dice.mul_scalar(T::of(1.0 / NUM_CLASSES as f64)).add(bce)?)
}

/// Symmetric chamfer distance between point sets `a [n, 2]` and `b [m, 2]`:
/// the mean of both directed mean nearest-neighbor distances.
pub fn chamfer<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let diff = a.reshape(&[n, 1, 2])?.sub(b.reshape(&[1, m, 2])?)?;
    let eps = T::of(DIST_EPS);
    let d = diff
        .square()
        .sum_axis(2, false)?
        .add_scalar(eps * eps)
        .sqrt()
        .add_scalar(-eps);
    let ab = d.min_axis(1, false)?.mean();
    let ba = d.min_axis(0, false)?.mean();
    Ok(ab.add(ba)?.mul_scalar(T::of(0.5)))
}

/// Plain chamfer distance between two curves, used for matching.
pub fn chamfer_plain(a: &BezierCurve, b: &BezierCurve, n: usize) -> f64 {
    let (pa, pb) = (a.sample(n), b.sample(n));
    let dir = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (dir(&pa, &pb) + dir(&pb, &pa))
}

/// Settings the curve term shares with the model.
#[derive(Clone, Copy, Debug)]
pub struct CurveLossConfig {
    pub sigma: f64,
    pub raster_samples: usize,
    pub mode: MinMode,
}

/// Curve term over every entry of `trace` (initial proposals first).
///
/// For each class with a ground-truth curve and each entry: chamfer distance
/// of the entry's most confident curve to the ground truth, soft-Dice of its
/// rasterized prior against the class mask, and BCE of the class's proposal
/// confidences against a one-hot target on the proposal that best matches the
/// ground truth at the initial entry. Classes without ground truth are skipped.
pub fn curve_loss<'g, T: Real>(
    g: &'g Graph<T>,
    trace: &[Proposals<'g, T>],
    gt: &[Option<BezierCurve>; NUM_CLASSES],
    mask: &[u8],
    h: usize,
    w: usize,
    cfg: CurveLossConfig,
) -> Result<Var<'g, T>> {
    let mut total = g.scalar(T::zero());
    let present: Vec<(usize, &BezierCurve)> = gt
        .iter()
        .enumerate()
        .filter_map(|(c, b)| b.as_ref().map(|b| (c, b)))
        .collect();
    if trace.is_empty() || present.is_empty() {
        return Ok(total);
    }
    let targets = class_targets::<T>(mask, h, w)?;
    let mut terms = 0usize;
    for &(cls, gt_curve) in &present {
        let first = &trace[0];
        let rows: Vec<usize> = first.class_rows(cls).collect();
        let dists: Vec<f64> = rows
            .iter()
            .map(|&r| -chamfer_plain(&first.curve(r), gt_curve, CHAMFER_SAMPLES))
            .collect();
        let matched = curve::top_k(&dists, 1)[0];
        let onehot = Tensor::from_fn(&[first.k], |i| T::of(f64::from(u8::from(i == matched))));
        let gt_pts = g.constant(Tensor::new(
            vec![CHAMFER_SAMPLES, 2],
            gt_curve
                .sample(CHAMFER_SAMPLES)
                .into_iter()
                .flatten()
                .map(T::of)
                .collect(),
        )?);
        let q = g.constant(Tensor::new(
            vec![h, w],
            targets.data()[cls * h * w..(cls + 1) * h * w].to_vec(),
        )?);
        for entry in trace {
            let row = entry.control.narrow(0, entry.top1(cls), 1)?;
            let pts = curve::sample_points(row, CHAMFER_SAMPLES)?;
            let ch = chamfer(pts, gt_pts)?;
            let raster_pts = curve::sample_points(row, cfg.raster_samples)?;
            let prior = curve::rasterize(raster_pts, h, w, cfg.sigma, cfg.mode)?;
            let dice = soft_dice(prior, q)?;
            let conf = entry.conf_logits.narrow(0, cls * entry.k, entry.k)?;
            let bce = bce_with_logits(conf, &onehot)?;
            total = total.add(ch)?.add(dice)?.add(bce)?;
            terms += 1;
        }
    }
    Ok(total.mul_scalar(T::of(1.0 / terms as f64)))
}

/// `mean|∂x L| / 2 + mean|∂y L| / 2 + mean|g − 1|` with forward differences.
pub fn illum_loss<'g, T: Real>(field: Var<'g, T>, gain: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = field.shape();
    if s.len() != 2 || gain.shape() != s {
        return Err(Error::Invalid(format!(
            "illum_loss expects matching [H,W] maps, got {s:?} and {:?}",
            gain.shape()
        )));
    }
    let (h, w) = (s[0], s[1]);
    let g = field.graph();
    let dx = if w > 1 {
        field
            .narrow(1, 1, w - 1)?
            .sub(field.narrow(1, 0, w - 1)?)?
            .abs()
            .mean()
    } else {
        g.scalar(T::zero())
    };
    let dy = if h > 1 {
        field
            .narrow(0, 1, h - 1)?
            .sub(field.narrow(0, 0, h - 1)?)?
            .abs()
            .mean()
    } else {
        g.scalar(T::zero())
    };
    let tv = dx.add(dy)?.mul_scalar(T::of(0.5));
    Ok(tv.add(gain.add_scalar(-T::one()).abs().mean())?)
}

#[derive(Clone, Copy)]
pub struct LossParts<'g, T: Real> {
    pub seg: Var<'g, T>,
    pub curve: Var<'g, T>,
    pub illum: Var<'g, T>,
}

/// Scalar values of each term, in log order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub seg: f64,
    pub curve: f64,
    pub illum: f64,
}

/// `seg + λ_curve·curve + λ_illum·illum`; a non-finite term is an error naming it.
pub fn total_loss<'g, T: Real>(
    parts: LossParts<'g, T>,
    w: LossWeights,
) -> Result<(Var<'g, T>, LossValues)> {
    let values = LossValues {
        seg: Real::to_f64(parts.seg.item()),
        curve: Real::to_f64(parts.curve.item()),
        illum: Real::to_f64(parts.illum.item()),
        total: 0.0,
    };
    for (term, value) in [
        ("seg", values.seg),
        ("curve", values.curve),
        ("illum", values.illum),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    let total = parts
        .seg
        .add(parts.curve.mul_scalar(T::of(w.curve)))?
        .add(parts.illum.mul_scalar(T::of(w.illum)))?;
    Ok((
        total,
        LossValues {
            total: combine(values.seg, values.curve, values.illum, w),
            ..values
        },
    ))
}

pub fn combine(seg: f64, curve: f64, illum: f64, w: LossWeights) -> f64 {
    seg + w.curve * curve + w.illum * illum
}
