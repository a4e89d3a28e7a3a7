//! Quartic Bézier landmarks, anchor-based proposals and soft rasterization.
//!
//! Coordinates are normalized: `x` runs along columns and `y` along rows, both
//! in `[0, 1]`, and pixel `(i, j)` of an `H × W` grid sits at
//! `((j + 0.5)/W, (i + 0.5)/H)`.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use a2o_tensor::{Bound, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::nn::{self, Init};
use crate::{Error, Result};

/// Control points per curve.
pub const M: usize = 5;
pub const NUM_CLASSES: usize = 3;
pub const LOGIT_EPS: f64 = 1e-6;
/// Control-point logits are kept within `±logit(1 − LOGIT_EPS)` so repeated
/// updates cannot round a point onto the border of the unit square.
pub fn logit_bound() -> f64 {
    ((1.0 - LOGIT_EPS) / LOGIT_EPS).ln()
}
const EXP_FLOOR: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkClass {
    Ridge,
    Ligament,
    Silhouette,
}

impl LandmarkClass {
    pub const ALL: [LandmarkClass; NUM_CLASSES] = [Self::Ridge, Self::Ligament, Self::Silhouette];

    /// Zero-based index into logits and proposal tensors.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Value used in class-indexed masks, where 0 is background.
    pub fn mask_value(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ridge => "ridge",
            Self::Ligament => "ligament",
            Self::Silhouette => "silhouette",
        }
    }
}

impl fmt::Display for LandmarkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LandmarkClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown landmark class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    pub class: LandmarkClass,
    pub confidence: f64,
    pub control: [[f64; 2]; M],
}

/// Degree-4 Bernstein weights `C(4,m)·t^m·(1−t)^(4−m)`.
pub fn bernstein(t: f64) -> [f64; M] {
    let s = 1.0 - t;
    [
        s.powi(4),
        4.0 * t * s.powi(3),
        6.0 * t * t * s * s,
        4.0 * t.powi(3) * s,
        t.powi(4),
    ]
}

impl BezierCurve {
    pub fn new(class: LandmarkClass, control: [[f64; 2]; M]) -> Self {
        Self {
            class,
            confidence: 1.0,
            control,
        }
    }

    pub fn eval(&self, t: f64) -> [f64; 2] {
        let b = bernstein(t);
        let mut p = [0.0; 2];
        for (w, c) in b.iter().zip(&self.control) {
            p[0] += w * c[0];
            p[1] += w * c[1];
        }
        p
    }

    /// `n` points at uniformly spaced `t` including both endpoints.
    pub fn sample(&self, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| self.eval(t_at(i, n))).collect()
    }

    /// Flattened `(x0, y0, x1, y1, …)`.
    pub fn flat(&self) -> [f64; 2 * M] {
        let mut out = [0.0; 2 * M];
        for (m, c) in self.control.iter().enumerate() {
            out[2 * m] = c[0];
            out[2 * m + 1] = c[1];
        }
        out
    }

    pub fn from_flat(class: LandmarkClass, confidence: f64, flat: &[f64]) -> Self {
        let mut control = [[0.0; 2]; M];
        for (m, c) in control.iter_mut().enumerate() {
            *c = [flat[2 * m], flat[2 * m + 1]];
        }
        Self {
            class,
            confidence,
            control,
        }
    }
}

fn t_at(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// `[n, 5]` matrix whose rows are the Bernstein weights at uniform `t`.
pub fn bernstein_matrix<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, M], |i| T::of(bernstein(t_at(i / M, n))[i % M]))
}

/// Points `[n, 2]` on the curve with control `[5, 2]` (or flattened `[10]`).
pub fn sample_points<'g, T: Real>(control: Var<'g, T>, n: usize) -> Result<Var<'g, T>> {
    let c = control.reshape(&[M, 2])?;
    let b = control.graph().constant(bernstein_matrix(n));
    Ok(b.matmul(c)?)
}

/// Normalized pixel-center coordinates `[H·W, 2]` in row-major order.
pub fn pixel_centers<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (p, c) = (i / 2, i % 2);
        if c == 0 {
            T::of(((p % w) as f64 + 0.5) / w as f64)
        } else {
            T::of(((p / w) as f64 + 0.5) / h as f64)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MinMode {
    Hard,
    /// Softmax-weighted squared distance with weights `softmax(−d²/τ)`.
    Soft {
        tau: f64,
    },
}

impl MinMode {
    /// Training-time softmin for a raster bandwidth `sigma`.
    pub fn soft(sigma: f64) -> Self {
        Self::Soft {
            tau: sigma * sigma / 4.0,
        }
    }
}

/// Segments per bounding box used to prune distance queries.
const CHUNK: usize = 8;
/// Soft mode ignores candidates farther than the nearest by this many `τ`;
/// their weight is below `e^-30`.
const SOFT_CUTOFF: f64 = 30.0;

/// A local minimum of the distance along a polyline, see `Polyline::branches`.
struct Branch<T> {
    j: usize,
    e: T,
    t: T,
    persistence: T,
    /// Vertex that bounds the persistence; unused when it is infinite.
    saddle: usize,
}

/// Smoothstep of `p / δ` and its derivative in `p`.
fn ramp<T: Real>(p: T, delta: T) -> (T, T) {
    let u = p / delta;
    if u >= T::one() {
        return (T::one(), T::zero());
    }
    let (two, three, six) = (T::of(2.0), T::of(3.0), T::of(6.0));
    (u * u * (three - two * u), six * u * (T::one() - u) / delta)
}

/// The polyline through the curve samples, with per-chunk bounding boxes.
struct Polyline<'a, T> {
    pts: &'a [T],
    boxes: Vec<[T; 4]>,
    order: RefCell<Vec<(T, usize)>>,
}

impl<'a, T: Real> Polyline<'a, T> {
    fn new(pts: &'a [T]) -> Self {
        let segs = Self::count(pts);
        let boxes = (0..segs.div_ceil(CHUNK))
            .map(|c| {
                let mut b = [
                    T::infinity(),
                    T::infinity(),
                    T::neg_infinity(),
                    T::neg_infinity(),
                ];
                let last = ((c + 1) * CHUNK).min(segs);
                for k in c * CHUNK..=last.min(pts.len() / 2 - 1) {
                    let (x, y) = (pts[2 * k], pts[2 * k + 1]);
                    b = [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)];
                }
                b
            })
            .collect();
        Self {
            pts,
            boxes,
            order: RefCell::new(Vec::new()),
        }
    }

    fn count(pts: &[T]) -> usize {
        (pts.len() / 2).saturating_sub(1).max(1)
    }

    fn segments(&self) -> usize {
        Self::count(self.pts)
    }

    fn ends(&self, j: usize) -> (usize, usize) {
        (j, (j + 1).min(self.pts.len() / 2 - 1))
    }

    /// Squared distance from `(x, y)` to segment `j` and the clamped position
    /// `t ∈ [0, 1]` of the nearest point along it.
    fn seg_dist(&self, j: usize, x: T, y: T) -> (T, T) {
        let (a, b) = self.ends(j);
        let (ax, ay) = (self.pts[2 * a], self.pts[2 * a + 1]);
        let (ux, uy) = (self.pts[2 * b] - ax, self.pts[2 * b + 1] - ay);
        let len2 = ux * ux + uy * uy;
        let t = if len2 > T::zero() {
            (((x - ax) * ux + (y - ay) * uy) / len2)
                .max(T::zero())
                .min(T::one())
        } else {
            T::zero()
        };
        let (rx, ry) = (x - ax - t * ux, y - ay - t * uy);
        (rx * rx + ry * ry, t)
    }

    fn box_d2(&self, c: usize, x: T, y: T) -> T {
        let b = self.boxes[c];
        let dx = (b[0] - x).max(x - b[2]).max(T::zero());
        let dy = (b[1] - y).max(y - b[3]).max(T::zero());
        dx * dx + dy * dy
    }

    /// Calls `f(j, e_j, t_j)` for every segment with `e_j ≤ bound`, nearest
    /// chunks first, and returns the smallest `e_j` seen.
    fn visit(&self, x: T, y: T, mut bound: T, tighten: bool, mut f: impl FnMut(usize, T, T)) -> T {
        let mut order = self.order.borrow_mut();
        order.clear();
        order.extend(
            (0..self.boxes.len())
                .map(|c| (self.box_d2(c, x, y), c))
                .filter(|o| o.0 <= bound),
        );
        order.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
        });
        let mut best = T::infinity();
        for &(d2, c) in order.iter() {
            if d2 > bound {
                break;
            }
            for j in c * CHUNK..((c + 1) * CHUNK).min(self.segments()) {
                let (e, t) = self.seg_dist(j, x, y);
                if e <= bound {
                    f(j, e, t);
                }
                if e < best {
                    best = e;
                    if tighten {
                        bound = bound.min(e);
                    }
                }
            }
        }
        best
    }

    /// Index, squared distance and position of the nearest segment within
    /// `bound`; the distance is infinite when there is none.
    fn nearest(&self, x: T, y: T, bound: T) -> (usize, T, T) {
        let mut best = (0, T::infinity(), T::zero());
        self.visit(x, y, bound, true, |j, e, t| {
            if e < best.1 || (e == best.1 && j < best.0) {
                best = (j, e, t);
            }
        });
        best
    }

    /// Local minima of the distance along the polyline with `e_j ≤ bound`,
    /// written to `out` with their persistence. Each branch of the curve
    /// passing near the point contributes one entry, so the dense run of
    /// nearly equal distances around a foot point is not counted many times
    /// over. Walking from a minimum towards a lower one must climb over some
    /// vertex; the persistence is the least such climb and is infinite for the
    /// lowest minimum of each run of visited segments. Minima appear and vanish
    /// with zero persistence, which keeps weights built from it continuous.
    fn branches(
        &self,
        x: T,
        y: T,
        bound: T,
        buf: &mut Vec<(usize, T, T)>,
        out: &mut Vec<Branch<T>>,
    ) {
        buf.clear();
        out.clear();
        self.visit(x, y, bound, false, |j, e, t| buf.push((j, e, t)));
        buf.sort_by_key(|c| c.0);
        let n = buf.len();
        // components are runs of consecutive entries; a segment's distance never
        // exceeds that of its end vertices, so every merge follows both births
        let mut merges: Vec<(T, usize)> = (1..n)
            .filter(|&i| buf[i - 1].0 + 1 == buf[i].0)
            .map(|i| (self.vertex_d2(buf[i].0, x, y), i))
            .collect();
        merges.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
        });
        let mut parent: Vec<usize> = (0..n).collect();
        let mut pers = vec![(T::infinity(), usize::MAX); n];
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (v, i) in merges {
            let (ra, rb) = (root(&mut parent, i - 1), root(&mut parent, i));
            // roots are the minima of their components
            let key = |r: usize| (buf[r].1, r);
            let (keep, die) = if key(ra) <= key(rb) {
                (ra, rb)
            } else {
                (rb, ra)
            };
            pers[die] = (v - buf[die].1, buf[i].0);
            parent[die] = keep;
        }
        for (i, &(j, e, t)) in buf.iter().enumerate() {
            let (p, saddle) = pers[i];
            if p > T::zero() {
                out.push(Branch {
                    j,
                    e,
                    t,
                    persistence: p,
                    saddle,
                });
            }
        }
    }

    fn vertex_d2(&self, k: usize, x: T, y: T) -> T {
        let (dx, dy) = (x - self.pts[2 * k], y - self.pts[2 * k + 1]);
        dx * dx + dy * dy
    }

    /// Accumulates `g·∂e_j/∂(samples)` for segment `j` into `acc`.
    fn push_grad(&self, acc: &mut [T], j: usize, t: T, x: T, y: T, g: T) {
        let (a, b) = self.ends(j);
        let (ax, ay) = (self.pts[2 * a], self.pts[2 * a + 1]);
        let (ux, uy) = (self.pts[2 * b] - ax, self.pts[2 * b + 1] - ay);
        // t is optimal (or clamped), so ∂e/∂t drops out
        let two = T::of(2.0);
        let (rx, ry) = (x - ax - t * ux, y - ay - t * uy);
        let (wa, wb) = (T::one() - t, t);
        acc[2 * a] = acc[2 * a] - g * two * rx * wa;
        acc[2 * a + 1] = acc[2 * a + 1] - g * two * ry * wa;
        acc[2 * b] = acc[2 * b] - g * two * rx * wb;
        acc[2 * b + 1] = acc[2 * b + 1] - g * two * ry * wb;
    }
}

/// Squared distance from each pixel in `pixels [P, 2]` to the polyline through
/// `samples [n, 2]`, as `[P]`. Differentiable with respect to the samples.
///
/// Hard mode takes the exact minimum over segments. Soft mode returns
/// `Σ_j w_j·e_j / Σ_j w_j` over the local minima of the segment distances with
/// `w_j = e^{−e_j/τ}·r(p_j/τ)`, where `p_j` is the persistence of the minimum
/// and `r` a smoothstep. It equals the hard minimum wherever a single branch of
/// the curve is near and blends continuously where two branches compete.
///
/// Pixels farther than `cutoff` (squared) from every segment read `cutoff`
/// and carry no gradient; pass infinity for exact distances everywhere.
pub fn min_sq_dist<'g, T: Real>(
    pixels: &Tensor<T>,
    samples: Var<'g, T>,
    mode: MinMode,
    cutoff: f64,
) -> Result<Var<'g, T>> {
    let ps = pixels.shape();
    let ss = samples.shape();
    if ps.len() != 2 || ps[1] != 2 || ss.len() != 2 || ss[1] != 2 || ss[0] == 0 {
        return Err(Error::Invalid(format!(
            "min_sq_dist expects [P,2] pixels and [n,2] samples, got {ps:?} and {ss:?}"
        )));
    }
    let sv = samples.value();
    let np = ps[0];
    let px = pixels.data();
    let line = Polyline::new(sv.data());
    let mut out = Vec::with_capacity(np);
    let mut nearest = Vec::with_capacity(np);
    let (mut buf, mut cand) = (Vec::new(), Vec::new());
    let cutoff = T::of(cutoff);
    for p in 0..np {
        let (x, y) = (px[2 * p], px[2 * p + 1]);
        let (j, lo, t) = line.nearest(x, y, cutoff);
        nearest.push((j, lo, t));
        if lo > cutoff {
            out.push(cutoff);
            continue;
        }
        out.push(match mode {
            MinMode::Hard => lo,
            MinMode::Soft { tau } => {
                let tau = T::of(tau);
                line.branches(x, y, lo + T::of(SOFT_CUTOFF) * tau, &mut buf, &mut cand);
                let (mut z, mut s) = (T::zero(), T::zero());
                for c in &cand {
                    let w = (-(c.e - lo) / tau).exp() * ramp(c.persistence, tau).0;
                    z = z + w;
                    s = s + w * c.e;
                }
                s / z
            }
        });
    }
    let value = Tensor::new(vec![np], out.clone()).expect("distance shape");
    let pixels = pixels.clone();
    let sid = samples.id();
    Ok(samples.graph().custom(
        "min_sq_dist",
        &[samples],
        value,
        Box::new(move |gout, sink| {
            let Some(gs) = sink.acc(sid) else { return };
            let px = pixels.data();
            let line = Polyline::new(sv.data());
            let (mut buf, mut cand) = (Vec::new(), Vec::new());
            for p in 0..np {
                let (x, y) = (px[2 * p], px[2 * p + 1]);
                let (j, lo, t) = nearest[p];
                if lo > cutoff {
                    continue;
                }
                match mode {
                    MinMode::Hard => line.push_grad(gs, j, t, x, y, gout[p]),
                    MinMode::Soft { tau } => {
                        // weights are recomputed rather than kept alive on the tape
                        let tau = T::of(tau);
                        let s = out[p];
                        line.branches(x, y, lo + T::of(SOFT_CUTOFF) * tau, &mut buf, &mut cand);
                        let z = cand.iter().fold(T::zero(), |z, c| {
                            z + (-(c.e - lo) / tau).exp() * ramp(c.persistence, tau).0
                        });
                        for c in &cand {
                            let a = (-(c.e - lo) / tau).exp() / z;
                            let (f, df) = ramp(c.persistence, tau);
                            // persistence is the saddle distance minus e
                            let gp = gout[p] * a * df * (c.e - s);
                            let ge = gout[p] * a * f * (T::one() - (c.e - s) / tau) - gp;
                            line.push_grad(gs, c.j, c.t, x, y, ge);
                            if gp != T::zero() {
                                let k = c.saddle;
                                let two = T::of(2.0);
                                gs[2 * k] = gs[2 * k] + gp * two * (line.pts[2 * k] - x);
                                gs[2 * k + 1] =
                                    gs[2 * k + 1] + gp * two * (line.pts[2 * k + 1] - y);
                            }
                        }
                    }
                }
            }
        }),
    ))
}

/// Prior map `P = exp(−d²/2σ²)` of curve samples `[n, 2]` on an `h × w` grid,
/// returned as `[h, w]`. The exponent is floored at `−80` so `P` stays
/// representable and strictly positive in 32-bit floats.
pub fn rasterize<'g, T: Real>(
    samples: Var<'g, T>,
    h: usize,
    w: usize,
    sigma: f64,
    mode: MinMode,
) -> Result<Var<'g, T>> {
    // beyond the exponent floor the distance no longer matters
    let cutoff = 2.0 * sigma * sigma * EXP_FLOOR;
    let d2 = min_sq_dist(&pixel_centers(h, w), samples, mode, cutoff)?;
    let z = d2
        .mul_scalar(T::of(-1.0 / (2.0 * sigma * sigma)))
        .clamp(T::of(-EXP_FLOOR), T::zero());
    Ok(z.exp().reshape(&[h, w])?)
}

/// Hard-min prior map of a concrete curve.
pub fn soft_rasterize(
    curve: &BezierCurve,
    h: usize,
    w: usize,
    sigma: f64,
    n_samples: usize,
) -> Tensor<f64> {
    let pts: Vec<f64> = curve.sample(n_samples).into_iter().flatten().collect();
    let line = Polyline::new(&pts);
    let centers = pixel_centers::<f64>(h, w);
    let c = centers.data();
    let data = (0..h * w)
        .map(|p| {
            (-line.nearest(c[2 * p], c[2 * p + 1], f64::INFINITY).1 / (2.0 * sigma * sigma))
                .max(-EXP_FLOOR)
                .exp()
        })
        .collect();
    Tensor::new(vec![h, w], data).expect("raster shape")
}

/// Minimum of `‖x − C(t)‖` over `n` uniform `t`; a reference for tests.
pub fn curve_min_distance_bruteforce(curve: &BezierCurve, x: [f64; 2], n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let p = curve.eval(t_at(i, n));
            ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Pixels whose center lies within `radius` pixels of the curve, measured in
/// pixel units. Samples the curve densely enough that the gaps between
/// samples stay far below a pixel.
pub fn thick_mask(curve: &BezierCurve, h: usize, w: usize, radius: f64) -> Vec<bool> {
    let n = 64 * (h.max(w)).max(16);
    let r2 = radius * radius;
    let mut mask = vec![false; h * w];
    // stamp a disk around every dense sample
    for p in curve.sample(n) {
        let (sx, sy) = (p[0] * w as f64, p[1] * h as f64);
        let i0 = (sy - radius - 1.0).floor().max(0.0) as usize;
        let i1 = ((sy + radius + 1.0).ceil().max(0.0) as usize).min(h);
        let j0 = (sx - radius - 1.0).floor().max(0.0) as usize;
        let j1 = ((sx + radius + 1.0).ceil().max(0.0) as usize).min(w);
        for i in i0..i1 {
            for j in j0..j1 {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                if (x - sx).powi(2) + (y - sy).powi(2) <= r2 {
                    mask[i * w + j] = true;
                }
            }
        }
    }
    mask
}

/// Proposal head: for each class, one confidence logit and `2M` offsets.
pub fn init_proposer(init: &mut Init<'_>, channels: usize) -> Result<()> {
    init.conv("prop.head", NUM_CLASSES * (1 + 2 * M), channels, 3, true)
}

/// Anchor `((j + 0.5)/w, (i + 0.5)/h)` of cell `(i, j)`.
pub fn anchor(i: usize, j: usize, h: usize, w: usize) -> [f64; 2] {
    [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]
}

/// Indices of the `k` largest scores, descending, ties broken by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Differentiable curve proposals for all classes, `K` per class in
/// class-major order.
#[derive(Clone, Copy)]
pub struct Proposals<'g, T: Real> {
    /// `[3K, 10]` control points in `(0, 1)`.
    pub control: Var<'g, T>,
    /// `[3K, 10]` logits of `control`; refinement stages update these so a
    /// zero offset leaves the points bit-for-bit unchanged.
    pub logits: Var<'g, T>,
    /// `[3K]` confidence logits.
    pub conf_logits: Var<'g, T>,
    pub k: usize,
}

impl<'g, T: Real> Proposals<'g, T> {
    /// Logits are clamped to [`logit_bound`] before use.
    pub fn from_logits(logits: Var<'g, T>, conf_logits: Var<'g, T>, k: usize) -> Self {
        let b = T::of(logit_bound());
        let logits = logits.clamp(-b, b);
        Self {
            control: logits.sigmoid(),
            logits,
            conf_logits,
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.k * NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn class_rows(&self, class: usize) -> std::ops::Range<usize> {
        class * self.k..(class + 1) * self.k
    }

    /// Row of the most confident proposal of `class`; ties go to the lower row.
    pub fn top1(&self, class: usize) -> usize {
        let v = self.conf_logits.value();
        let scores: Vec<f64> = v.data()[self.class_rows(class)]
            .iter()
            .map(|&x| Real::to_f64(x))
            .collect();
        class * self.k + top_k(&scores, 1)[0]
    }

    pub fn curve(&self, row: usize) -> BezierCurve {
        let c = self.control.value();
        let flat: Vec<f64> = c.data()[row * 2 * M..(row + 1) * 2 * M]
            .iter()
            .map(|&x| Real::to_f64(x))
            .collect();
        let conf = sigmoid(Real::to_f64(self.conf_logits.value().data()[row]));
        let class = LandmarkClass::from_index(row / self.k).expect("row within classes");
        BezierCurve::from_flat(class, conf, &flat)
    }

    /// All proposals of every class, each class sorted by descending confidence.
    pub fn curves(&self) -> Vec<BezierCurve> {
        let mut out = Vec::with_capacity(NUM_CLASSES * self.k);
        for c in 0..NUM_CLASSES {
            let cls: Vec<BezierCurve> = self.class_rows(c).map(|r| self.curve(r)).collect();
            let scores: Vec<f64> = cls.iter().map(|b| b.confidence).collect();
            out.extend(
                top_k(&scores, cls.len())
                    .into_iter()
                    .map(|i| cls[i].clone()),
            );
        }
        out
    }

    /// The selected curve per class.
    pub fn selected(&self) -> Vec<BezierCurve> {
        (0..NUM_CLASSES).map(|c| self.curve(self.top1(c))).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Seeds `K` proposals per class from the cells of `feature [1, C, h, w]`.
pub fn propose_curves<'g, T: Real>(
    p: &Bound<'g, T>,
    feature: Var<'g, T>,
    k: usize,
) -> Result<Proposals<'g, T>> {
    let s = feature.shape();
    let (h, w) = (s[2], s[3]);
    if h * w < k {
        return Err(Error::Config(format!(
            "{k} proposals requested from a {h}x{w} grid with only {} cells; reduce K",
            h * w
        )));
    }
    let g = feature.graph();
    let per = 1 + 2 * M;
    let head = nn::conv(p, "prop.head", feature, 1, 1)?;
    // rows are cells, columns are class-major (confidence, offsets)
    let cells = head
        .reshape(&[NUM_CLASSES * per, h * w])?
        .permute(&[1, 0])?;
    let hv = head.value();
    let mut controls = Vec::with_capacity(NUM_CLASSES);
    let mut confs = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let logits = &hv.data()[c * per * h * w..(c * per + 1) * h * w];
        let scores: Vec<f64> = logits.iter().map(|&v| sigmoid(Real::to_f64(v))).collect();
        let pick = top_k(&scores, k);
        let rows = cells.index_select(&pick)?;
        confs.push(rows.narrow(1, c * per, 1)?.reshape(&[k])?);
        let delta = rows.narrow(1, c * per + 1, 2 * M)?;
        let anchors = Tensor::from_fn(&[k, 2 * M], |i| {
            let cell = pick[i / (2 * M)];
            T::of(anchor(cell / w, cell % w, h, w)[i % 2])
        });
        let base = g.constant(anchors).logit_clamped(T::of(LOGIT_EPS));
        controls.push(base.add(delta)?);
    }
    let logits = g.concat(&controls, 0)?;
    Ok(Proposals {
        control: logits.sigmoid(),
        logits,
        conf_logits: g.concat(&confs, 0)?,
        k,
    })
}
