use std::sync::Arc;

use crate::{Real, Result, Tensor, TensorError, Var};

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// d(pixel coordinate)/d(normalized coordinate); zero when clamped.
    jx: T,
    jy: T,
}

fn tap<T: Real>(p: T, n: usize) -> (usize, usize, T, T) {
    if n == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let span = T::of((n - 1) as f64);
    let inside = p >= T::zero() && p <= T::one();
    let c = p.max(T::zero()).min(T::one()) * span;
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 2);
    let f = c - T::of(i0 as f64);
    (i0, i0 + 1, f, if inside { span } else { T::zero() })
}

impl<'g, T: Real> Var<'g, T> {
    /// Samples `[C,H,W]` at `[Q,2]` points given as normalized `(x, y)` in the
    /// unit square, mapped to pixel coordinates `p * (extent - 1)`. Points
    /// outside are clamped to the border. Returns `[Q,C]`.
    pub fn bilinear_sample(self, points: Var<'g, T>) -> Result<Var<'g, T>> {
        let f = self.value();
        let pts = points.value();
        let (fs, ps) = (f.shape(), pts.shape());
        if fs.len() != 3 {
            return Err(TensorError::shape(
                "bilinear_sample",
                format!("feature must be [C,H,W], got {fs:?}"),
            ));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(TensorError::shape(
                "bilinear_sample",
                format!("points must be [Q,2], got {ps:?}"),
            ));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let q = ps[0];
        let taps: Vec<Tap<T>> = pts
            .data()
            .chunks(2)
            .map(|p| {
                let (x0, x1, fx, jx) = tap(p[0], w);
                let (y0, y1, fy, jy) = tap(p[1], h);
                Tap {
                    x0,
                    x1,
                    y0,
                    y1,
                    fx,
                    fy,
                    jx,
                    jy,
                }
            })
            .collect();
        let fd = f.data();
        let mut out = vec![T::zero(); q * c];
        for (qi, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let plane = &fd[ch * h * w..(ch + 1) * h * w];
                let top =
                    plane[t.y0 * w + t.x0] * (T::one() - t.fx) + plane[t.y0 * w + t.x1] * t.fx;
                let bot =
                    plane[t.y1 * w + t.x0] * (T::one() - t.fx) + plane[t.y1 * w + t.x1] * t.fx;
                out[qi * c + ch] = top * (T::one() - t.fy) + bot * t.fy;
            }
        }
        let (fid, pid) = (self.id(), points.id());
        Ok(self.graph().push(
            "bilinear_sample",
            &[self, points],
            Arc::new(Tensor::from_parts(vec![q, c], out)),
            Box::new(move |g, sink| {
                let fd = f.data();
                if let Some(gf) = sink.acc(fid) {
                    for (qi, t) in taps.iter().enumerate() {
                        for ch in 0..c {
                            let gv = g[qi * c + ch];
                            let base = ch * h * w;
                            let (a, b) = (gv * (T::one() - t.fy), gv * t.fy);
                            gf[base + t.y0 * w + t.x0] =
                                gf[base + t.y0 * w + t.x0] + a * (T::one() - t.fx);
                            gf[base + t.y0 * w + t.x1] = gf[base + t.y0 * w + t.x1] + a * t.fx;
                            gf[base + t.y1 * w + t.x0] =
                                gf[base + t.y1 * w + t.x0] + b * (T::one() - t.fx);
                            gf[base + t.y1 * w + t.x1] = gf[base + t.y1 * w + t.x1] + b * t.fx;
                        }
                    }
                }
                if let Some(gp) = sink.acc(pid) {
                    for (qi, t) in taps.iter().enumerate() {
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let plane = &fd[ch * h * w..(ch + 1) * h * w];
                            let (v00, v01) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                            let (v10, v11) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                            let gv = g[qi * c + ch];
                            dx = dx + gv * ((v01 - v00) * (T::one() - t.fy) + (v11 - v10) * t.fy);
                            dy = dy + gv * ((v10 - v00) * (T::one() - t.fx) + (v11 - v01) * t.fx);
                        }
                        gp[qi * 2] = gp[qi * 2] + dx * t.jx;
                        gp[qi * 2 + 1] = gp[qi * 2 + 1] + dy * t.jy;
                    }
                }
            }),
        ))
    }
}
