//! Convolution, pooling and resampling over `[.., H, W]` planes.

use std::sync::Arc;

use crate::{Real, Result, Tensor, TensorError, Var};

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one image `[C,H,W]` into `[C*kh*kw, oh*ow]`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns back into `[C,H,W]`.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Bilinear interpolation taps along one axis with half-pixel centers.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'g, T: Real> Var<'g, T> {
    /// 2-D cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]` and optional bias `[O]`,
    /// zero padding on all sides.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input must be [N,C,H,W], got {xs:?}"),
            ));
        }
        if ws.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight must be [O,C,kh,kw], got {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "input channels (dim 1) = {} but weight expects {}",
                    xs[1], ws[1]
                ),
            ));
        }
        let (n, o) = (xs[0], ws[0]);
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if kh > h + 2 * padding {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "kernel height {kh} exceeds padded input height {}",
                    h + 2 * padding
                ),
            ));
        }
        if kw > wd + 2 * padding {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "kernel width {kw} exceeds padded input width {}",
                    wd + 2 * padding
                ),
            ));
        }
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [o] {
                    return Err(TensorError::shape(
                        "conv2d",
                        format!("bias must be [{o}], got {:?}", bv.shape()),
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = Arc::new(ConvGeom {
            c: xs[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        });
        let (k, p) = (geom.patch(), geom.positions());
        let in_plane = geom.c * h * wd;
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for s in 0..n {
            let xin = &x.data()[s * in_plane..(s + 1) * in_plane];
            let colref: &[T] = if geom.is_pointwise() {
                xin
            } else {
                geom.im2col(xin, &mut cols);
                &cols
            };
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            if let Some(b) = &bias_val {
                for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
            }
            let beta = if bias_val.is_some() {
                T::one()
            } else {
                T::zero()
            };
            T::gemm(
                o,
                k,
                p,
                T::one(),
                w.data(),
                k as isize,
                1,
                colref,
                p as isize,
                1,
                beta,
                dst,
                p as isize,
                1,
            );
        }
        let out = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
        let (xid, wid, bid) = (self.id(), weight.id(), bias.map(|b| b.id()));
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.graph().push(
            "conv2d",
            &parents,
            Arc::new(out),
            Box::new(move |g, sink| {
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); k * p]
                };
                let want_x = sink.wants(xid);
                let mut dcols = if want_x && !geom.is_pointwise() {
                    vec![T::zero(); k * p]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    let gout = &g[s * o * p..(s + 1) * o * p];
                    if let Some(bid) = bid {
                        if let Some(gb) = sink.acc(bid) {
                            for (oc, chunk) in gout.chunks(p).enumerate() {
                                gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if sink.wants(wid) {
                        let xin = &x.data()[s * in_plane..(s + 1) * in_plane];
                        let colref: &[T] = if geom.is_pointwise() {
                            xin
                        } else {
                            geom.im2col(xin, &mut cols);
                            &cols
                        };
                        let gw = sink.acc(wid).expect("weight gradient");
                        // dW[o,k] += gout[o,p] * cols[k,p]^T
                        T::gemm(
                            o,
                            p,
                            k,
                            T::one(),
                            gout,
                            p as isize,
                            1,
                            colref,
                            1,
                            p as isize,
                            T::one(),
                            gw,
                            k as isize,
                            1,
                        );
                    }
                    if want_x {
                        let gx = sink.acc(xid).expect("input gradient");
                        let gxs = &mut gx[s * in_plane..(s + 1) * in_plane];
                        if geom.is_pointwise() {
                            // dX[k,p] += W^T[k,o] * gout[o,p]
                            T::gemm(
                                k,
                                o,
                                p,
                                T::one(),
                                w.data(),
                                1,
                                k as isize,
                                gout,
                                p as isize,
                                1,
                                T::one(),
                                gxs,
                                p as isize,
                                1,
                            );
                        } else {
                            T::gemm(
                                k,
                                o,
                                p,
                                T::one(),
                                w.data(),
                                1,
                                k as isize,
                                gout,
                                p as isize,
                                1,
                                T::zero(),
                                &mut dcols,
                                p as isize,
                                1,
                            );
                            geom.col2im(&dcols, gxs);
                        }
                    }
                }
            }),
        ))
    }

    /// Non-overlapping `factor × factor` average pooling of the last two axes.
    pub fn avg_pool2d(self, factor: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        if r < 2
            || factor == 0
            || !shape[r - 2].is_multiple_of(factor)
            || !shape[r - 1].is_multiple_of(factor)
        {
            return Err(TensorError::shape(
                "avg_pool2d",
                format!("spatial extents of {shape:?} must be divisible by {factor}"),
            ));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / factor, w / factor);
        let planes = x.len() / (h * w);
        let scale = T::one() / T::of((factor * factor) as f64);
        let mut out = vec![T::zero(); planes * oh * ow];
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    let d = (y / factor) * ow + xx / factor;
                    dst[d] = dst[d] + src[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v = *v * scale;
            }
        }
        let mut oshape = shape.clone();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        let xid = self.id();
        Ok(self.graph().push(
            "avg_pool2d",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for pl in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                let d = pl * oh * ow + (y / factor) * ow + xx / factor;
                                let s = pl * h * w + y * w + xx;
                                gx[s] = gx[s] + g[d] * scale;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Bilinear resize of the last two axes to `out_h × out_w` (half-pixel
    /// centers, edge clamped).
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        if r < 2 || out_h == 0 || out_w == 0 {
            return Err(TensorError::shape(
                "upsample_bilinear",
                format!("cannot resize {shape:?} to {out_h}x{out_w}"),
            ));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = x.len() / (h * w);
        let ty: Vec<(usize, usize, T)> = resize_taps(h, out_h)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::of(f)))
            .collect();
        let tx: Vec<(usize, usize, T)> = resize_taps(w, out_w)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::of(f)))
            .collect();
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[r - 2] = out_h;
        oshape[r - 1] = out_w;
        let xid = self.id();
        Ok(self.graph().push(
            "upsample_bilinear",
            &[self],
            Arc::new(Tensor::from_parts(oshape, out)),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.acc(xid) {
                    for pl in 0..planes {
                        let gs = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                        let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gs[oy * out_w + ox];
                                let (a, b) = (gv * (T::one() - fy), gv * fy);
                                dst[y0 * w + x0] = dst[y0 * w + x0] + a * (T::one() - fx);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + a * fx;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + b * (T::one() - fx);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + b * fx;
                            }
                        }
                    }
                }
            }),
        ))
    }
}
