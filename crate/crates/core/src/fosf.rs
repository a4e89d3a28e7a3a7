//! Frequency–orientation selective filtering.
//!
//! A one-channel guidance map is split into Haar sub-bands whose detail
//! magnitudes compete through a per-pixel softmax gate, and filtered by a fixed
//! Gabor bank whose responses are mixed by a second gate. The low band and the
//! selected orientation response are blended by a softmax pair, concatenated
//! with the input and the high-frequency map, projected back to `C` channels,
//! refined by channel-then-spatial attention and added to the input.

use std::f64::consts::PI;

use a2o_tensor::{Bound, Graph, Real, Tensor, Var};

use crate::nn::{self, Init};
use crate::{Error, Result};

pub const GABOR_SIZE: usize = 7;
pub const GABOR_WAVELENGTH: f64 = 4.0;
pub const GABOR_SIGMA: f64 = 2.0;
const ATTENTION_REDUCTION: usize = 4;
const SPATIAL_KERNEL: usize = 7;

/// One-level Haar decomposition of an `[H, W]` map; each band is `[⌈H/2⌉, ⌈W/2⌉]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor<f64>,
    pub lh: Tensor<f64>,
    pub hl: Tensor<f64>,
    pub hh: Tensor<f64>,
    /// Extent before any reflect padding.
    pub height: usize,
    pub width: usize,
}

/// Orthonormal Haar analysis on 2×2 tiles `(a b / c d)`:
/// `LL = (a+b+c+d)/2`, `LH = (a−b+c−d)/2`, `HL = (a+b−c−d)/2`, `HH = (a−b−c+d)/2`.
/// Odd extents are reflect-padded by one sample on the far side.
pub fn haar_dwt2(x: &Tensor<f64>) -> Result<SubbandSet> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!(
            "haar_dwt2 expects [H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let at = |y: usize, xx: usize| {
        let y = if y >= h {
            a2o_tensor::reflect_index(y as isize, h)
        } else {
            y
        };
        let xx = if xx >= w {
            a2o_tensor::reflect_index(xx as isize, w)
        } else {
            xx
        };
        x.data()[y * w + xx]
    };
    let mut bands = [
        vec![0.0; h2 * w2],
        vec![0.0; h2 * w2],
        vec![0.0; h2 * w2],
        vec![0.0; h2 * w2],
    ];
    for i in 0..h2 {
        for j in 0..w2 {
            let (a, b) = (at(2 * i, 2 * j), at(2 * i, 2 * j + 1));
            let (c, d) = (at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1));
            let k = i * w2 + j;
            bands[0][k] = (a + b + c + d) / 2.0;
            bands[1][k] = (a - b + c - d) / 2.0;
            bands[2][k] = (a + b - c - d) / 2.0;
            bands[3][k] = (a - b - c + d) / 2.0;
        }
    }
    let [ll, lh, hl, hh] = bands.map(|b| Tensor::new(vec![h2, w2], b).expect("band shape"));
    Ok(SubbandSet {
        ll,
        lh,
        hl,
        hh,
        height: h,
        width: w,
    })
}

/// Exact inverse of [`haar_dwt2`], cropping any padding.
pub fn haar_idwt2(s: &SubbandSet) -> Tensor<f64> {
    let (h2, w2) = (s.ll.shape()[0], s.ll.shape()[1]);
    let (h, w) = (s.height, s.width);
    let mut out = vec![0.0; h * w];
    let mut put = |y: usize, x: usize, v: f64| {
        if y < h && x < w {
            out[y * w + x] = v;
        }
    };
    for i in 0..h2 {
        for j in 0..w2 {
            let k = i * w2 + j;
            let (ll, lh, hl, hh) = (
                s.ll.data()[k],
                s.lh.data()[k],
                s.hl.data()[k],
                s.hh.data()[k],
            );
            put(2 * i, 2 * j, (ll + lh + hl + hh) / 2.0);
            put(2 * i, 2 * j + 1, (ll - lh + hl - hh) / 2.0);
            put(2 * i + 1, 2 * j, (ll + lh - hl - hh) / 2.0);
            put(2 * i + 1, 2 * j + 1, (ll - lh - hl + hh) / 2.0);
        }
    }
    Tensor::new(vec![h, w], out).expect("reconstruction shape")
}

/// Analysis filters `[4, 1, 2, 2]` in band order LL, LH, HL, HH.
fn haar_kernels<T: Real>() -> Tensor<T> {
    Tensor::from_f64(
        &[4, 1, 2, 2],
        &[
            0.5, 0.5, 0.5, 0.5, //
            0.5, -0.5, 0.5, -0.5, //
            0.5, 0.5, -0.5, -0.5, //
            0.5, -0.5, -0.5, 0.5,
        ],
    )
    .expect("haar kernel shape")
}

/// Differentiable Haar analysis of `[1, 1, H, W]` into `[1, 4, ⌈H/2⌉, ⌈W/2⌉]`.
pub fn haar_bands<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let x = if h % 2 == 1 || w % 2 == 1 {
        // reflect-pad then drop the near-side rows/cols so only the far side grows
        let padded = x.pad_reflect2d(1)?;
        let x = padded.narrow(2, 1, h + h % 2)?;
        x.narrow(3, 1, w + w % 2)?
    } else {
        x
    };
    let k = x.graph().constant(haar_kernels());
    Ok(x.conv2d(k, None, 2, 0)?)
}

/// Fixed Gabor kernels at orientations `jπ/T`, zero-mean and unit L2 norm.
#[derive(Clone, Debug)]
pub struct GaborBank {
    pub orientations: Vec<f64>,
    /// `[T, 1, size, size]`
    pub kernels: Tensor<f64>,
}

impl GaborBank {
    /// Kernel `j` is `exp(−(u² + v²)/2σ²)·cos(2πu/λ)` with `u = x cosθ + y sinθ`,
    /// where `x` runs along columns and `y` along rows. Orientation 0 therefore
    /// responds to vertical stripes.
    pub fn new(count: usize) -> Self {
        let n = GABOR_SIZE;
        let half = (n / 2) as f64;
        let orientations: Vec<f64> = (0..count).map(|j| j as f64 * PI / count as f64).collect();
        let mut data = Vec::with_capacity(count * n * n);
        for &theta in &orientations {
            let mut k: Vec<f64> = (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f64 - half, (i % n) as f64 - half);
                    let u = x * theta.cos() + y * theta.sin();
                    let v = -x * theta.sin() + y * theta.cos();
                    let env = (-(u * u + v * v) / (2.0 * GABOR_SIGMA * GABOR_SIGMA)).exp();
                    env * (2.0 * PI * u / GABOR_WAVELENGTH).cos()
                })
                .collect();
            let mean = k.iter().sum::<f64>() / k.len() as f64;
            k.iter_mut().for_each(|v| *v -= mean);
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.iter_mut().for_each(|v| *v /= norm);
            data.extend(k);
        }
        Self {
            orientations,
            kernels: Tensor::new(vec![count, 1, n, n], data).expect("gabor shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }

    /// Responses `[1, T, H, W]` of `x [1, 1, H, W]` with reflect padding.
    pub fn respond<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let k = x.graph().constant(self.kernels.cast());
        let padded = x.pad_reflect2d(GABOR_SIZE / 2)?;
        Ok(padded.conv2d(k, None, 1, 0)?)
    }
}

pub fn init_params(
    init: &mut Init<'_>,
    prefix: &str,
    channels: usize,
    orientations: usize,
) -> Result<()> {
    let hidden = (channels / ATTENTION_REDUCTION).max(1);
    init.conv(&format!("{prefix}.proj"), 1, channels, 1, false)?;
    init.conv(&format!("{prefix}.hf_gate"), 3, 3, 3, true)?;
    init.conv(
        &format!("{prefix}.ori_gate"),
        orientations,
        orientations,
        3,
        true,
    )?;
    init.conv(&format!("{prefix}.mix"), 2, 2, 3, true)?;
    init.conv(&format!("{prefix}.fuse"), channels, channels + 2, 1, false)?;
    init.conv(&format!("{prefix}.ca1"), hidden, channels, 1, true)?;
    init.conv(&format!("{prefix}.ca2"), channels, hidden, 1, true)?;
    init.conv(&format!("{prefix}.sa"), 1, 2, SPATIAL_KERNEL, true)
}

/// Softmax-gated combination `Σ_j w_j · x_j` over axis 1 of `[1, J, H, W]`.
fn gated_sum<'g, T: Real>(
    p: &Bound<'g, T>,
    gate: &str,
    x: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let weights = nn::conv(p, gate, x, 1, 1)?.softmax(1)?;
    Ok((weights.mul(x)?.sum_axis(1, true)?, weights))
}

/// High-frequency aggregation on `[1, 4, h, w]` Haar bands: a gate
/// over `(|LH|, |HL|, |HH|)` yields per-pixel softmax weights. Returns the
/// aggregated map `[1, 1, h, w]` and the weights `[1, 3, h, w]`.
pub fn aggregate_highfreq<'g, T: Real>(
    p: &Bound<'g, T>,
    prefix: &str,
    bands: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let details = bands.narrow(1, 1, 3)?.abs();
    gated_sum(p, &format!("{prefix}.hf_gate"), details)
}

/// Gabor responses of `xin [1, 1, H, W]` combined by a per-pixel softmax over
/// orientations. Returns `G_sel [1, 1, H, W]` and the weights `[1, T, H, W]`.
pub fn select_orientation<'g, T: Real>(
    p: &Bound<'g, T>,
    prefix: &str,
    bank: &GaborBank,
    xin: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let responses = bank.respond(xin)?;
    gated_sum(p, &format!("{prefix}.ori_gate"), responses)
}

/// Intermediate maps kept for inspection.
pub struct FosfMaps<'g, T: Real> {
    pub guidance: Var<'g, T>,
    pub highfreq: Var<'g, T>,
    pub selected: Var<'g, T>,
}

/// Applies one block to `features [1, C, H, W]`, returning the same shape.
pub fn fosf_forward<'g, T: Real>(
    p: &Bound<'g, T>,
    prefix: &str,
    bank: &GaborBank,
    features: Var<'g, T>,
) -> Result<(Var<'g, T>, FosfMaps<'g, T>)> {
    let g: &Graph<T> = features.graph();
    let s = features.shape();
    let expected = p.get(&format!("{prefix}.proj.w"))?.shape()[1];
    if s.len() != 4 || s[1] != expected {
        return Err(Error::Invalid(format!(
            "{prefix}: expected [1,{expected},H,W] features, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let up = |v: Var<'g, T>| -> Result<Var<'g, T>> {
        let vs = v.shape();
        let v = v.upsample_bilinear(2 * vs[2], 2 * vs[3])?;
        Ok(v.narrow(2, 0, h)?.narrow(3, 0, w)?)
    };

    let xin = nn::conv(p, &format!("{prefix}.proj"), features, 1, 0)?;
    let bands = haar_bands(xin)?;
    let (hf, _) = aggregate_highfreq(p, prefix, bands)?;
    let hf_up = up(hf)?;
    let ll_up = up(bands.narrow(1, 0, 1)?)?;
    let (selected, _) = select_orientation(p, prefix, bank, xin)?;

    let pair = g.concat(&[ll_up, selected], 1)?;
    let (context, _) = gated_sum(p, &format!("{prefix}.mix"), pair)?;
    let fused = g.concat(&[features, context, hf_up], 1)?;
    let z = nn::conv(p, &format!("{prefix}.fuse"), fused, 1, 0)?;

    // channel attention
    let c = s[1];
    let pooled = z
        .reshape(&[1, c, h * w])?
        .mean_axis(2, true)?
        .reshape(&[1, c, 1, 1])?;
    let a = nn::conv(p, &format!("{prefix}.ca1"), pooled, 1, 0)?.relu();
    let a = nn::conv(p, &format!("{prefix}.ca2"), a, 1, 0)?.sigmoid();
    let z = z.mul(a)?;
    // spatial attention
    let avg = z.mean_axis(1, true)?;
    let max = z.max_axis(1, true)?;
    let desc = g.concat(&[avg, max], 1)?;
    let m = nn::conv(p, &format!("{prefix}.sa"), desc, 1, SPATIAL_KERNEL / 2)?.sigmoid();
    let z = z.mul(m)?;

    let out = features.add(z)?;
    Ok((
        out,
        FosfMaps {
            guidance: xin,
            highfreq: hf_up,
            selected,
        },
    ))
}
