//! Illumination field compensation.
//!
//! The channel-wise maximum is compressed by a learnable sine-power curve,
//! stacked with pixel coordinates, and regressed to a smooth positive field
//! `L`. The image is then rescaled by a residual gain
//! `g = clamp(1 + α·(I_max / (L + ε) / (I_max + ε) − 1), 0.5, 4)`.
//!
//! `k` is stored as `exp(ifc.k_raw)` and `α` as `sigmoid(ifc.alpha_raw)`.

use std::f64::consts::PI;

use a2o_tensor::{Bound, Graph, Real, Tensor, Var};

use crate::nn::{self, Init};
use crate::{Error, Result};

pub const GAIN_MIN: f64 = 0.5;
pub const GAIN_MAX: f64 = 4.0;
pub const FIELD_MAX: f64 = 2.0;
pub const EPS: f64 = 1e-6;
/// The field estimator runs at `1 / POOL` resolution.
pub const POOL: usize = 8;
const HIDDEN: usize = 8;

pub fn init_params(init: &mut Init<'_>) -> Result<()> {
    init.scalar("ifc.k_raw", 0.0)?;
    init.scalar("ifc.alpha_raw", 0.0)?;
    init.conv("ifc.est.c1", HIDDEN, 4, 3, true)?;
    init.conv("ifc.est.c2", HIDDEN, HIDDEN, 3, true)?;
    init.conv("ifc.est.head", 1, HIDDEN, 1, true)
}

/// Per-pixel maximum over the channel axis of `[3, H, W]`, giving `[H, W]`.
pub fn channel_max<'g, T: Real>(img: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = img.shape();
    let img = if s.len() == 4 {
        nn::squeeze0(img)?
    } else {
        img
    };
    Ok(img.max_axis(0, false)?)
}

/// `(sin(π·imax/2) + eps)^(1/k)`.
pub fn intensity_collapse<'g, T: Real>(
    imax: Var<'g, T>,
    k: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    if k.value().data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::Invalid(format!(
            "intensity collapse needs k > 0, got {}",
            k.item()
        )));
    }
    let base = imax
        .mul_scalar(T::of(PI / 2.0))
        .sin()
        .add_scalar(T::of(eps));
    Ok(base.ln().div(k)?.exp())
}

/// `[3, H, W]` planes `(x, y, r)`: normalized pixel-center coordinates and the
/// distance to the image center scaled so the corners sit at `r = 1`.
pub fn coord_stack<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let xy = nn::coord_planes::<f64>(h, w);
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        if c < 2 {
            T::of(xy.data()[c * plane + p])
        } else {
            let dx = xy.data()[p] - 0.5;
            let dy = xy.data()[plane + p] - 0.5;
            T::of(((dx * dx + dy * dy) / 0.5).sqrt())
        }
    })
}

/// Regresses `L` from the collapsed intensity `[H, W]` and `coords [3, H, W]`.
/// Output is `[H, W]` in `(0, 2]`, built at `1/8` resolution and bilinearly
/// upsampled so it carries no detail finer than the pooling cell.
pub fn estimate_field<'g, T: Real>(
    p: &Bound<'g, T>,
    icol: Var<'g, T>,
    coords: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let g = icol.graph();
    let s = icol.shape();
    let (h, w) = (s[0], s[1]);
    let pool = if h % POOL == 0 && w % POOL == 0 {
        POOL
    } else {
        1
    };
    let icol = icol.reshape(&[1, h, w])?;
    let stack = g.concat(&[icol, coords], 0)?.reshape(&[1, 4, h, w])?;
    let low = stack.avg_pool2d(pool)?;
    let x = nn::conv_relu(p, "ifc.est.c1", low)?;
    let x = nn::conv_relu(p, "ifc.est.c2", x)?;
    let z = nn::conv(p, "ifc.est.head", x, 1, 0)?;
    let z = z.upsample_bilinear(h, w)?.clamp(T::of(-30.0), T::of(30.0));
    Ok(z.sigmoid().mul_scalar(T::of(FIELD_MAX)).reshape(&[h, w])?)
}

pub struct Compensation<'g, T: Real> {
    /// `[1, 3, H, W]`
    pub image: Var<'g, T>,
    /// `[H, W]`
    pub field: Var<'g, T>,
    /// `[H, W]`
    pub gain: Var<'g, T>,
}

/// Applies the gain pipeline for a given field, `k` and `alpha`.
pub fn compensate_with<'g, T: Real>(
    img: Var<'g, T>,
    field: Var<'g, T>,
    alpha: Var<'g, T>,
) -> Result<Compensation<'g, T>> {
    let imax = channel_max(img)?;
    let eps = T::of(EPS);
    let norm = imax.div(field.add_scalar(eps))?;
    let raw = norm.div(imax.add_scalar(eps))?;
    let gain = raw
        .add_scalar(-T::one())
        .mul(alpha)?
        .add_scalar(T::one())
        .clamp(T::of(GAIN_MIN), T::of(GAIN_MAX));
    let s = gain.shape();
    let image = img
        .mul(gain.reshape(&[1, 1, s[0], s[1]])?)?
        .clamp(T::zero(), T::one());
    Ok(Compensation { image, field, gain })
}

/// Full block on `img [1, 3, H, W]` using the bound `ifc.*` parameters.
pub fn compensate<'g, T: Real>(p: &Bound<'g, T>, img: Var<'g, T>) -> Result<Compensation<'g, T>> {
    let g = img.graph();
    let s = img.shape();
    let (h, w) = (s[2], s[3]);
    let k = p.get("ifc.k_raw")?.exp();
    let alpha = p.get("ifc.alpha_raw")?.sigmoid();
    let imax = channel_max(img)?;
    let icol = intensity_collapse(imax, k, EPS)?;
    let coords = g.constant(coord_stack(h, w));
    let field = estimate_field(p, icol, coords)?;
    compensate_with(img, field, alpha)
}

/// Pass-through used when the block is ablated: unit field and unit gain.
pub fn bypass<'g, T: Real>(g: &'g Graph<T>, img: Var<'g, T>) -> Compensation<'g, T> {
    let s = img.shape();
    let (h, w) = (s[2], s[3]);
    Compensation {
        image: img,
        field: nn::constant_like(g, &[h, w], 1.0),
        gain: nn::constant_like(g, &[h, w], 1.0),
    }
}
