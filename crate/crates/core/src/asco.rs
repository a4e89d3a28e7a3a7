//! Alternating segmentation and curve refinement.
//!
//! Each decoder stage injects the rasterized curves of the previous stage into
//! its features through cross-attention, then samples those features along
//! every curve to predict control-point offsets in logit space.

use a2o_tensor::{Bound, Real, Tensor, Var};

use crate::curve::{self, MinMode, Proposals, M, NUM_CLASSES};
use crate::nn::{self, Init};
use crate::{Error, Result};

/// Width of the attention projections.
pub const ATTN_DIM: usize = 16;
/// Keys and values are pooled to at most this many tokens per side.
pub const TOKEN_GRID: usize = 8;
/// Points sampled along each curve during refinement.
pub const REFINE_POINTS: usize = 32;
pub const REFINE_HIDDEN: usize = 32;

pub fn init_c2m(init: &mut Init<'_>, prefix: &str, channels: usize) -> Result<()> {
    let tok = NUM_CLASSES + 2;
    init.conv(&format!("{prefix}.q"), ATTN_DIM, channels, 1, false)?;
    init.conv(&format!("{prefix}.k"), ATTN_DIM, tok, 1, false)?;
    init.conv(&format!("{prefix}.v"), ATTN_DIM, tok, 1, false)?;
    init.conv_zero(&format!("{prefix}.o"), channels, ATTN_DIM, 1, true)
}

/// Length of the per-curve embedding fed to the refinement head: mean sampled
/// features, mean sampled point, current control points and class one-hot.
pub fn embedding_len(channels: usize) -> usize {
    channels + 2 + 2 * M + NUM_CLASSES
}

pub fn init_refine(init: &mut Init<'_>, prefix: &str, channels: usize) -> Result<()> {
    init.linear(
        &format!("{prefix}.fc1"),
        embedding_len(channels),
        REFINE_HIDDEN,
    )?;
    init.linear_zero(&format!("{prefix}.fc2"), REFINE_HIDDEN, 2 * M + 1)
}

/// `[1, 2, H, W]` normalized pixel-center coordinates.
fn coord_var<'g, T: Real>(f: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    Ok(f.graph()
        .constant(nn::coord_planes::<T>(h, w))
        .reshape(&[1, 2, h, w])?)
}

/// `[1, C, H, W]` → `[H·W, C]`.
fn tokens<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    Ok(x.reshape(&[s[1], s[2] * s[3]])?.permute(&[1, 0])?)
}

/// Cross-attention from decoder pixels to a pooled grid of prior tokens,
/// residual-added to `features [1, C, H, W]`. `priors` is `[1, 3, H, W]`.
pub fn c2m_fuse<'g, T: Real>(
    p: &Bound<'g, T>,
    prefix: &str,
    features: Var<'g, T>,
    priors: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (fs, ps) = (features.shape(), priors.shape());
    if fs.len() != 4 || ps.len() != 4 || fs[2..] != ps[2..] || ps[1] != NUM_CLASSES {
        return Err(Error::Invalid(format!(
            "{prefix}: priors {ps:?} do not match features {fs:?}"
        )));
    }
    let g = features.graph();
    let (c, h, w) = (fs[1], fs[2], fs[3]);
    let stack = g.concat(&[priors, coord_var(features, h, w)?], 1)?;
    let factor = if h > TOKEN_GRID
        && h % TOKEN_GRID == 0
        && w % TOKEN_GRID == 0
        && h / TOKEN_GRID == w / TOKEN_GRID
    {
        h / TOKEN_GRID
    } else {
        1
    };
    let pooled = if factor > 1 {
        stack.avg_pool2d(factor)?
    } else {
        stack
    };

    let q = tokens(nn::conv(p, &format!("{prefix}.q"), features, 1, 0)?)?;
    let k = tokens(nn::conv(p, &format!("{prefix}.k"), pooled, 1, 0)?)?;
    let v = tokens(nn::conv(p, &format!("{prefix}.v"), pooled, 1, 0)?)?;
    let scale = T::of(1.0 / (ATTN_DIM as f64).sqrt());
    let attn = q
        .matmul(k.permute(&[1, 0])?)?
        .mul_scalar(scale)
        .softmax(1)?;
    let ctx = attn
        .matmul(v)?
        .permute(&[1, 0])?
        .reshape(&[1, ATTN_DIM, h, w])?;
    let out = nn::conv(p, &format!("{prefix}.o"), ctx, 1, 0)?;
    debug_assert_eq!(out.shape()[1], c);
    Ok(features.add(out)?)
}

/// One refinement step of every curve in `curves` against `features [1, C, H, W]`.
pub fn refine_stage<'g, T: Real>(
    p: &Bound<'g, T>,
    prefix: &str,
    features: Var<'g, T>,
    curves: &Proposals<'g, T>,
) -> Result<Proposals<'g, T>> {
    let g = features.graph();
    let c = features.shape()[1];
    let n = curves.len();
    let q = REFINE_POINTS;
    // [Q, 5] × [5, N·2] gives every curve's samples at once
    let ctrl = curves
        .control
        .reshape(&[n, M, 2])?
        .permute(&[1, 0, 2])?
        .reshape(&[M, n * 2])?;
    let pts = g
        .constant(curve::bernstein_matrix(q))
        .matmul(ctrl)?
        .reshape(&[q, n, 2])?
        .permute(&[1, 0, 2])?;
    let sampled = nn::squeeze0(features)?.bilinear_sample(pts.reshape(&[n * q, 2])?)?;
    let feat = sampled.reshape(&[n, q, c])?.mean_axis(1, false)?;
    let mean_pt = pts.mean_axis(1, false)?;
    let onehot = g.constant(Tensor::from_fn(&[n, NUM_CLASSES], |i| {
        T::of(f64::from(u8::from(
            i % NUM_CLASSES == (i / NUM_CLASSES) / curves.k,
        )))
    }));
    let emb = g.concat(&[feat, mean_pt, curves.control, onehot], 1)?;
    let hidden = nn::linear(p, &format!("{prefix}.fc1"), emb)?.relu();
    let out = nn::linear(p, &format!("{prefix}.fc2"), hidden)?;
    let delta = out.narrow(1, 0, 2 * M)?;
    let dconf = out.narrow(1, 2 * M, 1)?.reshape(&[n])?;
    Ok(Proposals::from_logits(
        curves.logits.add(delta)?,
        curves.conf_logits.add(dconf)?,
        curves.k,
    ))
}

/// Rasterizes the most confident curve of every class into `[1, 3, h, w]`.
pub fn prior_maps<'g, T: Real>(
    curves: &Proposals<'g, T>,
    h: usize,
    w: usize,
    sigma: f64,
    samples: usize,
    mode: MinMode,
) -> Result<Var<'g, T>> {
    let g = curves.control.graph();
    let maps = (0..NUM_CLASSES)
        .map(|cls| {
            let row = curves.control.narrow(0, curves.top1(cls), 1)?;
            let pts = curve::sample_points(row, samples)?;
            curve::rasterize(pts, h, w, sigma, mode)?
                .reshape(&[1, 1, h, w])
                .map_err(Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&maps, 1)?)
}
