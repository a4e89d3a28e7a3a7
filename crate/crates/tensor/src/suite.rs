//! Finite-difference checks of every differentiable primitive, runnable
//! outside the test harness.

use crate::{
    grad_check, Bound, GradCheckConfig, GradCheckReport, Graph, ParamSet, Result, Tensor, Var,
};

/// Deterministic values in `[-1, 1)` without a random number generator.
pub fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    Tensor::from_fn(shape, |_| {
        // xorshift64*
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        let v = state.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 11;
        v as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    pseudo_random(shape, seed).map(|v| 1.1 + 0.9 * v)
}

/// `Σ y ⊙ W` for fixed pseudo-random `W`, so every output entry contributes
/// a distinct gradient.
pub fn project<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = y.graph().constant(pseudo_random(&y.shape(), seed ^ 0xABCD));
    Ok(y.mul(w)?.sum())
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamSet<f64>> {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v)?;
    }
    Ok(p)
}

fn run<F>(
    name: &str,
    p: &ParamSet<f64>,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<(String, GradCheckReport)>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    Ok((name.to_string(), grad_check(f, p, cfg)?))
}

/// Runs one named check per primitive family.
pub fn primitive_checks(cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let p = params(vec![
        ("x", pseudo_random(&[3, 5], 1)),
        ("q", positive(&[3, 5], 2)),
    ])?;
    out.push(run("unary", &p, cfg, |_, b| {
        let (x, q) = (b.get("x")?, b.get("q")?);
        let parts = [
            x.relu(),
            x.sigmoid(),
            x.tanh(),
            x.exp(),
            x.abs(),
            x.sin(),
            x.square(),
            x.neg(),
            x.add_scalar(0.3).mul_scalar(-1.7),
            x.clamp(-0.5, 0.5),
            x.mul_scalar(0.5).add_scalar(0.5).logit_clamped(1e-6),
            q.ln(),
            q.sqrt(),
            q.powf(0.37),
        ];
        let mut total = project(parts[0], 0)?;
        for (i, v) in parts.iter().enumerate().skip(1) {
            total = total.add(project(*v, i as u64)?)?;
        }
        Ok(total)
    })?);

    let p = params(vec![
        ("a", pseudo_random(&[2, 3, 4], 3)),
        ("b", pseudo_random(&[3, 1], 4)),
        ("c", positive(&[4], 5)),
    ])?;
    out.push(run("binary", &p, cfg, |_, b| {
        let (a, bb, c) = (b.get("a")?, b.get("b")?, b.get("c")?);
        project(a.add(bb)?, 1)?
            .add(project(a.sub(c)?, 2)?)?
            .add(project(bb.mul(a)?, 3)?)?
            .add(project(a.div(c)?, 4)?)
    })?);

    let p = params(vec![("x", pseudo_random(&[2, 4, 3], 6))])?;
    out.push(run("reductions", &p, cfg, |_, b| {
        let x = b.get("x")?;
        let mut t = project(x.sum_axis(1, false)?, 1)?;
        t = t.add(project(x.mean_axis(2, true)?, 2)?)?;
        t = t.add(project(x.max_axis(1, true)?, 3)?)?;
        t = t.add(project(x.min_axis(0, false)?, 4)?)?;
        for axis in 0..3 {
            t = t.add(project(x.softmax(axis)?, 10 + axis as u64)?)?;
        }
        t.add(x.mean())
    })?);

    let p = params(vec![
        ("x", pseudo_random(&[2, 3, 4], 7)),
        ("y", pseudo_random(&[2, 2, 4], 8)),
    ])?;
    out.push(run("shape", &p, cfg, |g, b| {
        let (x, y) = (b.get("x")?, b.get("y")?);
        let mut t = project(x.reshape(&[6, 4])?, 1)?;
        t = t.add(project(x.permute(&[2, 0, 1])?, 2)?)?;
        t = t.add(project(x.narrow(1, 1, 2)?, 3)?)?;
        t = t.add(project(g.concat(&[x, y], 1)?, 4)?)?;
        t = t.add(project(x.index_select(&[1, 0, 1])?, 5)?)?;
        t.add(project(x.pad_reflect2d(3)?, 6)?)
    })?);

    let p = params(vec![("x", pseudo_random(&[2, 4, 6], 9))])?;
    out.push(run("resampling", &p, cfg, |_, b| {
        let x = b.get("x")?;
        project(x.upsample_bilinear(8, 12)?, 1)?
            .add(project(x.upsample_bilinear(5, 3)?, 2)?)?
            .add(project(x.avg_pool2d(2)?, 3)?)
    })?);

    let pts = pseudo_random(&[7, 2], 10).map(|v| 0.5 + 0.45 * v);
    let p = params(vec![("f", pseudo_random(&[3, 5, 6], 11)), ("p", pts)])?;
    out.push(run("bilinear_sample", &p, cfg, |_, b| {
        project(b.get("f")?.bilinear_sample(b.get("p")?)?, 1)
    })?);

    let p = params(vec![
        ("a", pseudo_random(&[3, 4], 12)),
        ("b", pseudo_random(&[4, 5], 13)),
    ])?;
    out.push(run("matmul", &p, cfg, |_, b| {
        project(b.get("a")?.matmul(b.get("b")?)?, 1)
    })?);

    let p = params(vec![
        ("x", pseudo_random(&[2, 3, 7, 6], 14)),
        ("w", pseudo_random(&[4, 3, 3, 3], 15)),
        ("b", pseudo_random(&[4], 16)),
    ])?;
    out.push(run("conv2d", &p, cfg, |_, b| {
        let (x, w, bias) = (b.get("x")?, b.get("w")?, b.get("b")?);
        project(x.conv2d(w, Some(bias), 1, 1)?, 1)?.add(project(x.conv2d(w, None, 2, 0)?, 2)?)
    })?);
    Ok(out)
}
