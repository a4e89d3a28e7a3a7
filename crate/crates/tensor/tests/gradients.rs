use a2o_tensor::{grad_check, Bound, GradCheckConfig, Graph, ParamSet, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

/// Contracts an arbitrary output with fixed random weights so every output
/// entry contributes a distinct gradient.
fn project<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.graph().constant(random(&y.shape(), &mut rng));
    Ok(y.mul(w)?.sum())
}

fn check<F>(params: &ParamSet<f64>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let report = grad_check(f, params, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v).unwrap();
    }
    p
}

#[test]
fn quadratic_matches_closed_form() {
    let p = params(vec![("x", Tensor::scalar(3.0))]);
    let g = Graph::new();
    let b = p.bind(&g);
    let x = b.get("x").unwrap();
    let y = x.mul(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!((grads.param("x").unwrap().item() - 6.0).abs() < 1e-12);
    let report = grad_check(
        |_, b| {
            let x = b.get("x")?;
            x.mul(x)
        },
        &p,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.max_rel_err < 1e-6);
}

#[test]
fn sigmoid_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = params(vec![
        ("w", random(&[4, 4], &mut rng)),
        ("x", random(&[4, 1], &mut rng)),
    ]);
    check(&p, |_, b| {
        Ok(b.get("w")?.matmul(b.get("x")?)?.sigmoid().sum())
    });
}

#[test]
fn wrong_backward_is_caught() {
    let p = params(vec![(
        "x",
        Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(),
    )]);
    let report = grad_check(
        |g, b| {
            let x = b.get("x")?;
            let v = x.value();
            let id = x.id();
            let y = g.custom(
                "doubled_square",
                &[x],
                v.map(|a| a * a),
                Box::new(move |gout, sink| {
                    if let Some(gx) = sink.acc(id) {
                        for i in 0..gx.len() {
                            // correct would be 2·x
                            gx[i] += gout[i] * 4.0 * v.data()[i];
                        }
                    }
                }),
            );
            Ok::<_, a2o_tensor::TensorError>(y.sum())
        },
        &p,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures.len(), 3);
    let f = &report.failures[0];
    assert!((f.analytic - 2.0 * f.numeric).abs() < 1e-6);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = params(vec![
        ("x", random(&[3, 5], &mut rng)),
        ("q", positive(&[3, 5], &mut rng)),
    ]);
    check(&p, |_, b| {
        let x = b.get("x")?;
        let q = b.get("q")?;
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
    });
}

#[test]
fn broadcasting_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(vec![
        ("a", random(&[2, 3, 4], &mut rng)),
        ("b", random(&[3, 1], &mut rng)),
        ("c", positive(&[4], &mut rng)),
    ]);
    check(&p, |_, b| {
        let (a, bb, c) = (b.get("a")?, b.get("b")?, b.get("c")?);
        let s = project(a.add(bb)?, 1)?;
        let d = project(a.sub(c)?, 2)?;
        let m = project(bb.mul(a)?, 3)?;
        let q = project(a.div(c)?, 4)?;
        s.add(d)?.add(m)?.add(q)
    });
}

#[test]
fn reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(vec![("x", random(&[2, 4, 3], &mut rng))]);
    check(&p, |_, b| {
        let x = b.get("x")?;
        let mut t = project(x.sum_axis(1, false)?, 1)?;
        t = t.add(project(x.mean_axis(2, true)?, 2)?)?;
        t = t.add(project(x.max_axis(1, true)?, 3)?)?;
        t = t.add(project(x.min_axis(0, false)?, 4)?)?;
        for axis in 0..3 {
            t = t.add(project(x.softmax(axis)?, 10 + axis as u64)?)?;
        }
        t.add(x.mean())
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = params(vec![
        ("x", random(&[2, 3, 4], &mut rng)),
        ("y", random(&[2, 2, 4], &mut rng)),
    ]);
    check(&p, |g, b| {
        let (x, y) = (b.get("x")?, b.get("y")?);
        let mut t = project(x.reshape(&[6, 4])?, 1)?;
        t = t.add(project(x.permute(&[2, 0, 1])?, 2)?)?;
        t = t.add(project(x.narrow(1, 1, 2)?, 3)?)?;
        t = t.add(project(g.concat(&[x, y], 1)?, 4)?)?;
        t = t.add(project(x.index_select(&[1, 0, 1])?, 5)?)?;
        t.add(project(x.pad_reflect2d(3)?, 6)?)
    });
}

#[test]
fn resampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params(vec![("x", random(&[2, 4, 6], &mut rng))]);
    check(&p, |_, b| {
        let x = b.get("x")?;
        let up = project(x.upsample_bilinear(8, 12)?, 1)?;
        let odd = project(x.upsample_bilinear(5, 3)?, 2)?;
        let pool = project(x.avg_pool2d(2)?, 3)?;
        up.add(odd)?.add(pool)
    });
}

#[test]
fn bilinear_sample_wrt_features_and_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = Tensor::from_fn(&[7, 2], |_| rng.random_range(0.02..0.98));
    let p = params(vec![("f", random(&[3, 5, 6], &mut rng)), ("p", pts)]);
    check(&p, |_, b| {
        project(b.get("f")?.bilinear_sample(b.get("p")?)?, 1)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_matches_finite_differences(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, bias in any::<bool>(), seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = vec![
            ("x", random(&[n, c, h, w], &mut rng)),
            ("w", random(&[o, c, k, k], &mut rng)),
        ];
        if bias {
            entries.push(("b", random(&[o], &mut rng)));
        }
        let p = params(entries);
        let report = grad_check(
            |_, b| {
                let bias = if b.contains("b") { Some(b.get("b")?) } else { None };
                project(b.get("x")?.conv2d(b.get("w")?, bias, stride, pad)?, seed)
            },
            &p,
            &GradCheckConfig::default(),
        ).unwrap();
        prop_assert!(report.passed(), "{}", report);
    }

    #[test]
    fn softmax_sums_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let g = Graph::<f64>::new();
        let n = values.len();
        let x = g.constant(Tensor::new(vec![n], values).unwrap());
        let s = x.softmax(0).unwrap();
        let total: f64 = s.value().data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(s.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn matmul_matches_finite_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(vec![("a", random(&[m, k], &mut rng)), ("b", random(&[k, n], &mut rng))]);
        let report = grad_check(
            |_, b| project(b.get("a")?.matmul(b.get("b")?)?, seed),
            &p,
            &GradCheckConfig::default(),
        ).unwrap();
        prop_assert!(report.passed(), "{}", report);
    }
}

#[test]
fn forward_ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f32>::new();
        let x = g.constant(random(&[1, 3, 9, 9], &mut rng).cast());
        let w = g.constant(random(&[4, 3, 3, 3], &mut rng).cast());
        let y = x.conv2d(w, None, 1, 1).unwrap().softmax(1).unwrap();
        y.value()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn primitive_suite_passes() {
    for (name, report) in a2o_tensor::suite::primitive_checks(&GradCheckConfig::default()).unwrap()
    {
        assert!(report.passed(), "{name}: {report}");
        assert!(report.checked > 0, "{name}");
    }
}
