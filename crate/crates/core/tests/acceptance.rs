//! Exit-gate checks. Each test prints one `criterion N: PASS|FAIL` line and
//! then asserts it. Criteria 8 and 9 train full-size models and are ignored by
//! default; run them with `cargo test --release -p a2o-core --test acceptance
//! -- --ignored --nocapture`.
//!
//! Criterion 8 evaluates an existing run instead of training when
//! `A2O_FULL_RUN` names its output directory and `A2O_FULL_DATA` the dataset
//! root it was trained on. Criterion 9 honours `A2O_ABLATION_SIZE`,
//! `A2O_ABLATION_N_TRAIN`, `A2O_ABLATION_N_VAL` and `A2O_ABLATION_EPOCHS`;
//! any override marks the result as reduced scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use a2o_core::checkpoint::Checkpoint;
use a2o_core::curve::{
    curve_min_distance_bruteforce, soft_rasterize, BezierCurve, LandmarkClass, M,
};
use a2o_core::fosf::{haar_dwt2, haar_idwt2, GaborBank};
use a2o_core::gradsuite;
use a2o_core::illumination::{self, GAIN_MAX, GAIN_MIN};
use a2o_core::metrics::{assd, dsc, iou, score};
use a2o_core::model::{self, Components, ModelConfig};
use a2o_core::nn::Init;
use a2o_core::objectives;
use a2o_core::optim::{cosine_lr, AdamW};
use a2o_core::synth::{gen_dataset, Dataset};
use a2o_core::train::{
    evaluate, threads_from_env, train, RunConfig, TrainConfig, TrainOptions, BEST_CKPT, EPOCH_LOG,
    LAST_CKPT, STEP_LOG,
};
use a2o_tensor::suite::pseudo_random;
use a2o_tensor::{GradCheckConfig, Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, ok: bool, detail: &str) {
    println!(
        "criterion {n}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let results = gradsuite::run(None, &GradCheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = results
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, _)| n.as_str())
        .collect();
    let worst = results
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    let has_model = results.iter().any(|(n, _)| n.starts_with("total_loss"));
    let ok = failing.is_empty() && worst <= 1e-3 && has_model && elapsed < Duration::from_secs(300);
    verdict(
        1,
        ok,
        &format!(
            "{} checks, max rel err {worst:.2e}, failing {failing:?}, {:.1} s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_haar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (h, w) = (2 * rng.random_range(1..33), 2 * rng.random_range(1..33));
        let x = pseudo_random(&[h, w], 1000 + i);
        let back = haar_idwt2(&haar_dwt2(&x).unwrap());
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    // tile [[a, b], [c, d]] gives LL (a+b+c+d)/2, LH (a−b+c−d)/2,
    // HL (a+b−c−d)/2 and HH (a−b−c+d)/2
    let tiles: [([f64; 4], [f64; 4]); 3] = [
        ([1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0]),
        ([1.0, 2.0, 3.0, 4.0], [5.0, -1.0, -2.0, 0.0]),
        ([0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]),
    ];
    let mut tiles_ok = true;
    for (tile, want) in tiles {
        let s = haar_dwt2(&Tensor::from_f64(&[2, 2], &tile).unwrap()).unwrap();
        tiles_ok &= [
            s.ll.data()[0],
            s.lh.data()[0],
            s.hl.data()[0],
            s.hh.data()[0],
        ] == want;
    }
    verdict(
        2,
        worst <= 1e-6 && tiles_ok,
        &format!("max round-trip error {worst:.2e}, tiles exact {tiles_ok}"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_rasterization_oracle() {
    const SIGMA: f64 = 0.02;
    const N: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut control = [[0.0; 2]; M];
        for c in &mut control {
            *c = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        }
        let curve = BezierCurve::new(LandmarkClass::Ridge, control);
        let p = soft_rasterize(&curve, N, N, SIGMA, 128);
        for (k, v) in p.data().iter().enumerate() {
            let x = [
                ((k % N) as f64 + 0.5) / N as f64,
                ((k / N) as f64 + 0.5) / N as f64,
            ];
            let d = curve_min_distance_bruteforce(&curve, x, 10_000);
            worst = worst.max((v - (-d * d / (2.0 * SIGMA * SIGMA)).exp()).abs());
        }
    }
    verdict(
        3,
        worst <= 5e-3,
        &format!("100 quartic curves, max |dP| {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_gabor_selectivity() {
    let bank = GaborBank::new(4);
    let (h, w) = (32, 32);
    let mut wins = 0;
    for (j, &theta) in bank.orientations.iter().enumerate() {
        let grating = Tensor::from_fn(&[1, 1, h, w], |k| {
            let (y, x) = (((k / w) % h) as f64, (k % w) as f64);
            (std::f64::consts::TAU * (x * theta.cos() + y * theta.sin()) / 4.0).cos()
        });
        let g = Graph::<f64>::new();
        let r = bank.respond(g.constant(grating)).unwrap().value();
        let plane = h * w;
        let means: Vec<f64> = (0..bank.len())
            .map(|i| {
                r.data()[i * plane..(i + 1) * plane]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .collect();
        let best = (0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b });
        wins += usize::from(best == j);
    }
    verdict(
        4,
        wins == 4 && bank.len() == 4,
        &format!("{wins}/4 orientations selected"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_ifc_identity_and_bounds() {
    let (h, w) = (16, 16);
    let mut identity = true;
    let mut gain_lo = f64::INFINITY;
    let mut gain_hi = f64::NEG_INFINITY;
    for seed in 0..50 {
        let g = Graph::<f64>::new();
        let img = pseudo_random(&[1, 3, h, w], seed).map(|v| 0.5 + 0.5 * v);
        // fields across the whole admissible range, including near zero
        let field = pseudo_random(&[h, w], seed + 100).map(|v| (1.0 + v).max(0.0));
        let zero = illumination::compensate_with(
            g.constant(img.clone()),
            g.constant(field.clone()),
            g.scalar(0.0),
        )
        .unwrap();
        identity &= zero.image.value().data() == img.data();
        let alpha = (seed as f64 + 1.0) / 50.0;
        let out =
            illumination::compensate_with(g.constant(img), g.constant(field), g.scalar(alpha))
                .unwrap();
        for &v in out.gain.value().data() {
            gain_lo = gain_lo.min(v);
            gain_hi = gain_hi.max(v);
        }
    }
    // the learned block at random initialisations
    for seed in 0..10 {
        let mut p = ParamSet::<f32>::new();
        illumination::init_params(&mut Init::new(&mut p, seed)).unwrap();
        let p: ParamSet<f64> = p.cast();
        let g = Graph::<f64>::new();
        let b = p.bind(&g);
        let img = pseudo_random(&[1, 3, h, w], 500 + seed).map(|v| (0.3 + 0.3 * v).max(0.0));
        let out = illumination::compensate(&b, g.constant(img)).unwrap();
        for &v in out.gain.value().data() {
            gain_lo = gain_lo.min(v);
            gain_hi = gain_hi.max(v);
        }
    }
    let g = Graph::<f64>::new();
    let zero_loss = objectives::illum_loss(
        g.constant(Tensor::full(&[h, w], 0.63)),
        g.constant(Tensor::full(&[h, w], 1.0)),
    )
    .unwrap()
    .item();
    let ok = identity && gain_lo >= GAIN_MIN && gain_hi <= GAIN_MAX && zero_loss == 0.0;
    verdict(
        5,
        ok,
        &format!("alpha 0 identity {identity}, gains in [{gain_lo:.4}, {gain_hi:.4}], constant-field loss {zero_loss}"),
    );
}

// ---------------------------------------------------------------- 6

fn oracle_boundary(m: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let nb = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            if m[i * w + j] && nb.iter().any(|&(a, b)| a >= h || b >= w || !m[a * w + b]) {
                out.push((i, j));
            }
        }
    }
    out
}

fn oracle_assd(p: &[bool], g: &[bool], h: usize, w: usize) -> Option<f64> {
    let (bp, bg) = (oracle_boundary(p, h, w), oracle_boundary(g, h, w));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let near = |x: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|&(a, b)| (x.0 as f64 - a as f64).powi(2) + (x.1 as f64 - b as f64).powi(2))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let sum = bp.iter().map(|&x| near(x, &bg)).sum::<f64>()
        + bg.iter().map(|&x| near(x, &bp)).sum::<f64>();
    Some(sum / (bp.len() + bg.len()) as f64)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (i0, j0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (
            rng.random_range(1..=h / 2 + 1),
            rng.random_range(1..=w / 2 + 1),
        );
        for i in i0..(i0 + rh).min(h) {
            for j in j0..(j0 + rw).min(w) {
                m[i * w + j] = true;
            }
        }
    }
    m
}

#[test]
fn criterion_06_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    let mut identity = true;
    let pairs = 200;
    for _ in 0..pairs {
        let (h, w) = (rng.random_range(2..=64), rng.random_range(2..=64));
        let (p, g) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
        let (np, ng) = (
            p.iter().filter(|a| **a).count() as f64,
            g.iter().filter(|a| **a).count() as f64,
        );
        let (d, i) = if np + ng == 0.0 {
            (100.0, 100.0)
        } else {
            (200.0 * inter / (np + ng), 100.0 * inter / (np + ng - inter))
        };
        let same = dsc(&p, &g).unwrap() == d
            && iou(&p, &g).unwrap() == i
            && assd(&p, &g, h, w).unwrap() == oracle_assd(&p, &g, h, w);
        exact += usize::from(same);
        let s = score(&p, &g, h, w).unwrap();
        let (sd, si) = (s.dsc / 100.0, s.iou / 100.0);
        identity &= (sd - 2.0 * si / (1.0 + si)).abs() <= 1e-12;
    }
    let square = |left: usize| {
        let mut m = vec![false; 100];
        for i in 2..6 {
            for j in left..left + 4 {
                m[i * 10 + j] = true;
            }
        }
        m
    };
    let (a, b) = (square(1), square(3));
    let (hd, hi) = (dsc(&a, &b).unwrap(), iou(&a, &b).unwrap());
    let half = (hd - 50.0).abs() <= 0.01 && (hi - 100.0 / 3.0).abs() <= 0.01;
    verdict(
        6,
        exact == pairs && half && identity,
        &format!("{exact}/{pairs} exact, half overlap DSC {hd:.2} IoU {hi:.2}, dice-iou identity {identity}"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_schedule_and_optimizer() {
    let total = 12_800;
    let (start, end) = (
        cosine_lr(0, total, 1e-4, 1e-6),
        cosine_lr(total, total, 1e-4, 1e-6),
    );
    let endpoints = start == 1e-4 && end == 1e-6;

    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(1.0f64)).unwrap();
    let zero = [("w".to_string(), Tensor::scalar(0.0))]
        .into_iter()
        .collect();
    AdamW::new(0.1).step(&mut p, &zero, 0.1).unwrap();
    let decayed = p.get("w").unwrap().item();

    // two steps with gradients 0.5 then −0.25, lr 0.01, decay 0.1, by hand
    let mut q = ParamSet::new();
    q.insert("w", Tensor::scalar(2.0f64)).unwrap();
    let mut opt = AdamW::new(0.1);
    let (lr, eps) = (0.01, 1e-8);
    let mut want = 2.0;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, gv) in [(1, 0.5), (2, -0.25)] {
        let grads = [("w".to_string(), Tensor::scalar(gv))]
            .into_iter()
            .collect();
        opt.step(&mut q, &grads, lr).unwrap();
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        want = want * (1.0 - lr * 0.1) - lr * mh / (vh.sqrt() + eps);
    }
    let got = q.get("w").unwrap().item();
    let ok = endpoints && (decayed - 0.99).abs() <= 1e-12 && (got - want).abs() <= 1e-12;
    verdict(
        7,
        ok,
        &format!(
            "lr endpoints {start:e}, {end:e}; decay step {decayed}; two-step fixture error {:.1e}",
            (got - want).abs()
        ),
    );
}

// ---------------------------------------------------------------- 8

/// Regression pin for the default configuration, from the first full run
/// (data seed 0, 100 epochs).
const PINNED_VAL_DSC: f64 = 96.49;

fn read_epoch_log(dir: &Path) -> Vec<(usize, f64, f64, f64)> {
    fs::read_to_string(dir.join(EPOCH_LOG))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
            )
        })
        .collect()
}

fn argmax_flag(ck: &Checkpoint) -> bool {
    ck.meta
        .train
        .clone()
        .and_then(|t| serde_json::from_value::<TrainConfig>(t).ok())
        .is_some_and(|t| t.eval_argmax)
}

#[test]
#[ignore = "trains the default configuration for hours"]
fn criterion_08_end_to_end_training() {
    let threads = threads_from_env();
    let (run_dir, data_dir, _keep) = match (
        std::env::var_os("A2O_FULL_RUN"),
        std::env::var_os("A2O_FULL_DATA"),
    ) {
        (Some(r), Some(d)) => (PathBuf::from(r), PathBuf::from(d), None),
        _ => {
            let tmp = tempfile::tempdir().unwrap();
            let data = tmp.path().join("data");
            gen_dataset(&data, 256, 64, 0, (128, 128), false).unwrap();
            let out = tmp.path().join("run");
            let opts = TrainOptions {
                threads,
                verbose: true,
                ..TrainOptions::default()
            };
            train(&RunConfig::default(), &data, &out, &opts).unwrap();
            (out, data, Some(tmp))
        }
    };
    let log = read_epoch_log(&run_dir);
    let best = Checkpoint::load(&run_dir.join(BEST_CKPT)).unwrap();
    let val = Dataset::open(&data_dir.join("val")).unwrap();
    let report = evaluate(
        &best.meta.model,
        &best.params,
        &val,
        argmax_flag(&best),
        threads,
    )
    .unwrap();
    let dsc = report.mean.dsc;
    let hours = log.iter().map(|e| e.3).sum::<f64>() / 3600.0;
    let loss_falls = log.len() >= 5 && log[4].1 < log[0].1;
    let default_cfg =
        best.meta.model == ModelConfig::default() && log.len() == 100 && val.len() == 64;
    let pinned = (dsc - PINNED_VAL_DSC).abs() <= 3.0;
    let ok = default_cfg && dsc >= 70.0 && pinned && loss_falls && hours <= 2.0;
    verdict(
        8,
        ok,
        &format!(
            "{} epochs, best val DSC {dsc:.2} (pin {PINNED_VAL_DSC:.2} ± 3), loss epoch 5 below epoch 1 {loss_falls}, \
             training time {hours:.2} h with {threads} thread(s)",
            log.len()
        ),
    );
}

// ---------------------------------------------------------------- 9

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

#[test]
#[ignore = "trains fifteen models"]
fn criterion_09_directional_ablation() {
    let size = env_usize("A2O_ABLATION_SIZE", 128);
    let n_train = env_usize("A2O_ABLATION_N_TRAIN", 256);
    let n_val = env_usize("A2O_ABLATION_N_VAL", 64);
    let epochs = env_usize("A2O_ABLATION_EPOCHS", 100);
    let reduced = (size, n_train, n_val, epochs) != (128, 256, 64, 100);
    let threads = threads_from_env();
    let tmp = tempfile::tempdir().unwrap();
    let root = std::env::var_os("A2O_ABLATION_OUT")
        .map_or_else(|| tmp.path().to_path_buf(), PathBuf::from);
    let data = root.join("data");
    if !data.join("val").join("index.json").is_file() {
        gen_dataset(&data, n_train, n_val, 0, (size, size), false).unwrap();
    }
    let seeds = [0u64, 1, 2];
    let mut means = Vec::new();
    for row in 1..=5 {
        let mut total = 0.0;
        for &seed in &seeds {
            let run = RunConfig {
                model: ModelConfig {
                    height: size,
                    width: size,
                    components: Components::ablation(row).unwrap(),
                    seed,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    epochs,
                    seed,
                    ..TrainConfig::default()
                },
            };
            let out = root.join(format!("row{row}_seed{seed}"));
            let opts = TrainOptions {
                threads,
                resume: out.join(LAST_CKPT).is_file(),
                ..TrainOptions::default()
            };
            train(&run, &data, &out, &opts).unwrap();
            let best = read_epoch_log(&out)
                .iter()
                .map(|e| e.2)
                .fold(f64::NEG_INFINITY, f64::max);
            println!("ablation row {row} seed {seed}: best val DSC {best:.2}");
            total += best;
        }
        means.push(total / seeds.len() as f64);
    }
    let ordered = means.windows(2).filter(|p| p[0] < p[1]).count();
    let scale = if reduced {
        format!("reduced scale {size}px, {n_train}/{n_val} samples, {epochs} epochs")
    } else {
        "full scale".to_string()
    };
    let mut chain = format!("{:.2}", means[0]);
    for p in means.windows(2) {
        chain += &format!(" {} {:.2}", if p[0] < p[1] { "<" } else { ">=" }, p[1]);
    }
    // five rows give four consecutive pairs, so every pair must be ordered
    verdict(
        9,
        ordered >= 4,
        &format!("{scale}; row means {chain}; {ordered}/4 consecutive pairs ordered"),
    );
}

// ---------------------------------------------------------------- 10

fn toy_run(epochs: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig::toy(),
        train: TrainConfig {
            epochs,
            lr0: 1e-3,
            lr_min: 1e-5,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 6, 3, 10, (32, 32), false).unwrap();
    let run = toy_run(3);
    let opts = TrainOptions::default();
    let bytes = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&run, dir.path(), &a, &opts).unwrap();
    train(&run, dir.path(), &b, &opts).unwrap();
    let bitwise = [LAST_CKPT, BEST_CKPT, STEP_LOG]
        .iter()
        .all(|f| bytes(&a, f) == bytes(&b, f));

    let resaved = dir.path().join("resaved.ckpt");
    Checkpoint::load(&a.join(LAST_CKPT))
        .unwrap()
        .save(&resaved)
        .unwrap();
    let round_trip = fs::read(&resaved).unwrap() == bytes(&a, LAST_CKPT);

    let parts = dir.path().join("parts");
    train(
        &run,
        dir.path(),
        &parts,
        &TrainOptions {
            stop_after: Some(1),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    train(
        &run,
        dir.path(),
        &parts,
        &TrainOptions {
            resume: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let resumed = [LAST_CKPT, BEST_CKPT, STEP_LOG]
        .iter()
        .all(|f| bytes(&a, f) == bytes(&parts, f));

    // sanity: the toy network is the one exercised above
    assert_eq!(
        model::init_params(&run.model).unwrap().num_scalars(),
        Checkpoint::load(&a.join(LAST_CKPT))
            .unwrap()
            .params
            .num_scalars()
    );
    verdict(
        10,
        bitwise && round_trip && resumed,
        &format!("bitwise repeat {bitwise}, checkpoint byte round trip {round_trip}, resume equals uninterrupted {resumed}"),
    );
}
