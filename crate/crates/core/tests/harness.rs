use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use a2o_core::augment::{self, AugmentConfig, AugmentDraw};
use a2o_core::checkpoint::{Checkpoint, MAGIC};
use a2o_core::curve::{BezierCurve, NUM_CLASSES};
use a2o_core::image;
use a2o_core::infer::{infer, InferOptions};
use a2o_core::model::{self, ModelConfig};
use a2o_core::optim::{cosine_lr, AdamW};
use a2o_core::synth::{gen_dataset, gen_scene, paint_mask, Dataset, SceneSpec, StoredSample};
use a2o_core::train::{
    epoch_plan, evaluate, score_logits, train, RunConfig, TrainConfig, TrainOptions, BEST_CKPT,
    EPOCH_LOG, LAST_CKPT, STEP_LOG,
};
use a2o_tensor::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(seed: u64, h: usize, w: usize) -> StoredSample {
    gen_scene(&SceneSpec {
        aux: true,
        ..SceneSpec::random(seed, h, w)
    })
    .unwrap()
    .stored(format!("s{seed}"))
}

// ---------------------------------------------------------------- augmentation

#[test]
fn flipped_curves_repaint_the_flipped_mask() {
    for seed in 0..12 {
        let s = sample(seed, 40, 40);
        for horizontal in [true, false] {
            let f = augment::flip(&s, horizontal);
            assert_eq!(
                paint_mask(&f.curves, 40, 40, s.thickness),
                f.mask,
                "seed {seed}"
            );
            // rasters flip back exactly, control points up to 1 − (1 − x) rounding
            let back = augment::flip(&f, horizontal);
            assert_eq!(
                (&back.image, &back.mask, &back.illum, &back.aux),
                (&s.image, &s.mask, &s.illum, &s.aux)
            );
            for (a, b) in back.curves.iter().zip(&s.curves) {
                for (p, q) in a.control.iter().zip(&b.control) {
                    assert!((p[0] - q[0]).abs() <= 1e-15 && (p[1] - q[1]).abs() <= 1e-15);
                }
            }
        }
    }
}

#[test]
fn flips_move_every_plane_together() {
    let s = sample(3, 8, 12);
    let f = augment::flip(&s, true);
    for y in 0..8 {
        for x in 0..12 {
            let k = y * 12 + x;
            let m = y * 12 + (11 - x);
            assert_eq!(f.mask[k], s.mask[m]);
            assert_eq!(f.illum[k], s.illum[m]);
            assert_eq!(f.aux.as_ref().unwrap()[k], s.aux.as_ref().unwrap()[m]);
            for c in 0..3 {
                assert_eq!(f.image.get(c, y, x), s.image.get(c, y, 11 - x));
            }
        }
    }
}

#[test]
fn rotated_mask_is_the_rotated_curves() {
    for seed in 0..6 {
        let s = sample(seed, 48, 48);
        let r = augment::rotate(&s, 12f64.to_radians());
        assert_eq!(paint_mask(&r.curves, 48, 48, s.thickness), r.mask);
        let zero = augment::rotate(&s, 0.0);
        assert_eq!(zero.mask, s.mask);
        assert_eq!(zero.image, s.image);
    }
}

#[test]
fn augmentation_draws_respect_flags_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AugmentConfig::default();
    let draws: Vec<AugmentDraw> = (0..400)
        .map(|_| AugmentDraw::sample(&cfg, &mut rng))
        .collect();
    assert!(draws
        .iter()
        .all(|d| d.angle.abs() <= 15f64.to_radians() + 1e-12));
    assert!(draws.iter().any(|d| d.hflip) && draws.iter().any(|d| d.vflip));
    let none: Vec<AugmentDraw> = (0..50)
        .map(|_| AugmentDraw::sample(&AugmentConfig::NONE, &mut rng))
        .collect();
    assert!(none.iter().all(|d| !d.hflip && !d.vflip && d.angle == 0.0));
    let s = sample(1, 16, 16);
    assert_eq!(augment::apply(&s, &none[0]), s);
}

// ---------------------------------------------------------------- schedule and optimizer

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    let total = 12_800;
    assert_eq!(cosine_lr(0, total, 1e-4, 1e-6), 1e-4);
    assert_eq!(cosine_lr(total, total, 1e-4, 1e-6), 1e-6);
    assert!((cosine_lr(total / 2, total, 1e-4, 1e-6) - 5.05e-5).abs() <= 1e-12);
    let mut prev = f64::INFINITY;
    for step in (0..=total).step_by(97) {
        let lr = cosine_lr(step, total, 1e-4, 1e-6);
        assert!(lr <= prev && (1e-6..=1e-4).contains(&lr));
        prev = lr;
    }
}

fn one_param(value: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(value)).unwrap();
    p
}

fn grad(value: f64) -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
}

#[test]
fn adamw_decoupled_decay_and_fixed_point() {
    let mut p = one_param(1.0);
    AdamW::new(0.1).step(&mut p, &grad(0.0), 0.1).unwrap();
    assert!((p.get("w").unwrap().item() - 0.99).abs() <= 1e-12);
    let mut p = one_param(0.37);
    let mut opt = AdamW::new(0.0);
    for _ in 0..10 {
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
    }
    assert_eq!(p.get("w").unwrap().item(), 0.37);
}

#[test]
fn adamw_constant_gradient_steps_approach_lr() {
    for g in [1e-3, 0.5, -40.0] {
        let mut p = one_param(0.0);
        let mut opt = AdamW::new(0.0);
        let lr = 0.01;
        let mut last = 0.0;
        for step in 1..=200 {
            let before = p.get("w").unwrap().item();
            opt.step(&mut p, &grad(g), lr).unwrap();
            let delta = before - p.get("w").unwrap().item();
            // bias correction makes every step lr·|g|/(|g| + eps) from the first
            assert!(
                (delta.abs() - lr).abs() <= lr * 1e-4,
                "step {step}: {delta}"
            );
            assert_eq!(delta.signum(), g.signum());
            last = delta.abs();
        }
        assert!((last - lr).abs() <= 1e-6 * lr / g.abs().min(1.0) + 1e-12);
    }
}

#[test]
fn adamw_rejects_mismatched_gradients() {
    let mut p = one_param(1.0);
    let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
    assert!(AdamW::new(0.0).step(&mut p, &bad, 0.1).is_err());
    let unknown = BTreeMap::from([("v".to_string(), Tensor::scalar(1.0))]);
    assert!(AdamW::new(0.0).step(&mut p, &unknown, 0.1).is_err());
}

// ---------------------------------------------------------------- checkpoints

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    let mut ck = Checkpoint::new(cfg.clone(), model::init_params(&cfg).unwrap());
    ck.meta.epoch = 3;
    ck.meta.best_val_dsc = Some(41.25);
    let mut opt = AdamW::new(1e-5);
    let grads: BTreeMap<String, Tensor<f32>> = ck
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.map(|v| 0.1 * v)))
        .collect();
    opt.step(&mut ck.params, &grads, 1e-3).unwrap();
    ck.optim = Some(opt);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(loaded.params, ck.params);
    assert_eq!(loaded.optim, ck.optim);
    assert_eq!(
        (loaded.meta.epoch, loaded.meta.best_val_dsc),
        (3, Some(41.25))
    );
    assert_eq!(loaded.meta.optim_step, 1);
    assert_eq!(&fs::read(&a).unwrap()[..4], MAGIC);
}

#[test]
fn corrupt_checkpoints_are_refused() {
    let cfg = ModelConfig::toy();
    let bytes = Checkpoint::new(cfg.clone(), model::init_params(&cfg).unwrap())
        .to_bytes()
        .unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::from_bytes(&bad).err().unwrap().to_string();
    assert!(err.to_lowercase().contains("magic"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}

// ---------------------------------------------------------------- training

fn tiny_run(epochs: usize) -> RunConfig {
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

fn tiny_data(dir: &Path, n: usize) {
    gen_dataset(dir, n, 3, 11, (32, 32), false).unwrap();
}

fn quiet(threads: usize) -> TrainOptions {
    TrainOptions {
        threads,
        ..TrainOptions::default()
    }
}

#[test]
fn two_epoch_smoke_run_writes_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path(), 8);
    let out = dir.path().join("run");
    let outcome = train(&tiny_run(2), dir.path(), &out, &quiet(1)).unwrap();
    assert_eq!(outcome.epochs.len(), 2);
    for f in [LAST_CKPT, BEST_CKPT] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let epochs = fs::read_to_string(out.join(EPOCH_LOG)).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let steps = fs::read_to_string(out.join(STEP_LOG)).unwrap();
    assert_eq!(steps.lines().count(), 1 + 2 * 4);
    let last = Checkpoint::load(&out.join(LAST_CKPT)).unwrap();
    assert_eq!(last.meta.epoch, 2);
    assert_eq!(last.optim.as_ref().unwrap().step, 8);
    let best = Checkpoint::load(&out.join(BEST_CKPT)).unwrap();
    assert_eq!(best.meta.best_val_dsc, outcome.best_val_dsc);
}

#[test]
fn training_is_bitwise_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path(), 6);
    let run = tiny_run(2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    train(&run, dir.path(), &a, &quiet(1)).unwrap();
    train(&run, dir.path(), &b, &quiet(1)).unwrap();
    train(&run, dir.path(), &c, &quiet(3)).unwrap();
    let bytes = |d: &Path| fs::read(d.join(LAST_CKPT)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&c));
    let log = |d: &Path| fs::read_to_string(d.join(STEP_LOG)).unwrap();
    assert_eq!(log(&a), log(&b));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path(), 5);
    let run = tiny_run(3);
    let whole = dir.path().join("whole");
    let parts = dir.path().join("parts");
    train(&run, dir.path(), &whole, &quiet(1)).unwrap();
    let first = train(
        &run,
        dir.path(),
        &parts,
        &TrainOptions {
            stop_after: Some(1),
            ..quiet(1)
        },
    )
    .unwrap();
    assert_eq!(first.epochs.len(), 1);
    let rest = train(
        &run,
        dir.path(),
        &parts,
        &TrainOptions {
            resume: true,
            ..quiet(1)
        },
    )
    .unwrap();
    assert_eq!(rest.epochs.len(), 2);
    for f in [LAST_CKPT, BEST_CKPT, STEP_LOG] {
        assert_eq!(
            fs::read(whole.join(f)).unwrap(),
            fs::read(parts.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path(), 2);
    let out = dir.path().join("run");
    train(&tiny_run(1), dir.path(), &out, &quiet(1)).unwrap();
    let mut other = tiny_run(2);
    other.train.lr0 = 5e-4;
    let opts = TrainOptions {
        resume: true,
        ..quiet(1)
    };
    assert!(train(&other, dir.path(), &out, &opts).is_err());
    fs::write(out.join(LAST_CKPT), b"NOPE").unwrap();
    assert!(train(&tiny_run(1), dir.path(), &out, &opts).is_err());
}

#[test]
fn training_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path(), 16);
    let outcome = train(&tiny_run(6), dir.path(), &dir.path().join("run"), &quiet(1)).unwrap();
    let losses: Vec<f64> = outcome.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[5] < losses[0], "{losses:?}");
}

#[test]
fn epoch_plans_are_seeded_permutations() {
    let cfg = TrainConfig::default();
    for epoch in 0..3 {
        let plan = epoch_plan(&cfg, epoch, 20);
        let mut idx: Vec<usize> = plan.iter().map(|(i, _)| *i).collect();
        assert_eq!(plan, epoch_plan(&cfg, epoch, 20));
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }
    assert_ne!(epoch_plan(&cfg, 0, 20), epoch_plan(&cfg, 1, 20));
}

#[test]
fn config_files_use_field_names_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(
        &path,
        r#"{"train": {"epochs": 7, "augment": {"rotation_deg": 5.0}}, "model": {"k": 4}}"#,
    )
    .unwrap();
    let run = RunConfig::load(&path).unwrap();
    assert_eq!(run.train.epochs, 7);
    assert_eq!(run.train.augment.rotation_deg, 5.0);
    assert!(run.train.augment.hflip);
    assert_eq!(run.train.lr0, 1e-4);
    assert_eq!(run.model.k, 4);
    assert_eq!(run.model.height, 128);
    fs::write(&path, r#"{"train": {"epoch": 7}}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
    fs::write(&path, r#"{"train": {"lr0": 1e-6, "lr_min": 1e-4}}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

// ---------------------------------------------------------------- evaluation and inference

#[test]
fn ground_truth_logits_score_perfectly() {
    let s = sample(4, 32, 32);
    let logits: Vec<f32> = (0..NUM_CLASSES * 32 * 32)
        .map(|i| {
            if s.mask[i % 1024] as usize == i / 1024 + 1 {
                10.0
            } else {
                -10.0
            }
        })
        .collect();
    for argmax in [false, true] {
        let scores = score_logits(&logits, &s, argmax).unwrap();
        for (c, sc) in scores.iter().enumerate() {
            assert_eq!((sc.dsc, sc.iou), (100.0, 100.0), "class {c}");
            if s.curves.iter().any(|k| k.class.index() == c) {
                assert_eq!(sc.assd, Some(0.0));
            }
        }
    }
}

#[test]
fn evaluation_is_repeatable_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 1, 5, 3, (32, 32), false).unwrap();
    let val = Dataset::open(&dir.path().join("val")).unwrap();
    let cfg = ModelConfig::toy();
    let params = model::init_params(&cfg).unwrap();
    let csv = |threads: usize, name: &str| {
        let path = dir.path().join(name);
        evaluate(&cfg, &params, &val, false, threads)
            .unwrap()
            .write_csv(&path)
            .unwrap();
        fs::read(path).unwrap()
    };
    let a = csv(1, "a.csv");
    assert_eq!(a, csv(1, "b.csv"));
    assert_eq!(a, csv(4, "c.csv"));
    assert_eq!(
        String::from_utf8(a).unwrap().lines().count(),
        1 + 5 * NUM_CLASSES + NUM_CLASSES + 1
    );
}

#[test]
fn inference_writes_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    let ck = Checkpoint::new(cfg.clone(), model::init_params(&cfg).unwrap());
    let s = sample(5, 32, 32);
    let opts = InferOptions {
        dump_illum: true,
        dump_fosf: true,
        dump_stages: true,
    };
    let out = infer(&ck, &s.image, None, dir.path(), opts).unwrap();
    assert!(out.files.iter().all(|f| f.is_file()));
    let names: Vec<String> = out
        .files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for expected in [
        "mask.pgm",
        "curves.json",
        "overlay.ppm",
        "illum_field.pgm",
        "illum_gain.pgm",
        "compensated.ppm",
        "fosf_bneck_guidance.pgm",
        "fosf_skip0_selected.pgm",
        "stage_init_curves.json",
        "stage0_prior_ridge.pgm",
        "stage1_mask.pgm",
        "stage1_curves.json",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    let mask = image::read_pgm(&dir.path().join("mask.pgm")).unwrap();
    assert_eq!((mask.height, mask.width), (32, 32));
    assert_eq!(
        mask.data.iter().map(|&v| v as u8).collect::<Vec<_>>(),
        out.mask
    );
    let curves: Vec<BezierCurve> =
        serde_json::from_slice(&fs::read(dir.path().join("curves.json")).unwrap()).unwrap();
    assert_eq!(curves, out.curves);
    assert_eq!(curves.len(), NUM_CLASSES);
    let overlay = image::read_ppm(&dir.path().join("overlay.ppm")).unwrap();
    assert_eq!((overlay.height(), overlay.width()), (32, 32));
    for name in names.iter().filter(|n| n.ends_with(".json")) {
        let _: Vec<BezierCurve> =
            serde_json::from_slice(&fs::read(dir.path().join(name)).unwrap()).unwrap();
    }
}

#[test]
fn inference_rejects_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    let ck = Checkpoint::new(cfg.clone(), model::init_params(&cfg).unwrap());
    let s = sample(6, 48, 48);
    assert!(infer(&ck, &s.image, None, dir.path(), InferOptions::default()).is_err());
}
