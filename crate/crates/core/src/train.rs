//! Deterministic training loop, evaluation and inference.
//!
//! Data order and augmentation draws come from a stream keyed by
//! `(seed, epoch)`, gradients are accumulated over each batch in sample
//! order, and the optimizer walks parameters in name order, so a run is
//! reproducible bit for bit and resuming from any epoch checkpoint replays
//! the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use a2o_tensor::{Bound, Graph, ParamSet, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, AugmentDraw};
use crate::checkpoint::Checkpoint;
use crate::curve::{MinMode, NUM_CLASSES};
use crate::metrics::{self, ClassScores, EvalReport};
use crate::model::{self, Forward, Mode, ModelConfig};
use crate::objectives::{self, CurveLossConfig, LossParts, LossValues, LossWeights};
use crate::optim::{cosine_lr, AdamW};
use crate::synth::{Dataset, StoredSample};
use crate::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "A2O_THREADS";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const STEP_LOG: &str = "train.log";
pub const EPOCH_LOG: &str = "epochs.tsv";
const STEP_HEADER: &str = "step\tlr\tL_total\tL_seg\tL_curve\tL_illum";
const EPOCH_HEADER: &str = "epoch\ttrain_loss\tval_dsc\tseconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeights,
    /// Score validation masks by per-pixel argmax instead of thresholding
    /// each class at probability one half.
    pub eval_argmax: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 2,
            lr0: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-5,
            seed: 0,
            augment: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            eval_argmax: false,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        // written negated so NaN rates are rejected too
        if !(self.lr_min <= self.lr0) || self.lr_min < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr0 and weight_decay >= 0, got lr0 {} lr_min {} wd {}",
                self.lr0, self.lr_min, self.weight_decay
            )));
        }
        if !(0.0..=180.0).contains(&self.augment.rotation_deg) {
            return Err(Error::Config("rotation_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }
}

/// Contents of a configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Worker threads allowed by the environment, at least one.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Model inputs of a sample.
pub fn inputs<T: Real>(
    cfg: &ModelConfig,
    s: &StoredSample,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if (s.height(), s.width()) != (cfg.height, cfg.width) {
        return Err(Error::Invalid(format!(
            "sample {} is {}x{} but the model expects {}x{}",
            s.id,
            s.height(),
            s.width(),
            cfg.height,
            cfg.width
        )));
    }
    let aux = match (&s.aux, cfg.aux_channel) {
        (Some(a), true) => Some(Tensor::new(
            vec![1, cfg.height, cfg.width],
            a.iter().map(|&v| T::of(f64::from(v))).collect(),
        )?),
        (None, true) => {
            return Err(Error::Invalid(format!(
                "sample {} has no aux channel",
                s.id
            )))
        }
        (_, false) => None,
    };
    Ok((s.image.to_tensor(), aux))
}

/// Forward pass and weighted objective of one sample. Disabled terms enter
/// as zero.
pub fn sample_objective<'g, T: Real>(
    cfg: &ModelConfig,
    weights: LossWeights,
    p: &Bound<'g, T>,
    g: &'g Graph<T>,
    s: &StoredSample,
    mode: Mode,
) -> Result<(Var<'g, T>, LossValues, Forward<'g, T>)> {
    let (image, aux) = inputs::<T>(cfg, s)?;
    let f = model::model_forward(cfg, p, g, &image, aux.as_ref(), mode)?;
    let comp = cfg.components;
    let seg = objectives::seg_loss(f.logits, &s.mask)?;
    let curve = if comp.asco && comp.curve_loss {
        let raster = match mode {
            Mode::Train => MinMode::soft(cfg.sigma_raster),
            Mode::Eval => MinMode::Hard,
        };
        let lc = CurveLossConfig {
            sigma: cfg.sigma_raster,
            raster_samples: cfg.raster_samples,
            mode: raster,
        };
        objectives::curve_loss(
            g,
            &f.curve_trace(),
            &s.class_curves(),
            &s.mask,
            cfg.height,
            cfg.width,
            lc,
        )?
    } else {
        g.scalar(T::zero())
    };
    let illum = if comp.ifc && comp.illum_loss {
        objectives::illum_loss(f.compensation.field, f.compensation.gain)?
    } else {
        g.scalar(T::zero())
    };
    let (total, values) = objectives::total_loss(LossParts { seg, curve, illum }, weights)?;
    Ok((total, values, f))
}

/// Loss values and parameter gradients of one sample.
pub fn sample_gradients(
    cfg: &ModelConfig,
    weights: LossWeights,
    params: &ParamSet<f32>,
    s: &StoredSample,
) -> Result<(LossValues, BTreeMap<String, Tensor<f32>>)> {
    let g = Graph::new();
    let b = params.bind(&g);
    let (total, values, _) = sample_objective(cfg, weights, &b, &g, s, Mode::Train)?;
    let grads = g.backward(total)?;
    Ok((values, grads.into_params()))
}

fn accumulate(acc: &mut BTreeMap<String, Tensor<f32>>, grads: BTreeMap<String, Tensor<f32>>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Segmentation logits `[3, H, W]` of one sample, flattened.
pub fn predict_logits(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    s: &StoredSample,
) -> Result<Vec<f32>> {
    let g = Graph::new();
    let b = params.bind_frozen(&g);
    let (image, aux) = inputs::<f32>(cfg, s)?;
    let f = model::model_forward(cfg, &b, &g, &image, aux.as_ref(), Mode::Eval)?;
    Ok(f.logits.value().data().to_vec())
}

/// Per-class scores of predicted logits against a sample's mask.
pub fn score_logits(
    logits: &[f32],
    s: &StoredSample,
    argmax: bool,
) -> Result<[ClassScores; NUM_CLASSES]> {
    let (h, w) = (s.height(), s.width());
    let pred = if argmax {
        metrics::argmax_logits(logits, h * w)?
    } else {
        metrics::binarize_logits(logits, h * w)?
    };
    let mut out = [ClassScores {
        dsc: 0.0,
        iou: 0.0,
        assd: None,
    }; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        *o = metrics::score(&pred[c], &metrics::class_mask(&s.mask, c), h, w)?;
    }
    Ok(out)
}

/// Scores every sample of `data`, spreading samples over `threads` workers.
/// The report does not depend on the thread count.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    data: &Dataset,
    argmax: bool,
    threads: usize,
) -> Result<EvalReport> {
    let n = data.len();
    let threads = threads.clamp(1, n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let scored: Vec<Result<Vec<[ClassScores; NUM_CLASSES]>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| score_logits(&predict_logits(cfg, params, s)?, s, argmax))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut report = EvalReport::default();
    let mut samples = data.samples.iter();
    for part in scored {
        for scores in part? {
            let s = samples.next().expect("one score per sample");
            report.push(s.id.clone(), scores);
        }
    }
    report.finish();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory if it exists.
    pub resume: bool,
    pub threads: usize,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            resume: false,
            threads: 1,
            stop_after: None,
            verbose: false,
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    /// Epochs run by this call.
    pub epochs: Vec<EpochRecord>,
    pub best_val_dsc: Option<f64>,
    pub out_dir: PathBuf,
}

/// Permutation and augmentation draws of one epoch.
pub fn epoch_plan(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<(usize, AugmentDraw)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| (i, AugmentDraw::sample(&cfg.augment, &mut rng)))
        .collect()
}

fn write_header_if_new(path: &Path, header: &str) -> Result<()> {
    if !path.exists() {
        fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Keeps the header and the first `keep` records of a log.
fn truncate_log(path: &Path, header: &str, keep: usize) -> Result<()> {
    let lines: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .skip(1)
            .take(keep)
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?,
        Err(_) => Vec::new(),
    };
    let mut text = format!("{header}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on `data/train`, validating on `data/val` after every epoch.
/// Writes `last.ckpt`, `best.ckpt`, the per-step log and the per-epoch log
/// into `out`.
pub fn train(
    run: &RunConfig,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    run.validate()?;
    let train_set = Dataset::open(&data.join("train"))?;
    let val_set = Dataset::open(&data.join("val"))?;
    train_on(run, &train_set, &val_set, out, opts)
}

pub fn train_on(
    run: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    run.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (mcfg, tcfg) = (&run.model, &run.train);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (last_path, best_path) = (out.join(LAST_CKPT), out.join(BEST_CKPT));
    let (step_log, epoch_log) = (out.join(STEP_LOG), out.join(EPOCH_LOG));
    let train_json = serde_json::to_value(tcfg)?;

    let mut ckpt = if opts.resume && last_path.exists() {
        let c = Checkpoint::load(&last_path)?;
        if c.meta.model != *mcfg || c.meta.train.as_ref() != Some(&train_json) {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        truncate_log(&step_log, STEP_HEADER, c.meta.optim_step as usize)?;
        truncate_log(&epoch_log, EPOCH_HEADER, c.meta.epoch)?;
        c
    } else {
        for p in [&step_log, &epoch_log] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        let mut c = Checkpoint::new(mcfg.clone(), model::init_params(mcfg)?);
        c.meta.train = Some(train_json.clone());
        c.optim = Some(AdamW::new(tcfg.weight_decay));
        c
    };
    write_header_if_new(&step_log, STEP_HEADER)?;
    write_header_if_new(&epoch_log, EPOCH_HEADER)?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(tcfg.batch) as u64;
    let total_steps = steps_per_epoch * tcfg.epochs as u64;
    let last_epoch = opts.stop_after.map_or(tcfg.epochs, |s| s.min(tcfg.epochs));
    let mut records = Vec::new();

    for epoch in ckpt.meta.epoch..last_epoch {
        let started = Instant::now();
        let plan = epoch_plan(tcfg, epoch, n);
        let mut epoch_loss = 0.0;
        let run_batches = |next: &mut dyn FnMut() -> StoredSample,
                           ckpt: &mut Checkpoint,
                           epoch_loss: &mut f64|
         -> Result<()> {
            for batch in plan.chunks(tcfg.batch) {
                let mut acc = BTreeMap::new();
                let mut mean = LossValues::default();
                for _ in batch {
                    let s = next();
                    let (v, grads) = sample_gradients(mcfg, tcfg.loss_weights, &ckpt.params, &s)?;
                    accumulate(&mut acc, grads);
                    mean.total += v.total;
                    mean.seg += v.seg;
                    mean.curve += v.curve;
                    mean.illum += v.illum;
                }
                let k = batch.len() as f32;
                for g in acc.values_mut() {
                    for x in g.data_mut() {
                        *x /= k;
                    }
                }
                let opt = ckpt
                    .optim
                    .as_mut()
                    .expect("training checkpoint has optimizer state");
                let lr = cosine_lr(opt.step, total_steps, tcfg.lr0, tcfg.lr_min);
                opt.step(&mut ckpt.params, &acc, lr)?;
                let kf = f64::from(k);
                *epoch_loss += mean.total;
                append(
                    &step_log,
                    &format!(
                        "{}\t{lr:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        opt.step,
                        mean.total / kf,
                        mean.seg / kf,
                        mean.curve / kf,
                        mean.illum / kf
                    ),
                )?;
            }
            Ok(())
        };
        let augmented = |i: usize, d: &AugmentDraw| augment::apply(&train_set.samples[i], d);
        if opts.threads > 1 {
            // one loader thread prepares samples ahead of the optimizer
            let (tx, rx) = mpsc::sync_channel(4);
            std::thread::scope(|scope| -> Result<()> {
                let plan_ref = &plan;
                scope.spawn(move || {
                    for (i, d) in plan_ref {
                        if tx.send(augmented(*i, d)).is_err() {
                            break;
                        }
                    }
                });
                let mut next = || rx.recv().expect("loader thread stopped early");
                let res = run_batches(&mut next, &mut ckpt, &mut epoch_loss);
                drop(rx);
                res
            })?;
        } else {
            let mut it = plan.iter().map(|(i, d)| augmented(*i, d));
            let mut next = || it.next().expect("one sample per plan entry");
            run_batches(&mut next, &mut ckpt, &mut epoch_loss)?;
        }

        let val_dsc = if val_set.is_empty() {
            0.0
        } else {
            evaluate(mcfg, &ckpt.params, val_set, tcfg.eval_argmax, opts.threads)?
                .mean
                .dsc
        };
        ckpt.meta.epoch = epoch + 1;
        ckpt.meta.val_dsc = Some(val_dsc);
        let improved = ckpt.meta.best_val_dsc.is_none_or(|b| val_dsc > b);
        if improved {
            ckpt.meta.best_val_dsc = Some(val_dsc);
        }
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(&best_path)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / n as f64,
            val_dsc,
            seconds: started.elapsed().as_secs_f64(),
        };
        append(
            &epoch_log,
            &format!(
                "{}\t{:.6}\t{:.4}\t{:.1}",
                record.epoch, record.train_loss, record.val_dsc, record.seconds
            ),
        )?;
        if opts.verbose {
            eprintln!(
                "epoch {:>3}/{}  loss {:.4}  val dsc {:.2}  ({:.0}s)",
                record.epoch, tcfg.epochs, record.train_loss, record.val_dsc, record.seconds
            );
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        best_val_dsc: ckpt.meta.best_val_dsc,
        params: ckpt.params,
        epochs: records,
        out_dir: out.to_path_buf(),
    })
}
