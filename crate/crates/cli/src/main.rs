use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2o_core::checkpoint::Checkpoint;
use a2o_core::curve::LandmarkClass;
use a2o_core::infer::{infer, InferOptions};
use a2o_core::synth::{gen_dataset, read_scaled, Dataset};
use a2o_core::train::{evaluate, threads_from_env, train, RunConfig, TrainOptions};
use a2o_core::{gradsuite, image, Result};
use a2o_tensor::GradCheckConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "a2o",
    version,
    about = "Curvilinear landmark detection under uneven illumination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with `train/` and `val/` splits.
    GenData {
        /// Training samples.
        #[arg(long)]
        n: usize,
        /// Validation samples; a quarter of `--n` by default.
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Also write a pseudo-depth channel.
        #[arg(long)]
        aux: bool,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root holding `train/` and `val/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset split and write per-sample CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A split directory, or a dataset root whose `val/` split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Assign each pixel to its highest-scoring class instead of
        /// thresholding every class independently.
        #[arg(long)]
        argmax: bool,
    },
    /// Run a checkpoint on one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 16-bit auxiliary plane for models trained with one.
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        dump_illum: bool,
        #[arg(long)]
        dump_fosf: bool,
        #[arg(long)]
        dump_stages: bool,
    },
    /// Compare reverse-mode gradients with central finite differences.
    GradCheck {
        /// One of the check groups, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn split_dir(data: &Path) -> PathBuf {
    if data.join("index.json").is_file() {
        data.to_path_buf()
    } else {
        data.join("val")
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            n,
            n_val,
            out,
            seed,
            size,
            aux,
        } => {
            let n_val = n_val.unwrap_or((n / 4).max(1));
            gen_dataset(&out, n, n_val, seed, (size, size), aux)?;
            println!(
                "wrote {n} training and {n_val} validation samples to {}",
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
            quiet,
        } => {
            let run = RunConfig::load(&config)?;
            let opts = TrainOptions {
                resume,
                threads: threads_from_env(),
                stop_after,
                verbose: !quiet,
            };
            let outcome = train(&run, &data, &out, &opts)?;
            if let Some(best) = outcome.best_val_dsc {
                println!("best validation DSC {best:.2}");
            }
        }
        Command::Eval {
            ckpt,
            data,
            csv,
            argmax,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let set = Dataset::open(&split_dir(&data))?;
            let report = evaluate(&ck.meta.model, &ck.params, &set, argmax, threads_from_env())?;
            report.write_csv(&csv)?;
            let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            for (c, s) in report.classes.iter().enumerate() {
                let name = LandmarkClass::from_index(c).map_or("?", LandmarkClass::name);
                println!(
                    "{name:<10} DSC {:6.2}  IoU {:6.2}  ASSD {} ({} skipped)",
                    s.dsc,
                    s.iou,
                    fmt(s.assd),
                    s.skipped
                );
            }
            let m = &report.mean;
            println!(
                "{:<10} DSC {:6.2}  IoU {:6.2}  ASSD {}",
                "mean",
                m.dsc,
                m.iou,
                fmt(m.assd)
            );
        }
        Command::Infer {
            ckpt,
            image: path,
            out,
            aux,
            dump_illum,
            dump_fosf,
            dump_stages,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let img = image::read_ppm(&path)?;
            let aux = aux
                .map(|p| read_scaled(&p, img.height(), img.width()))
                .transpose()?;
            let opts = InferOptions {
                dump_illum,
                dump_fosf,
                dump_stages,
            };
            let res = infer(&ck, &img, aux.as_deref(), &out, opts)?;
            for f in &res.files {
                println!("{}", f.display());
            }
        }
        Command::GradCheck { module, eps, tol } => {
            let cfg = GradCheckConfig {
                eps,
                tol,
                ..GradCheckConfig::default()
            };
            let mut ok = true;
            for (name, report) in gradsuite::run(Some(&module), &cfg)? {
                let status = if report.passed() { "pass" } else { "FAIL" };
                print!("{status} {name}: {report}");
                ok &= report.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
