use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use sdcpc_core::bench::{self, BenchConfig, Precision};
use sdcpc_core::config::{RunConfig, DEFAULT_DATA_SEED};
use sdcpc_core::datagen::{generate_dataset, ClipParams, Dataset};
use sdcpc_core::eval::{evaluate, VC_WINDOWS};
use sdcpc_core::gradcheck;
use sdcpc_core::train::{load_checkpoint, train};

#[derive(Parser)]
#[command(name = "sdcpc", version, about = "Toy-scale video semantic segmentation with SD-CPC")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long, default_value_t = DEFAULT_DATA_SEED)]
        seed: u64,
        /// Trailing clips held out for validation.
        #[arg(long, default_value_t = 40)]
        val: usize,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split of a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Time the attention mechanisms and audit the FLOP counters.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// JSON summary path; defaults to the CSV path with a .json extension.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        f32: bool,
    },
    /// Compare every backward rule against finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData { out, clips, seed, val } => {
            if val > clips {
                bail!("validation count {val} exceeds clip count {clips}");
            }
            let m = generate_dataset(&out, clips, val, seed, &ClipParams::default())
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            info!("wrote {} clips ({} train) to {}", m.clips.len(), m.train, out.display());
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let t0 = Instant::now();
            let out = train(&cfg)?;
            info!(
                "trained {} steps in {:.1}s; final checkpoint {}",
                out.log.len(),
                t0.elapsed().as_secs_f64(),
                out.final_checkpoint.display()
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            report,
            train_split,
        } => {
            let (_, model, store) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let clips = if train_split { &ds.train } else { &ds.val };
            let r = evaluate(&model, &store, clips, &VC_WINDOWS)?;
            fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            info!("miou {:.4} wiou {:.4} mvc {:?}", r.metrics.miou, r.metrics.wiou, r.metrics.mvc);
        }
        Cmd::Bench {
            out,
            summary,
            n,
            repeats,
            f32,
        } => {
            let mut cfg = BenchConfig {
                repeats,
                precision: if f32 { Precision::F32 } else { Precision::F64 },
                ..BenchConfig::default()
            };
            if let Some(n) = n {
                cfg.ns = n;
            }
            let (rows, sum) = bench::run(&cfg)?;
            bench::write_csv(&rows, &mut BufWriter::new(File::create(&out)?))?;
            let sp = summary.unwrap_or_else(|| out.with_extension("json"));
            fs::write(&sp, serde_json::to_string_pretty(&sum)?)?;
            for (m, s) in &sum.slopes {
                info!("{m}: log-log slope {s:.3}");
            }
        }
        Cmd::CheckGrad { instances, seed, report } => {
            let reports = gradcheck::run_all(instances, seed)?;
            for r in &reports {
                let verdict = if r.max_rel_error <= gradcheck::TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<20} {:>10.3e} {verdict}", r.name, r.max_rel_error);
            }
            if let Some(p) = report {
                fs::write(p, serde_json::to_string_pretty(&reports)?)?;
            }
            if !gradcheck::all_pass(&reports) {
                bail!("gradient check failed above {:e}", gradcheck::TOLERANCE);
            }
        }
    }
    Ok(())
}
