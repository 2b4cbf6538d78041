use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hyperspec::accounting::{accounting_config, flops_report, param_report};
use hyperspec::checkpoint::Checkpoint;
use hyperspec::data::dataset::STATS_FILE;
use hyperspec::data::storage::read_patch;
use hyperspec::data::{generate, Dataset, GenConfig, StatsOptions};
use hyperspec::gradcheck::{default_options, embedding_check, objective_check};
use hyperspec::train::{linear_probe, random_backbone_probe, ProbeConfig, TrainConfig, Trainer};
use hyperspec::{HyperMae, ModelConfig, TextEmbeddingProvider};
use numerics::opcheck::{check_op, op_cases};
use numerics::ParamStore;

#[derive(Parser)]
#[command(
    name = "hyperspec",
    version,
    about = "Hypernetwork-embedded hyperspectral masked autoencoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset with statistics and manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        patches_per_sensor: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.005)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute normalization statistics for a dataset directory.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        clip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the staged pretraining plan of a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on a frozen checkpoint, with a random-backbone control.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter or FLOP accounting of the default embedding at ViT-Base size.
    Report {
        what: ReportKind,
        #[arg(long, default_value_t = 100)]
        channels: usize,
        #[arg(long, default_value_t = 784)]
        tokens: usize,
    },
    /// Finite-difference gradient checks of every operation and of the whole
    /// model on toy geometries.
    Gradcheck {
        /// Check every parameter entry instead of a sample per block.
        #[arg(long)]
        full: bool,
    },
    /// Print the header and band ranges of a patch file.
    Inspect { patch: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Params,
    Flops,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            patches_per_sensor,
            size,
            classes,
            noise,
            seed,
        } => {
            let cfg = GenConfig {
                patches_per_sensor,
                size,
                classes,
                noise,
                seed,
                ..GenConfig::default()
            };
            let (mut ds, summary) = generate(&cfg)?;
            ds.compute_stats(&StatsOptions {
                seed,
                ..StatsOptions::default()
            })?;
            ds.write(&out)?;
            println!(
                "wrote {} patches ({} rejected for missing data) over {} sensors to {}",
                summary.accepted,
                summary.rejected,
                ds.sensors.len(),
                out.display()
            );
        }
        Command::Stats { data, clip, seed } => {
            let mut ds = Dataset::open(&data)?;
            let stats = ds.compute_stats(&StatsOptions {
                clip,
                seed,
                ..StatsOptions::default()
            })?;
            stats.save(&data.join(STATS_FILE))?;
            for (key, s) in &stats.sensors {
                println!(
                    "{key}: {} bands, {} pixels, {} floored",
                    s.mean.len(),
                    s.population,
                    s.floored.len()
                );
            }
        }
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let ds = Dataset::open(&data)?;
            if ds.stats.is_none() {
                bail!("{} has no {STATS_FILE}; run `hyperspec stats` first", data.display());
            }
            let mut trainer = Trainer::<f32>::new(cfg, TextEmbeddingProvider::builtin())?;
            if let Some(ckpt) = resume {
                trainer.load_checkpoint(&ckpt)?;
            }
            let reports = trainer.run_schedule(&ds, Some(&out), &mut |m| println!("{m}"))?;
            for r in reports {
                if let Some(p) = r.checkpoint {
                    println!("{}: {} patches, checkpoint {}", r.name, r.patches, p.display());
                }
            }
        }
        Command::Probe {
            ckpt,
            data,
            epochs,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg: ModelConfig = ck.config.clone();
            let mut store = ParamStore::<f32>::new();
            let model = HyperMae::build(&cfg, &mut store, 0)?;
            ck.restore(&cfg, &mut store)?;
            let ds = Dataset::open(&data)?;
            let provider = TextEmbeddingProvider::builtin();
            let pc = ProbeConfig {
                epochs,
                seed,
                ..ProbeConfig::default()
            };
            let r = linear_probe(&model, &store, &ds, &provider, &pc)?;
            println!(
                "pretrained: accuracy {:.4} (train {:.4}), {} trainable parameters, {}/{} train/test",
                r.accuracy, r.train_accuracy, r.trainable_params, r.train, r.test
            );
            let c = random_backbone_probe(&cfg, seed ^ 0x5eed, &ds, &provider, &pc)?;
            println!(
                "random backbone: accuracy {:.4} (train {:.4})",
                c.accuracy, c.train_accuracy
            );
        }
        Command::Report { what, channels, tokens } => match what {
            ReportKind::Params => println!("{}", param_report(&accounting_config(), channels)?),
            ReportKind::Flops => println!("{}", flops_report(&accounting_config(), channels, tokens)?),
        },
        Command::Gradcheck { full } => {
            let mut failed = 0;
            for case in op_cases() {
                let mut worst: f64 = 0.0;
                let mut ok = true;
                for seed in 0..100 {
                    let r = check_op(&case, seed)?;
                    worst = worst.max(r.max_rel_err());
                    ok &= r.passed();
                }
                println!(
                    "op {:<22} seeds=100 max_rel_err={worst:.3e} {}",
                    case.name,
                    if ok { "pass" } else { "FAIL" }
                );
                if !ok {
                    failed += 1;
                }
            }
            let cfg = ModelConfig::toy();
            for c in 2..=6 {
                let mut opts = default_options(c as u64);
                if full {
                    opts.per_block = None;
                }
                for (what, report) in [
                    ("embedding", embedding_check(&cfg, c, c as u64, &opts)?),
                    ("objective", objective_check(&cfg, c, c as u64, &opts)?),
                ] {
                    let status = if report.passed() { "pass" } else { "FAIL" };
                    println!(
                        "C={c} {what:<9} entries={:<6} max_rel_err={:.3e} {status}",
                        report.checked(),
                        report.max_rel_err()
                    );
                    if !report.passed() {
                        failed += 1;
                        println!("{report}");
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Inspect { patch } => {
            let p = read_patch(&patch)?;
            let s = p.cube.data.shape();
            println!("sensor     {}", p.cube.sensor.describe());
            println!("shape      {} x {} x {}", s[0], s[1], s[2]);
            println!("valid      {:.3}", p.cube.valid_fraction);
            match p.label {
                Some(l) => println!("label      {l}"),
                None => println!("label      none"),
            }
            let hw = s[1] * s[2];
            let d = p.cube.data.data();
            let step = (s[0] / 8).max(1);
            for b in (0..s[0]).step_by(step) {
                let band = &d[b * hw..(b + 1) * hw];
                let (lo, hi) = band
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                println!(
                    "band {b:>4}  {:.4} um  min {lo:.4}  max {hi:.4}",
                    p.cube.sensor.wavelengths_um[b]
                );
            }
        }
    }
    Ok(())
}
