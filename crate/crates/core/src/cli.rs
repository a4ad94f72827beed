//! Command-line interface: each subcommand drives one pipeline step and
//! writes its artifacts (checkpoints, CSV tables, config echo) into the
//! configured output directory.
//!
//! Exit codes: 0 success, 1 runtime failure (one-line reason on stderr),
//! 2 usage errors (malformed flags, unknown subcommands).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{QartError, Result};
use crate::io::checkpoint::{digest_tensors, load_tensors, save_tensors};
use crate::io::config::RunConfig;
use crate::io::data::{generate_dataset, save_dataset};
use crate::metrics::MetricReport;
use crate::model::OsdsrNet;
use crate::pipeline::{
    ablate, calibrate, evaluate, maxmin_baseline, sweep_timesteps, train_backbone, MethodFlags,
    QuantizedModel,
};
use crate::quant::QuantizerMode;
use crate::reparam::FqInit;
use crate::rng::seeded;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "qartsr",
    version,
    about = "Quantization laboratory for a one-step super-resolution toy model"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory override (also overridable with QART_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Static max-min ranges, no reparameterization, no training.
    Maxmin,
    /// Low-rank skip, equivalent transformation and learned step sizes
    /// (ranges calibrated; train with the calibrate subcommand).
    Qartsr,
}

#[derive(Clone, Copy)]
struct BitsPair(u32, u32);

impl std::str::FromStr for BitsPair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<BitsPair, String> {
        let (w, a) = s
            .split_once(',')
            .ok_or_else(|| format!("expected W,A (e.g. 4,4), got {:?}", s))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| format!("bad bit width {:?}: {}", v, e))
        };
        Ok(BitsPair(parse(w)?, parse(a)?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset and write it as PPM images.
    GenData(ConfigArgs),
    /// Train the full-precision backbone at a fixed timestep.
    TrainBackbone {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the configured training timestep.
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Measure quantization error in the restored latent across timesteps.
    SweepTimestep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Weight,activation bit widths; defaults to the configured pair.
        #[arg(long)]
        bits: Option<BitsPair>,
        /// Comma-separated timesteps; defaults to the configured sweep list.
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<usize>>,
    },
    /// Build a quantized model from a backbone without stage training.
    Quantize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Weight,activation bit widths; defaults to the configured pair.
        #[arg(long)]
        bits: Option<BitsPair>,
    },
    /// Reversed per-module calibration (plus extended end-to-end training)
    /// of the quantizers against a frozen backbone.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Skip the per-module stages (end-to-end phase only).
        #[arg(long)]
        no_stages: bool,
        /// Skip the extended end-to-end steps.
        #[arg(long)]
        no_extended: bool,
    },
    /// Evaluate a quantized checkpoint against its full-precision backbone.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Quantized model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the six-arm component study end to end.
    Ablate(ConfigArgs),
    /// Storage and compute accounting for a quantized checkpoint.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_cfg(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Create the output directory and drop the effective config next to the
/// artifacts so every run is traceable.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config_echo.json"), cfg.echo())?;
    Ok(out)
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        cfg.schedule.t_max,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
}

fn load_backbone(path: &PathBuf) -> Result<OsdsrNet> {
    let tensors = load_tensors(path)?;
    if tensors.iter().any(|(n, _)| n == "meta.kind") {
        return Err(QartError::Data(format!(
            "{} is a quantized-model checkpoint, expected a backbone",
            path.display()
        )));
    }
    OsdsrNet::from_state(&tensors)
}

fn load_quantized(path: &PathBuf) -> Result<QuantizedModel> {
    let tensors = load_tensors(path)?;
    if !tensors.iter().any(|(n, _)| n == "meta.kind") {
        return Err(QartError::Data(format!(
            "{} is a backbone checkpoint, expected a quantized model",
            path.display()
        )));
    }
    QuantizedModel::from_state(&tensors)
}

fn write_metric_csv(path: &PathBuf, report: &MetricReport) -> Result<()> {
    let mut text = String::from(MetricReport::csv_header());
    text.push('\n');
    text.push_str(&report.to_csv_row());
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData(args) => {
            let cfg = load_cfg(&args)?;
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let dir = out.join("data");
            save_dataset(&dir, &ds, cfg.seed, cfg.data.noise)?;
            println!(
                "wrote {} image pairs ({}x{} -> {}x{}) to {}",
                ds.items.len(),
                ds.lr_size(),
                ds.lr_size(),
                ds.hr_size,
                ds.hr_size,
                dir.display()
            );
        }
        Command::TrainBackbone {
            cfg: args,
            timestep,
        } => {
            let mut cfg = load_cfg(&args)?;
            if let Some(t) = timestep {
                cfg.backbone.timestep = t;
            }
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let sched = schedule_of(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let t = cfg.backbone.timestep;
            let mut net = OsdsrNet::new(cfg.net, cfg.seed)?;
            let record = train_backbone(&mut net, &sched, &ds, t, &cfg.backbone)?;
            let ckpt = out.join(format!("backbone_t{}.qart", t));
            save_tensors(&ckpt, &net.state_tensors())?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in record.losses.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i, l));
            }
            std::fs::write(out.join(format!("backbone_t{}_train.csv", t)), csv)?;
            println!(
                "trained at t={} for {} steps: loss {:.6} -> {:.6}, psnr vs truth {:.2} dB",
                t,
                record.steps,
                record.start_loss(),
                record.final_loss(),
                record.psnr_vs_truth
            );
            println!("checkpoint: {}", ckpt.display());
        }
        Command::SweepTimestep {
            cfg: args,
            checkpoint,
            bits,
            t_list,
        } => {
            let mut cfg = load_cfg(&args)?;
            if let Some(BitsPair(wb, ab)) = bits {
                cfg.calib.w_bits = wb;
                cfg.calib.a_bits = ab;
            }
            if let Some(list) = t_list {
                cfg.sweep_timesteps = list;
            }
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let sched = schedule_of(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let net = load_backbone(&checkpoint)?;
            let profile = sweep_timesteps(
                &net,
                &sched,
                &ds,
                &cfg.sweep_timesteps,
                cfg.calib.w_bits,
                cfg.calib.a_bits,
            )?;
            std::fs::write(out.join("timestep_profile.csv"), profile.to_csv())?;
            for (t, lam, err) in &profile.rows {
                println!("t={:<5} lambda={:.6} latent_error={:.6e}", t, lam, err);
            }
            println!("best timestep: {}", profile.best_t()?);
        }
        Command::Quantize {
            cfg: args,
            checkpoint,
            method,
            bits,
        } => {
            let cfg = load_cfg(&args)?;
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let sched = schedule_of(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let net = load_backbone(&checkpoint)?;
            let t = net.train_t.ok_or_else(|| {
                QartError::Data("backbone checkpoint carries no training timestep".into())
            })?;
            let BitsPair(wb, ab) = bits.unwrap_or(BitsPair(cfg.calib.w_bits, cfg.calib.a_bits));
            let (qm, label) = match method {
                Method::Maxmin => (maxmin_baseline(&net, &sched, &ds, t, wb, ab)?, "maxmin"),
                Method::Qartsr => {
                    // Structure and range calibration only; training happens
                    // in the calibrate subcommand.
                    let caches = crate::pipeline::fp_caches(&net, &sched, &ds, t)?;
                    let mut fq_cfg = FqInit::new(wb, ab, QuantizerMode::LearnedStep);
                    fq_cfg.rank = cfg.calib.rank;
                    fq_cfg.rank_f = cfg.calib.rank_f;
                    let mut rng = seeded(cfg.seed);
                    let mut modules = Vec::new();
                    for k in 0..net.module_count() {
                        let samples: Vec<&Tensor> =
                            caches.iter().map(|c| &c.module_inputs[k]).collect();
                        modules.push(net.build_module_quant(k, &samples, t, &fq_cfg, &mut rng)?);
                    }
                    (
                        QuantizedModel {
                            backbone_digest: digest_tensors(&net.state_tensors()),
                            net,
                            modules,
                            t,
                            w_bits: wb,
                            a_bits: ab,
                        },
                        "qartsr",
                    )
                }
            };
            let ckpt = out.join(format!("quantized_{}_w{}a{}.qart", label, wb, ab));
            save_tensors(&ckpt, &qm.state_tensors())?;
            println!("quantized with {} at W{}A{}, t={}", label, wb, ab, qm.t);
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Calibrate {
            cfg: args,
            checkpoint,
            no_stages,
            no_extended,
        } => {
            let cfg = load_cfg(&args)?;
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let sched = schedule_of(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let net = load_backbone(&checkpoint)?;
            let t = net.train_t.ok_or_else(|| {
                QartError::Data("backbone checkpoint carries no training timestep".into())
            })?;
            let flags = MethodFlags {
                per_module_stages: !no_stages,
                extended: !no_extended,
            };
            let (qm, record) = calibrate(&net, &sched, &ds, t, &cfg.calib, cfg.seed, flags)?;
            let ckpt = out.join(format!(
                "quantized_calibrated_w{}a{}.qart",
                cfg.calib.w_bits, cfg.calib.a_bits
            ));
            save_tensors(&ckpt, &qm.state_tensors())?;
            std::fs::write(out.join("calibration_stages.csv"), record.to_csv())?;
            for s in &record.stages {
                println!(
                    "stage {:<14} {:>4} steps: loss {:.6} -> {:.6}",
                    s.name, s.steps, s.start_loss, s.end_loss
                );
            }
            println!("backbone digest (unchanged): {}", record.backbone_digest);
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Eval {
            cfg: args,
            checkpoint,
        } => {
            let cfg = load_cfg(&args)?;
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let sched = schedule_of(&cfg)?;
            let ds = generate_dataset(cfg.data.count, cfg.data.hr_size, cfg.data.noise, cfg.seed)?;
            let qm = load_quantized(&checkpoint)?;
            let tag = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let report = evaluate(&qm, &sched, &ds, &tag)?;
            write_metric_csv(&out.join(format!("eval_{}.csv", tag)), &report)?;
            println!("{}", MetricReport::csv_header());
            println!("{}", report.to_csv_row());
        }
        Command::Ablate(args) => {
            let cfg = load_cfg(&args)?;
            cfg.validate()?;
            let out = prepare_out(&cfg)?;
            let outcome = ablate(&cfg)?;
            std::fs::write(out.join("ablation.csv"), outcome.to_csv())?;
            std::fs::write(out.join("timestep_profile.csv"), outcome.profile.to_csv())?;
            println!(
                "swept best timestep: {} (late reference: {})",
                outcome.best_t, outcome.hi_t
            );
            println!("arm,t,psnr_db,ssim,latent_error");
            for arm in &outcome.arms {
                println!(
                    "{},{},{:.3},{:.4},{:.6e}",
                    arm.name, arm.t, arm.report.psnr_db, arm.report.ssim, arm.report.latent_error
                );
            }
        }
        Command::Report {
            cfg: args,
            checkpoint,
        } => {
            let cfg = load_cfg(&args)?;
            let out = prepare_out(&cfg)?;
            let qm = load_quantized(&checkpoint)?;
            let cost = qm.cost_report()?;
            std::fs::write(out.join("cost_report.csv"), cost.to_csv())?;
            println!("quantized at W{}A{} for t={}", qm.w_bits, qm.a_bits, qm.t);
            println!("backbone digest: {}", qm.backbone_digest);
            println!(
                "size: {:.1} -> {:.1} fp32-equivalents ({:.2}% smaller)",
                cost.fp_size,
                cost.effective_size,
                cost.size_reduction * 100.0
            );
            println!(
                "ops:  {:.0} -> {:.0} fp32-MAC-equivalents ({:.2}% cheaper)",
                cost.fp_macs,
                cost.effective_macs,
                cost.ops_reduction * 100.0
            );

            // Aggregate evaluation tables already present in the output
            // directory into one summary with a uniform schema.
            let mut summary = String::from("source,tag,w_bits,a_bits,psnr_db,ssim,latent_error\n");
            let mut rows = 0usize;
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&out)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .collect();
            entries.sort();
            for path in entries {
                let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                    continue;
                };
                if name.starts_with("eval_") && name.ends_with(".csv") {
                    for line in std::fs::read_to_string(&path)?
                        .lines()
                        .skip(1)
                        .filter(|l| !l.is_empty())
                    {
                        summary.push_str(&format!("eval,{}\n", line));
                        rows += 1;
                    }
                } else if name == "ablation.csv" {
                    for line in std::fs::read_to_string(&path)?
                        .lines()
                        .skip(1)
                        .filter(|l| !l.is_empty())
                    {
                        let f: Vec<&str> = line.split(',').collect();
                        if f.len() >= 7 {
                            summary.push_str(&format!(
                                "ablation,{},{},{},{},{},{}\n",
                                f[0], f[2], f[3], f[4], f[5], f[6]
                            ));
                            rows += 1;
                        }
                    }
                }
            }
            if rows > 0 {
                std::fs::write(out.join("summary.csv"), &summary)?;
                println!("aggregated {} evaluation rows into summary.csv", rows);
            }
        }
    }
    Ok(())
}

pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::ExitCode::from(1)
        }
    }
}
