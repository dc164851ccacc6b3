use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsdet::checkpoint;
use fsdet::config::{self, ConfigFile, Mode, Overrides, Precision, RunConfig};
use fsdet::error::{CliError, Result};
use fsdet::records::{JsonlWriter, Record};
use fsdet::{export, oracle, suite};
use fsdet_core::autograd::OpKind;
use fsdet_core::detector::ModelToggles;
use fsdet_core::episodes::test_stream;
use fsdet_core::gradcheck::{gradcheck_all, FdConfig};
use fsdet_core::train::moving_average;
use fsdet_core::Scalar;

/// Few-shot object detection with dense relation distillation and
/// context-aware aggregation, on a synthetic shapes benchmark.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; command-line flags take precedence
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dataset seed for episodes, shot pools and the test stream [default: 7]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of independent fine-tune/eval runs [default: 10]
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Shots per class, one of 1, 2, 3, 5, 10 [default: 5; ablate: 1]
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Class split 0, 1 or 2; novel classes are those with id % 3 == split [default: 0]
    #[arg(long, global = true)]
    split: Option<usize>,
    /// Output directory [default: fsdet-out]
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Checkpoint to read (fine-tune, eval, ablate) or write (meta-train) [default for meta-train: <out>/meta.ckpt]
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Disable dense relation distillation
    #[arg(long, global = true)]
    no_drd: bool,
    /// Disable context-aware aggregation (single 8x8 RoI Align)
    #[arg(long, global = true)]
    no_cfa: bool,
    /// Fuse the three CFA resolutions with equal weights
    #[arg(long, global = true)]
    no_cfa_attn: bool,
    /// Channel-wise reweighting baseline (requires --no-drd)
    #[arg(long, global = true)]
    baseline_reweight: bool,
    /// Arithmetic precision for training and evaluation [default: f32]
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every differentiable operation (double precision)
    Gradcheck {
        /// Corrupt the backward rule of one operation, e.g. softmax
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Compare vectorized relation distillation and RoI Align with loop oracles
    Oracle,
    /// Meta-train on base-class episodes and write a checkpoint
    MetaTrain,
    /// Pool, fine-tune and evaluate --runs times from a meta-trained checkpoint
    FineTune,
    /// Evaluate one checkpoint on the test stream
    Eval {
        /// Run index whose shot pool provides the class prototypes [default: from checkpoint, else 0]
        #[arg(long)]
        run: Option<u64>,
        /// Dump attention maps, CFA weights and feature norms for the first N test images
        #[arg(long, value_name = "N", default_value_t = 0)]
        debug_dump: usize,
    },
    /// Paired runs of the full model, the model without CFA and the reweighting baseline
    Ablate,
    /// Write test images, shot pools and fine-tuning queries as PAM + CSV
    ExportData {
        /// Fine-tuning queries exported per run
        #[arg(long, default_value_t = 20)]
        queries: usize,
    },
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Command::Gradcheck { .. } => Mode::Gradcheck,
            Command::Oracle => Mode::Oracle,
            Command::MetaTrain => Mode::MetaTrain,
            Command::FineTune => Mode::FineTune,
            Command::Eval { .. } => Mode::Eval,
            Command::Ablate => Mode::Ablate,
            Command::ExportData { .. } => Mode::ExportData,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let c = &cli.common;
    let over = Overrides {
        seed: c.seed,
        runs: c.runs,
        k: c.k,
        split: c.split,
        out: c.out.clone(),
        checkpoint: c.checkpoint.clone(),
        precision: c.precision,
        no_drd: c.no_drd,
        no_cfa: c.no_cfa,
        no_cfa_attn: c.no_cfa_attn,
        baseline_reweight: c.baseline_reweight,
    };
    config::resolve(cli.command.mode(), &file, &over)
}

fn write_json(path: &std::path::Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(CliError::io(path))
}

fn gradcheck(cfg: &RunConfig, fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Config(format!("unknown operation {name:?}; expected one of {}", names.join(", ")))
        })?),
    };
    let report = gradcheck_all(cfg.seed, FdConfig { fault, ..FdConfig::default() })?;
    println!("{:<26} {:>12} {:>7} {:>6} {:>8}  status", "operation", "max_rel_err", "coords", "cases", "retries");
    for r in &report.rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<26} {:>12.3e} {:>7} {:>6} {:>8}  {status}", r.name, r.max_rel_err, r.coords, r.cases, r.retries);
    }
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    if report.passed() {
        println!("all {} rows within {:.0e}", report.rows.len(), report.rel_tol);
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for: {}", report.failures().join(", "))))
    }
}

fn run_oracle(cfg: &RunConfig) -> Result<()> {
    let rows = oracle::run_all(cfg.seed)?;
    println!("{:<14} {:>6} {:>12} {:>8}  status", "oracle", "cases", "max_abs_err", "tol");
    for r in &rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<14} {:>6} {:>12.3e} {:>8.0e}  {status}", r.name, r.cases, r.max_abs_err, r.tol);
    }
    write_json(&cfg.out.join("oracle.json"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("oracle mismatch: {}", failed.join(", "))))
    }
}

fn run_typed<T: Scalar>(cmd: &Command, mut cfg: RunConfig) -> Result<()> {
    match cmd {
        Command::MetaTrain => {
            let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(suite::META_CHECKPOINT));
            let (model, losses) = suite::meta_train::<T>(&cfg, Some(&cfg.out.join(suite::LOSS_LOG)))?;
            checkpoint::save(&path, &model, &suite::meta_checkpoint_meta(&cfg, losses.len()))?;
            let ma = moving_average(&losses, 100);
            let start = ma[ma.len().min(100) - 1];
            println!(
                "meta-trained {} steps; loss moving average {:.4} -> {:.4}; checkpoint {}",
                losses.len(),
                start,
                ma[ma.len() - 1],
                path.display()
            );
        }
        Command::FineTune => {
            let (model, meta) = suite::load_checkpoint::<T>(&mut cfg, "fine-tune")?;
            if meta.phase != "meta_train" {
                return Err(CliError::Config("fine-tune needs a meta-trained checkpoint".into()));
            }
            let test = test_stream(cfg.seed, &cfg.split_config()?, cfg.test_images)?;
            let mut out = Some(JsonlWriter::create(&suite::metrics_path(&cfg))?);
            let report = suite::run_suite(&cfg, &model, &test, &mut out)?;
            let a = &report.aggregate;
            println!(
                "{} runs at k={}: novel AP50 {:.4} ± {:.4}, base AP50 {:.4} ± {:.4}",
                a.runs, cfg.k, a.mean_novel_ap50, a.std_novel_ap50, a.mean_base_ap50, a.std_base_ap50
            );
        }
        Command::Eval { run, debug_dump } => {
            let (model, meta) = suite::load_checkpoint::<T>(&mut cfg, "eval")?;
            let k = meta.k.unwrap_or(cfg.k);
            let run_index = run.or(meta.run_index).unwrap_or(0);
            let test = test_stream(cfg.seed, &cfg.split_config()?, cfg.test_images)?;
            let m = suite::evaluate(&cfg, &model, k, run_index, &test)?;
            let mut w = JsonlWriter::create(&cfg.out.join("eval.jsonl"))?;
            w.write(&Record::Run { config: Box::new(cfg.clone()), metrics: m.clone() })?;
            for msg in &m.warnings {
                w.write(&Record::Warning { config: Box::new(cfg.clone()), run_index: Some(run_index), message: msg.clone() })?;
            }
            if *debug_dump > 0 {
                cfg.debug_dump_images = *debug_dump;
            }
            if cfg.debug_dump_images > 0 {
                let n = suite::debug_dump(&cfg, &model, k, run_index, &test, &cfg.out.join(suite::DEBUG_DUMP))?;
                println!("dumped {n} images to {}", cfg.out.join(suite::DEBUG_DUMP).display());
            }
            println!("run {run_index} k={k}: novel AP50 {:.4}, base AP50 {:.4}", m.mean_novel_ap50, m.mean_base_ap50);
        }
        Command::Ablate => {
            let mut full = None;
            if cfg.checkpoint.is_some() {
                let (m, meta) = suite::load_checkpoint::<T>(&mut cfg, "ablate")?;
                if meta.model.toggles != ModelToggles::default() || meta.phase != "meta_train" {
                    return Err(CliError::Config("ablate --checkpoint must be a meta-trained full model".into()));
                }
                full = Some(m);
            }
            let test = test_stream(cfg.seed, &cfg.split_config()?, cfg.test_images)?;
            let mut out = Some(JsonlWriter::create(&cfg.out.join("ablation.jsonl"))?);
            let report = suite::ablate::<T>(&cfg, full.as_ref(), &test, &mut out)?;
            let (full_mean, _) = fsdet_core::metrics::mean_std(&report.full_novel_ap50);
            println!("full model novel AP50 {full_mean:.4} over {} runs at k={}", report.runs, report.k);
            for c in &report.comparisons {
                println!(
                    "  vs {:<18} mean diff {:+.4} (std {:.4}); full >= variant: {}",
                    c.variant, c.mean_difference, c.std_difference, c.full_not_worse
                );
            }
        }
        Command::Gradcheck { .. } | Command::Oracle | Command::ExportData { .. } => unreachable!("precision-independent"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Gradcheck { inject_fault } => gradcheck(&cfg, inject_fault.as_deref()),
        Command::Oracle => run_oracle(&cfg),
        Command::ExportData { queries } => {
            let s = export::export_dataset(&cfg.out, cfg.seed, &cfg.split_config()?, cfg.k, cfg.runs, cfg.test_images, *queries)?;
            println!("wrote {} images in {} directories under {}", s.images, s.directories.len(), cfg.out.display());
            Ok(())
        }
        cmd => match cfg.precision {
            Precision::F32 => run_typed::<f32>(cmd, cfg),
            Precision::F64 => run_typed::<f64>(cmd, cfg),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
