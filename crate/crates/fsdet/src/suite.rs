//! Meta-training, multi-run fine-tuning with evaluation, single-checkpoint
//! evaluation and the paired ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fsdet_core::detector::{Detection, Detector, ModelToggles};
use fsdet_core::episodes::{self, model_input, EpisodeSampler, Phase, TestImage};
use fsdet_core::metrics::RunMetrics;
use fsdet_core::train::{self, CycleConfig, StepRecord};
use fsdet_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::records::{AblationReport, Aggregate, JsonlWriter, Record};

pub const META_CHECKPOINT: &str = "meta.ckpt";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const DEBUG_DUMP: &str = "debug_dump.jsonl";

fn progress(cfg: &RunConfig, label: &str, r: &StepRecord, t0: Instant) {
    if cfg.log_every > 0 && r.step % cfg.log_every == 0 {
        eprintln!(
            "[{label}] step {:>5} lr {:.5} loss {:.4} grad_norm {:.3} ({:.0}s)",
            r.step,
            r.lr,
            r.loss.total,
            r.grad_norm,
            t0.elapsed().as_secs_f64()
        );
    }
}

/// Meta-trains a fresh model on base-class episodes. Every step is logged
/// to `losses.jsonl` when `loss_log` is given.
pub fn meta_train<T: Scalar>(cfg: &RunConfig, loss_log: Option<&Path>) -> Result<(Detector<T>, Vec<f64>)> {
    let split = cfg.split_config()?;
    let mut model = Detector::<T>::new(cfg.model.clone(), cfg.model_seed)?;
    let mut sampler = EpisodeSampler::new(cfg.seed, split, Phase::MetaTrain, None, 0);
    let mut log = loss_log.map(JsonlWriter::create).transpose()?;
    let mut log_err = None;
    let t0 = Instant::now();
    let label = format!("meta-train {}", cfg.model.toggles.label());
    let losses = train::train(&mut model, &mut sampler, &cfg.meta_train, cfg.model_seed ^ 0x6d74, |r| {
        progress(cfg, &label, r, t0);
        if let Some(w) = log.as_mut() {
            if let Err(e) = w.write(r) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    Ok((model, losses.iter().map(|l| l.total).collect()))
}

pub fn meta_checkpoint_meta(cfg: &RunConfig, steps: usize) -> CheckpointMeta {
    CheckpointMeta {
        model: cfg.model.clone(),
        phase: "meta_train".into(),
        dataset_seed: cfg.seed,
        split: cfg.split,
        k: None,
        run_index: None,
        steps,
    }
}

/// Loads the checkpoint named in the configuration. A missing path or
/// file is a configuration error; the checkpoint's model configuration
/// replaces the one in `cfg`.
pub fn load_checkpoint<T: Scalar>(cfg: &mut RunConfig, what: &str) -> Result<(Detector<T>, CheckpointMeta)> {
    let Some(path) = cfg.checkpoint.clone() else {
        return Err(CliError::Config(format!("{what} needs a checkpoint (--checkpoint PATH)")));
    };
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, meta) = checkpoint::load::<T>(&path)?;
    if meta.split != cfg.split {
        return Err(CliError::Config(format!(
            "checkpoint was trained on split {}, configuration asks for split {}",
            meta.split, cfg.split
        )));
    }
    cfg.model = meta.model.clone();
    Ok((model, meta))
}

/// Result of [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
}

/// `cfg.runs` independent pool / fine-tune / eval cycles from one
/// meta-trained model, each emitted as a run record, then the aggregate.
pub fn run_suite<T: Scalar>(
    cfg: &RunConfig,
    meta_trained: &Detector<T>,
    test: &[TestImage],
    out: &mut Option<JsonlWriter>,
) -> Result<SuiteReport> {
    let mut runs = Vec::with_capacity(cfg.runs);
    for run_index in 0..cfg.runs as u64 {
        let t0 = Instant::now();
        let cycle = CycleConfig { dataset_seed: cfg.seed, split_id: cfg.split, k: cfg.k, run_index };
        let label = format!("fine-tune {} k={} run {run_index}", cfg.model.toggles.label(), cfg.k);
        let (model, mut m) = train::run_cycle(meta_trained, &cycle, &cfg.fine_tune, test, |r| progress(cfg, &label, r, t0))?;
        m.wall_time_s = t0.elapsed().as_secs_f64();
        if cfg.log_every > 0 {
            eprintln!("[{label}] novel AP50 {:.4} base AP50 {:.4}", m.mean_novel_ap50, m.mean_base_ap50);
        }
        if cfg.save_run_checkpoints {
            let meta = CheckpointMeta {
                model: cfg.model.clone(),
                phase: "fine_tune".into(),
                dataset_seed: cfg.seed,
                split: cfg.split,
                k: Some(cfg.k),
                run_index: Some(run_index),
                steps: cfg.fine_tune.schedule.total_steps(),
            };
            checkpoint::save(&cfg.out.join(format!("run{run_index}.ckpt")), &model, &meta)?;
        }
        if let Some(w) = out.as_mut() {
            w.write(&Record::Run { config: Box::new(cfg.clone()), metrics: m.clone() })?;
            for msg in &m.warnings {
                w.write(&Record::Warning { config: Box::new(cfg.clone()), run_index: Some(run_index), message: msg.clone() })?;
            }
        }
        runs.push(m);
    }
    let aggregate = Aggregate::from_runs(&runs);
    if let Some(w) = out.as_mut() {
        w.write(&Record::Aggregate { config: Box::new(cfg.clone()), aggregate: aggregate.clone() })?;
    }
    Ok(SuiteReport { runs, aggregate })
}

/// Evaluates a fine-tuned model against the pool of its run.
pub fn evaluate<T: Scalar>(cfg: &RunConfig, model: &Detector<T>, k: usize, run_index: u64, test: &[TestImage]) -> Result<RunMetrics> {
    let t0 = Instant::now();
    let split = cfg.split_config()?;
    let budget = episodes::build_shot_pool(cfg.seed, &split, k, run_index)?;
    let mut m = train::evaluate(model, test, &split, &budget, run_index, cfg.seed)?;
    m.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(m)
}

/// One line of the debug dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebugRecord {
    pub image_id: usize,
    pub classes: Vec<usize>,
    pub detections: Vec<Detection>,
    /// Per class, `[query pixels][support pixels]` attention rows.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Per proposal, the three branch weights.
    pub cfa_weights: Vec<[f64; 3]>,
    pub query_feature_norm: f64,
    pub refined_feature_norm: f64,
}

pub fn debug_dump<T: Scalar>(
    cfg: &RunConfig,
    model: &Detector<T>,
    k: usize,
    run_index: u64,
    test: &[TestImage],
    path: &Path,
) -> Result<usize> {
    let split = cfg.split_config()?;
    let classes = split.all_classes();
    let budget = episodes::build_shot_pool(cfg.seed, &split, k, run_index)?;
    let protos = train::class_prototypes(model, &budget, &split, episodes::stream_seed(&[cfg.seed, run_index, 0x7072]))?;
    let mut w = JsonlWriter::create(path)?;
    let n = cfg.debug_dump_images.min(test.len());
    for t in &test[..n] {
        let tr = model.detect_traced(&model_input(&t.image), &protos, &classes)?;
        let attention = tr
            .attention
            .iter()
            .map(|a| a.data().chunks(a.shape()[1]).map(<[f64]>::to_vec).collect())
            .collect();
        let cfa_weights = tr.cfa_weights.map(|c| c.data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect()).unwrap_or_default();
        w.write(&DebugRecord {
            image_id: t.image_id,
            classes: classes.clone(),
            detections: tr.detections,
            attention,
            cfa_weights,
            query_feature_norm: tr.query_norm,
            refined_feature_norm: tr.refined_norm,
        })?;
    }
    Ok(n)
}

/// Model variants compared by the ablation, as (label, toggles).
pub fn ablation_variants() -> Vec<(String, ModelToggles)> {
    let full = ModelToggles::default();
    let no_cfa = ModelToggles { use_cfa: false, ..full };
    let reweight = ModelToggles { use_drd: false, baseline_reweight: true, ..full };
    vec![("full".into(), full), ("no_cfa".into(), no_cfa), ("reweight_baseline".into(), reweight)]
}

/// Meta-trains every variant with the same schedule and seeds, then runs
/// the same pools for each. The first variant is the full model; it is
/// taken from `full_model` when given instead of being trained.
pub fn ablate<T: Scalar>(
    cfg: &RunConfig,
    full_model: Option<&Detector<T>>,
    test: &[TestImage],
    out: &mut Option<JsonlWriter>,
) -> Result<AblationReport> {
    let mut novel: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, (label, toggles)) in ablation_variants().into_iter().enumerate() {
        let mut vcfg = cfg.clone();
        vcfg.model.toggles = toggles;
        vcfg.out = cfg.out.join(&label);
        vcfg.save_run_checkpoints = false;
        vcfg.validate()?;
        let trained;
        let model = match full_model {
            Some(m) if i == 0 => m,
            _ => {
                let log = vcfg.out.join(LOSS_LOG);
                trained = meta_train::<T>(&vcfg, Some(&log))?.0;
                &trained
            }
        };
        let report = run_suite(&vcfg, model, test, out)?;
        novel.push((label, report.runs.iter().map(|r| r.mean_novel_ap50).collect()));
    }
    let (_, full) = novel.remove(0);
    let report = AblationReport::new(cfg.k, full, novel);
    if let Some(w) = out.as_mut() {
        w.write(&Record::Ablation { config: Box::new(cfg.clone()), report: report.clone() })?;
    }
    Ok(report)
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(METRICS_LOG)
}
