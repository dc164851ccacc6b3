//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use fsdet_core::detector::DetectorConfig;
use fsdet_core::episodes::{SplitConfig, NUM_CLASSES};
use fsdet_core::train::{Schedule, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gradcheck,
    Oracle,
    MetaTrain,
    FineTune,
    Eval,
    Ablate,
    ExportData,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

pub const ALLOWED_K: [usize; 5] = [1, 2, 3, 5, 10];
pub const MIN_TEST_IMAGES: usize = 200;

/// Fully resolved configuration, echoed into every metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    /// Dataset seed: drives episodes, pools and the test stream.
    pub seed: u64,
    /// Seed of the weight initialisation.
    pub model_seed: u64,
    pub runs: usize,
    pub k: usize,
    pub split: usize,
    pub precision: Precision,
    pub test_images: usize,
    pub model: DetectorConfig,
    pub meta_train: TrainOptions,
    pub fine_tune: TrainOptions,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Test images whose attention maps go to the debug dump (0 = off).
    pub debug_dump_images: usize,
    pub log_every: usize,
    /// Write `run<r>.ckpt` after each fine-tuning run.
    pub save_run_checkpoints: bool,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        RunConfig {
            mode,
            seed: 7,
            model_seed: 1,
            runs: 10,
            k: if mode == Mode::Ablate { 1 } else { 5 },
            split: 0,
            precision: Precision::F32,
            test_images: MIN_TEST_IMAGES,
            model: DetectorConfig::default(),
            meta_train: TrainOptions::meta_train(),
            fine_tune: TrainOptions::fine_tune(),
            checkpoint: None,
            out: PathBuf::from("fsdet-out"),
            debug_dump_images: 0,
            log_every: 100,
            save_run_checkpoints: true,
        }
    }

    pub fn split_config(&self) -> Result<SplitConfig> {
        Ok(SplitConfig::new(self.split)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.num_classes != NUM_CLASSES {
            return Err(CliError::Config(format!("model.num_classes must be {NUM_CLASSES}")));
        }
        if !ALLOWED_K.contains(&self.k) {
            return Err(CliError::Config(format!("k must be one of {:?}, got {}", ALLOWED_K, self.k)));
        }
        if self.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if self.test_images < MIN_TEST_IMAGES {
            return Err(CliError::Config(format!("test_images must be at least {MIN_TEST_IMAGES}")));
        }
        SplitConfig::new(self.split)?;
        self.meta_train.schedule.validate()?;
        self.fine_tune.schedule.validate()?;
        for o in [&self.meta_train, &self.fine_tune] {
            if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
                return Err(CliError::Config("momentum must be in [0,1) and weight_decay non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Partial training options as written in a config file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub schedule: Option<Vec<(usize, f64)>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    /// 0 disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainPatch {
    fn apply(&self, o: &mut TrainOptions) {
        if let Some(s) = &self.schedule {
            o.schedule = Schedule(s.clone());
        }
        if let Some(m) = self.momentum {
            o.momentum = m;
        }
        if let Some(w) = self.weight_decay {
            o.weight_decay = w;
        }
        if let Some(c) = self.clip_norm {
            o.clip_norm = (c > 0.0).then_some(c);
        }
    }
}

/// Config file contents; every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub runs: Option<usize>,
    pub k: Option<usize>,
    pub split: Option<usize>,
    pub precision: Option<Precision>,
    pub test_images: Option<usize>,
    pub model: Option<DetectorConfig>,
    pub meta_train: Option<TrainPatch>,
    pub fine_tune: Option<TrainPatch>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub debug_dump_images: Option<usize>,
    pub log_every: Option<usize>,
    pub save_run_checkpoints: Option<bool>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }
}

/// Command-line overrides; `None` / `false` keeps the file or default value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub k: Option<usize>,
    pub split: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub no_drd: bool,
    pub no_cfa: bool,
    pub no_cfa_attn: bool,
    pub baseline_reweight: bool,
}

pub fn resolve(mode: Mode, file: &ConfigFile, cli: &Overrides) -> Result<RunConfig> {
    let mut c = RunConfig::new(mode);
    macro_rules! take {
        ($($f:ident),*) => {$(
            if let Some(v) = file.$f.clone() { c.$f = v; }
        )*};
    }
    take!(seed, model_seed, runs, k, split, precision, test_images, model, out, debug_dump_images, log_every, save_run_checkpoints);
    if file.checkpoint.is_some() {
        c.checkpoint = file.checkpoint.clone();
    }
    if let Some(p) = &file.meta_train {
        p.apply(&mut c.meta_train);
    }
    if let Some(p) = &file.fine_tune {
        p.apply(&mut c.fine_tune);
    }
    macro_rules! over {
        ($($f:ident),*) => {$(
            if let Some(v) = cli.$f.clone() { c.$f = v; }
        )*};
    }
    over!(seed, runs, k, split, out, precision);
    if cli.checkpoint.is_some() {
        c.checkpoint = cli.checkpoint.clone();
    }
    let t = &mut c.model.toggles;
    if cli.no_drd {
        t.use_drd = false;
    }
    if cli.no_cfa {
        t.use_cfa = false;
    }
    if cli.no_cfa_attn {
        t.cfa_attention = false;
    }
    if cli.baseline_reweight {
        t.baseline_reweight = true;
    }
    c.validate()?;
    Ok(c)
}
