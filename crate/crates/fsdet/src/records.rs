//! JSON-lines metrics: one record per line, each echoing the resolved
//! configuration.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use fsdet_core::metrics::{mean_std, RunMetrics};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub class_id: usize,
    /// Mean over the runs where the class was defined.
    pub mean_ap50: Option<f64>,
    pub defined_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_novel_ap50: f64,
    pub std_novel_ap50: f64,
    pub mean_base_ap50: f64,
    pub std_base_ap50: f64,
    pub per_class: Vec<ClassMean>,
    pub wall_time_s: f64,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunMetrics]) -> Aggregate {
        let novel: Vec<f64> = runs.iter().map(|r| r.mean_novel_ap50).collect();
        let base: Vec<f64> = runs.iter().map(|r| r.mean_base_ap50).collect();
        let (mn, sn) = mean_std(&novel);
        let (mb, sb) = mean_std(&base);
        let mut ids: Vec<usize> = runs.iter().flat_map(|r| r.per_class_ap50.iter().map(|c| c.class_id)).collect();
        ids.sort_unstable();
        ids.dedup();
        let per_class = ids
            .into_iter()
            .map(|class_id| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.ap(class_id)).collect();
                ClassMean {
                    class_id,
                    mean_ap50: (!vals.is_empty()).then(|| mean_std(&vals).0),
                    defined_runs: vals.len(),
                }
            })
            .collect();
        Aggregate {
            runs: runs.len(),
            mean_novel_ap50: mn,
            std_novel_ap50: sn,
            mean_base_ap50: mb,
            std_base_ap50: sb,
            per_class,
            wall_time_s: runs.iter().map(|r| r.wall_time_s).sum(),
        }
    }
}

/// Paired comparison of one ablation variant against the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub variant: String,
    pub variant_novel_ap50: Vec<f64>,
    /// full - variant, per run index.
    pub differences: Vec<f64>,
    pub mean_difference: f64,
    pub std_difference: f64,
    /// Full model mean is at least the variant mean.
    pub full_not_worse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub runs: usize,
    pub full_novel_ap50: Vec<f64>,
    pub comparisons: Vec<PairedDiff>,
}

impl AblationReport {
    pub fn new(k: usize, full: Vec<f64>, variants: Vec<(String, Vec<f64>)>) -> AblationReport {
        let comparisons = variants
            .into_iter()
            .map(|(variant, v)| {
                let differences: Vec<f64> = full.iter().zip(&v).map(|(f, x)| f - x).collect();
                let (mean_difference, std_difference) = mean_std(&differences);
                PairedDiff {
                    full_not_worse: mean_std(&full).0 >= mean_std(&v).0,
                    variant,
                    variant_novel_ap50: v,
                    differences,
                    mean_difference,
                    std_difference,
                }
            })
            .collect();
        AblationReport { k, runs: full.len(), full_novel_ap50: full, comparisons }
    }

    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.full_not_worse)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Run { config: Box<RunConfig>, metrics: RunMetrics },
    Aggregate { config: Box<RunConfig>, aggregate: Aggregate },
    Warning { config: Box<RunConfig>, run_index: Option<u64>, message: String },
    Ablation { config: Box<RunConfig>, report: AblationReport },
}

/// Appends records to a JSON-lines file, one flushed line each.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        let f = std::fs::File::create(path).map_err(CliError::io(path))?;
        Ok(JsonlWriter { path: path.into(), out: BufWriter::new(f) })
    }

    pub fn write<S: Serialize>(&mut self, value: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(CliError::io(&self.path))?;
        self.out.flush().map_err(CliError::io(&self.path))
    }
}

pub fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let f = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(CliError::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsdet_core::metrics::ClassAp;

    fn run(i: u64, novel: f64) -> RunMetrics {
        RunMetrics {
            run_index: i,
            k: 1,
            seed: 7,
            per_class_ap50: vec![ClassAp { class_id: 0, ap50: Some(novel) }, ClassAp { class_id: 1, ap50: None }],
            mean_novel_ap50: novel,
            mean_base_ap50: 0.5,
            wall_time_s: 1.5,
            warnings: vec![],
        }
    }

    #[test]
    fn single_run_aggregate_has_zero_std() {
        let a = Aggregate::from_runs(&[run(0, 0.3)]);
        assert_eq!((a.mean_novel_ap50, a.std_novel_ap50), (0.3, 0.0));
        assert_eq!(a.per_class[1], ClassMean { class_id: 1, mean_ap50: None, defined_runs: 0 });
    }

    #[test]
    fn ablation_direction() {
        let r = AblationReport::new(1, vec![0.5, 0.4], vec![("x".into(), vec![0.3, 0.6])]);
        assert!(r.passed());
        assert_eq!(r.comparisons[0].differences, vec![0.5 - 0.3, 0.4 - 0.6]);
    }
}
