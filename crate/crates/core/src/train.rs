//! Two-phase schedule: meta-training on base classes, then fine-tuning on
//! the k-shot pool, followed by evaluation on a fixed test stream.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Sgd;
use crate::detector::{Detector, LossValues, TrainSample};
use crate::episodes::{
    self, model_input, stream_seed, Episode, EpisodeSampler, Phase, ShotBudget, SplitConfig, TestImage,
};
use crate::error::{config_err, Result};
use crate::metrics::{ImageResult, RunMetrics};
use crate::{Scalar, Tensor};

/// Piecewise-constant learning rate: `(iterations, lr)` phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule(pub Vec<(usize, f64)>);

impl Schedule {
    pub fn meta_train() -> Self {
        Schedule(alloc::vec![(5000, 0.005), (1000, 0.0005)])
    }

    pub fn fine_tune() -> Self {
        Schedule(alloc::vec![(400, 0.005), (100, 0.0005)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(config_err!("learning-rate schedule is empty"));
        }
        if self.0.iter().any(|&(n, lr)| n == 0 || !(lr > 0.0) || !lr.is_finite()) {
            return Err(config_err!("schedule phases need positive iterations and learning rates"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.0.iter().map(|p| p.0).sum()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.0 {
            end += n;
            if step < end {
                return lr;
            }
        }
        self.0.last().map(|p| p.1).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self::meta_train()
    }
}

impl TrainOptions {
    pub fn meta_train() -> Self {
        TrainOptions { schedule: Schedule::meta_train(), momentum: 0.9, weight_decay: 1e-4, clip_norm: Some(10.0) }
    }

    pub fn fine_tune() -> Self {
        TrainOptions { schedule: Schedule::fine_tune(), ..Self::meta_train() }
    }
}

pub fn to_sample<T: Scalar>(ep: &Episode) -> TrainSample<T> {
    TrainSample {
        query: model_input(&ep.query),
        gt: ep.gt.clone(),
        gt_classes: ep.gt.iter().map(|b| b.class_id.expect("labelled ground truth")).collect(),
        supports: ep.supports.iter().map(|s| (model_input(&s.image), s.mask.cast())).collect(),
        classes: ep.classes.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub grad_norm: f64,
}

/// One SGD step on one episode.
pub fn train_step<T: Scalar>(
    model: &mut Detector<T>,
    episode: &Episode,
    opts: &TrainOptions,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossValues, f64)> {
    let sample = to_sample::<T>(episode);
    let loss = model.accumulate_gradients(&sample, rng)?;
    let norm = model.store.grad_norm();
    if !norm.is_finite() {
        model.store.zero_grad();
        return Ok((loss, norm));
    }
    if let Some(c) = opts.clip_norm {
        if norm > c {
            model.store.scale_grads(T::lit(c / norm));
        }
    }
    Sgd { lr, momentum: opts.momentum, weight_decay: opts.weight_decay }.step(&mut model.store);
    Ok((loss, norm))
}

/// Runs the whole schedule, one episode per step.
pub fn train<T: Scalar>(
    model: &mut Detector<T>,
    sampler: &mut EpisodeSampler,
    opts: &TrainOptions,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<LossValues>> {
    opts.schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = opts.schedule.total_steps();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let ep = sampler.next_episode()?;
        let lr = opts.schedule.lr_at(step);
        let (loss, grad_norm) = train_step(model, &ep, opts, lr, &mut rng)?;
        on_step(&StepRecord { step, lr, loss, grad_norm });
        losses.push(loss);
    }
    Ok(losses)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Per-class support features averaged over every pooled shot, in the
/// order of `split.all_classes()`.
pub fn class_prototypes<T: Scalar>(
    model: &Detector<T>,
    budget: &ShotBudget,
    split: &SplitConfig,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split
        .all_classes()
        .into_iter()
        .map(|c| {
            let shots: Vec<(Tensor<T>, Tensor<T>)> = budget
                .instances(c)
                .iter()
                .map(|&inst| {
                    let s = episodes::render_support(inst, None, &mut rng)?;
                    Ok((model_input(&s.image), s.mask.cast()))
                })
                .collect::<Result<_>>()?;
            model.support_prototype(&shots)
        })
        .collect()
}

/// Detects on every test image with fixed class prototypes.
pub fn detect_all<T: Scalar>(
    model: &Detector<T>,
    test: &[TestImage],
    prototypes: &[Tensor<T>],
    classes: &[usize],
) -> Result<Vec<ImageResult>> {
    test.iter()
        .map(|t| {
            let detections = model.detect(&model_input(&t.image), prototypes, classes)?;
            Ok(ImageResult { detections, gt: t.gt.clone() })
        })
        .collect()
}

/// AP50 per class over the test stream.
pub fn evaluate<T: Scalar>(
    model: &Detector<T>,
    test: &[TestImage],
    split: &SplitConfig,
    budget: &ShotBudget,
    run_index: u64,
    seed: u64,
) -> Result<RunMetrics> {
    let classes = split.all_classes();
    let protos = class_prototypes(model, budget, split, stream_seed(&[seed, run_index, 0x7072]))?;
    let results = detect_all(model, test, &protos, &classes)?;
    Ok(RunMetrics::from_results(&results, &split.base_classes, &split.novel_classes, run_index, budget.k, seed))
}

/// Run-level identifiers shared by fine-tuning and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub dataset_seed: u64,
    pub split_id: usize,
    pub k: usize,
    pub run_index: u64,
}

/// Pool, fine-tune and evaluate one run, starting from a meta-trained model.
pub fn run_cycle<T: Scalar>(
    meta_trained: &Detector<T>,
    cycle: &CycleConfig,
    opts: &TrainOptions,
    test: &[TestImage],
    on_step: impl FnMut(&StepRecord),
) -> Result<(Detector<T>, RunMetrics)> {
    let split = SplitConfig::new(cycle.split_id)?;
    let budget = episodes::build_shot_pool(cycle.dataset_seed, &split, cycle.k, cycle.run_index)?;
    let mut model = meta_trained.clone();
    let run_seed = stream_seed(&[cycle.dataset_seed, cycle.split_id as u64, cycle.k as u64, cycle.run_index]);
    model.reset_classifier(run_seed)?;
    let mut sampler = EpisodeSampler::new(cycle.dataset_seed, split.clone(), Phase::FineTune, Some(budget.clone()), cycle.run_index);
    train(&mut model, &mut sampler, opts, run_seed, on_step)?;
    let metrics = evaluate(&model, test, &split, &budget, cycle.run_index, cycle.dataset_seed)?;
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let s = Schedule::meta_train();
        assert_eq!(s.total_steps(), 6000);
        assert_eq!(s.lr_at(0), 0.005);
        assert_eq!(s.lr_at(4999), 0.005);
        assert_eq!(s.lr_at(5000), 0.0005);
        assert!(Schedule(Vec::new()).validate().is_err());
        assert!(Schedule(alloc::vec![(10, -1.0)]).validate().is_err());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), [2.0, 3.0, 5.0, 7.0]);
    }
}
