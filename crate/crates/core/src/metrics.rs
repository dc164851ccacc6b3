//! VOC-style AP at IoU 0.5 and per-run metric records.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::RoIBox;
use crate::detector::Detection;

pub const AP_IOU: f64 = 0.5;

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    /// Ground truth boxes with `class_id` set.
    pub gt: Vec<RoIBox>,
}

/// All-point interpolated AP for one class. Detections are visited by
/// descending score (stable for ties); each takes the ground truth box of
/// highest IoU in its image, and counts as a true positive only if that
/// box is unmatched and the IoU reaches the threshold.
///
/// Returns `None` when the class has no ground truth.
pub fn average_precision(images: &[ImageResult], class_id: usize, iou_threshold: f64) -> Option<f64> {
    let gts: Vec<Vec<&RoIBox>> =
        images.iter().map(|im| im.gt.iter().filter(|g| g.class_id == Some(class_id)).collect()).collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.detections.iter().filter(|d| d.class_id == class_id).map(move |d| (i, d)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (img, d) in dets {
        let mut best = (usize::MAX, -1.0);
        for (j, g) in gts[img].iter().enumerate() {
            let iou = d.bbox.iou(g);
            if iou > best.1 {
                best = (j, iou);
            }
        }
        let hit = best.0 != usize::MAX && best.1 >= iou_threshold && !used[img][best.0];
        if hit {
            used[img][best.0] = true;
        }
        tp.push(hit);
    }
    Some(ap_from_matches(&tp, n_gt))
}

/// Area under the monotone precision envelope given the TP/FP sequence of
/// score-sorted detections.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// `None` when the class is absent from the test stream.
    pub ap50: Option<f64>,
}

/// Evaluation record of one (pool, fine-tune, eval) cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_index: u64,
    pub k: usize,
    pub seed: u64,
    /// AP50 per class, ascending class id.
    pub per_class_ap50: Vec<ClassAp>,
    pub mean_novel_ap50: f64,
    pub mean_base_ap50: f64,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

fn mean_defined(ap: &BTreeMap<usize, Option<f64>>, classes: &[usize]) -> f64 {
    let vals: Vec<f64> = classes.iter().filter_map(|c| ap.get(c).copied().flatten()).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

impl RunMetrics {
    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.per_class_ap50.iter().find(|c| c.class_id == class_id).and_then(|c| c.ap50)
    }

    pub fn from_results(
        images: &[ImageResult],
        base: &[usize],
        novel: &[usize],
        run_index: u64,
        k: usize,
        seed: u64,
    ) -> RunMetrics {
        let mut per_class = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut all: Vec<usize> = base.iter().chain(novel).copied().collect();
        all.sort_unstable();
        for c in all {
            let ap = average_precision(images, c, AP_IOU);
            if ap.is_none() {
                warnings.push(alloc::format!("class {c} absent from the test stream; AP undefined"));
            }
            per_class.insert(c, ap);
        }
        RunMetrics {
            run_index,
            k,
            seed,
            mean_novel_ap50: mean_defined(&per_class, novel),
            mean_base_ap50: mean_defined(&per_class, base),
            per_class_ap50: per_class.into_iter().map(|(class_id, ap50)| ClassAp { class_id, ap50 }).collect(),
            wall_time_s: 0.0,
            warnings,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}
