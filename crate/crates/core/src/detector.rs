//! Toy two-stage detector hosting relation distillation and context-aware
//! aggregation.
//!
//! ```text
//! query [3,H,W] ++ 0 ----\                       /-> RPN -> proposals --\
//!                         backbone -> (DRD) -----                         CFA -> RoI head
//! support [3,S,S] ++ mask/                       \--------- refined feature -/
//! ```
//!
//! One backbone embeds both query and support images; support masks enter
//! as a fourth input channel, queries get a zero channel there. With DRD
//! disabled the raw query feature goes to the RPN, and the channel-wise
//! reweighting baseline can be switched on instead.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
pub use crate::boxes::RoIBox;
use crate::cfa::{self, CfaMode, CfaParams, FUSED_RESOLUTION};
use crate::drd::{self, AttentionWeights, DrdParams};
use crate::error::{config_err, invalid, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output feature dimension C; a multiple of 8.
    pub feature_dim: usize,
    /// Channels of the blocks before the last one. The first block keeps
    /// the resolution, every later block halves it.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { feature_dim: 64, stage_channels: vec![16, 32, 64] }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 8 != 0 {
            return Err(config_err!("feature_dim must be a positive multiple of 8, got {}", self.feature_dim));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(config_err!("stage_channels must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Feature toggles for the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelToggles {
    pub use_drd: bool,
    pub use_cfa: bool,
    pub cfa_attention: bool,
    pub baseline_reweight: bool,
}

impl Default for ModelToggles {
    fn default() -> Self {
        ModelToggles { use_drd: true, use_cfa: true, cfa_attention: true, baseline_reweight: false }
    }
}

impl ModelToggles {
    pub fn validate(&self) -> Result<()> {
        if self.use_drd && self.baseline_reweight {
            return Err(config_err!("use_drd and baseline_reweight are mutually exclusive"));
        }
        Ok(())
    }

    pub fn cfa_mode(&self) -> CfaMode {
        match (self.use_cfa, self.cfa_attention) {
            (false, _) => CfaMode::Single,
            (true, true) => CfaMode::Attention,
            (true, false) => CfaMode::Average,
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.use_drd, self.baseline_reweight, self.cfa_mode()) {
            (true, _, CfaMode::Attention) => "drd+cfa",
            (true, _, CfaMode::Average) => "drd+cfa-avg",
            (true, _, CfaMode::Single) => "drd",
            (false, true, CfaMode::Attention) => "reweight+cfa",
            (false, true, CfaMode::Average) => "reweight+cfa-avg",
            (false, true, CfaMode::Single) => "reweight",
            (false, false, CfaMode::Attention) => "plain+cfa",
            (false, false, CfaMode::Average) => "plain+cfa-avg",
            (false, false, CfaMode::Single) => "plain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub toggles: ModelToggles,
    /// Size of the class universe (base plus novel).
    pub num_classes: usize,
    pub query_size: usize,
    pub support_size: usize,
    /// Anchor side as a multiple of the backbone stride.
    pub anchor_scale: f64,
    pub rpn_pre_nms_top_k: usize,
    pub rpn_nms_iou: f64,
    pub max_proposals: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_fg_iou: f64,
    /// RoIs sampled per training image.
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub head_hidden: usize,
    pub score_threshold: f64,
    pub detection_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone: BackboneConfig::default(),
            toggles: ModelToggles::default(),
            num_classes: 12,
            query_size: 96,
            support_size: 64,
            anchor_scale: 1.5,
            rpn_pre_nms_top_k: 64,
            rpn_nms_iou: 0.7,
            max_proposals: 32,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_fg_iou: 0.5,
            roi_batch: 16,
            roi_fg_fraction: 0.5,
            head_hidden: 1024,
            score_threshold: 0.05,
            detection_nms_iou: 0.5,
            max_detections: 20,
        }
    }
}

impl DetectorConfig {
    /// A small configuration for verification runs.
    pub fn tiny(feature_dim: usize) -> Self {
        DetectorConfig {
            backbone: BackboneConfig { feature_dim, stage_channels: vec![4, 8] },
            num_classes: 3,
            query_size: 24,
            support_size: 16,
            rpn_pre_nms_top_k: 16,
            max_proposals: 6,
            roi_batch: 4,
            head_hidden: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.toggles.validate()?;
        let s = self.backbone.stride();
        if self.query_size % s != 0 || self.support_size % s != 0 {
            return Err(config_err!(
                "image sizes {} / {} must be divisible by the backbone stride {}",
                self.query_size,
                self.support_size,
                s
            ));
        }
        if self.num_classes == 0 || self.max_proposals == 0 || self.roi_batch == 0 {
            return Err(config_err!("num_classes, max_proposals and roi_batch must be positive"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.stride() as f64
    }
}

/// Regression weights of the RoI head (center x/y, log width/height).
pub const ROI_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

pub fn encode_weighted(reference: &RoIBox, target: &RoIBox, w: [f64; 4]) -> [f64; 4] {
    let d = reference.encode(target);
    [d[0] * w[0], d[1] * w[1], d[2] * w[2], d[3] * w[3]]
}

pub fn decode_weighted(reference: &RoIBox, d: [f64; 4], w: [f64; 4]) -> RoIBox {
    reference.decode([d[0] / w[0], d[1] / w[1], d[2] / w[2], d[3] / w[3]])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: RoIBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: RoIBox,
    pub class_id: usize,
    pub score: f64,
}

/// Class-specific reweighting vector of the baseline.
#[derive(Clone, Copy, Debug)]
pub struct ClassVector {
    /// `[C]`
    pub w: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnParams {
    pub obj_w: ParamId,
    pub obj_b: ParamId,
    pub delta_w: ParamId,
    pub delta_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub box_w: ParamId,
    pub box_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub backbone: Vec<ConvParams>,
    pub drd: Option<DrdParams>,
    pub rpn: RpnParams,
    pub cfa: Option<CfaParams>,
    pub head: HeadParams,
}

/// Detector weights plus their configuration.
#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub cfg: DetectorConfig,
    pub store: ParamStore<T>,
    pub params: DetectorParams,
}

/// Tape values shared by training and inference up to the RPN.
pub struct Stem {
    pub query_feature: Var,
    pub support_features: Vec<Var>,
    /// Feature the RPN and RoI pooling read: distilled or raw.
    pub refined: Var,
    /// `[A]` objectness logits, `A = Hf * Wf`.
    pub rpn_logits: Var,
    /// `[A, 4]` anchor deltas.
    pub rpn_deltas: Var,
    pub attention: Vec<AttentionWeights>,
    pub feature_hw: (usize, usize),
}

/// RoI head outputs restricted to the active classes.
pub struct RoiOutputs {
    /// `[n, A + 1]`, background last.
    pub class_logits: Var,
    /// `[n, 4 * A]`.
    pub box_deltas: Var,
    pub cfa_weights: Option<Var>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.backbone.feature_dim;
        let mut backbone = Vec::new();
        let mut cin = 4;
        let outs: Vec<usize> = cfg.backbone.stage_channels.iter().copied().chain([c]).collect();
        for (i, &cout) in outs.iter().enumerate() {
            let weight = store.add(
                &alloc::format!("backbone.conv{i}.weight"),
                Tensor::he_normal(&[cout, cin, 3, 3], cin * 9, &mut rng),
            )?;
            let bias = store.add(&alloc::format!("backbone.conv{i}.bias"), Tensor::zeros(&[cout]))?;
            backbone.push(ConvParams { weight, bias, stride: if i == 0 { 1 } else { 2 } });
            cin = cout;
        }
        let drd = if cfg.toggles.use_drd { Some(DrdParams::new(&mut store, "drd", c, &mut rng)?) } else { None };
        let rpn = RpnParams {
            obj_w: store.add("rpn.objectness.weight", Tensor::he_normal(&[1, c, 1, 1], c, &mut rng))?,
            obj_b: store.add("rpn.objectness.bias", Tensor::zeros(&[1]))?,
            delta_w: store.add("rpn.deltas.weight", Tensor::he_normal(&[4, c, 1, 1], c, &mut rng))?,
            delta_b: store.add("rpn.deltas.bias", Tensor::zeros(&[4]))?,
        };
        let cfa = if cfg.toggles.cfa_mode() == CfaMode::Attention {
            Some(CfaParams::new(&mut store, "cfa", c, &mut rng)?)
        } else {
            None
        };
        let flat = c * FUSED_RESOLUTION * FUSED_RESOLUTION;
        let hid = cfg.head_hidden;
        let k = cfg.num_classes;
        let head = HeadParams {
            fc_w: store.add("head.fc.weight", Tensor::he_normal(&[hid, flat], flat, &mut rng))?,
            fc_b: store.add("head.fc.bias", Tensor::zeros(&[hid]))?,
            cls_w: store.add("head.cls.weight", Tensor::he_normal(&[k + 1, hid], hid, &mut rng))?,
            cls_b: store.add("head.cls.bias", Tensor::zeros(&[k + 1]))?,
            box_w: store.add("head.box.weight", Tensor::he_normal(&[4 * k, hid], hid, &mut rng))?,
            box_b: store.add("head.box.bias", Tensor::zeros(&[4 * k]))?,
        };
        Ok(Detector { cfg, store, params: DetectorParams { backbone, drd, rpn, cfa, head } })
    }

    /// Re-draws the classification layer, as done when moving from base
    /// training to fine-tuning.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = (self.params.head.cls_w, self.params.head.cls_b);
        let shape = self.store.get(w).tensor.shape().to_vec();
        let fresh: Tensor<T> = Tensor::he_normal(&shape, shape[1], &mut rng);
        self.store.set_data(w, fresh.data())?;
        let nb = self.store.get(b).tensor.len();
        self.store.set_data(b, &vec![T::zero(); nb])?;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride()
    }

    /// Query image with an all-zero mask channel, `[4, H, W]`.
    pub fn query_input(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(invalid!("query image must be [3,H,W], got {:?}", s));
        }
        let mut data = image.data().to_vec();
        data.extend(core::iter::repeat_n(T::zero(), s[1] * s[2]));
        Tensor::new(&[4, s[1], s[2]], data)
    }

    /// Shared backbone over a `[4, H, W]` input.
    pub fn backbone(&self, tape: &mut Tape<'_, T>, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        let stride = self.stride();
        if s.len() != 3 || s[0] != 4 {
            return Err(invalid!("backbone input must be [4,H,W], got {:?}", s));
        }
        if tape.is_strict() && (s[1] % stride != 0 || s[2] % stride != 0) {
            return Err(invalid!("backbone input {}x{} not divisible by stride {}", s[1], s[2], stride));
        }
        let mut x = input;
        for conv in &self.params.backbone {
            let w = tape.param(conv.weight);
            let b = tape.param(conv.bias);
            x = tape.conv2d(x, w, Some(b), conv.stride, 1)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    pub fn anchors(&self, hf: usize, wf: usize) -> Vec<RoIBox> {
        let s = self.stride() as f64;
        let side = self.cfg.anchor_scale * s;
        let mut out = Vec::with_capacity(hf * wf);
        for y in 0..hf {
            for x in 0..wf {
                out.push(RoIBox::centered((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, side));
            }
        }
        out
    }

    /// Backbone, optional relation distillation, and the RPN heads.
    ///
    /// `support_features` are backbone outputs for the active classes, in
    /// class order; they may be computed on the same tape or be constants.
    pub fn stem(&self, tape: &mut Tape<'_, T>, query_input: Var, support_features: &[Var]) -> Result<Stem> {
        let query_feature = self.backbone(tape, query_input)?;
        self.stem_from_feature(tape, query_feature, support_features)
    }

    pub fn stem_from_feature(
        &self,
        tape: &mut Tape<'_, T>,
        query_feature: Var,
        support_features: &[Var],
    ) -> Result<Stem> {
        let (refined, attention) = match &self.params.drd {
            Some(p) => {
                let d = drd::refine(tape, query_feature, support_features, p)?;
                (d.refined, d.attention)
            }
            None => (query_feature, Vec::new()),
        };
        let fs = tape.shape(refined).to_vec();
        let (hf, wf) = (fs[1], fs[2]);
        let rp = &self.params.rpn;
        let (ow, ob) = (tape.param(rp.obj_w), tape.param(rp.obj_b));
        let obj = tape.conv2d(refined, ow, Some(ob), 1, 0)?;
        let rpn_logits = tape.reshape(obj, &[hf * wf])?;
        let (dw, db) = (tape.param(rp.delta_w), tape.param(rp.delta_b));
        let deltas = tape.conv2d(refined, dw, Some(db), 1, 0)?;
        // [4, A] -> [A, 4]
        let d2 = tape.reshape(deltas, &[4, hf * wf])?;
        let idx: Vec<usize> = (0..hf * wf).flat_map(|a| (0..4).map(move |j| j * hf * wf + a)).collect();
        let flat = tape.gather(d2, &idx)?;
        let rpn_deltas = tape.reshape(flat, &[hf * wf, 4])?;
        Ok(Stem {
            query_feature,
            support_features: support_features.to_vec(),
            refined,
            rpn_logits,
            rpn_deltas,
            attention,
            feature_hw: (hf, wf),
        })
    }

    /// Proposals from the current RPN outputs (values only).
    pub fn proposals(&self, tape: &Tape<'_, T>, stem: &Stem) -> Vec<Proposal> {
        let (hf, wf) = stem.feature_hw;
        let anchors = self.anchors(hf, wf);
        let logits: Vec<f64> = tape.value(stem.rpn_logits).iter().map(|v| v.to_f64_lossy()).collect();
        let deltas: Vec<f64> = tape.value(stem.rpn_deltas).iter().map(|v| v.to_f64_lossy()).collect();
        let size = self.cfg.query_size as f64;
        rpn_select(&anchors, &logits, &deltas, size, size, &self.cfg)
    }

    /// Class vectors of the reweighting baseline: pooled support features.
    pub fn class_vectors(&self, tape: &mut Tape<'_, T>, support_features: &[Var]) -> Result<Vec<ClassVector>> {
        support_features.iter().map(|&f| Ok(ClassVector { w: tape.global_avg_pool(f)? })).collect()
    }

    /// Shared RoI head over `[n, C, 8, 8]` features: full class logits
    /// `[n, K + 1]` and per-class deltas `[n, 4K]`.
    pub fn roi_head(&self, tape: &mut Tape<'_, T>, fused: Var) -> Result<(Var, Var)> {
        let s = tape.shape(fused).to_vec();
        let n = s[0];
        let flat = tape.reshape(fused, &[n, s[1..].iter().product()])?;
        let h = &self.params.head;
        let (w, b) = (tape.param(h.fc_w), tape.param(h.fc_b));
        let hid = tape.linear(flat, w, Some(b))?;
        let hid = tape.relu(hid)?;
        let (cw, cb) = (tape.param(h.cls_w), tape.param(h.cls_b));
        let logits = tape.linear(hid, cw, Some(cb))?;
        let (bw, bb) = (tape.param(h.box_w), tape.param(h.box_b));
        let deltas = tape.linear(hid, bw, Some(bb))?;
        Ok((logits, deltas))
    }

    /// Pools the RoIs, runs the head and restricts the outputs to the
    /// active classes. `classes[i]` is the class whose support sits at
    /// position `i` of `stem.support_features`.
    pub fn roi_outputs(
        &self,
        tape: &mut Tape<'_, T>,
        stem: &Stem,
        rois: &[RoIBox],
        classes: &[usize],
    ) -> Result<RoiOutputs> {
        if classes.is_empty() {
            return Err(invalid!("no active classes"));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.num_classes) {
            return Err(invalid!("class {} outside the {}-class universe", c, self.cfg.num_classes));
        }
        let (fused, cfa_weights) = match (&self.params.cfa, self.cfg.toggles.cfa_mode()) {
            (Some(p), mode) => {
                let agg = cfa::aggregate(tape, stem.refined, rois, p, mode, self.cfg.spatial_scale())?;
                (agg.fused, agg.weights)
            }
            (None, mode) => {
                // Average and Single modes carry no attention parameters.
                let dummy = CfaParams { branches: [dummy_branch(); 3], channels: self.cfg.backbone.feature_dim };
                let agg = cfa::aggregate(tape, stem.refined, rois, &dummy, mode, self.cfg.spatial_scale())?;
                (agg.fused, None)
            }
        };
        let n = rois.len();
        let k = self.cfg.num_classes;
        let a = classes.len();
        if self.cfg.toggles.baseline_reweight {
            if stem.support_features.len() != a {
                return Err(invalid!("{} support features for {} classes", stem.support_features.len(), a));
            }
            let vectors = self.class_vectors(tape, &stem.support_features)?;
            let z = reweight_vars(tape, fused, &vectors)?;
            // one head pass over the class-major stack: row i*n + r
            let stacked = tape.concat(&z, 0)?;
            let (logits, deltas) = self.roi_head(tape, stacked)?;
            let row = |r: usize, i: usize| i * n + r;
            let fg_idx: Vec<usize> =
                (0..n).flat_map(|r| classes.iter().enumerate().map(move |(i, &c)| row(r, i) * (k + 1) + c)).collect();
            let fg = tape.gather(logits, &fg_idx)?;
            let fg = tape.reshape(fg, &[n, a])?;
            let bg_idx: Vec<usize> = (0..n).flat_map(|r| (0..a).map(move |i| row(r, i) * (k + 1) + k)).collect();
            let bg = tape.gather(logits, &bg_idx)?;
            let bg = tape.reshape(bg, &[n, a])?;
            let bg = tape.sum(bg, Some(1))?;
            let bg = tape.scale(bg, T::one() / T::lit(a as f64))?;
            let bg = tape.reshape(bg, &[n, 1])?;
            let class_logits = tape.concat(&[fg, bg], 1)?;
            let d_idx: Vec<usize> = (0..n)
                .flat_map(|r| {
                    classes
                        .iter()
                        .enumerate()
                        .flat_map(move |(i, &c)| (0..4).map(move |j| row(r, i) * 4 * k + 4 * c + j))
                })
                .collect();
            let bd = tape.gather(deltas, &d_idx)?;
            let box_deltas = tape.reshape(bd, &[n, 4 * a])?;
            Ok(RoiOutputs { class_logits, box_deltas, cfa_weights })
        } else {
            let (logits, deltas) = self.roi_head(tape, fused)?;
            let cols: Vec<usize> = classes.iter().copied().chain([k]).collect();
            let l_idx: Vec<usize> = (0..n).flat_map(|r| cols.iter().map(move |&c| r * (k + 1) + c)).collect();
            let cl = tape.gather(logits, &l_idx)?;
            let class_logits = tape.reshape(cl, &[n, a + 1])?;
            let d_idx: Vec<usize> =
                (0..n).flat_map(|r| classes.iter().flat_map(move |&c| (0..4).map(move |j| r * 4 * k + 4 * c + j))).collect();
            let bd = tape.gather(deltas, &d_idx)?;
            let box_deltas = tape.reshape(bd, &[n, 4 * a])?;
            Ok(RoiOutputs { class_logits, box_deltas, cfa_weights })
        }
    }

    /// Backbone feature of one support pair, outside any recorded pass.
    pub fn support_feature(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let input = support_input(image, mask)?;
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(input);
        let f = self.backbone(&mut tape, x)?;
        Ok(tape.tensor(f))
    }

    /// Mean backbone feature over several shots of one class.
    pub fn support_prototype(&self, shots: &[(Tensor<T>, Tensor<T>)]) -> Result<Tensor<T>> {
        let Some((first, rest)) = shots.split_first() else {
            return Err(invalid!("support prototype needs at least one shot"));
        };
        let mut acc = self.support_feature(&first.0, &first.1)?;
        for (img, mask) in rest {
            let f = self.support_feature(img, mask)?;
            acc.data_mut().iter_mut().zip(f.data()).for_each(|(a, &b)| *a += b);
        }
        let inv = T::one() / T::lit(shots.len() as f64);
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// Detections for one query image given precomputed support features
    /// (one per class in `classes`).
    pub fn detect(&self, image: &Tensor<T>, support_features: &[Tensor<T>], classes: &[usize]) -> Result<Vec<Detection>> {
        Ok(self.detect_traced(image, support_features, classes)?.detections)
    }

    pub fn detect_traced(
        &self,
        image: &Tensor<T>,
        support_features: &[Tensor<T>],
        classes: &[usize],
    ) -> Result<DetectTrace> {
        if support_features.len() != classes.len() {
            return Err(invalid!("{} support features for {} classes", support_features.len(), classes.len()));
        }
        let mut tape = Tape::with_params(&self.store);
        let q = tape.constant(self.query_input(image)?);
        let sup: Vec<Var> = support_features.iter().map(|f| tape.constant(f.clone())).collect();
        let stem = self.stem(&mut tape, q, &sup)?;
        let proposals = self.proposals(&tape, &stem);
        let rois: Vec<RoIBox> = proposals.iter().map(|p| p.bbox).collect();
        let out = self.roi_outputs(&mut tape, &stem, &rois, classes)?;
        let logits = tape.value(out.class_logits);
        let deltas = tape.value(out.box_deltas);
        let a = classes.len();
        let size = self.cfg.query_size as f64;
        let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); a];
        for (r, roi) in rois.iter().enumerate() {
            let row = &logits[r * (a + 1)..(r + 1) * (a + 1)];
            let probs = softmax_f64(row);
            for (i, &c) in classes.iter().enumerate() {
                let score = probs[i];
                if score < self.cfg.score_threshold {
                    continue;
                }
                let d = &deltas[r * 4 * a + 4 * i..r * 4 * a + 4 * i + 4];
                let d = [d[0].to_f64_lossy(), d[1].to_f64_lossy(), d[2].to_f64_lossy(), d[3].to_f64_lossy()];
                let bbox = decode_weighted(roi, d, ROI_DELTA_WEIGHTS).clip(size, size).with_class(c).with_score(score);
                if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
                    continue;
                }
                per_class[i].push(Detection { bbox, class_id: c, score });
            }
        }
        let mut detections: Vec<Detection> =
            per_class.into_iter().flat_map(|d| nms(&d, self.cfg.detection_nms_iou)).collect();
        detections.sort_by(|x, y| y.score.total_cmp(&x.score));
        detections.truncate(self.cfg.max_detections);
        let attention = stem.attention.iter().map(|w| tape.tensor(w.w).cast()).collect();
        let cfa_weights = out.cfa_weights.map(|w| tape.tensor(w).cast());
        let norm = |v: Var| -> f64 { libm::sqrt(tape.value(v).iter().map(|x| { let x = x.to_f64_lossy(); x * x }).sum()) };
        Ok(DetectTrace {
            detections,
            proposals,
            attention,
            cfa_weights,
            query_norm: norm(stem.query_feature),
            refined_norm: norm(stem.refined),
        })
    }
}

fn dummy_branch() -> cfa::BranchParams {
    let id = ParamId(usize::MAX);
    cfa::BranchParams { fc1_w: id, fc1_b: id, fc2_w: id, fc2_b: id }
}

/// Inference result with the intermediate quantities worth inspecting.
#[derive(Clone, Debug)]
pub struct DetectTrace {
    pub detections: Vec<Detection>,
    pub proposals: Vec<Proposal>,
    /// One `[Hq*Wq, Hs*Ws]` matrix per class (empty without DRD).
    pub attention: Vec<Tensor<f64>>,
    /// `[n, 3]` CFA branch weights per proposal.
    pub cfa_weights: Option<Tensor<f64>>,
    pub query_norm: f64,
    pub refined_norm: f64,
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| libm::exp(x - mx)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Image with the binary mask appended as a fourth channel.
pub fn support_input<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (si, sm) = (image.shape(), mask.shape());
    if si.len() != 3 || si[0] != 3 {
        return Err(invalid!("support image must be [3,S,S], got {:?}", si));
    }
    if sm != [1, si[1], si[2]] {
        return Err(invalid!("support mask must be [1,{},{}], got {:?}", si[1], si[2], sm));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(invalid!("support mask must be binary"));
    }
    let mut data = image.data().to_vec();
    data.extend_from_slice(mask.data());
    Tensor::new(&[4, si[1], si[2]], data)
}

/// Binary `[1, size, size]` mask covering the union of `boxes` (pixel
/// centers inside a box).
pub fn box_mask<T: Scalar>(boxes: &[RoIBox], size: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[1, size, size]);
    let d = m.data_mut();
    for y in 0..size {
        let cy = y as f64 + 0.5;
        for x in 0..size {
            let cx = x as f64 + 0.5;
            if boxes.iter().any(|b| cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2) {
                d[y * size + x] = T::one();
            }
        }
    }
    m
}

/// Channel-wise reweighting `z_i = z (x) w_i` of `[C, 8, 8]` RoI features.
pub fn reweight_baseline<T: Scalar>(roi_feature: &Tensor<T>, class_vectors: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let s = roi_feature.shape();
    if s.len() != 3 {
        return Err(invalid!("roi feature must be [C,H,W], got {:?}", s));
    }
    let mut tape = Tape::new();
    let z = tape.constant(roi_feature.clone());
    let vecs: Vec<ClassVector> = class_vectors
        .iter()
        .map(|w| {
            if w.shape() != [s[0]] {
                return Err(invalid!("class vector length {:?} does not match C = {}", w.shape(), s[0]));
            }
            Ok(ClassVector { w: tape.constant(w.clone()) })
        })
        .collect::<Result<_>>()?;
    let out = reweight_vars(&mut tape, z, &vecs)?;
    Ok(out.into_iter().map(|v| tape.tensor(v)).collect())
}

/// Channel axis is the one preceding the two spatial axes.
fn reweight_vars<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, vectors: &[ClassVector]) -> Result<Vec<Var>> {
    let axis = tape.shape(z).len() - 3;
    vectors.iter().map(|v| tape.channel_scale(z, v.w, axis)).collect()
}

/// Greedy non-maximum suppression by descending score; equal scores keep
/// the lower input index first.
pub fn nms_indices(boxes: &[RoIBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<RoIBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Decode, clip, keep the top-k by objectness, suppress, truncate.
pub fn rpn_select(
    anchors: &[RoIBox],
    logits: &[f64],
    deltas: &[f64],
    width: f64,
    height: f64,
    cfg: &DetectorConfig,
) -> Vec<Proposal> {
    let mut cands: Vec<Proposal> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
            Proposal { bbox: a.decode(d).clip(width, height), objectness: sigmoid(logits[i]) }
        })
        .collect();
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].objectness.total_cmp(&cands[a].objectness).then(a.cmp(&b)));
    order.truncate(cfg.rpn_pre_nms_top_k);
    let top: Vec<Proposal> = order.iter().map(|&i| cands[i]).collect();
    cands.clear();
    let boxes: Vec<RoIBox> = top.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = top.iter().map(|p| p.objectness).collect();
    let mut keep = nms_indices(&boxes, &scores, cfg.rpn_nms_iou);
    keep.truncate(cfg.max_proposals);
    keep.into_iter().map(|i| top[i]).collect()
}

/// Targets for the anchor classifier and regressor.
#[derive(Clone, Debug, Default)]
pub struct RpnTargets {
    /// Anchors used by the objectness loss and their 0/1 labels.
    pub sampled: Vec<usize>,
    pub labels: Vec<f64>,
    /// Positive anchors and their regression targets.
    pub positives: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Positives: IoU >= pos threshold, plus the best anchor of every ground
/// truth box. Negatives: IoU < neg threshold. Everything else is ignored.
pub fn assign_anchors(anchors: &[RoIBox], gt: &[RoIBox], cfg: &DetectorConfig) -> RpnTargets {
    let mut best_gt = vec![(0usize, -1.0f64); anchors.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = a.iou(g);
            if iou > best_gt[i].1 {
                best_gt[i] = (j, iou);
            }
        }
    }
    let mut forced = vec![None; anchors.len()];
    for (j, g) in gt.iter().enumerate() {
        let mut best = (0usize, -1.0);
        for (i, a) in anchors.iter().enumerate() {
            let iou = a.iou(g);
            if iou > best.1 {
                best = (i, iou);
            }
        }
        if best.1 > 0.0 {
            forced[best.0] = Some(j);
        }
    }
    let mut t = RpnTargets::default();
    for (i, a) in anchors.iter().enumerate() {
        let (j, iou) = best_gt[i];
        let pos_gt = forced[i].or(if iou >= cfg.rpn_pos_iou { Some(j) } else { None });
        if let Some(j) = pos_gt {
            t.sampled.push(i);
            t.labels.push(1.0);
            t.positives.push(i);
            t.deltas.push(a.encode(&gt[j]));
        } else if iou < cfg.rpn_neg_iou {
            t.sampled.push(i);
            t.labels.push(0.0);
        }
    }
    t
}

/// Classification and regression targets for sampled RoIs.
#[derive(Clone, Debug, Default)]
pub struct RoiTargets {
    pub rois: Vec<RoIBox>,
    /// Index into the active class list, or `A` for background.
    pub labels: Vec<usize>,
    /// Rows of foreground RoIs with their weighted regression targets.
    pub fg_rows: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Labels candidate RoIs (proposals plus ground truth) and samples at
/// most `roi_batch` of them, at most `roi_fg_fraction` foreground.
pub fn sample_rois<R: Rng + ?Sized>(
    candidates: &[RoIBox],
    gt: &[RoIBox],
    gt_labels: &[usize],
    background: usize,
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RoiTargets {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if c.width() <= 0.0 || c.height() <= 0.0 {
            continue;
        }
        let mut best = (0usize, 0.0);
        for (j, g) in gt.iter().enumerate() {
            let iou = c.iou(g);
            if iou > best.1 {
                best = (j, iou);
            }
        }
        if best.1 >= cfg.roi_fg_iou {
            fg.push((i, best.0));
        } else {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = (libm::round(cfg.roi_batch as f64 * cfg.roi_fg_fraction) as usize).max(1);
    fg.truncate(max_fg);
    bg.truncate(cfg.roi_batch - fg.len());
    let mut t = RoiTargets::default();
    for &(i, j) in &fg {
        t.fg_rows.push(t.rois.len());
        t.deltas.push(encode_weighted(&candidates[i], &gt[j], ROI_DELTA_WEIGHTS));
        t.rois.push(candidates[i]);
        t.labels.push(gt_labels[j]);
    }
    for &i in &bg {
        t.rois.push(candidates[i]);
        t.labels.push(background);
    }
    t
}

/// Loss terms of one training image.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Option<Var>,
    pub roi_cls: Var,
    pub roi_reg: Option<Var>,
}

/// Sum of RPN objectness BCE, RPN smooth-L1 on positives, RoI
/// cross-entropy and RoI smooth-L1 on foreground, each mean-reduced and
/// added with unit weights.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    rpn: &RpnTargets,
    rpn_logits: Var,
    rpn_deltas: Var,
    roi: &RoiTargets,
    class_logits: Var,
    box_deltas: Var,
) -> Result<LossTerms> {
    if rpn.sampled.is_empty() {
        return Err(invalid!("detection_loss: no anchors were assigned (missing ground truth?)"));
    }
    if roi.rois.is_empty() {
        return Err(invalid!("detection_loss: no RoIs"));
    }
    let obj = tape.gather(rpn_logits, &rpn.sampled)?;
    let labels: Vec<T> = rpn.labels.iter().map(|&v| T::lit(v)).collect();
    let rpn_cls = tape.bce_with_logits(obj, &labels)?;
    let mut total = rpn_cls;
    let rpn_reg = if rpn.positives.is_empty() {
        None
    } else {
        let idx: Vec<usize> = rpn.positives.iter().flat_map(|&a| (0..4).map(move |j| 4 * a + j)).collect();
        let pred = tape.gather(rpn_deltas, &idx)?;
        let target: Vec<T> = rpn.deltas.iter().flat_map(|d| d.iter().map(|&v| T::lit(v))).collect();
        let l = tape.smooth_l1(pred, &target)?;
        total = tape.add(total, l)?;
        Some(l)
    };
    let roi_cls = tape.cross_entropy(class_logits, &roi.labels)?;
    total = tape.add(total, roi_cls)?;
    let dw = tape.shape(box_deltas)[1];
    let roi_reg = if roi.fg_rows.is_empty() {
        None
    } else {
        let idx: Vec<usize> = roi
            .fg_rows
            .iter()
            .flat_map(|&r| {
                let c = roi.labels[r];
                (0..4).map(move |j| r * dw + 4 * c + j)
            })
            .collect();
        let pred = tape.gather(box_deltas, &idx)?;
        let target: Vec<T> = roi.deltas.iter().flat_map(|d| d.iter().map(|&v| T::lit(v))).collect();
        let l = tape.smooth_l1(pred, &target)?;
        total = tape.add(total, l)?;
        Some(l)
    };
    Ok(LossTerms { total, rpn_cls, rpn_reg, roi_cls, roi_reg })
}

/// One training image with its supports, already converted to tensors.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub query: Tensor<T>,
    pub gt: Vec<RoIBox>,
    /// Class id per ground truth box.
    pub gt_classes: Vec<usize>,
    /// Support pairs `(image, mask)` in the order of `classes`.
    pub supports: Vec<(Tensor<T>, Tensor<T>)>,
    pub classes: Vec<usize>,
}

/// Scalar values of one training forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl<T: Scalar> Detector<T> {
    /// Records the full training forward pass and returns the loss terms.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        sample: &TrainSample<T>,
        rng: &mut R,
    ) -> Result<(LossTerms, LossValues)> {
        if sample.gt.is_empty() {
            return Err(invalid!("training sample without ground truth"));
        }
        if sample.supports.len() != sample.classes.len() {
            return Err(invalid!("{} supports for {} classes", sample.supports.len(), sample.classes.len()));
        }
        let q = tape.constant(self.query_input(&sample.query)?);
        let needs_supports = self.cfg.toggles.use_drd || self.cfg.toggles.baseline_reweight;
        let mut sup = Vec::with_capacity(sample.supports.len());
        if needs_supports {
            for (img, mask) in &sample.supports {
                let x = tape.constant(support_input(img, mask)?);
                sup.push(self.backbone(tape, x)?);
            }
        }
        let stem = self.stem(tape, q, &sup)?;
        let (hf, wf) = stem.feature_hw;
        let anchors = self.anchors(hf, wf);
        let rpn_t = assign_anchors(&anchors, &sample.gt, &self.cfg);
        let proposals = self.proposals(tape, &stem);
        let mut candidates: Vec<RoIBox> = proposals.iter().map(|p| p.bbox).collect();
        candidates.extend(sample.gt.iter().map(|g| RoIBox::new(g.x1, g.y1, g.x2, g.y2)));
        let local: Vec<usize> = sample
            .gt_classes
            .iter()
            .map(|c| {
                sample
                    .classes
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| invalid!("ground-truth class {} has no support", c))
            })
            .collect::<Result<_>>()?;
        let roi_t = sample_rois(&candidates, &sample.gt, &local, sample.classes.len(), &self.cfg, rng);
        let out = self.roi_outputs(tape, &stem, &roi_t.rois, &sample.classes)?;
        let terms = detection_loss(tape, &rpn_t, stem.rpn_logits, stem.rpn_deltas, &roi_t, out.class_logits, out.box_deltas)?;
        let v = |x: Option<Var>| x.map(|x| tape.value(x)[0].to_f64_lossy()).unwrap_or(0.0);
        let values = LossValues {
            total: v(Some(terms.total)),
            rpn_cls: v(Some(terms.rpn_cls)),
            rpn_reg: v(terms.rpn_reg),
            roi_cls: v(Some(terms.roi_cls)),
            roi_reg: v(terms.roi_reg),
        };
        Ok((terms, values))
    }

    /// Forward, backward and gradient accumulation for one sample.
    pub fn accumulate_gradients<R: Rng + ?Sized>(&mut self, sample: &TrainSample<T>, rng: &mut R) -> Result<LossValues> {
        let (grads, values) = {
            let mut tape = Tape::with_params(&self.store);
            let (terms, values) = self.forward_train(&mut tape, sample, rng)?;
            (tape.backward(terms.total)?, values)
        };
        self.store.accumulate(&grads);
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(cfg: DetectorConfig) -> Detector<f64> {
        Detector::new(cfg, 7).unwrap()
    }

    fn zero_all(m: &mut Detector<f64>, ids: &[ParamId]) {
        for &id in ids {
            let n = m.store.get(id).tensor.len();
            m.store.set_data(id, &vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn backbone_shape_and_zero_input() {
        let mut cfg = DetectorConfig::default();
        cfg.query_size = 64;
        let mut m = model(cfg);
        let mut tape = Tape::with_params(&m.store);
        let img = Tensor::<f64>::full(&[3, 64, 64], 0.3);
        let x = tape.constant(m.query_input(&img).unwrap());
        let f = m.backbone(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), &[64, 8, 8]);
        drop(tape);
        let biases: Vec<ParamId> = m.params.backbone.iter().map(|c| c.bias).collect();
        zero_all(&mut m, &biases);
        let mut tape = Tape::with_params(&m.store);
        let x = tape.constant(Tensor::zeros(&[4, 64, 64]));
        let f = m.backbone(&mut tape, x).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strict_backbone_rejects_indivisible_input() {
        let m = model(DetectorConfig::tiny(16));
        let mut tape = Tape::with_params(&m.store);
        tape.set_strict(true);
        let x = tape.constant(Tensor::zeros(&[4, 30, 30]));
        assert!(m.backbone(&mut tape, x).is_err());
    }

    #[test]
    fn support_input_and_masks() {
        let img = Tensor::<f64>::full(&[3, 64, 64], 0.5);
        let zero = Tensor::<f64>::zeros(&[1, 64, 64]);
        let s = support_input(&img, &zero).unwrap();
        assert_eq!(&s.data()[..3 * 64 * 64], img.data());
        assert!(s.data()[3 * 64 * 64..].iter().all(|&v| v == 0.0));
        let m: Tensor<f64> = box_mask(&[RoIBox::new(8.0, 8.0, 24.0, 24.0)], 64);
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 256);
        let m: Tensor<f64> = box_mask(&[RoIBox::new(8.0, 8.0, 24.0, 24.0), RoIBox::new(16.0, 16.0, 32.0, 32.0)], 64);
        assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 256 + 256 - 64);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let bad = Tensor::<f64>::full(&[1, 64, 64], 0.5);
        assert!(support_input(&img, &bad).is_err());
    }

    #[test]
    fn zero_rpn_head_returns_anchors() {
        let mut m = model(DetectorConfig::default());
        let rp = m.params.rpn;
        zero_all(&mut m, &[rp.obj_w, rp.obj_b, rp.delta_w, rp.delta_b]);
        let mut tape = Tape::with_params(&m.store);
        let f = tape.constant(Tensor::full(&[64, 12, 12], 0.1));
        let sup = tape.constant(Tensor::full(&[64, 8, 8], 0.1));
        let stem = m.stem_from_feature(&mut tape, f, &[sup]).unwrap();
        let props = m.proposals(&tape, &stem);
        assert!(!props.is_empty());
        let anchors = m.anchors(12, 12);
        for p in &props {
            assert_eq!(p.objectness, 0.5);
            assert!(anchors.iter().any(|a| a.clip(96.0, 96.0) == p.bbox));
        }
    }

    #[test]
    fn head_shapes_and_zero_params() {
        let mut cfg = DetectorConfig::default();
        cfg.num_classes = 10;
        let mut m = model(cfg);
        let h = m.params.head;
        zero_all(&mut m, &[h.fc_w, h.fc_b, h.cls_w, h.cls_b, h.box_w, h.box_b]);
        let mut tape = Tape::with_params(&m.store);
        let z = tape.constant(Tensor::full(&[1, 64, 8, 8], 0.7));
        let (l, d) = m.roi_head(&mut tape, z).unwrap();
        assert_eq!(tape.shape(l), &[1, 11]);
        assert_eq!(tape.shape(d), &[1, 40]);
        assert!(tape.value(l).iter().chain(tape.value(d)).all(|&v| v == 0.0));
    }

    #[test]
    fn reweight_examples() {
        let z = Tensor::<f64>::from_f64(&[3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let onehot = Tensor::from_f64(&[3], &[0.0, 2.0, 0.0]).unwrap();
        let out = reweight_baseline(&z, &[ones.clone(), zeros, onehot, ones]).unwrap();
        assert_eq!(out[0], z);
        assert!(out[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(out[2].data(), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
        assert_eq!(out[3], out[0]);
        assert!(reweight_baseline(&z, &[Tensor::zeros(&[4])]).is_err());
    }

    #[test]
    fn nms_examples() {
        let d = |x: f64, s: f64| Detection { bbox: RoIBox::new(x, 0.0, x + 10.0, 10.0), class_id: 0, score: s };
        let kept = nms(&[d(0.0, 0.3), d(20.0, 0.9), d(40.0, 0.5)], 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(&[d(0.0, 0.8), d(0.0, 0.9)], 0.99);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn max_proposals_one_is_argmax() {
        let mut cfg = DetectorConfig::default();
        cfg.max_proposals = 1;
        let anchors: Vec<RoIBox> = (0..10).map(|i| RoIBox::centered(5.0 + 9.0 * i as f64, 20.0, 12.0)).collect();
        let logits: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64 * 0.1).collect();
        let props = rpn_select(&anchors, &logits, &[0.0; 40], 96.0, 96.0, &cfg);
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].bbox, anchors[7].clip(96.0, 96.0));
    }

    #[test]
    fn toggles_validate() {
        let t = ModelToggles { baseline_reweight: true, ..Default::default() };
        assert!(t.validate().is_err());
        assert!(Detector::<f64>::new(DetectorConfig { toggles: t, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn loss_requires_ground_truth() {
        let cfg = DetectorConfig::default();
        let anchors = vec![RoIBox::new(0.0, 0.0, 10.0, 10.0)];
        let t = assign_anchors(&anchors, &[], &cfg);
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1]));
        let d = tape.constant(Tensor::zeros(&[1, 4]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let bd = tape.constant(Tensor::zeros(&[1, 4]));
        // no gt: every anchor is negative, but RoI targets are empty
        assert!(detection_loss(&mut tape, &t, l, d, &RoiTargets::default(), c, bd).is_err());
    }
}
