//! Context-aware feature aggregation.
//!
//! Every proposal is pooled with RoI Align at resolutions 4, 8 and 12. Each
//! pooled map gets its own attention branch (global average pool, then two
//! fully connected layers with a ReLU between them) that emits one logit;
//! the three logits are softmax-normalised and used to blend the maps after
//! resizing them to a common 8x8 grid.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::boxes::RoIBox;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

/// Pooling resolutions of the three branches.
pub const RESOLUTIONS: [usize; 3] = [4, 8, 12];
/// Common grid the branches are resized to before fusion.
pub const FUSED_RESOLUTION: usize = 8;
/// Index of the branch whose resolution equals [`FUSED_RESOLUTION`].
pub const BASE_BRANCH: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAlignParams {
    pub resolution: usize,
    /// Feature cells per image pixel.
    pub spatial_scale: f64,
    pub sampling_ratio: usize,
}

impl RoiAlignParams {
    pub fn new(resolution: usize, spatial_scale: f64) -> Self {
        RoiAlignParams { resolution, spatial_scale, sampling_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(invalid!("roi_align resolution must be >= 1"));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(invalid!("roi_align spatial_scale must be positive, got {}", self.spatial_scale));
        }
        if self.sampling_ratio == 0 {
            return Err(invalid!("roi_align sampling_ratio must be >= 1"));
        }
        Ok(())
    }
}

/// How a box was pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoiStatus {
    Ok,
    /// Zero width or height: every bin holds the sample at the box center.
    Degenerate,
    /// No overlap with the feature map: all zeros.
    OutOfBounds,
}

pub fn roi_status(b: &RoIBox, height: usize, width: usize, scale: f64) -> RoiStatus {
    let (x1, y1, x2, y2) = (b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= width as f64 || y1 >= height as f64 {
        RoiStatus::OutOfBounds
    } else if b.width() <= 0.0 || b.height() <= 0.0 {
        RoiStatus::Degenerate
    } else {
        RoiStatus::Ok
    }
}

/// Bilinear taps for one continuous sample position, in the convention
/// where feature cell `i` is centered at `i + 0.5`. Positions more than one
/// cell outside the map yield no taps.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    let (mut y, mut x) = (y - 0.5, x - 0.5);
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let (mut y0, mut x0) = (y as usize, x as usize);
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// Visits every (bin, tap) pair of one box with the weight the tap carries
/// into that bin's average.
fn for_each_tap(b: &RoIBox, h: usize, w: usize, p: &RoiAlignParams, mut f: impl FnMut(usize, usize, f64)) {
    let r = p.resolution;
    match roi_status(b, h, w, p.spatial_scale) {
        RoiStatus::OutOfBounds => {}
        RoiStatus::Degenerate => {
            let (cx, cy) = b.center();
            if let Some(taps) = bilinear_taps(cy * p.spatial_scale, cx * p.spatial_scale, h, w) {
                for bin in 0..r * r {
                    for &(idx, wt) in &taps {
                        f(bin, idx, wt);
                    }
                }
            }
        }
        RoiStatus::Ok => {
            let s = p.sampling_ratio;
            let (x0, y0) = (b.x1 * p.spatial_scale, b.y1 * p.spatial_scale);
            let bin_w = b.width() * p.spatial_scale / r as f64;
            let bin_h = b.height() * p.spatial_scale / r as f64;
            let inv = 1.0 / (s * s) as f64;
            for py in 0..r {
                for px in 0..r {
                    let bin = py * r + px;
                    for iy in 0..s {
                        let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s as f64;
                        for ix in 0..s {
                            let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s as f64;
                            if let Some(taps) = bilinear_taps(y, x, h, w) {
                                for &(idx, wt) in &taps {
                                    f(bin, idx, wt * inv);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Pools one box from a `[C, H, W]` buffer into `dst` (`[C, r, r]`).
pub(crate) fn roi_align_kernel<T: Scalar>(
    feat: &[T],
    (c, h, w): (usize, usize, usize),
    b: &RoIBox,
    p: &RoiAlignParams,
    dst: &mut [T],
) {
    let rr = p.resolution * p.resolution;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for_each_tap(b, h, w, p, |bin, idx, wt| {
        let wt = T::lit(wt);
        for ch in 0..c {
            dst[ch * rr + bin] += wt * feat[ch * h * w + idx];
        }
    });
}

pub(crate) fn roi_align_backward_kernel<T: Scalar>(
    g: &[T],
    (c, h, w): (usize, usize, usize),
    b: &RoIBox,
    p: &RoiAlignParams,
    dfeat: &mut [T],
) {
    let rr = p.resolution * p.resolution;
    for_each_tap(b, h, w, p, |bin, idx, wt| {
        let wt = T::lit(wt);
        for ch in 0..c {
            dfeat[ch * h * w + idx] += wt * g[ch * rr + bin];
        }
    });
}

/// Source coordinate and interpolation weight for align-corners resizing.
fn resize_coord(o: usize, r: usize, t: usize) -> (usize, usize, f64) {
    if r == 1 || t == 1 {
        return (0, 0, 0.0);
    }
    let src = o as f64 * (r - 1) as f64 / (t - 1) as f64;
    let i0 = (src as usize).min(r - 1);
    let i1 = (i0 + 1).min(r - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn resize_plane<T: Scalar>(src: &[T], r: usize, t: usize, dst: &mut [T]) {
    if r == t {
        dst.copy_from_slice(src);
        return;
    }
    for oy in 0..t {
        let (y0, y1, fy) = resize_coord(oy, r, t);
        let fy = T::lit(fy);
        for ox in 0..t {
            let (x0, x1, fx) = resize_coord(ox, r, t);
            let fx = T::lit(fx);
            let top = src[y0 * r + x0] * (T::one() - fx) + src[y0 * r + x1] * fx;
            let bot = src[y1 * r + x0] * (T::one() - fx) + src[y1 * r + x1] * fx;
            dst[oy * t + ox] = top * (T::one() - fy) + bot * fy;
        }
    }
}

pub(crate) fn resize_plane_backward<T: Scalar>(g: &[T], r: usize, t: usize, dsrc: &mut [T]) {
    if r == t {
        dsrc.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        return;
    }
    for oy in 0..t {
        let (y0, y1, fy) = resize_coord(oy, r, t);
        let fy = T::lit(fy);
        for ox in 0..t {
            let (x0, x1, fx) = resize_coord(ox, r, t);
            let fx = T::lit(fx);
            let gv = g[oy * t + ox];
            dsrc[y0 * r + x0] += gv * (T::one() - fy) * (T::one() - fx);
            dsrc[y0 * r + x1] += gv * (T::one() - fy) * fx;
            dsrc[y1 * r + x0] += gv * fy * (T::one() - fx);
            dsrc[y1 * r + x1] += gv * fy * fx;
        }
    }
}

/// RoI Align of a single box, outside any tape.
pub fn roi_align<T: Scalar>(
    feature: &Tensor<T>,
    b: &RoIBox,
    resolution: usize,
    spatial_scale: f64,
    sampling_ratio: usize,
) -> Result<(Tensor<T>, RoiStatus)> {
    let p = RoiAlignParams { resolution, spatial_scale, sampling_ratio };
    p.validate()?;
    let s = feature.shape();
    if s.len() != 3 {
        return Err(invalid!("roi_align feature must be [C,H,W], got {:?}", s));
    }
    if !b.is_valid() {
        return Err(invalid!("roi_align box is not a valid box: {:?}", b));
    }
    let mut out = vec![T::zero(); s[0] * resolution * resolution];
    roi_align_kernel(feature.data(), (s[0], s[1], s[2]), b, &p, &mut out);
    Ok((Tensor::new(&[s[0], resolution, resolution], out)?, roi_status(b, s[1], s[2], spatial_scale)))
}

/// Align-corners bilinear resize of a `[C, r, r]` map.
pub fn resize_bilinear<T: Scalar>(map: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let s = map.shape();
    if s.len() != 3 || s[1] != s[2] || target == 0 {
        return Err(invalid!("resize_bilinear expects [C, r, r] and target >= 1, got {:?}", s));
    }
    let r = s[1];
    let mut out = vec![T::zero(); s[0] * target * target];
    for (src, dst) in map.data().chunks_exact(r * r).zip(out.chunks_exact_mut(target * target)) {
        resize_plane(src, r, target, dst);
    }
    Tensor::new(&[s[0], target, target], out)
}

/// Which pooling path the aggregation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfaMode {
    /// Three resolutions fused with learned softmax weights.
    Attention,
    /// Three resolutions fused with equal weights.
    Average,
    /// Single resolution-8 pooling.
    Single,
}

/// One attention branch: `fc2(relu(fc1(gap(pooled))))`, C -> C/4 -> 1.
#[derive(Clone, Copy, Debug)]
pub struct BranchParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CfaParams {
    pub branches: [BranchParams; 3],
    pub channels: usize,
}

impl CfaParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 4 {
            return Err(invalid!("cfa needs at least 4 channels, got {channels}"));
        }
        let hidden = channels / 4;
        let mut make = |b: usize| -> Result<BranchParams> {
            let name = |s: &str| alloc::format!("{prefix}.branch{}.{s}", RESOLUTIONS[b]);
            Ok(BranchParams {
                fc1_w: store.add(&name("fc1.weight"), Tensor::he_normal(&[hidden, channels], channels, rng))?,
                fc1_b: store.add(&name("fc1.bias"), Tensor::zeros(&[hidden]))?,
                fc2_w: store.add(&name("fc2.weight"), Tensor::he_normal(&[1, hidden], hidden, rng))?,
                fc2_b: store.add(&name("fc2.bias"), Tensor::zeros(&[1]))?,
            })
        };
        Ok(CfaParams { branches: [make(0)?, make(1)?, make(2)?], channels })
    }
}

/// Attention logit(s) for pooled maps `[C, r, r]` or `[n, C, r, r]`.
/// Returns `[1]` or `[n, 1]` respectively.
pub fn branch_weight<T: Scalar>(tape: &mut Tape<'_, T>, pooled: Var, p: &BranchParams) -> Result<Var> {
    let gap = tape.global_avg_pool(pooled)?;
    let w1 = tape.param(p.fc1_w);
    let b1 = tape.param(p.fc1_b);
    let h = tape.linear(gap, w1, Some(b1))?;
    let h = tape.relu(h)?;
    let w2 = tape.param(p.fc2_w);
    let b2 = tape.param(p.fc2_b);
    tape.linear(h, w2, Some(b2))
}

/// Tape values produced by [`aggregate`].
pub struct Aggregated {
    /// `[n, C, 8, 8]`.
    pub fused: Var,
    /// Pooled maps per branch, `[n, C, r, r]`; only the r=8 map in
    /// [`CfaMode::Single`].
    pub pooled: Vec<Var>,
    /// `[n, 3]` branch weights (absent in [`CfaMode::Single`]).
    pub weights: Option<Var>,
}

/// Pools every box at the three resolutions and fuses them.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    feature: Var,
    boxes: &[RoIBox],
    params: &CfaParams,
    mode: CfaMode,
    spatial_scale: f64,
) -> Result<Aggregated> {
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(invalid!("aggregate: invalid box {:?}", b));
    }
    if mode == CfaMode::Single {
        let p = RoiAlignParams::new(FUSED_RESOLUTION, spatial_scale);
        let pooled = tape.roi_align(feature, boxes, p)?;
        return Ok(Aggregated { fused: pooled, pooled: vec![pooled], weights: None });
    }
    let n = boxes.len();
    let mut pooled = Vec::with_capacity(3);
    let mut resized = Vec::with_capacity(3);
    for &r in &RESOLUTIONS {
        let p = tape.roi_align(feature, boxes, RoiAlignParams::new(r, spatial_scale))?;
        pooled.push(p);
        resized.push(if r == FUSED_RESOLUTION { p } else { tape.resize_bilinear(p, FUSED_RESOLUTION)? });
    }
    let weights = match mode {
        CfaMode::Attention => {
            let logits = pooled
                .iter()
                .zip(&params.branches)
                .map(|(&p, bp)| branch_weight(tape, p, bp))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&logits, 1)?;
            tape.softmax(stacked, 1)?
        }
        _ => tape.constant(Tensor::full(&[n, 3], T::one() / T::lit(3.0))),
    };
    let mut fused = None;
    for (b, &map) in resized.iter().enumerate() {
        let w = tape.column(weights, b)?;
        let term = tape.row_scale(map, w)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(Aggregated { fused: fused.expect("three branches"), pooled, weights: Some(weights) })
}

/// Single-box view of the aggregation with concrete tensors.
#[derive(Clone, Debug)]
pub struct PooledFeature<T> {
    pub per_branch: Vec<Tensor<T>>,
    pub fused: Tensor<T>,
    pub weights: [f64; 3],
    pub status: RoiStatus,
}

pub fn aggregate_one<T: Scalar>(
    store: &ParamStore<T>,
    feature: &Tensor<T>,
    b: &RoIBox,
    params: &CfaParams,
    mode: CfaMode,
    spatial_scale: f64,
) -> Result<PooledFeature<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(invalid!("aggregate feature must be [C,H,W], got {:?}", s));
    }
    let status = roi_status(b, s[1], s[2], spatial_scale);
    let mut tape = Tape::with_params(store);
    let f = tape.constant(feature.clone());
    let agg = aggregate(&mut tape, f, core::slice::from_ref(b), params, mode, spatial_scale)?;
    let strip = |tape: &Tape<'_, T>, v: Var| -> Result<Tensor<T>> {
        let sh = tape.shape(v);
        Tensor::new(&sh[1..], tape.value(v).to_vec())
    };
    let weights = match agg.weights {
        Some(w) => {
            let v = tape.value(w);
            [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
        }
        None => [0.0, 1.0, 0.0],
    };
    Ok(PooledFeature {
        per_branch: agg.pooled.iter().map(|&v| strip(&tape, v)).collect::<Result<_>>()?,
        fused: strip(&tape, agg.fused)?,
        weights,
        status,
    })
}
