//! Loop-level reference implementations checked against the vectorized
//! core: relation distillation, RoI Align and average precision.

use fsdet_core::autograd::{ParamStore, Tape};
use fsdet_core::boxes::RoIBox;
use fsdet_core::cfa::{self, RoiStatus};
use fsdet_core::drd::{self, DrdParams, EncoderParams};
use fsdet_core::metrics::ImageResult;
use fsdet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DRD_TOL: f64 = 1e-10;
pub const ROI_ALIGN_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub name: String,
    pub cases: usize,
    pub max_abs_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl OracleRow {
    fn new(name: &str, cases: usize, max_abs_err: f64, tol: f64) -> Self {
        OracleRow { name: name.into(), cases, max_abs_err, tol, passed: max_abs_err <= tol }
    }
}

/// Direct 3x3, stride 1, pad 1 convolution of `[C, H, W]`.
fn conv3x3(x: &[f64], (c, h, w): (usize, usize, usize), weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for i in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn encode_loop(store: &ParamStore<f64>, p: &EncoderParams, feat: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = feat.shape();
    let dims = (s[0], s[1], s[2]);
    let g = |id| store.get(id).tensor.data();
    (
        conv3x3(feat.data(), dims, g(p.key_w), g(p.key_b), s[0] / 8),
        conv3x3(feat.data(), dims, g(p.value_w), g(p.value_b), s[0] / 2),
    )
}

/// Relation distillation by explicit per-pixel loops. Returns the refined
/// `[C, Hq, Wq]` map and the per-class attention rows.
pub fn drd_reference(
    store: &ParamStore<f64>,
    p: &DrdParams,
    query: &Tensor<f64>,
    supports: &[Tensor<f64>],
) -> (Tensor<f64>, Vec<Vec<Vec<f64>>>) {
    let c = query.shape()[0];
    let (ck, cv) = (c / 8, c / 2);
    let nq = query.shape()[1] * query.shape()[2];
    let phi = store.get(p.phi.weight).tensor.data();
    let phi_p = store.get(p.phi_prime.weight).tensor.data();
    let (kq, vq) = encode_loop(store, &p.query, query);
    let mut out = vec![0.0; c * nq];
    out[..cv * nq].copy_from_slice(&vq);
    let mut attention = Vec::new();
    for s in supports {
        let ns = s.shape()[1] * s.shape()[2];
        let (ks, vs) = encode_loop(store, &p.support, s);
        let mut rows = Vec::with_capacity(nq);
        for i in 0..nq {
            let pq: Vec<f64> = (0..ck).map(|o| (0..ck).map(|a| phi[o * ck + a] * kq[a * nq + i]).sum()).collect();
            let sims: Vec<f64> = (0..ns)
                .map(|j| {
                    (0..ck)
                        .map(|o| pq[o] * (0..ck).map(|a| phi_p[o * ck + a] * ks[a * ns + j]).sum::<f64>())
                        .sum()
                })
                .collect();
            let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sims.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let row: Vec<f64> = e.iter().map(|v| v / z).collect();
            for ch in 0..cv {
                out[(cv + ch) * nq + i] += (0..ns).map(|j| row[j] * vs[ch * ns + j]).sum::<f64>();
            }
            rows.push(row);
        }
        attention.push(rows);
    }
    (Tensor::new(&[c, query.shape()[1], query.shape()[2]], out).expect("consistent shape"), attention)
}

/// A random relation-distillation instance with non-zero biases.
pub struct DrdCase {
    pub store: ParamStore<f64>,
    pub params: DrdParams,
    pub query: Tensor<f64>,
    pub supports: Vec<Tensor<f64>>,
}

impl DrdCase {
    pub fn random(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize, max_n: usize) -> Result<DrdCase> {
        let c = 8 * rng.random_range(1..=max_c / 8);
        let mut store = ParamStore::new();
        let params = DrdParams::new(&mut store, "drd", c, rng)?;
        for id in [params.query.key_b, params.query.value_b, params.support.key_b, params.support.value_b] {
            let n = store.get(id).tensor.len();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.set_data(id, &v)?;
        }
        let mut dims = || [c, rng.random_range(1..=max_hw), rng.random_range(1..=max_hw)];
        let q = dims();
        let s = dims();
        let query = Tensor::randn(&q, 1.0, rng);
        let n = rng.random_range(1..=max_n);
        let supports = (0..n).map(|_| Tensor::randn(&s, 1.0, rng)).collect();
        Ok(DrdCase { store, params, query, supports })
    }

    /// Vectorized refine: refined map and attention matrices.
    pub fn vectorized(&self) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
        let mut tape = Tape::with_params(&self.store);
        let q = tape.constant(self.query.clone());
        let s: Vec<_> = self.supports.iter().map(|t| tape.constant(t.clone())).collect();
        let d = drd::refine(&mut tape, q, &s, &self.params)?;
        let att = d.attention.iter().map(|a| tape.tensor(a.w)).collect();
        Ok((tape.tensor(d.refined), att))
    }
}

pub fn check_drd(seed: u64, cases: usize) -> Result<OracleRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = DrdCase::random(&mut rng, 32, 8, 4)?;
        let (fast, att) = case.vectorized()?;
        let (slow, rows) = drd_reference(&case.store, &case.params, &case.query, &case.supports);
        worst = worst.max(fast.max_abs_diff(&slow));
        for (a, r) in att.iter().zip(&rows) {
            let flat: Vec<f64> = r.iter().flatten().copied().collect();
            worst = worst.max(a.data().iter().zip(&flat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    Ok(OracleRow::new("drd.distill", cases, worst, DRD_TOL))
}

/// Bilinear read at continuous position (y, x) with cell `i` centered at
/// `i + 0.5`; zero more than one cell outside the map, edge-clamped
/// otherwise.
pub fn bilinear_reference(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -0.5 || y > h as f64 + 0.5 || x < -0.5 || x > w as f64 + 0.5 {
        return 0.0;
    }
    let yc = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let xc = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// RoI Align written directly from its definition: each of the r x r bins
/// averages `sampling^2` evenly spaced bilinear reads.
pub fn roi_align_reference(feature: &Tensor<f64>, b: &RoIBox, r: usize, scale: f64, sampling: usize) -> Tensor<f64> {
    let s = feature.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c * r * r];
    let (x1, y1, x2, y2) = (b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= w as f64 || y1 >= h as f64 {
        return Tensor::new(&[c, r, r], out).expect("shape");
    }
    for ch in 0..c {
        let plane = &feature.data()[ch * h * w..(ch + 1) * h * w];
        for by in 0..r {
            for bx in 0..r {
                let v = if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
                    bilinear_reference(plane, h, w, (y1 + y2) / 2.0, (x1 + x2) / 2.0)
                } else {
                    let (bh, bw) = ((y2 - y1) / r as f64, (x2 - x1) / r as f64);
                    let mut acc = 0.0;
                    for iy in 0..sampling {
                        for ix in 0..sampling {
                            let y = y1 + bh * (by as f64 + (iy as f64 + 0.5) / sampling as f64);
                            let x = x1 + bw * (bx as f64 + (ix as f64 + 0.5) / sampling as f64);
                            acc += bilinear_reference(plane, h, w, y, x);
                        }
                    }
                    acc / (sampling * sampling) as f64
                };
                out[(ch * r + by) * r + bx] = v;
            }
        }
    }
    Tensor::new(&[c, r, r], out).expect("shape")
}

/// Random box mixing ordinary, degenerate and out-of-bounds cases, in
/// image coordinates for a feature of `h x w` cells at `scale`.
pub fn random_roi_box(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> RoIBox {
    let (ih, iw) = (h as f64 / scale, w as f64 / scale);
    // uniform in [lo, lo + span)
    let mut u = |lo: f64, span: f64| lo + span * rng.random::<f64>();
    match u(0.0, 10.0) as usize {
        0 => {
            let (x, y) = (u(0.0, iw), u(0.0, ih));
            RoIBox::new(x, y, x, y)
        }
        1 => {
            let x = u(0.0, iw);
            RoIBox::new(x, u(0.0, ih / 2.0), x, u(ih / 2.0, ih / 2.0))
        }
        2 => {
            let x = u(iw, iw);
            RoIBox::new(x, 0.0, x + u(1.0, iw), ih)
        }
        3 => {
            let x2 = -u(0.0, iw);
            RoIBox::new(x2 - u(1.0, iw), 0.0, x2, ih)
        }
        _ => {
            let (x1, y1) = (u(-0.3 * iw, 1.3 * iw), u(-0.3 * ih, 1.3 * ih));
            RoIBox::new(x1, y1, x1 + u(0.05, 1.2 * iw), y1 + u(0.05, 1.2 * ih))
        }
    }
}

pub fn check_roi_align(seed: u64, cases: usize) -> Result<(OracleRow, [usize; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut statuses = [0usize; 3];
    for _ in 0..cases {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=10), rng.random_range(1..=10));
        let feature = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let scale = [1.0, 0.5, 0.125][rng.random_range(0..3)];
        let b = random_roi_box(&mut rng, h, w, scale);
        let r = rng.random_range(1..=12);
        let sampling = rng.random_range(1..=3);
        let (fast, status) = cfa::roi_align(&feature, &b, r, scale, sampling)?;
        statuses[match status {
            RoiStatus::Ok => 0,
            RoiStatus::Degenerate => 1,
            RoiStatus::OutOfBounds => 2,
        }] += 1;
        let slow = roi_align_reference(&feature, &b, r, scale, sampling);
        if !fast.all_finite() {
            worst = f64::INFINITY;
        }
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    Ok((OracleRow::new("roi_align", cases, worst, ROI_ALIGN_TOL), statuses))
}

/// AP from its definition: for every recall level reached, the best
/// precision at that recall or beyond, weighted by the recall increment.
/// Matching is brute force over all ground truth of the image.
pub fn reference_ap(images: &[ImageResult], class_id: usize, iou_thr: f64) -> Option<f64> {
    let n_gt = images.iter().flat_map(|im| &im.gt).filter(|g| g.class_id == Some(class_id)).count();
    if n_gt == 0 {
        return None;
    }
    let mut dets = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (j, d) in im.detections.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, i, j));
            }
        }
    }
    // descending score, ties in input order
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut taken = std::collections::HashSet::new();
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, &(_, i, j)) in dets.iter().enumerate() {
        let d = &images[i].detections[j];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in images[i].gt.iter().enumerate() {
            if gt.class_id != Some(class_id) {
                continue;
            }
            let iou = d.bbox.iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_thr && taken.insert((i, g)) {
                tp += 1;
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let r = points[k].0;
        if r > prev_recall {
            let p = points[k..].iter().map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Every oracle comparison of the `oracle` subcommand.
pub fn run_all(seed: u64) -> Result<Vec<OracleRow>> {
    let (roi, _) = check_roi_align(seed ^ 0x5201, 200)?;
    Ok(vec![check_drd(seed, 50)?, roi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsdet_core::detector::Detection;
    use fsdet_core::metrics::average_precision;

    #[test]
    fn drd_small_batch_matches() {
        let row = check_drd(3, 5).unwrap();
        assert!(row.passed, "{row:?}");
    }

    #[test]
    fn roi_align_small_batch_matches() {
        let (row, _) = check_roi_align(4, 40).unwrap();
        assert!(row.passed, "{row:?}");
    }

    #[test]
    fn bilinear_reads_cell_centres() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_reference(&plane, 2, 2, 0.5, 0.5), 1.0);
        assert_eq!(bilinear_reference(&plane, 2, 2, 1.0, 1.0), 2.5);
        assert_eq!(bilinear_reference(&plane, 2, 2, 5.0, 0.5), 0.0);
    }

    #[test]
    fn reference_ap_agrees_on_a_mixed_case() {
        let g = |x: f64| RoIBox::new(x, 0.0, x + 10.0, 10.0).with_class(0);
        let d = |x: f64, s: f64| Detection { bbox: RoIBox::new(x, 0.0, x + 10.0, 10.0), class_id: 0, score: s };
        let imgs = vec![
            ImageResult { detections: vec![d(0.0, 0.9), d(0.5, 0.8), d(50.0, 0.7)], gt: vec![g(0.0), g(20.0)] },
            ImageResult { detections: vec![d(20.0, 0.6)], gt: vec![g(20.0)] },
        ];
        let r = reference_ap(&imgs, 0, 0.5).unwrap();
        // TP FP FP TP over 3 gt: 1/3 * 1 + 1/3 * 0.5
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(average_precision(&imgs, 0, 0.5), Some(r));
    }
}
