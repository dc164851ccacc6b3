//! Central finite-difference verification of the reverse pass.
//!
//! Each check contracts the output with a fixed random tensor `R` and
//! compares the seeded reverse pass against `(f(x+h) - f(x-h)) / 2h` of
//! `<R, out>`, coordinate by coordinate.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{OpKind, ParamId, ParamStore, Tape, Var};
use crate::boxes::RoIBox;
use crate::cfa::{self, CfaMode, CfaParams, RoiAlignParams};
use crate::detector::{self, Detector, DetectorConfig, TrainSample};
use crate::drd::{self, DrdParams};
use crate::error::Result;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Backward rule to corrupt in the analytic pass.
    #[serde(skip)]
    pub fault: Option<OpKind>,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, max_coords: 64, fault: None }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub max_rel_err: f64,
    pub coords: usize,
    /// Coordinates re-checked at the smaller step.
    pub retries: usize,
    pub ops: BTreeSet<OpKind>,
}

/// Relative error whose denominator never drops below `abs_floor /
/// rel_tol`, so a coordinate passes when it is within `rel_tol`
/// relatively or within `abs_floor` absolutely.
pub fn rel_err(analytic: f64, numeric: f64, cfg: &FdConfig) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.abs_floor / cfg.rel_tol)
}

fn coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

fn contract(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Compares analytic and numeric gradients of `<R, build(inputs)>` with
/// respect to every input and to the listed parameters.
pub fn check<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    cfg: &FdConfig,
    seed: u64,
    build: F,
) -> Result<Probe>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forward = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).to_vec())
    };

    let (r, input_grads, param_grads, ops) = {
        let mut tape = Tape::with_params(store);
        tape.inject_fault(cfg.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let r: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let grads = tape.backward_seeded(out, &r)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        let pg: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| grads.param(id).unwrap_or_else(|| vec![0.0; store.get(id).tensor.len()]))
            .collect();
        (r, ig, pg, tape.differentiated_ops())
    };

    let f0 = contract(&forward(store, inputs)?, &r);
    let mut max_err: f64 = 0.0;
    let mut count = 0;
    let mut retries = 0;
    // Central difference at `cfg.step`; on failure, again at a step 100x
    // smaller, where agreement with either one-sided derivative is also
    // accepted (the point sits on a kink such as relu at 0).
    let mut judge = |g: f64, eval: &mut dyn FnMut(f64) -> Result<(f64, f64)>| -> Result<()> {
        let h = cfg.step;
        let (fp, fm) = eval(h)?;
        let mut err = rel_err(g, (fp - fm) / (2.0 * h), cfg);
        if err > cfg.rel_tol {
            retries += 1;
            let h = h / 100.0;
            let (fp, fm) = eval(h)?;
            let central = rel_err(g, (fp - fm) / (2.0 * h), cfg);
            let one_sided = rel_err(g, (fp - f0) / h, cfg).min(rel_err(g, (f0 - fm) / h, cfg));
            err = err.min(central.min(one_sided));
        }
        max_err = max_err.max(err);
        count += 1;
        Ok(())
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        for i in coords(g.len(), cfg.max_coords, &mut rng) {
            let x0 = work[k].data()[i];
            judge(g[i], &mut |h| {
                work[k].data_mut()[i] = x0 + h;
                let fp = contract(&forward(store, &work)?, &r);
                work[k].data_mut()[i] = x0 - h;
                let fm = contract(&forward(store, &work)?, &r);
                work[k].data_mut()[i] = x0;
                Ok((fp, fm))
            })?;
        }
    }
    let mut pstore = store.clone();
    for (k, g) in param_grads.iter().enumerate() {
        let id = params[k];
        for i in coords(g.len(), cfg.max_coords, &mut rng) {
            let x0 = pstore.get(id).tensor.data()[i];
            judge(g[i], &mut |h| {
                pstore.get_mut(id).tensor.data_mut()[i] = x0 + h;
                let fp = contract(&forward(&pstore, inputs)?, &r);
                pstore.get_mut(id).tensor.data_mut()[i] = x0 - h;
                let fm = contract(&forward(&pstore, inputs)?, &r);
                pstore.get_mut(id).tensor.data_mut()[i] = x0;
                Ok((fp, fm))
            })?;
        }
    }
    Ok(Probe { max_rel_err: max_err, coords: count, retries, ops })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub cases: usize,
    pub retries: usize,
    pub tol: f64,
    pub passed: bool,
    /// Operation kinds differentiated by this row.
    pub ops: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect()
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal samples pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (gap + v.abs()));
    t
}

fn random_box(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RoIBox {
    let x1 = rng.random_range(0.0..w as f64 * 0.6);
    let y1 = rng.random_range(0.0..h as f64 * 0.6);
    let x2 = rng.random_range(x1 + 1.0..w as f64 * 1.1);
    let y2 = rng.random_range(y1 + 1.0..h as f64 * 1.1);
    RoIBox::new(x1, y1, x2, y2)
}

struct Suite {
    cfg: FdConfig,
    rows: Vec<GradCheckRow>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn row(&mut self, name: &str, probes: Vec<Probe>) {
        let tol = self.cfg.rel_tol;
        let max = probes.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        let ops: BTreeSet<OpKind> = probes.iter().flat_map(|p| p.ops.iter().copied()).collect();
        self.rows.push(GradCheckRow {
            name: name.to_string(),
            max_rel_err: max,
            coords: probes.iter().map(|p| p.coords).sum(),
            cases: probes.len(),
            retries: probes.iter().map(|p| p.retries).sum(),
            tol,
            passed: max <= tol,
            ops: ops.iter().map(|k| k.name().to_string()).collect(),
        });
    }

    fn seed(&mut self) -> u64 {
        self.rng.random()
    }

    /// Three shape variants of a parameter-free op.
    fn op<F>(&mut self, name: &str, make: impl Fn(usize, &mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: F) -> Result<()>
    where
        F: for<'a> Fn(&mut Tape<'a, f64>, &[Var], usize) -> Result<Var>,
    {
        let store = ParamStore::new();
        let mut probes = Vec::new();
        for variant in 0..3 {
            let inputs = make(variant, &mut self.rng);
            let seed = self.seed();
            probes.push(check(&store, &[], &inputs, &self.cfg, seed, |t, v| build(t, v, variant))?);
        }
        self.row(name, probes);
        Ok(())
    }
}

/// Runs every per-op and composite check.
pub fn gradcheck_all(seed: u64, cfg: FdConfig) -> Result<GradCheckReport> {
    let mut s = Suite { cfg, rows: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

    const CONV: [(usize, usize, usize, usize, usize); 3] = [(2, 5, 3, 1, 1), (3, 7, 3, 2, 1), (4, 4, 1, 1, 0)];
    s.op(
        "conv2d",
        |v, r| {
            let (c, hw, k, _, _) = CONV[v];
            vec![randn(&[c, hw, hw + 1], r), randn(&[c + 1, c, k, k], r), randn(&[c + 1], r)]
        },
        |t, x, v| t.conv2d(x[0], x[1], Some(x[2]), CONV[v].3, CONV[v].4),
    )?;
    s.op(
        "linear",
        |v, r| {
            let (n, i, o) = [(1, 3, 2), (4, 5, 3), (3, 8, 6)][v];
            vec![randn(&[n, i], r), randn(&[o, i], r), randn(&[o], r)]
        },
        |t, x, _| t.linear(x[0], x[1], Some(x[2])),
    )?;
    s.op(
        "matmul",
        |v, r| {
            let (m, k, n) = [(2, 3, 4), (5, 1, 3), (4, 6, 2)][v];
            let a = if v == 1 { vec![k, m] } else { vec![m, k] };
            let b = if v == 2 { vec![n, k] } else { vec![k, n] };
            vec![randn(&a, r), randn(&b, r)]
        },
        |t, x, v| t.matmul_t(x[0], x[1], v == 1, v == 2),
    )?;
    s.op(
        "softmax",
        |v, r| vec![randn(&[[3, 4, 2][v], [5, 3, 6][v]], r)],
        |t, x, v| t.softmax(x[0], [1, 0, 1][v]),
    )?;
    s.op(
        "relu",
        |v, r| vec![away_from_zero(&[[4, 2, 3][v], [3, 6, 5][v]], 0.05, r)],
        |t, x, _| t.relu(x[0]),
    )?;
    for (name, f) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
        s.op(
            name,
            |v, r| {
                let sh = [vec![4], vec![2, 3], vec![2, 2, 3]][v].clone();
                vec![randn(&sh, r), randn(&sh, r)]
            },
            move |t, x, _| match f {
                0 => t.add(x[0], x[1]),
                1 => t.sub(x[0], x[1]),
                _ => t.mul(x[0], x[1]),
            },
        )?;
    }
    s.op("scale", |v, r| vec![randn(&[v + 2, 3], r)], |t, x, v| t.scale(x[0], [0.5, -2.0, 3.25][v]))?;
    s.op(
        "sum",
        |v, r| vec![randn(&[[4, 3, 2][v], [3, 5, 4][v]], r)],
        |t, x, v| t.sum(x[0], [None, Some(0), Some(1)][v]),
    )?;
    s.op(
        "global_avg_pool",
        |v, r| vec![randn(&[[vec![3, 4, 4], vec![2, 3, 5, 2], vec![6, 1, 3]][v].clone()].concat(), r)],
        |t, x, _| t.global_avg_pool(x[0]),
    )?;
    s.op(
        "concat",
        |v, r| {
            let (a, b) = [(vec![2, 3], vec![4, 3]), (vec![2, 3], vec![2, 1]), (vec![2, 2, 3], vec![1, 2, 3])][v].clone();
            vec![randn(&a, r), randn(&b, r)]
        },
        |t, x, v| t.concat(&[x[0], x[1]], [0, 1, 0][v]),
    )?;
    s.op(
        "reshape",
        |v, r| vec![randn(&[[6, 2, 4][v], [2, 6, 3][v]], r)],
        |t, x, v| t.reshape(x[0], &[[vec![3, 4], vec![12], vec![2, 2, 3]][v].clone()].concat()),
    )?;
    s.op("column", |v, r| vec![randn(&[v + 2, 3], r)], |t, x, v| t.column(x[0], v))?;
    s.op(
        "row_scale",
        |v, r| {
            let sh = [vec![3, 2], vec![2, 3, 4], vec![4, 2, 2, 2]][v].clone();
            vec![randn(&sh, r), randn(&[sh[0], 1], r)]
        },
        |t, x, _| t.row_scale(x[0], x[1]),
    )?;
    s.op(
        "channel_scale",
        |v, r| {
            let sh = [vec![3, 2, 2], vec![2, 4, 3, 3], vec![5, 1, 2]][v].clone();
            let c = sh[[0, 1, 0][v]];
            vec![randn(&sh, r), randn(&[c], r)]
        },
        |t, x, v| t.channel_scale(x[0], x[1], [0, 1, 0][v]),
    )?;
    s.op(
        "gather",
        |v, r| vec![randn(&[[5, 3, 8][v]], r)],
        |t, x, v| t.gather(x[0], &[vec![0, 4, 4, 2], vec![2, 1], vec![7, 0, 3, 3, 3, 5]][v].clone()),
    )?;
    s.op(
        "cross_entropy",
        |v, r| vec![randn(&[[1, 3, 5][v], [2, 4, 3][v]], r)],
        |t, x, v| t.cross_entropy(x[0], &[vec![1], vec![0, 3, 3], vec![2, 0, 1, 1, 0]][v].clone()),
    )?;
    const SL1_TARGET: [&[f64]; 3] = [&[0.2, -0.4, 0.9], &[-0.1, 0.5, 0.0, 0.3], &[0.7, -0.6]];
    s.op(
        "smooth_l1",
        |v, r| {
            // differences kept clear of the |d| = 1 kink
            let pred: Vec<f64> = SL1_TARGET[v]
                .iter()
                .map(|t| {
                    let d: f64 = r.random_range(0.1..0.8) * if r.random_bool(0.5) { 1.0 } else { 2.5 };
                    t + if r.random_bool(0.5) { d } else { -d }
                })
                .collect();
            vec![Tensor::from_f64(&[pred.len()], &pred).unwrap()]
        },
        |t, x, v| t.smooth_l1(x[0], SL1_TARGET[v]),
    )?;
    s.op(
        "bce_with_logits",
        |v, r| vec![randn(&[[2, 5, 9][v]], r)],
        |t, x, v| {
            let n = [2, 5, 9][v];
            let target: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            t.bce_with_logits(x[0], &target)
        },
    )?;
    let mut box_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    let roi_boxes: Vec<Vec<RoIBox>> = (0..3)
        .map(|v| (0..v + 1).map(|_| random_box(6 * 4, 5 * 4, &mut box_rng)).collect())
        .collect();
    s.op(
        "roi_align",
        |v, r| vec![randn(&[v + 1, 6, 5], r)],
        |t, x, v| t.roi_align(x[0], &roi_boxes[v], RoiAlignParams::new([4, 8, 12][v], 0.25)),
    )?;
    s.op(
        "resize_bilinear",
        |v, r| {
            let res = [4, 12, 8][v];
            vec![randn(&[2, 3, res, res], r)]
        },
        |t, x, _| t.resize_bilinear(x[0], 8),
    )?;

    composite_rows(&mut s)?;
    Ok(GradCheckReport { rel_tol: s.cfg.rel_tol, rows: s.rows })
}

fn drd_rows(s: &mut Suite) -> Result<()> {
    let mut probes_sim = Vec::new();
    let mut probes_distill = Vec::new();
    for (c, hq, hs, n) in [(8, 3, 2, 1), (16, 4, 3, 2), (16, 3, 4, 3)] {
        let mut store = ParamStore::new();
        let p = DrdParams::new(&mut store, "drd", c, &mut s.rng)?;
        let kq = randn(&[c / 8, hq, hq], &mut s.rng);
        let ks = randn(&[c / 8, hs, hs], &mut s.rng);
        let seed = s.seed();
        probes_sim.push(check(&store, &[p.phi.weight, p.phi_prime.weight], &[kq, ks], &s.cfg, seed, |t, v| {
            drd::similarity(t, v[0], v[1], &p.phi, &p.phi_prime)
        })?);
        let mut inputs = vec![randn(&[c, hq, hq], &mut s.rng)];
        inputs.extend((0..n).map(|_| randn(&[c, hs, hs], &mut s.rng)));
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let seed = s.seed();
        probes_distill.push(check(&store, &ids, &inputs, &s.cfg, seed, |t, v| {
            Ok(drd::refine(t, v[0], &v[1..], &p)?.refined)
        })?);
    }
    s.row("drd.similarity", probes_sim);
    s.row("drd.distill", probes_distill);
    Ok(())
}

fn cfa_rows(s: &mut Suite) -> Result<()> {
    let c = 8;
    for (b, &res) in cfa::RESOLUTIONS.iter().enumerate() {
        let mut probes = Vec::new();
        for n in 1..=3 {
            let mut store = ParamStore::new();
            let p = CfaParams::new(&mut store, "cfa", c, &mut s.rng)?;
            let bp = p.branches[b];
            let pooled = randn(&[n, c, res, res], &mut s.rng);
            let seed = s.seed();
            probes.push(check(&store, &[bp.fc1_w, bp.fc1_b, bp.fc2_w, bp.fc2_b], &[pooled], &s.cfg, seed, |t, v| {
                cfa::branch_weight(t, v[0], &bp)
            })?);
        }
        s.row(&alloc::format!("cfa.branch{res}"), probes);
    }
    let mut probes = Vec::new();
    for n in 1..=3 {
        let mut store = ParamStore::new();
        let p = CfaParams::new(&mut store, "cfa", c, &mut s.rng)?;
        let feat = randn(&[c, 6, 6], &mut s.rng);
        let boxes: Vec<RoIBox> = (0..n).map(|_| random_box(48, 48, &mut s.rng)).collect();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let seed = s.seed();
        probes.push(check(&store, &ids, &[feat], &s.cfg, seed, |t, v| {
            Ok(cfa::aggregate(t, v[0], &boxes, &p, CfaMode::Attention, 0.125)?.fused)
        })?);
    }
    s.row("cfa.aggregate", probes);
    Ok(())
}

fn detector_rows(s: &mut Suite) -> Result<()> {
    let mut head = Vec::new();
    let mut reweight = Vec::new();
    let mut rpn = Vec::new();
    let mut e2e = Vec::new();
    for variant in 0..3u64 {
        let seed = s.seed();
        let cfg = DetectorConfig::tiny(8 + 8 * (variant as usize % 2));
        let c = cfg.backbone.feature_dim;
        let m: Detector<f64> = Detector::new(cfg.clone(), seed)?;
        let h = m.params.head;
        let hp = [h.fc_w, h.fc_b, h.cls_w, h.cls_b, h.box_w, h.box_b];
        let n = variant as usize + 1;
        let fused = randn(&[n, c, 8, 8], &mut s.rng);
        let seed = s.seed();
        head.push(check(&m.store, &hp, &[fused.clone()], &s.cfg, seed, |t, v| {
            let (l, d) = m.roi_head(t, v[0])?;
            t.concat(&[l, d], 1)
        })?);

        let sup: Vec<Tensor<f64>> = (0..2).map(|_| randn(&[c, 2, 2], &mut s.rng)).collect();
        let seed = s.seed();
        reweight.push(check(&m.store, &hp, &[fused, sup[0].clone(), sup[1].clone()], &s.cfg, seed, |t, v| {
            let vecs = m.class_vectors(t, &v[1..])?;
            let mut outs = Vec::new();
            for w in vecs {
                let z = t.channel_scale(v[0], w.w, 1)?;
                let (l, d) = m.roi_head(t, z)?;
                outs.push(l);
                outs.push(d);
            }
            t.concat(&outs, 1)
        })?);

        let mut store_ids: Vec<ParamId> = m.params.backbone.iter().flat_map(|b| [b.weight, b.bias]).collect();
        let rp = m.params.rpn;
        store_ids.extend([rp.obj_w, rp.obj_b, rp.delta_w, rp.delta_b]);
        if let Some(d) = &m.params.drd {
            store_ids.extend([d.phi.weight, d.phi_prime.weight, d.query.key_w, d.support.value_w]);
        }
        let q = m.query_input(&Tensor::randn(&[3, 24, 24], 0.5, &mut s.rng))?;
        let sup_in = detector::support_input(
            &Tensor::randn(&[3, 16, 16], 0.5, &mut s.rng),
            &detector::box_mask(&[RoIBox::new(3.0, 3.0, 12.0, 11.0)], 16),
        )?;
        let seed = s.seed();
        rpn.push(check(&m.store, &store_ids, &[q.clone(), sup_in.clone()], &s.cfg, seed, |t, v| {
            let fq = m.backbone(t, v[0])?;
            let fs = m.backbone(t, v[1])?;
            let stem = m.stem_from_feature(t, fq, &[fs])?;
            let a = t.shape(stem.rpn_logits)[0];
            let l = t.reshape(stem.rpn_logits, &[a, 1])?;
            t.concat(&[l, stem.rpn_deltas], 1)
        })?);

        let all: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
        let seed = s.seed();
        e2e.push(end_to_end_probe(&m, &all, &s.cfg, seed)?);
    }
    s.row("detector.roi_head", head);
    s.row("detector.reweight_head", reweight);
    s.row("detector.backbone_drd_rpn", rpn);
    s.row("detector.end_to_end", e2e);
    Ok(())
}

/// A small random training sample for the tiny configuration.
pub fn tiny_sample(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> TrainSample<f64> {
    let q = cfg.query_size as f64;
    let gt = vec![RoIBox::new(2.0, 3.0, 13.0, 12.0).with_class(0), RoIBox::new(0.4 * q, 0.5 * q, 0.9 * q, 0.95 * q).with_class(2)];
    let s = cfg.support_size;
    let classes: Vec<usize> = (0..cfg.num_classes).collect();
    let supports = classes
        .iter()
        .map(|_| (Tensor::randn(&[3, s, s], 0.5, rng), detector::box_mask(&[RoIBox::new(2.0, 2.0, s as f64 - 3.0, s as f64 - 4.0)], s)))
        .collect();
    TrainSample { query: Tensor::randn(&[3, cfg.query_size, cfg.query_size], 0.5, rng), gt_classes: vec![0, 2], gt, supports, classes }
}

/// Full loss (backbone, distillation, RPN, aggregation, head) with the
/// proposal set frozen after a first pass, since proposals are treated
/// as constants by the reverse pass.
pub fn end_to_end_probe(m: &Detector<f64>, params: &[ParamId], cfg: &FdConfig, seed: u64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = tiny_sample(&m.cfg, &mut rng);
    let q = m.query_input(&sample.query)?;
    let sups: Vec<Tensor<f64>> =
        sample.supports.iter().map(|(i, k)| detector::support_input(i, k)).collect::<Result<_>>()?;
    let (rpn_t, roi_t) = {
        let mut tape = Tape::with_params(&m.store);
        let qv = tape.constant(q.clone());
        let sv: Vec<Var> = sups.iter().map(|t| tape.constant(t.clone())).collect();
        let fs: Vec<Var> = sv.iter().map(|&v| m.backbone(&mut tape, v)).collect::<Result<_>>()?;
        let stem = m.stem(&mut tape, qv, &fs)?;
        let anchors = m.anchors(stem.feature_hw.0, stem.feature_hw.1);
        let rpn_t = detector::assign_anchors(&anchors, &sample.gt, &m.cfg);
        let mut cands: Vec<RoIBox> = m.proposals(&tape, &stem).iter().map(|p| p.bbox).collect();
        cands.extend(sample.gt.iter().map(|g| RoIBox::new(g.x1, g.y1, g.x2, g.y2)));
        let roi_t = detector::sample_rois(&cands, &sample.gt, &sample.gt_classes, m.cfg.num_classes, &m.cfg, &mut rng);
        (rpn_t, roi_t)
    };
    let mut inputs = vec![q];
    inputs.extend(sups);
    let classes = sample.classes.clone();
    check(&m.store, params, &inputs, cfg, rng.random(), |t, v| {
        let fs: Vec<Var> = v[1..].iter().map(|&x| m.backbone(t, x)).collect::<Result<_>>()?;
        let stem = m.stem(t, v[0], &fs)?;
        let out = m.roi_outputs(t, &stem, &roi_t.rois, &classes)?;
        let terms = detector::detection_loss(t, &rpn_t, stem.rpn_logits, stem.rpn_deltas, &roi_t, out.class_logits, out.box_deltas)?;
        Ok(terms.total)
    })
}

fn composite_rows(s: &mut Suite) -> Result<()> {
    drd_rows(s)?;
    cfa_rows(s)?;
    detector_rows(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_probe_is_exact() {
        let store = ParamStore::new();
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let p = check(&store, &[], &[x], &FdConfig::default(), 1, |t, v| t.scale(v[0], 3.0)).unwrap();
        assert!(p.max_rel_err < 1e-9);
        assert_eq!(p.coords, 3);
        assert!(p.ops.contains(&OpKind::Scale));
    }

    #[test]
    fn injected_fault_is_caught() {
        let store = ParamStore::new();
        let x = Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 0.1]).unwrap();
        let cfg = FdConfig { fault: Some(OpKind::Softmax), ..Default::default() };
        let p = check(&store, &[], &[x], &cfg, 1, |t, v| t.softmax(v[0], 1)).unwrap();
        assert!(p.max_rel_err > 0.1);
    }

    #[test]
    fn rel_err_floor() {
        let cfg = FdConfig::default();
        assert_eq!(rel_err(0.0, 0.0, &cfg), 0.0);
        assert!(rel_err(1e-12, 5e-8, &cfg) < 1e-4);
        assert!(rel_err(1.0, 1.001, &cfg) > 1e-4);
    }
}
