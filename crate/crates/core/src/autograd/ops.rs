use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::boxes::RoIBox;
use crate::cfa::{self, RoiAlignParams};
use crate::error::{invalid, Result};
use crate::scalar::{gemm, MatView};
use crate::Scalar;

/// Kinds of recorded operations, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Conv2d,
    Linear,
    MatMul,
    Softmax,
    Relu,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    GlobalAvgPool,
    Concat,
    Reshape,
    Column,
    RowScale,
    ChannelScale,
    Gather,
    CrossEntropy,
    SmoothL1,
    BceWithLogits,
    RoiAlign,
    ResizeBilinear,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::MatMul,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::GlobalAvgPool,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Column,
        OpKind::RowScale,
        OpKind::ChannelScale,
        OpKind::Gather,
        OpKind::CrossEntropy,
        OpKind::SmoothL1,
        OpKind::BceWithLogits,
        OpKind::RoiAlign,
        OpKind::ResizeBilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Column => "column",
            OpKind::RowScale => "row_scale",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Gather => "gather",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::RoiAlign => "roi_align",
            OpKind::ResizeBilinear => "resize_bilinear",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var, axis: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var, axis: Option<usize> },
    GlobalAvgPool { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Column { x: Var, col: usize },
    RowScale { x: Var, f: Var },
    ChannelScale { x: Var, w: Var, axis: usize },
    Gather { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SmoothL1 { pred: Var, target: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    RoiAlign { feat: Var, boxes: Vec<RoIBox>, params: RoiAlignParams },
    ResizeBilinear { x: Var, target: usize },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Column { .. } => OpKind::Column,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::Gather { .. } => OpKind::Gather,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::RoiAlign { .. } => OpKind::RoiAlign,
            Op::ResizeBilinear { .. } => OpKind::ResizeBilinear,
        })
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Softmax { x, .. }
            | Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Sum { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x }
            | Op::Column { x, .. }
            | Op::Gather { x, .. }
            | Op::ResizeBilinear { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::RowScale { x, f } => vec![*x, *f],
            Op::ChannelScale { x, w, .. } => vec![*x, *w],
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::RoiAlign { feat, .. } => vec![*feat],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, axis extent, inner) strides for iterating along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Tape<'_, T> {
    /// 2-D cross-correlation of a `[C_in, H, W]` map with `[C_out, C_in, kh, kw]`
    /// filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 {
            return Err(invalid!("conv2d input must be [C,H,W], got {:?}", xs));
        }
        if ws.len() != 4 {
            return Err(invalid!("conv2d weight must be [C_out,C_in,kh,kw], got {:?}", ws));
        }
        if ws[1] != xs[0] {
            return Err(invalid!("conv2d channel dimension: input has {}, weight expects {}", xs[0], ws[1]));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(invalid!("conv2d bias dimension: expected [{}], got {:?}", ws[0], self.shape(b)));
            }
        }
        let (h, wd) = (xs[1], xs[2]);
        if h + 2 * padding < ws[2] || wd + 2 * padding < ws[3] {
            return Err(invalid!("conv2d height/width smaller than kernel"));
        }
        let (sh, sw) = (h + 2 * padding - ws[2], wd + 2 * padding - ws[3]);
        if self.is_strict() && (sh % stride != 0 || sw % stride != 0) {
            return Err(invalid!("conv2d height/width not exactly divisible by stride {stride} (strict mode)"));
        }
        let geo = ConvGeometry {
            cin: xs[0],
            h,
            w: wd,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho: sh / stride + 1,
            wo: sw / stride + 1,
        };
        let cols = if geo.pointwise() { Vec::new() } else { im2col(self.value(x), &geo) };
        let mut out = vec![T::zero(); geo.cout * geo.pixels()];
        {
            let src = if geo.pointwise() { self.value(x) } else { &cols };
            gemm(
                T::one(),
                MatView::new(self.value(w), geo.cout, geo.patch()),
                MatView::new(src, geo.patch(), geo.pixels()),
                T::zero(),
                &mut out,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b);
            for (row, &bv) in out.chunks_exact_mut(geo.pixels()).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(vec![geo.cout, geo.ho, geo.wo], out, Op::Conv2d { x, w, b, geo, cols }))
    }

    /// Affine map over the trailing dimension: `x W^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(invalid!("linear weight must be [D_out,D_in], got {:?}", ws));
        }
        let (dout, din) = (ws[0], ws[1]);
        if *xs.last().unwrap() != din {
            return Err(invalid!("linear input dimension {} does not match D_in {}", xs.last().unwrap(), din));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(invalid!("linear bias dimension: expected [{}], got {:?}", dout, self.shape(b)));
            }
        }
        let n = numel(&xs) / din;
        let mut out = vec![T::zero(); n * dout];
        gemm(
            T::one(),
            MatView::new(self.value(x), n, din),
            MatView::new(self.value(w), dout, din).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(shape, out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.mat_view(a, ta)?, self.mat_view(b, tb)?);
        let (m, k) = av.dims();
        let (k2, n) = bv.dims();
        if k != k2 {
            return Err(invalid!("matmul inner dimensions disagree: {} vs {}", k, k2));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), av, bv, T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }))
    }

    fn mat_view(&self, v: Var, trans: bool) -> Result<MatView<'_, T>> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(invalid!("matmul operands must be 2-D, got {:?}", s));
        }
        let m = MatView::new(self.value(v), s[0], s[1]);
        Ok(if trans { m.t() } else { m })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid!("softmax axis {} out of range for {:?}", axis, shape));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut mx = T::neg_infinity();
                for d in 0..dim {
                    mx = mx.max(src[base + d * inner]);
                }
                let mut s = T::zero();
                for d in 0..dim {
                    let e = (src[base + d * inner] - mx).exp();
                    out[base + d * inner] = e;
                    s += e;
                }
                for d in 0..dim {
                    out[base + d * inner] /= s;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu { x }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!("{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p - q).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }))
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x);
        match axis {
            None => {
                let s = src.iter().copied().sum();
                Ok(self.push(vec![1], vec![s], Op::Sum { x, axis }))
            }
            Some(a) => {
                if a >= shape.len() {
                    return Err(invalid!("sum axis {} out of range for {:?}", a, shape));
                }
                let (outer, dim, inner) = split_axis(&shape, a);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                let mut new_shape = shape;
                new_shape.remove(a);
                if new_shape.is_empty() {
                    new_shape.push(1);
                }
                Ok(self.push(new_shape, out, Op::Sum { x, axis }))
            }
        }
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = numel(self.shape(x));
        let s = self.sum(x, None)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean over the two trailing (spatial) dimensions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid!("global_avg_pool needs a spatial map, got {:?}", shape));
        }
        let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
        let inv = T::one() / T::lit(hw as f64);
        let out = self.value(x).chunks_exact(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let mut new_shape = shape[..shape.len() - 2].to_vec();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(new_shape, out, Op::GlobalAvgPool { x }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(invalid!("concat of an empty list"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(invalid!("concat: shape {:?} incompatible with {:?} along axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(invalid!("cannot reshape {:?} into {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }))
    }

    /// Column `col` of a 2-D tensor, as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || col >= s[1] {
            return Err(invalid!("column {} of tensor with shape {:?}", col, s));
        }
        let out = self.value(x).chunks_exact(s[1]).map(|r| r[col]).collect();
        Ok(self.push(vec![s[0]], out, Op::Column { x, col }))
    }

    /// Multiplies every slice `x[i, ...]` by the scalar `f[i]`.
    pub fn row_scale(&mut self, x: Var, f: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s[0];
        if numel(self.shape(f)) != n {
            return Err(invalid!("row_scale: {} factors for {} rows", numel(self.shape(f)), n));
        }
        let per = numel(&s) / n;
        let fv = self.value(f);
        let mut out = self.value(x).to_vec();
        for (row, &k) in out.chunks_exact_mut(per).zip(fv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(s, out, Op::RowScale { x, f }))
    }

    /// Channel-wise multiplication: `out[.., c, ..] = x[.., c, ..] * w[c]`
    /// with `c` indexing `axis`.
    pub fn channel_scale(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(w) != [s[axis]] {
            return Err(invalid!(
                "channel_scale: weight {:?} does not match axis {} of {:?}",
                self.shape(w),
                axis,
                s
            ));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let wv = self.value(w);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for (c, &k) in wv.iter().enumerate().take(dim) {
                let start = (o * dim + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v *= k);
            }
        }
        Ok(self.push(s, out, Op::ChannelScale { x, w, axis }))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = numel(self.shape(x));
        if idx.is_empty() {
            return Err(invalid!("gather with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid!("gather index {} out of range {}", bad, n));
        }
        let src = self.value(x);
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Mean softmax cross-entropy of `[n, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(invalid!("cross_entropy: logits {:?} for {} labels", s, labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("cross_entropy label {} out of range [0,{})", bad, k));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for (r, (row, &lab)) in src.chunks_exact(k).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * k + j] = e;
                z += e;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[lab];
        }
        let n = T::lit(labels.len() as f64);
        Ok(self.push(vec![1], vec![loss / n], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Mean smooth-L1 (transition at 1.0) against a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(invalid!("smooth_l1: {} predictions for {} targets", p.len(), target.len()));
        }
        let half = T::lit(0.5);
        let total: T = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < T::one() {
                    half * d * d
                } else {
                    d - half
                }
            })
            .sum();
        let loss = total / T::lit(p.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::SmoothL1 { pred, target: target.to_vec() }))
    }

    /// Mean binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return Err(invalid!("bce_with_logits: {} logits for {} targets", x.len(), targets.len()));
        }
        let total: T = x
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            .sum();
        let loss = total / T::lit(x.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { logits, targets: targets.to_vec() }))
    }

    /// Pools every box from a `[C, H, W]` map into `[n, C, r, r]`.
    pub fn roi_align(&mut self, feat: Var, boxes: &[RoIBox], params: RoiAlignParams) -> Result<Var> {
        let s = self.shape(feat).to_vec();
        if s.len() != 3 {
            return Err(invalid!("roi_align feature must be [C,H,W], got {:?}", s));
        }
        params.validate()?;
        if boxes.is_empty() {
            return Err(invalid!("roi_align with no boxes"));
        }
        let r = params.resolution;
        let per = s[0] * r * r;
        let mut out = vec![T::zero(); boxes.len() * per];
        for (bx, dst) in boxes.iter().zip(out.chunks_exact_mut(per)) {
            cfa::roi_align_kernel(self.value(feat), (s[0], s[1], s[2]), bx, &params, dst);
        }
        Ok(self.push(vec![boxes.len(), s[0], r, r], out, Op::RoiAlign { feat, boxes: boxes.to_vec(), params }))
    }

    /// Align-corners bilinear resize of the two trailing square dimensions.
    pub fn resize_bilinear(&mut self, x: Var, target: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] || target == 0 {
            return Err(invalid!("resize_bilinear expects [..., r, r] and target >= 1, got {:?}", s));
        }
        let r = s[s.len() - 1];
        let planes = numel(&s) / (r * r);
        let mut out = vec![T::zero(); planes * target * target];
        for (src, dst) in self.value(x).chunks_exact(r * r).zip(out.chunks_exact_mut(target * target)) {
            cfa::resize_plane(src, r, target, dst);
        }
        let mut shape = s;
        let l = shape.len();
        shape[l - 2] = target;
        shape[l - 1] = target;
        Ok(self.push(shape, out, Op::ResizeBilinear { x, target }))
    }

    pub(super) fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let scaled;
        let g = match node.op.kind() {
            Some(k) if self.faulty(k) => {
                scaled = g.iter().map(|&v| v * T::lit(1.5)).collect::<Vec<_>>();
                &scaled[..]
            }
            _ => g,
        };
        let out = match &node.data {
            super::NodeData::Owned(d) => &d[..],
            super::NodeData::Param(_) => &[][..],
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo, cols } => {
                let (p, k) = (geo.pixels(), geo.patch());
                let gview = MatView::new(g, geo.cout, p);
                let src = if geo.pointwise() { self.value(*x) } else { &cols[..] };
                self.acc_with(grads, *w, |dw| gemm(T::one(), gview, MatView::new(src, k, p).t(), T::one(), dw));
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks_exact(p)) {
                            *d += row.iter().copied().sum();
                        }
                    });
                }
                let wv = MatView::new(self.value(*w), geo.cout, k);
                self.acc_with(grads, *x, |dx| {
                    if geo.pointwise() {
                        gemm(T::one(), wv.t(), gview, T::one(), dx);
                    } else {
                        let mut dcols = vec![T::zero(); k * p];
                        gemm(T::one(), wv.t(), gview, T::zero(), &mut dcols);
                        col2im_add(&dcols, geo, dx);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let n = g.len() / dout;
                let gview = MatView::new(g, n, dout);
                self.acc_with(grads, *x, |dx| {
                    gemm(T::one(), gview, MatView::new(self.value(*w), dout, din), T::one(), dx)
                });
                self.acc_with(grads, *w, |dw| {
                    gemm(T::one(), gview.t(), MatView::new(self.value(*x), n, din), T::one(), dw)
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for row in g.chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.mat_view(*a, *ta).expect("validated in forward");
                let bv = self.mat_view(*b, *tb).expect("validated in forward");
                let (m, _) = av.dims();
                let (_, n) = bv.dims();
                let gview = MatView::new(g, m, n);
                self.acc_with(grads, *a, |da| {
                    if *ta {
                        gemm(T::one(), bv, gview.t(), T::one(), da)
                    } else {
                        gemm(T::one(), gview, bv.t(), T::one(), da)
                    }
                });
                self.acc_with(grads, *b, |db| {
                    if *tb {
                        gemm(T::one(), gview.t(), av, T::one(), db)
                    } else {
                        gemm(T::one(), av.t(), gview, T::one(), db)
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * dim * inner + i;
                            let mut dot = T::zero();
                            for d in 0..dim {
                                dot += g[base + d * inner] * out[base + d * inner];
                            }
                            for d in 0..dim {
                                let j = base + d * inner;
                                dx[j] += out[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => self.acc_with(grads, *x, |dx| {
                for ((d, &gv), &o) in dx.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Add { a, b } => {
                self.acc_with(grads, *a, |da| add_into(da, g));
                self.acc_with(grads, *b, |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                self.acc_with(grads, *a, |da| add_into(da, g));
                self.acc_with(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |da| {
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &q)| *d += gv * q)
                });
                self.acc_with(grads, *b, |db| {
                    db.iter_mut().zip(g).zip(av).for_each(|((d, &gv), &p)| *d += gv * p)
                });
            }
            Op::Scale { x, factor } => {
                self.acc_with(grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor))
            }
            Op::Sum { x, axis } => {
                let xs = self.shape(*x);
                match axis {
                    None => self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
                    Some(a) => {
                        let (outer, dim, inner) = split_axis(xs, *a);
                        self.acc_with(grads, *x, |dx| {
                            for o in 0..outer {
                                for d in 0..dim {
                                    let dst = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                                    add_into(dst, &g[o * inner..(o + 1) * inner]);
                                }
                            }
                        });
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[xs.len() - 2] * xs[xs.len() - 1];
                let inv = T::one() / T::lit(hw as f64);
                self.acc_with(grads, *x, |dx| {
                    for (plane, &gv) in dx.chunks_exact_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    self.acc_with(grads, v, |dv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            add_into(&mut dv[o * d * inner..(o + 1) * d * inner], src);
                        }
                    });
                    offset += d;
                }
            }
            Op::Reshape { x } => self.acc_with(grads, *x, |dx| add_into(dx, g)),
            Op::Column { x, col } => {
                let m = self.shape(*x)[1];
                self.acc_with(grads, *x, |dx| {
                    for (row, &gv) in dx.chunks_exact_mut(m).zip(g) {
                        row[*col] += gv;
                    }
                });
            }
            Op::RowScale { x, f } => {
                let n = node.shape[0];
                let per = g.len() / n;
                let (xv, fv) = (self.value(*x), self.value(*f));
                self.acc_with(grads, *x, |dx| {
                    for ((drow, grow), &k) in dx.chunks_exact_mut(per).zip(g.chunks_exact(per)).zip(fv) {
                        drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv * k);
                    }
                });
                self.acc_with(grads, *f, |df| {
                    for ((d, grow), xrow) in df.iter_mut().zip(g.chunks_exact(per)).zip(xv.chunks_exact(per)) {
                        *d += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                    }
                });
            }
            Op::ChannelScale { x, w, axis } => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.acc_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for (c, &k) in wv.iter().enumerate() {
                            let s = (o * dim + c) * inner;
                            dx[s..s + inner].iter_mut().zip(&g[s..s + inner]).for_each(|(d, &gv)| *d += gv * k);
                        }
                    }
                });
                self.acc_with(grads, *w, |dw| {
                    for o in 0..outer {
                        for (c, d) in dw.iter_mut().enumerate() {
                            let s = (o * dim + c) * inner;
                            *d += g[s..s + inner].iter().zip(&xv[s..s + inner]).map(|(&a, &b)| a * b).sum();
                        }
                    }
                });
            }
            Op::Gather { x, idx } => self.acc_with(grads, *x, |dx| {
                for (&j, &gv) in idx.iter().zip(g) {
                    dx[j] += gv;
                }
            }),
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                self.acc_with(grads, *logits, |dl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == lab { T::one() } else { T::zero() };
                            dl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target } => {
                let scale = g[0] / T::lit(target.len() as f64);
                let p = self.value(*pred);
                self.acc_with(grads, *pred, |dp| {
                    for ((d, &a), &b) in dp.iter_mut().zip(p).zip(target) {
                        *d += (a - b).max(-T::one()).min(T::one()) * scale;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g[0] / T::lit(targets.len() as f64);
                let x = self.value(*logits);
                self.acc_with(grads, *logits, |dl| {
                    for ((d, &v), &t) in dl.iter_mut().zip(x).zip(targets) {
                        let sig = T::one() / (T::one() + (-v).exp());
                        *d += (sig - t) * scale;
                    }
                });
            }
            Op::RoiAlign { feat, boxes, params } => {
                let s = self.shape(*feat);
                let dims = (s[0], s[1], s[2]);
                let per = s[0] * params.resolution * params.resolution;
                self.acc_with(grads, *feat, |df| {
                    for (bx, gb) in boxes.iter().zip(g.chunks_exact(per)) {
                        cfa::roi_align_backward_kernel(gb, dims, bx, params, df);
                    }
                });
            }
            Op::ResizeBilinear { x, target } => {
                let xs = self.shape(*x);
                let r = xs[xs.len() - 1];
                self.acc_with(grads, *x, |dx| {
                    for (gp, dp) in g.chunks_exact(target * target).zip(dx.chunks_exact_mut(r * r)) {
                        cfa::resize_plane_backward(gp, r, *target, dp);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let p = geo.pixels();
    let mut cols = vec![T::zero(); geo.patch() * p];
    for c in 0..geo.cin {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for dy in 0..geo.kh {
            for dx in 0..geo.kw {
                let row = (c * geo.kh + dy) * geo.kw + dx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + dy) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    let dst_row = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + dx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], geo: &ConvGeometry, dx: &mut [T]) {
    let p = geo.pixels();
    for c in 0..geo.cin {
        let plane = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for dy in 0..geo.kh {
            for dxk in 0..geo.kw {
                let row = (c * geo.kh + dy) * geo.kw + dxk;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + dy) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    let src_row = &src[oy * geo.wo..(oy + 1) * geo.wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * geo.stride + dxk) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[4.0]);
    }

    #[test]
    fn conv_sum_kernel_via_odd_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(alloc::format!("{err}").contains("channel"));
    }

    #[test]
    fn strict_mode_rejects_inexact_stride() {
        let mut tape = Tape::<f64>::new();
        tape.set_strict(true);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, 2, 1).is_err());
        assert!(tape.conv2d(x, w, None, 1, 1).is_ok());
    }

    #[test]
    fn softmax_analytic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, libm::log(3.0)]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(Tensor::full(&[5], 3.3));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::full(&[3, 7], 0.4));
        let ce = tape.cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((tape.value(ce)[0] - libm::log(7.0)).abs() < 1e-12);
        assert!(tape.cross_entropy(logits, &[0, 7, 1]).is_err());

        let p = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let sl = tape.smooth_l1(p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.value(sl)[0], 0.0);
        let sl = tape.smooth_l1(p, &[3.0, 0.0, 5.0]).unwrap();
        assert_eq!(tape.value(sl)[0], 1.5);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq, None).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.input(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y, None).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }
}
