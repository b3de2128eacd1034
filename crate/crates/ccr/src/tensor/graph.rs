//! The autodiff graph: an arena of value buffers plus a tape of
//! recorded operations.
//!
//! Forward methods validate shapes, compute the result immediately and
//! return a [`Var`] handle. A record is pushed whenever an input
//! requires gradients (batch norm in training mode always records, so
//! the captured batch statistics stay reachable for running-stat
//! updates). [`Graph::backward`] seeds the scalar loss with 1 and
//! visits the tape once, in reverse record order; gradients accumulate
//! across repeated calls until [`Graph::reset_grads`].

use super::kernels::{self, BnStats, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Row-wise distance flavor used by the contrastive machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Squared Euclidean distance; the default everywhere.
    SquaredL2,
    /// Plain Euclidean distance.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    Nearest,
    /// Mean over each 2x2 block.
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// align_corners=false convention, edges replicated.
    Bilinear,
}

/// Norms below this are treated as zero by the normalizing ops.
pub(crate) const NORM_GUARD: f64 = 1e-12;

enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    MatMul { m: usize, k: usize, n: usize },
    Conv2d { dims: ConvDims },
    BatchNormTrain,
    BatchNormEval { eps: f64, rmean: Vec<f64>, rvar: Vec<f64> },
    L2NormalizePixels,
    GatherPixels { idx: Vec<(usize, usize)> },
    SumAll,
    MeanAll,
    MaxAll,
    SoftmaxCrossEntropy { labels: Vec<i32> },
    MaskedL1 { target: Vec<f64>, mask: Vec<bool> },
    CosineLoss { target: Vec<f64>, mask: Vec<bool> },
    RowDistance { kind: DistanceKind },
    Downsample2x { mode: DownsampleMode },
    Upsample2x { mode: UpsampleMode },
}

enum Saved {
    None,
    Bn(BnStats),
    ArgMax(usize),
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
    out: Var,
    saved: Saved,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    // ── node management ──────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: Vec<Var>, out: Var, saved: Saved) {
        self.records.push(Record { op, inputs, out, saved });
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies a tensor in as a graph input. Gradients are tracked when
    /// the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// A gradient-free input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every accumulated gradient; values and the tape stay.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Number of recorded (differentiable) operations so far.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    // ── elementwise and scalar ops ───────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.nodes[a.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::Add, vec![a, b], out, Saved::None);
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.nodes[a.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::Sub, vec![a, b], out, Saved::None);
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.nodes[a.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::Mul, vec![a, b], out, Saved::None);
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(self.nodes[x.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::Scale(c), vec![x], out, Saved::None);
        }
        out
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(self.nodes[x.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::AddScalar, vec![x], out, Saved::None);
        }
        out
    }

    /// max(x, 0), which doubles as the triplet hinge. The subgradient at
    /// exactly zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(self.nodes[x.0].shape.clone(), value, rg);
        if rg {
            self.record(Op::Relu, vec![x], out, Saved::None);
        }
        out
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, &self.nodes[a.0].value, &self.nodes[b.0].value, 0.0, &mut value);
        let rg = self.any_grad(&[a, b]);
        let out = self.push(vec![m, n], value, rg);
        if rg {
            self.record(Op::MatMul { m, k, n }, vec![a, b], out, Saved::None);
        }
        Ok(out)
    }

    /// Stride-1 same-padding convolution. `x` is `[b, cin, h, w]`,
    /// weight `[cout, cin, k, k]` with k in {1, 3}, bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            &self.nodes[b.0].shape,
        );
        let fail = |detail: String| Err(Error::shape("conv2d", detail));
        if sx.len() != 4 || sw.len() != 4 {
            return fail(format!("input {:?}, weight {:?}", sx, sw));
        }
        let k = sw[2];
        if (k != 1 && k != 3) || sw[3] != k {
            return fail(format!("kernel must be 1x1 or 3x3, weight is {:?}", sw));
        }
        if sw[1] != sx[1] {
            return fail(format!("weight expects {} input channels, input has {}", sw[1], sx[1]));
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return fail(format!("bias {:?} does not match {} output channels", sb, sw[0]));
        }
        let dims = ConvDims { batch: sx[0], cin: sx[1], cout: sw[0], h: sx[2], w: sx[3], k };
        let mut value = vec![0.0; dims.batch * dims.cout * dims.hw()];
        kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &dims,
            &mut value,
        );
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push(vec![dims.batch, dims.cout, dims.h, dims.w], value, rg);
        if rg {
            self.record(Op::Conv2d { dims }, vec![x, w, b], out, Saved::None);
        }
        Ok(out)
    }

    // ── batch norm ──────────────────────────────────────────────────

    fn check_bn_shapes(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::shape(op, format!("input must be 4d, got {:?}", sx)));
        }
        let c = sx[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[v.0].shape;
            if s.len() != 1 || s[0] != c {
                return Err(Error::shape(op, format!("{} {:?} does not match {} channels", name, s, c)));
            }
        }
        Ok((sx[0], c, sx[2] * sx[3]))
    }

    /// Batch norm over (batch, pixels) per channel, using the batch's
    /// own statistics. Always recorded so the stats stay queryable via
    /// [`Graph::bn_batch_stats`].
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, hw) = self.check_bn_shapes("batch_norm", x, gamma, beta)?;
        let mut value = vec![0.0; b * c * hw];
        let stats = kernels::bn_forward_train(
            &self.nodes[x.0].value,
            b,
            c,
            hw,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
            &mut value,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(self.nodes[x.0].shape.clone(), value, rg);
        self.record(Op::BatchNormTrain, vec![x, gamma, beta], out, Saved::Bn(stats));
        Ok(out)
    }

    /// Batch norm with frozen (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rmean: &[f64],
        rvar: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, hw) = self.check_bn_shapes("batch_norm_eval", x, gamma, beta)?;
        if rmean.len() != c || rvar.len() != c {
            return Err(Error::shape(
                "batch_norm_eval",
                format!("running stats ({}, {}) do not match {} channels", rmean.len(), rvar.len(), c),
            ));
        }
        let mut value = vec![0.0; b * c * hw];
        kernels::bn_forward_eval(
            &self.nodes[x.0].value,
            b,
            c,
            hw,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            rmean,
            rvar,
            eps,
            &mut value,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(self.nodes[x.0].shape.clone(), value, rg);
        if rg {
            self.record(
                Op::BatchNormEval { eps, rmean: rmean.to_vec(), rvar: rvar.to_vec() },
                vec![x, gamma, beta],
                out,
                Saved::None,
            );
        }
        Ok(out)
    }

    /// The (mean, biased variance) captured when `y` was produced by
    /// [`Graph::batch_norm_train`]; `None` for any other node.
    pub fn bn_batch_stats(&self, y: Var) -> Option<(&[f64], &[f64])> {
        self.records.iter().rev().find(|r| r.out == y).and_then(|r| match &r.saved {
            Saved::Bn(stats) => Some((&stats.mean[..], &stats.var_biased[..])),
            _ => None,
        })
    }

    // ── pixel-vector ops ─────────────────────────────────────────────

    /// Normalizes the channel vector at every (batch, pixel) site to
    /// unit L2 norm. Norms below 1e-12 fall back to dividing by 1e-12.
    pub fn l2_normalize_pixels(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::shape("l2_normalize_pixels", format!("input must be 4d, got {:?}", sx)));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for bi in 0..b {
            for p in 0..hw {
                let mut sq = 0.0;
                for ch in 0..c {
                    let v = xv[(bi * c + ch) * hw + p];
                    sq += v * v;
                }
                let denom = sq.sqrt().max(NORM_GUARD);
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    value[i] = xv[i] / denom;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(sx.clone(), value, rg);
        if rg {
            self.record(Op::L2NormalizePixels, vec![x], out, Saved::None);
        }
        Ok(out)
    }

    /// Pulls the channel vectors at `idx = [(batch, pixel)]` out of a
    /// `[b, c, h, w]` map into a `[len(idx), c]` matrix. The backward
    /// pass scatter-adds, so a pixel referenced twice gets both
    /// contributions.
    pub fn gather_pixels(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::shape("gather_pixels", format!("input must be 4d, got {:?}", sx)));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        for &(bi, p) in idx {
            if bi >= b || p >= hw {
                return Err(Error::invalid(format!(
                    "gather_pixels: index ({}, {}) out of range for {} images x {} pixels",
                    bi, p, b, hw
                )));
            }
        }
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; idx.len() * c];
        for (r, &(bi, p)) in idx.iter().enumerate() {
            for ch in 0..c {
                value[r * c + ch] = xv[(bi * c + ch) * hw + p];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![idx.len(), c], value, rg);
        if rg {
            self.record(Op::GatherPixels { idx: idx.to_vec() }, vec![x], out, Saved::None);
        }
        Ok(out)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(Op::SumAll, vec![x], out, Saved::None);
        }
        out
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::invalid("mean_all: empty input"));
        }
        let value = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(Op::MeanAll, vec![x], out, Saved::None);
        }
        Ok(out)
    }

    /// Max over all entries; ties resolve to the lowest flat index, and
    /// that single entry receives the full gradient.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::invalid("max_all: empty input"));
        }
        let mut arg = 0;
        for (i, &v) in xv.iter().enumerate() {
            if v > xv[arg] {
                arg = i;
            }
        }
        let value = xv[arg];
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(Op::MaxAll, vec![x], out, Saved::ArgMax(arg));
        }
        Ok(out)
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean softmax cross-entropy over pixels. `logits` is
    /// `[b, k, h, w]`; `labels` has one entry per (batch, pixel), with
    /// -1 marking ignored pixels. All-ignored input yields exactly 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[i32]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 4 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits must be 4d, got {:?}", s)));
        }
        let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != b * hw {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {} pixels", labels.len(), b * hw),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l < -1 || l >= k as i32 {
                return Err(Error::invalid(format!(
                    "softmax_cross_entropy: label {} at pixel {} outside [-1, {})",
                    l, i, k
                )));
            }
        }
        let xv = &self.nodes[logits.0].value;
        let mut n_valid = 0usize;
        let mut acc = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let l = labels[bi * hw + p];
                if l < 0 {
                    continue;
                }
                n_valid += 1;
                let lse = pixel_logsumexp(xv, bi, k, hw, p);
                acc += lse - xv[(bi * k + l as usize) * hw + p];
            }
        }
        let value = if n_valid == 0 { 0.0 } else { acc / n_valid as f64 };
        let rg = self.nodes[logits.0].requires_grad && n_valid > 0;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(Op::SoftmaxCrossEntropy { labels: labels.to_vec() }, vec![logits], out, Saved::None);
        }
        Ok(out)
    }

    /// Mean absolute error over non-masked pixels (all channels of a
    /// pixel share its mask bit). All-masked input yields exactly 0.
    pub fn masked_l1(&mut self, x: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::shape("masked_l1", format!("input must be 4d, got {:?}", s)));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if target.len() != b * c * hw || mask.len() != b * hw {
            return Err(Error::shape(
                "masked_l1",
                format!("target {} / mask {} vs input {:?}", target.len(), mask.len(), s),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let n_valid = mask.iter().filter(|&&m| m).count() * c;
        let mut acc = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                if !mask[bi * hw + p] {
                    continue;
                }
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    acc += (xv[i] - target[i]).abs();
                }
            }
        }
        let value = if n_valid == 0 { 0.0 } else { acc / n_valid as f64 };
        let rg = self.nodes[x.0].requires_grad && n_valid > 0;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(
                Op::MaskedL1 { target: target.to_vec(), mask: mask.to_vec() },
                vec![x],
                out,
                Saved::None,
            );
        }
        Ok(out)
    }

    /// Mean of (1 - cosine similarity) between predicted and target
    /// 2-vectors over non-masked pixels. Targets are assumed unit
    /// length; predictions are normalized with the 1e-12 guard.
    pub fn cosine_loss(&mut self, x: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape("cosine_loss", format!("input must be [b, 2, h, w], got {:?}", s)));
        }
        let (b, hw) = (s[0], s[2] * s[3]);
        if target.len() != b * 2 * hw || mask.len() != b * hw {
            return Err(Error::shape(
                "cosine_loss",
                format!("target {} / mask {} vs input {:?}", target.len(), mask.len(), s),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let n_valid = mask.iter().filter(|&&m| m).count();
        let mut acc = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                if !mask[bi * hw + p] {
                    continue;
                }
                let (x0, x1) = (xv[(bi * 2) * hw + p], xv[(bi * 2 + 1) * hw + p]);
                let (t0, t1) = (target[(bi * 2) * hw + p], target[(bi * 2 + 1) * hw + p]);
                let denom = (x0 * x0 + x1 * x1).sqrt().max(NORM_GUARD);
                acc += 1.0 - (x0 * t0 + x1 * t1) / denom;
            }
        }
        let value = if n_valid == 0 { 0.0 } else { acc / n_valid as f64 };
        let rg = self.nodes[x.0].requires_grad && n_valid > 0;
        let out = self.push(vec![1], vec![value], rg);
        if rg {
            self.record(
                Op::CosineLoss { target: target.to_vec(), mask: mask.to_vec() },
                vec![x],
                out,
                Saved::None,
            );
        }
        Ok(out)
    }

    /// Row-wise distance between two `[n, c]` matrices, one value per
    /// row. Gradients flow into both sides.
    pub fn row_distance(&mut self, a: Var, b: Var, kind: DistanceKind) -> Result<Var> {
        self.check_same_shape("row_distance", a, b)?;
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::shape("row_distance", format!("inputs must be [n, c], got {:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; n];
        for r in 0..n {
            let mut sq = 0.0;
            for ch in 0..c {
                let d = av[r * c + ch] - bv[r * c + ch];
                sq += d * d;
            }
            value[r] = match kind {
                DistanceKind::SquaredL2 => sq,
                DistanceKind::L2 => sq.sqrt(),
            };
        }
        let rg = self.any_grad(&[a, b]);
        let out = self.push(vec![n], value, rg);
        if rg {
            self.record(Op::RowDistance { kind }, vec![a, b], out, Saved::None);
        }
        Ok(out)
    }

    // ── resampling ───────────────────────────────────────────────────

    pub fn downsample2x(&mut self, x: Var, mode: DownsampleMode) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(
                "downsample2x",
                format!("input must be 4d with even spatial extents, got {:?}", s),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut value = vec![0.0; planes * (h / 2) * (w / 2)];
        match mode {
            DownsampleMode::Area => kernels::down2x_area(&self.nodes[x.0].value, planes, h, w, &mut value),
            DownsampleMode::Nearest => kernels::down2x_nearest(&self.nodes[x.0].value, planes, h, w, &mut value),
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![s[0], s[1], h / 2, w / 2], value, rg);
        if rg {
            self.record(Op::Downsample2x { mode }, vec![x], out, Saved::None);
        }
        Ok(out)
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("input must be 4d, got {:?}", s)));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut value = vec![0.0; planes * 4 * h * w];
        match mode {
            UpsampleMode::Nearest => kernels::up2x_nearest(&self.nodes[x.0].value, planes, h, w, &mut value),
            UpsampleMode::Bilinear => kernels::up2x_bilinear(&self.nodes[x.0].value, planes, h, w, &mut value),
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push(vec![s[0], s[1], 2 * h, 2 * w], value, rg);
        if rg {
            self.record(Op::Upsample2x { mode }, vec![x], out, Saved::None);
        }
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Seeds `loss` (which must be scalar) with gradient 1 and visits
    /// the tape once, in reverse record order. Each call propagates in
    /// fresh scratch buffers and then adds the result into the
    /// persistent per-node gradients, so calling twice accumulates
    /// exactly twice the gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for ri in (0..self.records.len()).rev() {
            let out = self.records[ri].out;
            let Some(gout) = scratch[out.0].take() else { continue };
            self.backward_record(ri, &gout, &mut scratch);
            self.merge_grad(out, gout);
        }
        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(g) = slot {
                self.merge_grad(Var(i), g);
            }
        }
        Ok(())
    }

    fn merge_grad(&mut self, v: Var, add: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(&add) {
                    *dst += *src;
                }
            }
            slot => *slot = Some(add),
        }
    }

    fn take_or_zeros(&self, scratch: &mut [Option<Vec<f64>>], v: Var) -> Vec<f64> {
        scratch[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn acc(&self, scratch: &mut [Option<Vec<f64>>], v: Var, contrib: impl IntoIterator<Item = f64>) {
        let mut buf = self.take_or_zeros(scratch, v);
        for (dst, src) in buf.iter_mut().zip(contrib) {
            *dst += src;
        }
        scratch[v.0] = Some(buf);
    }

    fn backward_record(&self, ri: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let rec = &self.records[ri];
        let a = rec.inputs[0];
        let b2 = rec.inputs.get(1).copied();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &rec.op {
            Op::Add => {
                let b = b2.unwrap();
                if needs(a) {
                    self.acc(scratch, a, g.iter().copied());
                }
                if needs(b) {
                    self.acc(scratch, b, g.iter().copied());
                }
            }
            Op::Sub => {
                let b = b2.unwrap();
                if needs(a) {
                    self.acc(scratch, a, g.iter().copied());
                }
                if needs(b) {
                    self.acc(scratch, b, g.iter().map(|v| -v));
                }
            }
            Op::Mul => {
                let b = b2.unwrap();
                if needs(a) {
                    let bv = &self.nodes[b.0].value;
                    self.acc(scratch, a, g.iter().zip(bv).map(|(gv, x)| gv * x));
                }
                if needs(b) {
                    let av = &self.nodes[a.0].value;
                    self.acc(scratch, b, g.iter().zip(av).map(|(gv, x)| gv * x));
                }
            }
            Op::Scale(c) => {
                let c = *c;
                self.acc(scratch, a, g.iter().map(|v| v * c));
            }
            Op::AddScalar => {
                self.acc(scratch, a, g.iter().copied());
            }
            Op::Relu => {
                let xv = &self.nodes[a.0].value;
                self.acc(scratch, a, xv.iter().zip(g).map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 }));
            }
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let b = b2.unwrap();
                if needs(a) {
                    let mut da = self.take_or_zeros(scratch, a);
                    kernels::gemm_nt(m, n, k, g, &self.nodes[b.0].value, 1.0, &mut da);
                    scratch[a.0] = Some(da);
                }
                if needs(b) {
                    let mut db = self.take_or_zeros(scratch, b);
                    kernels::gemm_tn(k, m, n, &self.nodes[a.0].value, g, 1.0, &mut db);
                    scratch[b.0] = Some(db);
                }
            }
            Op::Conv2d { dims } => {
                let (x, w, bias) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                let mut dx = if needs(x) { Some(self.take_or_zeros(scratch, x)) } else { None };
                let mut dw = if needs(w) { Some(self.take_or_zeros(scratch, w)) } else { None };
                let mut db = if needs(bias) { Some(self.take_or_zeros(scratch, bias)) } else { None };
                kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    dims,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    scratch[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    scratch[w.0] = Some(dw);
                }
                if let Some(db) = db {
                    scratch[bias.0] = Some(db);
                }
            }
            Op::BatchNormTrain => {
                let (x, gamma, beta) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                if !(needs(x) || needs(gamma) || needs(beta)) {
                    return;
                }
                let stats = match &rec.saved {
                    Saved::Bn(s) => s,
                    _ => unreachable!("batch norm record without stats"),
                };
                let s = &self.nodes[x.0].shape;
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = self.take_or_zeros(scratch, x);
                let mut dgamma = self.take_or_zeros(scratch, gamma);
                let mut dbeta = self.take_or_zeros(scratch, beta);
                kernels::bn_backward_train(
                    &self.nodes[x.0].value,
                    b,
                    c,
                    hw,
                    &self.nodes[gamma.0].value,
                    stats,
                    g,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                if needs(x) {
                    scratch[x.0] = Some(dx);
                }
                if needs(gamma) {
                    scratch[gamma.0] = Some(dgamma);
                }
                if needs(beta) {
                    scratch[beta.0] = Some(dbeta);
                }
            }
            Op::BatchNormEval { eps, rmean, rvar } => {
                let (x, gamma, beta) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                let s = &self.nodes[x.0].shape;
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = self.take_or_zeros(scratch, x);
                let mut dgamma = self.take_or_zeros(scratch, gamma);
                let mut dbeta = self.take_or_zeros(scratch, beta);
                kernels::bn_backward_eval(
                    &self.nodes[x.0].value,
                    b,
                    c,
                    hw,
                    &self.nodes[gamma.0].value,
                    rmean,
                    rvar,
                    *eps,
                    g,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                if needs(x) {
                    scratch[x.0] = Some(dx);
                }
                if needs(gamma) {
                    scratch[gamma.0] = Some(dgamma);
                }
                if needs(beta) {
                    scratch[beta.0] = Some(dbeta);
                }
            }
            Op::L2NormalizePixels => {
                let s = &self.nodes[a.0].shape;
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = &self.nodes[a.0].value;
                let yv = &self.nodes[rec.out.0].value;
                let mut contrib = vec![0.0; xv.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let mut sq = 0.0;
                        let mut ydotg = 0.0;
                        for ch in 0..c {
                            let i = (bi * c + ch) * hw + p;
                            sq += xv[i] * xv[i];
                            ydotg += yv[i] * g[i];
                        }
                        let norm = sq.sqrt();
                        if norm > NORM_GUARD {
                            for ch in 0..c {
                                let i = (bi * c + ch) * hw + p;
                                contrib[i] = (g[i] - yv[i] * ydotg) / norm;
                            }
                        } else {
                            for ch in 0..c {
                                let i = (bi * c + ch) * hw + p;
                                contrib[i] = g[i] / NORM_GUARD;
                            }
                        }
                    }
                }
                self.acc(scratch, a, contrib);
            }
            Op::GatherPixels { idx } => {
                let s = &self.nodes[a.0].shape;
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut dx = self.take_or_zeros(scratch, a);
                for (r, &(bi, p)) in idx.iter().enumerate() {
                    for ch in 0..c {
                        dx[(bi * c + ch) * hw + p] += g[r * c + ch];
                    }
                }
                scratch[a.0] = Some(dx);
            }
            Op::SumAll => {
                let n = self.nodes[a.0].value.len();
                self.acc(scratch, a, std::iter::repeat(g[0]).take(n));
            }
            Op::MeanAll => {
                let n = self.nodes[a.0].value.len();
                self.acc(scratch, a, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::MaxAll => {
                let arg = match &rec.saved {
                    Saved::ArgMax(i) => *i,
                    _ => unreachable!("max record without argmax"),
                };
                let mut dx = self.take_or_zeros(scratch, a);
                dx[arg] += g[0];
                scratch[a.0] = Some(dx);
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let s = &self.nodes[a.0].shape;
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let n_valid = labels.iter().filter(|&&l| l >= 0).count();
                let xv = &self.nodes[a.0].value;
                let scale = g[0] / n_valid as f64;
                let mut contrib = vec![0.0; xv.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let l = labels[bi * hw + p];
                        if l < 0 {
                            continue;
                        }
                        let lse = pixel_logsumexp(xv, bi, k, hw, p);
                        for ch in 0..k {
                            let i = (bi * k + ch) * hw + p;
                            let prob = (xv[i] - lse).exp();
                            let ind = if ch as i32 == l { 1.0 } else { 0.0 };
                            contrib[i] = (prob - ind) * scale;
                        }
                    }
                }
                self.acc(scratch, a, contrib);
            }
            Op::MaskedL1 { target, mask } => {
                let s = &self.nodes[a.0].shape;
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let n_valid = mask.iter().filter(|&&m| m).count() * c;
                let xv = &self.nodes[a.0].value;
                let scale = g[0] / n_valid as f64;
                let mut contrib = vec![0.0; xv.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        if !mask[bi * hw + p] {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (bi * c + ch) * hw + p;
                            let d = xv[i] - target[i];
                            contrib[i] = if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            };
                        }
                    }
                }
                self.acc(scratch, a, contrib);
            }
            Op::CosineLoss { target, mask } => {
                let s = &self.nodes[a.0].shape;
                let (b, hw) = (s[0], s[2] * s[3]);
                let n_valid = mask.iter().filter(|&&m| m).count();
                let xv = &self.nodes[a.0].value;
                let scale = g[0] / n_valid as f64;
                let mut contrib = vec![0.0; xv.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        if !mask[bi * hw + p] {
                            continue;
                        }
                        let i0 = (bi * 2) * hw + p;
                        let i1 = (bi * 2 + 1) * hw + p;
                        let (x0, x1) = (xv[i0], xv[i1]);
                        let (t0, t1) = (target[i0], target[i1]);
                        let norm = (x0 * x0 + x1 * x1).sqrt();
                        if norm > NORM_GUARD {
                            let (u0, u1) = (x0 / norm, x1 / norm);
                            let udott = u0 * t0 + u1 * t1;
                            contrib[i0] = -scale * (t0 - u0 * udott) / norm;
                            contrib[i1] = -scale * (t1 - u1 * udott) / norm;
                        } else {
                            contrib[i0] = -scale * t0 / NORM_GUARD;
                            contrib[i1] = -scale * t1 / NORM_GUARD;
                        }
                    }
                }
                self.acc(scratch, a, contrib);
            }
            Op::RowDistance { kind } => {
                let b = b2.unwrap();
                let s = &self.nodes[a.0].shape;
                let (n, c) = (s[0], s[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ov = &self.nodes[rec.out.0].value;
                let mut da = vec![0.0; n * c];
                for r in 0..n {
                    let factor = match kind {
                        DistanceKind::SquaredL2 => 2.0 * g[r],
                        DistanceKind::L2 => g[r] / ov[r].max(NORM_GUARD),
                    };
                    for ch in 0..c {
                        let i = r * c + ch;
                        da[i] = factor * (av[i] - bv[i]);
                    }
                }
                if needs(a) {
                    self.acc(scratch, a, da.iter().copied());
                }
                if needs(b) {
                    self.acc(scratch, b, da.iter().map(|v| -v));
                }
            }
            Op::Downsample2x { mode } => {
                let s = &self.nodes[a.0].shape;
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = self.take_or_zeros(scratch, a);
                match mode {
                    DownsampleMode::Area => kernels::down2x_area_backward(g, planes, h, w, &mut dx),
                    DownsampleMode::Nearest => kernels::down2x_nearest_backward(g, planes, h, w, &mut dx),
                }
                scratch[a.0] = Some(dx);
            }
            Op::Upsample2x { mode } => {
                let s = &self.nodes[a.0].shape;
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = self.take_or_zeros(scratch, a);
                match mode {
                    UpsampleMode::Nearest => kernels::up2x_nearest_backward(g, planes, h, w, &mut dx),
                    UpsampleMode::Bilinear => kernels::up2x_bilinear_backward(g, planes, h, w, &mut dx),
                }
                scratch[a.0] = Some(dx);
            }
        }
    }
}

fn pixel_logsumexp(x: &[f64], bi: usize, k: usize, hw: usize, p: usize) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for ch in 0..k {
        mx = mx.max(x[(bi * k + ch) * hw + p]);
    }
    let mut acc = 0.0;
    for ch in 0..k {
        acc += (x[(bi * k + ch) * hw + p] - mx).exp();
    }
    mx + acc.ln()
}
