//! Task definitions, dense label maps, per-task losses, evaluation
//! metrics and the aggregate multi-task performance delta.
//!
//! Three task shapes exist: discrete per-pixel classification
//! (segmentation), continuous scalar regression (depth) and continuous
//! unit-vector regression (orientation). Each carries its own notion of
//! label agreement (used by the contrastive partitioning), its own
//! training loss and its own evaluation score.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Discrete,
    Continuous,
}

/// How two pixel labels are compared when deciding "same" vs
/// "different" for contrastive purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMetric {
    /// Same class id or not.
    ExactMatch,
    /// Absolute difference of scalars; smaller is more similar.
    AbsDiff,
    /// Angle between unit vectors; smaller is more similar.
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MaskedL1,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    MIoU,
    Rmse,
    MeanAngularError,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Prediction channels: class count for discrete tasks, vector
    /// dimension for continuous ones.
    pub out_channels: usize,
    pub label_metric: LabelMetric,
    pub loss: LossKind,
    pub score: ScoreKind,
    pub lower_is_better: bool,
    pub loss_weight: f64,
}

impl TaskSpec {
    pub fn segmentation(num_classes: usize) -> Self {
        TaskSpec {
            name: "seg".into(),
            kind: TaskKind::Discrete,
            out_channels: num_classes,
            label_metric: LabelMetric::ExactMatch,
            loss: LossKind::CrossEntropy,
            score: ScoreKind::MIoU,
            lower_is_better: false,
            loss_weight: 1.0,
        }
    }

    pub fn depth() -> Self {
        TaskSpec {
            name: "depth".into(),
            kind: TaskKind::Continuous,
            out_channels: 1,
            label_metric: LabelMetric::AbsDiff,
            loss: LossKind::MaskedL1,
            score: ScoreKind::Rmse,
            lower_is_better: true,
            loss_weight: 1.0,
        }
    }

    pub fn orientation() -> Self {
        TaskSpec {
            name: "orient".into(),
            kind: TaskKind::Continuous,
            out_channels: 2,
            label_metric: LabelMetric::Angular,
            loss: LossKind::Cosine,
            score: ScoreKind::MeanAngularError,
            lower_is_better: true,
            loss_weight: 1.0,
        }
    }

    /// The metric, loss and score combinations are not free-form; this
    /// rejects specs that mix, say, a discrete task with an L1 loss.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Discrete => {
                self.label_metric == LabelMetric::ExactMatch
                    && self.loss == LossKind::CrossEntropy
                    && self.score == ScoreKind::MIoU
                    && self.out_channels >= 2
                    && !self.lower_is_better
            }
            TaskKind::Continuous => match self.label_metric {
                LabelMetric::AbsDiff => {
                    self.loss == LossKind::MaskedL1 && self.score == ScoreKind::Rmse && self.out_channels == 1
                }
                LabelMetric::Angular => {
                    self.loss == LossKind::Cosine
                        && self.score == ScoreKind::MeanAngularError
                        && self.out_channels == 2
                }
                LabelMetric::ExactMatch => false,
            },
        };
        if !ok {
            return Err(Error::invalid(format!(
                "task {}: inconsistent spec ({:?}, {:?}, {:?}, {:?}, {} channels)",
                self.name, self.kind, self.label_metric, self.loss, self.score, self.out_channels
            )));
        }
        if !(self.loss_weight.is_finite() && self.loss_weight >= 0.0) {
            return Err(Error::invalid(format!("task {}: bad loss weight {}", self.name, self.loss_weight)));
        }
        Ok(())
    }
}

/// Unit-vector norms below this after label downsampling count as
/// degenerate and become ignored.
const VEC_DEGENERATE: f64 = 1e-6;

/// A dense per-pixel label image for one task and one sample.
#[derive(Debug, Clone)]
pub enum LabelMap {
    /// Class ids, -1 marking ignored pixels.
    Discrete { h: usize, w: usize, data: Vec<i32> },
    /// Channel-major values (`data[c * h * w + pixel]`) plus a per-pixel
    /// validity mask.
    Continuous { h: usize, w: usize, channels: usize, data: Vec<f64>, valid: Vec<bool> },
}

impl LabelMap {
    pub fn h(&self) -> usize {
        match self {
            LabelMap::Discrete { h, .. } | LabelMap::Continuous { h, .. } => *h,
        }
    }

    pub fn w(&self) -> usize {
        match self {
            LabelMap::Discrete { w, .. } | LabelMap::Continuous { w, .. } => *w,
        }
    }

    pub fn pixels(&self) -> usize {
        self.h() * self.w()
    }

    pub fn is_valid(&self, pix: usize) -> bool {
        match self {
            LabelMap::Discrete { data, .. } => data[pix] >= 0,
            LabelMap::Continuous { valid, .. } => valid[pix],
        }
    }

    /// Halves the spatial resolution following per-kind rules:
    /// discrete labels take the top-left pixel of each 2x2 block
    /// (nearest; never invents a class), scalars average the block,
    /// unit vectors average then renormalize. A block with any ignored
    /// contributor becomes ignored, as does a vector average too short
    /// to renormalize.
    pub fn downsample2x(&self) -> Result<LabelMap> {
        let (h, w) = (self.h(), self.w());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("downsample2x: odd label extent {}x{}", h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        match self {
            LabelMap::Discrete { data, .. } => {
                let mut out = vec![0i32; oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[oy * ow + ox] = data[2 * oy * w + 2 * ox];
                    }
                }
                Ok(LabelMap::Discrete { h: oh, w: ow, data: out })
            }
            LabelMap::Continuous { channels, data, valid, .. } => {
                let c = *channels;
                let mut out = vec![0.0; c * oh * ow];
                let mut ovalid = vec![false; oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let corners = [
                            2 * oy * w + 2 * ox,
                            2 * oy * w + 2 * ox + 1,
                            (2 * oy + 1) * w + 2 * ox,
                            (2 * oy + 1) * w + 2 * ox + 1,
                        ];
                        if corners.iter().any(|&p| !valid[p]) {
                            continue;
                        }
                        let op = oy * ow + ox;
                        let mut mean = vec![0.0; c];
                        for ch in 0..c {
                            for &p in &corners {
                                mean[ch] += data[ch * h * w + p];
                            }
                            mean[ch] *= 0.25;
                        }
                        if c == 2 {
                            let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
                            if norm < VEC_DEGENERATE {
                                continue;
                            }
                            mean[0] /= norm;
                            mean[1] /= norm;
                        }
                        for ch in 0..c {
                            out[ch * oh * ow + op] = mean[ch];
                        }
                        ovalid[op] = true;
                    }
                }
                Ok(LabelMap::Continuous { h: oh, w: ow, channels: c, data: out, valid: ovalid })
            }
        }
    }
}

/// The training loss for one task over a batch: mean cross-entropy,
/// mean absolute error or mean (1 - cosine), always over non-ignored
/// pixels only. A batch with zero usable pixels contributes an exact
/// constant zero with no gradient edges.
pub fn task_loss(g: &mut Graph, spec: &TaskSpec, pred: Var, labels: &[LabelMap]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 || s[0] != labels.len() || s[1] != spec.out_channels {
        return Err(Error::shape(
            "task_loss",
            format!(
                "task {}: prediction {:?} vs {} label maps with {} channels",
                spec.name,
                s,
                labels.len(),
                spec.out_channels
            ),
        ));
    }
    let hw = s[2] * s[3];
    for l in labels {
        if l.h() != s[2] || l.w() != s[3] {
            return Err(Error::shape(
                "task_loss",
                format!("task {}: label {}x{} vs prediction {:?}", spec.name, l.h(), l.w(), s),
            ));
        }
    }
    match spec.loss {
        LossKind::CrossEntropy => {
            let mut flat = Vec::with_capacity(labels.len() * hw);
            for l in labels {
                match l {
                    LabelMap::Discrete { data, .. } => flat.extend_from_slice(data),
                    _ => return Err(Error::invalid(format!("task {}: expected discrete labels", spec.name))),
                }
            }
            g.softmax_cross_entropy(pred, &flat)
        }
        LossKind::MaskedL1 | LossKind::Cosine => {
            let c = spec.out_channels;
            let mut target = Vec::with_capacity(labels.len() * c * hw);
            let mut mask = Vec::with_capacity(labels.len() * hw);
            for l in labels {
                match l {
                    LabelMap::Continuous { channels, data, valid, .. } if *channels == c => {
                        target.extend_from_slice(data);
                        mask.extend_from_slice(valid);
                    }
                    _ => {
                        return Err(Error::invalid(format!(
                            "task {}: expected continuous labels with {} channels",
                            spec.name, c
                        )))
                    }
                }
            }
            match spec.loss {
                LossKind::MaskedL1 => g.masked_l1(pred, &target, &mask),
                _ => g.cosine_loss(pred, &target, &mask),
            }
        }
    }
}

// ── evaluation ───────────────────────────────────────────────────────

/// Dataset-level mIoU: intersection and union accumulate per class over
/// every image, and the final score averages IoU over classes that
/// appear at all (in prediction or label) on non-ignored pixels.
#[derive(Debug, Clone)]
pub struct MIoUAccum {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl MIoUAccum {
    pub fn new(num_classes: usize) -> Self {
        MIoUAccum { inter: vec![0; num_classes], union: vec![0; num_classes] }
    }

    pub fn add(&mut self, pred: &[i32], label: &LabelMap) -> Result<()> {
        let data = match label {
            LabelMap::Discrete { data, .. } => data,
            _ => return Err(Error::invalid("miou: labels must be discrete")),
        };
        if pred.len() != data.len() {
            return Err(Error::shape("miou", format!("{} predictions vs {} labels", pred.len(), data.len())));
        }
        let k = self.inter.len() as i32;
        for (&p, &l) in pred.iter().zip(data) {
            if l < 0 {
                continue;
            }
            if p < 0 || p >= k || l >= k {
                return Err(Error::invalid(format!("miou: class out of range (pred {}, label {})", p, l)));
            }
            if p == l {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[l as usize] += 1;
            }
        }
        Ok(())
    }

    /// NaN when no class was ever observed.
    pub fn finish(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for (i, u) in self.inter.iter().zip(&self.union) {
            if *u > 0 {
                sum += *i as f64 / *u as f64;
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RmseAccum {
    sq_sum: f64,
    n: u64,
}

impl RmseAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// `pred` is one scalar per pixel.
    pub fn add(&mut self, pred: &[f64], label: &LabelMap) -> Result<()> {
        let (data, valid) = match label {
            LabelMap::Continuous { channels: 1, data, valid, .. } => (data, valid),
            _ => return Err(Error::invalid("rmse: labels must be 1-channel continuous")),
        };
        if pred.len() != valid.len() {
            return Err(Error::shape("rmse", format!("{} predictions vs {} pixels", pred.len(), valid.len())));
        }
        for p in 0..pred.len() {
            if valid[p] {
                let d = pred[p] - data[p];
                self.sq_sum += d * d;
                self.n += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.sq_sum / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AngularErrAccum {
    sum_deg: f64,
    n: u64,
}

impl AngularErrAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// `pred` holds two channel-major planes (`pred[pixel]` and
    /// `pred[hw + pixel]`); predictions are normalized before the angle
    /// is taken.
    pub fn add(&mut self, pred: &[f64], label: &LabelMap) -> Result<()> {
        let (h, w, data, valid) = match label {
            LabelMap::Continuous { channels: 2, h, w, data, valid } => (*h, *w, data, valid),
            _ => return Err(Error::invalid("angular error: labels must be 2-channel continuous")),
        };
        let hw = h * w;
        if pred.len() != 2 * hw {
            return Err(Error::shape("angular error", format!("{} prediction values vs {} pixels", pred.len(), hw)));
        }
        for p in 0..hw {
            if !valid[p] {
                continue;
            }
            let (x0, x1) = (pred[p], pred[hw + p]);
            let norm = (x0 * x0 + x1 * x1).sqrt().max(1e-12);
            let dot = (x0 * data[p] + x1 * data[hw + p]) / norm;
            self.sum_deg += dot.clamp(-1.0, 1.0).acos().to_degrees();
            self.n += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum_deg / self.n as f64
        }
    }
}

pub fn eval_miou(pred: &[i32], label: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut acc = MIoUAccum::new(num_classes);
    acc.add(pred, label)?;
    Ok(acc.finish())
}

pub fn eval_rmse(pred: &[f64], label: &LabelMap) -> Result<f64> {
    let mut acc = RmseAccum::new();
    acc.add(pred, label)?;
    Ok(acc.finish())
}

pub fn eval_mean_angular_error(pred: &[f64], label: &LabelMap) -> Result<f64> {
    let mut acc = AngularErrAccum::new();
    acc.add(pred, label)?;
    Ok(acc.finish())
}

/// Aggregate multi-task delta in percent: the mean signed relative
/// improvement of `multi` over `single`, with the sign flipped for
/// lower-is-better scores so that positive always means better.
pub fn delta_m(multi: &[f64], single: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if multi.len() != single.len() || multi.len() != lower_is_better.len() || multi.is_empty() {
        return Err(Error::invalid(format!(
            "delta_m: mismatched lengths ({}, {}, {})",
            multi.len(),
            single.len(),
            lower_is_better.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..multi.len() {
        if !(single[i].is_finite() && multi[i].is_finite()) {
            return Err(Error::NonFinite(format!("delta_m: score {i}")));
        }
        if single[i] == 0.0 {
            return Err(Error::invalid(format!("delta_m: single-task reference {i} is zero")));
        }
        let sign = if lower_is_better[i] { -1.0 } else { 1.0 };
        acc += sign * (multi[i] - single[i]) / single[i];
    }
    Ok(100.0 * acc / multi.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn grid_discrete(h: usize, w: usize, data: Vec<i32>) -> LabelMap {
        LabelMap::Discrete { h, w, data }
    }

    #[test]
    fn builtin_specs_validate() {
        TaskSpec::segmentation(6).validate().unwrap();
        TaskSpec::depth().validate().unwrap();
        TaskSpec::orientation().validate().unwrap();
        let mut bad = TaskSpec::segmentation(6);
        bad.loss = LossKind::MaskedL1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perfect_one_hot_logits_drive_ce_towards_zero() {
        let mut g = Graph::new();
        // 1 image, 3 classes, 1x2; logits hugely favor the true class.
        let mut t = Tensor::zeros(&[1, 3, 1, 2]);
        let labels = grid_discrete(1, 2, vec![2, 0]);
        t.data_mut()[2 * 2] = 50.0; // class 2 at pixel 0
        t.data_mut()[1] = 50.0; // class 0 at pixel 1
        let pred = g.leaf(&t.with_grad());
        let loss = task_loss(&mut g, &TaskSpec::segmentation(3), pred, &[labels]).unwrap();
        assert!(g.value(loss)[0] < 1e-6);
    }

    #[test]
    fn l1_on_identical_values_is_zero() {
        let mut g = Graph::new();
        let vals = vec![0.3, 0.7, 0.1, 0.9];
        let t = Tensor::new(&[1, 1, 2, 2], vals.clone()).unwrap().with_grad();
        let pred = g.leaf(&t);
        let labels = LabelMap::Continuous { h: 2, w: 2, channels: 1, data: vals, valid: vec![true; 4] };
        let loss = task_loss(&mut g, &TaskSpec::depth(), pred, &[labels]).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
    }

    #[test]
    fn cosine_loss_is_one_for_orthogonal_vectors() {
        let mut g = Graph::new();
        // Prediction points along x, target along y, single pixel.
        let t = Tensor::new(&[1, 2, 1, 1], vec![2.0, 0.0]).unwrap().with_grad();
        let pred = g.leaf(&t);
        let labels = LabelMap::Continuous {
            h: 1,
            w: 1,
            channels: 2,
            data: vec![0.0, 1.0],
            valid: vec![true],
        };
        let loss = task_loss(&mut g, &TaskSpec::orientation(), pred, &[labels]).unwrap();
        assert!((g.value(loss)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_batch_adds_no_graph_edges() {
        let mut g = Graph::new();
        let t = Tensor::zeros(&[1, 3, 2, 2]).with_grad();
        let pred = g.leaf(&t);
        let before = g.num_records();
        let labels = grid_discrete(2, 2, vec![-1; 4]);
        let loss = task_loss(&mut g, &TaskSpec::segmentation(3), pred, &[labels]).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
        assert_eq!(g.num_records(), before);
    }

    #[test]
    fn miou_hand_case() {
        // 2x2, classes {0, 1}; prediction hits class 0 once, misses the
        // other three pixels.
        let label = grid_discrete(2, 2, vec![0, 0, 1, 1]);
        let pred = [0, 1, 0, 0];
        // inter(0) = 1, union(0) = 4; inter(1) = 0, union(1) = 3.
        let got = eval_miou(&pred, &label, 2).unwrap();
        assert!((got - (1.0 / 4.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn miou_identity_is_one_and_respects_ignore() {
        let label = grid_discrete(2, 2, vec![0, 1, -1, 1]);
        let pred = [0, 1, 0, 1];
        assert_eq!(eval_miou(&pred, &label, 3).unwrap(), 1.0);
    }

    #[test]
    fn rmse_identity_is_zero() {
        let label = LabelMap::Continuous {
            h: 1,
            w: 3,
            channels: 1,
            data: vec![0.2, 0.4, 0.6],
            valid: vec![true, true, true],
        };
        assert_eq!(eval_rmse(&[0.2, 0.4, 0.6], &label).unwrap(), 0.0);
    }

    #[test]
    fn angular_error_of_ten_degree_rotation() {
        let theta = 0.3f64;
        let rot = theta + 10f64.to_radians();
        let label = LabelMap::Continuous {
            h: 1,
            w: 2,
            channels: 2,
            data: vec![theta.cos(), theta.cos(), theta.sin(), theta.sin()],
            valid: vec![true, true],
        };
        let pred = [rot.cos(), rot.cos(), rot.sin(), rot.sin()];
        let got = eval_mean_angular_error(&pred, &label).unwrap();
        assert!((got - 10.0).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn no_evaluable_pixels_scores_nan() {
        let label = grid_discrete(1, 2, vec![-1, -1]);
        assert!(eval_miou(&[0, 0], &label, 2).unwrap().is_nan());
    }

    #[test]
    fn delta_m_identity_and_sign() {
        let specs = [false, true]; // higher-better, lower-better
        assert_eq!(delta_m(&[40.0, 0.6], &[40.0, 0.6], &specs).unwrap(), 0.0);
        // Improving both: higher mIoU, lower error.
        let d = delta_m(&[44.0, 0.54], &[40.0, 0.6], &specs).unwrap();
        assert!((d - 10.0).abs() < 1e-9); // (+10% + +10%) / 2
        // Worsening both flips the sign.
        let d = delta_m(&[36.0, 0.66], &[40.0, 0.6], &specs).unwrap();
        assert!((d + 10.0).abs() < 1e-9);
    }

    #[test]
    fn delta_m_rejects_zero_reference() {
        assert!(delta_m(&[1.0], &[0.0], &[false]).is_err());
    }

    #[test]
    fn downsample_discrete_never_invents_classes() {
        let label = grid_discrete(4, 4, vec![
            0, 1, 1, 1, //
            1, 2, 2, 1, //
            3, 3, 4, 4, //
            3, 3, 4, -1,
        ]);
        let down = label.downsample2x().unwrap();
        match &down {
            LabelMap::Discrete { data, .. } => {
                assert_eq!(data, &[0, 1, 3, 4]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn downsample_scalar_averages_and_propagates_ignore() {
        let label = LabelMap::Continuous {
            h: 2,
            w: 4,
            channels: 1,
            data: vec![0.1, 0.2, 0.5, 0.5, 0.3, 0.4, 0.5, 0.5],
            valid: vec![true, true, true, false, true, true, true, true],
        };
        let down = label.downsample2x().unwrap();
        match &down {
            LabelMap::Continuous { data, valid, .. } => {
                assert!((data[0] - 0.25).abs() < 1e-12);
                assert!(valid[0]);
                assert!(!valid[1], "block with an ignored corner must become ignored");
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn downsample_vectors_renormalize_or_drop() {
        // Left block: identical unit vectors, stays unit. Right block:
        // opposite vectors cancel and the pixel drops out.
        let c = 0.6f64;
        let s = 0.8f64;
        let label = LabelMap::Continuous {
            h: 2,
            w: 4,
            channels: 2,
            data: vec![
                c, c, 1.0, -1.0, //
                c, c, 1.0, -1.0, // x components
                s, s, 0.0, 0.0, //
                s, s, 0.0, 0.0, // y components
            ],
            valid: vec![true; 8],
        };
        let down = label.downsample2x().unwrap();
        match &down {
            LabelMap::Continuous { data, valid, h, w, .. } => {
                assert_eq!((*h, *w), (1, 2));
                assert!(valid[0]);
                let norm = (data[0] * data[0] + data[2] * data[2]).sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
                assert!(!valid[1], "cancelled average must be dropped");
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn task_loss_checks_shapes() {
        let mut g = Graph::new();
        let t = Tensor::zeros(&[1, 3, 2, 2]).with_grad();
        let pred = g.leaf(&t);
        let labels = grid_discrete(4, 4, vec![0; 16]);
        assert!(task_loss(&mut g, &TaskSpec::segmentation(3), pred, &[labels]).is_err());
    }
}
