//! Differentiable overlap losses (Dice, Tversky) and hard-mask metrics.
//!
//! Losses enter the graph as custom nodes with analytic gradients; metrics
//! operate on hard label maps through one-vs-rest confusion counts. Both
//! families use the same smoothing constant so the Tversky loss at
//! alpha = beta = 0.5 coincides with the Dice loss term for term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::{AutonnError, CustomGrad, Element, Graph, TensorId};
use crate::ipcore::Mask2D;
use crate::volio::MaskVolume;

/// Smoothing added to numerator and denominator of every ratio loss, so
/// empty-foreground inputs stay finite (and a perfect empty match scores 1).
pub const SMOOTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SeglossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class set is empty")]
    EmptyClassSet,
    #[error("bad hyperparameters: {0}")]
    BadHyperparameters(String),
    #[error(transparent)]
    Engine(#[from] AutonnError),
}

type Result<T> = std::result::Result<T, SeglossError>;

/// Per-pixel class probabilities with shape `(N, K, spatial...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
}

impl<E: Element> SoftPrediction<E> {
    /// Validates value range and per-pixel channel sums (1 within 1e-6).
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if shape.len() < 3 {
            return Err(SeglossError::ShapeMismatch(format!(
                "need (N, K, spatial...) shape, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SeglossError::ShapeMismatch(format!(
                "data length {} != product of {shape:?}",
                data.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if k < 2 || k > 255 {
            return Err(SeglossError::ShapeMismatch(format!("class count {k} outside 2..=255")));
        }
        let spatial: usize = shape[2..].iter().product();
        for (i, v) in data.iter().enumerate() {
            let v = v.to_f64_lossy();
            if !((-1e-6..=1.0 + 1e-6).contains(&v)) {
                return Err(SeglossError::ShapeMismatch(format!(
                    "probability {v} at index {i} outside [0, 1]"
                )));
            }
        }
        for sample in 0..n {
            for pos in 0..spatial {
                let sum: f64 = (0..k)
                    .map(|c| data[(sample * k + c) * spatial + pos].to_f64_lossy())
                    .sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(SeglossError::ShapeMismatch(format!(
                        "channel sum {sum} at sample {sample}, position {pos}"
                    )));
                }
            }
        }
        Ok(Self { data, shape: shape.to_vec() })
    }

    pub fn from_graph(g: &Graph<E>, id: TensorId) -> Result<Self> {
        Self::new(g.data(id).to_vec(), g.shape(id))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Hard labels by per-pixel channel argmax; ties pick the lowest class.
    pub fn argmax_labels(&self) -> Vec<u8> {
        let (n, k) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let mut labels = Vec::with_capacity(n * spatial);
        for sample in 0..n {
            for pos in 0..spatial {
                let mut best = 0usize;
                let mut best_val = self.data[(sample * k) * spatial + pos];
                for c in 1..k {
                    let v = self.data[(sample * k + c) * spatial + pos];
                    if v > best_val {
                        best = c;
                        best_val = v;
                    }
                }
                labels.push(best as u8);
            }
        }
        labels
    }
}

/// Ground-truth labels flattened to `(N, spatial...)` order, matching a
/// prediction's sample-major layout. One-hot values are derived on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardTarget {
    labels: Vec<u8>,
    num_classes: usize,
}

impl HardTarget {
    pub fn new(labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > 255 {
            return Err(SeglossError::ShapeMismatch(format!(
                "class count {num_classes} outside 2..=255"
            )));
        }
        if let Some(bad) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
            return Err(SeglossError::ShapeMismatch(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn from_mask(mask: &Mask2D) -> Self {
        Self { labels: mask.labels().to_vec(), num_classes: mask.num_classes }
    }

    /// Batch of slices, concatenated in sample order.
    pub fn from_masks(masks: &[Mask2D]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| SeglossError::ShapeMismatch("empty mask batch".into()))?;
        let mut labels = Vec::new();
        for m in masks {
            if m.num_classes != first.num_classes || m.dims() != first.dims() {
                return Err(SeglossError::ShapeMismatch(
                    "masks in a batch must share dims and class count".into(),
                ));
            }
            labels.extend_from_slice(m.labels());
        }
        Ok(Self { labels, num_classes: first.num_classes })
    }

    pub fn from_volume(mask: &MaskVolume) -> Self {
        Self { labels: mask.labels().to_vec(), num_classes: mask.num_classes }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All classes except background (0): the default averaging set.
pub fn foreground_classes(num_classes: usize) -> Vec<usize> {
    (1..num_classes).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RatioKind {
    Dice,
    Tversky { alpha: f64, beta: f64 },
}

/// Scalar graph node `mean_c(1 - ratio_c)` over a class set, where the
/// ratio is soft Dice or Tversky overlap of one prediction channel with the
/// one-hot target. Gradients w.r.t. the prediction are analytic.
struct OverlapLoss {
    kind: RatioKind,
    labels: Vec<u8>,
    classes: Vec<usize>,
    shape: Vec<usize>,
}

struct ClassSums {
    intersection: f64,
    pred_sum: f64,
    target_sum: f64,
}

impl OverlapLoss {
    fn sums<E: Element>(&self, pred: &[E], class: usize) -> ClassSums {
        let (k, spatial) = (self.shape[1], self.shape[2..].iter().product::<usize>());
        let n = self.shape[0];
        let mut intersection = 0.0;
        let mut pred_sum = 0.0;
        let mut target_sum = 0.0;
        for sample in 0..n {
            let base = (sample * k + class) * spatial;
            let labels = &self.labels[sample * spatial..(sample + 1) * spatial];
            for (p, l) in pred[base..base + spatial].iter().zip(labels) {
                let p = p.to_f64_lossy();
                pred_sum += p;
                if usize::from(*l) == class {
                    intersection += p;
                    target_sum += 1.0;
                }
            }
        }
        ClassSums { intersection, pred_sum, target_sum }
    }

    /// `(value, d value / d intersection-free terms)` helpers are inlined in
    /// `backward`; this computes just the per-class loss value.
    fn class_loss(&self, s: &ClassSums) -> f64 {
        let num = 2.0 * s.intersection + SMOOTH;
        let den = match self.kind {
            RatioKind::Dice => s.pred_sum + s.target_sum + SMOOTH,
            RatioKind::Tversky { alpha, beta } => {
                let fp = s.pred_sum - s.intersection;
                let fn_ = s.target_sum - s.intersection;
                2.0 * s.intersection + 2.0 * alpha * fp + 2.0 * beta * fn_ + SMOOTH
            }
        };
        1.0 - num / den
    }

    fn value<E: Element>(&self, pred: &[E]) -> f64 {
        let total: f64 = self.classes.iter().map(|&c| self.class_loss(&self.sums(pred, c))).sum();
        total / self.classes.len() as f64
    }
}

impl<E: Element> CustomGrad<E> for OverlapLoss {
    fn name(&self) -> &'static str {
        match self.kind {
            RatioKind::Dice => "dice_loss",
            RatioKind::Tversky { .. } => "tversky_loss",
        }
    }

    fn backward(&self, out_grad: &[E], parent_data: &[&[E]]) -> Vec<Option<Vec<E>>> {
        let pred = parent_data[0];
        let seed = out_grad[0].to_f64_lossy();
        let (n, k) = (self.shape[0], self.shape[1]);
        let spatial: usize = self.shape[2..].iter().product();
        let scale = seed / self.classes.len() as f64;
        let mut grad = vec![E::from_f64_lossy(0.0); pred.len()];
        for &class in &self.classes {
            let s = self.sums(pred, class);
            let num = 2.0 * s.intersection + SMOOTH;
            for sample in 0..n {
                let base = (sample * k + class) * spatial;
                let labels = &self.labels[sample * spatial..(sample + 1) * spatial];
                for (g_out, l) in grad[base..base + spatial].iter_mut().zip(labels) {
                    let hit = usize::from(*l) == class;
                    let g = if hit { 1.0 } else { 0.0 };
                    // d(1 - num/den)/dp = -(num' * den - num * den') / den^2
                    let (den, dden) = match self.kind {
                        RatioKind::Dice => (s.pred_sum + s.target_sum + SMOOTH, 1.0),
                        RatioKind::Tversky { alpha, beta } => {
                            let fp = s.pred_sum - s.intersection;
                            let fn_ = s.target_sum - s.intersection;
                            let den =
                                2.0 * s.intersection + 2.0 * alpha * fp + 2.0 * beta * fn_ + SMOOTH;
                            let dden = 2.0 * g + 2.0 * alpha * (1.0 - g) - 2.0 * beta * g;
                            (den, dden)
                        }
                    };
                    let dratio = (2.0 * g * den - num * dden) / (den * den);
                    let contribution = -scale * dratio;
                    *g_out = E::from_f64_lossy(g_out.to_f64_lossy() + contribution);
                }
            }
        }
        vec![Some(grad)]
    }
}

fn check_loss_inputs<E: Element>(
    g: &Graph<E>,
    pred: TensorId,
    target: &HardTarget,
    class_set: &[usize],
) -> Result<Vec<usize>> {
    let shape = g.shape(pred).to_vec();
    if shape.len() < 3 {
        return Err(SeglossError::ShapeMismatch(format!(
            "prediction must be (N, K, spatial...), got {shape:?}"
        )));
    }
    let k = shape[1];
    if k != target.num_classes() {
        return Err(SeglossError::ShapeMismatch(format!(
            "prediction has {k} channels but target declares {} classes",
            target.num_classes()
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    if target.len() != shape[0] * spatial {
        return Err(SeglossError::ShapeMismatch(format!(
            "target has {} labels but prediction covers {}",
            target.len(),
            shape[0] * spatial
        )));
    }
    if class_set.is_empty() {
        return Err(SeglossError::EmptyClassSet);
    }
    if let Some(bad) = class_set.iter().find(|c| **c >= k) {
        return Err(SeglossError::ShapeMismatch(format!("class {bad} outside 0..{k}")));
    }
    Ok(shape)
}

fn overlap_loss<E: Element>(
    g: &mut Graph<E>,
    pred: TensorId,
    target: &HardTarget,
    class_set: &[usize],
    kind: RatioKind,
) -> Result<TensorId> {
    let shape = check_loss_inputs(g, pred, target, class_set)?;
    let op = OverlapLoss { kind, labels: target.labels().to_vec(), classes: class_set.to_vec(), shape };
    let value = E::from_f64_lossy(op.value(g.data(pred)));
    Ok(g.custom(&[pred], vec![value], &[1], Box::new(op))?)
}

/// Mean soft Dice loss `1 - (2|P∩G| + s)/(|P| + |G| + s)` over `class_set`.
pub fn dice_loss<E: Element>(
    g: &mut Graph<E>,
    pred: TensorId,
    target: &HardTarget,
    class_set: &[usize],
) -> Result<TensorId> {
    overlap_loss(g, pred, target, class_set, RatioKind::Dice)
}

/// Mean Tversky loss with false-positive weight `alpha` and false-negative
/// weight `beta` (`alpha + beta = 1`). At 0.5/0.5 this equals [`dice_loss`].
pub fn tversky_loss<E: Element>(
    g: &mut Graph<E>,
    pred: TensorId,
    target: &HardTarget,
    alpha: f64,
    beta: f64,
    class_set: &[usize],
) -> Result<TensorId> {
    if !alpha.is_finite() || !beta.is_finite() || alpha < 0.0 || beta < 0.0 {
        return Err(SeglossError::BadHyperparameters(format!(
            "alpha {alpha} and beta {beta} must be finite and non-negative"
        )));
    }
    if (alpha + beta - 1.0).abs() > 1e-9 {
        return Err(SeglossError::BadHyperparameters(format!(
            "alpha + beta must be 1, got {}",
            alpha + beta
        )));
    }
    overlap_loss(g, pred, target, class_set, RatioKind::Tversky { alpha, beta })
}

/// One-vs-rest pixel counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn add(&mut self, other: &ClassCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }

    pub fn metrics(&self) -> ClassMetrics {
        let errors = self.false_pos + self.false_neg;
        // A zero denominator means the ratio's own events never occurred;
        // score 1 when the prediction made no errors at all, else 0.
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                if errors == 0 { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        ClassMetrics {
            precision_std: ratio(self.true_pos, self.true_pos + self.false_pos),
            recall_std: ratio(self.true_pos, self.true_pos + self.false_neg),
            specificity: ratio(self.true_neg, self.true_neg + self.false_pos),
            precision_as_sensitivity: ratio(self.true_pos, self.true_pos + self.false_neg),
            recall_as_specificity: ratio(self.true_neg, self.true_neg + self.false_pos),
            dsc: ratio(2 * self.true_pos, 2 * self.true_pos + self.false_neg + self.false_pos),
        }
    }
}

/// Per-class one-vs-rest counts; index = class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn compute(pred: &[u8], target: &[u8], num_classes: usize) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(SeglossError::ShapeMismatch(format!(
                "prediction has {} labels, target {}",
                pred.len(),
                target.len()
            )));
        }
        let mut per_class = vec![ClassCounts::default(); num_classes];
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= num_classes || t >= num_classes {
                return Err(SeglossError::ShapeMismatch(format!(
                    "label {} out of range for {num_classes} classes",
                    p.max(t)
                )));
            }
            for (c, counts) in per_class.iter_mut().enumerate() {
                match (p == c, t == c) {
                    (true, true) => counts.true_pos += 1,
                    (true, false) => counts.false_pos += 1,
                    (false, true) => counts.false_neg += 1,
                    (false, false) => counts.true_neg += 1,
                }
            }
        }
        Ok(Self { per_class })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Element-wise sum over classes.
    pub fn pooled(&self) -> ClassCounts {
        let mut acc = ClassCounts::default();
        for c in &self.per_class {
            acc.add(c);
        }
        acc
    }

    /// Accumulates another sample's counts (same class count required).
    pub fn accumulate(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.per_class.len() != other.per_class.len() {
            return Err(SeglossError::ShapeMismatch(format!(
                "cannot pool {} classes with {}",
                self.per_class.len(),
                other.per_class.len()
            )));
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        Ok(())
    }
}

/// One-vs-rest counts of `class` between two label maps.
pub fn confusion_counts(pred: &[u8], target: &[u8], class: usize) -> Result<ClassCounts> {
    if pred.len() != target.len() {
        return Err(SeglossError::ShapeMismatch(format!(
            "prediction has {} labels, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut counts = ClassCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (usize::from(p) == class, usize::from(t) == class) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, true) => counts.false_neg += 1,
            (false, false) => counts.true_neg += 1,
        }
    }
    Ok(counts)
}

/// Evaluation ratios for one class (or one pooled table).
///
/// Two precision/recall conventions coexist: the `_std` pair uses the
/// standard formulas, while `precision_as_sensitivity` (TP/(TP+FN)) and
/// `recall_as_specificity` (TN/(TN+FP)) follow the convention that labels
/// those formulas precision and recall. Both are reported so results can be
/// compared under either reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision_std: f64,
    pub recall_std: f64,
    pub specificity: f64,
    pub precision_as_sensitivity: f64,
    pub recall_as_specificity: f64,
    pub dsc: f64,
}

/// Per-class metrics plus foreground macro average and pooled-count metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes 1.. (background excluded).
    pub macro_avg: ClassMetrics,
    pub pooled: ClassMetrics,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "recall,precision,dsc"
    }

    /// Macro-averaged standard recall, precision and DSC.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{}",
            self.macro_avg.recall_std, self.macro_avg.precision_std, self.macro_avg.dsc
        )
    }
}

/// Builds the full report from per-class confusion counts.
pub fn metric_report(counts: &ConfusionCounts) -> MetricReport {
    let per_class: Vec<ClassMetrics> = counts.per_class.iter().map(|c| c.metrics()).collect();
    let fg: Vec<&ClassMetrics> = per_class.iter().skip(1).collect();
    let m = fg.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| fg.iter().map(|c| f(c)).sum::<f64>() / m;
    let macro_avg = ClassMetrics {
        precision_std: mean(|c| c.precision_std),
        recall_std: mean(|c| c.recall_std),
        specificity: mean(|c| c.specificity),
        precision_as_sensitivity: mean(|c| c.precision_as_sensitivity),
        recall_as_specificity: mean(|c| c.recall_as_specificity),
        dsc: mean(|c| c.dsc),
    };
    MetricReport { per_class, macro_avg, pooled: counts.pooled().metrics() }
}
