//! Classification metrics, robustness probes, and efficiency statistics.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Metric bundle for one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Macro one-vs-rest AUROC; absent when no class has both positives and
    /// negatives.
    pub auroc_macro_ovr: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

/// Confusion matrix with rows = true class, columns = predicted class.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Array2<usize> {
    let mut m = Array2::<usize>::zeros((classes, classes));
    for (&p, &y) in preds.iter().zip(labels.iter()) {
        m[[y, p]] += 1;
    }
    m
}

/// Mean per-class recall over classes with support > 0.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Numeric("balanced accuracy of empty input".into()));
    }
    let m = confusion_matrix(preds, labels, classes);
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let support: usize = m.row(c).sum();
        if support > 0 {
            acc += m[[c, c]] as f64 / support as f64;
            present += 1;
        }
    }
    Ok(acc / present as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels.iter()).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Per-class F1 with the zero convention: a class with no true positives and
/// no predicted positives scores 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let m = confusion_matrix(preds, labels, classes);
    (0..classes)
        .map(|c| {
            let tp = m[[c, c]] as f64;
            let fp = m.column(c).sum() as f64 - tp;
            let fn_ = m.row(c).sum() as f64 - tp;
            if 2.0 * tp + fp + fn_ == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `classes` classes, counting
/// undetected classes as 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let f1 = per_class_f1(preds, labels, classes);
    f1.iter().sum::<f64>() / classes as f64
}

/// Rank-based one-vs-rest AUROC for one class's scores, ties averaged.
fn auroc_binary(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks for ties.
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = n as f64 - pos;
    let rank_sum: f64 = (0..n).filter(|&k| positive[k]).map(|k| ranks[k]).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Macro one-vs-rest AUROC over classes that have both positives and
/// negatives; `None` when every class is excluded.
pub fn auroc_macro_ovr(scores: ArrayView2<f64>, labels: &[usize]) -> Option<f64> {
    let (n, classes) = scores.dim();
    assert_eq!(n, labels.len(), "scores/labels length");
    let mut acc = 0.0;
    let mut used = 0usize;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let pos = positive.iter().filter(|&&p| p).count();
        if pos == 0 || pos == n {
            continue;
        }
        let col: Vec<f64> = scores.column(c).iter().cloned().collect();
        acc += auroc_binary(&col, &positive);
        used += 1;
    }
    if used == 0 {
        None
    } else {
        Some(acc / used as f64)
    }
}

/// Assemble the full bundle from predictions, labels, and class scores.
pub fn compute_report(
    preds: &[usize],
    labels: &[usize],
    scores: ArrayView2<f64>,
    classes: usize,
) -> Result<MetricsReport> {
    let confusion = confusion_matrix(preds, labels, classes);
    let mut support = vec![0usize; classes];
    for c in 0..classes {
        support[c] = confusion.row(c).sum();
    }
    Ok(MetricsReport {
        balanced_accuracy: balanced_accuracy(preds, labels, classes)?,
        accuracy: accuracy(preds, labels),
        macro_f1: macro_f1(preds, labels, classes),
        auroc_macro_ovr: auroc_macro_ovr(scores, labels),
        per_class_f1: per_class_f1(preds, labels, classes),
        confusion: (0..classes)
            .map(|r| confusion.row(r).to_vec())
            .collect(),
        support,
    })
}

// ---- robustness ------------------------------------------------------------

/// Evaluation-time input perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum RobustnessCondition {
    Clean,
    MissingText,
    MissingAudio,
    MissingVision,
    /// Gaussian noise of the given std on audio and video inputs.
    Noise(f64),
    /// Each timestep zeroed across all modalities with the given probability.
    FrameMask(f64),
}

impl RobustnessCondition {
    pub fn label(&self) -> String {
        match self {
            RobustnessCondition::Clean => "clean".into(),
            RobustnessCondition::MissingText => "missing_text".into(),
            RobustnessCondition::MissingAudio => "missing_audio".into(),
            RobustnessCondition::MissingVision => "missing_vision".into(),
            RobustnessCondition::Noise(s) => format!("noise_{s}"),
            RobustnessCondition::FrameMask(p) => format!("frame_mask_{p}"),
        }
    }

    /// The default probe set.
    pub fn standard_suite() -> Vec<RobustnessCondition> {
        use RobustnessCondition::*;
        vec![
            Clean,
            MissingText,
            MissingAudio,
            MissingVision,
            Noise(0.1),
            Noise(0.5),
            Noise(2.0),
            FrameMask(0.10),
            FrameMask(0.25),
            FrameMask(0.50),
        ]
    }
}

/// Apply a condition to a copy of the batch; the underlying data is never
/// mutated. Noise and masking draw from the supplied fixed evaluation stream.
pub fn apply_condition(batch: &Batch, cond: RobustnessCondition, rng: &mut StreamRng) -> Batch {
    use rand::Rng;
    let mut out = batch.clone();
    match cond {
        RobustnessCondition::Clean => {}
        RobustnessCondition::MissingText => out.text.fill(0.0),
        RobustnessCondition::MissingAudio => out.audio.fill(0.0),
        RobustnessCondition::MissingVision => out.video.fill(0.0),
        RobustnessCondition::Noise(sigma) => {
            if sigma != 0.0 {
                for m in 1..3 {
                    for v in out.modality_mut(m).iter_mut() {
                        *v += sigma * crate::rng::normal(rng);
                    }
                }
            }
        }
        RobustnessCondition::FrameMask(p) => {
            if p > 0.0 {
                let (b, l, _) = out.text.dim();
                for bi in 0..b {
                    for li in 0..l {
                        if rng.gen::<f64>() < p {
                            for m in 0..3 {
                                out.modality_mut(m).slice_mut(ndarray::s![bi, li, ..]).fill(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One row of a robustness table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub condition: String,
    pub report: MetricsReport,
    /// Signed deltas vs the clean condition.
    pub delta_balanced_accuracy: f64,
    pub delta_macro_f1: f64,
}

/// Evaluate `predict` under each condition. `predict` maps a batch to
/// (predictions, class scores). Conditions are pure per-evaluation input
/// transforms keyed by `eval_seed`.
pub fn robustness_suite<F>(
    batches: &[Batch],
    classes: usize,
    conditions: &[RobustnessCondition],
    eval_seed: u64,
    mut predict: F,
) -> Result<Vec<RobustnessRow>>
where
    F: FnMut(&Batch) -> (Vec<usize>, Array2<f64>),
{
    let mut rows: Vec<RobustnessRow> = Vec::new();
    let mut clean: Option<MetricsReport> = None;
    for (ci, &cond) in conditions.iter().enumerate() {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut scores: Vec<Array2<f64>> = Vec::new();
        for (bi, b) in batches.iter().enumerate() {
            let mut rng = crate::rng::stream(eval_seed, "robustness", &[ci as u64, bi as u64]);
            let perturbed = apply_condition(b, cond, &mut rng);
            let (p, s) = predict(&perturbed);
            preds.extend(p);
            labels.extend(b.labels.iter().cloned());
            scores.push(s);
        }
        let views: Vec<_> = scores.iter().map(|s| s.view()).collect();
        let all_scores = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(format!("score concat: {e}")))?;
        let report = compute_report(&preds, &labels, all_scores.view(), classes)?;
        if cond == RobustnessCondition::Clean {
            clean = Some(report.clone());
        }
        let (db, df) = match &clean {
            Some(c) => (
                report.balanced_accuracy - c.balanced_accuracy,
                report.macro_f1 - c.macro_f1,
            ),
            None => (0.0, 0.0),
        };
        rows.push(RobustnessRow {
            condition: cond.label(),
            report,
            delta_balanced_accuracy: db,
            delta_macro_f1: df,
        });
    }
    Ok(rows)
}

// ---- efficiency ------------------------------------------------------------

/// Parameter counts and wall-clock latency of a single-batch forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyStats {
    pub total_params: usize,
    pub trainable_params: usize,
    pub mean_latency_ms: f64,
}

/// Time `forward` (2 warmup passes, then the mean of 10 timed passes).
pub fn efficiency_stats<F>(total_params: usize, trainable_params: usize, mut forward: F) -> EfficiencyStats
where
    F: FnMut(),
{
    for _ in 0..2 {
        forward();
    }
    let mut total = 0.0;
    for _ in 0..10 {
        let t0 = std::time::Instant::now();
        forward();
        total += t0.elapsed().as_secs_f64() * 1e3;
    }
    EfficiencyStats {
        total_params,
        trainable_params,
        mean_latency_ms: total / 10.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn balanced_accuracy_hand_case() {
        // labels (0,0,1,1), preds (0,1,1,1) -> recalls (0.5, 1.0) -> 0.75
        let bal = balanced_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((bal - 0.75).abs() < 1e-15);
    }

    #[test]
    fn majority_predictor_scores_one_over_c() {
        let labels = vec![0, 0, 0, 0, 1, 2, 3, 4, 5];
        let preds = vec![0; labels.len()];
        let bal = balanced_accuracy(&preds, &labels, 6).unwrap();
        assert!((bal - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let labels = vec![0, 1, 2, 3, 4, 5];
        let bal = balanced_accuracy(&labels, &labels, 6).unwrap();
        assert!((bal - 1.0).abs() < 1e-15);
        assert!(per_class_f1(&labels, &labels, 6).iter().all(|&f| f == 1.0));
    }

    #[test]
    fn empty_input_is_fatal() {
        assert!(balanced_accuracy(&[], &[], 6).is_err());
    }

    #[test]
    fn absent_class_f1_is_zero_by_convention() {
        // class 2 never predicted, never true
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 1, 1];
        let f1 = per_class_f1(&preds, &labels, 3);
        assert_eq!(f1[2], 0.0);
        assert!((macro_f1(&preds, &labels, 3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auroc_separated_ranks() {
        // scores (0.9, 0.1) for positives, (0.2, 0.8) for negatives per class
        let scores = array![[0.9, 0.2], [0.1, 0.8], [0.2, 0.9], [0.8, 0.1]];
        let labels = vec![0, 1, 1, 0];
        // class 0: positives have 0.9, 0.8; negatives 0.1, 0.2 -> AUROC 1
        // class 1: positives have 0.8, 0.9; negatives 0.2, 0.1 -> AUROC 1
        let auc = auroc_macro_ovr(scores.view(), &labels).unwrap();
        assert!((auc - 1.0).abs() < 1e-15);
    }

    #[test]
    fn auroc_with_ties_is_half() {
        let scores = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let labels = vec![0, 1, 0, 1];
        let auc = auroc_macro_ovr(scores.view(), &labels).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auroc_excludes_single_sided_classes() {
        // class 2 has no positives -> excluded; others separable.
        let scores = array![[0.9, 0.1, 0.0], [0.1, 0.9, 0.0], [0.8, 0.2, 0.0], [0.2, 0.8, 0.0]];
        let labels = vec![0, 1, 0, 1];
        let auc = auroc_macro_ovr(scores.view(), &labels).unwrap();
        assert!((auc - 1.0).abs() < 1e-15);
        // all classes single-sided -> undefined
        let labels_all_same = vec![0, 0, 0, 0];
        let one_col = array![[0.1], [0.2], [0.3], [0.4]];
        assert!(auroc_macro_ovr(one_col.view(), &labels_all_same).is_none());
    }

    #[test]
    fn random_scores_auroc_near_half() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "auroc-mc", &[]);
        let n = 4000;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
        let scores = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        let auc = auroc_macro_ovr(scores.view(), &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.03, "auc {auc}");
    }

    #[test]
    fn confusion_identities() {
        let labels = vec![0, 1, 2, 1, 0, 2, 2];
        let preds = vec![0, 2, 2, 1, 1, 0, 2];
        let m = confusion_matrix(&preds, &labels, 3);
        // row sums = support
        assert_eq!(m.row(0).sum(), 2);
        assert_eq!(m.row(1).sum(), 2);
        assert_eq!(m.row(2).sum(), 3);
        // column sums = prediction counts
        let pred_counts: Vec<usize> = (0..3).map(|c| preds.iter().filter(|&&p| p == c).count()).collect();
        for c in 0..3 {
            assert_eq!(m.column(c).sum(), pred_counts[c]);
        }
        // accuracy recomputable from the matrix
        let diag: usize = (0..3).map(|i| m[[i, i]]).sum();
        assert!((diag as f64 / 7.0 - accuracy(&preds, &labels)).abs() < 1e-15);
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        use rand::Rng;
        let mut rng = crate::rng::stream(13, "auroc-mono", &[]);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2usize)).collect();
        let scores = Array2::from_shape_fn((n, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let a1 = auroc_macro_ovr(scores.view(), &labels).unwrap();
        let transformed = scores.mapv(|v| (3.0 * v).tanh() * 10.0 + 5.0);
        let a2 = auroc_macro_ovr(transformed.view(), &labels).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
    }

    #[test]
    fn conditions_do_not_mutate_input() {
        let b = Batch {
            ids: vec!["a".into()],
            text: ndarray::Array3::from_elem((1, 4, 3), 1.0),
            audio: ndarray::Array3::from_elem((1, 4, 2), 1.0),
            video: ndarray::Array3::from_elem((1, 4, 2), 1.0),
            labels: vec![0],
        };
        let before = b.clone();
        let mut rng = crate::rng::stream(5, "robustness", &[0, 0]);
        let _ = apply_condition(&b, RobustnessCondition::MissingText, &mut rng);
        let _ = apply_condition(&b, RobustnessCondition::Noise(1.0), &mut rng);
        let _ = apply_condition(&b, RobustnessCondition::FrameMask(0.5), &mut rng);
        assert_eq!(b.text, before.text);
        assert_eq!(b.audio, before.audio);
        assert_eq!(b.video, before.video);
    }

    #[test]
    fn zero_noise_condition_equals_clean() {
        let b = Batch {
            ids: vec!["a".into()],
            text: ndarray::Array3::from_elem((1, 4, 3), 0.7),
            audio: ndarray::Array3::from_elem((1, 4, 2), -0.2),
            video: ndarray::Array3::from_elem((1, 4, 2), 0.1),
            labels: vec![0],
        };
        let mut rng = crate::rng::stream(5, "robustness", &[0, 0]);
        let noisy = apply_condition(&b, RobustnessCondition::Noise(0.0), &mut rng);
        assert_eq!(noisy.audio, b.audio);
        assert_eq!(noisy.video, b.video);
    }

    #[test]
    fn efficiency_counts_are_reported_verbatim() {
        let s = efficiency_stats(100, 60, || {
            std::hint::black_box(1 + 1);
        });
        assert_eq!(s.total_params, 100);
        assert_eq!(s.trainable_params, 60);
        assert!(s.mean_latency_ms >= 0.0);
    }
}
