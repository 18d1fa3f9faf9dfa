//! Macro/Micro-F1 classification metrics.

use serde::{Deserialize, Serialize};

/// Per-class precision/recall/F1, with `absent` flagging classes that appear
/// in neither predictions nor labels (their F1 is defined as 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn from_counts(tp: &[usize], fp: &[usize], fn_: &[usize]) -> Metrics {
    let classes = tp.len();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let precision = safe_div(tp[c] as f64, (tp[c] + fp[c]) as f64);
        let recall = safe_div(tp[c] as f64, (tp[c] + fn_[c]) as f64);
        let f1 = safe_div(2.0 * precision * recall, precision + recall);
        per_class.push(ClassScore {
            precision,
            recall,
            f1,
            support: tp[c] + fn_[c],
            absent: tp[c] + fp[c] + fn_[c] == 0,
        });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes.max(1) as f64;
    let tp_total: usize = tp.iter().sum();
    let fp_total: usize = fp.iter().sum();
    let fn_total: usize = fn_.iter().sum();
    let precision = safe_div(tp_total as f64, (tp_total + fp_total) as f64);
    let recall = safe_div(tp_total as f64, (tp_total + fn_total) as f64);
    let micro_f1 = safe_div(2.0 * precision * recall, precision + recall);
    Metrics { macro_f1, micro_f1, per_class }
}

/// Metrics for single-label predictions (one class id per node).
pub fn single_label(predicted: &[usize], truth: &[usize], classes: usize) -> Metrics {
    assert_eq!(predicted.len(), truth.len());
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    from_counts(&tp, &fp, &fn_)
}

/// Metrics for multi-label predictions (per-class indicator per node).
pub fn multi_label(predicted: &[Vec<bool>], truth: &[Vec<bool>], classes: usize) -> Metrics {
    assert_eq!(predicted.len(), truth.len());
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (p, t) in predicted.iter().zip(truth) {
        for c in 0..classes {
            match (p[c], t[c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    from_counts(&tp, &fp, &fn_)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let m = single_label(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.micro_f1, 1.0);
    }

    #[test]
    fn complement_on_binary_labels_scores_zero() {
        let truth = [0, 1, 0, 1, 1];
        let flipped: Vec<usize> = truth.iter().map(|&t| 1 - t).collect();
        let m = single_label(&flipped, &truth, 2);
        assert_eq!(m.macro_f1, 0.0);
        assert_eq!(m.micro_f1, 0.0);
    }

    #[test]
    fn six_node_confusion_fixture_matches_hand_counts() {
        // Classes: 0, 1, 2. Confusion by hand:
        //   class 0: tp=1 fp=1 fn=1 -> p=0.5 r=0.5 f1=0.5
        //   class 1: tp=2 fp=1 fn=0 -> p=2/3 r=1   f1=0.8
        //   class 2: tp=1 fp=0 fn=1 -> p=1   r=0.5 f1=2/3
        let pred = [0, 1, 1, 0, 1, 2];
        let truth = [0, 1, 1, 2, 0, 2];
        let m = single_label(&pred, &truth, 3);
        assert!((m.per_class[0].f1 - 0.5).abs() < 1e-12);
        assert!((m.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((m.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_f1 - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        // Single-label micro-F1 equals accuracy.
        assert!((m.micro_f1 - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_flagged_with_zero_f1() {
        let m = single_label(&[0, 0], &[0, 0], 3);
        assert!(m.per_class[1].absent && m.per_class[2].absent);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multi_label_pools_counts() {
        let pred = vec![vec![true, false], vec![true, true]];
        let truth = vec![vec![true, true], vec![false, true]];
        // class 0: tp=1 fp=1 fn=0; class 1: tp=1 fp=0 fn=1.
        let m = multi_label(&pred, &truth, 2);
        let p0 = 0.5;
        let r0 = 1.0;
        let f0 = 2.0 * p0 * r0 / (p0 + r0);
        assert!((m.per_class[0].f1 - f0).abs() < 1e-12);
        // Micro: tp=2 fp=1 fn=1 -> p=2/3 r=2/3 f1=2/3.
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }
}
