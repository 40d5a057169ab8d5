//! Classification metrics, ROC curves and report tables.
//!
//! The headline binary metrics treat COVID-19 as the positive class and use a
//! 0.5 threshold on the positive-class score. AUC is the trapezoidal area
//! under the ROC curve, with tied scores grouped into a single threshold step.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ROC needs at least one positive and one negative example")]
    SingleClassInput,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("no examples to evaluate")]
    EmptySplit,
    #[error("no {0} examples in the evaluated set")]
    EmptySubgroup(Label),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point after the origin.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// Two-column `fpr tpr` text with a comment header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# fpr tpr\n");
        for (fpr, tpr) in &self.points {
            let _ = writeln!(out, "{fpr:.6} {tpr:.6}");
        }
        out
    }
}

/// Sweeps every distinct score as a threshold (score >= t is positive).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: positive.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(*bad));
    }
    let n_pos = positive.iter().filter(|p| **p).count() as u128;
    let n_neg = positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u128, 0u128);
    // twice the area, in units of one (positive, negative) pair
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - prev_fp) * (tp + prev_tp);
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        thresholds.push(threshold);
    }
    let auc = area2 as f64 / (2 * n_pos * n_neg) as f64;
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

/// Parses `score label` lines (whitespace or comma separated, label 0/1 or
/// true/false). Blank lines and `#` comments are ignored.
pub fn parse_scores(text: &str) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let err = |message: String| MetricsError::Parse { line: i + 1, message };
        let [score, label] = fields.as_slice() else {
            return Err(err(format!("expected `score label`, got {line:?}")));
        };
        let score: f64 = score.parse().map_err(|e| err(format!("score {score:?}: {e}")))?;
        let label = match label.to_ascii_lowercase().as_str() {
            "1" | "true" | "pos" | "positive" => true,
            "0" | "false" | "neg" | "negative" => false,
            other => return Err(err(format!("label {other:?} is not 0/1"))),
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Three-class CT head; COVID-19 vs rest for the binary metrics.
    Ct3,
    /// Single-output CXR head.
    CxrBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub image_id: String,
    pub true_label: Label,
    /// Positive-class (COVID-19) score in [0, 1].
    pub score: f64,
    /// Per-class probabilities in [`Label::index`] order for the CT head.
    pub probabilities: Vec<f64>,
    /// Argmax class for the CT head; `None` for binary models.
    pub predicted_label: Option<Label>,
}

impl ScoredExample {
    pub fn predicted_positive(&self) -> bool {
        self.score >= DECISION_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl BinaryConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// TP / (TP + FP), or 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// TP / (TP + FN), or 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRate {
    pub label: Label,
    pub members: usize,
    pub predicted_positive: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n: usize,
    pub threshold: f64,
    pub confusion: BinaryConfusion,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub roc: RocCurve,
    /// Rows are true classes, columns predicted classes ([`Label::index`]).
    pub confusion3: Option<[[usize; 3]; 3]>,
    pub macro_avg: Option<MacroMetrics>,
    pub subgroups: Vec<SubgroupRate>,
}

/// Builds the full report from scored examples.
pub fn build_report(examples: &[ScoredExample], mode: EvalMode) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let mut confusion = BinaryConfusion::default();
    for ex in examples {
        match (ex.true_label.is_covid(), ex.predicted_positive()) {
            (true, true) => confusion.tp += 1,
            (false, true) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
            (true, false) => confusion.fn_ += 1,
        }
    }
    let scores: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let positive: Vec<bool> = examples.iter().map(|e| e.true_label.is_covid()).collect();
    let roc = roc_auc(&scores, &positive)?;

    let (confusion3, macro_avg) = if mode == EvalMode::Ct3 {
        let mut m = [[0usize; 3]; 3];
        for ex in examples {
            if let Some(pred) = ex.predicted_label {
                m[ex.true_label.index()][pred.index()] += 1;
            }
        }
        let mut sums = (0.0, 0.0, 0.0);
        for k in 0..3 {
            let tp = m[k][k];
            let predicted: usize = (0..3).map(|r| m[r][k]).sum();
            let actual: usize = m[k].iter().sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            sums.0 += p;
            sums.1 += r;
            sums.2 += f_measure(p, r);
        }
        let macro_avg = MacroMetrics {
            precision: sums.0 / 3.0,
            recall: sums.1 / 3.0,
            f_measure: sums.2 / 3.0,
        };
        (Some(m), Some(macro_avg))
    } else {
        (None, None)
    };

    let subgroups = false_positive_analysis(examples, Label::OtherPneumonia)
        .map(|s| vec![s])
        .unwrap_or_default();

    let precision = confusion.precision();
    let recall = confusion.recall();
    Ok(EvalReport {
        mode,
        n: examples.len(),
        threshold: DECISION_THRESHOLD,
        confusion,
        precision,
        recall,
        f_measure: f_measure(precision, recall),
        accuracy: confusion.accuracy(),
        auc: roc.auc,
        roc,
        confusion3,
        macro_avg,
        subgroups,
    })
}

/// Fraction of `subgroup` members that were predicted COVID-positive.
pub fn false_positive_analysis(examples: &[ScoredExample], subgroup: Label) -> Result<SubgroupRate> {
    let members: Vec<&ScoredExample> = examples.iter().filter(|e| e.true_label == subgroup).collect();
    if members.is_empty() {
        return Err(MetricsError::EmptySubgroup(subgroup));
    }
    let predicted_positive = members.iter().filter(|e| e.predicted_positive()).count();
    Ok(SubgroupRate {
        label: subgroup,
        members: members.len(),
        predicted_positive,
        rate: predicted_positive as f64 / members.len() as f64,
    })
}

impl EvalReport {
    pub const TABLE_COLUMNS: [&'static str; 5] =
        ["Precision", "Recall", "F-measure", "AUC", "Accuracy"];

    /// Tab-separated results table, three decimals, one row for `method`.
    pub fn to_table(&self, method: &str) -> String {
        let mut out = format!("Method\t{}\n", Self::TABLE_COLUMNS.join("\t"));
        let _ = writeln!(
            out,
            "{method}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            self.precision, self.recall, self.f_measure, self.auc, self.accuracy
        );
        out
    }

    /// Human-readable summary: the table plus confusion counts and subgroups.
    pub fn to_text(&self, method: &str) -> String {
        let mut out = self.to_table(method);
        let c = &self.confusion;
        let _ = writeln!(
            out,
            "\nn={} threshold={} TP={} FP={} TN={} FN={}",
            self.n, self.threshold, c.tp, c.fp, c.tn, c.fn_
        );
        if let Some(m) = &self.macro_avg {
            let _ = writeln!(
                out,
                "macro precision={:.3} recall={:.3} f-measure={:.3}",
                m.precision, m.recall, m.f_measure
            );
        }
        if let Some(m) = &self.confusion3 {
            out.push_str("\ntrue\\pred\tcovid19\tother_pneumonia\tnormal\n");
            for label in Label::ALL {
                let row = m[label.index()];
                let _ = writeln!(out, "{label}\t{}\t{}\t{}", row[0], row[1], row[2]);
            }
        }
        for s in &self.subgroups {
            let _ = writeln!(
                out,
                "\n{} predicted covid19: {}/{} (rate {:.3})",
                s.label, s.predicted_positive, s.members, s.rate
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: usize, label: Label, score: f64) -> ScoredExample {
        ScoredExample {
            image_id: id.to_string(),
            true_label: label,
            score,
            probabilities: vec![score],
            predicted_label: None,
        }
    }

    #[test]
    fn f_measure_reference_values() {
        assert!((f_measure(0.720, 0.858) - 0.783).abs() <= 0.0005);
        assert!((f_measure(0.987, 0.982) - 0.984).abs() <= 0.0005);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_and_tied_scores() {
        let roc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(roc.auc, 1.0);
        let roc = roc_auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn single_class_rejected() {
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClassInput));
        assert!(matches!(
            roc_auc(&[f64::NAN, 0.2], &[true, false]),
            Err(MetricsError::NonFiniteScore(_))
        ));
    }

    #[test]
    fn hand_computed_auc_with_ties() {
        // pos: 0.8, 0.4 ; neg: 0.4, 0.1 -> pairs: (0.8>0.4),(0.8>0.1),(0.4=0.4),(0.4>0.1) = 3.5/4
        let roc = roc_auc(&[0.8, 0.4, 0.4, 0.1], &[true, true, false, false]).unwrap();
        assert!((roc.auc - 0.875).abs() < 1e-15);
        assert_eq!(roc.points, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn perfect_report() {
        let examples: Vec<_> = (0..10)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Covid19 } else { Label::Normal };
                ex(i, label, if label.is_covid() { 1.0 } else { 0.0 })
            })
            .collect();
        let r = build_report(&examples, EvalMode::CxrBinary).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy, r.auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_scorer_on_balanced_set() {
        let examples: Vec<_> = (0..20)
            .map(|i| ex(i, if i < 10 { Label::Covid19 } else { Label::Normal }, 0.5))
            .collect();
        let r = build_report(&examples, EvalMode::CxrBinary).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn subgroup_false_positive_rate() {
        let mut examples: Vec<_> = (0..100)
            .map(|i| ex(i, Label::OtherPneumonia, if i < 10 { 0.9 } else { 0.1 }))
            .collect();
        let s = false_positive_analysis(&examples, Label::OtherPneumonia).unwrap();
        assert_eq!((s.members, s.predicted_positive), (100, 10));
        assert!((s.rate - 0.10).abs() < 1e-15);
        for e in &mut examples {
            e.score = 0.0;
        }
        assert_eq!(false_positive_analysis(&examples, Label::OtherPneumonia).unwrap().rate, 0.0);
        assert_eq!(
            false_positive_analysis(&examples, Label::Covid19),
            Err(MetricsError::EmptySubgroup(Label::Covid19))
        );
    }

    #[test]
    fn table_column_order() {
        let examples = vec![ex(0, Label::Covid19, 0.9), ex(1, Label::Normal, 0.2)];
        let r = build_report(&examples, EvalMode::CxrBinary).unwrap();
        let table = r.to_table("model");
        let header = table.lines().next().unwrap();
        assert_eq!(header, "Method\tPrecision\tRecall\tF-measure\tAUC\tAccuracy");
    }

    #[test]
    fn ct3_confusion_matrix() {
        let mk = |label: Label, pred: Label, score: f64| ScoredExample {
            image_id: String::new(),
            true_label: label,
            score,
            probabilities: vec![],
            predicted_label: Some(pred),
        };
        let examples = vec![
            mk(Label::Covid19, Label::Covid19, 0.9),
            mk(Label::Normal, Label::Normal, 0.1),
            mk(Label::OtherPneumonia, Label::Covid19, 0.6),
        ];
        let r = build_report(&examples, EvalMode::Ct3).unwrap();
        let m = r.confusion3.unwrap();
        assert_eq!(m[0][0], 1);
        assert_eq!(m[1][0], 1);
        assert_eq!(m[2][2], 1);
        assert_eq!(r.subgroups[0].rate, 1.0);
        assert_eq!(r.confusion.fp, 1);
    }

    #[test]
    fn score_file_parsing() {
        let (s, l) = parse_scores("# header\n0.9 1\n0.1,0\n\n0.5 true\n").unwrap();
        assert_eq!(s, vec![0.9, 0.1, 0.5]);
        assert_eq!(l, vec![true, false, true]);
        assert!(parse_scores("0.4 2").is_err());
        assert!(parse_scores("0.4").is_err());
    }
}
