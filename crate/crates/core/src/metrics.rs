//! Confusion matrices, accuracy and macro precision/recall/F1, and the
//! CSV report surface.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bad metrics input: {0}")]
    Input(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_labels(
        truth: &[usize],
        pred: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::Input(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let n = class_names.len();
        if n == 0 {
            return Err(MetricsError::Input("no classes".into()));
        }
        let mut counts = vec![0u64; n * n];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return Err(MetricsError::Input(format!(
                    "label pair ({t}, {p}) out of range for {n} classes"
                )));
            }
            counts[t * n + p] += 1;
        }
        Ok(ConfusionMatrix {
            counts,
            class_names,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        let n = self.n_classes();
        (0..n).map(|c| self.counts[c * n + c]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        let n = self.n_classes();
        self.counts[truth * n..(truth + 1) * n].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        let n = self.n_classes();
        (0..n).map(|t| self.counts[t * n + pred]).sum()
    }

    /// Accuracy restricted to samples whose true class is in `classes`.
    pub fn subset_accuracy(&self, classes: &[usize]) -> Result<f64, MetricsError> {
        let n = self.n_classes();
        if classes.iter().any(|&c| c >= n) {
            return Err(MetricsError::Input("subset class out of range".into()));
        }
        let total: u64 = classes.iter().map(|&c| self.row_sum(c)).sum();
        if total == 0 {
            return Err(MetricsError::Undefined(
                "no samples in the class subset".into(),
            ));
        }
        let hit: u64 = classes.iter().map(|&c| self.count(c, c)).sum();
        Ok(hit as f64 / total as f64)
    }

    /// CSV with a header row/column of class names; corner cell empty.
    pub fn to_csv(&self) -> String {
        let n = self.n_classes();
        let mut out = String::new();
        out.push(',');
        out.push_str(&self.class_names.join(","));
        out.push('\n');
        for t in 0..n {
            out.push_str(&self.class_names[t]);
            for p in 0..n {
                out.push(',');
                out.push_str(&self.count(t, p).to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parse the `to_csv` format back; used for round-trip verification.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| MetricsError::Input("empty confusion CSV".into()))?;
        let class_names: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.to_string())
            .collect();
        let n = class_names.len();
        if n == 0 {
            return Err(MetricsError::Input("confusion CSV has no classes".into()));
        }
        let mut counts = vec![0u64; n * n];
        for (t, line) in lines.enumerate() {
            if t >= n {
                return Err(MetricsError::Input("too many confusion rows".into()));
            }
            let mut fields = line.split(',');
            let name = fields
                .next()
                .ok_or_else(|| MetricsError::Input("missing row label".into()))?;
            if name != class_names[t] {
                return Err(MetricsError::Input(format!(
                    "row label {name} does not match header {}",
                    class_names[t]
                )));
            }
            for p in 0..n {
                let field = fields.next().ok_or_else(|| {
                    MetricsError::Input(format!("row {name} has fewer than {n} cells"))
                })?;
                counts[t * n + p] = field
                    .parse()
                    .map_err(|e| MetricsError::Input(format!("cell ({t},{p}): {e}")))?;
            }
            if fields.next().is_some() {
                return Err(MetricsError::Input(format!("row {name} has extra cells")));
            }
        }
        Ok(ConfusionMatrix {
            counts,
            class_names,
        })
    }
}

/// trace/total.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Undefined(
            "overall accuracy of an empty matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision/recall/F1 with the zero-denominator-is-zero
/// convention, plus their unweighted macro means.
pub fn precision_recall_f1(
    cm: &ConfusionMatrix,
) -> Result<(Vec<ClassMetrics>, MacroMetrics), MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Undefined(
            "precision/recall of an empty matrix".into(),
        ));
    }
    let n = cm.n_classes();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let diag = cm.count(c, c) as f64;
        let col = cm.col_sum(c) as f64;
        let row = cm.row_sum(c) as f64;
        let precision = if col > 0.0 { diag / col } else { 0.0 };
        let recall = if row > 0.0 { diag / row } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let nf = n as f64;
    let macro_metrics = MacroMetrics {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / nf,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / nf,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / nf,
    };
    Ok((per_class, macro_metrics))
}

/// One `metrics.csv` row: a model (or ensemble) evaluated at an increment.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Row label, e.g. `CNN-25` or `ENS-50`.
    pub model: String,
    /// Increment label, e.g. `T1`.
    pub increment: String,
    pub train_fraction_fast: Option<f64>,
    pub train_fraction_slow: Option<f64>,
    pub n_eval: usize,
    pub overall_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub training_total_seconds: f64,
}

pub const METRICS_HEADER: &str = "model,increment,train_fraction_fast,train_fraction_slow,n_eval,oa,macro_precision,macro_recall,macro_f1,training_total_seconds";

fn fraction_field(f: Option<f64>) -> String {
    f.map(|v| format!("{v:.2}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn from_confusion(
        model: impl Into<String>,
        increment: impl Into<String>,
        cm: &ConfusionMatrix,
        train_fraction_fast: Option<f64>,
        train_fraction_slow: Option<f64>,
        training_total_seconds: f64,
    ) -> Result<Self, MetricsError> {
        let (_, macros) = precision_recall_f1(cm)?;
        Ok(MetricsReport {
            model: model.into(),
            increment: increment.into(),
            train_fraction_fast,
            train_fraction_slow,
            n_eval: cm.total() as usize,
            overall_accuracy: overall_accuracy(cm)?,
            macro_precision: macros.precision,
            macro_recall: macros.recall,
            macro_f1: macros.f1,
            training_total_seconds,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.model,
            self.increment,
            fraction_field(self.train_fraction_fast),
            fraction_field(self.train_fraction_slow),
            self.n_eval,
            self.overall_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.training_total_seconds,
        )
    }
}

/// Render the full `metrics.csv` body for an ordered set of rows.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Write `metrics.csv` (all rows, fixed order) and `confusion_<id>.csv`
/// into `dir`. Rewrites are atomic and byte-deterministic.
pub fn emit_report(
    reports: &[MetricsReport],
    confusions: &[(String, ConfusionMatrix)],
    dir: &Path,
) -> Result<(), MetricsError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| MetricsError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics_path = dir.join("metrics.csv");
    crate::fsutil::write_atomic(&metrics_path, metrics_csv(reports).as_bytes())
        .map_err(io_err(&metrics_path))?;
    for (id, cm) in confusions {
        let path = dir.join(format!("confusion_{id}.csv"));
        crate::fsutil::write_atomic(&path, cm.to_csv().as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn direct_count_example() {
        let cm =
            ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 1], names(2)).unwrap();
        assert_eq!(cm.count(0, 0), 2);
        assert_eq!(cm.count(0, 1), 0);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.75);
    }

    #[test]
    fn hand_arithmetic_precision_recall_f1() {
        let cm =
            ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 1], names(2)).unwrap();
        let (per, macros) = precision_recall_f1(&cm).unwrap();
        assert!((per[0].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(per[0].recall, 1.0);
        assert!((per[0].f1 - 0.8).abs() < 1e-12);
        assert_eq!(per[1].precision, 1.0);
        assert_eq!(per[1].recall, 0.5);
        assert!((per[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((macros.f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = [0, 1, 2, 0, 1, 2];
        let cm = ConfusionMatrix::from_labels(&truth, &truth, names(3)).unwrap();
        assert_eq!(overall_accuracy(&cm).unwrap(), 1.0);
        let (per, macros) = precision_recall_f1(&cm).unwrap();
        assert!(per.iter().all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!(macros.f1, 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_two_class() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        let cm = ConfusionMatrix::from_labels(&truth, &pred, names(2)).unwrap();
        assert_eq!(overall_accuracy(&cm).unwrap(), 0.5);
        let (per, macros) = precision_recall_f1(&cm).unwrap();
        assert!((per[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(per[1].f1, 0.0);
        assert!((macros.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_and_column_class_scores_zero() {
        // class 2 never appears in truth or predictions
        let cm = ConfusionMatrix::from_labels(&[0, 1], &[1, 0], names(3)).unwrap();
        let (per, _) = precision_recall_f1(&cm).unwrap();
        assert_eq!(per[2].precision, 0.0);
        assert_eq!(per[2].recall, 0.0);
        assert_eq!(per[2].f1, 0.0);
    }

    #[test]
    fn oa_matches_direct_mean_and_sums_match_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let n = 5;
        let truth: Vec<usize> = (0..500).map(|_| rng.gen_range(0..n)).collect();
        let pred: Vec<usize> = (0..500).map(|_| rng.gen_range(0..n)).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &pred, names(n)).unwrap();
        let direct = truth
            .iter()
            .zip(&pred)
            .filter(|(t, p)| t == p)
            .count() as f64
            / 500.0;
        assert!((overall_accuracy(&cm).unwrap() - direct).abs() <= 1e-12);
        for c in 0..n {
            assert_eq!(
                cm.row_sum(c) as usize,
                truth.iter().filter(|&&t| t == c).count()
            );
            assert_eq!(
                cm.col_sum(c) as usize,
                pred.iter().filter(|&&p| p == c).count()
            );
        }
        assert_eq!(cm.total(), 500);
    }

    #[test]
    fn macro_metrics_are_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let truth: Vec<usize> = (0..300).map(|_| rng.gen_range(0..4)).collect();
        let pred: Vec<usize> = (0..300).map(|_| rng.gen_range(0..4)).collect();
        let perm = [2usize, 0, 3, 1];
        let truth_p: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let pred_p: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let (_, a) =
            precision_recall_f1(&ConfusionMatrix::from_labels(&truth, &pred, names(4)).unwrap())
                .unwrap();
        let (_, b) = precision_recall_f1(
            &ConfusionMatrix::from_labels(&truth_p, &pred_p, names(4)).unwrap(),
        )
        .unwrap();
        assert!((a.precision - b.precision).abs() <= 1e-12);
        assert!((a.recall - b.recall).abs() <= 1e-12);
        assert!((a.f1 - b.f1).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_inputs_and_empty_metrics() {
        assert!(ConfusionMatrix::from_labels(&[0], &[0, 1], names(2)).is_err());
        assert!(ConfusionMatrix::from_labels(&[5], &[0], names(2)).is_err());
        assert!(ConfusionMatrix::from_labels(&[0], &[0], vec![]).is_err());
        let empty = ConfusionMatrix::from_labels(&[], &[], names(2)).unwrap();
        assert!(overall_accuracy(&empty).is_err());
        assert!(precision_recall_f1(&empty).is_err());
    }

    #[test]
    fn subset_accuracy_counts_only_listed_true_classes() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 0, 0];
        let cm = ConfusionMatrix::from_labels(&truth, &pred, names(3)).unwrap();
        assert_eq!(cm.subset_accuracy(&[0, 1]).unwrap(), 0.75);
        assert_eq!(cm.subset_accuracy(&[2]).unwrap(), 0.0);
        assert!(cm.subset_accuracy(&[9]).is_err());
    }

    #[test]
    fn confusion_csv_round_trip_and_header() {
        let cm = ConfusionMatrix::from_labels(
            &[0, 0, 1, 1, 2],
            &[0, 2, 1, 1, 2],
            vec!["alpha".into(), "beta".into(), "gamma".into()],
        )
        .unwrap();
        let csv = cm.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 4); // header + 3 classes
        assert_eq!(lines[0], ",alpha,beta,gamma");
        assert!(lines[1].starts_with("alpha,"));
        let back = ConfusionMatrix::from_csv(&csv).unwrap();
        assert_eq!(back, cm);
    }

    #[test]
    fn metrics_csv_layout_and_determinism() {
        let cm =
            ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 1], names(2)).unwrap();
        let r1 = MetricsReport::from_confusion("CNN-25", "T1", &cm, Some(0.25), None, 7.125)
            .unwrap();
        let r2 =
            MetricsReport::from_confusion("ENS-50", "T2", &cm, Some(0.5), Some(0.5), 12.0)
                .unwrap();
        let body = metrics_csv(&[r1.clone(), r2]);
        let lines: Vec<&str> = body.trim_end().lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[1],
            "CNN-25,T1,0.25,,4,0.750000,0.833333,0.750000,0.733333,7.125"
        );
        assert_eq!(
            lines[2],
            "ENS-50,T2,0.50,0.50,4,0.750000,0.833333,0.750000,0.733333,12.000"
        );

        let dir = tempfile::tempdir().unwrap();
        let rows = [r1];
        let confs = [("CNN-25".to_string(), cm)];
        emit_report(&rows, &confs, dir.path()).unwrap();
        let a = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        emit_report(&rows, &confs, dir.path()).unwrap();
        let b = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
        assert!(dir.path().join("confusion_CNN-25.csv").exists());
    }
}
