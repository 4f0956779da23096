//! Soft-voting fusion: normalized weighted averaging of component
//! probabilities, prediction, and the pairwise weight sweep.

use std::path::Path;

use thiserror::Error;

use crate::nn::{argmax_rows, Model, NnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("bad ensemble input: {0}")]
    Input(String),
    #[error("component {name}: {source}")]
    Component {
        name: String,
        #[source]
        source: NnError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that maps a `[B, 3, S, S]` batch to per-row class probabilities.
pub trait ProbClassifier<F: Scalar> {
    fn num_classes(&self) -> usize;
    fn predict_probs(&self, batch: &Tensor<F>) -> Result<Tensor<F>, NnError>;
    /// Identity used in error messages and reports.
    fn label(&self) -> String;
}

impl<F: Scalar> ProbClassifier<F> for Model<F> {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn predict_probs(&self, batch: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        // bound memory: the tape retains every intermediate, so large
        // batches are evaluated in slices
        const CHUNK: usize = 64;
        let s = batch.shape();
        if s.len() != 4 {
            return Err(NnError::Input(format!("expected rank-4 batch, got {s:?}")));
        }
        let (b, row) = (s[0], s[1] * s[2] * s[3]);
        if b <= CHUNK {
            return self.forward(batch);
        }
        let mut out = Vec::with_capacity(b * Model::num_classes(self));
        for start in (0..b).step_by(CHUNK) {
            let len = CHUNK.min(b - start);
            let part = Tensor::new(
                vec![len, s[1], s[2], s[3]],
                batch.data()[start * row..(start + len) * row].to_vec(),
            )?;
            out.extend_from_slice(self.forward(&part)?.data());
        }
        Ok(Tensor::new(vec![b, Model::num_classes(self)], out)?)
    }

    fn label(&self) -> String {
        self.kind().to_string()
    }
}

/// Ordered components with strictly positive weights. Weights need not sum
/// to 1; fusion normalizes them first.
pub struct EnsembleSpec<'a, F: Scalar> {
    components: Vec<(&'a dyn ProbClassifier<F>, f64)>,
}

impl<'a, F: Scalar> EnsembleSpec<'a, F> {
    pub fn new(components: Vec<(&'a dyn ProbClassifier<F>, f64)>) -> Result<Self, EnsembleError> {
        if components.is_empty() {
            return Err(EnsembleError::Input("ensemble needs >= 1 component".into()));
        }
        for (i, (_, w)) in components.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return Err(EnsembleError::Input(format!(
                    "component {i} weight {w} must be positive and finite"
                )));
            }
        }
        let classes = components[0].0.num_classes();
        if components.iter().any(|(m, _)| m.num_classes() != classes) {
            return Err(EnsembleError::Input(
                "components disagree on class count".into(),
            ));
        }
        Ok(EnsembleSpec { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_classes(&self) -> usize {
        self.components[0].0.num_classes()
    }
}

impl<F: Scalar> ProbClassifier<F> for EnsembleSpec<'_, F> {
    fn num_classes(&self) -> usize {
        EnsembleSpec::num_classes(self)
    }

    fn predict_probs(&self, batch: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let (_, probs) = ensemble_predict(self, batch)
            .map_err(|e| NnError::Input(e.to_string()))?;
        Ok(probs)
    }

    fn label(&self) -> String {
        let parts: Vec<String> = self
            .components
            .iter()
            .map(|(m, _)| m.label())
            .collect();
        format!("ensemble[{}]", parts.join("+"))
    }
}

const PROB_SUM_TOL: f64 = 1e-6;

fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if weights.is_empty() {
        return Err(EnsembleError::Input("no weights".into()));
    }
    for &w in weights {
        if !(w.is_finite() && w > 0.0) {
            return Err(EnsembleError::Input(format!(
                "weight {w} must be positive and finite"
            )));
        }
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

fn check_prob_row<F: Scalar>(row: &[F], who: &str) -> Result<(), EnsembleError> {
    let sum: f64 = row.iter().map(|&p| Scalar::to_f64(p)).sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(EnsembleError::Input(format!(
            "{who} is not a probability vector (sums to {sum})"
        )));
    }
    Ok(())
}

/// Eq.-style fusion of one row: normalize the weights, then accumulate
/// `sum_i w_i * p_i` component-by-component per class. Normalizing first
/// makes weight rescaling by powers of two bit-exact.
pub fn weighted_average<F: Scalar>(
    probs: &[&[F]],
    weights: &[f64],
) -> Result<Vec<F>, EnsembleError> {
    if probs.len() != weights.len() {
        return Err(EnsembleError::Input(format!(
            "{} probability vectors vs {} weights",
            probs.len(),
            weights.len()
        )));
    }
    let wn = normalized_weights(weights)?;
    let n = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        if p.len() != n {
            return Err(EnsembleError::Input(format!(
                "component {i} has {} classes, expected {n}",
                p.len()
            )));
        }
        check_prob_row(p, &format!("component {i} output"))?;
    }
    let mut out = vec![F::zero(); n];
    for (p, &w) in probs.iter().zip(&wn) {
        let wf = F::from_f64(w);
        for (o, &v) in out.iter_mut().zip(*p) {
            *o += wf * v;
        }
    }
    Ok(out)
}

/// Run every component in eval mode, fuse rowwise, and take the argmax.
/// Ties break toward the lowest class index.
pub fn ensemble_predict<F: Scalar>(
    spec: &EnsembleSpec<'_, F>,
    batch: &Tensor<F>,
) -> Result<(Vec<usize>, Tensor<F>), EnsembleError> {
    let b = match batch.shape() {
        s if s.len() == 4 => s[0],
        s => {
            return Err(EnsembleError::Input(format!(
                "expected rank-4 batch, got {s:?}"
            )))
        }
    };
    let classes = spec.num_classes();
    let weights: Vec<f64> = spec.components.iter().map(|(_, w)| *w).collect();
    let wn = normalized_weights(&weights)?;
    let mut outputs = Vec::with_capacity(spec.components.len());
    for (m, _) in &spec.components {
        let probs = m
            .predict_probs(batch)
            .map_err(|source| EnsembleError::Component {
                name: m.label(),
                source,
            })?;
        if probs.shape() != [b, classes] {
            return Err(EnsembleError::Component {
                name: m.label(),
                source: NnError::Input(format!(
                    "produced {:?}, expected [{b}, {classes}]",
                    probs.shape()
                )),
            });
        }
        for (r, row) in probs.data().chunks_exact(classes).enumerate() {
            check_prob_row(row, &format!("{} row {r}", m.label()))?;
        }
        outputs.push(probs);
    }
    // same accumulation order as weighted_average: per element, components
    // in spec order with pre-normalized weights
    let mut fused = vec![F::zero(); b * classes];
    for (probs, &w) in outputs.iter().zip(&wn) {
        let wf = F::from_f64(w);
        for (o, &v) in fused.iter_mut().zip(probs.data()) {
            *o += wf * v;
        }
    }
    let fused = Tensor::new(vec![b, classes], fused).map_err(|e| EnsembleError::Input(e.to_string()))?;
    Ok((argmax_rows(&fused), fused))
}

/// One grid point of the pairwise sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub w_a: f64,
    pub w_b: f64,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the best row: highest OA, ties broken toward the pair
    /// closest to (0.5, 0.5), then toward larger `w_a`.
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    /// CSV with header `w_cnn,w_vit,overall_accuracy`, 9 data rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w_cnn,w_vit,overall_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.1},{:.1},{:.6}\n",
                r.w_a, r.w_b, r.overall_accuracy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EnsembleError> {
        crate::fsutil::write_atomic(path, self.to_csv().as_bytes()).map_err(|source| {
            EnsembleError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }
}

/// Evaluate the nine weightings (0.1, 0.9) … (0.9, 0.1) of two components
/// on one labelled evaluation batch. Component probabilities are computed
/// once; only the fusion is repeated.
pub fn weight_sweep<F: Scalar>(
    model_a: &dyn ProbClassifier<F>,
    model_b: &dyn ProbClassifier<F>,
    batch: &Tensor<F>,
    labels: &[usize],
) -> Result<SweepTable, EnsembleError> {
    if labels.is_empty() {
        return Err(EnsembleError::Input("empty evaluation set".into()));
    }
    let b = batch.shape()[0];
    if b != labels.len() {
        return Err(EnsembleError::Input(format!(
            "{b} batch rows vs {} labels",
            labels.len()
        )));
    }
    let classes = model_a.num_classes();
    if model_b.num_classes() != classes {
        return Err(EnsembleError::Input(
            "components disagree on class count".into(),
        ));
    }
    let pa = model_a
        .predict_probs(batch)
        .map_err(|source| EnsembleError::Component {
            name: model_a.label(),
            source,
        })?;
    let pb = model_b
        .predict_probs(batch)
        .map_err(|source| EnsembleError::Component {
            name: model_b.label(),
            source,
        })?;

    let mut rows = Vec::with_capacity(9);
    for i in 1..=9u32 {
        let w_a = i as f64 / 10.0;
        let w_b = 1.0 - w_a;
        let wn = normalized_weights(&[w_a, w_b])?;
        let mut hits = 0usize;
        for r in 0..b {
            let ra = &pa.data()[r * classes..(r + 1) * classes];
            let rb = &pb.data()[r * classes..(r + 1) * classes];
            let wa = F::from_f64(wn[0]);
            let wb = F::from_f64(wn[1]);
            let mut best = 0usize;
            let mut best_v = F::neg_infinity();
            for j in 0..classes {
                let v = wa * ra[j] + wb * rb[j];
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == labels[r] {
                hits += 1;
            }
        }
        rows.push(SweepRow {
            w_a,
            w_b,
            overall_accuracy: hits as f64 / b as f64,
        });
    }
    let mut best = 0usize;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let cur = &rows[best];
        let better = r.overall_accuracy > cur.overall_accuracy
            || (r.overall_accuracy == cur.overall_accuracy
                && ((r.w_a - 0.5).abs() < (cur.w_a - 0.5).abs()
                    || ((r.w_a - 0.5).abs() == (cur.w_a - 0.5).abs() && r.w_a > cur.w_a)));
        if better {
            best = i;
        }
    }
    Ok(SweepTable { rows, best })
}
