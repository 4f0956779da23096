//! Mini-batch training loop shared by both model families.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Model, NnError};
use crate::data::{augment_batch, AugmentPolicy, ChipDataset};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// A dataset together with the subset of rows visible to one consumer.
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    pub dataset: &'a ChipDataset,
    pub indices: &'a [usize],
}

impl<'a> DataView<'a> {
    pub fn new(dataset: &'a ChipDataset, indices: &'a [usize]) -> Self {
        DataView { dataset, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Input(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(NnError::Input(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Accuracy on the validation view, or NaN when none was supplied.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub duration: Duration,
}

impl TrainHistory {
    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }
}

/// Train in place: `epochs` full passes of shuffled mini-batches, with the
/// augmentation policy applied to training batches only. Validation (when
/// given) runs un-augmented in eval mode after each epoch. The model is left
/// as the final-epoch snapshot.
pub fn train_model<F: Scalar>(
    model: &mut Model<F>,
    train: DataView,
    val: Option<DataView>,
    params: &TrainParams,
    augment: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<TrainHistory, NnError> {
    params.validate()?;
    augment
        .validate()
        .map_err(|e| NnError::Input(e.to_string()))?;
    if train.is_empty() {
        return Err(NnError::Input("training view is empty".into()));
    }
    for view in std::iter::once(&train).chain(val.as_ref()) {
        if let Some(&bad) = view.indices.iter().find(|&&i| i >= view.dataset.len()) {
            return Err(NnError::Input(format!(
                "index {bad} out of range for dataset of {}",
                view.dataset.len()
            )));
        }
    }
    let classes = model.num_classes();
    if train.dataset.num_classes() > classes {
        return Err(NnError::Input(format!(
            "dataset has {} classes but the model head has {classes}",
            train.dataset.num_classes()
        )));
    }

    let start = Instant::now();
    let cfg = AdamConfig::new(params.learning_rate, model.config().weight_decay());
    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.numel()).collect();
    let decay: Vec<bool> = model.params().iter().map(|p| p.decay).collect();
    let mut adam = AdamState::new(cfg, &sizes, &decay)?;

    let mut order: Vec<usize> = train.indices.to_vec();
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(params.batch_size) {
            let mut bytes = Vec::with_capacity(chunk.len() * crate::data::CHIP_BYTES);
            for &i in chunk {
                bytes.extend_from_slice(train.dataset.chip(i));
            }
            let bytes = augment_batch(&bytes, augment, rng)
                .map_err(|e| NnError::Input(e.to_string()))?;
            let batch = crate::data::bytes_to_batch::<F>(&bytes, chunk.len());
            let labels = train.dataset.gather_labels(chunk);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Mode::Train);
            let vars = bound.vars().to_vec();
            let logits = model.logits(&mut tape, &bound, &batch, Mode::Train, rng, None)?;
            drop(bound);
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += Scalar::to_f64(tape.value(loss).item()) * chunk.len() as f64;
            correct += count_argmax_hits(tape.value(logits), &labels);
            tape.backward(loss)?;

            let grads = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .ok_or_else(|| NnError::Input("parameter missing gradient".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            adam.step(
                model
                    .params_mut()
                    .iter_mut()
                    .map(|p| p.tensor.data_mut())
                    .zip(grads),
            )?;
        }
        let val_accuracy = match &val {
            Some(v) if !v.is_empty() => evaluate_accuracy(model, *v, params.batch_size)?,
            _ => f64::NAN,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    Ok(TrainHistory {
        epochs: history,
        duration: start.elapsed(),
    })
}

/// Eval-mode class probabilities for a view, one row per index.
pub fn predict_probs<F: Scalar>(
    model: &Model<F>,
    view: DataView,
    batch_size: usize,
) -> Result<Tensor<F>, NnError> {
    let classes = model.num_classes();
    let mut out = Vec::with_capacity(view.len() * classes);
    for chunk in view.indices.chunks(batch_size.max(1)) {
        let batch = view.dataset.batch::<F>(chunk);
        let probs = model.forward(&batch)?;
        out.extend_from_slice(probs.data());
    }
    Ok(Tensor::new(vec![view.len(), classes], out)?)
}

/// Argmax class per row; ties go to the lowest class index.
pub fn argmax_rows<F: Scalar>(probs: &Tensor<F>) -> Vec<usize> {
    let (_, cols) = probs.as_rows();
    probs
        .data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of view rows whose argmax prediction matches the label.
pub fn evaluate_accuracy<F: Scalar>(
    model: &Model<F>,
    view: DataView,
    batch_size: usize,
) -> Result<f64, NnError> {
    if view.is_empty() {
        return Err(NnError::Input("evaluation view is empty".into()));
    }
    let probs = predict_probs(model, view, batch_size)?;
    let labels = view.dataset.gather_labels(view.indices);
    let hits = argmax_rows(&probs)
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / view.len() as f64)
}

fn count_argmax_hits<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}
