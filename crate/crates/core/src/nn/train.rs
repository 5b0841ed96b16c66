use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::mlp::MlpClassifier;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 256, local_epochs: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient of a learned prior over the trainable coordinates of a model.
pub trait PriorGradient {
    fn grad_trainable(&self, theta_trainable: &[f64]) -> Result<Vec<f64>>;
}

/// Extra terms added to the data-fit gradient during local training.
pub enum LocalObjective<'a> {
    /// Mean binary cross-entropy only.
    Plain,
    /// Adds `mu * (theta - anchor)` on trainable coordinates.
    Proximal { anchor: &'a [f64], mu: f64 },
    /// Adds `scale * dR/dtheta` for a learned prior `R`.
    Map { prior: &'a dyn PriorGradient, scale: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub skipped_batches: usize,
    pub last_batch_loss: f64,
}

pub(crate) fn gather_rows(x: &ArrayView2<f32>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| f64::from(x[[rows[i], j]]))
}

/// Adds the objective's extra gradient terms into `grad` (full-layout).
pub(crate) fn add_objective_gradient(
    model: &MlpClassifier,
    objective: &LocalObjective<'_>,
    grad: &mut [f64],
) -> Result<()> {
    match objective {
        LocalObjective::Plain => {}
        LocalObjective::Proximal { anchor, mu } => {
            if anchor.len() != model.params().len() {
                return Err(Error::Layout("proximal anchor does not match the model layout".into()));
            }
            for r in model.layout().trainable_ranges() {
                for i in r {
                    grad[i] += mu * (model.params()[i] - anchor[i]);
                }
            }
        }
        LocalObjective::Map { prior, scale } => {
            let theta = model.layout().gather_trainable(model.params());
            let mut g = prior.grad_trainable(&theta)?;
            for v in &mut g {
                *v *= scale;
            }
            model.layout().scatter_add_trainable(&g, grad);
        }
    }
    Ok(())
}

/// Runs `epochs` passes of shuffled minibatch Adam over `(x, labels)`.
///
/// A trailing batch with fewer than two rows cannot be batch-normalised and is
/// skipped.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    model: &mut MlpClassifier,
    x: ArrayView2<f32>,
    labels: &[u8],
    cfg: &TrainConfig,
    epochs: usize,
    objective: &LocalObjective<'_>,
    optimizer: &mut AdamState,
    rng: &mut dyn RngCore,
) -> Result<EpochStats> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", x.nrows(), labels.len())));
    }
    let mut stats = EpochStats::default();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                log::debug!("skipping trailing batch of {} row", chunk.len());
                stats.skipped_batches += 1;
                continue;
            }
            let batch = gather_rows(&x, chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let probs = model.forward_train(batch.view(), rng)?;
            let mut grad = model.backward(&batch_labels)?.into_values();
            add_objective_gradient(model, objective, &mut grad)?;
            let lr = cfg.learning_rate;
            adam_step(model.params_mut(), &grad, optimizer, lr)?;
            stats.steps += 1;
            stats.last_batch_loss = super::bce_loss(probs.as_slice().expect("contiguous"), &batch_labels)?.0;
        }
    }
    Ok(stats)
}

/// Eval-mode probabilities for every row, computed in chunks.
pub fn predict_rows(model: &MlpClassifier, x: ArrayView2<f32>) -> Result<Vec<f64>> {
    const CHUNK: usize = 2048;
    let mut out = Vec::with_capacity(x.nrows());
    let rows: Vec<usize> = (0..x.nrows()).collect();
    for chunk in rows.chunks(CHUNK) {
        let batch = gather_rows(&x, chunk);
        out.extend(model.predict(batch.view())?);
    }
    Ok(out)
}
