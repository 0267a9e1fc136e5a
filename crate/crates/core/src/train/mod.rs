//! Minibatch Adam training, evaluation and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, collect_gradients, AdamConfig, Gradients, OptimizerState};
pub use checkpoint::{Checkpoint, EpochMetrics, MAGIC, VERSION};

use indexmap::IndexMap;

use crate::data::{batches, BatchPlan, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, forward, init_params, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::tensor::cross_entropy;

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub plan: BatchPlan,
    pub adam: AdamConfig,
    /// Seeds parameter initialisation.
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint is after epoch {}", last_good.epoch)]
    NonFinite {
        epoch: usize,
        batch: usize,
        last_good: Box<Checkpoint>,
    },
}

/// Freshly initialised state. `echo` entries are appended to the model keys
/// in the checkpoint's config block unless a model key already covers them.
pub fn initial_checkpoint(
    config: &ModelConfig,
    settings: &TrainSettings,
    echo: &[(String, String)],
) -> Result<Checkpoint> {
    config.validate()?;
    let params = init_params(config, &mut Rng::new(settings.seed));
    let mut entries: IndexMap<String, String> =
        config.to_entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (k, v) in echo {
        entries.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Ok(Checkpoint {
        config: entries,
        optimizer: OptimizerState::new(settings.adam, &params),
        params,
        epoch: 0,
        seed: settings.seed,
        history: Vec::new(),
    })
}

pub fn train(config: &ModelConfig, data: &Dataset, settings: &TrainSettings) -> Result<Checkpoint, TrainError> {
    let start = initial_checkpoint(config, settings, &[])?;
    resume(start, data, settings.epochs, &settings.plan, |_| Ok(()))
}

/// Runs epochs `checkpoint.epoch + 1 ..= epochs`, calling `on_epoch` with
/// the state after each one.
pub fn resume(
    mut checkpoint: Checkpoint,
    data: &Dataset,
    epochs: usize,
    plan: &BatchPlan,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint, TrainError> {
    let config = checkpoint.model_config()?;
    check_split(&config, &data.train, "train")?;
    check_split(&config, &data.test, "test")?;

    while checkpoint.epoch < epochs {
        let epoch = checkpoint.epoch + 1;
        let mut params = checkpoint.params.clone();
        let mut optimizer = checkpoint.optimizer.clone();
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (index, batch) in batches(&data.train, plan, epoch - 1).enumerate() {
            let step = train_step(&config, &params, &batch, &mut optimizer);
            let (value, next) = match step {
                Ok((value, next)) if value.is_finite() => (value, next),
                Ok(_) => return Err(non_finite(epoch, index, checkpoint)),
                Err(e) if e.is_non_finite() => return Err(non_finite(epoch, index, checkpoint)),
                Err(e) => return Err(e.into()),
            };
            params = next;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let test_accuracy = evaluate(&config, &params, &data.test)?;
        checkpoint.params = params;
        checkpoint.optimizer = optimizer;
        checkpoint.epoch = epoch;
        checkpoint.history.push(EpochMetrics {
            epoch,
            train_loss: if seen == 0 { f64::NAN } else { loss_sum / seen as f64 },
            test_accuracy,
        });
        on_epoch(&checkpoint)?;
    }
    Ok(checkpoint)
}

fn non_finite(epoch: usize, batch: usize, last_good: Checkpoint) -> TrainError {
    TrainError::NonFinite {
        epoch,
        batch,
        last_good: Box::new(last_good),
    }
}

/// Forward, backward and one Adam update on a single minibatch. Returns the
/// batch loss; a non-finite loss leaves the optimizer untouched.
fn train_step(
    config: &ModelConfig,
    params: &ParamSet<f32>,
    batch: &DatasetSplit,
    optimizer: &mut OptimizerState,
) -> Result<(f64, ParamSet<f32>)> {
    let trainable = params.trainable();
    let logits = forward(config, &trainable, batch.images())?;
    let loss = cross_entropy(&logits, batch.labels())?;
    let value = loss.item()? as f64;
    if !value.is_finite() {
        return Ok((value, params.clone()));
    }
    loss.backward()?;
    Ok((value, adam_step(params, &collect_gradients(&trainable), optimizer)?))
}

fn check_split(config: &ModelConfig, split: &DatasetSplit, name: &str) -> Result<()> {
    let (h, w, c) = split.image_dims();
    if (h, w, c) != (config.image_h, config.image_w, config.channels) {
        return Err(Error::Config(format!(
            "{name} images are {h}x{w}x{c}, model expects {}x{}x{}",
            config.image_h, config.image_w, config.channels
        )));
    }
    if let Some(&label) = split.labels().iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::LabelRange {
            label,
            classes: config.num_classes,
        });
    }
    Ok(())
}

/// Predicted class per image, in split order.
pub fn predict(config: &ModelConfig, params: &ParamSet<f32>, split: &DatasetSplit) -> Result<Vec<usize>> {
    let params = params.frozen();
    let all: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in all.chunks(EVAL_BATCH) {
        let logits = forward(config, &params, split.gather(chunk).images())?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(config: &ModelConfig, params: &ParamSet<f32>, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    check_split(config, split, "evaluation")?;
    Ok(accuracy(&predict(config, params, split)?, split.labels()))
}
