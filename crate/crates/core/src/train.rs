//! Mini-batch training loop shared by every trainable scorer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate decays linearly to this fraction of its initial value.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig {
                lr: 2e-3,
                ..Default::default()
            },
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(
                "lr must be positive and final_lr_fraction in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient and bookkeeping for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Model,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Trains `model` in place and leaves it at the epoch with the best metric
/// (earliest on ties).
///
/// `step` receives the item indices of one batch and returns the mean loss
/// and gradient, or `Error::EmptyBatch` if every item was unusable; such
/// batches are skipped. `metric` is evaluated after every epoch.
pub fn fit<S, M>(
    model: &mut Model,
    items: usize,
    config: &TrainConfig,
    component: &str,
    mut step: S,
    mut metric: M,
) -> Result<TrainLog>
where
    S: FnMut(&Model, &[usize], &mut Rng) -> Result<BatchResult>,
    M: FnMut(&Model) -> Result<f64>,
{
    config.validate()?;
    if items == 0 {
        return Err(Error::Validation(format!("{component}: no training items")));
    }
    let mut rng = seeded(config.seed, component);
    let mut opt = Adam::new(model, config.adam);
    let batches_per_epoch = items.div_ceil(config.batch_size);
    let total_steps = (batches_per_epoch * config.epochs) as f64;
    let mut order: Vec<usize> = (0..items).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let r = match step(model, batch, &mut rng) {
                Ok(r) => r,
                Err(Error::EmptyBatch { skipped: s }) => {
                    skipped += s;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !r.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "{component}: non-finite loss {} at epoch {epoch}",
                    r.loss
                )));
            }
            let progress = opt.steps() as f64 / total_steps;
            let scale = 1.0 - (1.0 - config.final_lr_fraction) * progress;
            opt.step(model, &r.grads, scale);
            loss_sum += r.loss * (batch.len() - r.skipped) as f64;
            used += batch.len() - r.skipped;
            skipped += r.skipped;
        }
        let value = metric(model)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{component}: metric is {value} at epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            loss: if used == 0 {
                0.0
            } else {
                loss_sum / used as f64
            },
            metric: value,
            skipped,
        });
        if best.as_ref().is_none_or(|(b, _, _)| value > *b) {
            best = Some((value, epoch, model.clone()));
        }
    }
    let (best_metric, best_epoch, m) = best.expect("at least one epoch");
    *model = m;
    Ok(TrainLog {
        epochs: log,
        best_epoch,
        best_metric,
    })
}
