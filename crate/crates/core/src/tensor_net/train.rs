use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::layer::Parameters;
use crate::error::{invalid, Error, Result};

/// A model that can report its loss and flat parameter gradient on one sample.
pub trait Trainable: Parameters + Sync {
    type Sample: Sync;

    fn loss_and_grad(&self, sample: &Self::Sample) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, sample: &Self::Sample) -> Result<f64> {
        Ok(self.loss_and_grad(sample)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Mini-batch Adam over `samples`, reshuffled every epoch from `cfg.seed`.
///
/// Per-sample gradients inside a batch are computed in parallel and then
/// summed in batch order, so results do not depend on thread scheduling.
/// Returns the mean training loss of each epoch.
pub fn train<M: Trainable>(
    model: &mut M,
    samples: &[M::Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let n_params = model.num_params();
    let mut state = AdamState::new(n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut params = model.flat();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>)>> = {
                let m: &M = model;
                batch.par_iter().map(|&i| m.loss_and_grad(&samples[i])).collect()
            };
            let mut grad = vec![0.0; n_params];
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                epoch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(&mut params, &grad, &mut state)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            model.set_flat(&params)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}
