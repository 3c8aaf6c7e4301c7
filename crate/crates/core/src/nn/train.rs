use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, InitRule, Loss, Network};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    /// Seeds the per-epoch shuffle (and, in the evolution driver, initialisation).
    pub seed: u64,
    pub init: InitRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 8,
            loss: Loss::BinaryCrossEntropy,
            seed: 0,
            init: InitRule::GlorotUniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.epochs > 0 && !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trained<S> {
    pub network: Network<S>,
    /// Mean training loss of each epoch, measured batch by batch before each update.
    pub loss_trace: Vec<f64>,
}

/// Plain mini-batch SGD with a fixed learning rate. Masked synapses stay at 0.
///
/// Fails with [`Error::TrainingDiverged`] carrying the zero-based epoch index
/// if a batch loss or any parameter becomes non-finite.
pub fn train<S: Scalar>(
    mut network: Network<S>,
    dataset: &[Sample<S>],
    cfg: &TrainConfig,
) -> Result<Trained<S>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Trained {
            network,
            loss_trace: Vec::new(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::RejectedInput("training set is empty".into()));
    }
    let input = network.architecture().input_shape();
    let output = network.architecture().output_shape();
    for s in dataset {
        if s.image.shape() != input || s.mask.shape() != output {
            return Err(Error::RejectedInput(format!(
                "sample {} has shapes {} / {}, network expects {input} / {output}",
                s.name,
                s.image.shape(),
                s.mask.shape()
            )));
        }
    }

    let lr = S::from_f64_lossy(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut grads = Gradients::zeros_like(&network);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            grads.weights.iter_mut().chain(grads.biases.iter_mut()).for_each(|g| g.fill(S::zero()));
            let pairs = chunk
                .iter()
                .map(|&i| (dataset[i].image.data(), dataset[i].mask.data()));
            let loss = network.accumulate_batch(pairs, chunk.len(), cfg.loss, &mut grads);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            network.apply_step(&grads, lr);
            epoch_loss += loss.to_f64_lossy() * chunk.len() as f64;
        }
        if !network.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok(Trained {
        network,
        loss_trace: trace,
    })
}

/// Mean loss of `network` over `dataset`.
pub fn evaluate_loss<S: Scalar>(network: &Network<S>, dataset: &[Sample<S>], loss: Loss) -> Result<f64> {
    let inputs: Vec<_> = dataset.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<_> = dataset.iter().map(|s| s.mask.clone()).collect();
    Ok(network.loss(&inputs, &targets, loss)?.to_f64_lossy())
}
