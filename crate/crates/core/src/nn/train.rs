//! Deterministic training: Adam with an optional step-decay schedule,
//! seeded shuffling and dropout streams, and batch-parallel gradient
//! computation with a fixed reduction order so thread count never changes
//! the result.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::model::{train_step_sample, Gradients, Model, ModelError, TrainSample};
use super::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decay the learning rate by `scheduler_gamma` every this many epochs.
    pub scheduler_step: Option<usize>,
    pub scheduler_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Command-classifier defaults: Adam at 1e-4 with a step-30, 0.8 decay.
    pub fn clt_default(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            scheduler_step: Some(30),
            scheduler_gamma: 0.8,
            epochs,
            batch_size: 64,
            seed,
        }
    }

    /// Patch-regressor defaults: Adam at 1e-4, no decay.
    pub fn plt_default(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            scheduler_step: None,
            scheduler_gamma: 1.0,
            epochs,
            batch_size: 256,
            seed,
        }
    }
}

/// Learning rate in force at a given epoch.
pub fn scheduled_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match config.scheduler_step {
        Some(step) if step > 0 => {
            config.learning_rate * config.scheduler_gamma.powi((epoch / step) as i32)
        }
        _ => config.learning_rate,
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        let shapes = model.trainable_shapes();
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }
}

/// One Adam update over the trainable tensors.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut idx = 0;
    model.visit_params_mut(|_, tensor, trainable| {
        if !trainable {
            return;
        }
        let g = &grads.tensors[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((theta, &gi), (mi, vi)) in tensor
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut().zip(v.data.iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        idx += 1;
    });
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("loss diverged (non-finite) at optimizer step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Stable derivation of per-purpose RNG seeds.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const SHUFFLE_TAG: u64 = 0x5348;
const DROPOUT_TAG: u64 = 0x44524f50;

/// Train in place and report the loss trajectory. Gradients of a batch are
/// computed in parallel and summed in sample order; dropout masks derive
/// from (seed, epoch, batch, slot), so identical seeds give identical
/// weights regardless of thread count.
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<(TrainReport, AdamState), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut adam = AdamState::new(model);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let use_dropout = model.config.dropout > 0.0;

    for epoch in 0..config.epochs {
        let lr = scheduled_lr(config, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, SHUFFLE_TAG, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let model_ref: &Model = model;
            let results: Result<Vec<(f64, Gradients)>, ModelError> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &sample_idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                        config.seed,
                        DROPOUT_TAG,
                        epoch as u64,
                        batch_idx as u64,
                        slot as u64,
                    ]));
                    train_step_sample(
                        model_ref,
                        &samples[sample_idx],
                        if use_dropout { Some(&mut rng) } else { None },
                    )
                })
                .collect();
            let results = results?;

            let mut total = Gradients::zeros_like(model);
            let mut loss_sum = 0.0;
            for (loss, grads) in &results {
                loss_sum += loss;
                total.add_assign(grads);
            }
            let batch_loss = loss_sum / results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step: adam.step + 1 });
            }
            total.scale(1.0 / results.len() as f64);
            adam_step(model, &total, &mut adam, lr);

            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    Ok((
        TrainReport {
            epoch_losses,
            steps: adam.step,
        },
        adam,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{HeadKind, TransformerConfig};

    fn smoke_clt_model(seed: u64) -> Model {
        Model::new(
            TransformerConfig {
                vocab_size: 32,
                embed_dim: 16,
                ff_dim: 16,
                heads: 2,
                layers: 2,
                context_tokens: 16,
                dropout: 0.0,
                input_dim: 0,
                head: HeadKind::CltHead,
                pair_tokens: true,
            },
            seed,
        )
        .unwrap()
    }

    fn smoke_samples() -> Vec<TrainSample> {
        // The label is a fixed function of the even-position token id, so
        // the mapping is perfectly learnable.
        (0..8)
            .map(|k| {
                let tokens: Vec<u32> = (0..16)
                    .map(|i| ((((i + k) * 7) % 16) * 2 + (i % 2)) as u32)
                    .collect();
                let labels: Vec<f64> = (0..8).map(|t| ((tokens[2 * t] / 2) % 2) as f64).collect();
                TrainSample::Clt { tokens, labels }
            })
            .collect()
    }

    #[test]
    fn scheduler_steps() {
        let config = TrainConfig::clt_default(100, 0);
        assert_eq!(scheduled_lr(&config, 0), 1e-4);
        assert_eq!(scheduled_lr(&config, 29), 1e-4);
        assert!((scheduled_lr(&config, 30) - 0.8e-4).abs() < 1e-12);
        assert!((scheduled_lr(&config, 60) - 1e-4 * 0.8 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_batch_overfit_loss_trends_down() {
        let mut model = smoke_clt_model(3);
        let samples = smoke_samples();
        let config = TrainConfig {
            learning_rate: 3e-3,
            scheduler_step: None,
            scheduler_gamma: 1.0,
            epochs: 100,
            batch_size: samples.len(),
            seed: 17,
        };
        let (report, _) = train(&mut model, &samples, &config).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < 0.5 * first, "loss {first} -> {last}");
        // Transient upticks are allowed on at most 5% of steps.
        let upticks = report
            .epoch_losses
            .windows(2)
            .filter(|w| w[1] > w[0] * 1.0001)
            .count();
        assert!(upticks <= report.epoch_losses.len() / 20, "{upticks} upticks");
    }

    #[test]
    fn identical_seeds_identical_weights() {
        let samples = smoke_samples();
        let config = TrainConfig {
            learning_rate: 1e-3,
            scheduler_step: Some(4),
            scheduler_gamma: 0.8,
            epochs: 6,
            batch_size: 3,
            seed: 99,
        };
        let mut m1 = smoke_clt_model(21);
        let mut m2 = smoke_clt_model(21);
        train(&mut m1, &samples, &config).unwrap();
        train(&mut m2, &samples, &config).unwrap();
        let mut tensors1 = Vec::new();
        m1.visit_params(|_, t, _| tensors1.push(t.data.clone()));
        let mut idx = 0;
        m2.visit_params(|_, t, _| {
            assert_eq!(t.data, tensors1[idx]);
            idx += 1;
        });
    }

    #[test]
    fn plt_single_batch_overfit_reaches_low_error() {
        use crate::nn::model::plt_predict_patches;
        let mut model = Model::new(
            TransformerConfig {
                vocab_size: 0,
                embed_dim: 16,
                ff_dim: 32,
                heads: 2,
                layers: 2,
                context_tokens: 8,
                dropout: 0.0,
                input_dim: 5,
                head: HeadKind::PltHead,
                pair_tokens: false,
            },
            4,
        )
        .unwrap();
        // One sample of 8 patches with structured fractional targets.
        let features: Vec<f64> = (0..8 * 5).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let targets: Vec<[f64; 2]> = (0..8)
            .map(|i| [0.1 + 0.1 * (i % 8) as f64, 0.05 * (i % 4) as f64])
            .collect();
        let samples = vec![TrainSample::Plt {
            features: features.clone(),
            targets: targets.clone(),
        }];
        let config = TrainConfig {
            learning_rate: 5e-3,
            scheduler_step: None,
            scheduler_gamma: 1.0,
            epochs: 400,
            batch_size: 1,
            seed: 2,
        };
        train(&mut model, &samples, &config).unwrap();
        let out = plt_predict_patches(&model, &features).unwrap();
        let mae: f64 = out
            .iter()
            .zip(&targets)
            .map(|(p, t)| ((p[0] - t[0]).abs() + (p[1] - t[1]).abs()) / 2.0)
            .sum::<f64>()
            / out.len() as f64;
        assert!(mae < 0.05, "overfit MAE {mae}");
    }

    #[test]
    fn empty_set_rejected() {
        let mut model = smoke_clt_model(1);
        let config = TrainConfig::clt_default(1, 0);
        assert!(matches!(
            train(&mut model, &[], &config),
            Err(TrainError::EmptyTrainSet)
        ));
    }
}
