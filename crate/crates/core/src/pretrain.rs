//! Next-token pretraining of the base model on the mixed-language corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, cross_entropy_with_grad, forward_cached, next_token_targets, Parameters,
};
use crate::optim::{linear_schedule, warmup_steps, Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.03,
            seed: 0,
        }
    }
}

/// Trains every array on all next-token positions of `seqs`. Returns the
/// trained parameters and the mean training loss of each epoch.
pub fn pretrain<T: Scalar>(
    init: &Parameters<T>,
    seqs: &[Vec<u32>],
    cfg: &PretrainConfig,
) -> Result<(Parameters<T>, Vec<f64>)> {
    if seqs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pretraining needs sequences and a positive batch size".into(),
        ));
    }
    let mut params = init.clone();
    let steps_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_ratio);
    let mut adam = Adam::for_params(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let w = T::one() / T::from_usize(chunk.len()).unwrap();
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let seq = &seqs[i];
                let (targets, mask) = next_token_targets(seq, 1);
                let (logits, cache) = forward_cached(&params, seq, None)?;
                let (loss, dlogits) = cross_entropy_with_grad(&logits, &targets, &mask, w)?;
                batch_loss += loss.to_f64_lossless() / chunk.len() as f64;
                backward(&params, &cache, &dlogits, None, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss(batch_loss));
            }
            adam.step(
                &mut params,
                &grads,
                cfg.lr * linear_schedule(step, total, warmup),
            );
            step += 1;
            sum += batch_loss;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
        log::info!(
            "pretrain epoch {} loss {:.4}",
            epoch + 1,
            epoch_losses[epoch]
        );
    }
    Ok((params, epoch_losses))
}
