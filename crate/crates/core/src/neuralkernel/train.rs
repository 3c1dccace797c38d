use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::layers::Mode;
use super::models::{loss_and_grad, BinaryNet, SampleMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Mini-batch Adam on mean BCE. The per-epoch shuffle and dropout masks are
/// drawn from `seed`. Returns the mean training loss of every epoch.
pub fn train<M: BinaryNet>(
    model: &mut M,
    x: &SampleMatrix,
    y: &[u8],
    options: &TrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    model.check_input(x)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} samples but {} labels", x.len(), y.len())));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives < 2 || y.len() - positives < 2 {
        return Err(Error::InsufficientData(format!(
            "{} needs at least 2 samples per class, got {positives} positive of {}",
            model.name(),
            y.len()
        )));
    }
    if options.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }

    let mut rng = seed::rng(seed);
    let mut adam = Adam::new(AdamConfig::with_lr(options.lr));
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut trace = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(options.batch_size) {
            let xb = x.gather(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| f64::from(y[i])).collect();
            let (loss, grad) = match loss_and_grad(model, &xb, &yb, Mode::Train(&mut rng)) {
                Ok(v) => v,
                Err(Error::Activation(_)) => {
                    return Err(Error::Divergence {
                        stage: model.name().to_string(),
                        epoch,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: model.name().to_string(),
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            let grads: Vec<&[f64]> = grad.params().into_iter().map(|p| p.data).collect();
            adam.step(model.params_mut(), &grads);
        }
        trace.push(total / x.len() as f64);
    }
    Ok(trace)
}
