//! Mini-batch training of the field with adaptive moment estimation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ViewSample;
use crate::error::{Error, Result};
use crate::field::ThematicDistribution;
use crate::net::{flatten_targets, Features, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("moment decay rates must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss `‖m − m_gt‖²` of each epoch.
    pub epoch_loss: Vec<f64>,
    pub train_rmse: f64,
    pub test_rmse: Option<f64>,
    pub wall_time_s: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub config: TrainConfig,
}

/// Adam state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(len: usize, config: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        // lr·m̂/(√v̂ + ε) folded into one scale factor and a rescaled epsilon
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.epsilon * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

fn check_samples(params: &ModelParams, samples: &[ViewSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let k = params.k();
    for (index, s) in samples.iter().enumerate() {
        if s.m_gt.len() != k || !s.m_gt.is_simplex(1e-6) {
            return Err(Error::AtViewpoint {
                index,
                source: Box::new(Error::Validation(format!(
                    "target is not a {k}-component distribution"
                ))),
            });
        }
    }
    Ok(())
}

/// Trains `params` in place order of the seeded per-epoch shuffles;
/// `on_epoch(epoch, loss)` is called after every pass.
pub fn train_with(
    mut params: ModelParams,
    train: &[ViewSample],
    test: Option<&[ViewSample]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    check_samples(&params, train)?;
    let start = Instant::now();
    let vps: Vec<_> = train.iter().map(|s| s.viewpoint).collect();
    let features: Features<f32> = params.features(&vps)?;
    let targets: Vec<ThematicDistribution> = train.iter().map(|s| s.m_gt.clone()).collect();
    let k = params.k();
    let flat: Vec<f32> = flatten_targets(&targets, k, train.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(params.weights.len(), config);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut batch_targets = Vec::with_capacity(config.batch_size * k);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = features.gather(idx);
            batch_targets.clear();
            for &i in idx {
                batch_targets.extend_from_slice(&flat[i * k..(i + 1) * k]);
            }
            let (loss, grad) = params.weights.loss_and_grad(&x, &batch_targets);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch, loss });
            }
            total += loss * idx.len() as f64;
            adam.step(params.weights.as_mut_slice(), &grad);
        }
        let loss = total / train.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.6}");
        on_epoch(epoch, loss);
        epoch_loss.push(loss);
    }
    if !params.weights.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs - 1,
            batch: 0,
            loss: f64::NAN,
        });
    }
    params
        .meta
        .provenance
        .extend(provenance(config, train.len()));
    let train_rmse = evaluate_rmse(&params, train)?;
    let test_rmse = test.map(|t| evaluate_rmse(&params, t)).transpose()?;
    let report = TrainReport {
        epoch_loss,
        train_rmse,
        test_rmse,
        wall_time_s: start.elapsed().as_secs_f64(),
        train_samples: train.len(),
        test_samples: test.map_or(0, |t| t.len()),
        config: config.clone(),
    };
    Ok((params, report))
}

pub fn train(
    params: ModelParams,
    train: &[ViewSample],
    test: Option<&[ViewSample]>,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with(params, train, test, config, |_, _| {})
}

fn provenance(config: &TrainConfig, n: usize) -> Vec<(String, String)> {
    vec![
        ("epochs".into(), config.epochs.to_string()),
        ("batch_size".into(), config.batch_size.to_string()),
        ("learning_rate".into(), config.learning_rate.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("train_samples".into(), n.to_string()),
        ("optimizer".into(), "adam".into()),
    ]
}

/// `sqrt(mean over samples and components of (m − m_gt)²)`.
pub fn evaluate_rmse(params: &ModelParams, samples: &[ViewSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let vps: Vec<_> = samples.iter().map(|s| s.viewpoint).collect();
    let preds = params.predict(&vps)?;
    let targets: Vec<&[f64]> = samples.iter().map(|s| s.m_gt.as_slice()).collect();
    rmse(&preds, &targets)
}

/// RMSE between predicted and target distributions.
pub fn rmse<P: AsRef<[f64]>, T: AsRef<[f64]>>(predicted: &[P], targets: &[T]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(targets) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() {
            return Err(Error::invalid("prediction and target lengths differ"));
        }
        sum += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    Ok((sum / count as f64).sqrt())
}

impl AsRef<[f64]> for ThematicDistribution {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}
