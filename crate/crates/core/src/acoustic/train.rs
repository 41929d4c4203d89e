//! Speaker-independent training of the full model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BlstmAcousticModel, Gradients, Mode, ParamId, Tensor, Trainable, Utterance};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ivector::IVector;
use crate::util::{argmax, derive_seed, rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub dropout_prob: f64,
    pub l2_scale: f64,
    pub grad_noise_variance: f64,
    pub focal_gamma: f64,
    /// Divisor applied to the learning rate when CVFA stalls.
    pub lr_decay_factor: f64,
    pub pretrain: bool,
    pub seed: u64,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    /// Utterances per update.
    pub batch_size: usize,
}

impl TrainConfig {
    /// The full-scale recipe.
    pub fn full_scale() -> Self {
        Self {
            initial_lr: 0.0005,
            dropout_prob: 0.10,
            l2_scale: 0.01,
            grad_noise_variance: 0.3,
            focal_gamma: 2.0,
            lr_decay_factor: std::f64::consts::SQRT_2,
            pretrain: true,
            seed: 0,
            max_epochs: 20,
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
        }
    }

    /// Settings that converge on the synthetic desk corpus in seconds.
    pub fn desk() -> Self {
        Self {
            initial_lr: 0.01,
            dropout_prob: 0.0,
            l2_scale: 1e-5,
            grad_noise_variance: 1e-6,
            focal_gamma: 2.0,
            lr_decay_factor: std::f64::consts::SQRT_2,
            pretrain: true,
            seed: 0,
            max_epochs: 12,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.initial_lr, self.l2_scale, self.grad_noise_variance, self.focal_gamma];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("training rates must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout probability must lie in [0, 1)".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr_decay_factor must exceed 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One labeled (or pseudo-labeled) training utterance.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: FeatureMatrix,
    pub ivector: Option<IVector>,
    pub targets: Vec<usize>,
    pub partition: Option<String>,
}

impl Example {
    pub fn utterance(&self) -> Utterance<'_> {
        Utterance::new(&self.features)
            .with_ivector(self.ivector.as_ref())
            .with_partition(self.partition.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Layers active during this epoch.
    pub depth: usize,
    /// Mean per-frame training loss.
    pub loss: f64,
    pub cvfa: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub(crate) fn accuracy_at_depth(m: &BlstmAcousticModel, set: &[Example], depth: usize) -> Result<f64> {
    let counts = set
        .par_iter()
        .map(|ex| {
            let p = m.forward_depth(&ex.utterance(), Mode::Eval, depth)?;
            let hits = (0..p.nrows())
                .filter(|&t| argmax(&p.row(t).iter().copied().collect::<Vec<_>>()) == ex.targets[t])
                .count();
            Ok((hits, p.nrows()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |(h, n), (a, b)| (h + a, n + b));
    if total == 0 {
        return Err(Error::invalid("cross-validation set has no frames"));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of frames whose arg-max posterior matches the target.
pub fn cross_validation_accuracy(m: &BlstmAcousticModel, set: &[Example]) -> Result<f64> {
    accuracy_at_depth(m, set, m.num_layers())
}

/// Summed loss, frame count and summed gradients over a batch, reduced in batch order.
pub(crate) fn batch_gradients(
    m: &BlstmAcousticModel,
    batch: &[&Example],
    gamma: f64,
    modes: &[Mode],
    trainable: Trainable,
    depth: usize,
) -> Result<(f64, usize, Gradients)> {
    let parts = batch
        .par_iter()
        .zip(modes.par_iter())
        .map(|(ex, mode)| m.backward_sum(&ex.utterance(), &ex.targets, gamma, *mode, trainable, depth))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut frames = 0;
    let mut total = Gradients::default();
    for ((l, g), ex) in parts.into_iter().zip(batch) {
        loss += l;
        frames += ex.targets.len();
        total.add(&g);
    }
    Ok((loss, frames, total))
}

struct Optimizer {
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
    velocity: BTreeMap<ParamId, Tensor>,
    step: u64,
}

impl Optimizer {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            velocity: BTreeMap::new(),
            step: 0,
        }
    }

    fn update(&mut self, kind: OptimizerKind, id: &ParamId, param: &mut Tensor, grad: &Tensor, lr: f64) {
        match kind {
            OptimizerKind::Sgd { momentum } => {
                let vel = self.velocity.entry(id.clone()).or_insert_with(|| grad.zeros_like());
                for ((w, v), g) in param.data.iter_mut().zip(vel.data.iter_mut()).zip(&grad.data) {
                    *v = momentum * *v - lr * g;
                    *w += *v;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                let t = self.step as i32;
                let m = self.m.entry(id.clone()).or_insert_with(|| grad.zeros_like());
                let v = self.v.entry(id.clone()).or_insert_with(|| grad.zeros_like());
                let c1 = 1.0 - B1.powi(t);
                let c2 = 1.0 - B2.powi(t);
                for (((w, mi), vi), g) in param.data.iter_mut().zip(m.data.iter_mut()).zip(v.data.iter_mut()).zip(&grad.data) {
                    *mi = B1 * *mi + (1.0 - B1) * g;
                    *vi = B2 * *vi + (1.0 - B2) * g * g;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

fn active(id: &ParamId, depth: usize) -> bool {
    match id {
        ParamId::Lstm { layer, .. } => *layer < depth,
        ParamId::Output { .. } => true,
        ParamId::Slot { .. } => false,
    }
}

/// Layers used in 1-based `epoch`.
pub fn pretrain_depth(epoch: usize, layers: usize, pretrain: bool) -> usize {
    if pretrain {
        epoch.clamp(1, layers)
    } else {
        layers
    }
}

/// Trains every non-AT parameter; returns the final model and per-epoch log.
pub fn train_model(
    model: &BlstmAcousticModel,
    train: &[Example],
    cv: &[Example],
    config: &TrainConfig,
) -> Result<(BlstmAcousticModel, Vec<EpochLog>)> {
    config.validate()?;
    if train.is_empty() || cv.is_empty() {
        return Err(Error::invalid("training and cross-validation sets must be non-empty"));
    }
    let layers = model.num_layers();
    if config.pretrain && layers > 1 {
        let sizes = model.layer_sizes();
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(Error::Config("layer-wise pretraining requires uniform layer sizes".into()));
        }
    }
    let mut m = model.clone();
    let mut opt = Optimizer::new();
    let mut lr = config.initial_lr;
    let mut best_cvfa = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut noise_rng = rng(derive_seed(config.seed, "gradient-noise"));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        if lr < 1e-8 {
            break;
        }
        let depth = pretrain_depth(epoch, layers, config.pretrain);
        order.shuffle(&mut rng(derive_seed(config.seed, &format!("shuffle/{epoch}"))));
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let modes: Vec<Mode> = chunk
                .iter()
                .map(|&i| Mode::Train {
                    dropout: config.dropout_prob,
                    seed: derive_seed(config.seed, &format!("dropout/{epoch}/{b}/{i}")),
                })
                .collect();
            let (loss, frames, mut grads) = batch_gradients(&m, &batch, config.focal_gamma, &modes, Trainable::All, depth)?;
            epoch_loss += loss;
            epoch_frames += frames;
            grads.scale(1.0 / frames as f64);
            opt.step += 1;
            let noise_var = config.grad_noise_variance / (1.0 + opt.step as f64).powf(0.55);
            let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            for (id, g) in grads.tensors.iter_mut() {
                if !active(id, depth) {
                    continue;
                }
                let p = m.params.get_mut(id).expect("gradient for a known parameter");
                if id.is_weight() && config.l2_scale > 0.0 {
                    g.add_scaled(config.l2_scale, p);
                }
                if noise_var > 0.0 {
                    g.data.iter_mut().for_each(|v| *v += noise.sample(&mut noise_rng));
                }
                opt.update(config.optimizer, id, p, g, lr);
            }
        }
        let cvfa = accuracy_at_depth(&m, cv, depth)?;
        log::info!(
            "epoch {epoch} depth {depth} loss {:.4} cvfa {:.4} lr {lr:.3e}",
            epoch_loss / epoch_frames as f64,
            cvfa
        );
        log.push(EpochLog {
            epoch,
            depth,
            loss: epoch_loss / epoch_frames as f64,
            cvfa,
            lr,
        });
        if cvfa > best_cvfa {
            best_cvfa = cvfa;
        } else {
            lr /= config.lr_decay_factor;
        }
    }
    Ok((m, log))
}
