//! Unsupervised second-pass adaptation: pseudo-labels from a first pass,
//! per-partition affine transforms trained with momentum SGD, and frame
//! error rate evaluation.
//!
//! Gold labels only enter through [`evaluate`]; the pseudo-label and
//! adaptation entry points take label-free [`Utterance`] views.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AffineTransform, BlstmAcousticModel, Mode, ParamId, Tensor, Trainable, Utterance};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::ivector::IVector;
use crate::util::{argmax, derive_seed, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartitionKind {
    Speaker,
    Environment,
}

impl PartitionKind {
    pub fn label(self) -> &'static str {
        match self {
            PartitionKind::Speaker => "speaker",
            PartitionKind::Environment => "environment",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "speaker" | "spk" => Ok(PartitionKind::Speaker),
            "environment" | "env" => Ok(PartitionKind::Environment),
            other => Err(Error::Config(format!("unknown partition type {other:?}"))),
        }
    }
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps each utterance to its speaker or environment key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSet {
    pub kind: PartitionKind,
    /// Utterance key per dataset position.
    pub keys: Vec<String>,
}

impl PartitionSet {
    pub fn from_dataset(data: &Dataset, kind: PartitionKind) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cannot partition an empty dataset"));
        }
        let keys = data
            .utterances
            .iter()
            .map(|u| match kind {
                PartitionKind::Speaker => u.speaker.clone(),
                PartitionKind::Environment => u.environment.clone(),
            })
            .collect();
        Ok(Self { kind, keys })
    }

    /// Dataset positions per key, keys sorted.
    pub fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, k) in self.keys.iter().enumerate() {
            g.entry(k.as_str()).or_default().push(i);
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub partition: PartitionKind,
    pub positions: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub l2_to_identity: f64,
    pub cv_fraction: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Consecutive CVFA stalls tolerated before stopping.
    pub patience: usize,
    pub lr_decay_factor: f64,
}

impl AdaptationConfig {
    /// Full-scale hyperparameters.
    pub fn full_scale(partition: PartitionKind, positions: Vec<usize>) -> Self {
        Self {
            partition,
            positions,
            lr: 1e-6,
            momentum: 0.9,
            l2_to_identity: 0.01,
            cv_fraction: 0.1,
            seed: 0,
            max_epochs: 5,
            patience: 2,
            lr_decay_factor: std::f64::consts::SQRT_2,
        }
    }

    /// Step size suited to per-frame mean gradients on the desk corpus.
    pub fn desk(partition: PartitionKind, positions: Vec<usize>) -> Self {
        Self {
            lr: 0.03,
            ..Self::full_scale(partition, positions)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Config("adaptation needs at least one slot position".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("adaptation lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.l2_to_identity < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and l2_to_identity be non-negative".into()));
        }
        if !(self.cv_fraction > 0.0 && self.cv_fraction < 1.0) {
            return Err(Error::Config("cv_fraction must lie in (0, 1)".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr_decay_factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Per-frame arg-max of eval-mode posteriors.
pub fn first_pass_targets(m: &BlstmAcousticModel, utterances: &[Utterance]) -> Result<Vec<Vec<usize>>> {
    utterances
        .par_iter()
        .map(|u| {
            let p = m.forward(u, Mode::Eval)?;
            Ok((0..p.nrows()).map(|t| argmax(&p.row(t).iter().copied().collect::<Vec<_>>())).collect())
        })
        .collect()
}

/// Seeded random split with `round(n * cv_fraction)` items (at least one,
/// leaving at least one for training) held out. A single item yields an
/// empty CV part.
pub fn split_train_cv<T: Clone>(items: &[T], cv_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    if n < 2 {
        return (items.to_vec(), Vec::new());
    }
    let n_cv = ((n as f64 * cv_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let (cv, train) = order.split_at(n_cv);
    let mut train = train.to_vec();
    let mut cv = cv.to_vec();
    train.sort_unstable();
    cv.sort_unstable();
    (
        train.iter().map(|&i| items[i].clone()).collect(),
        cv.iter().map(|&i| items[i].clone()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    /// Mean per-frame cross-entropy against pseudo-targets.
    pub loss: f64,
    /// CVFA against pseudo-targets; `None` without a CV split.
    pub cvfa: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionAdaptation {
    pub partition_key: String,
    pub transforms: Vec<AffineTransform>,
    pub curve: Vec<AdaptEpoch>,
}

/// `lambda * (||W - I||^2 + ||b||^2)` summed over the transforms.
pub fn identity_penalty(transforms: &[AffineTransform], lambda: f64) -> f64 {
    let mut total = 0.0;
    for at in transforms {
        for a in std::iter::once(&at.forward).chain(&at.backward) {
            let n = a.weight.rows;
            for (i, w) in a.weight.data.iter().enumerate() {
                let target = if i / n == i % n { 1.0 } else { 0.0 };
                total += (w - target).powi(2);
            }
            total += a.bias.data.iter().map(|b| b * b).sum::<f64>();
        }
    }
    lambda * total
}

/// Adds `2 lambda (W - I)` or `2 lambda b` to a slot gradient.
fn add_penalty_gradient(id: &ParamId, param: &Tensor, grad: &mut Tensor, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let bias = matches!(id, ParamId::Slot { bias: true, .. });
    let n = param.cols;
    for (i, (g, w)) in grad.data.iter_mut().zip(&param.data).enumerate() {
        let target = if !bias && i / n == i % n { 1.0 } else { 0.0 };
        *g += 2.0 * lambda * (w - target);
    }
}

fn momentum_step(param: &mut Tensor, velocity: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64) {
    for ((w, v), g) in param.data.iter_mut().zip(velocity.data.iter_mut()).zip(&grad.data) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

fn slot_ids(m: &BlstmAcousticModel, key: &str) -> Vec<ParamId> {
    m.params
        .ids()
        .into_iter()
        .filter(|id| matches!(id, ParamId::Slot { partition, .. } if partition == key))
        .collect()
}

fn pseudo_accuracy(m: &BlstmAcousticModel, utts: &[Utterance], targets: &[&Vec<usize>]) -> Result<f64> {
    let predicted = first_pass_targets(m, utts)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(targets) {
        hits += p.iter().zip(t.iter()).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

fn snapshot(m: &BlstmAcousticModel, key: &str, positions: &[usize]) -> Vec<AffineTransform> {
    positions.iter().map(|&p| m.transform(p, key).unwrap().clone()).collect()
}

/// Trains the transforms of `partition_key` at `config.positions` on
/// pseudo-targets. The slots must already exist in `m`; `m` itself is not
/// modified. The utterances' partition fields are overridden with the key.
pub fn adapt_partition(
    m: &BlstmAcousticModel,
    partition_key: &str,
    utterances: &[Utterance],
    pseudo_targets: &[Vec<usize>],
    config: &AdaptationConfig,
) -> Result<PartitionAdaptation> {
    config.validate()?;
    if utterances.is_empty() {
        return Err(Error::invalid(format!("partition {partition_key:?} has no utterances")));
    }
    if utterances.len() != pseudo_targets.len() {
        return Err(Error::DimensionMismatch {
            what: "pseudo-target sequences",
            expected: utterances.len(),
            got: pseudo_targets.len(),
        });
    }
    let mut positions = config.positions.clone();
    positions.sort_unstable();
    positions.dedup();
    for &p in &positions {
        if m.transform(p, partition_key).is_none() {
            return Err(Error::MissingSlot {
                position: p,
                partition: partition_key.to_string(),
            });
        }
    }
    let base_print = m.base_fingerprint();
    let mut work = m.clone();
    // only the requested slots of this key are trained
    let ids: Vec<ParamId> = slot_ids(&work, partition_key)
        .into_iter()
        .filter(|id| matches!(id, ParamId::Slot { position, .. } if positions.contains(position)))
        .collect();
    let utts: Vec<Utterance> = utterances
        .iter()
        .map(|u| {
            let mut u = *u;
            if u.partitions[0] != Some(partition_key) {
                u.partitions = [Some(partition_key), u.partitions[0]];
            }
            u
        })
        .collect();
    let indices: Vec<usize> = (0..utts.len()).collect();
    let (train_idx, cv_idx) = split_train_cv(&indices, config.cv_fraction, derive_seed(config.seed, &format!("split/{partition_key}")));
    if cv_idx.is_empty() {
        log::warn!("partition {partition_key:?} has a single utterance; adapting without cross-validation");
    }
    let cv_utts: Vec<Utterance> = cv_idx.iter().map(|&i| utts[i]).collect();
    let cv_targets: Vec<&Vec<usize>> = cv_idx.iter().map(|&i| &pseudo_targets[i]).collect();

    let mut velocity: BTreeMap<ParamId, Tensor> = ids.iter().map(|id| (id.clone(), work.params.get(id).unwrap().zeros_like())).collect();
    let mut lr = config.lr;
    // pseudo-targets are the unadapted model's own arg-max, so the identity
    // always scores a perfect CVFA; selection therefore starts after epoch 1
    let mut best: Option<(f64, Vec<AffineTransform>)> = None;
    let use_cv = !cv_idx.is_empty();
    let mut stalls = 0;
    let mut curve = Vec::new();
    let mut order = train_idx.clone();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng(derive_seed(config.seed, &format!("order/{partition_key}/{epoch}"))));
        let mut loss = 0.0;
        let mut frames = 0;
        for &i in &order {
            let (l, mut grads) = work.backward(&utts[i], &pseudo_targets[i], 0.0, Mode::Eval, Trainable::AffineOnly)?;
            loss += l * pseudo_targets[i].len() as f64;
            frames += pseudo_targets[i].len();
            for id in &ids {
                let g = grads.tensors.get_mut(id).expect("active slot gradient");
                let p = work.params.get_mut(id).unwrap();
                add_penalty_gradient(id, p, g, config.l2_to_identity);
                momentum_step(p, velocity.get_mut(id).unwrap(), g, lr, config.momentum);
            }
        }
        let epoch_lr = lr;
        let cvfa = if use_cv {
            let acc = pseudo_accuracy(&work, &cv_utts, &cv_targets)?;
            match &best {
                Some((best_acc, _)) if acc <= *best_acc => {
                    lr /= config.lr_decay_factor;
                    stalls += 1;
                }
                _ => {
                    best = Some((acc, snapshot(&work, partition_key, &positions)));
                    stalls = 0;
                }
            }
            Some(acc)
        } else {
            None
        };
        curve.push(AdaptEpoch {
            epoch,
            loss: loss / frames.max(1) as f64,
            cvfa,
            lr: epoch_lr,
        });
        if use_cv && stalls >= config.patience {
            break;
        }
    }
    let transforms = match best {
        Some((_, set)) => set,
        None => snapshot(&work, partition_key, &positions),
    };
    if work.base_fingerprint() != base_print {
        return Err(Error::invalid("adaptation modified frozen parameters"));
    }
    Ok(PartitionAdaptation {
        partition_key: partition_key.to_string(),
        transforms,
        curve,
    })
}

/// Replaces (or adds) the given transforms in `m`.
pub fn install_transforms(m: &mut BlstmAcousticModel, transforms: &[AffineTransform]) -> Result<()> {
    for at in transforms {
        let expected = m.slot_dim(at.position)?;
        if at.forward.weight.rows != expected {
            return Err(Error::DimensionMismatch {
                what: "affine transform",
                expected,
                got: at.forward.weight.rows,
            });
        }
        m.params.at_slots.insert((at.position, at.partition_key.clone()), at.clone());
    }
    Ok(())
}

/// Frame error rates overall and per speaker and environment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FerReport {
    pub overall: f64,
    pub frames: usize,
    pub by_environment: BTreeMap<String, f64>,
    pub by_speaker: BTreeMap<String, f64>,
}

/// Frame error rate of `m` on `data`. With `partitions`, each utterance runs
/// with the transforms of its key (and `secondary` key, if given); every key
/// must own at least one transform.
pub fn evaluate(
    m: &BlstmAcousticModel,
    data: &Dataset,
    ivectors: Option<&[IVector]>,
    partitions: Option<&PartitionSet>,
    secondary: Option<&PartitionSet>,
) -> Result<FerReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    for set in [partitions, secondary].into_iter().flatten() {
        if set.keys.len() != data.len() {
            return Err(Error::DimensionMismatch {
                what: "partition keys",
                expected: data.len(),
                got: set.keys.len(),
            });
        }
        for key in set.groups().keys() {
            if m.positions_for(key).is_empty() {
                return Err(Error::invalid(format!("no transforms for partition {key:?}")));
            }
        }
    }
    let utts = utterance_views(data, ivectors, partitions)?;
    let utts: Vec<Utterance> = utts
        .into_iter()
        .enumerate()
        .map(|(i, u)| u.with_secondary_partition(secondary.map(|s| s.keys[i].as_str())))
        .collect();
    let predicted = first_pass_targets(m, &utts)?;
    let mut errors: BTreeMap<(u8, &str), (usize, usize)> = BTreeMap::new();
    let (mut wrong, mut total) = (0, 0);
    for (u, p) in data.utterances.iter().zip(&predicted) {
        let e = p.iter().zip(&u.labels).filter(|(a, b)| a != b).count();
        let n = u.labels.len();
        wrong += e;
        total += n;
        for key in [(0u8, u.environment.as_str()), (1u8, u.speaker.as_str())] {
            let c = errors.entry(key).or_default();
            c.0 += e;
            c.1 += n;
        }
    }
    let mut report = FerReport {
        overall: wrong as f64 / total as f64,
        frames: total,
        ..Default::default()
    };
    for ((kind, key), (e, n)) in errors {
        let map = if kind == 0 { &mut report.by_environment } else { &mut report.by_speaker };
        map.insert(key.to_string(), e as f64 / n as f64);
    }
    Ok(report)
}

/// Label-free views of a dataset for the network.
pub fn utterance_views<'a>(data: &'a Dataset, ivectors: Option<&'a [IVector]>, partitions: Option<&'a PartitionSet>) -> Result<Vec<Utterance<'a>>> {
    if let Some(iv) = ivectors {
        if iv.len() != data.len() {
            return Err(Error::DimensionMismatch {
                what: "i-vectors per dataset",
                expected: data.len(),
                got: iv.len(),
            });
        }
    }
    Ok(data
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            Utterance::new(&u.features)
                .with_ivector(ivectors.map(|v| &v[i]))
                .with_partition(partitions.map(|p| p.keys[i].as_str()))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationResult {
    pub model: BlstmAcousticModel,
    pub partitions: PartitionSet,
    pub adaptations: Vec<PartitionAdaptation>,
    pub before: FerReport,
    pub after: FerReport,
}

/// Optional follow-up pass chained after the main one.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub config: AdaptationConfig,
}

/// Two-pass unsupervised adaptation of a whole dataset: first-pass
/// pseudo-labels, one transform set per partition, evaluation.
pub fn adapt_dataset(
    m: &BlstmAcousticModel,
    data: &Dataset,
    ivectors: Option<&[IVector]>,
    config: &AdaptationConfig,
    cascade: Option<&Cascade>,
) -> Result<AdaptationResult> {
    config.validate()?;
    let before = evaluate(m, data, ivectors, None, None)?;
    let plain = utterance_views(data, ivectors, None)?;
    let targets = first_pass_targets(m, &plain)?;
    let partitions = PartitionSet::from_dataset(data, config.partition)?;
    let (model, mut adaptations) = adapt_pass(m, &plain, &targets, &partitions, None, config)?;
    let mut model = model;
    let mut secondary = None;
    if let Some(c) = cascade {
        let second = PartitionSet::from_dataset(data, c.config.partition)?;
        let (m2, more) = adapt_pass(&model, &plain, &targets, &second, Some(&partitions), &c.config)?;
        model = m2;
        adaptations.extend(more);
        secondary = Some(second);
    }
    // the cascaded key is the primary one so its slots win on overlap
    let after = match &secondary {
        Some(second) => evaluate(&model, data, ivectors, Some(second), Some(&partitions))?,
        None => evaluate(&model, data, ivectors, Some(&partitions), None)?,
    };
    Ok(AdaptationResult {
        model,
        partitions,
        adaptations,
        before,
        after,
    })
}

fn adapt_pass(
    m: &BlstmAcousticModel,
    plain: &[Utterance],
    targets: &[Vec<usize>],
    partitions: &PartitionSet,
    earlier: Option<&PartitionSet>,
    config: &AdaptationConfig,
) -> Result<(BlstmAcousticModel, Vec<PartitionAdaptation>)> {
    let groups = partitions.groups();
    let results = groups
        .par_iter()
        .map(|(key, idx)| {
            let mut local = m.clone();
            for &p in &config.positions {
                local.insert_affine(p, key)?;
            }
            let utts: Vec<Utterance> = idx
                .iter()
                .map(|&i| plain[i].with_partition(earlier.map(|e| e.keys[i].as_str())))
                .collect();
            let tg: Vec<Vec<usize>> = idx.iter().map(|&i| targets[i].clone()).collect();
            adapt_partition(&local, key, &utts, &tg, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = m.clone();
    for r in &results {
        install_transforms(&mut model, &r.transforms)?;
    }
    Ok((model, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::Affine;
    use crate::corpus::{generate, CorpusSpec, CorpusUtterance};
    use crate::features::{FeatureKind, FeatureMatrix};
    use nalgebra::DMatrix;

    #[test]
    fn full_scale_hyperparameters() {
        let c = AdaptationConfig::full_scale(PartitionKind::Speaker, vec![1]);
        assert_eq!((c.lr, c.momentum, c.l2_to_identity, c.cv_fraction), (1e-6, 0.9, 0.01, 0.1));
        assert_eq!(c.max_epochs, 5);
        assert!(AdaptationConfig::full_scale(PartitionKind::Speaker, vec![]).validate().is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ten: Vec<usize> = (0..10).collect();
        let (tr, cv) = split_train_cv(&ten, 0.1, 3);
        assert_eq!((tr.len(), cv.len()), (9, 1));
        assert_eq!(split_train_cv(&ten, 0.1, 3), (tr, cv));
        let twenty: Vec<usize> = (0..20).collect();
        let (tr, cv) = split_train_cv(&twenty, 0.1, 4);
        assert_eq!((tr.len(), cv.len()), (18, 2));
        let mut all: Vec<usize> = tr.iter().chain(&cv).copied().collect();
        all.sort_unstable();
        assert_eq!(all, twenty);
        assert_eq!(split_train_cv(&[7], 0.1, 0), (vec![7], vec![]));
    }

    fn fixture() -> (BlstmAcousticModel, Dataset) {
        let spec = CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 3,
            min_frames: 10,
            max_frames: 12,
            num_classes: 4,
            feature_dim: 3,
            ..CorpusSpec::desk()
        };
        (BlstmAcousticModel::build(3, 0, &[4, 4], 4, 0).unwrap(), generate(&spec).unwrap())
    }

    #[test]
    fn pseudo_labels_are_argmax() {
        let (m, data) = fixture();
        let views = utterance_views(&data, None, None).unwrap();
        let t = first_pass_targets(&m, &views).unwrap();
        let p = m.forward(&views[0], Mode::Eval).unwrap();
        for (row, &k) in t[0].iter().enumerate() {
            let best = (0..4)
                .max_by(|&a, &b| p[(row, a)].partial_cmp(&p[(row, b)]).unwrap().then(b.cmp(&a)))
                .unwrap();
            assert_eq!(k, best);
        }
    }

    #[test]
    fn evaluate_counts_by_hand() {
        let (m, _) = fixture();
        // three 10-frame utterances whose gold labels match the model's
        // prediction in 10, 5 and 0 frames respectively
        let mk = |id: &str, seed: f64| {
            FeatureMatrix::new(
                id,
                DMatrix::from_fn(10, 3, |t, j| (t as f64 * seed + j as f64).sin()),
                FeatureKind::Synthetic,
            )
            .unwrap()
        };
        let feats = [mk("a", 0.3), mk("b", 0.7), mk("c", 1.1)];
        let views: Vec<Utterance> = feats.iter().map(Utterance::new).collect();
        let pred = first_pass_targets(&m, &views).unwrap();
        let labels = [
            pred[0].clone(),
            pred[1]
                .iter()
                .enumerate()
                .map(|(t, &k)| if t < 5 { k } else { (k + 1) % 4 })
                .collect::<Vec<_>>(),
            pred[2].iter().map(|&k| (k + 1) % 4).collect(),
        ];
        let data = Dataset {
            utterances: feats
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (f, l))| CorpusUtterance {
                    id: f.utterance_id.clone(),
                    speaker: format!("s{i}"),
                    environment: if i < 2 { "x".into() } else { "y".into() },
                    features: f.clone(),
                    labels: l,
                })
                .collect(),
        };
        let r = evaluate(&m, &data, None, None, None).unwrap();
        assert!((r.overall - 15.0 / 30.0).abs() < 1e-15);
        assert!((r.by_environment["x"] - 5.0 / 20.0).abs() < 1e-15);
        assert_eq!(r.by_environment["y"], 1.0);
        assert_eq!(r.by_speaker["s0"], 0.0);
        let parts = PartitionSet::from_dataset(&data, PartitionKind::Speaker).unwrap();
        assert!(evaluate(&m, &data, None, Some(&parts), None).is_err());
    }

    #[test]
    fn zero_epochs_keep_identity() {
        let (m, data) = fixture();
        let config = AdaptationConfig {
            max_epochs: 0,
            ..AdaptationConfig::desk(PartitionKind::Environment, vec![0, 1])
        };
        let r = adapt_dataset(&m, &data, None, &config, None).unwrap();
        assert!(r.adaptations.iter().flat_map(|a| &a.transforms).all(AffineTransform::is_identity));
        assert_eq!(r.before.overall, r.after.overall);
    }

    #[test]
    fn adaptation_freezes_base_and_needs_slots() {
        let (m, data) = fixture();
        let config = AdaptationConfig {
            max_epochs: 3,
            ..AdaptationConfig::desk(PartitionKind::Speaker, vec![1])
        };
        let views = utterance_views(&data, None, None).unwrap();
        let targets = first_pass_targets(&m, &views).unwrap();
        assert!(matches!(
            adapt_partition(&m, "k", &views, &targets, &config),
            Err(Error::MissingSlot { .. })
        ));
        let mut with_slot = m.clone();
        with_slot.insert_affine(1, "k").unwrap();
        let before = with_slot.base_fingerprint();
        let r = adapt_partition(&with_slot, "k", &views, &targets, &config).unwrap();
        assert_eq!(with_slot.base_fingerprint(), before);
        assert_eq!(r.transforms.len(), 1);
        assert!(adapt_partition(&with_slot, "k", &[], &[], &config).is_err());
    }

    #[test]
    fn single_utterance_partition_runs_fixed_epochs() {
        let (mut m, data) = fixture();
        m.insert_affine(0, "solo").unwrap();
        let views = utterance_views(&data, None, None).unwrap();
        let targets = first_pass_targets(&m, &views[..1]).unwrap();
        let config = AdaptationConfig {
            max_epochs: 3,
            ..AdaptationConfig::desk(PartitionKind::Speaker, vec![0])
        };
        let r = adapt_partition(&m, "solo", &views[..1], &targets, &config).unwrap();
        assert_eq!(r.curve.len(), 3);
        assert!(r.curve.iter().all(|e| e.cvfa.is_none()));
    }

    #[test]
    fn regularizer_pulls_toward_identity_monotonically() {
        let mut w = Tensor::identity(3);
        w.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * (i as f64 - 4.0));
        let mut at = AffineTransform {
            position: 0,
            partition_key: "k".into(),
            forward: Affine {
                weight: w,
                bias: Tensor {
                    rows: 3,
                    cols: 1,
                    data: vec![0.5, -0.2, 0.3],
                },
            },
            backward: None,
        };
        let ids = [
            ParamId::Slot {
                position: 0,
                partition: "k".into(),
                backward: false,
                bias: false,
            },
            ParamId::Slot {
                position: 0,
                partition: "k".into(),
                backward: false,
                bias: true,
            },
        ];
        let mut vel = [at.forward.weight.zeros_like(), at.forward.bias.zeros_like()];
        let mut last = identity_penalty(std::slice::from_ref(&at), 1.0);
        for _ in 0..200 {
            for (k, id) in ids.iter().enumerate() {
                let p = if k == 0 { &mut at.forward.weight } else { &mut at.forward.bias };
                let mut g = p.zeros_like();
                add_penalty_gradient(id, p, &mut g, 0.01);
                momentum_step(p, &mut vel[k], &g, 0.05, 0.9);
            }
            let now = identity_penalty(std::slice::from_ref(&at), 1.0);
            assert!(now <= last);
            last = now;
        }
        assert!(last < 0.5);
    }
}
