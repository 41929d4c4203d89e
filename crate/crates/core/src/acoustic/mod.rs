//! BLSTM frame classifier with i-vector input augmentation and insertable
//! affine transformation (AT) slots.
//!
//! Slot indexing: slot 0 transforms the frame input (LIN); slot `k` for
//! `1 <= k < L` sits between BLSTM layers `k` and `k + 1` (LHN); slot `L`
//! transforms the top layer output before the softmax layer (LON). Slots
//! after a BLSTM layer hold one transform per direction. Every transform
//! starts as the identity.

mod lstm;
mod tensor;
mod train;

use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ivector::IVector;
use crate::util::{derive_seed, hash_f64s, log_sum_exp, rng};

pub use lstm::LstmDirection;
pub use tensor::Tensor;
pub use train::{cross_validation_accuracy, train_model, EpochLog, Example, OptimizerKind, TrainConfig};

/// Weight matrix plus bias with identity activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor,
    /// rows x 1
    pub bias: Tensor,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(n, 1),
        }
    }

    fn random<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::glorot(rows, cols, rng),
            bias: Tensor::zeros(rows, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    /// Row-wise `W x_t + b` over a T x in sequence.
    fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows, self.weight.rows);
        for t in 0..x.rows {
            let o = out.row_mut(t);
            o.copy_from_slice(&self.bias.data);
            self.weight.matvec_add(x.row(t), o);
        }
        out
    }

    /// Accumulates parameter gradients (if requested) and returns dL/dx.
    fn backward(&self, x: &Tensor, d_out: &Tensor, grads: Option<&mut Affine>) -> Tensor {
        let mut d_in = Tensor::zeros(x.rows, x.cols);
        for t in 0..x.rows {
            self.weight.matvec_t_add(d_out.row(t), d_in.row_mut(t));
        }
        if let Some(g) = grads {
            for t in 0..x.rows {
                g.weight.outer_add(d_out.row(t), x.row(t));
                for (b, d) in g.bias.data.iter_mut().zip(d_out.row(t)) {
                    *b += d;
                }
            }
        }
        d_in
    }
}

/// Identity-initialized adaptation layer owned by one partition at one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub position: usize,
    pub partition_key: String,
    /// The only transform at slot 0; the forward-direction one elsewhere.
    pub forward: Affine,
    /// Backward-direction transform, absent at slot 0.
    pub backward: Option<Affine>,
}

impl AffineTransform {
    fn zeros_like(&self) -> Self {
        Self {
            position: self.position,
            partition_key: self.partition_key.clone(),
            forward: self.forward.zeros_like(),
            backward: self.backward.as_ref().map(Affine::zeros_like),
        }
    }

    pub fn is_identity(&self) -> bool {
        let ident = |a: &Affine| a.weight == Tensor::identity(a.weight.rows) && a.bias.data.iter().all(|&b| b == 0.0);
        ident(&self.forward) && self.backward.as_ref().is_none_or(ident)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BlstmLayer {
    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }
}

pub type SlotKey = (usize, String);

/// All trainable tensors; also the shape of a full gradient set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<BlstmLayer>,
    /// K x 2H softmax layer.
    pub output: Affine,
    pub at_slots: BTreeMap<SlotKey, AffineTransform>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LstmPart {
    InputWeights,
    RecurrentWeights,
    Bias,
}

/// Addresses one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Lstm {
        layer: usize,
        backward: bool,
        part: LstmPart,
    },
    Output {
        bias: bool,
    },
    Slot {
        position: usize,
        partition: String,
        backward: bool,
        bias: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    InputToHidden,
    Recurrent,
    LstmBias,
    Softmax,
    AffineWeight,
    AffineBias,
}

impl ParamId {
    pub fn class(&self) -> ParamClass {
        match self {
            ParamId::Lstm {
                part: LstmPart::InputWeights,
                ..
            } => ParamClass::InputToHidden,
            ParamId::Lstm {
                part: LstmPart::RecurrentWeights,
                ..
            } => ParamClass::Recurrent,
            ParamId::Lstm { part: LstmPart::Bias, .. } => ParamClass::LstmBias,
            ParamId::Output { .. } => ParamClass::Softmax,
            ParamId::Slot { bias: false, .. } => ParamClass::AffineWeight,
            ParamId::Slot { bias: true, .. } => ParamClass::AffineBias,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, ParamId::Slot { .. })
    }

    /// Weight matrices (not biases) receive L2 regularization.
    pub fn is_weight(&self) -> bool {
        match self {
            ParamId::Lstm { part, .. } => *part != LstmPart::Bias,
            ParamId::Output { bias } | ParamId::Slot { bias, .. } => !bias,
        }
    }
}

impl Params {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in 0..self.layers.len() {
            for backward in [false, true] {
                for part in [LstmPart::InputWeights, LstmPart::RecurrentWeights, LstmPart::Bias] {
                    ids.push(ParamId::Lstm { layer, backward, part });
                }
            }
        }
        ids.push(ParamId::Output { bias: false });
        ids.push(ParamId::Output { bias: true });
        for ((position, partition), at) in &self.at_slots {
            let dirs: &[bool] = if at.backward.is_some() { &[false, true] } else { &[false] };
            for &backward in dirs {
                for bias in [false, true] {
                    ids.push(ParamId::Slot {
                        position: *position,
                        partition: partition.clone(),
                        backward,
                        bias,
                    });
                }
            }
        }
        ids
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Lstm { layer, backward, part } => {
                let l = self.layers.get(*layer)?;
                let d = if *backward { &l.backward } else { &l.forward };
                Some(match part {
                    LstmPart::InputWeights => &d.input_weights,
                    LstmPart::RecurrentWeights => &d.recurrent_weights,
                    LstmPart::Bias => &d.bias,
                })
            }
            ParamId::Output { bias } => Some(if *bias { &self.output.bias } else { &self.output.weight }),
            ParamId::Slot {
                position,
                partition,
                backward,
                bias,
            } => {
                let at = self.at_slots.get(&(*position, partition.clone()))?;
                let a = if *backward { at.backward.as_ref()? } else { &at.forward };
                Some(if *bias { &a.bias } else { &a.weight })
            }
        }
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Lstm { layer, backward, part } => {
                let l = self.layers.get_mut(*layer)?;
                let d = if *backward { &mut l.backward } else { &mut l.forward };
                Some(match part {
                    LstmPart::InputWeights => &mut d.input_weights,
                    LstmPart::RecurrentWeights => &mut d.recurrent_weights,
                    LstmPart::Bias => &mut d.bias,
                })
            }
            ParamId::Output { bias } => Some(if *bias { &mut self.output.bias } else { &mut self.output.weight }),
            ParamId::Slot {
                position,
                partition,
                backward,
                bias,
            } => {
                let at = self.at_slots.get_mut(&(*position, partition.clone()))?;
                let a = if *backward { at.backward.as_mut()? } else { &mut at.forward };
                Some(if *bias { &mut a.bias } else { &mut a.weight })
            }
        }
    }
}

/// Which parameters a backward pass produces gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only AT slots; every other gradient is returned zero-length.
    AffineOnly,
}

/// Gradients keyed by parameter; frozen parameters map to empty tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub tensors: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    /// Elementwise accumulation; both sets must have the same keys.
    pub fn add(&mut self, other: &Gradients) {
        for (id, t) in &other.tensors {
            match self.tensors.get_mut(id) {
                Some(mine) if !mine.is_empty() => mine.add_scaled(1.0, t),
                Some(_) => {}
                None => {
                    self.tensors.insert(id.clone(), t.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.values_mut().for_each(|t| t.scale(alpha));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout on every BLSTM layer output, masks drawn from `seed`.
    Train {
        dropout: f64,
        seed: u64,
    },
}

/// One utterance presented to the network.
#[derive(Clone, Copy, Debug)]
pub struct Utterance<'a> {
    pub features: &'a FeatureMatrix,
    pub ivector: Option<&'a IVector>,
    /// Partition keys whose AT slots are active; the first key wins when
    /// both own a transform at the same slot.
    pub partitions: [Option<&'a str>; 2],
}

impl<'a> Utterance<'a> {
    pub fn new(features: &'a FeatureMatrix) -> Self {
        Self {
            features,
            ivector: None,
            partitions: [None, None],
        }
    }

    pub fn with_ivector(mut self, iv: Option<&'a IVector>) -> Self {
        self.ivector = iv;
        self
    }

    pub fn with_partition(mut self, key: Option<&'a str>) -> Self {
        self.partitions[0] = key;
        self
    }

    /// A second active key, used when cascading two adaptation passes.
    pub fn with_secondary_partition(mut self, key: Option<&'a str>) -> Self {
        self.partitions[1] = key;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlstmAcousticModel {
    pub feature_dim: usize,
    /// 0 when the model consumes bare features.
    pub ivector_dim: usize,
    pub output_dim: usize,
    pub params: Params,
}

struct LayerTrace {
    input: Tensor,
    forward: lstm::LstmTrace,
    backward: lstm::LstmTrace,
    /// Scaled keep-mask (T x 2H) when dropout was applied.
    dropout: Option<Tensor>,
    /// Layer output after dropout, i.e. what the following slot sees.
    output: Tensor,
}

struct ForwardTrace {
    raw_input: Tensor,
    layers: Vec<LayerTrace>,
    top: Tensor,
    log_posteriors: Tensor,
}

fn split_directions(y: &Tensor, h: usize) -> (Tensor, Tensor) {
    let mut f = Tensor::zeros(y.rows, h);
    let mut b = Tensor::zeros(y.rows, h);
    for t in 0..y.rows {
        f.row_mut(t).copy_from_slice(&y.row(t)[..h]);
        b.row_mut(t).copy_from_slice(&y.row(t)[h..]);
    }
    (f, b)
}

fn join_directions(f: &Tensor, b: &Tensor) -> Tensor {
    let h = f.cols;
    let mut y = Tensor::zeros(f.rows, 2 * h);
    for t in 0..f.rows {
        y.row_mut(t)[..h].copy_from_slice(f.row(t));
        y.row_mut(t)[h..].copy_from_slice(b.row(t));
    }
    y
}

/// Mean over frames of `-(1 - p_t)^gamma * log p_t`.
pub fn focal_loss(posteriors: &DMatrix<f64>, targets: &[usize], gamma: f64) -> Result<f64> {
    if targets.len() != posteriors.nrows() || targets.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "loss targets",
            expected: posteriors.nrows(),
            got: targets.len(),
        });
    }
    let mut total = 0.0;
    for (t, &k) in targets.iter().enumerate() {
        if k >= posteriors.ncols() {
            return Err(Error::invalid(format!("target {k} out of range for {} classes", posteriors.ncols())));
        }
        let p = posteriors[(t, k)];
        total += -(1.0 - p).powf(gamma) * p.ln();
    }
    Ok(total / targets.len() as f64)
}

/// Per-frame focal loss and its gradient with respect to the logits.
fn focal_terms(log_p: &[f64], target: usize, gamma: f64, d_logits: &mut [f64]) -> f64 {
    let lp = log_p[target];
    let p = lp.exp();
    let q = 1.0 - p;
    let loss = -q.powf(gamma) * lp;
    // dL/dp_t, then chain through the softmax
    let dl_dp = if gamma == 0.0 {
        -1.0 / p
    } else {
        let mod_term = if q > 0.0 { gamma * q.powf(gamma - 1.0) * lp } else { 0.0 };
        mod_term - q.powf(gamma) / p
    };
    for (j, d) in d_logits.iter_mut().enumerate() {
        let pj = log_p[j].exp();
        let delta = if j == target { 1.0 } else { 0.0 };
        *d = dl_dp * p * (delta - pj);
    }
    loss
}

impl BlstmAcousticModel {
    /// Builds a randomly initialized model without AT slots.
    pub fn build(feature_dim: usize, ivector_dim: usize, layer_sizes: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim < 2 {
            return Err(Error::invalid("the model needs at least two output classes"));
        }
        if layer_sizes.is_empty() || layer_sizes.contains(&0) || feature_dim == 0 {
            return Err(Error::invalid("layer sizes and feature dim must be positive"));
        }
        let mut r = rng(seed);
        let mut input = feature_dim + ivector_dim;
        let mut layers = Vec::with_capacity(layer_sizes.len());
        for &h in layer_sizes {
            layers.push(BlstmLayer {
                forward: LstmDirection::new(input, h, &mut r),
                backward: LstmDirection::new(input, h, &mut r),
            });
            input = 2 * h;
        }
        let output = Affine::random(output_dim, input, &mut r);
        Ok(Self {
            feature_dim,
            ivector_dim,
            output_dim,
            params: Params {
                layers,
                output,
                at_slots: BTreeMap::new(),
            },
        })
    }

    pub fn num_layers(&self) -> usize {
        self.params.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.ivector_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.params.layers.iter().map(BlstmLayer::hidden).collect()
    }

    /// Dimension a transform at `position` operates on (per direction in between).
    pub fn slot_dim(&self, position: usize) -> Result<usize> {
        let l = self.num_layers();
        match position {
            0 => Ok(self.input_dim()),
            p if p <= l => Ok(self.params.layers[p - 1].hidden()),
            p => Err(Error::InvalidSlot { position: p, max: l }),
        }
    }

    /// Registers an identity transform for `(position, partition_key)`.
    pub fn insert_affine(&mut self, position: usize, partition_key: &str) -> Result<&AffineTransform> {
        let dim = self.slot_dim(position)?;
        let key = (position, partition_key.to_string());
        if self.params.at_slots.contains_key(&key) {
            return Err(Error::DuplicateSlot {
                position,
                partition: partition_key.to_string(),
            });
        }
        let interior = position > 0;
        let at = AffineTransform {
            position,
            partition_key: partition_key.to_string(),
            forward: Affine::identity(dim),
            backward: interior.then(|| Affine::identity(dim)),
        };
        Ok(self.params.at_slots.entry(key).or_insert(at))
    }

    pub fn transform(&self, position: usize, partition_key: &str) -> Option<&AffineTransform> {
        self.params.at_slots.get(&(position, partition_key.to_string()))
    }

    /// Positions populated for one partition.
    pub fn positions_for(&self, partition_key: &str) -> Vec<usize> {
        self.params.at_slots.keys().filter(|(_, k)| k == partition_key).map(|(p, _)| *p).collect()
    }

    pub fn remove_transforms(&mut self) {
        self.params.at_slots.clear();
    }

    /// Hash of every non-AT parameter.
    pub fn base_fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        for id in self.params.ids().iter().filter(|id| !id.is_affine()) {
            hash_f64s(&mut h, &self.params.get(id).unwrap().data);
        }
        h.finish()
    }

    fn build_input(&self, u: &Utterance) -> Result<Tensor> {
        let f = u.features;
        if f.dim() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "model features",
                expected: self.feature_dim,
                got: f.dim(),
            });
        }
        match (self.ivector_dim, u.ivector) {
            (0, Some(_)) => return Err(Error::invalid("model was built without i-vector input")),
            (d, None) if d > 0 => return Err(Error::invalid("model expects an i-vector")),
            (d, Some(iv)) if iv.dim() != d => {
                return Err(Error::DimensionMismatch {
                    what: "i-vector",
                    expected: d,
                    got: iv.dim(),
                })
            }
            _ => {}
        }
        let mut x = Tensor::zeros(f.num_frames(), self.input_dim());
        for t in 0..f.num_frames() {
            let row = x.row_mut(t);
            for j in 0..self.feature_dim {
                row[j] = f.frames[(t, j)];
            }
            if let Some(iv) = u.ivector {
                row[self.feature_dim..].copy_from_slice(iv.values.as_slice());
            }
        }
        Ok(x)
    }

    fn active_slot(&self, position: usize, partitions: [Option<&str>; 2]) -> Option<&AffineTransform> {
        partitions.iter().flatten().find_map(|p| self.transform(position, p))
    }

    fn run(&self, u: &Utterance, mode: Mode, depth: usize) -> Result<ForwardTrace> {
        let raw_input = self.build_input(u)?;
        let mut x = match self.active_slot(0, u.partitions) {
            Some(at) => at.forward.apply(&raw_input),
            None => raw_input.clone(),
        };
        let mut layers = Vec::with_capacity(depth);
        for (l, layer) in self.params.layers.iter().take(depth).enumerate() {
            let fwd = lstm::forward(&layer.forward, &x, false);
            let bwd = lstm::forward(&layer.backward, &x, true);
            let mut y = join_directions(&fwd.hidden, &bwd.hidden);
            let dropout = match mode {
                Mode::Train { dropout, seed } if dropout > 0.0 => {
                    let mut r = rng(derive_seed(seed, &format!("dropout/{l}")));
                    let keep = 1.0 - dropout;
                    let mut mask = Tensor::zeros(y.rows, y.cols);
                    mask.data
                        .iter_mut()
                        .for_each(|m| *m = if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    y.data.iter_mut().zip(&mask.data).for_each(|(v, m)| *v *= m);
                    Some(mask)
                }
                _ => None,
            };
            let next = match self.active_slot(l + 1, u.partitions) {
                Some(at) => {
                    let h = layer.hidden();
                    let (yf, yb) = split_directions(&y, h);
                    let back = at.backward.as_ref().expect("interior slot has a backward transform");
                    join_directions(&at.forward.apply(&yf), &back.apply(&yb))
                }
                _ => y.clone(),
            };
            layers.push(LayerTrace {
                input: x,
                forward: fwd,
                backward: bwd,
                dropout,
                output: y,
            });
            x = next;
        }
        let top = x;
        let logits = self.params.output.apply(&top);
        let mut log_posteriors = logits.clone();
        for t in 0..log_posteriors.rows {
            let row = log_posteriors.row_mut(t);
            let z = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= z);
        }
        Ok(ForwardTrace {
            raw_input,
            layers,
            top,
            log_posteriors,
        })
    }

    /// Frame posteriors (T x K), each row a distribution.
    pub fn forward(&self, u: &Utterance, mode: Mode) -> Result<DMatrix<f64>> {
        self.forward_depth(u, mode, self.num_layers())
    }

    /// Forward pass through only the first `depth` layers (layer-wise pretraining).
    pub fn forward_depth(&self, u: &Utterance, mode: Mode, depth: usize) -> Result<DMatrix<f64>> {
        self.check_depth(depth)?;
        let trace = self.run(u, mode, depth)?;
        let mut p = trace.log_posteriors.to_dmatrix();
        p.apply(|v| *v = v.exp());
        Ok(p)
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        let sizes = self.layer_sizes();
        if depth == 0 || depth > sizes.len() {
            return Err(Error::invalid(format!("depth {depth} outside 1..={}", sizes.len())));
        }
        if 2 * sizes[depth - 1] != self.params.output.weight.cols {
            return Err(Error::invalid("truncated depth requires uniform layer sizes"));
        }
        Ok(())
    }

    /// Gradient of the mean-over-frames focal loss for one utterance.
    pub fn backward(&self, u: &Utterance, targets: &[usize], gamma: f64, mode: Mode, trainable: Trainable) -> Result<(f64, Gradients)> {
        let (loss, mut grads) = self.backward_sum(u, targets, gamma, mode, trainable, self.num_layers())?;
        let scale = 1.0 / targets.len() as f64;
        grads.scale(scale);
        Ok((loss * scale, grads))
    }

    /// Summed (not averaged) loss and gradients; `depth` layers active.
    pub(crate) fn backward_sum(
        &self,
        u: &Utterance,
        targets: &[usize],
        gamma: f64,
        mode: Mode,
        trainable: Trainable,
        depth: usize,
    ) -> Result<(f64, Gradients)> {
        self.check_depth(depth)?;
        let t_len = u.features.num_frames();
        if targets.len() != t_len {
            return Err(Error::DimensionMismatch {
                what: "frame targets",
                expected: t_len,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= self.output_dim) {
            return Err(Error::invalid(format!("target {bad} out of range for {} classes", self.output_dim)));
        }
        let trace = self.run(u, mode, depth)?;
        let base = trainable == Trainable::All;
        let mut g_layers: Vec<BlstmLayer> = self
            .params
            .layers
            .iter()
            .map(|l| BlstmLayer {
                forward: l.forward.zeros_like(),
                backward: l.backward.zeros_like(),
            })
            .collect();
        let mut g_output = self.params.output.zeros_like();
        let mut g_slots: BTreeMap<SlotKey, AffineTransform> = BTreeMap::new();
        for p in u.partitions.iter().flatten() {
            for (key, at) in self.params.at_slots.iter().filter(|((_, k), _)| k == p) {
                g_slots.insert(key.clone(), at.zeros_like());
            }
        }

        let mut loss = 0.0;
        let mut d_final = Tensor::zeros(t_len, self.output_dim);
        for t in 0..t_len {
            loss += focal_terms(trace.log_posteriors.row(t), targets[t], gamma, d_final.row_mut(t));
        }

        let mut d_x = self.params.output.backward(&trace.top, &d_final, base.then_some(&mut g_output));

        for l in (0..depth).rev() {
            let layer = &self.params.layers[l];
            let lt = &trace.layers[l];
            let h = layer.hidden();
            // d_x is the gradient w.r.t. the input of layer l + 1 (or the top)
            let mut d_y = match self.active_slot(l + 1, u.partitions) {
                Some(at) => {
                    let (yf, yb) = split_directions(&lt.output, h);
                    let (df, db) = split_directions(&d_x, h);
                    let slot = g_slots.get_mut(&(l + 1, at.partition_key.clone())).unwrap();
                    let gf = at.forward.backward(&yf, &df, Some(&mut slot.forward));
                    let gb = at.backward.as_ref().unwrap().backward(&yb, &db, slot.backward.as_mut());
                    join_directions(&gf, &gb)
                }
                _ => d_x,
            };
            if let Some(mask) = &lt.dropout {
                d_y.data.iter_mut().zip(&mask.data).for_each(|(d, m)| *d *= m);
            }
            let (dhf, dhb) = split_directions(&d_y, h);
            let mut d_in = Tensor::zeros(lt.input.rows, lt.input.cols);
            let gl = &mut g_layers[l];
            lstm::backward(
                &layer.forward,
                &lt.input,
                &lt.forward,
                &dhf,
                false,
                base.then_some(&mut gl.forward),
                &mut d_in,
            );
            lstm::backward(
                &layer.backward,
                &lt.input,
                &lt.backward,
                &dhb,
                true,
                base.then_some(&mut gl.backward),
                &mut d_in,
            );
            d_x = d_in;
        }
        if let Some(at) = self.active_slot(0, u.partitions) {
            let slot = g_slots.get_mut(&(0, at.partition_key.clone())).unwrap();
            at.forward.backward(&trace.raw_input, &d_x, Some(&mut slot.forward));
        }

        let grads_params = Params {
            layers: g_layers,
            output: g_output,
            at_slots: g_slots,
        };
        let mut grads = Gradients::default();
        for id in grads_params.ids() {
            let t = if base || id.is_affine() {
                grads_params.get(&id).unwrap().clone()
            } else {
                Tensor::empty()
            };
            grads.tensors.insert(id, t);
        }
        Ok((loss, grads))
    }

    /// Summed focal loss of one utterance (used by finite-difference checks).
    pub fn loss(&self, u: &Utterance, targets: &[usize], gamma: f64, mode: Mode) -> Result<f64> {
        let p = self.forward(u, mode)?;
        focal_loss(&p, targets, gamma)
    }
}
