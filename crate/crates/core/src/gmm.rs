//! Diagonal-covariance Gaussian mixtures.
//!
//! EM training with LBG binary-splitting initialization, frame scoring,
//! Baum-Welch statistics for the i-vector extractor and a two-class
//! speech/non-speech classifier.

use std::f64::consts::PI;
use std::hash::Hasher;

use fnv::FnvHasher;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::util::{all_finite, hash_f64s, log_sum_exp, rng};

/// Relative variance floor: 1e-3 times the global per-dimension variance.
pub const VARIANCE_FLOOR_SCALE: f64 = 1e-3;

const SPLIT_PERTURBATION: f64 = 0.2;
const SPLIT_EM_PASSES: usize = 5;
const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    /// C x D
    pub means: DMatrix<f64>,
    /// C x D
    pub variances: DMatrix<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.nrows() != c || variances.shape() != means.shape() || means.ncols() == 0 {
            return Err(Error::invalid("GMM parameter shapes are inconsistent"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("GMM weights must be non-negative and sum to one"));
        }
        if variances.iter().any(|&v| !(v > 0.0)) || !all_finite(means.iter()) {
            return Err(Error::invalid("GMM variances must be positive and means finite"));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Hash of all parameters; ties statistics and extractors to one UBM.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write_usize(self.num_components());
        h.write_usize(self.dim());
        hash_f64s(&mut h, &self.weights);
        hash_f64s(&mut h, self.means.iter());
        hash_f64s(&mut h, self.variances.iter());
        h.finish()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "GMM frame",
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn log_likelihood(&self, frame: &[f64]) -> Result<f64> {
        self.check_dim(frame.len())?;
        let scorer = Scorer::new(self);
        let mut buf = vec![0.0; self.num_components()];
        scorer.component_logs(frame, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Component responsibilities for one frame.
    pub fn posteriors(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(frame.len())?;
        let scorer = Scorer::new(self);
        let mut buf = vec![0.0; self.num_components()];
        scorer.posteriors(frame, &mut buf);
        Ok(buf)
    }

    /// Sum of frame log-likelihoods over the rows of `frames`.
    pub fn total_log_likelihood(&self, frames: &DMatrix<f64>) -> Result<f64> {
        self.check_dim(frames.ncols())?;
        let data = RowMajor::from(frames);
        let scorer = Scorer::new(self);
        let c = self.num_components();
        let partial: Vec<f64> = data
            .chunks()
            .into_par_iter()
            .map(|(start, end)| {
                let mut buf = vec![0.0; c];
                (start..end)
                    .map(|n| {
                        scorer.component_logs(data.row(n), &mut buf);
                        log_sum_exp(&buf)
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(partial.iter().sum())
    }
}

/// Precomputed per-component constants for fast scoring.
pub(crate) struct Scorer {
    dim: usize,
    log_consts: Vec<f64>,
    means: Vec<f64>,
    inv_vars: Vec<f64>,
}

impl Scorer {
    pub(crate) fn new(g: &DiagonalGmm) -> Self {
        let (c, d) = g.means.shape();
        let mut means = Vec::with_capacity(c * d);
        let mut inv_vars = Vec::with_capacity(c * d);
        let mut log_consts = Vec::with_capacity(c);
        for k in 0..c {
            let mut log_det = 0.0;
            for j in 0..d {
                means.push(g.means[(k, j)]);
                inv_vars.push(1.0 / g.variances[(k, j)]);
                log_det += (2.0 * PI * g.variances[(k, j)]).ln();
            }
            log_consts.push(g.weights[k].ln() - 0.5 * log_det);
        }
        Self {
            dim: d,
            log_consts,
            means,
            inv_vars,
        }
    }

    /// log(w_c) + log N(x; mu_c, sigma_c^2) for each component.
    pub(crate) fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (k, slot) in out.iter_mut().enumerate() {
            let mu = &self.means[k * d..(k + 1) * d];
            let iv = &self.inv_vars[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                let diff = x[j] - mu[j];
                acc += diff * diff * iv[j];
            }
            *slot = self.log_consts[k] - 0.5 * acc;
        }
    }

    /// Writes posteriors into `out`, returns the frame log-likelihood.
    pub(crate) fn posteriors(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.component_logs(x, out);
        let total = log_sum_exp(out);
        for v in out.iter_mut() {
            *v = (*v - total).exp();
        }
        total
    }
}

/// Row-major copy of a frame matrix for contiguous per-frame access.
pub(crate) struct RowMajor {
    pub(crate) data: Vec<f64>,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
}

impl From<&DMatrix<f64>> for RowMajor {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            data: m.transpose().as_slice().to_vec(),
            rows: m.nrows(),
            cols: m.ncols(),
        }
    }
}

impl RowMajor {
    pub(crate) fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    /// Fixed chunk boundaries; reductions over them run in this order.
    fn chunks(&self) -> Vec<(usize, usize)> {
        (0..self.rows).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(self.rows))).collect()
    }
}

struct EmAccumulator {
    log_likelihood: f64,
    counts: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl EmAccumulator {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            log_likelihood: 0.0,
            counts: vec![0.0; c],
            first: vec![0.0; c * d],
            second: vec![0.0; c * d],
        }
    }

    fn merge(&mut self, other: &EmAccumulator) {
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            *a += b;
        }
    }
}

fn e_step(g: &DiagonalGmm, data: &RowMajor) -> EmAccumulator {
    let (c, d) = (g.num_components(), g.dim());
    let scorer = Scorer::new(g);
    let partial: Vec<EmAccumulator> = data
        .chunks()
        .into_par_iter()
        .map(|(start, end)| {
            let mut acc = EmAccumulator::zeros(c, d);
            let mut post = vec![0.0; c];
            for n in start..end {
                let x = data.row(n);
                acc.log_likelihood += scorer.posteriors(x, &mut post);
                for k in 0..c {
                    let p = post[k];
                    if p == 0.0 {
                        continue;
                    }
                    acc.counts[k] += p;
                    let first = &mut acc.first[k * d..(k + 1) * d];
                    let second = &mut acc.second[k * d..(k + 1) * d];
                    for j in 0..d {
                        first[j] += p * x[j];
                        second[j] += p * x[j] * x[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = EmAccumulator::zeros(c, d);
    for p in &partial {
        total.merge(p);
    }
    total
}

/// Result of [`fit_gmm`].
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub gmm: DiagonalGmm,
    /// Dataset log-likelihood before each EM pass and after the last one.
    pub log_likelihoods: Vec<f64>,
    /// Number of times an empty component was re-seeded.
    pub resplits: usize,
}

/// Trains a diagonal GMM by LBG splitting followed by `iterations` EM passes.
pub fn fit_gmm(frames: &DMatrix<f64>, components: usize, iterations: usize, seed: u64) -> Result<GmmFit> {
    let (n, d) = frames.shape();
    if components == 0 || iterations == 0 {
        return Err(Error::invalid("GMM needs at least one component and one iteration"));
    }
    if n < components {
        return Err(Error::invalid(format!("{n} frames cannot support {components} components")));
    }
    if d == 0 || !all_finite(frames.iter()) {
        return Err(Error::NonFinite("GMM training frames"));
    }
    let data = RowMajor::from(frames);

    let mean: Vec<f64> = (0..d).map(|j| frames.column(j).sum() / n as f64).collect();
    let var: Vec<f64> = (0..d)
        .map(|j| frames.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let floor: Vec<f64> = var.iter().map(|v| (VARIANCE_FLOOR_SCALE * v).max(f64::MIN_POSITIVE)).collect();
    let mut r = rng(seed);
    let direction: Vec<f64> = (0..d).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();

    let mut gmm = DiagonalGmm {
        weights: vec![1.0],
        means: DMatrix::from_row_slice(1, d, &mean),
        variances: DMatrix::from_fn(1, d, |_, j| var[j].max(floor[j])),
    };
    let mut resplits = 0;
    while gmm.num_components() < components {
        let splits = gmm.num_components().min(components - gmm.num_components());
        gmm = split_heaviest(&gmm, splits, &direction);
        for _ in 0..SPLIT_EM_PASSES {
            let acc = e_step(&gmm, &data);
            let (next, fixed) = m_step(&gmm, &acc, &floor, &direction);
            resplits += fixed;
            gmm = next;
        }
    }

    let mut log_likelihoods = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let acc = e_step(&gmm, &data);
        log_likelihoods.push(acc.log_likelihood);
        let (next, fixed) = m_step(&gmm, &acc, &floor, &direction);
        resplits += fixed;
        gmm = next;
    }
    log_likelihoods.push(gmm.total_log_likelihood(frames)?);
    Ok(GmmFit {
        gmm,
        log_likelihoods,
        resplits,
    })
}

/// Splits the `count` heaviest components into pairs at mu +/- 0.2 sigma.
fn split_heaviest(g: &DiagonalGmm, count: usize, direction: &[f64]) -> DiagonalGmm {
    let mut order: Vec<usize> = (0..g.num_components()).collect();
    order.sort_by(|&a, &b| g.weights[b].partial_cmp(&g.weights[a]).unwrap().then(a.cmp(&b)));
    let to_split = &order[..count];
    let d = g.dim();
    let total = g.num_components() + count;
    let mut weights = Vec::with_capacity(total);
    let mut means = DMatrix::zeros(total, d);
    let mut variances = DMatrix::zeros(total, d);
    let mut row = 0;
    for k in 0..g.num_components() {
        let split = to_split.contains(&k);
        let copies: &[f64] = if split { &[1.0, -1.0] } else { &[0.0] };
        for &sign in copies {
            weights.push(if split { g.weights[k] / 2.0 } else { g.weights[k] });
            for j in 0..d {
                let sd = g.variances[(k, j)].sqrt();
                means[(row, j)] = g.means[(k, j)] + sign * SPLIT_PERTURBATION * sd * direction[j];
                variances[(row, j)] = g.variances[(k, j)];
            }
            row += 1;
        }
    }
    DiagonalGmm { weights, means, variances }
}

fn m_step(g: &DiagonalGmm, acc: &EmAccumulator, floor: &[f64], direction: &[f64]) -> (DiagonalGmm, usize) {
    let (c, d) = (g.num_components(), g.dim());
    let n: f64 = acc.counts.iter().sum();
    let empty_threshold = 1e-6 * n;
    let mut out = g.clone();
    let mut empty = Vec::new();
    for k in 0..c {
        let nk = acc.counts[k];
        if nk <= empty_threshold {
            empty.push(k);
            continue;
        }
        out.weights[k] = nk / n;
        for j in 0..d {
            let mu = acc.first[k * d + j] / nk;
            let var = acc.second[k * d + j] / nk - mu * mu;
            out.means[(k, j)] = mu;
            out.variances[(k, j)] = var.max(floor[j]);
        }
    }
    for &k in &empty {
        // re-seed from the heaviest component
        let heavy = (0..c)
            .filter(|i| !empty.contains(i))
            .max_by(|&a, &b| out.weights[a].partial_cmp(&out.weights[b]).unwrap().then(b.cmp(&a)))
            .expect("at least one populated component");
        log::warn!("GMM component {k} is empty; re-splitting component {heavy}");
        let half = out.weights[heavy] / 2.0;
        out.weights[heavy] = half;
        out.weights[k] = half;
        for j in 0..d {
            let sd = out.variances[(heavy, j)].sqrt();
            let mu = out.means[(heavy, j)];
            out.means[(heavy, j)] = mu + SPLIT_PERTURBATION * sd * direction[j];
            out.means[(k, j)] = mu - SPLIT_PERTURBATION * sd * direction[j];
            out.variances[(k, j)] = out.variances[(heavy, j)];
        }
    }
    let total: f64 = out.weights.iter().sum();
    out.weights.iter_mut().for_each(|w| *w /= total);
    (out, empty.len())
}

/// Zeroth and centered first-order Baum-Welch statistics of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BwStats {
    pub utterance_id: String,
    /// Soft counts N_c.
    pub zeroth: Vec<f64>,
    /// C x D, F_c = sum_t gamma_t(c) (x_t - mu_c).
    pub first_centered: DMatrix<f64>,
    pub frame_count: usize,
    pub ubm_fingerprint: u64,
}

impl BwStats {
    /// Elementwise sum of two utterances' statistics.
    pub fn add(&mut self, other: &BwStats) -> Result<()> {
        if self.ubm_fingerprint != other.ubm_fingerprint {
            return Err(Error::UbmMismatch);
        }
        for (a, b) in self.zeroth.iter_mut().zip(&other.zeroth) {
            *a += b;
        }
        self.first_centered += &other.first_centered;
        self.frame_count += other.frame_count;
        Ok(())
    }

    /// Scales both statistic orders by `alpha`; the frame count is kept.
    pub fn scaled(&self, alpha: f64) -> BwStats {
        BwStats {
            zeroth: self.zeroth.iter().map(|n| n * alpha).collect(),
            first_centered: &self.first_centered * alpha,
            ..self.clone()
        }
    }
}

/// Accumulates statistics over the frames selected by `mask`.
pub fn accumulate_stats(g: &DiagonalGmm, f: &FeatureMatrix, mask: &[bool]) -> Result<BwStats> {
    g.check_dim(f.dim())?;
    if mask.len() != f.num_frames() {
        return Err(Error::DimensionMismatch {
            what: "speech mask",
            expected: f.num_frames(),
            got: mask.len(),
        });
    }
    let (c, d) = (g.num_components(), g.dim());
    let scorer = Scorer::new(g);
    let mut zeroth = vec![0.0; c];
    let mut first = DMatrix::zeros(c, d);
    let mut post = vec![0.0; c];
    let mut frame = vec![0.0; d];
    let mut frame_count = 0;
    for t in (0..f.num_frames()).filter(|&t| mask[t]) {
        for (j, v) in frame.iter_mut().enumerate() {
            *v = f.frames[(t, j)];
        }
        scorer.posteriors(&frame, &mut post);
        frame_count += 1;
        for k in 0..c {
            zeroth[k] += post[k];
            for j in 0..d {
                first[(k, j)] += post[k] * (frame[j] - g.means[(k, j)]);
            }
        }
    }
    if frame_count == 0 {
        return Err(Error::NoSpeech(f.utterance_id.clone()));
    }
    Ok(BwStats {
        utterance_id: f.utterance_id.clone(),
        zeroth,
        first_centered: first,
        frame_count,
        ubm_fingerprint: g.fingerprint(),
    })
}

/// Two-class speech/non-speech GMM classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VadModel {
    pub speech: DiagonalGmm,
    pub nonspeech: DiagonalGmm,
    pub prior_speech: f64,
}

impl VadModel {
    pub fn new(speech: DiagonalGmm, nonspeech: DiagonalGmm, prior_speech: f64) -> Result<Self> {
        if speech.dim() != nonspeech.dim() {
            return Err(Error::invalid("VAD class models differ in dimension"));
        }
        if !(prior_speech > 0.0 && prior_speech < 1.0) {
            return Err(Error::invalid("speech prior must be in (0, 1)"));
        }
        Ok(Self {
            speech,
            nonspeech,
            prior_speech,
        })
    }

    /// Marks a frame as speech when its speech score is at least the
    /// non-speech score; ties go to speech.
    pub fn classify_speech(&self, f: &FeatureMatrix) -> Result<Vec<bool>> {
        self.speech.check_dim(f.dim())?;
        let speech = Scorer::new(&self.speech);
        let non = Scorer::new(&self.nonspeech);
        let (ls, ln) = (self.prior_speech.ln(), (1.0 - self.prior_speech).ln());
        let mut bs = vec![0.0; self.speech.num_components()];
        let mut bn = vec![0.0; self.nonspeech.num_components()];
        Ok((0..f.num_frames())
            .map(|t| {
                let x = f.frame(t);
                speech.component_logs(&x, &mut bs);
                non.component_logs(&x, &mut bn);
                log_sum_exp(&bs) + ls >= log_sum_exp(&bn) + ln
            })
            .collect())
    }
}

/// Trains one GMM per class; the speech prior is the speech frame fraction.
pub fn train_vad(speech_frames: &DMatrix<f64>, nonspeech_frames: &DMatrix<f64>, components: usize, iterations: usize, seed: u64) -> Result<VadModel> {
    let (ns, nn) = (speech_frames.nrows(), nonspeech_frames.nrows());
    if ns == 0 || nn == 0 {
        return Err(Error::invalid("VAD training needs both speech and non-speech frames"));
    }
    let speech = fit_gmm(speech_frames, components.min(ns), iterations, seed)?.gmm;
    let nonspeech = fit_gmm(nonspeech_frames, components.min(nn), iterations, seed.wrapping_add(1))?.gmm;
    VadModel::new(speech, nonspeech, ns as f64 / (ns + nn) as f64)
}
