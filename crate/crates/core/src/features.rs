//! Frame-level feature extraction and transforms.
//!
//! Two filterbank frontends produce log-compressed energies from mono audio:
//! an ERB-spaced gammatone approximation (GT) and a mel filterbank with a DCT
//! on top (MFCC). On top of either, features can be extended with regression
//! deltas, spliced with temporal context and reduced by LDA.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::all_finite;

/// Floor applied to filter energies before taking the logarithm.
pub const LOG_ENERGY_FLOOR: f64 = 1e-10;

/// Half-width of the delta regression window.
pub const DELTA_WINDOW: usize = 2;

const CMVN_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Mfcc,
    Gt,
    GtDeriv,
    GtContextLda,
    MfccDeriv,
    MfccContextLda,
    Synthetic,
}

impl FeatureKind {
    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "MFCC",
            FeatureKind::Gt => "GT",
            FeatureKind::GtDeriv => "GT+derivatives",
            FeatureKind::GtContextLda => "GT+context+LDA",
            FeatureKind::MfccDeriv => "MFCC+derivatives",
            FeatureKind::MfccContextLda => "MFCC+context+LDA",
            FeatureKind::Synthetic => "synthetic",
        }
    }

    fn with_derivatives(self) -> Self {
        match self {
            FeatureKind::Gt => FeatureKind::GtDeriv,
            FeatureKind::Mfcc => FeatureKind::MfccDeriv,
            k => k,
        }
    }

    fn with_lda(self) -> Self {
        match self {
            FeatureKind::Gt | FeatureKind::GtDeriv => FeatureKind::GtContextLda,
            FeatureKind::Mfcc | FeatureKind::MfccDeriv => FeatureKind::MfccContextLda,
            k => k,
        }
    }
}

/// A T x D sequence of frame feature vectors belonging to one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    /// Rows are frames.
    pub frames: DMatrix<f64>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, frames: DMatrix<f64>, kind: FeatureKind) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::invalid("feature matrix must have at least one frame and one dimension"));
        }
        if !all_finite(frames.iter()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            frames,
            kind,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Copies frame `t` into a contiguous vector.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        self.frames.row(t).iter().copied().collect()
    }

    fn derived(&self, frames: DMatrix<f64>, kind: FeatureKind) -> Self {
        Self {
            utterance_id: self.utterance_id.clone(),
            frames,
            kind,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frontend {
    MelMfcc,
    ErbGt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub filter_count: usize,
    pub frontend: Frontend,
    /// Number of cepstra kept by the MFCC frontend, c0 included.
    pub cepstral_count: usize,
}

impl FrontendConfig {
    /// 40-channel gammatone-style filterbank on telephone-band audio.
    pub fn gammatone(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            filter_count: 40,
            frontend: Frontend::ErbGt,
            cepstral_count: 13,
        }
    }

    pub fn mfcc(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            filter_count: 23,
            frontend: Frontend::MelMfcc,
            cepstral_count: 13,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms <= self.frame_length_ms) {
            return Err(Error::invalid("frame shift must be positive and at most the frame length"));
        }
        if self.filter_count < 2 {
            return Err(Error::invalid("filter count must be at least 2"));
        }
        if self.frontend == Frontend::MelMfcc && (self.cepstral_count == 0 || self.cepstral_count > self.filter_count) {
            return Err(Error::invalid("cepstral count must be in 1..=filter count"));
        }
        Ok(())
    }

    pub fn frame_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_samples().next_power_of_two().max(512)
    }

    /// Output dimension of [`compute_features`].
    pub fn output_dim(&self) -> usize {
        match self.frontend {
            Frontend::ErbGt => self.filter_count,
            Frontend::MelMfcc => self.cepstral_count,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn hz_to_erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// Center frequencies (Hz) of the configured filters.
pub fn center_frequencies(config: &FrontendConfig) -> Vec<f64> {
    let nyquist = config.sample_rate as f64 / 2.0;
    let n = config.filter_count;
    match config.frontend {
        Frontend::ErbGt => {
            let lo = hz_to_erb_rate(100.0_f64.min(nyquist * 0.05));
            let hi = hz_to_erb_rate(nyquist * 0.9);
            (0..n).map(|j| erb_rate_to_hz(lo + (hi - lo) * j as f64 / (n - 1) as f64)).collect()
        }
        Frontend::MelMfcc => {
            let hi = hz_to_mel(nyquist);
            (1..=n).map(|j| mel_to_hz(hi * j as f64 / (n + 1) as f64)).collect()
        }
    }
}

/// Filter weights on the power spectrum, `filter_count x (fft_size/2 + 1)`.
pub fn filterbank_weights(config: &FrontendConfig) -> DMatrix<f64> {
    let nfft = config.fft_size();
    let bins = nfft / 2 + 1;
    let bin_hz = config.sample_rate as f64 / nfft as f64;
    let centers = center_frequencies(config);
    let mut w = DMatrix::zeros(config.filter_count, bins);
    match config.frontend {
        Frontend::ErbGt => {
            // 4th-order gammatone magnitude response, squared for power
            for (j, &fc) in centers.iter().enumerate() {
                let b = 1.019 * erb_bandwidth(fc);
                for k in 0..bins {
                    let x = (k as f64 * bin_hz - fc) / b;
                    w[(j, k)] = (1.0 + x * x).powi(-4);
                }
            }
        }
        Frontend::MelMfcc => {
            let hi = hz_to_mel(config.sample_rate as f64 / 2.0);
            let n = config.filter_count;
            let edge = |i: usize| mel_to_hz(hi * i as f64 / (n + 1) as f64);
            for j in 0..n {
                let (l, c, r) = (edge(j), edge(j + 1), edge(j + 2));
                for k in 0..bins {
                    let f = k as f64 * bin_hz;
                    w[(j, k)] = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    w
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Windowed frame samples as used by the frontends (exposed for oracles).
pub fn window_frame(frame: &[f64]) -> Vec<f64> {
    frame.iter().zip(hamming(frame.len())).map(|(s, w)| s * w).collect()
}

/// Orthonormal DCT-II keeping the first `keep` coefficients.
pub fn dct_ii(input: &[f64], keep: usize) -> Vec<f64> {
    let m = input.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Feature vector produced by an all-zero frame.
pub fn floor_vector(config: &FrontendConfig) -> Vec<f64> {
    let logs = vec![LOG_ENERGY_FLOOR.ln(); config.filter_count];
    match config.frontend {
        Frontend::ErbGt => logs,
        Frontend::MelMfcc => dct_ii(&logs, config.cepstral_count),
    }
}

/// Computes log filterbank (GT) or cepstral (MFCC) features from mono audio.
pub fn compute_features(utterance_id: &str, audio: &[f64], sample_rate: u32, config: &FrontendConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    if sample_rate != config.sample_rate {
        return Err(Error::invalid(format!(
            "audio sample rate {sample_rate} does not match frontend rate {}",
            config.sample_rate
        )));
    }
    let frame_len = config.frame_samples();
    let shift = config.shift_samples();
    if audio.len() < frame_len {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            frame: frame_len,
        });
    }
    if !all_finite(audio) {
        return Err(Error::NonFinite("audio samples"));
    }

    let nfft = config.fft_size();
    let bins = nfft / 2 + 1;
    let weights = filterbank_weights(config);
    let window = hamming(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let num_frames = (audio.len() - frame_len) / shift + 1;
    let mut out = DMatrix::zeros(num_frames, config.output_dim());
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = DVector::zeros(bins);

    for t in 0..num_frames {
        let start = t * shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame_len {
                Complex::new(audio[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..bins {
            power[k] = buf[k].norm_sqr();
        }
        let energies = &weights * &power;
        let logs: Vec<f64> = energies.iter().map(|e| e.max(LOG_ENERGY_FLOOR).ln()).collect();
        let row = match config.frontend {
            Frontend::ErbGt => logs,
            Frontend::MelMfcc => dct_ii(&logs, config.cepstral_count),
        };
        for (d, v) in row.into_iter().enumerate() {
            out[(t, d)] = v;
        }
    }
    let kind = match config.frontend {
        Frontend::ErbGt => FeatureKind::Gt,
        Frontend::MelMfcc => FeatureKind::Mfcc,
    };
    FeatureMatrix::new(utterance_id, out, kind)
}

/// Reads a mono 16-bit PCM WAV file as samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::invalid(format!("{}: expected mono 16-bit PCM", path.display())));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

/// Writes samples in [-1, 1] as mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

fn regression_deltas(m: &DMatrix<f64>) -> DMatrix<f64> {
    let t_len = m.nrows() as isize;
    let norm: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, t_len - 1) as usize;
    DMatrix::from_fn(m.nrows(), m.ncols(), |t, d| {
        let t = t as isize;
        (1..=DELTA_WINDOW as isize)
            .map(|n| n as f64 * (m[(clamp(t + n), d)] - m[(clamp(t - n), d)]))
            .sum::<f64>()
            / norm
    })
}

/// Appends first (and optionally second) order regression deltas.
pub fn append_derivatives(f: &FeatureMatrix, order: usize) -> Result<FeatureMatrix> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("derivative order must be 1 or 2, got {order}")));
    }
    if f.num_frames() < 2 * DELTA_WINDOW + 1 {
        return Err(Error::invalid(format!("{} frames is shorter than the delta window", f.num_frames())));
    }
    let d = f.dim();
    let mut blocks = vec![f.frames.clone()];
    for _ in 0..order {
        let next = regression_deltas(blocks.last().unwrap());
        blocks.push(next);
    }
    let mut out = DMatrix::zeros(f.num_frames(), d * (order + 1));
    for (i, b) in blocks.iter().enumerate() {
        out.columns_mut(i * d, d).copy_from(b);
    }
    Ok(f.derived(out, f.kind.with_derivatives()))
}

/// Stacks frames `t-left ..= t+right` into each output row, replicating edge frames.
pub fn splice_context(f: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let t_len = f.num_frames() as isize;
    let d = f.dim();
    let width = left + right + 1;
    let mut out = DMatrix::zeros(f.num_frames(), d * width);
    for t in 0..t_len {
        for (block, offset) in (-(left as isize)..=right as isize).enumerate() {
            let src = (t + offset).clamp(0, t_len - 1) as usize;
            for j in 0..d {
                out[(t as usize, block * d + j)] = f.frames[(src, j)];
            }
        }
    }
    f.derived(out, f.kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaTransform {
    /// `d_out x d_in`; rows ordered by decreasing discriminant eigenvalue.
    pub projection: DMatrix<f64>,
    pub class_count: usize,
    /// Context width (frames) of the spliced input the projection expects.
    pub input_context: usize,
}

impl LdaTransform {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Frames of context on either side of the center frame.
    pub fn half_context(&self) -> usize {
        self.input_context / 2
    }
}

/// Result of [`fit_lda`]: the transform plus its sorted eigenvalues.
#[derive(Clone, Debug)]
pub struct LdaFit {
    pub transform: LdaTransform,
    pub eigenvalues: Vec<f64>,
    /// Set when the within-class scatter had to be regularized.
    pub regularized: bool,
}

/// Fits an LDA projection by solving the generalized eigenproblem of
/// between-class against within-class covariance.
pub fn fit_lda(frames: &DMatrix<f64>, labels: &[usize], d_out: usize, input_context: usize) -> Result<LdaFit> {
    let (n, d_in) = frames.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "LDA labels",
            expected: n,
            got: labels.len(),
        });
    }
    if d_out == 0 || d_out > d_in {
        return Err(Error::invalid(format!("LDA output dim {d_out} must be in 1..={d_in}")));
    }
    if n <= d_in {
        return Err(Error::invalid(format!("LDA needs more than {d_in} frames, got {n}")));
    }
    if input_context == 0 || input_context.is_multiple_of(2) {
        return Err(Error::invalid("LDA input context must be an odd frame count"));
    }

    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("LDA needs at least two classes"));
    }
    let index_of = |label: usize| classes.binary_search(&label).unwrap();

    let mut sums = DMatrix::<f64>::zeros(classes.len(), d_in);
    let mut counts = vec![0usize; classes.len()];
    for (t, &label) in labels.iter().enumerate() {
        let c = index_of(label);
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        row += frames.row(t);
    }
    let mut means = sums.clone();
    for c in 0..classes.len() {
        let mut row = means.row_mut(c);
        row /= counts[c] as f64;
    }
    let global: DVector<f64> = frames.row_sum().transpose() / n as f64;

    let mut centered = frames.clone();
    for (t, &label) in labels.iter().enumerate() {
        let c = index_of(label);
        let mut row = centered.row_mut(t);
        row -= means.row(c);
    }
    let mut within = centered.transpose() * &centered / n as f64;
    let mut between = DMatrix::<f64>::zeros(d_in, d_in);
    for c in 0..classes.len() {
        let diff = means.row(c).transpose() - &global;
        between += (counts[c] as f64 / n as f64) * &diff * diff.transpose();
    }
    if between.iter().all(|v| v.abs() == 0.0) {
        return Err(Error::invalid("no between-class scatter"));
    }

    let trace = within.trace();
    let eps = 1e-6 * trace / d_in as f64;
    let mut regularized = false;
    let chol = match within.clone().cholesky() {
        Some(c) if c.l().diagonal().iter().all(|&v| v * v > eps * 1e-6) => c,
        _ => {
            log::warn!("within-class scatter is singular; adding {eps:e} to its diagonal");
            regularized = true;
            for i in 0..d_in {
                within[(i, i)] += eps.max(f64::MIN_POSITIVE);
            }
            within
                .clone()
                .cholesky()
                .ok_or_else(|| Error::invalid("within-class scatter is not positive definite"))?
        }
    };
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("within-class Cholesky factor is singular"))?;
    let sym = &l_inv * &between * l_inv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let back = l_inv.transpose();
    let mut projection = DMatrix::zeros(d_out, d_in);
    for (row, &k) in order.iter().take(d_out).enumerate() {
        let mut v = &back * eig.eigenvectors.column(k);
        fix_sign(v.as_mut_slice());
        projection.row_mut(row).copy_from(&v.transpose());
    }
    Ok(LdaFit {
        transform: LdaTransform {
            projection,
            class_count: classes.len(),
            input_context,
        },
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
        regularized,
    })
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects every frame with the LDA matrix.
pub fn apply_transform(f: &FeatureMatrix, lda: &LdaTransform) -> Result<FeatureMatrix> {
    if f.dim() != lda.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "LDA input",
            expected: lda.input_dim(),
            got: f.dim(),
        });
    }
    let out = &f.frames * lda.projection.transpose();
    Ok(f.derived(out, f.kind.with_lda()))
}

/// Per-utterance mean and variance normalization.
pub fn cmvn(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    let t_len = f.num_frames();
    if t_len < 2 {
        return Err(Error::invalid("CMVN needs at least two frames"));
    }
    let mut out = f.frames.clone();
    for d in 0..f.dim() {
        let col = f.frames.column(d);
        let mean = col.sum() / t_len as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t_len as f64;
        let sd = var.max(CMVN_VARIANCE_FLOOR).sqrt();
        for t in 0..t_len {
            out[(t, d)] = (f.frames[(t, d)] - mean) / sd;
        }
    }
    Ok(f.derived(out, f.kind))
}
