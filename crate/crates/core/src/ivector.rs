//! Total-variability modeling and i-vector post-processing.
//!
//! An utterance's UBM mean supervector offset is modeled as `T w` with a
//! standard-normal latent `w`; the i-vector is the posterior mean of `w`
//! given the utterance's Baum-Welch statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::gmm::{BwStats, DiagonalGmm};
use crate::util::{all_finite, rng};

const T_INIT_SD: f64 = 0.1;
const RG_COV_RIDGE: f64 = 1e-6;
const RG_QUANTILE_CLAMP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalVariabilityModel {
    pub ubm: DiagonalGmm,
    /// (C*D) x R, rows grouped in C blocks of D.
    pub t_matrix: DMatrix<f64>,
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    None,
    Unity,
    SqrtD,
    Rg,
}

impl Normalization {
    pub const ALL: [Normalization; 4] = [Normalization::None, Normalization::Unity, Normalization::SqrtD, Normalization::Rg];

    pub fn label(self) -> &'static str {
        match self {
            Normalization::None => "NONE",
            Normalization::Unity => "UNITY",
            Normalization::SqrtD => "SQRT_D",
            Normalization::Rg => "RG",
        }
    }

    /// Parses the CLI spellings `none|unity|sqrt|rg`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Normalization::None),
            "unity" => Ok(Normalization::Unity),
            "sqrt" | "sqrt_d" => Ok(Normalization::SqrtD),
            "rg" => Ok(Normalization::Rg),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IVector {
    pub utterance_id: String,
    pub values: DVector<f64>,
    pub normalization: Normalization,
}

impl IVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Per-iteration quantities cached for the E-step.
struct Projections {
    /// R x (C*D): T' Sigma^-1
    t_sigma_inv: DMatrix<f64>,
    /// T_c' Sigma_c^-1 T_c per component.
    per_component: Vec<DMatrix<f64>>,
}

impl Projections {
    fn new(ubm: &DiagonalGmm, t: &DMatrix<f64>) -> Self {
        let (c, d) = (ubm.num_components(), ubm.dim());
        let mut t_sigma_inv = t.transpose();
        for k in 0..c {
            for j in 0..d {
                let inv = 1.0 / ubm.variances[(k, j)];
                let mut col = t_sigma_inv.column_mut(k * d + j);
                col *= inv;
            }
        }
        let per_component = (0..c).map(|k| t_sigma_inv.columns(k * d, d) * t.rows(k * d, d)).collect();
        Self { t_sigma_inv, per_component }
    }
}

struct Posterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    /// 1/2 b' L^-1 b - 1/2 log|L|, the utterance's share of the objective.
    objective: f64,
}

fn supervector(s: &BwStats) -> DVector<f64> {
    // row-major flatten of the C x D first-order statistics
    DVector::from_iterator(s.first_centered.len(), s.first_centered.transpose().iter().copied())
}

fn latent_posterior(p: &Projections, s: &BwStats, rank: usize) -> Posterior {
    let mut precision = DMatrix::<f64>::identity(rank, rank);
    for (n, m) in s.zeroth.iter().zip(&p.per_component) {
        if *n != 0.0 {
            precision += m * *n;
        }
    }
    let b = &p.t_sigma_inv * supervector(s);
    let chol = precision.cholesky().expect("I + T' Sigma^-1 N T is positive definite for N >= 0");
    let mean = chol.solve(&b);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Posterior {
        objective: 0.5 * b.dot(&mean) - 0.5 * log_det,
        covariance: chol.inverse(),
        mean,
    }
}

fn check_stats(ubm: &DiagonalGmm, s: &BwStats) -> Result<()> {
    if s.ubm_fingerprint != ubm.fingerprint() {
        return Err(Error::UbmMismatch);
    }
    if s.zeroth.len() != ubm.num_components() || s.first_centered.shape() != ubm.means.shape() {
        return Err(Error::invalid("statistics shape does not match the UBM"));
    }
    Ok(())
}

/// Result of [`train_tv`].
#[derive(Clone, Debug)]
pub struct TvFit {
    pub model: TotalVariabilityModel,
    /// EM objective before each iteration and after the last one.
    pub objective: Vec<f64>,
}

/// Estimates the total-variability matrix by EM over utterance statistics.
pub fn train_tv(ubm: &DiagonalGmm, stats: &[BwStats], rank: usize, iterations: usize, seed: u64) -> Result<TvFit> {
    let (c, d) = (ubm.num_components(), ubm.dim());
    if stats.is_empty() {
        return Err(Error::invalid("total-variability training needs statistics"));
    }
    if rank == 0 || rank > c * d {
        return Err(Error::invalid(format!("rank {rank} must be in 1..={}", c * d)));
    }
    for s in stats {
        check_stats(ubm, s)?;
    }
    let mut occupancy = vec![0.0; c];
    for s in stats {
        for (o, n) in occupancy.iter_mut().zip(&s.zeroth) {
            *o += n;
        }
    }
    if occupancy.iter().all(|&o| o <= 0.0) {
        return Err(Error::invalid("all statistics are zero; the M-step has no data"));
    }

    let mut r = rng(seed);
    let normal = Normal::new(0.0, T_INIT_SD).unwrap();
    let mut t = DMatrix::from_fn(c * d, rank, |_, _| normal.sample(&mut r));
    let supervectors: Vec<DVector<f64>> = stats.iter().map(supervector).collect();

    let mut objective = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        let proj = Projections::new(ubm, &t);
        let posteriors: Vec<Posterior> = stats.par_iter().map(|s| latent_posterior(&proj, s, rank)).collect();
        objective.push(posteriors.iter().map(|p| p.objective).sum());

        let mut cross = DMatrix::<f64>::zeros(c * d, rank);
        let mut second: Vec<DMatrix<f64>> = vec![DMatrix::zeros(rank, rank); c];
        for ((s, f), p) in stats.iter().zip(&supervectors).zip(&posteriors) {
            cross += f * p.mean.transpose();
            let moment = &p.covariance + &p.mean * p.mean.transpose();
            for (k, acc) in second.iter_mut().enumerate() {
                if s.zeroth[k] != 0.0 {
                    *acc += &moment * s.zeroth[k];
                }
            }
        }
        for (k, acc) in second.iter().enumerate() {
            if occupancy[k] <= 0.0 {
                continue;
            }
            let Some(chol) = acc.clone().cholesky() else {
                log::warn!("TV M-step: component {k} second moment is singular, block kept");
                continue;
            };
            // T_c = C_c A_c^-1  <=>  A_c T_c' = C_c'
            let block = chol.solve(&cross.rows(k * d, d).transpose()).transpose();
            t.rows_mut(k * d, d).copy_from(&block);
        }
    }
    let proj = Projections::new(ubm, &t);
    objective.push(stats.par_iter().map(|s| latent_posterior(&proj, s, rank).objective).sum());
    if !all_finite(t.iter()) {
        return Err(Error::NonFinite("total-variability matrix"));
    }
    Ok(TvFit {
        model: TotalVariabilityModel {
            ubm: ubm.clone(),
            t_matrix: t,
            rank,
        },
        objective,
    })
}

impl TotalVariabilityModel {
    /// Posterior mean of the latent factor given one utterance's statistics.
    pub fn extract(&self, s: &BwStats) -> Result<IVector> {
        check_stats(&self.ubm, s)?;
        let proj = Projections::new(&self.ubm, &self.t_matrix);
        Ok(IVector {
            utterance_id: s.utterance_id.clone(),
            values: latent_posterior(&proj, s, self.rank).mean,
            normalization: Normalization::None,
        })
    }

    /// Extracts many utterances, reusing the cached projections.
    pub fn extract_all(&self, stats: &[BwStats]) -> Result<Vec<IVector>> {
        for s in stats {
            check_stats(&self.ubm, s)?;
        }
        let proj = Projections::new(&self.ubm, &self.t_matrix);
        Ok(stats
            .par_iter()
            .map(|s| IVector {
                utterance_id: s.utterance_id.clone(),
                values: latent_posterior(&proj, s, self.rank).mean,
                normalization: Normalization::None,
            })
            .collect())
    }
}

pub fn extract_ivector(tv: &TotalVariabilityModel, s: &BwStats) -> Result<IVector> {
    tv.extract(s)
}

/// Length normalization: unit norm, or norm sqrt(R) for `SqrtD`.
pub fn normalize(v: &IVector, method: Normalization) -> Result<IVector> {
    let scale = match method {
        Normalization::None => return Ok(v.clone()),
        Normalization::Unity => 1.0,
        Normalization::SqrtD => (v.dim() as f64).sqrt(),
        Normalization::Rg => return Err(Error::invalid("radial Gaussianization needs a fitted transform; use apply_rg")),
    };
    let norm = v.values.norm();
    if norm == 0.0 {
        return Err(Error::invalid("cannot length-normalize a zero vector"));
    }
    Ok(IVector {
        utterance_id: v.utterance_id.clone(),
        values: &v.values * (scale / norm),
        normalization: method,
    })
}

/// Whitening plus an empirical-CDF radial map onto the chi distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgTransform {
    pub whitening_mean: DVector<f64>,
    pub whitening_matrix: DMatrix<f64>,
    /// Strictly increasing (radius, quantile) knots of the empirical radial CDF.
    pub radial_cdf: Vec<(f64, f64)>,
    pub target_dof: usize,
}

impl RgTransform {
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.whitening_matrix * (v - &self.whitening_mean)
    }

    /// Piecewise-linear empirical CDF, tails extrapolated linearly.
    pub fn empirical_cdf(&self, r: f64) -> f64 {
        let knots = &self.radial_cdf;
        if knots.len() == 1 {
            return knots[0].1;
        }
        let seg = match knots.binary_search_by(|k| k.0.partial_cmp(&r).unwrap()) {
            Ok(i) => return knots[i].1,
            Err(0) => 0,
            Err(i) if i >= knots.len() => knots.len() - 2,
            Err(i) => i - 1,
        };
        let (r0, q0) = knots[seg];
        let (r1, q1) = knots[seg + 1];
        q0 + (q1 - q0) * (r - r0) / (r1 - r0)
    }

    /// Radius remap: F_chi^-1(F_hat(r)).
    pub fn map_radius(&self, r: f64) -> f64 {
        let q = self.empirical_cdf(r).clamp(RG_QUANTILE_CLAMP, 1.0 - RG_QUANTILE_CLAMP);
        let chi2 = ChiSquared::new(self.target_dof as f64).unwrap();
        chi2.inverse_cdf(q).sqrt()
    }
}

/// Fits whitening and the radial CDF on training i-vectors.
pub fn fit_rg(training: &[DVector<f64>]) -> Result<RgTransform> {
    let Some(first) = training.first() else {
        return Err(Error::invalid("radial Gaussianization needs training vectors"));
    };
    let dim = first.len();
    let n = training.len();
    if dim == 0 || n < dim + 1 {
        return Err(Error::invalid(format!("need at least {} training vectors, got {n}", dim + 1)));
    }
    if training.iter().any(|v| v.len() != dim) {
        return Err(Error::invalid("training vectors differ in dimension"));
    }
    let mean = training.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / n as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for v in training {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    for i in 0..dim {
        cov[(i, i)] += RG_COV_RIDGE;
    }
    let eig = SymmetricEigen::new(cov);
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let whitening = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();

    let mut radii: Vec<f64> = training.iter().map(|v| (&whitening * (v - &mean)).norm()).collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(n);
    for (i, r) in radii.iter().enumerate() {
        let q = (i as f64 + 0.5) / n as f64;
        match knots.last_mut() {
            // ties collapse onto one knot at their mean quantile
            Some(last) if last.0 == *r => {}
            _ => knots.push((*r, q)),
        }
        if let Some(last) = knots.last_mut() {
            let first_idx = radii.partition_point(|x| x < r);
            let last_idx = radii.partition_point(|x| x <= r) - 1;
            last.1 = ((first_idx + last_idx) as f64 / 2.0 + 0.5) / n as f64;
        }
    }
    Ok(RgTransform {
        whitening_mean: mean,
        whitening_matrix: whitening,
        radial_cdf: knots,
        target_dof: dim,
    })
}

/// Whitens and radially remaps one vector; a zero whitened radius maps to zero.
pub fn apply_rg(rg: &RgTransform, v: &IVector) -> Result<IVector> {
    if v.dim() != rg.target_dof {
        return Err(Error::DimensionMismatch {
            what: "RG input",
            expected: rg.target_dof,
            got: v.dim(),
        });
    }
    let z = rg.whiten(&v.values);
    let r = z.norm();
    let values = if r == 0.0 { z } else { &z * (rg.map_radius(r) / r) };
    Ok(IVector {
        utterance_id: v.utterance_id.clone(),
        values,
        normalization: Normalization::Rg,
    })
}
