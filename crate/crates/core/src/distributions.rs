//! Target distributions with exact OU marginals and scores.
//!
//! Under the OU flow a Gaussian component `N(m, S)` becomes
//! `N(e^{-t} m, e^{-2t} S + (1 - e^{-2t}) I)`, so Gaussian mixtures stay
//! Gaussian mixtures and an empirical dataset becomes an equal-weight mixture
//! of isotropic Gaussians with variance `1 - e^{-2t}`. All log-densities and
//! scores are evaluated in log-space with a running max.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{dist_sq, norm_sq, ParticleEnsemble, SeedRecord};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng;

/// Responsibilities below `exp(-DROP_LOG_RATIO)` of the largest are dropped.
pub const DROP_LOG_RATIO: f64 = 60.0;

/// Draws used by the Monte Carlo subgaussian-norm estimator.
pub const PSI_MC_SAMPLES: usize = 100_000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Full covariance with the factorizations needed for sampling, densities and
/// the exact MGF of `|X|^2`. All matrices are row-major `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCovariance {
    cov: Vec<f64>,
    chol: Vec<f64>,
    precision: Vec<f64>,
    log_det: f64,
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<f64>,
}

impl FullCovariance {
    pub fn new(d: usize, cov: Vec<f64>) -> Result<Self> {
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: cov.len(),
            });
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(m.clone());
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::invalid(format!(
                "covariance is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance Cholesky factorization failed"))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            cov,
            chol: row_major(&l),
            precision: row_major(&precision),
            log_det,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: row_major(&eig.eigenvectors),
        })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.cov
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `variance * I`.
    Isotropic(f64),
    Full(FullCovariance),
}

impl Covariance {
    pub fn full(d: usize, cov: Vec<f64>) -> Result<Self> {
        FullCovariance::new(d, cov).map(Covariance::Full)
    }

    fn trace(&self, d: usize) -> f64 {
        match self {
            Covariance::Isotropic(v) => v * d as f64,
            Covariance::Full(f) => (0..d).map(|i| f.cov[i * d + i]).sum(),
        }
    }

    fn max_eigenvalue(&self) -> f64 {
        match self {
            Covariance::Isotropic(v) => *v,
            Covariance::Full(f) => f.eigenvalues.iter().copied().fold(f64::MIN, f64::max),
        }
    }

    /// Covariance after running the OU flow for time `t`.
    fn ou_flow(&self, d: usize, t: f64) -> Result<Self> {
        let a = (-2.0 * t).exp();
        let b = -(-2.0 * t).exp_m1();
        Ok(match self {
            Covariance::Isotropic(v) => Covariance::Isotropic(a * v + b),
            Covariance::Full(f) => {
                let mut c: Vec<f64> = f.cov.iter().map(|v| a * v).collect();
                for i in 0..d {
                    c[i * d + i] += b;
                }
                Covariance::full(d, c)?
            }
        })
    }
}

/// One mixture component, used to build a [`GaussianMixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl MixtureComponent {
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        Self {
            weight,
            mean,
            cov: Covariance::Isotropic(variance),
        }
    }
}

/// Finite Gaussian mixture. Means are stored flat for cache-friendly scans.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    d: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<Covariance>,
    /// Set when every component is `v * I` with the same `v`.
    shared_isotropic: Option<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.mean.len(),
                });
            }
            if !(c.weight > 0.0) {
                return Err(Error::invalid("mixture weights must be strictly positive"));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("mixture means must be finite"));
            }
            match &c.cov {
                Covariance::Isotropic(v) if !(*v > 0.0 && v.is_finite()) => {
                    return Err(Error::invalid("isotropic variance must be positive"))
                }
                Covariance::Full(f) if f.cov.len() != d * d => {
                    return Err(Error::DimensionMismatch {
                        expected: d * d,
                        got: f.cov.len(),
                    })
                }
                _ => {}
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
        let means = components.iter().flat_map(|c| c.mean.iter().copied()).collect();
        let covs = components.into_iter().map(|c| c.cov).collect();
        Ok(Self::from_parts(d, weights, means, covs))
    }

    fn from_parts(d: usize, weights: Vec<f64>, means: Vec<f64>, covs: Vec<Covariance>) -> Self {
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let shared_isotropic = match covs.first() {
            Some(Covariance::Isotropic(v0)) => covs
                .iter()
                .all(|c| matches!(c, Covariance::Isotropic(v) if v == v0))
                .then_some(*v0),
            _ => None,
        };
        Self {
            d,
            weights,
            log_weights,
            means,
            covs,
            shared_isotropic,
        }
    }

    pub fn standard_gaussian(d: usize) -> Self {
        Self::from_parts(d, vec![1.0], vec![0.0; d], vec![Covariance::Isotropic(1.0)])
    }

    pub fn isotropic_gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent::isotropic(1.0, mean, variance)])
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.d..(i + 1) * self.d]
    }

    pub fn covariance(&self, i: usize) -> &Covariance {
        &self.covs[i]
    }

    pub fn components(&self) -> impl Iterator<Item = MixtureComponent> + '_ {
        (0..self.len()).map(move |i| MixtureComponent {
            weight: self.weights[i],
            mean: self.mean(i).to_vec(),
            cov: self.covs[i].clone(),
        })
    }

    pub fn ou_marginal(&self, t: f64) -> Result<Self> {
        if t == 0.0 {
            return Ok(self.clone());
        }
        let a = (-t).exp();
        let means = self.means.iter().map(|v| a * v).collect();
        let covs = self
            .covs
            .iter()
            .map(|c| c.ou_flow(self.d, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(self.d, self.weights.clone(), means, covs))
    }

    /// Component log-density without the mixture weight, minus `d/2 log 2pi`.
    fn component_log_kernel(&self, i: usize, x: &[f64]) -> f64 {
        let m = self.mean(i);
        match &self.covs[i] {
            Covariance::Isotropic(v) => {
                -0.5 * dist_sq(x, m) / v - 0.5 * self.d as f64 * v.ln()
            }
            Covariance::Full(f) => -0.5 * quad_form(&f.precision, x, m) - 0.5 * f.log_det,
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for i in 0..self.len() {
            let e = self.log_weights[i] + self.component_log_kernel(i, x);
            if e > max {
                acc = acc * (max - e).exp() + 1.0;
                max = e;
            } else if e - max > -DROP_LOG_RATIO {
                acc += (e - max).exp();
            }
        }
        max + acc.ln() - 0.5 * self.d as f64 * LN_2PI
    }

    /// Writes `grad log p(x)` into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(out.len(), d);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut max = f64::NEG_INFINITY;
        let mut total = 0.0;
        if let Some(var) = self.shared_isotropic {
            // grad = (sum_i r_i m_i - x) / v; only the responsibility-weighted
            // mean has to be accumulated.
            for i in 0..self.len() {
                let m = &self.means[i * d..(i + 1) * d];
                let e = self.log_weights[i] - 0.5 * dist_sq(x, m) / var;
                if e > max {
                    let s = (max - e).exp();
                    total = total * s + 1.0;
                    for (o, mv) in out.iter_mut().zip(m) {
                        *o = *o * s + mv;
                    }
                    max = e;
                } else if e - max > -DROP_LOG_RATIO {
                    let r = (e - max).exp();
                    total += r;
                    for (o, mv) in out.iter_mut().zip(m) {
                        *o += r * mv;
                    }
                }
            }
            for (o, xv) in out.iter_mut().zip(x) {
                *o = (*o / total - xv) / var;
            }
            return;
        }
        let mut g = vec![0.0; d];
        for i in 0..self.len() {
            let e = self.log_weights[i] + self.component_log_kernel(i, x);
            let m = self.mean(i);
            match &self.covs[i] {
                Covariance::Isotropic(v) => {
                    for k in 0..d {
                        g[k] = (m[k] - x[k]) / v;
                    }
                }
                Covariance::Full(f) => {
                    for k in 0..d {
                        g[k] = (0..d)
                            .map(|j| f.precision[k * d + j] * (m[j] - x[j]))
                            .sum();
                    }
                }
            }
            if e > max {
                let s = (max - e).exp();
                total = total * s + 1.0;
                for (o, gv) in out.iter_mut().zip(&g) {
                    *o = *o * s + gv;
                }
                max = e;
            } else if e - max > -DROP_LOG_RATIO {
                let r = (e - max).exp();
                total += r;
                for (o, gv) in out.iter_mut().zip(&g) {
                    *o += r * gv;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.score_into(x, &mut out);
        out
    }

    pub fn second_moment(&self) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * (norm_sq(self.mean(i)) + self.covs[i].trace(self.d)))
            .sum()
    }

    /// `log E exp(c |X|^2)`, `+inf` where the MGF diverges.
    pub fn log_mgf_norm_sq(&self, c: f64) -> f64 {
        let d = self.d as f64;
        let mut terms = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let m = self.mean(i);
            let t = match &self.covs[i] {
                Covariance::Isotropic(v) => {
                    let q = 1.0 - 2.0 * c * v;
                    if q <= 0.0 {
                        return f64::INFINITY;
                    }
                    -0.5 * d * q.ln() + c * norm_sq(m) / q
                }
                Covariance::Full(f) => {
                    let mut acc = 0.0;
                    for (j, lam) in f.eigenvalues.iter().enumerate() {
                        let q = 1.0 - 2.0 * c * lam;
                        if q <= 0.0 {
                            return f64::INFINITY;
                        }
                        let proj: f64 = (0..self.d)
                            .map(|k| f.eigenvectors[k * self.d + j] * m[k])
                            .sum();
                        acc += -0.5 * q.ln() + c * proj * proj / q;
                    }
                    acc
                }
            };
            terms.push(self.log_weights[i] + t);
        }
        log_sum_exp(&terms)
    }

    fn max_component_variance(&self) -> f64 {
        self.covs.iter().map(Covariance::max_eigenvalue).fold(0.0, f64::max)
    }

    fn sample_into(&self, rng: &mut rng::Rng, out: &mut [f64]) {
        let d = self.d;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let m = self.mean(k);
        match &self.covs[k] {
            Covariance::Isotropic(v) => {
                let s = v.sqrt();
                for j in 0..d {
                    out[j] = m[j] + s * z[j];
                }
            }
            Covariance::Full(f) => {
                for j in 0..d {
                    out[j] = m[j] + (0..=j).map(|l| f.chol[j * d + l] * z[l]).sum::<f64>();
                }
            }
        }
    }
}

fn quad_form(p: &[f64], x: &[f64], m: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        let di = x[i] - m[i];
        for j in 0..d {
            acc += di * p[i * d + j] * (x[j] - m[j]);
        }
    }
    acc
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Points with provenance. `p_0` is the uniform measure on the points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDataset {
    d: usize,
    points: Vec<f64>,
    source: String,
}

impl EmpiricalDataset {
    pub fn new(d: usize, points: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if d == 0 || points.is_empty() || points.len() % d != 0 {
            return Err(Error::invalid(
                "dataset must be nonempty with a whole number of points",
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset coordinates must be finite"));
        }
        Ok(Self {
            d,
            points,
            source: source.into(),
        })
    }

    pub fn from_ensemble(e: &ParticleEnsemble, source: impl Into<String>) -> Result<Self> {
        Self::new(e.dim(), e.as_flat().to_vec(), source)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let e = ParticleEnsemble::read_csv(path)?;
        Self::from_ensemble(&e, format!("file:{}", path.display()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_ensemble().write_csv(path)
    }

    pub fn to_ensemble(&self) -> ParticleEnsemble {
        ParticleEnsemble::new(
            self.d,
            self.points.clone(),
            vec![SeedRecord::new(format!("dataset:{}", self.source), 0)],
        )
        .expect("dataset invariants imply a valid ensemble")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .chunks_exact(self.d)
            .map(norm_sq)
            .fold(0.0, f64::max)
            .sqrt()
    }

    /// `p_t` as an equal-weight isotropic mixture; undefined at `t = 0`.
    pub fn ou_marginal(&self, t: f64) -> Result<GaussianMixture> {
        if !(t > 0.0) {
            return Err(Error::DegenerateDensity);
        }
        let n = self.len();
        let a = (-t).exp();
        let var = -(-2.0 * t).exp_m1();
        let means = self.points.iter().map(|v| a * v).collect();
        Ok(GaussianMixture::from_parts(
            self.d,
            vec![1.0 / n as f64; n],
            means,
            vec![Covariance::Isotropic(var); n],
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    Mixture(GaussianMixture),
    Empirical(EmpiricalDataset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiMethod {
    /// Bisection on the closed-form MGF of `|X|^2` for a Gaussian mixture.
    AnalyticMgf,
    /// Bisection on the exact finite average over dataset points.
    ExactFiniteMean,
    /// `R / sqrt(log 2)` with `R` the largest point norm.
    BoundedSupport,
    /// Bisection on a Monte Carlo MGF estimate.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgaussianNorm {
    pub value: f64,
    pub method: PsiMethod,
    /// Seed of the Monte Carlo draws, when used.
    pub seed: Option<u64>,
}

/// A target law `p` with cached second moment and norm-subgaussian norm.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    kind: TargetKind,
    second_moment: f64,
    psi: OnceLock<SubgaussianNorm>,
}

impl PartialEq for TargetDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl From<GaussianMixture> for TargetDistribution {
    fn from(m: GaussianMixture) -> Self {
        Self::new(TargetKind::Mixture(m))
    }
}

impl From<EmpiricalDataset> for TargetDistribution {
    fn from(e: EmpiricalDataset) -> Self {
        Self::new(TargetKind::Empirical(e))
    }
}

impl TargetDistribution {
    pub fn new(kind: TargetKind) -> Self {
        let second_moment = match &kind {
            TargetKind::Mixture(m) => m.second_moment(),
            TargetKind::Empirical(e) => {
                e.points.chunks_exact(e.d).map(norm_sq).sum::<f64>() / e.len() as f64
            }
        };
        Self {
            kind,
            second_moment,
            psi: OnceLock::new(),
        }
    }

    pub fn standard_gaussian(d: usize) -> Self {
        GaussianMixture::standard_gaussian(d).into()
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TargetKind::Mixture(m) => m.d,
            TargetKind::Empirical(e) => e.d,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            TargetKind::Mixture(m) => format!("gaussian-mixture(k={}, d={})", m.len(), m.d),
            TargetKind::Empirical(e) => format!("empirical({}, n={}, d={})", e.source, e.len(), e.d),
        }
    }

    /// `n` i.i.d. draws, bitwise reproducible in `(seed, n)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::invalid("sample size must be at least 1"));
        }
        let d = self.dim();
        let mut points = vec![0.0; n * d];
        exec::try_for_each_chunk_mut(&mut points, exec::SHARD_LEN * d, |shard, chunk| {
            let mut r = rng::shard_rng(seed, shard);
            for out in chunk.chunks_exact_mut(d) {
                match &self.kind {
                    TargetKind::Mixture(m) => m.sample_into(&mut r, out),
                    TargetKind::Empirical(e) => {
                        let i = r.random_range(0..e.len());
                        out.copy_from_slice(e.point(i));
                    }
                }
            }
            Ok::<(), Error>(())
        })?;
        ParticleEnsemble::new(d, points, vec![SeedRecord::new("distributions.sample", seed)])
    }

    /// The exact law `p_t` of the OU flow started from `p`.
    pub fn ou_marginal(&self, t: f64) -> Result<TargetDistribution> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("time must be finite and >= 0, got {t}")));
        }
        Ok(match &self.kind {
            TargetKind::Mixture(m) => m.ou_marginal(t)?.into(),
            TargetKind::Empirical(_) if t == 0.0 => self.clone(),
            TargetKind::Empirical(e) => e.ou_marginal(t)?.into(),
        })
    }

    /// The mixture representation of `p_t`, which carries the density.
    pub fn marginal_mixture(&self, t: f64) -> Result<GaussianMixture> {
        match &self.kind {
            TargetKind::Mixture(m) => m.ou_marginal(t),
            TargetKind::Empirical(e) => e.ou_marginal(t),
        }
    }

    /// `grad log p_t(x)`.
    pub fn exact_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.marginal_mixture(t)?.score(x))
    }

    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.marginal_mixture(t)?.log_density(x))
    }

    /// `M = E|X|^2`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Norm-subgaussian norm `inf{s > 0 : E exp(|X|^2 / s^2) <= 2}`.
    pub fn subgaussian_norm(&self) -> Result<SubgaussianNorm> {
        if let Some(v) = self.psi.get() {
            return Ok(*v);
        }
        let psi = match &self.kind {
            TargetKind::Mixture(m) => SubgaussianNorm {
                value: bisect_psi(|c| m.log_mgf_norm_sq(c), m.max_component_variance())?,
                method: PsiMethod::AnalyticMgf,
                seed: None,
            },
            TargetKind::Empirical(e) => {
                let logs: Vec<f64> = e.points.chunks_exact(e.d).map(norm_sq).collect();
                let ln_n = (e.len() as f64).ln();
                let bound = e.max_norm() / std::f64::consts::LN_2.sqrt();
                match bisect_psi(
                    |c| log_sum_exp(&logs.iter().map(|v| c * v).collect::<Vec<_>>()) - ln_n,
                    0.0,
                ) {
                    Ok(v) => SubgaussianNorm {
                        value: v.min(bound),
                        method: PsiMethod::ExactFiniteMean,
                        seed: None,
                    },
                    Err(_) if bound > 0.0 => SubgaussianNorm {
                        value: bound,
                        method: PsiMethod::BoundedSupport,
                        seed: None,
                    },
                    Err(e) => return Err(e),
                }
            }
        };
        Ok(*self.psi.get_or_init(|| psi))
    }

    /// Overrides the cached subgaussian norm (e.g. with a configured value).
    pub fn with_subgaussian_norm(self, psi: SubgaussianNorm) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(psi);
        Self { psi: cell, ..self }
    }
}

/// Monte Carlo estimate of the subgaussian norm from `n` draws.
pub fn subgaussian_norm_monte_carlo(
    dist: &TargetDistribution,
    n: usize,
    seed: u64,
) -> Result<SubgaussianNorm> {
    let sample = dist.sample(n, seed)?;
    let sq: Vec<f64> = sample.iter().map(norm_sq).collect();
    let ln_n = (n as f64).ln();
    let value = bisect_psi(
        |c| log_sum_exp(&sq.iter().map(|v| c * v).collect::<Vec<_>>()) - ln_n,
        0.0,
    )?;
    Ok(SubgaussianNorm {
        value,
        method: PsiMethod::MonteCarlo,
        seed: Some(seed),
    })
}

/// Smallest `s` with `log_mgf(1/s^2) <= ln 2`, returned from the feasible side.
/// `max_var` is the largest Gaussian variance (0 for finite samples), which
/// gives a lower bracket where the MGF diverges.
fn bisect_psi(log_mgf: impl Fn(f64) -> f64, max_var: f64) -> Result<f64> {
    let ln2 = std::f64::consts::LN_2;
    let feasible = |s: f64| log_mgf(1.0 / (s * s)) <= ln2;
    let mut hi = (2.0 * max_var).sqrt().max(1.0);
    let mut ok = false;
    for _ in 0..100 {
        if feasible(hi) {
            ok = true;
            break;
        }
        hi *= 2.0;
    }
    if !ok {
        return Err(Error::NonConvergent(
            "no upper bracket for the subgaussian norm".into(),
        ));
    }
    let mut lo = hi;
    ok = false;
    for _ in 0..100 {
        lo *= 0.5;
        if !feasible(lo) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::NonConvergent(
            "no lower bracket for the subgaussian norm (distribution concentrated at 0?)".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(hi)
}

/// Solves `Sigma^{1/2}` for a symmetric PSD matrix (row-major).
pub(crate) fn sym_sqrt(d: usize, m: &[f64]) -> Result<DMatrix<f64>> {
    let mat = DMatrix::from_row_slice(d, d, m);
    let eig = SymmetricEigen::new(mat.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let sq = DVector::from_iterator(d, eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose())
}
