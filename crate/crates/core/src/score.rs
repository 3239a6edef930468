//! Score models and their Monte Carlo diagnostics.
//!
//! A [`ScoreModel`] is a time-indexed vector field `s(t, x)`. The exact model
//! returns `grad log p_t` of a target; wrappers add a controlled, deterministic
//! error (so `b(t)` and the MGF loss are known to be nonzero) or clip the
//! model into the a-priori band around `-x` at time `T1`.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::distributions::{log_sum_exp, GaussianMixture, TargetDistribution};
use crate::ensemble::{dist_sq, norm, norm_sq, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng;

/// Exponents above this are reported as saturation rather than evaluated.
pub const MGF_EXPONENT_CAP: f64 = 700.0;

/// Side length of the lattice cells of the bounded perturbation field.
pub const LATTICE_CELL: f64 = 0.5;

/// Random Fourier features in the smooth perturbation field.
pub const RFF_FEATURES: usize = 64;

/// Central-difference step for Jacobian probes.
pub const JACOBIAN_STEP: f64 = 1e-4;

pub const POWER_ITERATIONS: usize = 50;

/// A time-dependent amplitude `a(t) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant { value: f64 },
    /// Linear from `start` at `t = 0` to `end` at `t = horizon`, clamped at 0.
    Linear { start: f64, end: f64, horizon: f64 },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Schedule::Constant { value } => value.max(0.0),
            Schedule::Linear { start, end, horizon } => {
                let s = if horizon > 0.0 { t / horizon } else { 0.0 };
                (start + (end - start) * s).max(0.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant { value } => value >= 0.0 && value.is_finite(),
            Schedule::Linear { start, end, horizon } => {
                start >= 0.0 && end >= 0.0 && horizon >= 0.0 && (start + end + horizon).is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("perturbation amplitude must be finite and >= 0"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// `a(t) u(x)` with `u` a unit vector hashed from the lattice cell of `x`.
    AdditiveBounded,
    /// `a(t) g(x)` with `g` a smooth random-Fourier-feature field.
    AdditiveGaussian,
    /// `(1 + a(t)) s(t, x)`.
    Scale,
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive-bounded" => Ok(Self::AdditiveBounded),
            "additive-gaussian" => Ok(Self::AdditiveGaussian),
            "scale" => Ok(Self::Scale),
            other => Err(Error::UnknownName(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
struct FourierField {
    omegas: Vec<f64>,
    phases: Vec<f64>,
    amps: Vec<f64>,
}

impl FourierField {
    fn new(d: usize, seed: u64) -> Self {
        let mut r = rng::rng_from(rng::derive_seed(seed, "rff", d as u64));
        let normal = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };
        let omegas = (0..RFF_FEATURES * d).map(|_| normal(&mut r)).collect();
        let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let phases = (0..RFF_FEATURES).map(|_| phase.sample(&mut r)).collect();
        let amps = (0..RFF_FEATURES * d).map(|_| normal(&mut r)).collect();
        Self {
            omegas,
            phases,
            amps,
        }
    }

    fn add_into(&self, scale: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let norm = scale * (2.0 / RFF_FEATURES as f64).sqrt();
        for k in 0..RFF_FEATURES {
            let w = &self.omegas[k * d..(k + 1) * d];
            let arg: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.phases[k];
            let c = norm * arg.cos();
            for (i, o) in out.iter_mut().enumerate() {
                *o += c * self.amps[i * RFF_FEATURES + k];
            }
        }
    }
}

fn lattice_unit_add(seed: u64, scale: f64, x: &[f64], out: &mut [f64]) {
    let mut h = rng::mix64(seed);
    for v in x {
        let cell = (v / LATTICE_CELL).floor() as i64;
        h = rng::mix64(h ^ cell as u64);
    }
    let mut u = vec![0.0; x.len()];
    let mut state = h;
    let mut uniform = || {
        state = rng::mix64(state);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let mut i = 0;
    while i < u.len() {
        let r = (-2.0 * uniform().ln()).sqrt();
        let th = std::f64::consts::TAU * uniform();
        u[i] = r * th.cos();
        if i + 1 < u.len() {
            u[i + 1] = r * th.sin();
        }
        i += 2;
    }
    let n = norm(&u);
    for (o, v) in out.iter_mut().zip(&u) {
        *o += scale * v / n;
    }
}

/// A deterministic perturbation attached to a base model.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub mode: PerturbMode,
    pub amplitude: Schedule,
    pub seed: u64,
    fourier: Option<Arc<FourierField>>,
}

type FieldFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Construction record of a score model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Exact {
        target: String,
    },
    Perturbed {
        base: Box<Provenance>,
        mode: PerturbMode,
        amplitude: Schedule,
        seed: u64,
    },
    Truncated {
        base: Box<Provenance>,
        t1: f64,
        delta: f64,
    },
    Custom {
        name: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Exact,
    Perturbed,
    Truncated,
    Custom,
}

/// `s(t, x)`; cheap to clone and safe to share between threads.
#[derive(Clone)]
pub enum ScoreModel {
    Exact(Arc<TargetDistribution>),
    Perturbed {
        base: Box<ScoreModel>,
        perturbation: Perturbation,
    },
    Truncated {
        base: Box<ScoreModel>,
        t1: f64,
        delta: f64,
    },
    Custom {
        name: String,
        dim: usize,
        field: Arc<FieldFn>,
    },
}

impl fmt::Debug for ScoreModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScoreModel({:?})", self.provenance())
    }
}

impl ScoreModel {
    pub fn exact(target: TargetDistribution) -> Self {
        ScoreModel::Exact(Arc::new(target))
    }

    pub fn exact_shared(target: Arc<TargetDistribution>) -> Self {
        ScoreModel::Exact(target)
    }

    /// A closed-form field, e.g. for tests or hand-built estimators.
    pub fn custom<F>(name: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ScoreModel::Custom {
            name: name.into(),
            dim,
            field: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreModel::Exact(t) => t.dim(),
            ScoreModel::Perturbed { base, .. } | ScoreModel::Truncated { base, .. } => base.dim(),
            ScoreModel::Custom { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreModel::Exact(_) => ScoreKind::Exact,
            ScoreModel::Perturbed { .. } => ScoreKind::Perturbed,
            ScoreModel::Truncated { .. } => ScoreKind::Truncated,
            ScoreModel::Custom { .. } => ScoreKind::Custom,
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            ScoreModel::Exact(t) => Provenance::Exact { target: t.label() },
            ScoreModel::Perturbed { base, perturbation } => Provenance::Perturbed {
                base: Box::new(base.provenance()),
                mode: perturbation.mode,
                amplitude: perturbation.amplitude,
                seed: perturbation.seed,
            },
            ScoreModel::Truncated { base, t1, delta } => Provenance::Truncated {
                base: Box::new(base.provenance()),
                t1: *t1,
                delta: *delta,
            },
            ScoreModel::Custom { name, .. } => Provenance::Custom { name: name.clone() },
        }
    }

    /// Adds a deterministic error field (or scaling) to this model.
    pub fn perturb(self, mode: PerturbMode, amplitude: Schedule, seed: u64) -> Result<Self> {
        amplitude.validate()?;
        let fourier = (mode == PerturbMode::AdditiveGaussian)
            .then(|| Arc::new(FourierField::new(self.dim(), seed)));
        Ok(ScoreModel::Perturbed {
            base: Box::new(self),
            perturbation: Perturbation {
                mode,
                amplitude,
                seed,
                fourier,
            },
        })
    }

    /// Clips `s(T1, x)` coordinate-wise into `[-x_i - l(x), -x_i + l(x)]`,
    /// `l(x) = delta / (2d) (1 + |x|)`. Other times pass through.
    pub fn truncate(self, t1: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(ScoreModel::Truncated {
            base: Box::new(self),
            t1,
            delta,
        })
    }

    /// Fixes the time, doing any per-time precomputation once.
    pub fn at(&self, t: f64) -> Result<PreparedScore<'_>> {
        Ok(match self {
            ScoreModel::Exact(target) => PreparedScore::Mixture(target.marginal_mixture(t)?),
            ScoreModel::Perturbed { base, perturbation } => PreparedScore::Perturbed {
                base: Box::new(base.at(t)?),
                amplitude: perturbation.amplitude.at(t),
                perturbation,
            },
            ScoreModel::Truncated { base, t1, delta } => PreparedScore::Truncated {
                base: Box::new(base.at(t)?),
                delta: *delta,
                active: (t - t1).abs() <= 1e-12 * t1.abs().max(1.0),
            },
            ScoreModel::Custom { field, .. } => PreparedScore::Custom { field, t },
        })
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        self.at(t)?.eval(x, &mut out);
        Ok(out)
    }
}

/// A score model at a fixed time.
pub enum PreparedScore<'a> {
    Mixture(GaussianMixture),
    Perturbed {
        base: Box<PreparedScore<'a>>,
        amplitude: f64,
        perturbation: &'a Perturbation,
    },
    Truncated {
        base: Box<PreparedScore<'a>>,
        delta: f64,
        active: bool,
    },
    Custom {
        field: &'a Arc<FieldFn>,
        t: f64,
    },
}

impl PreparedScore<'_> {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            PreparedScore::Mixture(m) => m.score_into(x, out),
            PreparedScore::Perturbed {
                base,
                amplitude,
                perturbation,
            } => {
                base.eval(x, out);
                if *amplitude == 0.0 {
                    return;
                }
                match perturbation.mode {
                    PerturbMode::Scale => out.iter_mut().for_each(|v| *v *= 1.0 + amplitude),
                    PerturbMode::AdditiveBounded => {
                        lattice_unit_add(perturbation.seed, *amplitude, x, out)
                    }
                    PerturbMode::AdditiveGaussian => perturbation
                        .fourier
                        .as_ref()
                        .expect("fourier field built with the perturbation")
                        .add_into(*amplitude, x, out),
                }
            }
            PreparedScore::Truncated {
                base,
                delta,
                active,
            } => {
                base.eval(x, out);
                if *active {
                    let ell = band_half_width(*delta, x);
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = o.clamp(-xi - ell, -xi + ell);
                    }
                }
            }
            PreparedScore::Custom { field, t } => field(*t, x, out),
        }
    }

    /// Evaluates at every point of a flat row-major buffer.
    pub fn eval_batch(&self, d: usize, points: &[f64], out: &mut [f64])
    where
        Self: Sync,
    {
        debug_assert_eq!(points.len(), out.len());
        let _ = exec::try_for_each_chunk_mut(out, exec::SHARD_LEN * d, |c, chunk| {
            let start = c * exec::SHARD_LEN * d;
            for (k, o) in chunk.chunks_exact_mut(d).enumerate() {
                let p = &points[start + k * d..start + (k + 1) * d];
                self.eval(p, o);
            }
            Ok::<(), ()>(())
        });
    }
}

/// `l(x) = delta / (2d) (1 + |x|)`.
pub fn band_half_width(delta: f64, x: &[f64]) -> f64 {
    delta / (2.0 * x.len() as f64) * (1.0 + norm(x))
}

/// A Monte Carlo loss estimate at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub t: f64,
    /// Mean of `|grad log p_t - s|^2`.
    pub b: f64,
    pub std_err: f64,
    /// `log E exp(beta |grad log p_t - s|^2)`; `None` when saturated or not computed.
    pub eps_mgf: Option<f64>,
    pub beta: Option<f64>,
    pub saturated: bool,
    pub mc_samples: usize,
    pub seed: u64,
    /// Share of the MGF sum carried by the single largest draw. Values near 1
    /// mean the estimate is dominated by one sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_term_share: Option<f64>,
}

fn squared_errors(
    model: &ScoreModel,
    dist: &TargetDistribution,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if model.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: model.dim(),
        });
    }
    let exact = dist.marginal_mixture(t)?;
    let prepared = model.at(t)?;
    let draws = exact_sample(&exact, n, seed)?;
    let d = dist.dim();
    Ok(exec::map_indexed(n, |i| {
        let x = draws.point(i);
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        exact.score_into(x, &mut a);
        prepared.eval(x, &mut b);
        dist_sq(&a, &b)
    }))
}

fn exact_sample(m: &GaussianMixture, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    TargetDistribution::from(m.clone()).sample(n, seed)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

/// `b(t) = E_{p_t} |grad log p_t - s(t, .)|^2` from `n` draws of `p_t`.
pub fn l2_loss(
    model: &ScoreModel,
    dist: &TargetDistribution,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<LossReport> {
    if n < 100 {
        return Err(Error::invalid("l2_loss needs at least 100 draws"));
    }
    if !(t > 0.0) {
        return Err(Error::invalid("l2_loss needs t > 0"));
    }
    let errs = squared_errors(model, dist, t, n, seed)?;
    let (b, std_err) = mean_and_se(&errs);
    Ok(LossReport {
        t,
        b,
        std_err,
        eps_mgf: None,
        beta: None,
        saturated: false,
        mc_samples: n,
        seed,
        max_term_share: None,
    })
}

/// `log E_{p_T1} exp(beta |grad log p_T1 - s(T1, .)|^2)`.
pub fn mgf_loss(
    model: &ScoreModel,
    dist: &TargetDistribution,
    t1: f64,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<LossReport> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("mgf_loss needs at least one draw"));
    }
    let errs = squared_errors(model, dist, t1, n, seed)?;
    Ok(mgf_from_errors(t1, &errs, beta, seed))
}

pub(crate) fn mgf_from_errors(t: f64, errs: &[f64], beta: f64, seed: u64) -> LossReport {
    let (b, std_err) = mean_and_se(errs);
    let exps: Vec<f64> = errs.iter().map(|e| beta * e).collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let saturated = max > MGF_EXPONENT_CAP;
    let (eps_mgf, share) = if saturated {
        (None, None)
    } else {
        let lse = log_sum_exp(&exps);
        (
            Some(lse - (errs.len() as f64).ln()),
            Some((max - lse).exp()),
        )
    };
    LossReport {
        t,
        b,
        std_err,
        eps_mgf,
        beta: Some(beta),
        saturated,
        mc_samples: errs.len(),
        seed,
        max_term_share: share,
    }
}

/// Lower estimate of the one-sided Lipschitz constant of `s(t, .)` from a
/// probe set: the larger of the best pairwise quotient and the largest
/// eigenvalue of the symmetrized finite-difference Jacobian at each probe.
pub fn one_sided_lipschitz(model: &ScoreModel, t: f64, probe: &ParticleEnsemble) -> Result<f64> {
    if probe.len() < 2 {
        return Err(Error::invalid("probe needs at least two points"));
    }
    let d = probe.dim();
    if d != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: d,
        });
    }
    let s = model.at(t)?;
    let m = probe.len();
    let mut values = vec![0.0; m * d];
    s.eval_batch(d, probe.as_flat(), &mut values);

    let pair_best = exec::map_indexed(m, |i| {
        let xi = probe.point(i);
        let si = &values[i * d..(i + 1) * d];
        let mut best = f64::NEG_INFINITY;
        for j in (i + 1)..m {
            let xj = probe.point(j);
            let dx2 = dist_sq(xi, xj);
            if dx2 == 0.0 {
                continue;
            }
            let sj = &values[j * d..(j + 1) * d];
            let dot: f64 = (0..d).map(|k| (si[k] - sj[k]) * (xi[k] - xj[k])).sum();
            best = best.max(dot / dx2);
        }
        best
    })
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);

    let jac_best = exec::map_indexed(m, |i| {
        let jac = fd_jacobian(&s, probe.point(i));
        largest_sym_eigenvalue(d, &jac)
    })
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);

    Ok(pair_best.max(jac_best))
}

/// Central-difference Jacobian, row-major, `J[i][j] = d s_i / d x_j`.
fn fd_jacobian(s: &PreparedScore<'_>, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for j in 0..d {
        xp[j] = x[j] + JACOBIAN_STEP;
        s.eval(&xp, &mut fp);
        xp[j] = x[j] - JACOBIAN_STEP;
        s.eval(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * JACOBIAN_STEP);
        }
    }
    jac
}

/// Largest eigenvalue of `(J + J^T)/2` by shifted power iteration; returns the
/// Rayleigh quotient, which never exceeds the true value.
pub(crate) fn largest_sym_eigenvalue(d: usize, jac: &[f64]) -> f64 {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.5 * (jac[i * d + j] + jac[j * d + i]);
        }
    }
    let shift = (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    if !shift.is_finite() {
        return f64::INFINITY;
    }
    let mut v: Vec<f64> = (0..d).map(|k| 1.0 + 0.37 * k as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut w = vec![0.0; d];
    for _ in 0..POWER_ITERATIONS {
        for i in 0..d {
            w[i] = (0..d).map(|j| a[i * d + j] * v[j]).sum::<f64>() + shift * v[i];
        }
        let n = norm(&w);
        if n == 0.0 {
            break;
        }
        for i in 0..d {
            v[i] = w[i] / n;
        }
    }
    let mut rq = 0.0;
    for i in 0..d {
        rq += v[i] * (0..d).map(|j| a[i * d + j] * v[j]).sum::<f64>();
    }
    rq / norm_sq(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gamma(d: usize) -> TargetDistribution {
        TargetDistribution::standard_gaussian(d)
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let base = ScoreModel::exact(
            GaussianMixture::isotropic_gaussian(vec![1.0, -1.0], 0.5).unwrap().into(),
        );
        for mode in [PerturbMode::AdditiveBounded, PerturbMode::AdditiveGaussian, PerturbMode::Scale] {
            let p = base.clone().perturb(mode, Schedule::constant(0.0), 3).unwrap();
            for x in [[0.1, 0.2], [-3.0, 4.0]] {
                assert_eq!(p.evaluate(0.3, &x).unwrap(), base.evaluate(0.3, &x).unwrap());
            }
        }
    }

    #[test]
    fn scale_mode_scales() {
        let p = ScoreModel::exact(gamma(2))
            .perturb(PerturbMode::Scale, Schedule::constant(0.1), 0)
            .unwrap();
        let v = p.evaluate(1.0, &[2.0, -1.0]).unwrap();
        assert_abs_diff_eq!(v[0], -2.2, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 1.1, epsilon = 1e-14);
    }

    #[test]
    fn bounded_field_has_unit_norm_and_is_deterministic() {
        let base = ScoreModel::custom("zero", 3, |_, _, o| o.iter_mut().for_each(|v| *v = 0.0));
        let p = base.perturb(PerturbMode::AdditiveBounded, Schedule::constant(1.0), 9).unwrap();
        for x in [[0.1, 0.2, 0.3], [5.0, -2.0, 0.0], [-0.01, 0.0, 100.0]] {
            let a = p.evaluate(0.5, &x).unwrap();
            assert_abs_diff_eq!(norm(&a), 1.0, epsilon = 1e-12);
            assert_eq!(a, p.evaluate(0.5, &x).unwrap());
        }
        // constant within a cell
        assert_eq!(
            p.evaluate(0.5, &[0.1, 0.1, 0.1]).unwrap(),
            p.evaluate(0.5, &[0.2, 0.3, 0.4]).unwrap()
        );
    }

    #[test]
    fn bounded_perturbation_loss_below_square_amplitude() {
        let eps = 0.3;
        let p = ScoreModel::exact(gamma(2))
            .perturb(PerturbMode::AdditiveBounded, Schedule::constant(eps), 1)
            .unwrap();
        let r = l2_loss(&p, &gamma(2), 0.5, 2000, 4).unwrap();
        assert!(r.b <= eps * eps + 3.0 * r.std_err + 1e-12);
        assert_abs_diff_eq!(r.b, eps * eps, epsilon = 1e-12);
    }

    #[test]
    fn smooth_field_is_smooth() {
        let base = ScoreModel::custom("zero", 2, |_, _, o| o.iter_mut().for_each(|v| *v = 0.0));
        let p = base.perturb(PerturbMode::AdditiveGaussian, Schedule::constant(1.0), 5).unwrap();
        let a = p.evaluate(0.0, &[0.3, 0.3]).unwrap();
        let b = p.evaluate(0.0, &[0.3 + 1e-7, 0.3]).unwrap();
        assert!(dist_sq(&a, &b).sqrt() < 1e-5);
    }

    #[test]
    fn truncation_worked_example() {
        let base = ScoreModel::custom("const", 1, |_, _, o| o[0] = -1.5);
        let tr = base.truncate(2.0, 0.2).unwrap();
        assert_abs_diff_eq!(tr.evaluate(2.0, &[1.0]).unwrap()[0], -1.2, epsilon = 1e-15);
        // other times pass through
        assert_eq!(tr.evaluate(1.0, &[1.0]).unwrap()[0], -1.5);
        let inside = ScoreModel::custom("c", 1, |_, _, o| o[0] = -0.9).truncate(2.0, 0.2).unwrap();
        assert_eq!(inside.evaluate(2.0, &[1.0]).unwrap()[0], -0.9);
        let above = ScoreModel::custom("c", 1, |_, _, o| o[0] = 0.0).truncate(2.0, 0.2).unwrap();
        assert_abs_diff_eq!(above.evaluate(2.0, &[1.0]).unwrap()[0], -0.8, epsilon = 1e-15);
    }

    #[test]
    fn truncation_of_gamma_score_is_identity() {
        for delta in [0.01, 0.5, 0.99] {
            let tr = ScoreModel::exact(gamma(3)).truncate(4.0, delta).unwrap();
            let x = [0.4, -2.0, 7.0];
            let v = tr.evaluate(4.0, &x).unwrap();
            for (a, b) in v.iter().zip(x) {
                assert_abs_diff_eq!(*a, -b, epsilon = 1e-14);
            }
        }
        assert!(ScoreModel::exact(gamma(1)).truncate(1.0, 1.0).is_err());
        assert!(ScoreModel::exact(gamma(1)).truncate(1.0, 0.0).is_err());
    }

    #[test]
    fn exact_model_has_zero_losses() {
        let p = ScoreModel::exact(gamma(2));
        let r = l2_loss(&p, &gamma(2), 0.7, 500, 2).unwrap();
        assert_eq!(r.b, 0.0);
        let m = mgf_loss(&p, &gamma(2), 0.7, 2.0, 500, 2).unwrap();
        assert_eq!(m.eps_mgf, Some(0.0));
        assert!(!m.saturated);
    }

    #[test]
    fn scale_perturbation_loss_matches_analytic() {
        let c = 0.2;
        let d = 3;
        let p = ScoreModel::exact(gamma(d)).perturb(PerturbMode::Scale, Schedule::constant(c), 0).unwrap();
        let r = l2_loss(&p, &gamma(d), 1.0, 20_000, 8).unwrap();
        let analytic = c * c * d as f64;
        assert!((r.b - analytic).abs() <= 3.0 * r.std_err, "{} vs {}", r.b, analytic);
    }

    #[test]
    fn mgf_dominates_scaled_l2() {
        let p = ScoreModel::exact(gamma(2))
            .perturb(PerturbMode::AdditiveGaussian, Schedule::constant(0.3), 3)
            .unwrap();
        for beta in [0.5, 1.0, 2.0] {
            let r = mgf_loss(&p, &gamma(2), 1.0, beta, 2000, 1).unwrap();
            assert!(r.eps_mgf.unwrap() >= beta * r.b - 1e-12);
        }
    }

    #[test]
    fn indicator_estimator_has_heavy_mgf_tail() {
        // s(x) = -x 1{|x| <= 1} for gamma: error |x|^2 outside the unit ball,
        // so exp(beta |x|^2) has infinite mean at beta = 1. The largest draw of
        // 1e5 has |x|^2 of order 2 ln(1e5), far under the cap, so the estimate
        // stays finite but is carried by a handful of draws.
        let s = ScoreModel::custom("indicator", 2, |_, x, o| {
            let inside = norm(x) <= 1.0;
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = if inside { -xi } else { 0.0 };
            }
        });
        let r = mgf_loss(&s, &gamma(2), 1.0, 1.0, 100_000, 3).unwrap();
        assert!(!r.saturated);
        assert!(r.max_term_share.unwrap() > 0.01, "{:?}", r.max_term_share);
        // an error of size 30 is saturated
        let far = ScoreModel::custom("far", 2, |_, x, o| {
            o[0] = -x[0] + 30.0;
            o[1] = -x[1];
        });
        let r = mgf_loss(&far, &gamma(2), 1.0, 1.0, 1000, 3).unwrap();
        assert!(r.saturated);
        assert_eq!(r.eps_mgf, None);
    }

    #[test]
    fn mgf_monotone_in_beta() {
        let p = ScoreModel::exact(gamma(2))
            .perturb(PerturbMode::AdditiveGaussian, Schedule::constant(0.5), 3)
            .unwrap();
        let mut last = f64::NEG_INFINITY;
        for beta in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let v = mgf_loss(&p, &gamma(2), 1.0, beta, 1000, 5).unwrap().eps_mgf.unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn lipschitz_of_linear_fields() {
        let probe = ParticleEnsemble::gaussian(64, 2, 1.0, 1).unwrap();
        let l = one_sided_lipschitz(&ScoreModel::exact(gamma(2)), 0.5, &probe).unwrap();
        assert_abs_diff_eq!(l, -1.0, epsilon = 1e-6);
        for t in [0.1, 0.5, 2.0] {
            let g: TargetDistribution = GaussianMixture::isotropic_gaussian(vec![0.0, 0.0], t).unwrap().into();
            let l = one_sided_lipschitz(&ScoreModel::exact(g), 0.0, &probe).unwrap();
            assert_abs_diff_eq!(l, -1.0 / t, epsilon = 1e-4);
        }
        let c = 0.3;
        let s = ScoreModel::exact(gamma(2)).perturb(PerturbMode::Scale, Schedule::constant(c), 0).unwrap();
        let l = one_sided_lipschitz(&s, 1.0, &probe).unwrap();
        assert_abs_diff_eq!(l, -(1.0 + c), epsilon = 1e-6);
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        // eigenvalues 3 and -5 -> 3
        let a = [-1.0, 4.0, 4.0, -1.0];
        assert_abs_diff_eq!(largest_sym_eigenvalue(2, &a), 3.0, epsilon = 1e-6);
    }
}
