//! Reverse probability-flow ODE.
//!
//! Integrates `dY = (Y + s(T1 - u, Y)) du` for `u` in `[0, T1 - tau]` on a
//! uniform grid, querying the score at `T1 - u`.

use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianMixture, TargetDistribution};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::exec;
use crate::score::{PreparedScore, ScoreModel};

/// Coordinates beyond this magnitude abort the integration.
pub const DIVERGENCE_CAP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Heun,
    #[default]
    ExponentialEuler,
}

impl std::str::FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            "exponential-euler" => Ok(Self::ExponentialEuler),
            other => Err(Error::UnknownName(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub t1: f64,
    pub tau: f64,
    pub integrator: Integrator,
    pub steps: usize,
}

impl PredictorConfig {
    pub fn new(t1: f64, tau: f64, steps: usize) -> Self {
        Self {
            t1,
            tau,
            integrator: Integrator::default(),
            steps,
        }
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.tau) / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("predictor needs at least one step"));
        }
        if !(self.tau >= 0.0 && self.tau < self.t1 && self.t1.is_finite()) {
            return Err(Error::invalid(format!(
                "predictor needs 0 <= tau < T1, got tau = {}, T1 = {}",
                self.tau, self.t1
            )));
        }
        Ok(())
    }
}

fn step(
    integrator: Integrator,
    dt: f64,
    now: &PreparedScore<'_>,
    next: Option<&PreparedScore<'_>>,
    y: &mut [f64],
    s: &mut [f64],
    tmp: &mut [f64],
) {
    match integrator {
        Integrator::Euler => {
            now.eval(y, s);
            for (yi, si) in y.iter_mut().zip(s.iter()) {
                *yi += dt * (*yi + si);
            }
        }
        Integrator::Heun => {
            now.eval(y, s);
            // s <- k1, tmp <- predictor
            for i in 0..y.len() {
                s[i] += y[i];
                tmp[i] = y[i] + dt * s[i];
            }
            let mut s2 = vec![0.0; y.len()];
            next.expect("heun needs the next time").eval(tmp, &mut s2);
            for i in 0..y.len() {
                let k2 = tmp[i] + s2[i];
                y[i] += 0.5 * dt * (s[i] + k2);
            }
        }
        Integrator::ExponentialEuler => {
            now.eval(y, s);
            let e = dt.exp();
            let em1 = dt.exp_m1();
            for (yi, si) in y.iter_mut().zip(s.iter()) {
                *yi = e * *yi + em1 * si;
            }
        }
    }
}

/// Runs the reverse ODE from `start` and returns the ensemble at `u = T1 - tau`.
pub fn predict(score: &ScoreModel, start: &ParticleEnsemble, cfg: &PredictorConfig) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    let d = start.dim();
    if d != score.dim() {
        return Err(Error::DimensionMismatch {
            expected: score.dim(),
            got: d,
        });
    }
    let dt = cfg.step_size();
    let mut out = start.clone();
    let mut now = score.at(cfg.t1)?;
    for k in 0..cfg.steps {
        let t_next = if k + 1 == cfg.steps {
            cfg.tau
        } else {
            cfg.t1 - (k + 1) as f64 * dt
        };
        let next = score.at(t_next)?;
        let next_ref = (cfg.integrator == Integrator::Heun).then_some(&next);
        let now_ref = &now;
        exec::try_for_each_chunk_mut(out.as_flat_mut(), exec::SHARD_LEN * d, |_, chunk| {
            let mut s = vec![0.0; d];
            let mut tmp = vec![0.0; d];
            for y in chunk.chunks_exact_mut(d) {
                step(cfg.integrator, dt, now_ref, next_ref, y, &mut s, &mut tmp);
                if y.iter().any(|v| !(v.abs() <= DIVERGENCE_CAP)) {
                    return Err(Error::Diverged {
                        step: k + 1,
                        cap: DIVERGENCE_CAP,
                    });
                }
            }
            Ok(())
        })?;
        now = next;
    }
    Ok(out)
}

/// Analytic benchmarks for [`convergence_order`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Benchmark {
    /// One-dimensional target `N(0, variance)` with its exact score; the flow
    /// is `y(u) = y0 sqrt(v(T1 - u) / v(T1))`, `v(t) = e^{-2t} variance + 1 - e^{-2t}`.
    SingleGaussian { variance: f64, t1: f64, tau: f64, y0: f64 },
    /// `s = c` everywhere; the flow is `y(u) = e^u y0 + (e^u - 1) c`.
    ConstantScore { c: f64, t1: f64, y0: f64 },
}

impl Benchmark {
    fn horizon(&self) -> (f64, f64) {
        match *self {
            Benchmark::SingleGaussian { t1, tau, .. } => (t1, tau),
            Benchmark::ConstantScore { t1, .. } => (t1, 0.0),
        }
    }

    fn model(&self) -> Result<ScoreModel> {
        Ok(match *self {
            Benchmark::SingleGaussian { variance, .. } => ScoreModel::exact(TargetDistribution::from(
                GaussianMixture::isotropic_gaussian(vec![0.0], variance)?,
            )),
            Benchmark::ConstantScore { c, .. } => ScoreModel::custom("constant", 1, move |_, _, o| o[0] = c),
        })
    }

    fn start(&self) -> f64 {
        match *self {
            Benchmark::SingleGaussian { y0, .. } | Benchmark::ConstantScore { y0, .. } => y0,
        }
    }

    /// Exact terminal value.
    pub fn reference(&self) -> f64 {
        match *self {
            Benchmark::SingleGaussian {
                variance,
                t1,
                tau,
                y0,
            } => {
                let v = |t: f64| (-2.0 * t).exp() * variance - (-2.0 * t).exp_m1();
                y0 * (v(tau) / v(t1)).sqrt()
            }
            Benchmark::ConstantScore { c, t1, y0 } => t1.exp() * y0 + t1.exp_m1() * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub steps: [usize; 3],
    pub errors: [f64; 3],
    /// Mean of the two successive `log2` error ratios.
    pub order: f64,
}

/// Estimates the global order of `integrator` from the terminal errors at
/// `base_steps`, twice and four times as many steps.
pub fn convergence_order(benchmark: Benchmark, integrator: Integrator, base_steps: usize) -> Result<OrderEstimate> {
    let (t1, tau) = benchmark.horizon();
    let model = benchmark.model()?;
    let start = ParticleEnsemble::from_rows(
        &[vec![benchmark.start()]],
        crate::ensemble::SeedRecord::new("benchmark", 0),
    )?;
    let reference = benchmark.reference();
    let steps = [base_steps, 2 * base_steps, 4 * base_steps];
    let mut errors = [0.0; 3];
    for (e, &n) in errors.iter_mut().zip(&steps) {
        let cfg = PredictorConfig::new(t1, tau, n).with_integrator(integrator);
        let y = predict(&model, &start, &cfg)?;
        *e = (y.point(0)[0] - reference).abs();
    }
    let order = 0.5 * ((errors[0] / errors[1]).log2() + (errors[1] / errors[2]).log2());
    Ok(OrderEstimate { steps, errors, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_score_is_pure_growth() {
        let z = ScoreModel::custom("zero", 2, |_, _, o| o.iter_mut().for_each(|v| *v = 0.0));
        let start = ParticleEnsemble::gaussian(10, 2, 1.0, 1).unwrap();
        let cfg = PredictorConfig::new(1.5, 0.25, 7);
        let y = predict(&z, &start, &cfg).unwrap();
        let g = 1.25f64.exp();
        for (a, b) in y.as_flat().iter().zip(start.as_flat()) {
            assert_abs_diff_eq!(*a, g * b, epsilon = 1e-12 * g * b.abs().max(1.0));
        }
    }

    #[test]
    fn gamma_particles_are_fixed_points() {
        let s = ScoreModel::exact(TargetDistribution::standard_gaussian(3));
        let start = ParticleEnsemble::gaussian(20, 3, 1.0, 2).unwrap();
        for integrator in [Integrator::Euler, Integrator::Heun, Integrator::ExponentialEuler] {
            let cfg = PredictorConfig::new(2.0, 0.01, 50).with_integrator(integrator);
            let y = predict(&s, &start, &cfg).unwrap();
            for (a, b) in y.as_flat().iter().zip(start.as_flat()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let s = ScoreModel::exact(TargetDistribution::standard_gaussian(1));
        let start = ParticleEnsemble::gaussian(3, 1, 1.0, 2).unwrap();
        assert!(predict(&s, &start, &PredictorConfig::new(1.0, 1.0, 10)).is_err());
        assert!(predict(&s, &start, &PredictorConfig::new(1.0, 0.0, 0)).is_err());
        let start2 = ParticleEnsemble::gaussian(3, 2, 1.0, 2).unwrap();
        assert!(predict(&s, &start2, &PredictorConfig::new(1.0, 0.0, 10)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let s = ScoreModel::custom("blowup", 1, |_, x, o| o[0] = 100.0 * x[0]);
        let start = ParticleEnsemble::gaussian(3, 1, 1.0, 2).unwrap();
        let r = predict(&s, &start, &PredictorConfig::new(2.0, 0.0, 10).with_integrator(Integrator::Euler));
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn reference_solution_satisfies_the_ode() {
        // compare the closed form against a very fine Heun run
        let b = Benchmark::SingleGaussian {
            variance: 4.0,
            t1: 1.0,
            tau: 0.0,
            y0: 0.7,
        };
        let model = b.model().unwrap();
        let start = ParticleEnsemble::from_rows(&[vec![0.7]], crate::ensemble::SeedRecord::new("t", 0)).unwrap();
        let y = predict(
            &model,
            &start,
            &PredictorConfig::new(1.0, 0.0, 20_000).with_integrator(Integrator::Heun),
        )
        .unwrap();
        assert_abs_diff_eq!(y.point(0)[0], b.reference(), epsilon = 1e-10);
    }

    #[test]
    fn orders() {
        let b = Benchmark::SingleGaussian {
            variance: 4.0,
            t1: 1.0,
            tau: 0.0,
            y0: 1.0,
        };
        let e = convergence_order(b, Integrator::Euler, 50).unwrap();
        assert!((e.order - 1.0).abs() <= 0.3, "{e:?}");
        let h = convergence_order(b, Integrator::Heun, 50).unwrap();
        assert!((h.order - 2.0).abs() <= 0.3, "{h:?}");
        let c = Benchmark::ConstantScore {
            c: 0.7,
            t1: 1.5,
            y0: -0.3,
        };
        let x = convergence_order(c, Integrator::ExponentialEuler, 10).unwrap();
        assert!(x.errors.iter().all(|e| *e <= 1e-12), "{x:?}");
    }
}
