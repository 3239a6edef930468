//! TOML run configuration.
//!
//! ```toml
//! [target]
//! kind = "dataset"
//! name = "two-moons"
//! n = 1000
//!
//! [schedule]
//! t1 = 2.0
//! t2 = [0.0, 0.5, 1.0, 2.0, 4.0]
//! tau = 0.01
//! delta = 0.5
//!
//! [sampling]
//! n = 2000
//! seed = 1
//! ```
//!
//! Every section except `[target]` and `[schedule]` has defaults. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorMode;
use crate::distributions::{EmpiricalDataset, GaussianMixture, MixtureComponent, TargetDistribution};
use crate::error::{Error, Result};
use crate::predictor::Integrator;
use crate::score::PerturbMode;
use crate::transport::{W2Method, DEFAULT_SINKHORN_ITERS};

use super::datasets::generate_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub target: TargetSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub score: ScoreSpec,
    #[serde(default)]
    pub corrector: CorrectorSpec,
    #[serde(default)]
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub bounds: BoundsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// One of the built-in synthetic datasets.
    Dataset {
        name: String,
        #[serde(default = "default_dataset_n")]
        n: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `N(mean, variance * I)`.
    Gaussian { mean: Vec<f64>, variance: f64 },
    /// Isotropic Gaussian mixture.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    /// Points from a CSV file with an `x0,x1,...` header.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t1: f64,
    /// Corrector durations, one run per entry.
    pub t2: Vec<f64>,
    pub tau: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSpec {
    /// Perturbation applied to the exact score; `None` keeps it exact.
    pub perturb: Option<PerturbMode>,
    pub amplitude: f64,
    /// Clip to the truncation band of width `delta` at `t1`.
    pub truncate: bool,
    /// MGF exponent for the reported truncation loss; defaults to `1 / (1 - delta)`.
    pub beta: Option<f64>,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            perturb: None,
            amplitude: 0.0,
            truncate: false,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorSpec {
    pub h: f64,
    pub mode: CorrectorMode,
    /// Checkpoint times of the W2 trace for the longest run; empty disables it.
    pub trace: Vec<f64>,
}

impl Default for CorrectorSpec {
    fn default() -> Self {
        Self {
            h: 0.01,
            mode: CorrectorMode::default(),
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSpec {
    pub integrator: Integrator,
    pub steps: usize,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            integrator: Integrator::default(),
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W2Kind {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    /// Particles per run.
    pub n: usize,
    /// Size of each fresh reference sample; defaults to `n`.
    pub n_ref: Option<usize>,
    pub seed: u64,
    pub w2: W2Kind,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// Monte Carlo draws per loss estimate.
    pub loss_samples: usize,
    /// Number of loss and Lipschitz times on `[tau, t1]`.
    pub loss_times: usize,
    /// Probe points per Lipschitz estimate.
    pub probe: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            n_ref: None,
            seed: 0,
            w2: W2Kind::Exact,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            loss_samples: 2000,
            loss_times: 32,
            probe: 64,
        }
    }
}

impl SamplingSpec {
    pub fn reference_size(&self) -> usize {
        self.n_ref.unwrap_or(self.n)
    }

    pub fn w2_method(&self) -> W2Method {
        match self.w2 {
            W2Kind::Exact => W2Method::Exact,
            W2Kind::Sinkhorn => W2Method::Sinkhorn {
                eps: self.sinkhorn_eps,
                max_iters: self.sinkhorn_iters,
            },
        }
    }
}

/// Constants of the discrete step-count bound. These are schedule inputs,
/// not derived values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSpec {
    pub l1: f64,
    pub l2: f64,
    /// Overrides `d * l2^2 * l1 / (1 - delta)`.
    pub c1: Option<f64>,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            c1: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Results JSON path; relative paths resolve against the working directory.
    pub results: Option<PathBuf>,
}

fn default_dataset_n() -> usize {
    1000
}

impl SamplerConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SamplerConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(s.tau > 0.0 && s.t1 > s.tau && s.t1.is_finite()) {
            return bad("schedule needs 0 < tau < t1");
        }
        if !(s.delta > 0.0 && s.delta < 1.0) {
            return bad("schedule.delta must lie in (0, 1)");
        }
        if s.t2.is_empty() || s.t2.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return bad("schedule.t2 needs at least one finite time >= 0");
        }
        if s.t2.windows(2).any(|w| w[1] < w[0]) {
            return bad("schedule.t2 must be nondecreasing");
        }
        if !(self.corrector.h > 0.0) {
            return bad("corrector.h must be positive");
        }
        if self.predictor.steps == 0 {
            return bad("predictor.steps must be positive");
        }
        let sm = &self.sampling;
        if sm.n < 100 || sm.reference_size() < 100 || sm.loss_samples < 100 || sm.probe < 2 {
            return bad("sampling needs n, n_ref and loss_samples >= 100 and probe >= 2");
        }
        if sm.w2 == W2Kind::Exact && sm.reference_size() != sm.n {
            return bad("exact W2 needs n_ref == n");
        }
        if sm.loss_times < crate::bounds::MIN_GRID_POINTS {
            return bad("sampling.loss_times is below the integration minimum");
        }
        if !(self.bounds.l1 > 0.0 && self.bounds.l2 > 0.0) || self.bounds.c1.is_some_and(|c| !(c > 0.0)) {
            return bad("bounds.l1, bounds.l2 and bounds.c1 must be positive");
        }
        if !(self.score.amplitude >= 0.0) {
            return bad("score.amplitude must be >= 0");
        }
        Ok(())
    }

    /// Builds the target law.
    pub fn build_target(&self) -> Result<TargetDistribution> {
        Ok(match &self.target {
            TargetSpec::Dataset { name, n, noise, seed } => generate_dataset(name, *n, *noise, *seed)?.into(),
            TargetSpec::Gaussian { mean, variance } => {
                GaussianMixture::isotropic_gaussian(mean.clone(), *variance)?.into()
            }
            TargetSpec::Mixture {
                weights,
                means,
                variances,
            } => {
                if weights.len() != means.len() || weights.len() != variances.len() {
                    return Err(Error::Config("mixture weights, means and variances differ in length".into()));
                }
                let comps = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| MixtureComponent::isotropic(*w, m.clone(), *v))
                    .collect();
                GaussianMixture::new(comps)?.into()
            }
            TargetSpec::Csv { path } => EmpiricalDataset::read_csv(path)?.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[target]
kind = "dataset"
name = "two-moons"

[schedule]
t1 = 2.0
t2 = [0.0, 1.0]
tau = 0.01
delta = 0.5
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = SamplerConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.sampling.n, 2000);
        assert_eq!(c.corrector.h, 0.01);
        assert_eq!(c.predictor.integrator, Integrator::ExponentialEuler);
        assert!(matches!(c.target, TargetSpec::Dataset { n: 1000, .. }));
        let back = SamplerConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let extra = MINIMAL.replace("delta = 0.5", "delta = 0.5\nfoo = 1");
        assert!(matches!(SamplerConfig::from_toml_str(&extra), Err(Error::Config(_))));
        let extra = MINIMAL.replace("name = \"two-moons\"", "name = \"two-moons\"\nsize = 3");
        assert!(SamplerConfig::from_toml_str(&extra).is_err());
    }

    #[test]
    fn invalid_schedule_rejected() {
        let bad = MINIMAL.replace("delta = 0.5", "delta = 1.5");
        assert!(SamplerConfig::from_toml_str(&bad).is_err());
        let bad = MINIMAL.replace("t2 = [0.0, 1.0]", "t2 = [1.0, 0.0]");
        assert!(SamplerConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn enum_names_parse() {
        let s = format!(
            "{MINIMAL}\n[score]\nperturb = \"scale\"\namplitude = 0.1\n[corrector]\nmode = \"discrete-algorithm\"\n[predictor]\nintegrator = \"heun\"\n"
        );
        let c = SamplerConfig::from_toml_str(&s).unwrap();
        assert_eq!(c.score.perturb, Some(PerturbMode::Scale));
        assert_eq!(c.corrector.mode, CorrectorMode::DiscreteAlgorithm);
        assert_eq!(c.predictor.integrator, Integrator::Heun);
    }
}
