//! Results JSON, schema 1.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{Assumptions, T1Thresholds, Thm1Terms, TimeCurve};
use crate::corrector::TracePoint;
use crate::distributions::SubgaussianNorm;
use crate::error::{Error, Result};
use crate::predictor::Integrator;
use crate::score::{LossReport, Provenance};

use super::config::SamplerConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Measured W2 may exceed the bound by this many self-distance floors.
pub const FLOOR_SLACK: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub schema: u32,
    pub config: SamplerConfig,
    pub target: TargetSummary,
    pub score: Provenance,
    /// One per `schedule.t2` value, in order.
    pub entries: Vec<Entry>,
    /// `b(t)` on the loss grid.
    pub losses: Vec<LossReport>,
    /// MGF loss at `t1` with `beta = 1 / (1 - delta)`.
    pub mgf: LossReport,
    /// MGF loss at `t1` with the configured `score.beta`, when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mgf_configured: Option<LossReport>,
    pub lipschitz: LipschitzCurve,
    pub bounds: BoundReport,
    pub corrector_trace: Vec<TracePoint>,
    pub predictor: PredictorSummary,
    pub timing: Timing,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub label: String,
    pub dim: usize,
    pub second_moment: f64,
    pub psi: SubgaussianNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub t2: f64,
    pub corrector_steps: usize,
    /// `W2(p_T1 sample, corrector output)`.
    pub w2_corrector: Option<f64>,
    pub w2_corrector_floor: Option<f64>,
    /// `sqrt(max(w2^2 - floor^2, 0))`, informational.
    pub w2_corrector_debiased: Option<f64>,
    /// `W2(p sample, sampler output)`.
    pub w2_final: Option<f64>,
    pub w2_final_floor: Option<f64>,
    pub seeds: EntrySeeds,
    /// Set when a module error aborted this grid point.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySeeds {
    pub corrector: u64,
    pub reference_t1: u64,
    pub reference_p: u64,
    pub floor_t1: u64,
    pub floor_p: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCurve {
    pub curve: TimeCurve,
    pub probe: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Satisfied,
    Violated,
    AssumptionsUnmet,
}

impl BoundStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundStatus::Satisfied => "satisfied",
            BoundStatus::Violated => "violated",
            BoundStatus::AssumptionsUnmet => "assumptions-unmet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub psi: f64,
    pub d: usize,
    pub second_moment: f64,
    pub delta: f64,
    pub tau: f64,
    pub t1: f64,
    pub beta: f64,
    /// `None` when the MGF estimate saturated.
    pub eps_mgf: Option<f64>,
    pub thresholds: T1Thresholds,
    /// Log-Sobolev constant lower bound of `p_T1`; `None` below its validity time.
    pub lsi_kappa: Option<f64>,
    /// Upper bound on `KL(gamma || p_T1)`.
    pub kl_initial: f64,
    pub step_schedule: StepSchedule,
    pub rows: Vec<BoundRow>,
}

/// Discrete corrector schedule. `c1` is a schedule constant, not a theorem value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c1: f64,
    pub l1: f64,
    pub l2: f64,
    pub h: f64,
    pub h_max: f64,
    pub h_in_window: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t2: f64,
    pub measured: Option<f64>,
    pub floor: Option<f64>,
    /// `None` when the terms could not be evaluated.
    pub assumptions: Option<Assumptions>,
    pub tau_window: bool,
    /// `res1_total`; `None` when not evaluated or not finite.
    pub bound: Option<f64>,
    /// The bound overflowed to `+inf` and holds trivially.
    pub bound_infinite: bool,
    /// All terms, when every one of them is finite.
    pub terms: Option<Thm1Terms>,
    /// Transport bound on the corrector output from the LSI decay.
    pub corrector_bound: Option<f64>,
    /// Discrete-step bound, reported for the discrete corrector only.
    pub step_bound: Option<f64>,
    pub status: BoundStatus,
    pub note: Option<String>,
}

impl BoundRow {
    /// Status from the stored numbers: gated rows never fail.
    pub fn classify(&self) -> BoundStatus {
        match self.assumptions {
            None | Some(Assumptions::Unmet) => return BoundStatus::AssumptionsUnmet,
            _ if !self.tau_window => return BoundStatus::AssumptionsUnmet,
            _ => {}
        }
        let Some(m) = self.measured else {
            return BoundStatus::AssumptionsUnmet;
        };
        if self.bound_infinite {
            return BoundStatus::Satisfied;
        }
        match self.bound {
            Some(b) if m <= b + FLOOR_SLACK * self.floor.unwrap_or(0.0) => BoundStatus::Satisfied,
            Some(_) => BoundStatus::Violated,
            None => BoundStatus::AssumptionsUnmet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub integrator: Integrator,
    pub steps: usize,
    pub tau: f64,
    pub step_size: f64,
}

/// Wall-clock seconds; the only nondeterministic part of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub losses_s: f64,
    pub entries_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub pcsgm: String,
    pub schema: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            pcsgm: env!("CARGO_PKG_VERSION").to_string(),
            schema: SCHEMA_VERSION,
        }
    }
}

impl RunResults {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timing block zeroed, for reproducibility comparisons.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut c = self.clone();
        c.timing = Timing {
            total_s: 0.0,
            losses_s: 0.0,
            entries_s: vec![0.0; c.timing.entries_s.len()],
        };
        c.to_json()
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(json.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|_| Error::MissingResults(path.display().to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&s)?;
        match v.get("schema").and_then(|s| s.as_u64()) {
            Some(s) if s == SCHEMA_VERSION as u64 => {}
            other => {
                return Err(Error::Config(format!(
                    "{}: expected schema {SCHEMA_VERSION}, found {other:?}",
                    path.display()
                )))
            }
        }
        if v.get("bounds").is_none() {
            return Err(Error::MissingResults(format!("{}: no bounds section", path.display())));
        }
        Ok(serde_json::from_value(v)?)
    }
}
