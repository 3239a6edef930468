//! Soundness check of stored results against their bounds.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

use super::results::{BoundReport, BoundStatus, RunResults};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub t2: f64,
    pub measured: Option<f64>,
    pub bound: Option<f64>,
    pub floor: Option<f64>,
    pub status: BoundStatus,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub t1: f64,
    pub threshold: f64,
}

impl VerifyReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.status == BoundStatus::Violated).count()
    }

    pub fn satisfied(&self) -> usize {
        self.rows.iter().filter(|r| r.status == BoundStatus::Satisfied).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    /// Plain-text table, one row per grid point.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        if self.t1 < self.threshold {
            let _ = writeln!(
                s,
                "warning: t1 = {} is below the threshold {:.4}; soundness is not asserted",
                self.t1, self.threshold
            );
        }
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>14} {:>12}  status",
            "t2", "measured", "bound", "floor"
        );
        for r in &self.rows {
            let _ = write!(
                s,
                "{:>8} {:>12} {:>14} {:>12}  {}",
                r.t2,
                fmt(r.measured),
                fmt(r.bound),
                fmt(r.floor),
                r.status.as_str()
            );
            if let Some(n) = &r.note {
                let _ = write!(s, " ({n})");
            }
            s.push('\n');
        }
        s
    }
}

/// Recomputes each row's status from the stored numbers.
pub fn verify_report(bounds: &BoundReport) -> VerifyReport {
    VerifyReport {
        rows: bounds
            .rows
            .iter()
            .map(|r| VerifyRow {
                t2: r.t2,
                measured: r.measured,
                bound: if r.bound_infinite { Some(f64::INFINITY) } else { r.bound },
                floor: r.floor,
                status: r.classify(),
                note: r.note.clone(),
            })
            .collect(),
        t1: bounds.t1,
        threshold: bounds.thresholds.psi_only,
    }
}

pub fn verify_results(results: &RunResults) -> VerifyReport {
    verify_report(&results.bounds)
}

/// Loads a results file and checks it. Fails with `MissingResults` when the
/// file or its bounds section is absent.
pub fn verify_bounds(path: &Path) -> Result<VerifyReport> {
    Ok(verify_results(&RunResults::read(path)?))
}
