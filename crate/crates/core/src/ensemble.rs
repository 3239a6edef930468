use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;

/// Which module drew which seed, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub module: String,
    pub seed: u64,
}

impl SeedRecord {
    pub fn new(module: impl Into<String>, seed: u64) -> Self {
        Self {
            module: module.into(),
            seed,
        }
    }
}

/// An ordered set of `d`-dimensional points stored row-major, together with
/// the seeds that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    d: usize,
    points: Vec<f64>,
    lineage: Vec<SeedRecord>,
}

impl ParticleEnsemble {
    pub fn new(d: usize, points: Vec<f64>, lineage: Vec<SeedRecord>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if points.len() % d != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates do not split into points of dimension {d}",
                points.len()
            )));
        }
        if lineage.is_empty() {
            return Err(Error::invalid("ensemble lineage must not be empty"));
        }
        if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite coordinate in point {}",
                bad / d
            )));
        }
        Ok(Self { d, points, lineage })
    }

    pub fn from_rows(rows: &[Vec<f64>], origin: SeedRecord) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        Self::new(d, rows.concat(), vec![origin])
    }

    /// `n` i.i.d. draws from `N(0, variance * I_d)`, sharded by [`exec::SHARD_LEN`].
    pub fn gaussian(n: usize, d: usize, variance: f64, seed: u64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::invalid("variance must be positive"));
        }
        let sd = variance.sqrt();
        let mut points = vec![0.0; n * d];
        exec::try_for_each_chunk_mut(&mut points, exec::SHARD_LEN * d, |shard, chunk| {
            let mut r = rng::shard_rng(seed, shard);
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v = sd * z;
            }
            Ok::<(), Error>(())
        })?;
        Self::new(d, points, vec![SeedRecord::new("gaussian", seed)])
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

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.d)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn lineage(&self) -> &[SeedRecord] {
        &self.lineage
    }

    pub fn push_lineage(&mut self, record: SeedRecord) {
        self.lineage.push(record);
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.iter() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance, row-major `d x d`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.d;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for p in self.iter() {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += (p[i] - m[i]) * (p[j] - m[j]);
                }
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= denom);
        c
    }

    /// Mean of the per-coordinate sample variances.
    pub fn mean_variance(&self) -> f64 {
        let c = self.covariance();
        (0..self.d).map(|i| c[i * self.d + i]).sum::<f64>() / self.d as f64
    }

    pub fn shifted(&self, v: &[f64]) -> Self {
        let mut out = self.clone();
        for p in out.points.chunks_exact_mut(self.d) {
            for (a, b) in p.iter_mut().zip(v) {
                *a += b;
            }
        }
        out
    }

    pub fn max_norm(&self) -> f64 {
        self.iter().map(norm).fold(0.0, f64::max)
    }

    /// Writes `x0,...,x{d-1}` CSV, one point per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record((0..self.d).map(|i| format!("x{i}")))?;
        for p in self.iter() {
            w.write_record(p.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let d = header.len();
        for (i, h) in header.iter().enumerate() {
            if h.trim() != format!("x{i}") {
                return Err(Error::invalid(format!(
                    "{}: column {i} is '{h}', expected 'x{i}'",
                    path.display()
                )));
            }
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: rec.len(),
                });
            }
            for f in rec.iter() {
                let v: f64 = f.trim().parse().map_err(|_| {
                    Error::invalid(format!("{}: cannot parse '{f}' as a number", path.display()))
                })?;
                points.push(v);
            }
        }
        if points.is_empty() {
            return Err(Error::invalid(format!("{}: no points", path.display())));
        }
        Self::new(
            d,
            points,
            vec![SeedRecord::new(format!("csv:{}", path.display()), 0)],
        )
    }
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
