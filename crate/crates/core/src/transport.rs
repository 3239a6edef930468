//! Empirical Wasserstein-2 distances between particle ensembles.

use serde::{Deserialize, Serialize};

use crate::distributions::{log_sum_exp, sym_sqrt};
use crate::ensemble::{dist_sq, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::exec;

/// Largest ensemble accepted by [`w2_exact`].
pub const EXACT_LIMIT: usize = 4096;
pub const SINKHORN_LIMIT: usize = 100_000;
pub const BRUTEFORCE_LIMIT: usize = 8;
/// Stop when the L1 marginal violation falls below this.
pub const SINKHORN_TOL: f64 = 1e-9;
pub const DEFAULT_SINKHORN_ITERS: usize = 1000;

/// Squared-Euclidean costs between two ensembles, row-major `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn squared_euclidean(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<Self> {
        check_dims(a, b)?;
        let (n, m) = (a.len(), b.len());
        let rows = exec::map_indexed(n, |i| {
            let x = a.point(i);
            (0..m).map(|j| dist_sq(x, b.point(j))).collect::<Vec<_>>()
        });
        Ok(Self {
            rows: n,
            cols: m,
            entries: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

fn check_dims(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn check_equal_sizes(a: &ParticleEnsemble, b: &ParticleEnsemble, limit: usize) -> Result<()> {
    check_dims(a, b)?;
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() > limit {
        return Err(Error::TooLarge {
            size: a.len(),
            limit,
        });
    }
    Ok(())
}

/// Optimal assignment `row -> column` minimizing the total cost
/// (shortest augmenting paths with potentials).
pub fn optimal_assignment(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.rows;
    assert_eq!(n, cost.cols, "assignment needs a square cost matrix");
    // 1-based arrays; column 0 is a virtual source.
    // feasible starting duals from row then column reduction
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![f64::INFINITY; n + 1];
    v[0] = 0.0;
    for i in 1..=n {
        let row = &cost.entries[(i - 1) * n..i * n];
        u[i] = row.iter().copied().fold(f64::INFINITY, f64::min);
        for j in 1..=n {
            v[j] = v[j].min(row[j - 1] - u[i]);
        }
    }
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost.entries[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn assignment_w2(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    (total / assignment.len() as f64).sqrt()
}

/// Exact empirical W2 between equal-size ensembles.
pub fn w2_exact(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    check_equal_sizes(a, b, EXACT_LIMIT)?;
    let cost = CostMatrix::squared_euclidean(a, b)?;
    Ok(assignment_w2(&cost, &optimal_assignment(&cost)))
}

/// Exhaustive search over all `n!` assignments; `n <= 8`.
pub fn w2_bruteforce(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    check_equal_sizes(a, b, BRUTEFORCE_LIMIT)?;
    let cost = CostMatrix::squared_euclidean(a, b)?;
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = assignment_w2(&cost, &perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(assignment_w2(&cost, &perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Result of an entropic OT computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Square root of the (clamped) debiased Sinkhorn divergence.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

/// Kernels with at most this many entries are stored densely.
const DENSE_LIMIT: usize = 1 << 24;

/// Scalings are folded into the potentials once `|ln u|` exceeds this.
const ABSORB_LOG: f64 = 30.0;

struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
    converged: bool,
    iterations: usize,
    err: f64,
}

/// `-eps * LSE_j (log w_j + (pot_j - C(i, j)) / eps)` for every `i`.
fn soft_min<C>(n: usize, m: usize, cost: &C, log_w: f64, pot: &[f64], eps: f64) -> Vec<f64>
where
    C: Fn(usize, usize) -> f64 + Sync,
{
    exec::map_indexed(n, |i| {
        let terms: Vec<f64> = (0..m).map(|j| log_w + (pot[j] - cost(i, j)) / eps).collect();
        -eps * log_sum_exp(&terms)
    })
}

/// One log-domain sweep; returns the row-marginal violation before the `f` update.
fn log_step(x: &ParticleEnsemble, y: &ParticleEnsemble, f: &mut Vec<f64>, g: &mut Vec<f64>, eps: f64) -> f64 {
    let (n, m) = (x.len(), y.len());
    let cost = |i: usize, j: usize| dist_sq(x.point(i), y.point(j));
    let cost_t = |j: usize, i: usize| dist_sq(x.point(i), y.point(j));
    *g = soft_min(m, n, &cost_t, -(n as f64).ln(), f, eps);
    let f_new = soft_min(n, m, &cost, -(m as f64).ln(), g, eps);
    let err = f
        .iter()
        .zip(&f_new)
        .map(|(old, new)| ((old - new) / eps).exp_m1().abs())
        .sum::<f64>()
        / n as f64;
    *f = f_new;
    err
}

fn log_stage(
    x: &ParticleEnsemble,
    y: &ParticleEnsemble,
    f: &mut Vec<f64>,
    g: &mut Vec<f64>,
    eps: f64,
    tol: f64,
    budget: usize,
) -> (f64, usize) {
    let mut err = f64::INFINITY;
    let mut it = 0;
    while it < budget && err >= tol {
        err = log_step(x, y, f, g, eps);
        it += 1;
    }
    (err, it)
}

/// Kernel-domain iterations with absorption into the potentials
/// (`K_ij = exp((f_i + g_j - C_ij) / eps)`, plan `diag(u) K diag(v)`).
fn dense_stage(
    x: &ParticleEnsemble,
    y: &ParticleEnsemble,
    f: &mut Vec<f64>,
    g: &mut Vec<f64>,
    eps: f64,
    tol: f64,
    budget: usize,
) -> (f64, usize) {
    let (n, m) = (x.len(), y.len());
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let build = |f: &[f64], g: &[f64]| -> Vec<f64> {
        exec::map_indexed(n, |i| {
            let xi = x.point(i);
            (0..m)
                .map(|j| ((f[i] + g[j] - dist_sq(xi, y.point(j))) / eps).exp())
                .collect::<Vec<_>>()
        })
        .concat()
    };
    let mut kernel = build(f, g);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut err = f64::INFINITY;
    let mut it = 0;
    while it < budget {
        let mut ktu = vec![0.0; m];
        for (i, row) in kernel.chunks_exact(m).enumerate() {
            let ui = u[i];
            for (acc, k) in ktu.iter_mut().zip(row) {
                *acc += k * ui;
            }
        }
        for (vj, s) in v.iter_mut().zip(&ktu) {
            *vj = b / s;
        }
        let kv = exec::map_indexed(n, |i| {
            kernel[i * m..(i + 1) * m].iter().zip(&v).map(|(k, vj)| k * vj).sum::<f64>()
        });
        err = u.iter().zip(&kv).map(|(ui, s)| (ui * s - a).abs()).sum::<f64>();
        for (ui, s) in u.iter_mut().zip(&kv) {
            *ui = a / s;
        }
        it += 1;
        let finite = u.iter().chain(&v).all(|s| s.is_finite() && *s > 0.0);
        if !finite {
            // a row or column underflowed; recover with an exact log-domain sweep
            err = log_step(x, y, f, g, eps);
            u.iter_mut().for_each(|s| *s = 1.0);
            v.iter_mut().for_each(|s| *s = 1.0);
            kernel = build(f, g);
            if !err.is_nan() && err < tol {
                break;
            }
            continue;
        }
        let big = u.iter().chain(&v).any(|s| s.ln().abs() > ABSORB_LOG);
        if big || err < tol || it == budget {
            for (fi, ui) in f.iter_mut().zip(&u) {
                *fi += eps * ui.ln();
            }
            for (gj, vj) in g.iter_mut().zip(&v) {
                *gj += eps * vj.ln();
            }
            u.iter_mut().for_each(|s| *s = 1.0);
            v.iter_mut().for_each(|s| *s = 1.0);
            if err < tol || it == budget {
                break;
            }
            kernel = build(f, g);
        }
    }
    (err, it)
}

fn entropic_ot(x: &ParticleEnsemble, y: &ParticleEnsemble, eps: f64, max_iters: usize) -> Potentials {
    let (n, m) = (x.len(), y.len());
    let dense = n * m <= DENSE_LIMIT;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    // eps-scaling: halve from the cost scale down to the target
    let mut stage_eps = diameter_sq(x, y).max(eps);
    loop {
        let last = stage_eps <= eps;
        let cur = if last { eps } else { stage_eps };
        let (tol, budget) = if last { (SINKHORN_TOL, max_iters) } else { (1e-3, 50) };
        let (err, k) = if dense {
            dense_stage(x, y, &mut f, &mut g, cur, tol, budget)
        } else {
            log_stage(x, y, &mut f, &mut g, cur, tol, budget)
        };
        iterations += k;
        if last {
            return Potentials {
                f,
                g,
                converged: err < SINKHORN_TOL,
                iterations,
                err,
            };
        }
        stage_eps *= 0.5;
    }
}

/// Debiased entropic estimate of W2.
///
/// Computes `S = OT(a, b) - (OT(a, a) + OT(b, b)) / 2` with stabilized
/// Sinkhorn iterations and eps-scaling, and returns `sqrt(max(S, 0))`.
/// Ensembles too large for a dense kernel fall back to log-domain sweeps
/// with costs computed on the fly. `max_iters` bounds the iterations at the
/// target `eps`; hitting it is reported through `converged`.
pub fn w2_sinkhorn(
    a: &ParticleEnsemble,
    b: &ParticleEnsemble,
    eps: f64,
    max_iters: usize,
) -> Result<SinkhornResult> {
    check_dims(a, b)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("sinkhorn eps must be positive"));
    }
    for e in [a, b] {
        if e.len() > SINKHORN_LIMIT {
            return Err(Error::TooLarge {
                size: e.len(),
                limit: SINKHORN_LIMIT,
            });
        }
    }
    let ot = |x: &ParticleEnsemble, y: &ParticleEnsemble| {
        let p = entropic_ot(x, y, eps, max_iters);
        let value = p.f.iter().sum::<f64>() / x.len() as f64 + p.g.iter().sum::<f64>() / y.len() as f64;
        (value, p)
    };
    let (ab, pab) = ot(a, b);
    let (aa, paa) = ot(a, a);
    let (bb, pbb) = ot(b, b);
    let s = ab - 0.5 * (aa + bb);
    Ok(SinkhornResult {
        value: s.max(0.0).sqrt(),
        converged: pab.converged && paa.converged && pbb.converged,
        iterations: pab.iterations.max(paa.iterations).max(pbb.iterations),
        marginal_error: pab.err.max(paa.err).max(pbb.err),
    })
}

/// How a W2 measurement is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum W2Method {
    Exact,
    Sinkhorn { eps: f64, max_iters: usize },
}

/// W2 by the chosen method.
pub fn w2(a: &ParticleEnsemble, b: &ParticleEnsemble, method: W2Method) -> Result<f64> {
    match method {
        W2Method::Exact => w2_exact(a, b),
        W2Method::Sinkhorn { eps, max_iters } => Ok(w2_sinkhorn(a, b, eps, max_iters)?.value),
    }
}

/// Upper bound on the largest squared distance, via bounding boxes.
fn diameter_sq(a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    let d = a.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in a.iter().chain(b.iter()) {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum()
}

/// Closed-form W2 between `N(m1, s1)` and `N(m2, s2)` (row-major covariances).
pub fn w2_gaussian(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m2.len(),
        });
    }
    for s in [s1, s2] {
        if s.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: s.len(),
            });
        }
    }
    // validates both inputs
    let _ = sym_sqrt(d, s1)?;
    let r2 = sym_sqrt(d, s2)?;
    let a = nalgebra::DMatrix::from_row_slice(d, d, s1);
    let inner = &r2 * a * &r2;
    let inner = 0.5 * (&inner + inner.transpose());
    let cross = sym_sqrt(d, inner.as_slice())?;
    let tr1: f64 = (0..d).map(|i| s1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| s2[i * d + i]).sum();
    let bures = (tr1 + tr2 - 2.0 * cross.trace()).max(0.0);
    Ok((dist_sq(m1, m2) + bures).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::SeedRecord;
    use approx::assert_abs_diff_eq;

    fn ens(d: usize, pts: Vec<f64>) -> ParticleEnsemble {
        ParticleEnsemble::new(d, pts, vec![SeedRecord::new("test", 0)]).unwrap()
    }

    #[test]
    fn trivial_cases() {
        let a = ParticleEnsemble::gaussian(50, 2, 1.0, 1).unwrap();
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        let s = ens(2, vec![0.0, 0.0]);
        let t = ens(2, vec![1.0, 0.0]);
        assert_eq!(w2_exact(&s, &t).unwrap(), 1.0);
        assert_eq!(w2_bruteforce(&s, &t).unwrap(), 1.0);
        let x = ens(1, vec![0.0, 1.0]);
        let y = ens(1, vec![1.0, 0.0]);
        assert_eq!(w2_bruteforce(&x, &y).unwrap(), 0.0);
        assert_eq!(w2_exact(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn size_errors() {
        let a = ParticleEnsemble::gaussian(3, 2, 1.0, 1).unwrap();
        let b = ParticleEnsemble::gaussian(4, 2, 1.0, 1).unwrap();
        assert!(matches!(w2_exact(&a, &b), Err(Error::SizeMismatch { .. })));
        let c = ParticleEnsemble::gaussian(9, 1, 1.0, 1).unwrap();
        assert!(matches!(w2_bruteforce(&c, &c), Err(Error::TooLarge { .. })));
        let big = ParticleEnsemble::gaussian(EXACT_LIMIT + 1, 1, 1.0, 1).unwrap();
        assert!(matches!(w2_exact(&big, &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn exact_matches_bruteforce() {
        for seed in 0..20 {
            let n = 1 + (seed as usize % 8);
            let a = ParticleEnsemble::gaussian(n, 3, 1.0, seed).unwrap();
            let b = ParticleEnsemble::gaussian(n, 3, 2.0, seed + 100).unwrap();
            let e = w2_exact(&a, &b).unwrap();
            let f = w2_bruteforce(&a, &b).unwrap();
            assert_abs_diff_eq!(e, f, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_closed_form() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let four = [4.0, 0.0, 0.0, 4.0];
        assert_abs_diff_eq!(w2_gaussian(&[0.0, 0.0], &i2, &[0.0, 0.0], &i2).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            w2_gaussian(&[0.0, 0.0], &i2, &[0.0, 0.0], &four).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            w2_gaussian(&[0.0, 0.0], &i2, &[3.0, 4.0], &i2).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        // non-commuting pair against the 2x2 closed form
        let s1 = [2.0, 1.0, 1.0, 2.0];
        let s2 = [1.0, 0.0, 0.0, 3.0];
        let w = w2_gaussian(&[0.0, 0.0], &s1, &[0.0, 0.0], &s2).unwrap();
        // tr sqrt(M) for 2x2 SPD M: sqrt(tr M + 2 sqrt(det M))
        // M = s2^{1/2} s1 s2^{1/2}: tr = 2 + 6 = 8, det = det(s1) det(s2) = 9
        let expected = (4.0 + 4.0 - 2.0 * (8.0f64 + 6.0).sqrt()).sqrt();
        assert_abs_diff_eq!(w, expected, epsilon = 1e-12);
        let bad = [1.0, 0.0, 0.0, -1.0];
        assert!(matches!(
            w2_gaussian(&[0.0, 0.0], &bad, &[0.0, 0.0], &i2),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn sinkhorn_self_distance_vanishes() {
        let a = ParticleEnsemble::gaussian(200, 2, 1.0, 3).unwrap();
        let r = w2_sinkhorn(&a, &a, 0.05, 10_000).unwrap();
        assert!(r.value <= 1e-6, "{r:?}");
    }

    #[test]
    fn sinkhorn_close_to_exact_small_eps() {
        let a = ParticleEnsemble::gaussian(300, 2, 1.0, 3).unwrap();
        let b = ParticleEnsemble::gaussian(300, 2, 1.0, 4).unwrap().shifted(&[1.0, 0.0]);
        let e = w2_exact(&a, &b).unwrap();
        let s = w2_sinkhorn(&a, &b, 0.05, DEFAULT_SINKHORN_ITERS).unwrap();
        assert!((s.value - e).abs() <= 0.1 * e, "{} vs {}", s.value, e);
    }

    #[test]
    fn sinkhorn_reports_convergence() {
        let a = ParticleEnsemble::gaussian(100, 2, 1.0, 3).unwrap();
        let b = ParticleEnsemble::gaussian(100, 2, 1.0, 4).unwrap();
        let r = w2_sinkhorn(&a, &b, 1.0, 10_000).unwrap();
        assert!(r.converged && r.marginal_error < SINKHORN_TOL, "{r:?}");
        let r = w2_sinkhorn(&a, &b, 0.01, 1).unwrap();
        assert!(!r.converged);
        assert!(r.value.is_finite());
    }

    #[test]
    fn sinkhorn_large_eps_is_biased() {
        // for a pure scale change the large-eps limit of the divergence is the
        // squared mean difference, i.e. zero, so the bias is visible
        let a = ParticleEnsemble::gaussian(300, 2, 1.0, 3).unwrap();
        let b = ParticleEnsemble::gaussian(300, 2, 4.0, 4).unwrap();
        let e = w2_exact(&a, &b).unwrap();
        let s = w2_sinkhorn(&a, &b, 10.0, 10_000).unwrap();
        assert!((s.value - e).abs() > 0.1 * e, "{} vs {}", s.value, e);
    }
}
