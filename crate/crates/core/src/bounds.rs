//! Closed-form evaluators for the convergence bounds, and an empirical
//! harness for the subgaussian lemmas they rest on.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::distributions::TargetDistribution;
use crate::ensemble::norm_sq;
use crate::error::{Error, Result};

/// Minimum number of grid points inside an integration window.
pub const MIN_GRID_POINTS: usize = 8;

/// Lower bounds on `T1` under which the various statements hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T1Thresholds {
    /// `1/2 ln(2 + 172 psi^2 / delta + d / (2 delta))`.
    pub theorem1: f64,
    /// `ln(16 d (psi + 1) / delta)`, for the truncated estimator.
    pub theorem2: f64,
    /// `1/2 ln(2 + 172 psi^2 / delta)`; enough for the `d/3` variant.
    pub psi_only: f64,
    /// `ln(psi / sqrt(d))`; above it `psi(X_T1) <= 3 sqrt(d)`.
    pub subgaussian: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

pub fn t1_thresholds(psi: f64, d: usize, delta: f64) -> Result<T1Thresholds> {
    check_delta(delta)?;
    if !(psi > 0.0) || d == 0 {
        return Err(Error::invalid("thresholds need psi > 0 and d >= 1"));
    }
    let d = d as f64;
    let p2 = psi * psi;
    Ok(T1Thresholds {
        theorem1: 0.5 * (2.0 + 172.0 * p2 / delta + d / (2.0 * delta)).ln(),
        theorem2: (16.0 * d * (psi + 1.0) / delta).ln(),
        psi_only: 0.5 * (2.0 + 172.0 * p2 / delta).ln(),
        subgaussian: (psi / d.sqrt()).ln(),
    })
}

/// A scalar function of time sampled on an increasing grid; linear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::invalid("time curve needs equally many (>= 1) times and values"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time curve grid must be strictly increasing"));
        }
        if values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::invalid("time curve must be finite"));
        }
        Ok(Self { times, values })
    }

    /// Samples `f` on `n` uniform points of `[a, b]`.
    pub fn sample<F: FnMut(f64) -> f64>(a: f64, b: f64, n: usize, mut f: F) -> Result<Self> {
        if n < 2 || !(b > a) {
            return Err(Error::invalid("sampling needs n >= 2 and b > a"));
        }
        let times: Vec<f64> = (0..n)
            .map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
            .collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn constant(a: f64, b: f64, n: usize, value: f64) -> Result<Self> {
        Self::sample(a, b, n, |_| value)
    }

    fn covers(&self, a: f64, b: f64) -> bool {
        let tol = 1e-12 * self.times.last().unwrap().abs().max(1.0);
        self.times[0] <= a + tol && *self.times.last().unwrap() >= b - tol
    }

    fn points_in(&self, a: f64, b: f64) -> usize {
        let tol = 1e-12 * b.abs().max(1.0);
        self.times.iter().filter(|&&t| t >= a - tol && t <= b + tol).count()
    }

    pub fn interp(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.values[0];
        }
        if k >= self.times.len() {
            return *self.values.last().unwrap();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        self.values[k - 1] * (1.0 - w) + self.values[k] * w
    }

    /// Cumulative trapezoid of the curve from `a`, at `a` and at every grid
    /// time after it.
    fn cumulative_from(&self, a: f64) -> (Vec<f64>, Vec<f64>) {
        let mut ts = vec![a];
        let mut vs = vec![self.interp(a)];
        for (&t, &v) in self.times.iter().zip(&self.values) {
            if t > a {
                ts.push(t);
                vs.push(v);
            }
        }
        let mut acc = vec![0.0; ts.len()];
        for k in 1..ts.len() {
            acc[k] = acc[k - 1] + 0.5 * (vs[k] + vs[k - 1]) * (ts[k] - ts[k - 1]);
        }
        (ts, acc)
    }

    /// Trapezoid of the curve over `[a, b]`, with the endpoints interpolated.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let (ts, acc) = self.cumulative_from(a);
        let k = ts.partition_point(|&s| s <= b);
        if k >= ts.len() {
            return *acc.last().unwrap();
        }
        let (t0, c0) = (ts[k - 1], acc[k - 1]);
        let v0 = self.interp(t0);
        let vb = self.interp(b);
        c0 + 0.5 * (v0 + vb) * (b - t0)
    }
}

fn check_window(curve: &TimeCurve, a: f64, b: f64) -> Result<()> {
    if !curve.covers(a, b) {
        return Err(Error::invalid(format!(
            "curve on [{}, {}] does not cover [{a}, {b}]",
            curve.times[0],
            curve.times.last().unwrap()
        )));
    }
    let points = curve.points_in(a, b);
    if points < MIN_GRID_POINTS {
        return Err(Error::GridTooCoarse {
            points,
            from: a,
            to: b,
            required: MIN_GRID_POINTS,
        });
    }
    Ok(())
}

/// `I_tau(t) = exp(t - tau + int_tau^t L(r) dr)` by trapezoidal quadrature.
pub fn i_tau(lipschitz: &TimeCurve, tau: f64, t: f64) -> Result<f64> {
    if !(t >= tau) {
        return Err(Error::invalid(format!("need tau <= t, got tau = {tau}, t = {t}")));
    }
    if t == tau {
        return Ok(1.0);
    }
    check_window(lipschitz, tau, t)?;
    Ok((t - tau + lipschitz.integrate(tau, t)).exp())
}

/// `I_tau` at each grid time of `nodes` (all of which must lie in the
/// window covered by `lipschitz`).
fn i_tau_at(lipschitz: &TimeCurve, tau: f64, nodes: &[f64]) -> Vec<f64> {
    nodes
        .iter()
        .map(|&t| (t - tau + lipschitz.integrate(tau, t)).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumptions {
    /// `T1` above the Theorem 1 threshold.
    Full,
    /// Only the `psi`-only threshold holds; the `d/3` corrector term applies.
    PsiOnly,
    Unmet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Inputs {
    pub psi: f64,
    pub d: usize,
    pub delta: f64,
    pub tau: f64,
    pub t1: f64,
    pub t2: f64,
    /// MGF loss at `T1` with weight `1 / (1 - delta)`; `+inf` if saturated.
    pub eps_mgf: f64,
    /// One-sided Lipschitz estimates, covering `[tau, T1]`.
    pub lipschitz: TimeCurve,
    /// `b(t)` samples covering `[tau, T1]`; also the quadrature nodes.
    pub b: TimeCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Terms {
    pub thresholds: T1Thresholds,
    pub assumptions: Assumptions,
    /// `0 < tau <= min(T1, d / (2 psi^2))`.
    pub tau_window: bool,
    /// `sqrt(3 tau d)`.
    pub early_stop: f64,
    /// `int sqrt(b) I_tau dt`.
    pub score: f64,
    /// `sqrt(J_SM / 2 * int I_tau^2 dt)`.
    pub score_cs: f64,
    pub j_sm: f64,
    pub i_tau_t1: f64,
    /// Corrector term with `delta e^{-(1 - delta) T2 / 2}`.
    pub corrector_delta: f64,
    /// Corrector term with `d/3 e^{-(1 - delta) T2 / 2}`.
    pub corrector_d3: f64,
    /// The corrector term used in the totals.
    pub corrector: f64,
    pub res1_total: f64,
    pub res2_total: f64,
}

fn corrector_term(i_t1: f64, delta: f64, lead: f64, t2: f64, eps_mgf: f64) -> f64 {
    let inner = 2.0 / (1.0 - delta) * (lead * (-(1.0 - delta) * t2 / 2.0).exp() + 2.0 * eps_mgf);
    i_t1 * inner.max(0.0).sqrt()
}

/// Both forms of the Theorem 1 bound on `W2(p, p_theta)`.
pub fn thm1_rhs(inp: &Thm1Inputs) -> Result<Thm1Terms> {
    check_delta(inp.delta)?;
    if !(inp.tau > 0.0 && inp.tau < inp.t1) {
        return Err(Error::invalid("need 0 < tau < T1"));
    }
    if !(inp.t2 >= 0.0) || inp.eps_mgf < 0.0 {
        return Err(Error::invalid("need T2 >= 0 and eps_mgf >= 0"));
    }
    if inp.b.values.iter().any(|&b| b < 0.0) {
        return Err(Error::invalid("b must be nonnegative"));
    }
    check_window(&inp.lipschitz, inp.tau, inp.t1)?;
    check_window(&inp.b, inp.tau, inp.t1)?;
    let thresholds = t1_thresholds(inp.psi, inp.d, inp.delta)?;
    let assumptions = if inp.t1 >= thresholds.theorem1 {
        Assumptions::Full
    } else if inp.t1 >= thresholds.psi_only {
        Assumptions::PsiOnly
    } else {
        Assumptions::Unmet
    };
    let d = inp.d as f64;
    let tau_window = inp.tau <= inp.t1.min(d / (2.0 * inp.psi * inp.psi));

    // quadrature nodes: tau, the b grid inside (tau, T1), T1
    let mut nodes = vec![inp.tau];
    nodes.extend(inp.b.times.iter().copied().filter(|&t| t > inp.tau && t < inp.t1));
    nodes.push(inp.t1);
    let i_vals = i_tau_at(&inp.lipschitz, inp.tau, &nodes);
    let b_vals: Vec<f64> = nodes.iter().map(|&t| inp.b.interp(t).max(0.0)).collect();
    let trap = |f: &dyn Fn(usize) -> f64| -> f64 {
        (1..nodes.len())
            .map(|k| 0.5 * (f(k) + f(k - 1)) * (nodes[k] - nodes[k - 1]))
            .sum()
    };
    let score = trap(&|k| b_vals[k].sqrt() * i_vals[k]);
    let int_i2 = trap(&|k| i_vals[k] * i_vals[k]);
    let j_sm = 2.0 * trap(&|k| b_vals[k]);
    let score_cs = (j_sm / 2.0 * int_i2).sqrt();
    let i_tau_t1 = *i_vals.last().unwrap();

    let early_stop = (3.0 * inp.tau * d).sqrt();
    let corrector_delta = corrector_term(i_tau_t1, inp.delta, inp.delta, inp.t2, inp.eps_mgf);
    let corrector_d3 = corrector_term(i_tau_t1, inp.delta, d / 3.0, inp.t2, inp.eps_mgf);
    let corrector = match assumptions {
        Assumptions::Full => corrector_delta.min(corrector_d3),
        Assumptions::PsiOnly => corrector_d3,
        Assumptions::Unmet => corrector_delta,
    };
    Ok(Thm1Terms {
        thresholds,
        assumptions,
        tau_window,
        early_stop,
        score,
        score_cs,
        j_sm,
        i_tau_t1,
        corrector_delta,
        corrector_d3,
        corrector,
        res1_total: early_stop + score + corrector,
        res2_total: early_stop + score_cs + corrector,
    })
}

/// `t0 = 1/2 ln(1 + 4 psi^2)`.
pub fn lsi_t0(psi: f64) -> f64 {
    0.5 * (1.0 + 4.0 * psi * psi).ln()
}

/// `C_LS(p_t) >= 1 / (1 + 172 psi^2 e^{-2t})`, valid for `t > t0`.
pub fn lsi_lower_bound(psi: f64, t: f64) -> Result<f64> {
    let t0 = lsi_t0(psi);
    if !(t > t0) {
        return Err(Error::BelowT0 { t, t0 });
    }
    Ok(1.0 / (1.0 + 172.0 * psi * psi * (-2.0 * t).exp()))
}

/// Upper bound on `KL(gamma || p_t)` from the second moment `M`.
pub fn kl_gamma_pt(m: f64, d: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) || m < 0.0 || d == 0 {
        return Err(Error::invalid("kl_gamma_pt needs t > 0, M >= 0, d >= 1"));
    }
    let d = d as f64;
    let s = -(-2.0 * t).exp_m1();
    let e = (-2.0 * t).exp();
    // s ln s - s + 1 >= 0, computed without cancellation for s near 1
    let tail = s * s.ln() + e;
    Ok(d / (2.0 * s) * (m / d * e + tail))
}

/// `W2 <= sqrt(2 KL / kappa)`.
pub fn transport_from_kl(kappa: f64, kl: f64) -> Result<f64> {
    if !(kappa > 0.0) || kl < 0.0 {
        return Err(Error::invalid("need kappa > 0 and kl >= 0"));
    }
    Ok((2.0 * kl / kappa).sqrt())
}

/// `KL(nu_t || mu) <= e^{-kappa t / 2} KL0 + 2 mgf`.
pub fn kl_decay(kappa: f64, t: f64, kl0: f64, mgf: f64) -> Result<f64> {
    if !(kappa > 0.0) || t < 0.0 {
        return Err(Error::invalid("need kappa > 0 and t >= 0"));
    }
    Ok((-kappa * t / 2.0).exp() * kl0 + 2.0 * mgf)
}

/// Loss level `eps^{2 + 36 beta delta^2} / (550 beta)` below which `b(T1)`
/// must lie for the truncated estimator, with `0 < beta <= 1 / (36 delta^2)`.
pub fn thm2_threshold(beta: f64, delta: f64, eps: f64) -> Result<f64> {
    check_delta(delta)?;
    let max = 1.0 / (36.0 * delta * delta);
    if !(beta > 0.0 && beta <= max) {
        return Err(Error::BetaOutOfRange { beta, max });
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    Ok(eps.powf(2.0 + 36.0 * beta * delta * delta) / (550.0 * beta))
}

/// `sqrt(2/(1-delta) (e^{-(1-delta) h k / 4} delta + C1 h + 8/3 mgf))`.
pub fn prop61_bound(delta: f64, h: f64, k: u64, c1: f64, mgf: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(h > 0.0) || c1 < 0.0 || mgf < 0.0 {
        return Err(Error::invalid("need h > 0, C1 >= 0, mgf >= 0"));
    }
    let decay = (-0.25 * (1.0 - delta) * h * k as f64).exp() * delta;
    Ok((2.0 / (1.0 - delta) * (decay + c1 * h + 8.0 / 3.0 * mgf)).sqrt())
}

/// Upper end of the admissible step sizes, `min((1-delta)/(12 L1 L2), 1/(2(1-delta)))`.
pub fn prop61_step_window(delta: f64, l1: f64, l2: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(l1 > 0.0 && l2 > 0.0) {
        return Err(Error::invalid("Lipschitz constants must be positive"));
    }
    Ok(((1.0 - delta) / (12.0 * l1 * l2)).min(1.0 / (2.0 * (1.0 - delta))))
}

/// Default schedule constant `d L2^2 L1 / (1 - delta)`.
pub fn default_c1(d: usize, l1: f64, l2: f64, delta: f64) -> f64 {
    d as f64 * l2 * l2 * l1 / (1.0 - delta)
}

/// Step size `h = eps^2 (1 - delta) / (4 C1)` of the step-count schedule.
pub fn schedule_step(eps: f64, delta: f64, c1: f64) -> f64 {
    eps * eps * (1.0 - delta) / (4.0 * c1)
}

/// Smallest `k` with `prop61_bound(delta, h, k, C1, 0) <= eps` at the
/// schedule step size.
pub fn step_count(eps: f64, delta: f64, c1: f64) -> Result<u64> {
    check_delta(delta)?;
    if !(eps > 0.0 && c1 > 0.0) {
        return Err(Error::invalid("need eps > 0 and C1 > 0"));
    }
    let h = schedule_step(eps, delta, c1);
    let log = (4.0 * delta / ((1.0 - delta) * eps * eps)).ln();
    if log <= 0.0 {
        return Ok(0);
    }
    Ok((4.0 / ((1.0 - delta) * h) * log).ceil() as u64)
}

/// One evaluated inequality: `lhs - slack <= rhs` passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub param: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub passed: bool,
}

impl HarnessRow {
    fn new(param: String, lhs: f64, rhs: f64, slack: f64) -> Self {
        let passed = lhs - slack <= rhs * (1.0 + 1e-12) + 1e-300;
        Self {
            param,
            lhs,
            rhs,
            slack,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub name: String,
    pub rows: Vec<HarnessRow>,
    pub passed: bool,
}

impl LemmaCheck {
    fn new(name: &str, rows: Vec<HarnessRow>) -> Self {
        let passed = rows.iter().all(|r| r.passed);
        Self {
            name: name.to_string(),
            rows,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub psi: f64,
    pub n: usize,
    pub seed: u64,
    pub checks: Vec<LemmaCheck>,
    pub passed: bool,
}

/// Sample mean and 3 standard errors.
fn mean_slack(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, 3.0 * (var / n).sqrt())
}

/// Checks the subgaussian lemmas on `n` draws of `dist` (Monte Carlo
/// left-hand sides get three standard errors of slack).
pub fn appendix_property_harness(dist: &TargetDistribution, n: usize, seed: u64) -> Result<HarnessReport> {
    if n < 100 {
        return Err(Error::invalid("harness needs at least 100 draws"));
    }
    let psi = dist.subgaussian_norm()?.value;
    let p2 = psi * psi;
    let d = dist.dim();
    let draws = dist.sample(n, seed)?;
    let r2: Vec<f64> = draws.iter().map(norm_sq).collect();
    let r: Vec<f64> = r2.iter().map(|v| v.sqrt()).collect();
    let mut checks = Vec::new();

    let radii = [0.5 * psi, psi, 1.5 * psi, 2.0 * psi, 1.0, 2.0, 3.0];
    let rows = radii
        .iter()
        .map(|&s| {
            let (p, slack) = mean_slack(r.iter().map(|&x| if x >= s { 1.0 } else { 0.0 }));
            HarnessRow::new(format!("s={s:.4}"), p, 2.0 * (-s * s / p2).exp(), slack)
        })
        .collect();
    checks.push(LemmaCheck::new("tail", rows));

    let (m2, slack) = mean_slack(r2.iter().copied());
    checks.push(LemmaCheck::new(
        "second-moment",
        vec![
            HarnessRow::new("sample".into(), m2, 2.0 * p2, slack),
            HarnessRow::new("exact".into(), dist.second_moment(), 2.0 * p2, 0.0),
        ],
    ));

    let mut rows = Vec::new();
    for c in [0.5, 1.0, 2.0] {
        for t in [0.25, 1.0, 2.0, 4.0] {
            let lhs = 0.5 * (std::f64::consts::PI / c).sqrt() * erfc(c.sqrt() * t);
            rows.push(HarnessRow::new(
                format!("c={c},t={t}"),
                lhs,
                (-c * t * t).exp() / (2.0 * c * t),
                0.0,
            ));
        }
    }
    checks.push(LemmaCheck::new("gaussian-tail", rows));

    let mut rows = Vec::new();
    for cf in [0.1, 0.25, 0.4] {
        let c = cf / p2;
        for lf in [0.5, 1.0, 2.0] {
            let l = lf * psi;
            let (lhs, slack) = mean_slack(
                r2.iter()
                    .map(|&x2| if x2 >= l * l { (c * x2).exp() } else { 0.0 }),
            );
            let rhs = 2.0 * (1.0 + cf / (1.0 - cf)) * (-l * l * (1.0 / p2 - c)).exp();
            rows.push(HarnessRow::new(format!("c={cf}/psi^2,L={lf}psi"), lhs, rhs, slack));
        }
    }
    checks.push(LemmaCheck::new("truncated-mgf", rows));

    let rows = [0.5, 1.0, 2.0]
        .iter()
        .map(|&lf| {
            let l = lf * psi;
            let (lhs, slack) = mean_slack(r.iter().map(|&x| if x >= l { x } else { 0.0 }));
            HarnessRow::new(
                format!("L={lf}psi"),
                lhs,
                (2.0 * l + p2 / l) * (-l * l / p2).exp(),
                slack,
            )
        })
        .collect();
    checks.push(LemmaCheck::new("first-moment-outside-ball", rows));

    // holds for every measure, so it is checked exactly on the empirical one
    let mut rows = Vec::new();
    let mut sorted = r.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let nf = n as f64;
    let mgf_row = |name: String, f: &dyn Fn(usize) -> f64, m: f64| {
        let ef = (0..n).map(f).sum::<f64>() / nf;
        let eef = (0..n).map(|i| f(i).exp()).sum::<f64>() / nf;
        HarnessRow::new(name, eef, 1.0 + (8.0 * m.exp() * ef).sqrt(), 0.0)
    };
    rows.push(mgf_row("F=0".into(), &|_| 0.0, 1.0));
    for m in [0.5, 1.0, 2.0, 4.0] {
        let k = ((nf * 2.0 * (-m as f64).exp() / m).floor() as usize).min(n);
        let cut = if k == 0 { f64::INFINITY } else { sorted[k - 1] };
        let mut taken = 0usize;
        let flags: Vec<bool> = r
            .iter()
            .map(|&x| {
                let hit = x >= cut && taken < k;
                if hit {
                    taken += 1;
                }
                hit
            })
            .collect();
        rows.push(mgf_row(format!("F=M*1{{|x|>=L}},M={m}"), &|i| if flags[i] { m } else { 0.0 }, m));
        let lambda = 2.0 * (-m as f64).exp() / m2.max(f64::MIN_POSITIVE);
        rows.push(mgf_row(format!("F=min(lambda|x|^2,M),M={m}"), &|i| (lambda * r2[i]).min(m), m));
    }
    checks.push(LemmaCheck::new("mgf-conversion", rows));

    let base = (psi / (d as f64).sqrt()).ln().max(0.05);
    let mut rows = Vec::new();
    for extra in [0.0, 0.5, 2.0] {
        let t1 = base + extra;
        let psi_t = dist.ou_marginal(t1)?.subgaussian_norm()?.value;
        rows.push(HarnessRow::new(format!("T1={t1:.4}"), psi_t, 3.0 * (d as f64).sqrt(), 0.0));
    }
    checks.push(LemmaCheck::new("psi-at-t1", rows));

    let passed = checks.iter().all(|c| c.passed);
    Ok(HarnessReport {
        psi,
        n,
        seed,
        checks,
        passed,
    })
}
