//! The end-to-end predict-correct run over a `T2` grid.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::bounds::{self, Assumptions, Thm1Inputs, Thm1Terms, TimeCurve};
use crate::corrector::{self, CorrectorConfig, CorrectorMode};
use crate::distributions::{SubgaussianNorm, TargetDistribution};
use crate::ensemble::ParticleEnsemble;
use crate::error::Result;
use crate::predictor::{self, PredictorConfig};
use crate::rng::derive_seed;
use crate::score::{self, LossReport, Schedule, ScoreModel};
use crate::transport::{self, W2Method};

use super::config::SamplerConfig;
use super::results::*;

/// Builds the score model named by the config on top of the exact score of `target`.
pub fn build_score(cfg: &SamplerConfig, target: Arc<TargetDistribution>) -> Result<ScoreModel> {
    let mut model = ScoreModel::exact_shared(target);
    if let Some(mode) = cfg.score.perturb {
        let seed = derive_seed(cfg.sampling.seed, "perturbation", 0);
        model = model.perturb(mode, Schedule::constant(cfg.score.amplitude), seed)?;
    }
    if cfg.score.truncate {
        model = model.truncate(cfg.schedule.t1, cfg.schedule.delta)?;
    }
    Ok(model)
}

/// Seeds of one grid point, derived from the `T2` value so that removing
/// other grid points leaves this one unchanged.
pub fn entry_seeds(master: u64, t2: f64) -> EntrySeeds {
    let key = t2.to_bits();
    EntrySeeds {
        corrector: derive_seed(master, "corrector", key),
        reference_t1: derive_seed(master, "reference-t1", key),
        reference_p: derive_seed(master, "reference-p", key),
        floor_t1: derive_seed(master, "floor-t1", 0),
        floor_p: derive_seed(master, "floor-p", 0),
    }
}

fn floor(law: &TargetDistribution, n: usize, seed: u64, method: W2Method) -> Result<f64> {
    let a = law.sample(n, derive_seed(seed, "a", 0))?;
    let b = law.sample(n, derive_seed(seed, "b", 0))?;
    transport::w2(&a, &b, method)
}

fn debias(w2: f64, floor: f64) -> f64 {
    (w2 * w2 - floor * floor).max(0.0).sqrt()
}

struct Shared {
    target: Arc<TargetDistribution>,
    p_t1: TargetDistribution,
    score: ScoreModel,
    method: W2Method,
    floor_t1: Result<f64, String>,
    floor_p: Result<f64, String>,
}

fn run_entry(cfg: &SamplerConfig, sh: &Shared, t2: f64) -> Entry {
    let seeds = entry_seeds(cfg.sampling.seed, t2);
    let ccfg = corrector_config(cfg, t2, seeds.corrector);
    let mut entry = Entry {
        t2,
        corrector_steps: ccfg.steps().len(),
        w2_corrector: None,
        w2_corrector_floor: sh.floor_t1.clone().ok(),
        w2_corrector_debiased: None,
        w2_final: None,
        w2_final_floor: sh.floor_p.clone().ok(),
        seeds,
        error: None,
    };
    let n_ref = cfg.sampling.reference_size();
    let pcfg = predictor_config(cfg);
    let mut go = || -> Result<()> {
        let q0 = corrector::correct(&sh.score, &ccfg, &[])?.ensemble;
        let ref_t1 = sh.p_t1.sample(n_ref, seeds.reference_t1)?;
        let w2c = transport::w2(&q0, &ref_t1, sh.method)?;
        entry.w2_corrector = Some(w2c);
        entry.w2_corrector_debiased = entry.w2_corrector_floor.map(|f| debias(w2c, f));
        let out: ParticleEnsemble = predictor::predict(&sh.score, &q0, &pcfg)?;
        let ref_p = sh.target.sample(n_ref, seeds.reference_p)?;
        entry.w2_final = Some(transport::w2(&out, &ref_p, sh.method)?);
        Ok(())
    };
    if let Err(e) = go() {
        entry.error = Some(e.to_string());
    }
    for f in [&sh.floor_t1, &sh.floor_p] {
        if let (Err(e), None) = (f, &entry.error) {
            entry.error = Some(format!("floor: {e}"));
        }
    }
    entry
}

fn corrector_config(cfg: &SamplerConfig, t2: f64, seed: u64) -> CorrectorConfig {
    CorrectorConfig {
        t1: cfg.schedule.t1,
        t2,
        h: cfg.corrector.h,
        mode: cfg.corrector.mode,
        n: cfg.sampling.n,
        seed,
    }
}

fn predictor_config(cfg: &SamplerConfig) -> PredictorConfig {
    PredictorConfig::new(cfg.schedule.t1, cfg.schedule.tau, cfg.predictor.steps)
        .with_integrator(cfg.predictor.integrator)
}

struct Curves {
    losses: Vec<LossReport>,
    b: TimeCurve,
    lipschitz: LipschitzCurve,
}

fn loss_curves(cfg: &SamplerConfig, target: &TargetDistribution, model: &ScoreModel) -> Result<Curves> {
    let s = &cfg.schedule;
    let sm = &cfg.sampling;
    let k = sm.loss_times;
    let times: Vec<f64> = (0..k)
        .map(|i| s.tau + (s.t1 - s.tau) * i as f64 / (k - 1) as f64)
        .collect();
    let master = sm.seed;
    let losses = times
        .iter()
        .enumerate()
        .map(|(i, &t)| score::l2_loss(model, target, t, sm.loss_samples, derive_seed(master, "loss", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let b = TimeCurve::new(times.clone(), losses.iter().map(|l| l.b).collect())?;
    let seeds: Vec<u64> = (0..k).map(|i| derive_seed(master, "probe", i as u64)).collect();
    let values = times
        .iter()
        .zip(&seeds)
        .map(|(&t, &seed)| {
            let probe = target.ou_marginal(t)?.sample(sm.probe, seed)?;
            score::one_sided_lipschitz(model, t, &probe)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Curves {
        losses,
        b,
        lipschitz: LipschitzCurve {
            curve: TimeCurve::new(times, values)?,
            probe: sm.probe,
            seeds,
        },
    })
}

fn all_finite(t: &Thm1Terms) -> bool {
    [
        t.early_stop,
        t.score,
        t.score_cs,
        t.j_sm,
        t.i_tau_t1,
        t.corrector_delta,
        t.corrector_d3,
        t.corrector,
        t.res1_total,
        t.res2_total,
    ]
    .iter()
    .all(|v| v.is_finite())
}

struct BoundContext<'a> {
    cfg: &'a SamplerConfig,
    psi: f64,
    d: usize,
    eps_mgf: Option<f64>,
    curves: &'a Curves,
    lsi_kappa: Option<f64>,
    kl_initial: f64,
    c1: f64,
}

fn bound_row(ctx: &BoundContext, entry: &Entry) -> BoundRow {
    let s = &ctx.cfg.schedule;
    let mut row = BoundRow {
        t2: entry.t2,
        measured: entry.w2_final,
        floor: entry.w2_final_floor,
        assumptions: None,
        tau_window: false,
        bound: None,
        bound_infinite: false,
        terms: None,
        corrector_bound: None,
        step_bound: None,
        status: BoundStatus::AssumptionsUnmet,
        note: None,
    };
    let mut notes = Vec::new();
    match ctx.eps_mgf {
        None => notes.push("MGF loss saturated; bound not evaluated".to_string()),
        Some(eps) => {
            let inputs = Thm1Inputs {
                psi: ctx.psi,
                d: ctx.d,
                delta: s.delta,
                tau: s.tau,
                t1: s.t1,
                t2: entry.t2,
                eps_mgf: eps,
                lipschitz: ctx.curves.lipschitz.curve.clone(),
                b: ctx.curves.b.clone(),
            };
            match bounds::thm1_rhs(&inputs) {
                Ok(terms) => {
                    row.assumptions = Some(terms.assumptions);
                    row.tau_window = terms.tau_window;
                    if terms.assumptions == Assumptions::Unmet {
                        notes.push(format!(
                            "t1 = {} below the threshold {:.4}",
                            s.t1, terms.thresholds.psi_only
                        ));
                    }
                    if !terms.tau_window {
                        notes.push("tau outside (0, min(t1, d / (2 psi^2))]".to_string());
                    }
                    if all_finite(&terms) {
                        row.bound = Some(terms.res1_total);
                        row.terms = Some(terms);
                    } else {
                        row.bound_infinite = true;
                        notes.push("bound overflowed; holds trivially".to_string());
                    }
                }
                Err(e) => notes.push(format!("bound not evaluated: {e}")),
            }
            if let Some(kappa) = ctx.lsi_kappa {
                row.corrector_bound = bounds::kl_decay(kappa, entry.t2, ctx.kl_initial, eps)
                    .and_then(|kl| bounds::transport_from_kl(kappa, kl))
                    .ok()
                    .filter(|v| v.is_finite());
            }
            if ctx.cfg.corrector.mode == CorrectorMode::DiscreteAlgorithm {
                let k = (entry.t2 / ctx.cfg.corrector.h).round() as u64;
                row.step_bound = bounds::prop61_bound(s.delta, ctx.cfg.corrector.h, k, ctx.c1, eps)
                    .ok()
                    .filter(|v| v.is_finite());
            }
        }
    }
    if entry.w2_final.is_none() {
        notes.push("no measurement".to_string());
    }
    row.status = row.classify();
    if !notes.is_empty() {
        row.note = Some(notes.join("; "));
    }
    row
}

/// Runs every grid point. With `out` set, the results file is rewritten
/// atomically after each grid point.
pub fn run_to(cfg: &SamplerConfig, out: Option<&Path>) -> Result<RunResults> {
    cfg.validate()?;
    let started = Instant::now();
    let s = &cfg.schedule;
    let sm = &cfg.sampling;
    let master = sm.seed;
    let method = sm.w2_method();

    let target = Arc::new(cfg.build_target()?);
    let d = target.dim();
    let psi: SubgaussianNorm = target.subgaussian_norm()?;
    let model = build_score(cfg, target.clone())?;

    let curves = loss_curves(cfg, &target, &model)?;
    let beta = 1.0 / (1.0 - s.delta);
    let mgf = score::mgf_loss(&model, &target, s.t1, beta, sm.loss_samples, derive_seed(master, "mgf", 0))?;
    let mgf_configured = match cfg.score.beta {
        Some(b) => Some(score::mgf_loss(
            &model,
            &target,
            s.t1,
            b,
            sm.loss_samples,
            derive_seed(master, "mgf-configured", 0),
        )?),
        None => None,
    };
    let losses_s = started.elapsed().as_secs_f64();

    let p_t1 = target.ou_marginal(s.t1)?;
    let n_ref = sm.reference_size();
    let seeds0 = entry_seeds(master, 0.0);
    let shared = Shared {
        floor_t1: floor(&p_t1, n_ref, seeds0.floor_t1, method).map_err(|e| e.to_string()),
        floor_p: floor(&target, n_ref, seeds0.floor_p, method).map_err(|e| e.to_string()),
        target: target.clone(),
        p_t1,
        score: model.clone(),
        method,
    };

    let thresholds = bounds::t1_thresholds(psi.value, d, s.delta)?;
    let lsi_kappa = bounds::lsi_lower_bound(psi.value, s.t1).ok();
    let kl_initial = bounds::kl_gamma_pt(target.second_moment(), d, s.t1)?;
    let bs = &cfg.bounds;
    let c1 = bs.c1.unwrap_or_else(|| bounds::default_c1(d, bs.l1, bs.l2, s.delta));
    let h_max = bounds::prop61_step_window(s.delta, bs.l1, bs.l2)?;
    let ctx = BoundContext {
        cfg,
        psi: psi.value,
        d,
        eps_mgf: mgf.eps_mgf.map(|e| e.max(0.0)),
        curves: &curves,
        lsi_kappa,
        kl_initial,
        c1,
    };

    let mut results = RunResults {
        schema: SCHEMA_VERSION,
        config: cfg.clone(),
        target: TargetSummary {
            label: target.label(),
            dim: d,
            second_moment: target.second_moment(),
            psi,
        },
        score: model.provenance(),
        entries: Vec::new(),
        losses: curves.losses.clone(),
        mgf,
        mgf_configured,
        lipschitz: curves.lipschitz.clone(),
        bounds: BoundReport {
            psi: psi.value,
            d,
            second_moment: target.second_moment(),
            delta: s.delta,
            tau: s.tau,
            t1: s.t1,
            beta,
            eps_mgf: ctx.eps_mgf,
            thresholds,
            lsi_kappa,
            kl_initial,
            step_schedule: StepSchedule {
                c1,
                l1: bs.l1,
                l2: bs.l2,
                h: cfg.corrector.h,
                h_max,
                h_in_window: cfg.corrector.h < h_max,
            },
            rows: Vec::new(),
        },
        corrector_trace: Vec::new(),
        predictor: PredictorSummary {
            integrator: cfg.predictor.integrator,
            steps: cfg.predictor.steps,
            tau: s.tau,
            step_size: predictor_config(cfg).step_size(),
        },
        timing: Timing {
            total_s: 0.0,
            losses_s,
            entries_s: Vec::new(),
        },
        versions: Versions::current(),
    };

    for &t2 in &s.t2 {
        let t0 = Instant::now();
        let entry = run_entry(cfg, &shared, t2);
        results.bounds.rows.push(bound_row(&ctx, &entry));
        results.entries.push(entry);
        results.timing.entries_s.push(t0.elapsed().as_secs_f64());
        results.timing.total_s = started.elapsed().as_secs_f64();
        if let Some(path) = out {
            results.write(path)?;
        }
    }

    if !cfg.corrector.trace.is_empty() {
        let longest = s.t2.iter().copied().fold(0.0, f64::max);
        let last = cfg.corrector.trace.iter().copied().fold(longest, f64::max);
        let tcfg = corrector_config(cfg, last, derive_seed(master, "trace", 0));
        results.corrector_trace = corrector::kl_decay_trace(&target, &model, &tcfg, &cfg.corrector.trace, method)?;
    }
    results.timing.total_s = started.elapsed().as_secs_f64();
    if let Some(path) = out {
        results.write(path)?;
    }
    Ok(results)
}

pub fn run(cfg: &SamplerConfig) -> Result<RunResults> {
    run_to(cfg, None)
}
