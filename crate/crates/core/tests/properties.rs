use proptest::prelude::*;

use pcsgm::bounds::{thm1_rhs, Thm1Inputs, TimeCurve};
use pcsgm::ensemble::SeedRecord;
use pcsgm::exec::{self, ExecMode};
use pcsgm::score::{band_half_width, PerturbMode, Schedule};
use pcsgm::transport::w2_exact;
use pcsgm::{GaussianMixture, MixtureComponent, ParticleEnsemble, ScoreModel, TargetDistribution};

fn mixture() -> impl Strategy<Value = TargetDistribution> {
    prop::collection::vec((0.1f64..1.0, -3.0f64..3.0, -3.0f64..3.0, 0.05f64..2.0), 1..4).prop_map(|comps| {
        let total: f64 = comps.iter().map(|c| c.0).sum();
        GaussianMixture::new(
            comps
                .into_iter()
                .map(|(w, a, b, v)| MixtureComponent::isotropic(w / total, vec![a, b], v))
                .collect(),
        )
        .unwrap()
        .into()
    })
}

fn cloud(n: usize) -> impl Strategy<Value = ParticleEnsemble> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), n)
        .prop_map(|rows| ParticleEnsemble::from_rows(&rows, SeedRecord::new("proptest", 0)).unwrap())
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 2)
}

fn curves(b: f64) -> (TimeCurve, TimeCurve) {
    (
        TimeCurve::constant(0.0, 4.0, 65, -1.0).unwrap(),
        TimeCurve::constant(0.0, 4.0, 65, b).unwrap(),
    )
}

fn inputs(b: f64, eps: f64, t2: f64, tau: f64) -> Thm1Inputs {
    let (lipschitz, b) = curves(b);
    Thm1Inputs {
        psi: 1.0,
        d: 2,
        delta: 0.5,
        tau,
        t1: 4.0,
        t2,
        eps_mgf: eps,
        lipschitz,
        b,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ou_semigroup(p in mixture(), s in 0.0f64..2.0, t in 0.0f64..2.0, x in point()) {
        let twice = p.ou_marginal(s).unwrap().ou_marginal(t).unwrap();
        let once = p.ou_marginal(s + t).unwrap();
        let (a, b) = (twice.log_density(0.0, &x).unwrap(), once.log_density(0.0, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn score_is_gradient_of_log_density(p in mixture(), t in 0.05f64..2.0, x in point()) {
        let s = p.exact_score(t, &x).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (p.log_density(t, &up).unwrap() - p.log_density(t, &down).unwrap()) / (2.0 * h);
            prop_assert!((fd - s[i]).abs() <= 1e-4 * (1.0 + s[i].abs()), "coord {i}: {fd} vs {}", s[i]);
        }
    }

    #[test]
    fn truncated_score_stays_in_band(
        p in mixture(),
        amp in 0.0f64..3.0,
        delta in 0.05f64..0.95,
        x in point(),
        seed in any::<u64>(),
    ) {
        let model = ScoreModel::exact(p)
            .perturb(PerturbMode::AdditiveBounded, Schedule::constant(amp), seed)
            .unwrap()
            .truncate(1.5, delta)
            .unwrap();
        let s = model.evaluate(1.5, &x).unwrap();
        let ell = band_half_width(delta, &x);
        for i in 0..2 {
            prop_assert!((s[i] + x[i]).abs() <= ell * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn w2_metric_properties(a in cloud(12), b in cloud(12), c in cloud(12)) {
        let ab = w2_exact(&a, &b).unwrap();
        let ba = w2_exact(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(w2_exact(&a, &a).unwrap() <= 1e-12);
        let ac = w2_exact(&a, &c).unwrap();
        let cb = w2_exact(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn w2_translation(a in cloud(10), b in cloud(10), v in point()) {
        let base = w2_exact(&a, &b).unwrap();
        let moved = w2_exact(&a.shifted(&v), &b.shifted(&v)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((w2_exact(&a, &a.shifted(&v)).unwrap() - norm).abs() <= 1e-9);
    }

    #[test]
    fn res1_monotone(
        b in 0.0f64..0.5,
        db in 0.0f64..0.5,
        eps in 0.0f64..0.5,
        de in 0.0f64..0.5,
        t2 in 0.0f64..5.0,
        dt in 0.0f64..5.0,
        tau in 0.01f64..0.2,
        dtau in 0.0f64..0.2,
    ) {
        let r = |b, e, t2, tau| thm1_rhs(&inputs(b, e, t2, tau)).unwrap().res1_total;
        let base = r(b, eps, t2, tau);
        prop_assert!(r(b, eps, t2 + dt, tau) <= base + 1e-12);
        prop_assert!(r(b + db, eps, t2, tau) >= base - 1e-12);
        prop_assert!(r(b, eps + de, t2, tau) >= base - 1e-12);
        prop_assert!(r(b, eps, t2, tau + dtau) >= base - 1e-12);
    }

    #[test]
    fn sampling_is_partition_invariant(p in mixture(), n in 1usize..1200, seed in any::<u64>()) {
        exec::set_mode(ExecMode::Sequential);
        let seq = p.sample(n, seed).unwrap();
        exec::set_mode(ExecMode::Parallel);
        let par = p.sample(n, seed).unwrap();
        prop_assert_eq!(seq, par);
    }
}
