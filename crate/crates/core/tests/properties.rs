use proptest::prelude::*;
use rand::Rng;

use rasp_core::baselines::{make_agent, CmaState, GpConfig};
use rasp_core::composer::{ErrorComposer, MetricSpec, Metrics, Polarity};
use rasp_core::environments::{make_domain, Environment, SCENARIOS};
use rasp_core::param_space::{logistic, ParamBounds};
use rasp_core::seeding;
use rasp_core::surrogate::{MoeConfig, MoeSurrogate};
use rasp_core::tuner::TunerConfig;

fn scenario() -> impl Strategy<Value = &'static str> {
    (0..SCENARIOS.len()).prop_map(|i| SCENARIOS[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_error_in_unit_interval(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40),
        weights in prop::collection::vec(0.01f64..10.0, 3),
        higher in prop::collection::vec(any::<bool>(), 3),
    ) {
        let specs = (0..3).map(|i| {
            let pol = if higher[i] { Polarity::HigherIsBetter } else { Polarity::LowerIsBetter };
            MetricSpec::new(format!("k{i}"), pol, weights[i]).unwrap()
        });
        let mut c = ErrorComposer::with_specs(0.97, specs).unwrap();
        for (i, v) in values.iter().enumerate() {
            let m = Metrics::from([(format!("k{}", i % 3), *v)]);
            let e = c.compose(&m).unwrap().error;
            prop_assert!((0.0..=1.0).contains(&e), "e = {e}");
        }
    }

    #[test]
    fn logistic_quarter_lipschitz(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        prop_assert!((logistic(a) - logistic(b)).abs() <= (a - b).abs() / 4.0 + 1e-15);
    }

    #[test]
    fn gate_and_topk_weights_are_simplices(seed in 0u64..5000, k in 1usize..=6) {
        let mut rng = seeding::stream(seed, &[1]);
        let moe = MoeSurrogate::new(7, MoeConfig::default(), &mut rng).unwrap();
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = moe.forward_topk(&x, k).unwrap();
        let gs: f64 = p.gate_weights.iter().sum();
        let act: f64 = p.active_weights.iter().sum();
        prop_assert!((gs - 1.0).abs() < 1e-12);
        prop_assert!((act - 1.0).abs() < 1e-12);
        prop_assert!(p.active_weights.iter().all(|w| *w >= 0.0));
        prop_assert!(p.variance >= 0.0);
        prop_assert_eq!(p.active.len(), k);
    }

    #[test]
    fn regret_nonnegative_and_deterministic(name in scenario(), seed in 0u64..50, t in 0usize..100, u in prop::collection::vec(0.0f64..=1.0, 16)) {
        let domain = make_domain(name, seed).unwrap();
        let b = domain.bounds();
        let theta: Vec<f64> = (0..b.dim()).map(|i| b.lower()[i] + u[i % u.len()] * (b.upper()[i] - b.lower()[i])).collect();
        let latent = domain.latent(t, 100);
        prop_assert!(domain.true_loss(&theta, &latent) >= domain.oracle_min(&latent) - 1e-12);
        let again = make_domain(name, seed).unwrap();
        prop_assert_eq!(&again.latent(t, 100), &latent);
        prop_assert_eq!(again.metric_fn(&theta, &latent).unwrap(), domain.metric_fn(&theta, &latent).unwrap());
        prop_assert_eq!(domain.context_fn(&latent).len(), domain.context_dim());
    }

    #[test]
    fn cma_covariance_stays_spd(seed in 0u64..1000, d in 1usize..8) {
        let mut rng = seeding::stream(seed, &[2]);
        let bounds = ParamBounds::uniform(d, 0.0, 1.0).unwrap();
        let mut cma = CmaState::for_bounds(&bounds).unwrap();
        for _ in 0..30 {
            let pop = cma.ask(&mut rng);
            let errs: Vec<f64> = pop.members.iter().map(|m| m.iter().map(|x| (x - 0.3).powi(2)).sum()).collect();
            cma.tell(&pop, &errs).unwrap();
            prop_assert!(cma.min_eigenvalue() > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Every agent deploys inside the box at every step, with cumulative
    /// regret non-decreasing.
    #[test]
    fn agents_deploy_inside_the_box(name in scenario(), alg in prop::sample::select(vec!["rasp", "nomem", "cma", "rs"]), seed in 0u64..20) {
        let domain = make_domain(name, seed).unwrap();
        let bounds = domain.bounds().clone();
        let mut agent = make_agent(alg, domain.as_ref(), &TunerConfig::default(), &GpConfig::default(), seed).unwrap();
        let mut env = Environment::new(domain, 25);
        let mut cumulative = 0.0;
        for _ in 0..25 {
            let theta = agent.propose(&env.context()).unwrap();
            prop_assert!(bounds.contains(&theta));
            let out = env.step(&theta).unwrap();
            prop_assert!(out.regret >= 0.0);
            let next = cumulative + out.regret;
            prop_assert!(next >= cumulative);
            cumulative = next;
            let rec = agent.observe(&out.metrics).unwrap();
            prop_assert!((0.0..=1.0).contains(&rec.error));
        }
    }
}

#[test]
fn gp_deploys_inside_the_box() {
    for name in ["1", "4", "A1"] {
        let domain = make_domain(name, 3).unwrap();
        let bounds = domain.bounds().clone();
        let mut agent = make_agent("gp", domain.as_ref(), &TunerConfig::default(), &GpConfig::default(), 3).unwrap();
        let mut env = Environment::new(domain, 15);
        for _ in 0..15 {
            let theta = agent.propose(&env.context()).unwrap();
            assert!(bounds.contains(&theta));
            let out = env.step(&theta).unwrap();
            agent.observe(&out.metrics).unwrap();
        }
    }
}
