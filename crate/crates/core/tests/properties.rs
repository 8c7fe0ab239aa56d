use proptest::prelude::*;

use lda_particles::dist::{FrequencyModel, SeverityModel};
use lda_particles::harness::{format_sig6, run_experiment, ExperimentConfig, Method};
use lda_particles::mc::CompoundModel;
use lda_particles::panjer::{discretize_severity, gpd_panjer_discrete, panjer_discrete, Discretization};
use lda_particles::particle::{build_volterra_kernel, path_weight, simulate_absorbed_path, PathSamplerConfig};
use lda_particles::rng::substream;
use lda_particles::smc::{
    boltzmann_gibbs, restricted_mh_kernel, smc_rare_event, DiscreteToy, LevelSequence, SmcConfig,
};

fn severity() -> impl Strategy<Value = SeverityModel> {
    prop_oneof![
        (-1.0..3.0f64, 0.2..2.0f64).prop_map(|(m, s)| SeverityModel::lognormal(m, s).unwrap()),
        (0.5..4.0f64, 0.5..5.0f64).prop_map(|(a, c)| SeverityModel::pareto(a, c).unwrap()),
    ]
}

fn frequency() -> impl Strategy<Value = FrequencyModel> {
    prop_oneof![
        (0.1..6.0f64).prop_map(|l| FrequencyModel::poisson(l).unwrap()),
        (1u32..20, 0.05..0.9f64).prop_map(|(n, q)| FrequencyModel::binomial(n, q).unwrap()),
        (0.5..5.0f64, 0.1..3.0f64).prop_map(|(r, b)| FrequencyModel::negative_binomial(r, b).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn severity_quantile_inverts_cdf(sev in severity(), p in 0.001..0.999f64) {
        let x = sev.quantile(p).unwrap();
        prop_assert!((sev.cdf(x) - p).abs() < 1e-8);
        prop_assert!((sev.cdf(x) + sev.survival(x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recursion_reproduces_frequency_pmf(freq in frequency()) {
        let seq = freq.panjer_params().unwrap().pmf_sequence(40);
        for (n, p) in seq.iter().enumerate() {
            let direct = freq.pmf(n as u64).unwrap();
            prop_assert!((p - direct).abs() < 1e-10 * (1.0 + direct), "n={} {} vs {}", n, p, direct);
        }
    }

    #[test]
    fn gpd_with_zero_theta_is_poisson(lambda in 0.2..5.0f64, sev in severity()) {
        let d = discretize_severity(&sev, 0.5, 200, Discretization::LocalMomentMatching).unwrap();
        let gpd = gpd_panjer_discrete(lambda, 0.0, &d, 200).unwrap();
        let poi = panjer_discrete(&FrequencyModel::poisson(lambda).unwrap().panjer_params().unwrap(), &d, 200).unwrap();
        for (a, b) in gpd.masses.iter().zip(&poi.masses) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn discretization_keeps_mass_and_mean(sev in severity(), step in 0.05..2.0f64, cells in 10usize..400) {
        let end = cells as f64 * step;
        let lmm = discretize_severity(&sev, step, cells, Discretization::LocalMomentMatching).unwrap();
        prop_assert!(lmm.masses.iter().all(|&m| m >= 0.0));
        prop_assert!((lmm.total_mass() - sev.cdf(end)).abs() < 1e-9);
        let moment = sev.partial_first_moment(0.0, end);
        prop_assert!((lmm.mean() - moment).abs() < 1e-6 * (1.0 + moment), "{} vs {}", lmm.mean(), moment);
        let rnd = discretize_severity(&sev, step, cells, Discretization::Rounding).unwrap();
        prop_assert!((rnd.total_mass() - sev.cdf((cells as f64 + 0.5) * step)).abs() < 1e-9);
    }

    #[test]
    fn compound_partial_sums_form_a_cdf(freq in frequency(), sev in severity()) {
        let d = discretize_severity(&sev, 0.5, 300, Discretization::LocalMomentMatching).unwrap();
        let pmf = panjer_discrete(&freq.panjer_params().unwrap(), &d, 300).unwrap();
        prop_assert!(pmf.masses.iter().all(|&g| g >= -1e-15));
        let cum = pmf.cumulative();
        prop_assert!(cum.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        prop_assert!(*cum.last().unwrap() <= 1.0 + 1e-9);
        prop_assert!((pmf.masses[0] - freq.pgf(d.masses[0])).abs() < 1e-12);
    }

    #[test]
    fn absorbed_paths_decrease_with_nonnegative_weight(
        lambda in 0.5..4.0f64,
        sev in severity(),
        x0 in 0.5..50.0f64,
        seed in any::<u64>(),
        vr in any::<bool>(),
    ) {
        let model = CompoundModel::new(FrequencyModel::poisson(lambda).unwrap(), sev).unwrap();
        let kernel = build_volterra_kernel(&model).unwrap();
        let mut cfg = PathSamplerConfig::pointwise(&model, x0, 1);
        cfg.variance_reduction = vr;
        let mut src = substream(seed, &[0]);
        for _ in 0..20 {
            let path = simulate_absorbed_path(&cfg, &kernel, &mut src).unwrap();
            prop_assert_eq!(path.states[0], x0);
            prop_assert!(path.states.windows(2).all(|w| w[1] < w[0] && w[1] >= 0.0));
            let w = path_weight(&path, &kernel, &cfg).unwrap();
            prop_assert!(w >= 0.0 && w.is_finite());
        }
    }

    #[test]
    fn boltzmann_gibbs_is_a_probability(
        pairs in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..50),
    ) {
        let (w, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        match boltzmann_gibbs(&w, &g) {
            Ok(p) => {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for ((pi, wi), gi) in p.iter().zip(&w).zip(&g) {
                    prop_assert!(*pi >= 0.0);
                    if wi * gi == 0.0 {
                        prop_assert_eq!(*pi, 0.0);
                    }
                }
            }
            Err(_) => prop_assert!(w.iter().zip(&g).all(|(a, b)| a * b == 0.0)),
        }
    }

    #[test]
    fn restricted_kernel_is_stochastic_and_confined(
        raw in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 5), 5),
        in_a in prop::collection::vec(any::<bool>(), 5),
    ) {
        let k: Vec<Vec<f64>> = raw
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|v| v / s).collect()
            })
            .collect();
        let m = restricted_mh_kernel(&k, &in_a).unwrap();
        for (x, row) in m.iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            if in_a[x] {
                for (y, &v) in row.iter().enumerate() {
                    if !in_a[y] {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sig6_is_idempotent(mantissa in -1.0e6..1.0e6f64, exp in -12i32..12) {
        let x = mantissa * 10f64.powi(exp);
        let once = format_sig6(x);
        let again = format_sig6(once.parse::<f64>().unwrap());
        prop_assert_eq!(once, again);
    }

    #[test]
    fn sla_report_var_increases_with_level(lambda in 1.0..10.0f64, mu in -1.0..4.0f64, sigma in 0.2..2.5f64) {
        let text = format!(
            r#"{{"model":{{"frequency":{{"kind":"poisson","lambda":{lambda}}},
                "severity":{{"kind":"lognormal","mu":{mu},"sigma":{sigma}}}}},
               "method":{{"kind":"sla"}},"seed":0}}"#
        );
        let report = run_experiment(&ExperimentConfig::from_json(&text).unwrap()).unwrap();
        let vars: Vec<f64> = report.rows_for(Method::Sla).filter_map(|r| r.var).collect();
        prop_assert!(vars.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn splitting_estimate_lies_in_unit_interval(
        raw in prop::collection::vec(0.01..1.0f64, 6),
        cut in 0.5..4.5f64,
        seed in any::<u64>(),
    ) {
        let s: f64 = raw.iter().sum();
        let toy = DiscreteToy::new(raw.iter().map(|v| v / s).collect(), (0..6).map(|i| i as f64).collect()).unwrap();
        let cfg = SmcConfig { particles: 50, ..SmcConfig::default() };
        let levels = LevelSequence::fixed(vec![cut / 2.0, cut]);
        if let Ok(est) = smc_rare_event(&toy, &levels, &cfg, seed) {
            prop_assert!((0.0..=1.0).contains(&est.probability));
        }
    }
}
