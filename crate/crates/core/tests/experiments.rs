use disclab::euler::{EmOptions, Reference};
use disclab::harness::{run_experiment, ExperimentConfig, ExperimentKind, ModelConfig, SchemeConfig};
use disclab::moments::{bernoulli_mixture_decompose, kurtosis_skew_gap34, pearson_gap, FiniteDistribution};
use disclab::schemes::k_factor;
use proptest::prelude::*;

fn geometric_time(ladder: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::Em,
        model: Some(ModelConfig::Geometric { x0: 1.0, drift: 0.0, vol: 1.0 }),
        em: EmOptions { reference: Reference::Exact, ..EmOptions::default() },
        schemes: vec![SchemeConfig::Time { n: None }],
        eps_ladder: ladder,
        replications: 3000,
        seed: 11,
        ..ExperimentConfig::default()
    }
}

#[test]
fn euler_mean_square_error_has_order_one_in_the_step() {
    // h = ε², so E[(Ξⁿ − Ξ)²] ~ ε² and the log-log slope in ε is 2.
    let ladder = vec![0.2, 0.1, 0.05];
    let out = run_experiment(&geometric_time(ladder.clone())).unwrap();
    let xs: Vec<f64> = ladder.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = out.aggregate.cells.iter().map(|c| c.stats["z_sq"].mean.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
}

#[test]
fn space_scheme_is_three_times_better_on_w_dw() {
    let config = ExperimentConfig {
        schemes: vec![SchemeConfig::Space, SchemeConfig::Time { n: None }],
        eps_ladder: vec![0.1],
        replications: 4000,
        seed: 12,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&config).unwrap();
    let r = out.aggregate.ratio("product_n_z2", "space", "time", 0).unwrap();
    assert!(r.ci_low < 1.0 / 3.0 && 1.0 / 3.0 < r.ci_high, "{r:?}");
}

#[test]
fn config_survives_json_round_trip() {
    let config = geometric_time(vec![0.1]);
    let text = serde_json::to_string(&config).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), config);
}

#[test]
fn histogram_density_integrates_to_at_most_one() {
    let config = ExperimentConfig { replications: 2000, eps_ladder: vec![0.1], seed: 13, ..ExperimentConfig::default() };
    let out = run_experiment(&config).unwrap();
    for scheme in ["time", "space"] {
        let rows: Vec<_> = out.histogram.iter().filter(|h| h.scheme == scheme).collect();
        let mass: f64 = rows.iter().map(|h| h.density * (h.bin_right - h.bin_left)).sum();
        let fitted: f64 = rows.iter().map(|h| h.fitted * (h.bin_right - h.bin_left)).sum();
        assert!(mass <= 1.0 + 1e-12 && mass > 0.98, "{scheme} {mass}");
        assert!((fitted - 1.0).abs() < 0.05, "{scheme} fitted {fitted}");
    }
}

fn law() -> impl Strategy<Value = FiniteDistribution> {
    (2usize..9, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = disclab::rng::split(seed, 0);
        FiniteDistribution::random_mean_zero(&mut rng, n)
    })
}

proptest! {
    #[test]
    fn k_factor_solves_its_quadratic(beta in -20.0f64..20.0, delta in 1e-3f64..100.0) {
        let k = k_factor(beta, delta).unwrap();
        let x = beta / delta.sqrt();
        prop_assert!(k > 0.0);
        prop_assert!((k - 1.0 / k - x).abs() <= 1e-12 * (1.0 + x.abs()));
    }

    #[test]
    fn gaps_are_scale_invariant_and_non_negative(d in law(), lambda in 0.01f64..100.0) {
        let scaled = d.scaled(lambda).unwrap();
        let (p, k) = (pearson_gap(&d).unwrap(), kurtosis_skew_gap34(&d).unwrap());
        prop_assert!(p >= -1e-10 && k >= -1e-10);
        prop_assert!((pearson_gap(&scaled).unwrap() - p).abs() <= 1e-9 * (1.0 + p));
        prop_assert!((kurtosis_skew_gap34(&scaled).unwrap() - k).abs() <= 1e-9 * (1.0 + k));
    }

    #[test]
    fn decomposition_recombines(d in law()) {
        let mix = bernoulli_mixture_decompose(&d).unwrap();
        prop_assert!(mix.max_error(&d) <= 1e-12);
        let total: f64 = mix.zero_weight + mix.components.iter().map(|c| c.0).sum::<f64>();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }
}
