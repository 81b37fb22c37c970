use curvehalt::curve_models::{eval_ensemble, Component, EnsembleSample, ModelFamily};
use curvehalt::inference::*;
use curvehalt::Error;
use proptest::prelude::*;

fn curve(values: &[f64], horizon: Epoch) -> LearningCurve {
    LearningCurve::from_values(RunId::new("r"), values.to_vec(), horizon).unwrap()
}

fn constant_sample(value: f64, sigma: f64) -> EnsembleSample {
    // vapor-pressure (0,0,0) is identically 1, so the member equals offset − 1.
    EnsembleSample {
        components: vec![Component {
            family: ModelFamily::VaporPressure,
            weight: 1.0,
            params: vec![0.0, 0.0, 0.0],
            offset: value + 1.0,
        }],
        noise_sigma: sigma,
    }
}

fn pow3_error(c: f64, a: f64, alpha: f64, t: Epoch) -> f64 {
    c + a * f64::from(t).powf(-alpha)
}

fn quick() -> InferenceConfig {
    InferenceConfig {
        chains: 2,
        chain_length: 600,
        burn_in: 200,
        thinning: 10,
        prefit_iterations: 60,
        ..InferenceConfig::default()
    }
}

#[test]
fn likelihood_of_exact_fit() {
    let s = constant_sample(0.5, 1.0);
    let ll = log_likelihood(&s, &curve(&[0.5; 4], 10));
    assert!((ll - (-2.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((ll - -3.6758).abs() < 1e-4);
}

#[test]
fn likelihood_single_residual() {
    let s = constant_sample(0.5, 1.0);
    let r: f64 = 0.3;
    let ll = log_likelihood(&s, &curve(&[0.8], 10));
    let oracle = -0.5 * (2.0 * std::f64::consts::PI).ln() - r * r / 2.0;
    assert!((ll - oracle).abs() < 1e-12);
}

#[test]
fn likelihood_rejects_bad_sigma() {
    let c = curve(&[0.5, 0.4], 10);
    assert_eq!(log_likelihood(&constant_sample(0.5, 0.0), &c), f64::NEG_INFINITY);
    assert_eq!(log_likelihood(&constant_sample(0.5, -1.0), &c), f64::NEG_INFINITY);
}

#[test]
fn likelihood_skips_invalid_observations() {
    let s = constant_sample(0.5, 1.0);
    let with_nan = log_likelihood(&s, &curve(&[0.5, f64::NAN, 0.5], 10));
    let without = log_likelihood(&s, &curve(&[0.5, 0.5], 10));
    assert_eq!(with_nan, without);
}

#[test]
fn prior_support() {
    assert_eq!(log_prior(&constant_sample(0.5, 0.1)), 0.0);
    let mut s = constant_sample(0.5, 0.1);
    s.components[0].params[2] = 5.0;
    assert_eq!(log_prior(&s), f64::NEG_INFINITY);
    let mut s = constant_sample(0.5, 0.1);
    s.components[0].weight = 1.5;
    assert_eq!(log_prior(&s), f64::NEG_INFINITY);
    assert_eq!(log_prior(&constant_sample(0.5, SIGMA_MIN / 2.0)), f64::NEG_INFINITY);
}

#[test]
fn kept_sample_count() {
    let config = InferenceConfig {
        chain_length: 1500,
        burn_in: 500,
        thinning: 10,
        chains: 3,
        prefit_iterations: 50,
        ..InferenceConfig::default()
    };
    assert_eq!(config.kept_samples(), 100);
    let c = curve(&[0.9, 0.7, 0.6, 0.55, 0.52, 0.5], 20);
    assert_eq!(mh_sample(&c, &config).unwrap().samples.len(), 100);
}

#[test]
fn config_validation() {
    let bad = [
        InferenceConfig { burn_in: 3000, ..InferenceConfig::default() },
        InferenceConfig { thinning: 0, ..InferenceConfig::default() },
        InferenceConfig { chains: 0, ..InferenceConfig::default() },
        InferenceConfig { quantile_delta: 1.5, ..InferenceConfig::default() },
    ];
    for config in bad {
        assert!(config.validate().is_err());
    }
    assert!(InferenceConfig::default().validate().is_ok());
}

#[test]
fn sampler_is_deterministic() {
    let c = curve(&[0.9, 0.7, 0.6, 0.55, 0.52, 0.5, 0.49], 30);
    let a = mh_sample(&c, &quick()).unwrap();
    let b = mh_sample(&c, &quick()).unwrap();
    assert_eq!(a, b);
    let other = mh_sample(&c, &InferenceConfig { seed: 1, ..quick() }).unwrap();
    assert_ne!(a.samples, other.samples);
}

#[test]
fn sampler_needs_data() {
    let c = curve(&[0.9, 0.7], 30);
    assert!(matches!(
        mh_sample(&c, &quick()),
        Err(Error::InsufficientData { observed: 2, .. })
    ));
}

#[test]
fn samples_stay_in_support() {
    let c = curve(&[1.2, 0.8, 0.75, 0.5, 0.61, 0.44, 0.47, 0.4], 40);
    let post = mh_sample(&c, &quick()).unwrap();
    for s in &post.samples {
        assert_eq!(log_prior(s), 0.0);
        assert!(eval_ensemble(s, 40).unwrap().is_finite());
    }
}

#[test]
fn recovers_pow3_asymptote() {
    let truth = |t| pow3_error(0.30, 0.5, 0.8, t);
    let values: Vec<f64> = (1..=25).map(truth).collect();
    let c = curve(&values, 50);
    let (_, p) = forecast(&c, &InferenceConfig::default()).unwrap();
    assert!((p.point_estimate - truth(50)).abs() <= 0.02, "{} vs {}", p.point_estimate, truth(50));
    assert_eq!(p.validity, Validity::Ok);
}

#[test]
fn single_sample_prediction() {
    let post = Posterior {
        scale: 2.0,
        samples: vec![constant_sample(0.25, 0.1)],
        epochs: vec![],
        fitted: vec![],
        acceptance_rate: 0.0,
    };
    let p = predict_at(&post, 50, 0.5).unwrap();
    assert_eq!(p.samples, vec![0.5]);
    assert_eq!(p.point_estimate, 0.5);
    assert_eq!(p.conservative_estimate, 0.5);
    let empty = Posterior { samples: vec![], ..post };
    assert!(predict_at(&empty, 50, 0.5).is_err());
}

#[test]
fn prediction_estimates() {
    let p = Prediction::from_samples(vec![0.8, 0.2, 0.6, 0.4], 0.5).unwrap();
    assert!((p.point_estimate - 0.5).abs() < 1e-15);
    assert_eq!(p.conservative_estimate, 0.4);
    let p = Prediction::from_samples(vec![0.1, 0.3, 0.5, 0.7, 0.9], 0.25).unwrap();
    assert_eq!(p.conservative_estimate, 0.7);
    assert!(Prediction::from_samples(vec![], 0.5).is_err());
}

#[test]
fn prob_below_examples() {
    let p = Prediction::from_samples(vec![0.2, 0.4, 0.6, 0.8], 0.5).unwrap();
    assert_eq!(prob_below(&p, 0.5), 0.5);
    assert_eq!(prob_below(&p, 0.1), 0.0);
    assert_eq!(prob_below(&p, 0.9), 1.0);
    assert_eq!(prob_below(&p, 0.2), 0.0);
}

#[test]
fn validity_rules() {
    let c = curve(&[0.9, 0.7, 0.6, 0.55], 20);
    let ok = Prediction::from_samples(vec![0.5], 0.5).unwrap();
    assert_eq!(check_validity(&ok, &c, &[0.9, 0.7, 0.6, 0.55]), Validity::Ok);
    let neg = Prediction::from_samples(vec![-0.1], 0.5).unwrap();
    assert_eq!(check_validity(&neg, &c, &[0.9, 0.7, 0.6, 0.55]), Validity::NegativeLoss);
    assert_eq!(
        check_validity(&ok, &c, &[0.55, 0.6, 0.7, 0.9]),
        Validity::LowCorrelation
    );
    let short = curve(&[0.9, 0.7], 20);
    assert_eq!(check_validity(&ok, &short, &[0.9, 0.7]), Validity::InsufficientData);
    assert!(!Prediction { validity: Validity::NegativeLoss, ..ok.clone() }.is_valid());
}

#[test]
fn curve_contract() {
    let mut c = LearningCurve::new(RunId::new("r"), 3).unwrap();
    assert_eq!(c.push(0.5).unwrap(), 1);
    c.push(0.4).unwrap();
    c.push(0.3).unwrap();
    assert!(c.push(0.2).is_err());
    let mut h = LearningCurve::new(RunId::new("h"), 5).unwrap();
    h.push(0.5).unwrap();
    h.halt();
    assert!(h.push(0.4).is_err());
    assert!(LearningCurve::new(RunId::new("z"), 0).is_err());
}

proptest! {
    #[test]
    fn prob_below_is_monotone(
        samples in prop::collection::vec(-1.0..2.0f64, 1..80),
        a in -1.5..2.5f64,
        b in -1.5..2.5f64,
    ) {
        let p = Prediction::from_samples(samples, 0.5).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(prob_below(&p, lo) <= prob_below(&p, hi));
    }

    #[test]
    fn conservative_estimate_is_a_sample(
        samples in prop::collection::vec(-1.0..2.0f64, 1..80),
        delta in 0.0..=1.0f64,
    ) {
        let p = Prediction::from_samples(samples.clone(), delta).unwrap();
        prop_assert!(samples.contains(&p.conservative_estimate));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        prop_assert!((p.point_estimate - mean).abs() <= 1e-12);
        let mut sorted = samples;
        sorted.sort_by(f64::total_cmp);
        let rank = ((1.0 - delta) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(p.conservative_estimate, sorted[rank.min(sorted.len()) - 1]);
    }
}
