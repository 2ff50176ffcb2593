use super::*;
use crate::diffnet::Dense;
use crate::discrete::{build_discrete_oracle, DiscreteOracle, DiscreteSiteSpec, OracleRatio, SiteTables};
use crate::model::{ConfounderSpec, RatioModel};


/// Ratio scorer returning the same distribution for every input.
struct ConstantRatio(Vec<f64>);

impl RatioScorer for ConstantRatio {
    fn num_classes(&self) -> usize {
        self.0.len()
    }

    fn ratio_probs(&self, samples: &[Sample]) -> Result<Vec<ProbVector>> {
        Ok(samples.iter().map(|_| ProbVector::new(self.0.clone()).unwrap()).collect())
    }
}

fn tables(name: &str, p_z: Vec<f64>, p_y1: Vec<f64>) -> SiteTables {
    let p_y_given_z = p_y1.iter().map(|p| vec![1.0 - p, *p]).collect();
    SiteTables { name: name.into(), p_z, p_y_given_z }
}

/// Two training sites plus a target site `new`; returns the target's data.
fn oracle_with_target(target: SiteTables, n: usize, sharpness: f64, seed: u64) -> (DiscreteOracle, SiteDataset) {
    let specs = vec![
        DiscreteSiteSpec { tables: tables("a", vec![0.5, 0.5], vec![0.8, 0.3]), n: 1 },
        DiscreteSiteSpec { tables: tables("b", vec![0.3, 0.7], vec![0.6, 0.5]), n: 1 },
        DiscreteSiteSpec { tables: target, n },
    ];
    let (oracle, mut data) = build_discrete_oracle(6, &specs, sharpness, seed).unwrap();
    (oracle, data.pop().unwrap().unlabeled())
}

fn small_cfg() -> EmConfig {
    EmConfig { hidden: vec![16], ..EmConfig::default() }
}

#[test]
fn invalid_config_rejected() {
    assert!(EmConfig { iterations: 0, ..EmConfig::default() }.validate().is_err());
    assert!(EmConfig { m_step: MStepMode::SingleGradientStep { lr: 0.0 }, ..EmConfig::default() }.validate().is_err());
}

#[test]
fn uninformative_ratio_is_a_fixed_point() {
    let (_, data) = oracle_with_target(tables("new", vec![0.4, 0.6], vec![0.2, 0.7]), 500, 1.0, 1);
    let codec = KnockoutCodec::new(vec![ConfounderSpec::Categorical { cardinality: 2 }]).unwrap();
    let (_, trace) = em_conditional_prevalence(&data, &ConstantRatio(vec![0.5, 0.5]), &codec, &small_cfg()).unwrap();
    assert_eq!(trace.loglik.len(), 6);
    assert_eq!(trace.snapshots.len(), 6);
    for (a, b) in trace.estimates[0].iter().zip(&trace.estimates[5]) {
        assert!((a[1] - b[1]).abs() < 1e-6, "{a:?} -> {b:?}");
    }
    let (_, _, trace) = em_marginal_prevalence(&data, &ConstantRatio(vec![0.5, 0.5]), &codec, &small_cfg()).unwrap();
    assert_eq!(trace.groups, vec!["NA"]);
    assert!((trace.estimates[0][0][1] - trace.estimates[5][0][1]).abs() < 1e-6);
}

#[test]
fn conditional_em_recovers_target_table() {
    let truth = [0.1, 0.6];
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], truth.to_vec()), 10_000, 3.0, 2);
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 2 };
    let (g, trace) = em_conditional_prevalence(&data, &ratio, &oracle.codec(), &EmConfig::default()).unwrap();
    for (z, t) in truth.iter().enumerate() {
        let p = g.probs(&[Some(z as f64)]).unwrap();
        assert!(2.0 * (p[1] - t).abs() < 0.02, "z={z}: {p:?} vs {t}");
    }
    assert!(trace.is_non_decreasing(1e-8), "{:?}", trace.loglik);
}

#[test]
fn marginal_em_recovers_target_prevalence() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.05, 0.15]), 10_000, 3.0, 3);
    assert!((oracle.p_y(2)[1] - 0.1).abs() < 1e-12);
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 2 };
    let (p, _, trace) = em_marginal_prevalence(&data, &ratio, &oracle.codec(), &EmConfig::default()).unwrap();
    assert!((p[1] - 0.1).abs() < 0.02, "{p:?}");
    assert!(trace.is_non_decreasing(1e-8));
}

/// Classic prior-shift EM: `pi <- mean_n Norm(pi * f_n)`.
fn prior_shift_em(f: &[ProbVector], init: &[f64], iterations: usize) -> Vec<f64> {
    let mut pi = init.to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; pi.len()];
        for fn_ in f {
            let w: Vec<f64> = pi.iter().zip(fn_.as_slice()).map(|(p, f)| p * f).collect();
            let s: f64 = w.iter().sum();
            next.iter_mut().zip(&w).for_each(|(a, w)| *a += w / s);
        }
        pi = next.iter().map(|v| v / f.len() as f64).collect();
    }
    pi
}

#[test]
fn marginal_em_matches_prior_shift_iteration() {
    for seed in 0..3 {
        let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.2, 0.35]), 2_000, 1.5, 10 + seed);
        let ratio = OracleRatio { oracle: &oracle, marginal_site: 0 };
        let (p, _, trace) = em_marginal_prevalence(&data, &ratio, &oracle.codec(), &EmConfig::default()).unwrap();
        let f = ratio.ratio_probs(&data.without_z().samples).unwrap();
        let expected = prior_shift_em(&f, trace.estimates[0][0].as_slice(), 5);
        for c in 0..2 {
            assert!((p[c] - expected[c]).abs() < 1e-6, "seed {seed}: {p:?} vs {expected:?}");
        }
    }
}

#[test]
fn surrogate_is_monotone_on_random_instances() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = SiteTables::random("new", 2, 2, &mut rng);
        let (oracle, data) = oracle_with_target(target, 1_000, 1.0, seed);
        let ratio = OracleRatio { oracle: &oracle, marginal_site: 0 };
        let cfg = EmConfig { seed, ..small_cfg() };
        let (g, trace) = em_conditional_prevalence(&data, &ratio, &oracle.codec(), &cfg).unwrap();
        assert!(trace.is_non_decreasing(1e-8), "seed {seed}: {:?}", trace.loglik);
        let direct = surrogate_loglik(&data.samples, &ratio, &g).unwrap();
        assert!((direct - trace.loglik[5]).abs() < 1e-9 * direct.abs().max(1.0));
    }
}

#[test]
fn single_gradient_step_mode_runs() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 1_000, 2.0, 4);
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 2 };
    let cfg = EmConfig { m_step: MStepMode::SingleGradientStep { lr: 0.5 }, ..small_cfg() };
    let (_, trace) = em_conditional_prevalence(&data, &ratio, &oracle.codec(), &cfg).unwrap();
    assert_eq!(trace.snapshots.len(), 6);
    assert_ne!(trace.snapshots[0], trace.snapshots[5]);
}

#[test]
fn warm_start_uses_given_parameters() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 200, 2.0, 4);
    let codec = oracle.codec();
    let rows = [ProbVector::new(vec![0.7, 0.3]).unwrap(), ProbVector::new(vec![0.2, 0.8]).unwrap(), ProbVector::uniform(2)];
    let init = PrevalenceModel::from_categorical_table("a", &codec, &rows).unwrap();
    let ratio = ConstantRatio(vec![0.5, 0.5]);
    let (g, trace) = em_conditional_prevalence_from(&data, &ratio, &init, &EmConfig { iterations: 1, ..EmConfig::default() }).unwrap();
    assert_eq!(trace.snapshots[0], init.params.flatten());
    assert!((g.probs(&[Some(1.0)]).unwrap()[1] - 0.8).abs() < 1e-6);
}

#[test]
fn zero_responsibility_mass_reports_sample() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 10, 2.0, 4);
    let codec = oracle.codec();
    let mut weight = Matrix::zeros(3, 2);
    (0..3).for_each(|r| weight.set(r, 0, -1000.0));
    let init = PrevalenceModel {
        params: MlpParams::from_layers(vec![Dense { weight, bias: vec![0.0; 2] }]).unwrap(),
        codec,
        site: "x".into(),
    };
    let err = em_conditional_prevalence_from(&data, &ConstantRatio(vec![1.0, 0.0]), &init, &EmConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 0, .. }), "{err}");
}

#[test]
fn adaptation_leaves_ratio_untouched() {
    let (_, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 300, 2.0, 5);
    let codec = KnockoutCodec::new(vec![ConfounderSpec::Categorical { cardinality: 2 }]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = RatioModel::new(MlpParams::he_uniform(&[9, 8, 2], &mut rng).unwrap(), codec.clone());
    let before = model.clone();
    em_conditional_prevalence(&data, &model, &codec, &small_cfg()).unwrap();
    em_marginal_prevalence(&data, &model, &codec, &small_cfg()).unwrap();
    assert_eq!(model, before);
    assert!(model.params.flatten().iter().zip(before.params.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn surrogate_examples() {
    let codec = KnockoutCodec::binary();
    let s = vec![Sample { x: vec![], y: None, z: vec![Some(0.0)] }];
    let g = PrevalenceModel::from_categorical_table("s", &codec, &[ProbVector::one_hot(2, 0), ProbVector::uniform(2), ProbVector::uniform(2)]).unwrap();
    assert!(surrogate_loglik(&s, &ConstantRatio(vec![1.0, 0.0]), &g).unwrap().abs() < 1e-11);

    let u = ProbVector::uniform(2);
    let g = PrevalenceModel::from_categorical_table("s", &codec, &[u.clone(), u.clone(), u]).unwrap();
    let many = vec![s[0].clone(); 7];
    let v = surrogate_loglik(&many, &ConstantRatio(vec![0.5, 0.5]), &g).unwrap();
    assert!((v - 7.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn trace_csv_layout() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 50, 2.0, 6);
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 0 };
    let (_, trace) = em_conditional_prevalence(&data, &ratio, &oracle.codec(), &EmConfig { iterations: 2, ..small_cfg() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    trace.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("iteration,surrogate_loglik,p_y0|z="));
    assert_eq!(lines[0].split(',').count(), 2 + 2 * trace.groups.len());
}

#[test]
fn copa_star_single_support_is_adjusted_posterior() {
    let (oracle, data) = oracle_with_target(tables("new", vec![0.5, 0.5], vec![0.1, 0.6]), 20, 2.0, 7);
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 0 };
    let prior = ProbVector::new(vec![0.3, 0.7]).unwrap();
    let got = copa_star_mc(&data.samples, &ratio, &prior, &[vec![Some(1.0)]]).unwrap();
    for (s, p) in data.samples.iter().zip(&got) {
        let f = ratio.ratio_probs(&[Sample { x: s.x.clone(), y: None, z: vec![Some(1.0)] }]).unwrap().remove(0);
        let want = adjusted_posterior(f.as_slice(), prior.as_slice()).unwrap();
        assert!((p[1] - want[1]).abs() < 1e-15);
    }
    assert!(copa_star_mc(&data.samples, &ratio, &prior, &[]).is_err());
}

#[test]
fn copa_star_with_confounder_free_ratio() {
    let samples: Vec<Sample> = (0..5).map(|i| Sample { x: vec![i as f64], y: None, z: vec![Some(0.0)] }).collect();
    let ratio = ConstantRatio(vec![0.2, 0.8]);
    let prior = ProbVector::new(vec![0.6, 0.4]).unwrap();
    let support = KnockoutCodec::binary().enumerate_support().unwrap();
    let got = copa_star_mc(&samples, &ratio, &prior, &support).unwrap();
    let want = adjusted_posterior(&[0.2, 0.8], prior.as_slice()).unwrap();
    assert!(got.iter().all(|p| (p[1] - want[1]).abs() < 1e-15));
}

#[test]
fn copa_star_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emission = DiscreteOracle::random_emission(4, 2, 2, 1.0, &mut rng);
    let oracle = DiscreteOracle::new(emission.clone(), vec![tables("a", vec![0.5, 0.5], vec![0.3, 0.6])]).unwrap();
    let ratio = OracleRatio { oracle: &oracle, marginal_site: 0 };
    let prior = [0.35, 0.65];
    let support = vec![vec![Some(0.0)], vec![Some(1.0)]];
    for x in 0..4 {
        let s = Sample { x: crate::discrete::one_hot(4, x), y: None, z: vec![None] };
        let got = copa_star_mc(&[s], &ratio, &ProbVector::new(prior.to_vec()).unwrap(), &support).unwrap();
        // brute force: sum over z of P(Y) P(x|Y,z) normalized per z, then normalized
        let mut acc = [0.0; 2];
        for z in 0..2 {
            let w: Vec<f64> = (0..2).map(|y| prior[y] * emission[y][z][x]).collect();
            let s = w[0] + w[1];
            acc[0] += w[0] / s;
            acc[1] += w[1] / s;
        }
        assert!((got[0][1] - acc[1] / (acc[0] + acc[1])).abs() < 1e-12);
    }
}

#[test]
fn copa_direct_is_site_prevalence_fit() {
    let pairs: Vec<Sample> = (0..400).map(|i| Sample { x: vec![0.0], y: Some(i % 2), z: vec![Some((i % 2) as f64)] }).collect();
    let site = SiteDataset::new("test", pairs).unwrap();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let a = copa_direct(&site, &KnockoutCodec::binary(), &cfg).unwrap();
    let b = fit_site_prevalence(&site, &KnockoutCodec::binary(), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.probs(&[Some(1.0)]).unwrap()[1] > 0.99);
}

