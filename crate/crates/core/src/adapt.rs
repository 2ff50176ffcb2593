//! Test-time adaptation from unlabeled samples: EM over a new site's
//! prevalence network with the ratio network held fixed, and the
//! labeled-test baselines.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SiteDataset};
use crate::diffnet::{backward, mlp_forward, LbfgsConfig, LossSpec, Matrix, MlpParams, Sgd};
use crate::error::{config_err, Error, Result};
use crate::model::{adjusted_posterior, group_rows, prevalence_inputs, KnockoutCodec, PrevalenceModel, RatioScorer};
use crate::prob::{clamped_ln, softmax_in_place, ProbVector};
use crate::sem::derive_seed;
use crate::train::{fit_site_prevalence, fit_soft_targets, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MStepMode {
    /// Maximize the expected complete-data log-likelihood with LBFGS.
    FullLbfgs,
    /// One gradient ascent step per iteration.
    SingleGradientStep { lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Outer EM iterations.
    pub iterations: usize,
    pub m_step: MStepMode,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub lbfgs: LbfgsConfig,
    /// Start from this training site's prevalence network instead of a
    /// fresh random one.
    pub warm_start_site: Option<String>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            m_step: MStepMode::FullLbfgs,
            seed: 0,
            hidden: vec![100, 100],
            lbfgs: LbfgsConfig { max_iter: 200, ..LbfgsConfig::default() },
            warm_start_site: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return config_err("EM needs at least one iteration");
        }
        if let MStepMode::SingleGradientStep { lr } = self.m_step {
            if !(lr > 0.0 && lr.is_finite()) {
                return config_err(format!("m-step learning rate {lr} must be positive"));
            }
        }
        if self.hidden.contains(&0) {
            return config_err("hidden layers must be non-empty");
        }
        Ok(())
    }
}

/// Progress of one EM run; entry 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub loglik: Vec<f64>,
    /// Flattened prevalence parameters after each iteration.
    pub snapshots: Vec<Vec<f64>>,
    /// Display label of every distinct confounder value seen.
    pub groups: Vec<String>,
    /// `estimates[t][g]`: class distribution for group `g` after iteration `t`.
    pub estimates: Vec<Vec<ProbVector>>,
}

impl EmTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let classes = self.estimates.first().and_then(|e| e.first()).map_or(0, ProbVector::len);
        let mut header = vec!["iteration".to_string(), "surrogate_loglik".to_string()];
        for g in &self.groups {
            for c in 0..classes {
                header.push(format!("p_y{c}|z={g}"));
            }
        }
        w.write_record(&header)?;
        for (t, (ll, est)) in self.loglik.iter().zip(&self.estimates).enumerate() {
            let mut rec = vec![t.to_string(), format!("{ll:?}")];
            for p in est {
                rec.extend(p.as_slice().iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn is_non_decreasing(&self, tol: f64) -> bool {
        self.loglik.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

fn z_label(z: &[Option<f64>]) -> String {
    z.iter().map(|v| v.map_or("NA".to_string(), |v| format!("{v}"))).collect::<Vec<_>>().join(";")
}

/// `sum_n ln sum_i g(z_n)_i softmax(f(x_n, z_n))_i`, with the log floored.
pub fn surrogate_loglik(samples: &[Sample], ratio: &dyn RatioScorer, prevalence: &PrevalenceModel) -> Result<f64> {
    let f = ratio.ratio_probs(samples)?;
    let g = prevalence.probs_batch(samples)?;
    Ok(f.iter().zip(&g).map(|(f, g)| clamped_ln(dot(f.as_slice(), g.as_slice()))).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn group_probs(params: &MlpParams, inputs: &Matrix) -> Result<Matrix> {
    let mut m = mlp_forward(params, inputs)?;
    for r in 0..m.rows() {
        softmax_in_place(m.row_mut(r));
    }
    Ok(m)
}

fn to_vectors(m: &Matrix) -> Result<Vec<ProbVector>> {
    m.iter_rows().map(|r| ProbVector::new(r.to_vec())).collect()
}

/// Estimates the prevalence network of an unlabeled site from `(x, z)`
/// samples by EM, starting from fresh random parameters.
pub fn em_conditional_prevalence(
    unlabeled: &SiteDataset,
    ratio: &dyn RatioScorer,
    codec: &KnockoutCodec,
    cfg: &EmConfig,
) -> Result<(PrevalenceModel, EmTrace)> {
    run_em(unlabeled, ratio, codec, cfg, None)
}

/// As [`em_conditional_prevalence`], started from `init`'s parameters.
pub fn em_conditional_prevalence_from(
    unlabeled: &SiteDataset,
    ratio: &dyn RatioScorer,
    init: &PrevalenceModel,
    cfg: &EmConfig,
) -> Result<(PrevalenceModel, EmTrace)> {
    run_em(unlabeled, ratio, &init.codec, cfg, Some(&init.params))
}

/// Estimates `P_b(Y)` from features alone: the same EM with every
/// confounder replaced by the placeholder. Returns the estimate and the
/// fitted network (evaluated at the placeholder).
pub fn em_marginal_prevalence(
    unlabeled: &SiteDataset,
    ratio: &dyn RatioScorer,
    codec: &KnockoutCodec,
    cfg: &EmConfig,
) -> Result<(ProbVector, PrevalenceModel, EmTrace)> {
    let (g, trace) = run_em(&unlabeled.without_z(), ratio, codec, cfg, None)?;
    Ok((g.marginal()?, g, trace))
}

fn run_em(
    data: &SiteDataset,
    ratio: &dyn RatioScorer,
    codec: &KnockoutCodec,
    cfg: &EmConfig,
    init: Option<&MlpParams>,
) -> Result<(PrevalenceModel, EmTrace)> {
    cfg.validate()?;
    let samples = &data.samples;
    if samples.is_empty() {
        return Err(Error::Data(format!("site {} has no unlabeled samples", data.site)));
    }
    let classes = ratio.num_classes();
    let f = ratio.ratio_probs(samples)?;
    let inputs = prevalence_inputs(codec, samples)?;
    let groups = group_rows(&inputs);
    let uniq = Matrix::from_rows(&groups.representatives(&inputs))?;
    let mut params = match init {
        Some(p) => {
            if p.input_dim() != codec.encoded_dim() || p.output_dim() != classes {
                return config_err("initial prevalence network does not match codec and classes");
            }
            p.clone()
        }
        None => {
            let mut sizes = vec![codec.encoded_dim()];
            sizes.extend_from_slice(&cfg.hidden);
            sizes.push(classes);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("em/{}", data.site)));
            MlpParams::he_uniform(&sizes, &mut rng)?
        }
    };
    let loglik = |g: &Matrix| -> f64 {
        f.iter().zip(&groups.assignment).map(|(f, &k)| clamped_ln(dot(f.as_slice(), g.row(k)))).sum()
    };
    let mut g = group_probs(&params, &uniq)?;
    let mut trace = EmTrace {
        loglik: vec![loglik(&g)],
        snapshots: vec![params.flatten()],
        groups: groups.first_row.iter().map(|&r| z_label(&samples[r].z)).collect(),
        estimates: vec![to_vectors(&g)?],
    };
    let scale = 1.0 / samples.len() as f64;
    for t in 1..=cfg.iterations {
        let mut resp = Matrix::zeros(uniq.rows(), classes);
        for (n, (fn_, &k)) in f.iter().zip(&groups.assignment).enumerate() {
            let r = adjusted_posterior(fn_.as_slice(), g.row(k)).map_err(|e| Error::NonFinite {
                index: n,
                context: format!("responsibility in EM iteration {t}: {e}"),
            })?;
            for (acc, v) in resp.row_mut(k).iter_mut().zip(r.as_slice()) {
                *acc += v;
            }
        }
        match cfg.m_step {
            MStepMode::FullLbfgs => {
                fit_soft_targets(&mut params, &uniq, &resp, scale, &cfg.lbfgs)?;
            }
            MStepMode::SingleGradientStep { lr } => {
                let grad = backward(&params, &uniq, &LossSpec::SoftTargets { targets: &resp, scale })?;
                let mut flat = params.flatten();
                Sgd::new(lr)?.step(&mut flat, &grad.params.flatten());
                params.assign_flat(&flat)?;
            }
        }
        g = group_probs(&params, &uniq)?;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: 0, context: format!("prevalence output after EM iteration {t}") });
        }
        trace.loglik.push(loglik(&g));
        trace.snapshots.push(params.flatten());
        trace.estimates.push(to_vectors(&g)?);
    }
    Ok((PrevalenceModel { params, codec: codec.clone(), site: data.site.clone() }, trace))
}

/// Prevalence network fitted on the test site's own labels; an upper
/// bound that needs oracle access to test labels.
pub fn copa_direct(labeled: &SiteDataset, codec: &KnockoutCodec, cfg: &TrainConfig) -> Result<PrevalenceModel> {
    fit_site_prevalence(labeled, codec, cfg)
}

/// `Norm(sum_z Norm(P(Y) * softmax(f(x, z))))` over an enumerated
/// confounder support, for every sample's `x`.
pub fn copa_star_mc(
    samples: &[Sample],
    ratio: &dyn RatioScorer,
    marginal: &ProbVector,
    support: &[Vec<Option<f64>>],
) -> Result<Vec<ProbVector>> {
    if support.is_empty() {
        return config_err("empty confounder support");
    }
    if marginal.len() != ratio.num_classes() {
        return config_err("marginal and ratio disagree on the number of classes");
    }
    let mut acc = vec![vec![0.0; marginal.len()]; samples.len()];
    for z in support {
        let with_z: Vec<Sample> = samples.iter().map(|s| Sample { x: s.x.clone(), y: None, z: z.clone() }).collect();
        for (a, f) in acc.iter_mut().zip(ratio.ratio_probs(&with_z)?) {
            let p = adjusted_posterior(f.as_slice(), marginal.as_slice())?;
            a.iter_mut().zip(p.as_slice()).for_each(|(a, p)| *a += p);
        }
    }
    acc.into_iter().map(ProbVector::normalize).collect()
}

#[cfg(test)]
#[path = "adapt_tests.rs"]
mod tests;
