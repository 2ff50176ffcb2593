//! Fitting of per-site prevalence networks, the ratio network with frozen
//! prevalences, validation calibration, and the ERM baselines.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SiteDataset};
use crate::diffnet::{
    backward, lbfgs_minimize, loss_and_logit_grad, mlp_forward, softmax_rows, LbfgsConfig, LossSpec, Matrix,
    MlpParams, OptimizerConfig, OptimizerState,
};
use crate::error::{config_err, data_err, Error, Result};
use crate::metrics::f1_score;
use crate::model::{
    adjusted_posterior, knockout_corrupt, ratio_inputs, CalibrationParams,
    KnockoutCodec, PrevalenceModel, RatioModel,
};
use crate::prob::{argmax, clamped_ln, ProbVector};
use crate::sem::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing each confounder by the placeholder.
    pub knockout_rate: f64,
    /// Epochs without a validation F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub ratio_hidden: Vec<usize>,
    pub prevalence_hidden: Vec<usize>,
    /// Class whose F1 drives early stopping.
    pub positive_class: usize,
    pub calibration: LbfgsConfig,
    pub prevalence_lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            knockout_rate: 0.5,
            patience: 10,
            seed: 0,
            num_classes: 2,
            ratio_hidden: vec![100, 100],
            prevalence_hidden: vec![100, 100],
            positive_class: 1,
            calibration: LbfgsConfig::default(),
            prevalence_lbfgs: LbfgsConfig { max_iter: 200, ..LbfgsConfig::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config_err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.knockout_rate) {
            return config_err(format!("knockout rate {} outside [0, 1]", self.knockout_rate));
        }
        if self.num_classes < 2 {
            return config_err("need at least two classes");
        }
        if self.positive_class >= self.num_classes {
            return config_err("positive class out of range");
        }
        if self.ratio_hidden.contains(&0) || self.prevalence_hidden.contains(&0) {
            return config_err("hidden layers must be non-empty");
        }
        Ok(())
    }

    fn sizes(&self, input: usize, hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![input];
        s.extend_from_slice(hidden);
        s.push(self.num_classes);
        s
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub model: String,
    pub epoch: usize,
    pub split: String,
    pub nll: f64,
    pub f1: Option<f64>,
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "epoch", "split", "nll", "f1"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.epoch.to_string(),
            r.split.clone(),
            format!("{:?}", r.nll),
            r.f1.map_or(String::new(), |f| format!("{f:?}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A baseline classifier over `x` alone or `[x, encode(z)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmModel {
    pub params: MlpParams,
    pub codec: KnockoutCodec,
    pub use_z: bool,
}

impl ErmModel {
    pub fn inputs(&self, samples: &[Sample]) -> Result<Matrix> {
        erm_inputs(&self.codec, self.use_z, samples)
    }

    pub fn probs(&self, samples: &[Sample]) -> Result<Vec<ProbVector>> {
        let p = softmax_rows(&mlp_forward(&self.params, &self.inputs(samples)?)?);
        p.iter_rows().map(|r| ProbVector::new(r.to_vec())).collect()
    }
}

/// Everything fitted from labeled sites.
#[derive(Debug, Clone)]
pub struct FittedModels {
    /// Calibrated ratio network.
    pub ratio: RatioModel,
    /// Prevalence networks for every training site and the validation site.
    pub prevalences: BTreeMap<String, PrevalenceModel>,
    pub codec: KnockoutCodec,
    pub baselines: BTreeMap<String, ErmModel>,
    pub log: Vec<TrainLogRow>,
    /// Validation NLL of the adjusted posterior before and after calibration.
    pub calibration_nll: (f64, f64),
    pub ratio_best_epoch: Option<usize>,
}

/// A fitted network together with its training log.
#[derive(Debug, Clone)]
pub struct Fit<M> {
    pub model: M,
    pub log: Vec<TrainLogRow>,
    /// Epoch of the returned snapshot (1-based) when early stopping ran.
    pub best_epoch: Option<usize>,
}

fn erm_inputs(codec: &KnockoutCodec, use_z: bool, samples: &[Sample]) -> Result<Matrix> {
    if use_z {
        return ratio_inputs(codec, samples);
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn label_of(s: &Sample, i: usize, classes: usize) -> Result<usize> {
    match s.y {
        Some(y) if y < classes => Ok(y),
        Some(y) => data_err(format!("label {y} out of range at sample {i}")),
        None => data_err(format!("sample {i} is unlabeled")),
    }
}

fn labels_of(samples: &[Sample], classes: usize) -> Result<Vec<usize>> {
    samples.iter().enumerate().map(|(i, s)| label_of(s, i, classes)).collect()
}

fn rng_for(cfg: &TrainConfig, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, label))
}

struct Targets {
    labels: Vec<usize>,
    offsets: Option<Matrix>,
}

struct Batch {
    inputs: Matrix,
    targets: Targets,
}

/// Validation F1 and NLL.
struct Eval {
    nll: f64,
    f1: f64,
}

/// Minibatch first-order training shared by every network here. With a
/// validator, returns the snapshot with the best validation F1 (earliest on
/// ties) and stops after `patience` epochs without improvement.
fn run_training<B, V>(
    mut params: MlpParams,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    name: &str,
    mut make_batch: B,
    mut validate: Option<V>,
    log: &mut Vec<TrainLogRow>,
) -> Result<(MlpParams, Option<usize>)>
where
    B: FnMut(&[usize], &mut ChaCha8Rng) -> Result<Batch>,
    V: FnMut(&MlpParams) -> Result<Eval>,
{
    cfg.validate()?;
    if n == 0 {
        return data_err(format!("{name}: no training samples"));
    }
    let mut flat = params.flatten();
    let mut opt = OptimizerState::first_order(&cfg.optimizer, flat.len())?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, MlpParams)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(chunk, rng)?;
            let t = &batch.targets;
            let spec = LossSpec::CrossEntropy { labels: &t.labels, weights: None, offsets: t.offsets.as_ref() };
            let grad = backward(&params, &batch.inputs, &spec)?;
            if !grad.loss.is_finite() {
                return Err(Error::NonFinite {
                    index: b,
                    context: format!("{name}: training loss {} in epoch {epoch}", grad.loss),
                });
            }
            let g = grad.params.flatten();
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: b, context: format!("{name}: gradient entry {k} in epoch {epoch}") });
            }
            opt.step(&mut flat, &g)?;
            params.assign_flat(&flat)?;
            total += grad.loss * chunk.len() as f64;
            seen += chunk.len();
        }
        log.push(TrainLogRow { model: name.into(), epoch, split: "train".into(), nll: total / seen as f64, f1: None });
        if let Some(v) = validate.as_mut() {
            let e = v(&params)?;
            log.push(TrainLogRow { model: name.into(), epoch, split: "validation".into(), nll: e.nll, f1: Some(e.f1) });
            match &best {
                Some((f1, _, _)) if e.f1 <= *f1 => {}
                _ => best = Some((e.f1, epoch, params.clone())),
            }
            if let Some((_, at, _)) = &best {
                if epoch - at >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params, None),
    })
}

fn validation_eval(probs: &[ProbVector], labels: &[usize], positive: usize) -> Result<Eval> {
    let preds: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    Ok(Eval { nll: crate::diffnet::nll_loss(probs, labels, None)?, f1: f1_score(&preds, labels, positive)? })
}

/// Label counts of a site under the knockout corruption, in expectation:
/// every subset of confounders is replaced by the placeholder with its
/// probability, and identical encoded inputs are merged.
pub fn knockout_counts(
    samples: &[Sample],
    labels: &[usize],
    codec: &KnockoutCodec,
    rate: f64,
    classes: usize,
) -> Result<(Matrix, Matrix)> {
    let k = codec.num_confounders();
    if k > MAX_ENUMERATED_CONFOUNDERS {
        return Err(Error::Unsupported(format!("knockout expectation over {k} confounders")));
    }
    let masks: Vec<(u32, f64)> = (0..1u32 << k)
        .map(|m| {
            let dropped = m.count_ones() as i32;
            (m, rate.powi(dropped) * (1.0 - rate).powi(k as i32 - dropped))
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut enc = Vec::with_capacity(codec.encoded_dim());
    for (s, &y) in samples.iter().zip(labels) {
        for &(mask, w) in &masks {
            let z: Vec<Option<f64>> =
                s.z.iter().enumerate().map(|(j, v)| if mask >> j & 1 == 1 { None } else { *v }).collect();
            enc.clear();
            codec.encode_into(&z, &mut enc)?;
            let key: Vec<u64> = enc.iter().map(|v| v.to_bits()).collect();
            let next = index.len();
            let g = *index.entry(key).or_insert(next);
            if g == next {
                rows.extend_from_slice(&enc);
                counts.extend(std::iter::repeat_n(0.0, classes));
            }
            counts[g * classes + y] += w;
        }
    }
    let n = index.len();
    Ok((Matrix::from_vec(n, codec.encoded_dim(), rows)?, Matrix::from_vec(n, classes, counts)?))
}

const MAX_ENUMERATED_CONFOUNDERS: usize = 12;

/// Fits `g^e` for one labeled site by minimizing the NLL of its labels
/// given knockout-corrupted confounders, in expectation over the
/// corruption, with full-batch LBFGS.
pub fn fit_site_prevalence(site: &SiteDataset, codec: &KnockoutCodec, cfg: &TrainConfig) -> Result<PrevalenceModel> {
    cfg.validate()?;
    let samples = &site.samples;
    if samples.is_empty() {
        return data_err(format!("site {} has no samples", site.site));
    }
    let labels = labels_of(samples, cfg.num_classes)?;
    let mut present = vec![false; cfg.num_classes];
    labels.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        log::warn!("site {} has a single label class; its prevalence model is degenerate", site.site);
    }
    let mut rng = rng_for(cfg, &format!("prevalence/{}", site.site));
    let mut params = MlpParams::he_uniform(&cfg.sizes(codec.encoded_dim(), &cfg.prevalence_hidden), &mut rng)?;
    let (inputs, counts) = knockout_counts(samples, &labels, codec, cfg.knockout_rate, cfg.num_classes)?;
    let scale = 1.0 / samples.len() as f64;
    let outcome = fit_soft_targets(&mut params, &inputs, &counts, scale, &cfg.prevalence_lbfgs)?;
    if outcome.line_search_failed {
        log::debug!("prevalence fit for {} stopped on a failed line search", site.site);
    }
    Ok(PrevalenceModel { params, codec: codec.clone(), site: site.site.clone() })
}

/// Minimizes `-scale * sum t ln softmax(net(inputs))` over the network
/// parameters with LBFGS started from the current values.
pub(crate) fn fit_soft_targets(
    params: &mut MlpParams,
    inputs: &Matrix,
    targets: &Matrix,
    scale: f64,
    lbfgs: &LbfgsConfig,
) -> Result<crate::diffnet::LbfgsOutcome> {
    let mut work = params.clone();
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        work.assign_flat(theta)?;
        let g = backward(&work, inputs, &LossSpec::SoftTargets { targets, scale })?;
        Ok((g.loss, g.params.flatten()))
    };
    let outcome = lbfgs_minimize(objective, params.flatten(), lbfgs)?;
    if !outcome.value.is_finite() {
        return Err(Error::NonFinite { index: 0, context: format!("prevalence objective {}", outcome.value) });
    }
    params.assign_flat(&outcome.x)?;
    Ok(outcome)
}

/// Validation data for early stopping of the ratio network: adjusted
/// posteriors use the validation site's own prevalence model.
pub struct RatioValidation<'a> {
    pub data: &'a SiteDataset,
    pub prevalence: &'a PrevalenceModel,
}

/// Mean NLL of `Norm(g(z) * softmax(f(x, z)))` over labeled samples, with
/// `z` as given.
pub fn adjusted_nll(params: &MlpParams, codec: &KnockoutCodec, samples: &[Sample], prevalence: &PrevalenceModel) -> Result<f64> {
    let labels = labels_of(samples, params.output_dim())?;
    let inputs = ratio_inputs(codec, samples)?;
    let offsets = log_prevalence(prevalence, samples)?;
    let logits = mlp_forward(params, &inputs)?;
    let spec = LossSpec::CrossEntropy { labels: &labels, weights: None, offsets: Some(&offsets) };
    Ok(loss_and_logit_grad(&logits, &spec)?.0)
}

fn log_prevalence(prevalence: &PrevalenceModel, samples: &[Sample]) -> Result<Matrix> {
    let g = prevalence.probs_batch(samples)?;
    let rows: Vec<Vec<f64>> = g.iter().map(|p| p.as_slice().iter().map(|v| clamped_ln(*v)).collect()).collect();
    Matrix::from_rows(&rows)
}

/// Fits the ratio network on pooled training sites. Each sample's
/// confounders are knocked out afresh whenever it is visited, and the
/// frozen `g^e(z~)` of its own site enters the loss as a fixed log offset.
pub fn fit_ratio(
    sites: &[SiteDataset],
    prevalences: &BTreeMap<String, PrevalenceModel>,
    codec: &KnockoutCodec,
    cfg: &TrainConfig,
    validation: Option<RatioValidation<'_>>,
) -> Result<Fit<RatioModel>> {
    cfg.validate()?;
    if sites.is_empty() {
        return config_err("no training sites");
    }
    let mut site_models = Vec::with_capacity(sites.len());
    let mut pooled: Vec<(usize, &Sample, usize)> = Vec::new();
    for (s, site) in sites.iter().enumerate() {
        let g = prevalences
            .get(&site.site)
            .ok_or_else(|| Error::Config(format!("no prevalence model for training site {}", site.site)))?;
        site_models.push(g);
        for (i, sample) in site.samples.iter().enumerate() {
            pooled.push((s, sample, label_of(sample, i, cfg.num_classes)?));
        }
    }
    let dim = sites[0].feature_dim();
    if sites.iter().any(|s| s.feature_dim() != dim) {
        return data_err("training sites disagree on feature dimension");
    }
    let mut rng = rng_for(cfg, "ratio");
    let init = MlpParams::he_uniform(&cfg.sizes(dim + codec.encoded_dim(), &cfg.ratio_hidden), &mut rng)?;
    let mut cache: HashMap<(usize, Vec<u64>), Vec<f64>> = HashMap::new();
    let make_batch = |idx: &[usize], rng: &mut ChaCha8Rng| -> Result<Batch> {
        let width = dim + codec.encoded_dim();
        let mut inputs = Vec::with_capacity(idx.len() * width);
        let mut offsets = Vec::with_capacity(idx.len() * cfg.num_classes);
        let mut labels = Vec::with_capacity(idx.len());
        let mut enc = Vec::with_capacity(codec.encoded_dim());
        for &i in idx {
            let (s, sample, y) = pooled[i];
            let z = knockout_corrupt(std::slice::from_ref(&sample.z), cfg.knockout_rate, rng)?.remove(0);
            enc.clear();
            codec.encode_into(&z, &mut enc)?;
            inputs.extend_from_slice(&sample.x);
            inputs.extend_from_slice(&enc);
            let key = (s, enc.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            if !cache.contains_key(&key) {
                let g = site_models[s].probs(&z)?;
                cache.insert(key.clone(), g.as_slice().iter().map(|v| clamped_ln(*v)).collect());
            }
            offsets.extend_from_slice(&cache[&key]);
            labels.push(y);
        }
        Ok(Batch {
            inputs: Matrix::from_vec(idx.len(), width, inputs)?,
            targets: Targets { labels, offsets: Some(Matrix::from_vec(idx.len(), cfg.num_classes, offsets)?) },
        })
    };
    let validator = match &validation {
        Some(v) => {
            let labels = labels_of(&v.data.samples, cfg.num_classes)?;
            let inputs = ratio_inputs(codec, &v.data.samples)?;
            let g = v.prevalence.probs_batch(&v.data.samples)?;
            Some(move |p: &MlpParams| -> Result<Eval> {
                let f = softmax_rows(&mlp_forward(p, &inputs)?);
                let post: Vec<ProbVector> = f
                    .iter_rows()
                    .zip(&g)
                    .map(|(f, g)| adjusted_posterior(f, g.as_slice()))
                    .collect::<Result<_>>()?;
                validation_eval(&post, &labels, cfg.positive_class)
            })
        }
        None => None,
    };
    let mut log = Vec::new();
    let (params, best_epoch) = run_training(init, pooled.len(), cfg, &mut rng, "ratio", make_batch, validator, &mut log)?;
    Ok(Fit { model: RatioModel::new(params, codec.clone()), log, best_epoch })
}

/// Per-class scale and bias of the ratio logits minimizing validation NLL
/// of the adjusted posterior, found by LBFGS from the identity. Falls back
/// to the identity whenever the optimum found is not strictly better.
pub fn fit_calibration(
    ratio: &RatioModel,
    validation: &SiteDataset,
    prevalence: &PrevalenceModel,
    lbfgs: &LbfgsConfig,
) -> Result<CalibrationParams> {
    if validation.is_empty() {
        return data_err("empty validation set");
    }
    let k = ratio.params.output_dim();
    let labels = labels_of(&validation.samples, k)?;
    let raw = ratio.raw_logits(&validation.samples)?;
    let offsets = log_prevalence(prevalence, &validation.samples)?;
    let n = raw.rows();
    let objective = |wb: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (w, b) = wb.split_at(k);
        let mut z = raw.clone();
        for r in 0..n {
            for (c, v) in z.row_mut(r).iter_mut().enumerate() {
                *v = w[c] * *v + b[c];
            }
        }
        let spec = LossSpec::CrossEntropy { labels: &labels, weights: None, offsets: Some(&offsets) };
        let (loss, dz) = loss_and_logit_grad(&z, &spec)?;
        let mut grad = vec![0.0; 2 * k];
        for r in 0..n {
            for c in 0..k {
                grad[c] += dz.get(r, c) * raw.get(r, c);
                grad[k + c] += dz.get(r, c);
            }
        }
        Ok((loss, grad))
    };
    let identity = CalibrationParams::identity(k);
    let init: Vec<f64> = identity.scale.iter().chain(&identity.bias).copied().collect();
    let outcome = lbfgs_minimize(objective, init, lbfgs)?;
    let start = outcome.trace[0];
    if !(outcome.value < start) || outcome.x.iter().any(|v| !v.is_finite()) {
        return Ok(identity);
    }
    let (w, b) = outcome.x.split_at(k);
    Ok(CalibrationParams { scale: w.to_vec(), bias: b.to_vec() })
}

/// Pooled cross-entropy baseline on `x` (`use_z = false`) or on
/// `[x, encode(z)]` with observed confounders; site identity is ignored.
pub fn fit_erm(
    sites: &[SiteDataset],
    cfg: &TrainConfig,
    use_z: bool,
    codec: &KnockoutCodec,
    validation: Option<&SiteDataset>,
) -> Result<Fit<ErmModel>> {
    cfg.validate()?;
    let samples: Vec<Sample> = sites.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    if samples.is_empty() {
        return data_err("no training samples");
    }
    let labels = labels_of(&samples, cfg.num_classes)?;
    let all_inputs = erm_inputs(codec, use_z, &samples)?;
    let name = if use_z { "erm_z" } else { "erm" };
    let mut rng = rng_for(cfg, name);
    let init = MlpParams::he_uniform(&cfg.sizes(all_inputs.cols(), &cfg.ratio_hidden), &mut rng)?;
    let width = all_inputs.cols();
    let make_batch = |idx: &[usize], _: &mut ChaCha8Rng| -> Result<Batch> {
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(all_inputs.row(i));
        }
        Ok(Batch {
            inputs: Matrix::from_vec(idx.len(), width, data)?,
            targets: Targets { labels: idx.iter().map(|&i| labels[i]).collect(), offsets: None },
        })
    };
    let validator = match validation {
        Some(v) => {
            let vl = labels_of(&v.samples, cfg.num_classes)?;
            let vin = erm_inputs(codec, use_z, &v.samples)?;
            Some(move |p: &MlpParams| -> Result<Eval> {
                let probs = softmax_rows(&mlp_forward(p, &vin)?);
                let probs: Vec<ProbVector> = probs.iter_rows().map(|r| ProbVector::new(r.to_vec())).collect::<Result<_>>()?;
                validation_eval(&probs, &vl, cfg.positive_class)
            })
        }
        None => None,
    };
    let mut log = Vec::new();
    let (params, best_epoch) = run_training(init, samples.len(), cfg, &mut rng, name, make_batch, validator, &mut log)?;
    Ok(Fit { model: ErmModel { params, codec: codec.clone(), use_z }, log, best_epoch })
}

/// Fits prevalences for the training and validation sites, the ratio
/// network with early stopping on validation F1, then its calibration.
/// Baselines are fitted when requested.
pub fn fit_all(
    train_sites: &[SiteDataset],
    validation: &SiteDataset,
    codec: &KnockoutCodec,
    cfg: &TrainConfig,
    with_erm: bool,
    with_erm_z: bool,
) -> Result<FittedModels> {
    let mut prevalences = BTreeMap::new();
    for site in train_sites.iter().chain(std::iter::once(validation)) {
        if prevalences.contains_key(&site.site) {
            return config_err(format!("duplicate site id {}", site.site));
        }
        prevalences.insert(site.site.clone(), fit_site_prevalence(site, codec, cfg)?);
    }
    let val_g = &prevalences[&validation.site];
    let fit = fit_ratio(train_sites, &prevalences, codec, cfg, Some(RatioValidation { data: validation, prevalence: val_g }))?;
    let mut ratio = fit.model;
    let mut log = fit.log;
    let before = calibrated_nll(&ratio, validation, val_g)?;
    ratio.calibration = fit_calibration(&ratio, validation, val_g, &cfg.calibration)?;
    let after = calibrated_nll(&ratio, validation, val_g)?;
    let mut baselines = BTreeMap::new();
    for (wanted, use_z, name) in [(with_erm, false, "ERM"), (with_erm_z, true, "ERM_Z")] {
        if wanted {
            let f = fit_erm(train_sites, cfg, use_z, codec, Some(validation))?;
            log.extend(f.log);
            baselines.insert(name.to_string(), f.model);
        }
    }
    Ok(FittedModels { ratio, prevalences, codec: codec.clone(), baselines, log, calibration_nll: (before, after), ratio_best_epoch: fit.best_epoch })
}

/// NLL of the calibrated adjusted posterior on labeled data.
pub fn calibrated_nll(ratio: &RatioModel, data: &SiteDataset, prevalence: &PrevalenceModel) -> Result<f64> {
    let labels = labels_of(&data.samples, ratio.params.output_dim())?;
    let post = crate::model::predict_batch(&data.samples, ratio, prevalence)?;
    crate::diffnet::nll_loss(&post, &labels, None)
}

/// Argmax labels of a list of distributions.
pub fn predictions(probs: &[ProbVector]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p.as_slice())).collect()
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
