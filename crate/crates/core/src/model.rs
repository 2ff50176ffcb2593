//! The two-part predictor: a site-invariant ratio network over `(x, z)`
//! and per-site prevalence networks over `z`, joined by renormalized
//! elementwise products. Confounders pass through a knockout codec that
//! reserves an out-of-support placeholder for missing values.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::diffnet::{mlp_forward, Matrix, MlpParams};
use crate::error::{config_err, data_err, Error, Result};
use crate::prob::{softmax, softmax_in_place, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfounderSpec {
    /// Values `0..cardinality`, one-hot over `cardinality + 1` slots; the
    /// last slot is the placeholder.
    Categorical { cardinality: usize },
    /// Observed range `[lo, hi]` maps affinely onto `[1, 2]`; the
    /// placeholder is 0.
    Continuous { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutCodec {
    specs: Vec<ConfounderSpec>,
}

impl KnockoutCodec {
    pub fn new(specs: Vec<ConfounderSpec>) -> Result<Self> {
        for (i, s) in specs.iter().enumerate() {
            match *s {
                ConfounderSpec::Categorical { cardinality } if cardinality == 0 => {
                    return config_err(format!("confounder {i}: cardinality must be positive"))
                }
                ConfounderSpec::Continuous { lo, hi } if !(lo.is_finite() && hi.is_finite() && hi > lo) => {
                    return config_err(format!("confounder {i}: invalid range [{lo}, {hi}]"))
                }
                _ => {}
            }
        }
        Ok(Self { specs })
    }

    /// One binary categorical confounder.
    pub fn binary() -> Self {
        Self { specs: vec![ConfounderSpec::Categorical { cardinality: 2 }] }
    }

    pub fn specs(&self) -> &[ConfounderSpec] {
        &self.specs
    }

    pub fn num_confounders(&self) -> usize {
        self.specs.len()
    }

    pub fn encoded_dim(&self) -> usize {
        self.specs
            .iter()
            .map(|s| match s {
                ConfounderSpec::Categorical { cardinality } => cardinality + 1,
                ConfounderSpec::Continuous { .. } => 1,
            })
            .sum()
    }

    /// 1-based slot of a categorical value; missing maps to `cardinality + 1`.
    pub fn categorical_index(value: Option<f64>, cardinality: usize) -> Result<usize> {
        match value {
            None => Ok(cardinality + 1),
            Some(v) if v >= 0.0 && v.fract() == 0.0 && (v as usize) < cardinality => Ok(v as usize + 1),
            Some(v) => data_err(format!("categorical value {v} outside 0..{cardinality}")),
        }
    }

    /// Affine map of `[lo, hi]` onto `[1, 2]`, clamping out-of-range values.
    pub fn remap_continuous(value: f64, lo: f64, hi: f64) -> f64 {
        1.0 + (value.clamp(lo, hi) - lo) / (hi - lo)
    }

    pub fn unmap_continuous(encoded: f64, lo: f64, hi: f64) -> f64 {
        lo + (encoded - 1.0) * (hi - lo)
    }

    pub fn encode_into(&self, z: &[Option<f64>], out: &mut Vec<f64>) -> Result<()> {
        if z.len() != self.specs.len() {
            return data_err(format!("expected {} confounders, got {}", self.specs.len(), z.len()));
        }
        for (spec, value) in self.specs.iter().zip(z) {
            match *spec {
                ConfounderSpec::Categorical { cardinality } => {
                    let slot = Self::categorical_index(*value, cardinality)?;
                    let start = out.len();
                    out.resize(start + cardinality + 1, 0.0);
                    out[start + slot - 1] = 1.0;
                }
                ConfounderSpec::Continuous { lo, hi } => {
                    out.push(value.map_or(0.0, |v| Self::remap_continuous(v, lo, hi)));
                }
            }
        }
        Ok(())
    }

    pub fn encode_z(&self, z: &[Option<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.encoded_dim());
        self.encode_into(z, &mut out)?;
        Ok(out)
    }

    /// Every joint value of the confounders; continuous confounders cannot
    /// be enumerated.
    pub fn enumerate_support(&self) -> Result<Vec<Vec<Option<f64>>>> {
        let mut out: Vec<Vec<Option<f64>>> = vec![vec![]];
        for spec in &self.specs {
            let ConfounderSpec::Categorical { cardinality } = *spec else {
                return Err(Error::Unsupported("cannot enumerate a continuous confounder".into()));
            };
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..cardinality).map(move |v| {
                        let mut p = prefix.clone();
                        p.push(Some(v as f64));
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }

    /// Fits continuous ranges from observed values, keeping categorical specs.
    pub fn fit_ranges<'a, I>(&self, zs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Option<f64>]>,
    {
        let mut bounds: Vec<(f64, f64)> = vec![(f64::INFINITY, f64::NEG_INFINITY); self.specs.len()];
        for z in zs {
            for (b, v) in bounds.iter_mut().zip(z).filter_map(|(b, v)| v.map(|v| (b, v))) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        let specs = self
            .specs
            .iter()
            .zip(bounds)
            .map(|(s, (lo, hi))| match s {
                ConfounderSpec::Continuous { .. } if hi > lo => ConfounderSpec::Continuous { lo, hi },
                other => *other,
            })
            .collect();
        Self::new(specs)
    }
}

/// Replaces each confounder of each row by missing with probability `rate`.
pub fn knockout_corrupt<R: Rng + ?Sized>(batch: &[Vec<Option<f64>>], rate: f64, rng: &mut R) -> Result<Vec<Vec<Option<f64>>>> {
    if !(0.0..=1.0).contains(&rate) {
        return config_err(format!("knockout rate {rate} outside [0, 1]"));
    }
    Ok(batch
        .iter()
        .map(|z| z.iter().map(|v| if rng.random::<f64>() < rate { None } else { *v }).collect())
        .collect())
}

/// `Norm(g * f)`. `ratio` only needs to be correct up to a positive scale.
pub fn adjusted_posterior(ratio: &[f64], prevalence: &[f64]) -> Result<ProbVector> {
    if ratio.len() != prevalence.len() {
        return config_err("ratio and prevalence lengths differ");
    }
    ProbVector::normalize(ratio.iter().zip(prevalence).map(|(f, g)| f * g).collect())
}

/// Per-class affine map of ratio logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CalibrationParams {
    pub fn identity(classes: usize) -> Self {
        Self { scale: vec![1.0; classes], bias: vec![0.0; classes] }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.iter().all(|w| *w == 1.0) && self.bias.iter().all(|b| *b == 0.0)
    }
}

pub fn apply_calibration(logits: &[f64], calib: &CalibrationParams) -> Vec<f64> {
    logits.iter().zip(&calib.scale).zip(&calib.bias).map(|((l, w), b)| w * l + b).collect()
}

/// Anything that yields ratio probabilities `softmax(f(x, z))` per sample;
/// a missing confounder takes the knockout placeholder path.
pub trait RatioScorer {
    fn num_classes(&self) -> usize;

    fn ratio_probs(&self, samples: &[Sample]) -> Result<Vec<ProbVector>>;
}

fn encode_inputs(codec: &KnockoutCodec, samples: &[Sample], with_x: bool) -> Result<Matrix> {
    let dim = if with_x { samples.first().map_or(0, |s| s.x.len()) } else { 0 } + codec.encoded_dim();
    let mut data = Vec::with_capacity(samples.len() * dim);
    for (i, s) in samples.iter().enumerate() {
        if with_x {
            data.extend_from_slice(&s.x);
        }
        codec.encode_into(&s.z, &mut data)?;
        if data.len() != (i + 1) * dim {
            return data_err(format!("sample {i} has inconsistent feature dimension"));
        }
    }
    Matrix::from_vec(samples.len(), dim, data)
}

/// Network rows `[x, encode(z)]` for each sample.
pub fn ratio_inputs(codec: &KnockoutCodec, samples: &[Sample]) -> Result<Matrix> {
    encode_inputs(codec, samples, true)
}

/// Network rows `encode(z)` for each sample.
pub fn prevalence_inputs(codec: &KnockoutCodec, samples: &[Sample]) -> Result<Matrix> {
    encode_inputs(codec, samples, false)
}

/// The site-invariant ratio network, with its calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub params: MlpParams,
    pub codec: KnockoutCodec,
    pub calibration: CalibrationParams,
}

impl RatioModel {
    pub fn new(params: MlpParams, codec: KnockoutCodec) -> Self {
        let calibration = CalibrationParams::identity(params.output_dim());
        Self { params, codec, calibration }
    }

    /// Uncalibrated logits.
    pub fn raw_logits(&self, samples: &[Sample]) -> Result<Matrix> {
        mlp_forward(&self.params, &ratio_inputs(&self.codec, samples)?)
    }

    /// Calibrated logits.
    pub fn logits(&self, samples: &[Sample]) -> Result<Matrix> {
        let mut m = self.raw_logits(samples)?;
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let cal = apply_calibration(row, &self.calibration);
            row.copy_from_slice(&cal);
        }
        Ok(m)
    }
}

impl RatioScorer for RatioModel {
    fn num_classes(&self) -> usize {
        self.params.output_dim()
    }

    fn ratio_probs(&self, samples: &[Sample]) -> Result<Vec<ProbVector>> {
        let logits = self.logits(samples)?;
        Ok(logits.iter_rows().map(softmax).collect())
    }
}

/// Estimator of one site's `P(Y | Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceModel {
    pub params: MlpParams,
    pub codec: KnockoutCodec,
    pub site: String,
}

impl PrevalenceModel {
    pub fn probs(&self, z: &[Option<f64>]) -> Result<ProbVector> {
        let enc = self.codec.encode_z(z)?;
        let logits = mlp_forward(&self.params, &Matrix::from_vec(1, enc.len(), enc)?)?;
        Ok(softmax(logits.row(0)))
    }

    /// Probabilities for every sample, evaluating each distinct encoded
    /// confounder value once.
    pub fn probs_batch(&self, samples: &[Sample]) -> Result<Vec<ProbVector>> {
        let inputs = prevalence_inputs(&self.codec, samples)?;
        let groups = group_rows(&inputs);
        let uniq = Matrix::from_rows(&groups.representatives(&inputs))?;
        let mut logits = mlp_forward(&self.params, &uniq)?;
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        Ok(groups.assignment.iter().map(|&g| ProbVector::new(logits.row(g).to_vec())).collect::<Result<_>>()?)
    }

    /// Exact linear model for a single categorical confounder: `rows[k]`
    /// is the class distribution returned for slot `k + 1` (the last row is
    /// the placeholder).
    pub fn from_categorical_table(site: &str, codec: &KnockoutCodec, rows: &[ProbVector]) -> Result<Self> {
        if codec.num_confounders() != 1 || codec.encoded_dim() != rows.len() {
            return config_err("table needs one row per slot of a single categorical confounder");
        }
        let classes = rows[0].len();
        let mut weight = Matrix::zeros(rows.len(), classes);
        for (k, r) in rows.iter().enumerate() {
            for c in 0..classes {
                weight.set(k, c, crate::prob::clamped_ln(r[c]));
            }
        }
        let params = MlpParams::from_layers(vec![crate::diffnet::Dense { weight, bias: vec![0.0; classes] }])?;
        Ok(Self { params, codec: codec.clone(), site: site.to_string() })
    }

    /// The knockout path: the site's marginal `P(Y)`.
    pub fn marginal(&self) -> Result<ProbVector> {
        self.probs(&vec![None; self.codec.num_confounders()])
    }
}

/// Assignment of matrix rows to groups of bitwise-identical rows.
#[derive(Debug, Clone)]
pub(crate) struct RowGroups {
    /// Group index of every row.
    pub assignment: Vec<usize>,
    /// First row of every group.
    pub first_row: Vec<usize>,
}

impl RowGroups {
    pub fn representatives<'a>(&self, m: &'a Matrix) -> Vec<&'a [f64]> {
        self.first_row.iter().map(|&r| m.row(r)).collect()
    }
}

pub(crate) fn group_rows(m: &Matrix) -> RowGroups {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut assignment = Vec::with_capacity(m.rows());
    let mut first_row = Vec::new();
    for r in 0..m.rows() {
        let key: Vec<u64> = m.row(r).iter().map(|v| v.to_bits()).collect();
        let next = first_row.len();
        let g = *index.entry(key).or_insert(next);
        if g == next {
            first_row.push(r);
        }
        assignment.push(g);
    }
    RowGroups { assignment, first_row }
}

/// Label and adjusted posterior for one input. A missing confounder uses
/// the placeholder for both networks; ties go to the lowest class index.
pub fn predict(
    x: &[f64],
    z: &[Option<f64>],
    ratio: &dyn RatioScorer,
    prevalence: &PrevalenceModel,
) -> Result<(usize, ProbVector)> {
    let sample = Sample { x: x.to_vec(), y: None, z: z.to_vec() };
    let f = ratio.ratio_probs(std::slice::from_ref(&sample))?.remove(0);
    let g = prevalence.probs(z)?;
    let post = adjusted_posterior(f.as_slice(), g.as_slice())?;
    Ok((post.argmax(), post))
}

/// Adjusted posteriors for a batch.
pub fn predict_batch(
    samples: &[Sample],
    ratio: &dyn RatioScorer,
    prevalence: &PrevalenceModel,
) -> Result<Vec<ProbVector>> {
    let f = ratio.ratio_probs(samples)?;
    let g = prevalence.probs_batch(samples)?;
    f.iter().zip(&g).map(|(f, g)| adjusted_posterior(f.as_slice(), g.as_slice())).collect()
}

/// Serialized form of a fitted network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub site: Option<String>,
    pub codec: KnockoutCodec,
    pub layer_shapes: Vec<[usize; 2]>,
    pub params: Vec<f64>,
    pub calibration: Option<CalibrationParams>,
    pub manifest_hash: String,
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        site: Option<String>,
        params: &MlpParams,
        codec: &KnockoutCodec,
        calibration: Option<CalibrationParams>,
        manifest_hash: &str,
    ) -> Self {
        Self {
            kind: kind.to_string(),
            site,
            codec: codec.clone(),
            layer_shapes: params.layers.iter().map(|l| [l.input_dim(), l.output_dim()]).collect(),
            params: params.flatten(),
            calibration,
            manifest_hash: manifest_hash.to_string(),
        }
    }

    pub fn to_params(&self) -> Result<MlpParams> {
        let layers = self
            .layer_shapes
            .iter()
            .map(|&[i, o]| crate::diffnet::Dense { weight: Matrix::zeros(i, o), bias: vec![0.0; o] })
            .collect();
        let mut p = MlpParams::from_layers(layers)?;
        p.assign_flat(&self.params)?;
        Ok(p)
    }

    pub fn from_ratio(model: &RatioModel, manifest_hash: &str) -> Self {
        Self::from_params("ratio", None, &model.params, &model.codec, Some(model.calibration.clone()), manifest_hash)
    }

    pub fn from_prevalence(model: &PrevalenceModel, manifest_hash: &str) -> Self {
        Self::from_params("prevalence", Some(model.site.clone()), &model.params, &model.codec, None, manifest_hash)
    }

    pub fn into_ratio(self) -> Result<RatioModel> {
        let params = self.to_params()?;
        let calibration = self.calibration.unwrap_or_else(|| CalibrationParams::identity(params.output_dim()));
        Ok(RatioModel { params, codec: self.codec, calibration })
    }

    pub fn into_prevalence(self) -> Result<PrevalenceModel> {
        let params = self.to_params()?;
        Ok(PrevalenceModel { params, codec: self.codec, site: self.site.unwrap_or_default() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
