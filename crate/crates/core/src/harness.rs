//! End-to-end experiments on synthetic multi-site data: generate sites,
//! fit every requested method, score each test site and write results.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{copa_direct, copa_star_mc, em_conditional_prevalence, em_conditional_prevalence_from, em_marginal_prevalence, EmConfig, EmTrace};
use crate::data::SiteDataset;
use crate::diffnet::nll_loss;
use crate::error::{config_err, Error, Result};
use crate::metrics::{f1_score, summarize, write_results, write_summary, MetricsRow, SummaryRow};
use crate::model::{predict_batch, Checkpoint, KnockoutCodec, PrevalenceModel};
use crate::prob::ProbVector;
use crate::sem::{derive_seed, generate_site, EmissionConfig, SemConfig, SemVariant, DEFAULT_ALPHA};
use crate::train::{fit_all, fit_erm, predictions, write_train_log, ErmModel, FittedModels, TrainConfig, TrainLogRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "ERM_Z")]
    ErmZ,
    #[serde(rename = "CoPA")]
    Copa,
    #[serde(rename = "CoPA_star")]
    CopaStar,
    #[serde(rename = "GPA")]
    Gpa,
    #[serde(rename = "GPA_star")]
    GpaStar,
}

impl Method {
    pub const ALL: [Method; 6] = [Self::Erm, Self::ErmZ, Self::Copa, Self::CopaStar, Self::Gpa, Self::GpaStar];

    pub fn name(self) -> &'static str {
        match self {
            Self::Erm => "ERM",
            Self::ErmZ => "ERM_Z",
            Self::Copa => "CoPA",
            Self::CopaStar => "CoPA_star",
            Self::Gpa => "GPA",
            Self::GpaStar => "GPA_star",
        }
    }

    /// Whether the method reads test-site labels.
    pub fn oracle_access(self) -> bool {
        matches!(self, Self::Copa | Self::CopaStar)
    }

    fn needs_ratio(self) -> bool {
        !matches!(self, Self::Erm | Self::ErmZ)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub name: String,
    pub role: SiteRole,
    pub beta: f64,
    pub n: usize,
}

impl SiteConfig {
    pub fn new(name: &str, role: SiteRole, beta: f64, n: usize) -> Self {
        Self { name: name.to_string(), role, beta, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variant: SemVariant,
    pub alpha: f64,
    pub sites: Vec<SiteConfig>,
    pub emission: EmissionConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub em: EmConfig,
    pub out_dir: Option<PathBuf>,
    /// Fill the `seconds` column; off by default so results stay
    /// byte-identical across runs.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: SemVariant::Confounded,
            alpha: DEFAULT_ALPHA,
            sites: vec![
                SiteConfig::new("train_a", SiteRole::Train, 0.9, 10_000),
                SiteConfig::new("train_b", SiteRole::Train, 0.7, 10_000),
                SiteConfig::new("val", SiteRole::Validation, 0.5, 500),
                SiteConfig::new("test", SiteRole::Test, 0.3, 1_000),
            ],
            emission: EmissionConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            em: EmConfig::default(),
            out_dir: None,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let count = |r: SiteRole| self.sites.iter().filter(|s| s.role == r).count();
        if count(SiteRole::Train) == 0 {
            return config_err("need at least one training site");
        }
        if count(SiteRole::Validation) != 1 {
            return config_err("need exactly one validation site");
        }
        if count(SiteRole::Test) == 0 {
            return config_err("need at least one test site");
        }
        let mut names: Vec<&str> = self.sites.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return config_err("site names must be unique");
        }
        if self.seeds.is_empty() {
            return config_err("need at least one seed");
        }
        if self.methods.is_empty() {
            return config_err("need at least one method");
        }
        for s in &self.sites {
            SemConfig { variant: self.variant, beta: s.beta, alpha: self.alpha, n: s.n, seed: 0 }.validate()?;
        }
        self.emission.validate()?;
        self.train.validate()?;
        self.em.validate()?;
        if let Some(w) = &self.em.warm_start_site {
            if !self.sites.iter().any(|s| &s.name == w && s.role != SiteRole::Test) {
                return config_err(format!("warm-start site {w} is not a training or validation site"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    fn sites_with(&self, role: SiteRole) -> impl Iterator<Item = &SiteConfig> {
        self.sites.iter().filter(move |s| s.role == role)
    }
}

/// Generated data for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Vec<SiteDataset>,
    pub validation: SiteDataset,
    pub test: Vec<SiteDataset>,
}

fn site_sem(cfg: &ExperimentConfig, s: &SiteConfig, seed: u64) -> SemConfig {
    SemConfig { variant: cfg.variant, beta: s.beta, alpha: cfg.alpha, n: s.n, seed: derive_seed(seed, &format!("site/{}", s.name)) }
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    seed: u64,
    emission: &'a EmissionConfig,
    sites: BTreeMap<String, SemConfig>,
}

pub fn generate_seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let make = |s: &SiteConfig| generate_site(&s.name, &site_sem(cfg, s, seed), &cfg.emission);
    let gen = |role| cfg.sites_with(role).map(make).collect::<Result<Vec<_>>>();
    Ok(SeedData {
        train: gen(SiteRole::Train)?,
        validation: gen(SiteRole::Validation)?.remove(0),
        test: gen(SiteRole::Test)?,
    })
}

/// Writes every site of every seed as `seed{n}/{site}.csv`.
pub fn write_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir)?;
        let d = generate_seed_data(cfg, seed)?;
        for site in d.train.iter().chain(std::iter::once(&d.validation)).chain(&d.test) {
            site.write_csv(&dir.join(format!("{}.csv", site.site)))?;
        }
        let sidecar = DatasetManifest {
            seed,
            emission: &cfg.emission,
            sites: cfg.sites.iter().map(|s| (s.name.clone(), site_sem(cfg, s, seed))).collect(),
        };
        std::fs::write(dir.join("datasets.json"), serde_json::to_string_pretty(&sidecar)?)?;
    }
    Ok(())
}

/// A `(method, site, seed)` cell that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub site: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Sorted by method, site, seed.
    pub rows: Vec<MetricsRow>,
    /// Per-seed fitting diagnostics, sorted by seed.
    pub diagnostics: Vec<SeedDiagnostics>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
    pub config_hash: String,
}

impl ExperimentOutcome {
    pub fn mean_f1(&self, method: Method, site: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method.name() && s.site == site).map(|s| s.mean_f1)
    }

    pub fn f1s(&self, method: Method, site: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method.name() && r.site == site).map(|r| r.f1).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    oracle_access: BTreeMap<&'static str, bool>,
    failures: &'a [CellFailure],
}

/// Facts about one seed's fitted ratio network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub ratio_best_epoch: Option<usize>,
    pub validation_nll_uncalibrated: f64,
    pub validation_nll_calibrated: f64,
}

struct SeedOutput {
    rows: Vec<MetricsRow>,
    failures: Vec<CellFailure>,
    diagnostics: Option<SeedDiagnostics>,
}

/// Runs every seed (in parallel across seeds, sequentially within one)
/// and, when an output directory is configured, writes results,
/// summary, manifest, logs, checkpoints and EM traces. Stage failures are
/// recorded per cell; only invalid configuration or unwritable output
/// return an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    if let Some(out) = &cfg.out_dir {
        std::fs::create_dir_all(out)?;
    }
    let outputs: Vec<Result<SeedOutput>> = cfg.seeds.par_iter().map(|&seed| run_seed(cfg, seed, &hash)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut diagnostics = Vec::new();
    for o in outputs {
        let o = o?;
        rows.extend(o.rows);
        failures.extend(o.failures);
        diagnostics.extend(o.diagnostics);
    }
    diagnostics.sort_by_key(|d| d.seed);
    let key = |m: &str, s: &str, seed: u64| (m.to_string(), s.to_string(), seed);
    rows.sort_by(|a, b| key(&a.method, &a.site, a.seed).cmp(&key(&b.method, &b.site, b.seed)));
    failures.sort_by(|a, b| key(&a.method, &a.site, a.seed).cmp(&key(&b.method, &b.site, b.seed)));
    let summary = if rows.is_empty() { Vec::new() } else { summarize(&rows)? };
    if let Some(out) = &cfg.out_dir {
        write_results(&out.join("results.csv"), &rows)?;
        if !summary.is_empty() {
            write_summary(&out.join("summary.csv"), &summary)?;
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &hash,
            config: cfg,
            oracle_access: cfg.methods.iter().map(|m| (m.name(), m.oracle_access())).collect(),
            failures: &failures,
        };
        std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(ExperimentOutcome { rows, diagnostics, failures, summary, config_hash: hash })
}

fn fail(method: Method, site: &str, seed: u64, e: &Error) -> CellFailure {
    CellFailure { method: method.name().into(), site: site.into(), seed, error: e.to_string() }
}

fn score(probs: &[ProbVector], test: &SiteDataset, positive: usize) -> Result<(f64, f64)> {
    let labels = test.labels().ok_or_else(|| Error::Data(format!("test site {} is unlabeled", test.site)))?;
    Ok((f1_score(&predictions(probs), &labels, positive)?, nll_loss(probs, &labels, None)?))
}

fn mean_positive(g: &[ProbVector], positive: usize) -> f64 {
    g.iter().map(|p| p[positive]).sum::<f64>() / g.len() as f64
}

/// Output of one method on one test site, before scoring.
struct MethodOutput {
    probs: Vec<ProbVector>,
    p_y1_hat: Option<f64>,
    trace: Option<EmTrace>,
    prevalence: Option<PrevalenceModel>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, hash: &str) -> Result<SeedOutput> {
    log::info!("seed {seed}: generating data");
    let mut out = SeedOutput { rows: Vec::new(), failures: Vec::new(), diagnostics: None };
    let dir = cfg.out_dir.as_ref().map(|d| d.join(format!("seed{seed}")));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d.join("checkpoints"))?;
        std::fs::create_dir_all(d.join("traces"))?;
    }
    let test_names: Vec<&str> = cfg.sites_with(SiteRole::Test).map(|s| s.name.as_str()).collect();
    let fail_all = |out: &mut SeedOutput, methods: &[Method], e: &Error| {
        for &m in methods {
            for s in &test_names {
                out.failures.push(fail(m, s, seed, e));
            }
        }
    };
    let data = match generate_seed_data(cfg, seed) {
        Ok(d) => d,
        Err(e) => {
            fail_all(&mut out, &cfg.methods, &e);
            return Ok(out);
        }
    };
    let codec = KnockoutCodec::binary();
    let train_cfg = TrainConfig { seed: derive_seed(seed, "train"), ..cfg.train.clone() };
    let em_cfg = EmConfig { seed: derive_seed(seed, "em"), ..cfg.em.clone() };
    let positive = train_cfg.positive_class;
    let mut log: Vec<TrainLogRow> = Vec::new();

    let ratio_methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.needs_ratio()).collect();
    let fitted: Option<FittedModels> = if ratio_methods.is_empty() {
        None
    } else {
        log::info!("seed {seed}: fitting prevalence and ratio networks");
        match fit_all(&data.train, &data.validation, &codec, &train_cfg, false, false) {
            Ok(f) => {
                log.extend(f.log.iter().cloned());
                out.diagnostics = Some(SeedDiagnostics {
                    seed,
                    ratio_best_epoch: f.ratio_best_epoch,
                    validation_nll_uncalibrated: f.calibration_nll.0,
                    validation_nll_calibrated: f.calibration_nll.1,
                });
                if let Some(d) = &dir {
                    Checkpoint::from_ratio(&f.ratio, hash).save(&d.join("checkpoints/ratio.json"))?;
                    for (site, g) in &f.prevalences {
                        Checkpoint::from_prevalence(g, hash).save(&d.join(format!("checkpoints/prevalence_{site}.json")))?;
                    }
                }
                Some(f)
            }
            Err(e) => {
                fail_all(&mut out, &ratio_methods, &e);
                None
            }
        }
    };

    let mut baselines: BTreeMap<Method, ErmModel> = BTreeMap::new();
    for m in [Method::Erm, Method::ErmZ] {
        if !cfg.methods.contains(&m) {
            continue;
        }
        log::info!("seed {seed}: fitting {m}");
        match fit_erm(&data.train, &train_cfg, m == Method::ErmZ, &codec, Some(&data.validation)) {
            Ok(f) => {
                log.extend(f.log);
                if let Some(d) = &dir {
                    let c = Checkpoint::from_params(&m.name().to_lowercase(), None, &f.model.params, &codec, None, hash);
                    c.save(&d.join(format!("checkpoints/{}.json", m.name().to_lowercase())))?;
                }
                baselines.insert(m, f.model);
            }
            Err(e) => fail_all(&mut out, &[m], &e),
        }
    }
    if let Some(d) = &dir {
        write_train_log(&d.join("train_log.csv"), &log)?;
    }

    for test in &data.test {
        for &m in &cfg.methods {
            if (m.needs_ratio() && fitted.is_none()) || (!m.needs_ratio() && !baselines.contains_key(&m)) {
                continue;
            }
            let started = Instant::now();
            let result = run_method(m, test, fitted.as_ref(), &baselines, &codec, &train_cfg, &em_cfg, positive)
                .and_then(|o| score(&o.probs, test, positive).map(|s| (o, s)));
            match result {
                Ok((o, (f1, nll))) => {
                    let seconds = cfg.record_timing.then(|| started.elapsed().as_secs_f64());
                    if let Some(d) = &dir {
                        let stem = format!("{}_{}", m.name(), test.site);
                        if let Some(t) = &o.trace {
                            t.write_csv(&d.join(format!("traces/{stem}.csv")))?;
                        }
                        if let Some(g) = &o.prevalence {
                            Checkpoint::from_prevalence(g, hash).save(&d.join(format!("checkpoints/{stem}.json")))?;
                        }
                    }
                    out.rows.push(MetricsRow {
                        method: m.name().into(),
                        site: test.site.clone(),
                        seed,
                        f1,
                        nll,
                        p_y1_hat: o.p_y1_hat,
                        seconds,
                    });
                }
                Err(e) => {
                    log::warn!("seed {seed}: {m} on {} failed: {e}", test.site);
                    out.failures.push(fail(m, &test.site, seed, &e));
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    method: Method,
    test: &SiteDataset,
    fitted: Option<&FittedModels>,
    baselines: &BTreeMap<Method, ErmModel>,
    codec: &KnockoutCodec,
    train_cfg: &TrainConfig,
    em_cfg: &EmConfig,
    positive: usize,
) -> Result<MethodOutput> {
    let plain = |probs| MethodOutput { probs, p_y1_hat: None, trace: None, prevalence: None };
    if let Some(b) = baselines.get(&method) {
        return Ok(plain(b.probs(&test.samples)?));
    }
    let f = fitted.ok_or_else(|| Error::Config(format!("{method} needs fitted models")))?;
    let ratio = &f.ratio;
    Ok(match method {
        Method::Erm | Method::ErmZ => return config_err(format!("{method} baseline was not fitted")),
        Method::Copa => {
            let g = copa_direct(test, codec, train_cfg)?;
            let gs = g.probs_batch(&test.samples)?;
            MethodOutput {
                probs: predict_batch(&test.samples, ratio, &g)?,
                p_y1_hat: Some(mean_positive(&gs, positive)),
                trace: None,
                prevalence: Some(g),
            }
        }
        Method::CopaStar => {
            let labels = test.labels().ok_or_else(|| Error::Data("CoPA_star needs test labels".into()))?;
            let mut counts = vec![0.0; ratio.params.output_dim()];
            labels.iter().for_each(|&y| counts[y] += 1.0);
            let prior = ProbVector::normalize(counts)?;
            let hidden = test.without_z();
            let probs = copa_star_mc(&hidden.samples, ratio, &prior, &codec.enumerate_support()?)?;
            MethodOutput { probs, p_y1_hat: Some(prior[positive]), trace: None, prevalence: None }
        }
        Method::Gpa => {
            let unlabeled = test.unlabeled();
            let (g, trace) = match &em_cfg.warm_start_site {
                Some(site) => {
                    let init = f.prevalences.get(site).ok_or_else(|| Error::Config(format!("no prevalence model for {site}")))?;
                    em_conditional_prevalence_from(&unlabeled, ratio, init, em_cfg)?
                }
                None => em_conditional_prevalence(&unlabeled, ratio, codec, em_cfg)?,
            };
            let gs = g.probs_batch(&test.samples)?;
            MethodOutput {
                probs: predict_batch(&test.samples, ratio, &g)?,
                p_y1_hat: Some(mean_positive(&gs, positive)),
                trace: Some(trace),
                prevalence: Some(g),
            }
        }
        Method::GpaStar => {
            let hidden = test.unlabeled().without_z();
            let (prior, g, trace) = em_marginal_prevalence(&hidden, ratio, codec, em_cfg)?;
            MethodOutput {
                probs: predict_batch(&hidden.samples, ratio, &g)?,
                p_y1_hat: Some(prior[positive]),
                trace: Some(trace),
                prevalence: Some(g),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(methods: Vec<Method>) -> ExperimentConfig {
        ExperimentConfig {
            sites: vec![
                SiteConfig::new("a", SiteRole::Train, 0.9, 400),
                SiteConfig::new("b", SiteRole::Train, 0.7, 400),
                SiteConfig::new("v", SiteRole::Validation, 0.5, 100),
                SiteConfig::new("t", SiteRole::Test, 0.3, 200),
            ],
            methods,
            seeds: vec![0],
            train: TrainConfig { epochs: 3, prevalence_hidden: vec![8], ..TrainConfig::default() },
            em: EmConfig { hidden: vec![8], ..EmConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.em.iterations, 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(vec![Method::Erm]);
        c.sites.retain(|s| s.role != SiteRole::Validation);
        assert!(c.validate().is_err());
        let mut c = tiny(vec![Method::Erm]);
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = tiny(vec![Method::Erm]);
        c.sites[1].name = "a".into();
        assert!(c.validate().is_err());
        let mut c = tiny(vec![Method::Erm]);
        c.em.warm_start_site = Some("t".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_uses_method_names() {
        let c = tiny(vec![Method::CopaStar, Method::GpaStar]);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"CoPA_star\"") && text.contains("\"GPA_star\""));
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"methods": ["ERM"], "seeds": [3]}"#).unwrap();
        assert_eq!(partial.sites.len(), 4);
        assert_eq!(partial.methods, vec![Method::Erm]);
    }

    #[test]
    fn single_method_single_seed_gives_one_row() {
        let o = run_experiment(&tiny(vec![Method::Erm])).unwrap();
        assert_eq!(o.rows.len(), 1);
        assert!(o.failures.is_empty());
        assert!((0.0..=1.0).contains(&o.rows[0].f1));
    }

    #[test]
    fn all_methods_run_and_sort() {
        let mut c = tiny(Method::ALL.to_vec());
        c.seeds = vec![1, 0];
        let o = run_experiment(&c).unwrap();
        assert!(o.failures.is_empty(), "{:?}", o.failures);
        assert_eq!(o.rows.len(), 12);
        let keys: Vec<(String, u64)> = o.rows.iter().map(|r| (r.method.clone(), r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(o.rows.iter().filter(|r| r.method.starts_with("GPA")).all(|r| r.p_y1_hat.is_some()));
        assert!(o.rows.iter().all(|r| r.seconds.is_none()));
    }

    #[test]
    fn seed_data_sites_are_independent() {
        let d = generate_seed_data(&tiny(vec![Method::Erm]), 0).unwrap();
        assert_ne!(d.train[0].samples[0].x, d.train[1].samples[0].x);
        assert_eq!(d.test[0].len(), 200);
    }
}
