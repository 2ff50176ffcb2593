//! Multi-site synthetic data: binary label `Y` and binary confounder `Z`
//! drawn from threshold structural equations over uniform latents, with
//! features emitted by a site-independent Gaussian mechanism.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Sample, SiteDataset};
use crate::error::{config_err, Result};
use crate::prob::{log_sum_exp, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemVariant {
    /// A shared latent drives both `Y` and `Z`.
    Confounded,
    YCausesZ,
    ZCausesY,
}

impl SemVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Confounded => "confounded",
            Self::YCausesZ => "y_causes_z",
            Self::ZCausesY => "z_causes_y",
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemConfig {
    pub variant: SemVariant,
    /// Site coefficient in (0, 1).
    pub beta: f64,
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
}

impl SemConfig {
    pub fn new(variant: SemVariant, beta: f64, n: usize, seed: u64) -> Self {
        Self { variant, beta, alpha: DEFAULT_ALPHA, n, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return config_err(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !self.alpha.is_finite() {
            return config_err("alpha must be finite");
        }
        if self.n == 0 {
            return config_err("sample count must be at least 1");
        }
        Ok(())
    }
}

fn indicator(cond: bool) -> usize {
    usize::from(cond)
}

/// Draws `n` `(y, z)` pairs from the configured structural equations.
pub fn gen_labels(cfg: &SemConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, a) = (cfg.beta, cfg.alpha);
    let pairs = (0..cfg.n)
        .map(|_| {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            match cfg.variant {
                SemVariant::Confounded => {
                    let y = indicator(b * u1 + (1.0 - b) * a > 0.5);
                    let z = indicator(b * u1 + (1.0 - b) * u2 > 0.5);
                    (y, z)
                }
                SemVariant::YCausesZ => {
                    let y = indicator(b * u1 + (1.0 - b) * a > 0.5);
                    let z = indicator(b * y as f64 / 2.0 + (1.0 - b / 2.0) * u2 > 0.5);
                    (y, z)
                }
                SemVariant::ZCausesY => {
                    let z = indicator(u1 > 0.5);
                    let y = indicator(b * z as f64 / 2.0 + b * u2 / 2.0 + (1.0 - b) * a > 0.5);
                    (y, z)
                }
            }
        })
        .collect();
    Ok(pairs)
}

/// Exact label and confounder probabilities for one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePrevalence {
    pub p_y1: f64,
    /// `P(Y=1 | Z=z)` for `z = 0, 1`.
    pub p_y1_given_z: [f64; 2],
    pub p_z1: f64,
}

impl SitePrevalence {
    pub fn p_z(&self, z: usize) -> f64 {
        if z == 1 {
            self.p_z1
        } else {
            1.0 - self.p_z1
        }
    }

    pub fn p_y_given_z(&self, y: usize, z: usize) -> f64 {
        let p1 = self.p_y1_given_z[z];
        if y == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

/// `int_lo^hi clamp(a + b s, 0, 1) ds`, exact.
pub(crate) fn integrate_clamped_linear(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if b == 0.0 {
        return a.clamp(0.0, 1.0) * (hi - lo);
    }
    let mut cuts = vec![lo, hi];
    for level in [0.0, 1.0] {
        let s = (level - a) / b;
        if s > lo && s < hi {
            cuts.push(s);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .map(|w| {
            let (l, h) = (w[0], w[1]);
            let mid = a + b * 0.5 * (l + h);
            if mid <= 0.0 {
                0.0
            } else if mid >= 1.0 {
                h - l
            } else {
                mid * (h - l)
            }
        })
        .sum()
}

fn ratio_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        fallback
    }
}

/// Closed-form prevalences obtained by integrating the structural equations
/// over their uniform latents. `beta` may be any value in `[0, 1]`; the
/// endpoints give the exact degenerate limits.
pub fn analytic_prevalence(variant: SemVariant, beta: f64, alpha: f64) -> Result<SitePrevalence> {
    if !(0.0..=1.0).contains(&beta) || !alpha.is_finite() {
        return config_err(format!("invalid beta {beta} / alpha {alpha}"));
    }
    // Y = 1 iff latent > y_cut for the confounded and y-causes-z variants
    let y_cut = if beta > 0.0 {
        ((0.5 - (1.0 - beta) * alpha) / beta).clamp(0.0, 1.0)
    } else if alpha > 0.5 {
        0.0
    } else {
        1.0
    };
    let prev = match variant {
        SemVariant::Confounded => {
            let p_y1 = 1.0 - y_cut;
            let (p_z1, p_y1z1) = if beta >= 1.0 {
                (0.5, 1.0 - y_cut.max(0.5))
            } else {
                // P(Z=1 | S=s) = clamp(1 - (0.5 - beta s) / (1 - beta))
                let a = 1.0 - 0.5 / (1.0 - beta);
                let b = beta / (1.0 - beta);
                (integrate_clamped_linear(a, b, 0.0, 1.0), integrate_clamped_linear(a, b, y_cut, 1.0))
            };
            let p_y1z0 = p_y1 - p_y1z1;
            SitePrevalence {
                p_y1,
                p_y1_given_z: [ratio_or(p_y1z0, 1.0 - p_z1, p_y1), ratio_or(p_y1z1, p_z1, p_y1)],
                p_z1,
            }
        }
        SemVariant::YCausesZ => {
            let p_y1 = 1.0 - y_cut;
            let pz1_given_y = |y: f64| 1.0 - ((0.5 - beta * y / 2.0) / (1.0 - beta / 2.0)).clamp(0.0, 1.0);
            let (q0, q1) = (pz1_given_y(0.0), pz1_given_y(1.0));
            let p_z1 = (1.0 - p_y1) * q0 + p_y1 * q1;
            SitePrevalence {
                p_y1,
                p_y1_given_z: [ratio_or(p_y1 * (1.0 - q1), 1.0 - p_z1, p_y1), ratio_or(p_y1 * q1, p_z1, p_y1)],
                p_z1,
            }
        }
        SemVariant::ZCausesY => {
            let py1_given_z = |z: f64| {
                if beta > 0.0 {
                    1.0 - ((0.5 - (1.0 - beta) * alpha - beta * z / 2.0) / (beta / 2.0)).clamp(0.0, 1.0)
                } else if alpha > 0.5 {
                    1.0
                } else {
                    0.0
                }
            };
            let (c0, c1) = (py1_given_z(0.0), py1_given_z(1.0));
            SitePrevalence { p_y1: 0.5 * (c0 + c1), p_y1_given_z: [c0, c1], p_z1: 0.5 }
        }
    };
    Ok(prev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmissionConfig {
    pub dim: usize,
    /// Label signal along the first axis.
    pub mu: f64,
    /// Confounder signal along the second axis.
    pub nu: f64,
    pub sigma: f64,
}

impl Default for EmissionConfig {
    fn default() -> Self {
        Self { dim: 5, mu: 1.0, nu: 2.0, sigma: 1.0 }
    }
}

impl EmissionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return config_err("emission dimension must be at least 2");
        }
        if !(self.sigma > 0.0) || !self.mu.is_finite() || !self.nu.is_finite() {
            return config_err("emission needs finite mu, nu and sigma > 0");
        }
        Ok(())
    }

    /// Noise-free feature vector for `(y, z)`.
    pub fn mean(&self, y: usize, z: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[0] = self.mu * (2.0 * y as f64 - 1.0);
        m[1] = self.nu * (2.0 * z as f64 - 1.0);
        m
    }

    /// Gaussian log-density of `x` under `(y, z)` up to a constant shared by
    /// all `(y, z)`.
    pub fn log_likelihood(&self, x: &[f64], y: usize, z: usize) -> f64 {
        let m = self.mean(y, z);
        let sq: f64 = x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
        -sq / (2.0 * self.sigma * self.sigma)
    }
}

/// Attaches features to `(y, z)` pairs. The emission never depends on the site.
pub fn emit_features(
    site: &str,
    pairs: &[(usize, usize)],
    emission: &EmissionConfig,
    seed: u64,
) -> Result<SiteDataset> {
    emission.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = pairs
        .iter()
        .map(|&(y, z)| {
            let mut x = emission.mean(y, z);
            for v in x.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += emission.sigma * e;
            }
            Sample { x, y: Some(y), z: vec![Some(z as f64)] }
        })
        .collect();
    SiteDataset::new(site, samples)
}

/// Bayes posterior `P_e(Y | x, z)` for the Gaussian emission; with `z`
/// missing, `Z` is summed out under the site's `P_e(Z)`.
pub fn oracle_posterior(
    x: &[f64],
    z: Option<usize>,
    site: &SitePrevalence,
    emission: &EmissionConfig,
) -> Result<ProbVector> {
    let zs: Vec<usize> = match z {
        Some(z) if z <= 1 => vec![z],
        Some(z) => return config_err(format!("binary confounder expected, got {z}")),
        None => vec![0, 1],
    };
    let mut log_w = [f64::NEG_INFINITY; 2];
    for (y, lw) in log_w.iter_mut().enumerate() {
        let terms: Vec<f64> = zs
            .iter()
            .map(|&zz| {
                let pz = if z.is_some() { 1.0 } else { site.p_z(zz) };
                (pz * site.p_y_given_z(y, zz)).ln() + emission.log_likelihood(x, y, zz)
            })
            .collect();
        *lw = log_sum_exp(&terms);
    }
    let max = log_w[0].max(log_w[1]);
    if max == f64::NEG_INFINITY {
        return crate::error::data_err("observation has zero probability under every label");
    }
    ProbVector::normalize(log_w.iter().map(|l| (l - max).exp()).collect())
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Labels plus features for one site.
pub fn generate_site(
    site: &str,
    cfg: &SemConfig,
    emission: &EmissionConfig,
) -> Result<SiteDataset> {
    let pairs = gen_labels(cfg)?;
    emit_features(site, &pairs, emission, derive_seed(cfg.seed, "emission"))
}

#[cfg(test)]
#[path = "sem_tests.rs"]
mod tests;
