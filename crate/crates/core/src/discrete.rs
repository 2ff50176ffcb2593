//! A fully enumerable world: finite feature symbols `X`, labels `Y` and
//! confounders `Z`, with a site-independent emission table `P(X | Y, Z)`
//! and per-site tables `P_e(Z)`, `P_e(Y | Z)`. Every distribution the
//! models estimate can be computed exactly here, which makes it the
//! reference fixture for the adjustment and EM code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SiteDataset};
use crate::error::{config_err, data_err, Result};
use crate::model::{KnockoutCodec, RatioScorer};
use crate::prob::{argmax, ProbVector};

const TABLE_TOL: f64 = 1e-9;

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.is_empty() || row.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > TABLE_TOL {
        return config_err(format!("{what} is not a probability vector: {row:?}"));
    }
    Ok(())
}

/// A random strictly positive probability vector; larger `sharpness`
/// concentrates mass on fewer entries.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, sharpness: f64, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| sharpness * rng.sample::<f64, _>(StandardNormal)).collect();
    crate::prob::softmax(&logits).into_inner()
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTables {
    pub name: String,
    pub p_z: Vec<f64>,
    /// `p_y_given_z[z][y]`
    pub p_y_given_z: Vec<Vec<f64>>,
}

impl SiteTables {
    pub fn random<R: Rng + ?Sized>(name: &str, classes: usize, num_z: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            p_z: random_simplex(num_z, 0.5, rng),
            p_y_given_z: (0..num_z).map(|_| random_simplex(classes, 1.0, rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteOracle {
    num_symbols: usize,
    num_classes: usize,
    num_z: usize,
    /// `emission[y][z][x]`, shared by every site.
    emission: Vec<Vec<Vec<f64>>>,
    sites: Vec<SiteTables>,
}

impl DiscreteOracle {
    pub fn new(emission: Vec<Vec<Vec<f64>>>, sites: Vec<SiteTables>) -> Result<Self> {
        let num_classes = emission.len();
        let num_z = emission.first().map_or(0, Vec::len);
        let num_symbols = emission.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if num_classes < 2 || num_z == 0 || num_symbols < 2 {
            return config_err("emission table needs >= 2 classes, >= 1 confounder value and >= 2 symbols");
        }
        for (y, rows) in emission.iter().enumerate() {
            if rows.len() != num_z {
                return config_err(format!("emission[{y}] has {} confounder rows", rows.len()));
            }
            for (z, row) in rows.iter().enumerate() {
                if row.len() != num_symbols {
                    return config_err(format!("emission[{y}][{z}] has wrong length"));
                }
                check_simplex(row, &format!("emission[{y}][{z}]"))?;
            }
        }
        for s in &sites {
            if s.p_z.len() != num_z || s.p_y_given_z.len() != num_z {
                return config_err(format!("site {} tables have wrong shape", s.name));
            }
            check_simplex(&s.p_z, &format!("site {} P(Z)", s.name))?;
            for (z, row) in s.p_y_given_z.iter().enumerate() {
                if row.len() != num_classes {
                    return config_err(format!("site {} P(Y|Z={z}) has wrong length", s.name));
                }
                check_simplex(row, &format!("site {} P(Y|Z={z})", s.name))?;
            }
        }
        Ok(Self { num_symbols, num_classes, num_z, emission, sites })
    }

    pub fn random_emission<R: Rng + ?Sized>(
        symbols: usize,
        classes: usize,
        num_z: usize,
        sharpness: f64,
        rng: &mut R,
    ) -> Vec<Vec<Vec<f64>>> {
        (0..classes)
            .map(|_| (0..num_z).map(|_| random_simplex(symbols, sharpness, rng)).collect())
            .collect()
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_z(&self) -> usize {
        self.num_z
    }

    pub fn sites(&self) -> &[SiteTables] {
        &self.sites
    }

    pub fn emission(&self, x: usize, y: usize, z: usize) -> f64 {
        self.emission[y][z][x]
    }

    pub fn emission_table(&self) -> &[Vec<Vec<f64>>] {
        &self.emission
    }

    pub fn site_index(&self, name: &str) -> Result<usize> {
        match self.sites.iter().position(|s| s.name == name) {
            Some(i) => Ok(i),
            None => config_err(format!("unknown site {name}")),
        }
    }

    /// Codec for the single categorical confounder.
    pub fn codec(&self) -> KnockoutCodec {
        KnockoutCodec::new(vec![crate::model::ConfounderSpec::Categorical { cardinality: self.num_z }])
            .expect("positive cardinality")
    }

    pub fn joint(&self, site: usize, x: usize, y: usize, z: usize) -> f64 {
        let s = &self.sites[site];
        s.p_z[z] * s.p_y_given_z[z][y] * self.emission[y][z][x]
    }

    pub fn p_y(&self, site: usize) -> Vec<f64> {
        let s = &self.sites[site];
        (0..self.num_classes).map(|y| (0..self.num_z).map(|z| s.p_z[z] * s.p_y_given_z[z][y]).sum()).collect()
    }

    /// `P_e(Y | x, z)` by enumeration.
    pub fn posterior(&self, site: usize, x: usize, z: usize) -> Result<ProbVector> {
        let s = &self.sites[site];
        ProbVector::normalize((0..self.num_classes).map(|y| s.p_y_given_z[z][y] * self.emission[y][z][x]).collect())
    }

    /// `P_e(Y | x)` with `Z` summed out.
    pub fn marginal_posterior(&self, site: usize, x: usize) -> Result<ProbVector> {
        ProbVector::normalize(
            (0..self.num_classes).map(|y| (0..self.num_z).map(|z| self.joint(site, x, y, z)).sum()).collect(),
        )
    }

    /// `P_e(Y | x, z) / P_e(Y | z)`, unnormalized.
    pub fn ratio(&self, site: usize, x: usize, z: usize) -> Result<Vec<f64>> {
        let post = self.posterior(site, x, z)?;
        let s = &self.sites[site];
        Ok((0..self.num_classes).map(|y| post[y] / s.p_y_given_z[z][y]).collect())
    }

    /// `P_e(x | y)`.
    pub fn class_conditional(&self, site: usize, x: usize, y: usize) -> f64 {
        let py = self.p_y(site)[y];
        if py == 0.0 {
            return 0.0;
        }
        (0..self.num_z).map(|z| self.joint(site, x, y, z)).sum::<f64>() / py
    }

    /// `H_e(Y | X, Z)` in nats.
    pub fn conditional_entropy(&self, site: usize) -> f64 {
        let mut h = 0.0;
        for x in 0..self.num_symbols {
            for z in 0..self.num_z {
                for y in 0..self.num_classes {
                    let j = self.joint(site, x, y, z);
                    if j > 0.0 {
                        let marg: f64 = (0..self.num_classes).map(|yy| self.joint(site, x, yy, z)).sum();
                        h -= j * (j / marg).ln();
                    }
                }
            }
        }
        h
    }

    /// Draws labeled samples; `x` is one-hot over the symbols and `z` is the
    /// categorical confounder value.
    pub fn sample<R: Rng + ?Sized>(&self, site: usize, n: usize, rng: &mut R) -> Result<SiteDataset> {
        let s = &self.sites[site];
        let samples = (0..n)
            .map(|_| {
                let z = draw(&s.p_z, rng);
                let y = draw(&s.p_y_given_z[z], rng);
                let x = draw(&self.emission[y][z], rng);
                Sample { x: one_hot(self.num_symbols, x), y: Some(y), z: vec![Some(z as f64)] }
            })
            .collect();
        SiteDataset::new(s.name.clone(), samples)
    }
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Symbol index of a one-hot feature vector.
pub fn symbol_of(x: &[f64]) -> usize {
    argmax(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSiteSpec {
    pub tables: SiteTables,
    pub n: usize,
}

/// Random emission over `symbols` plus the given site tables, and a sampled
/// dataset per site.
pub fn build_discrete_oracle(
    symbols: usize,
    specs: &[DiscreteSiteSpec],
    sharpness: f64,
    seed: u64,
) -> Result<(DiscreteOracle, Vec<SiteDataset>)> {
    if symbols < 2 {
        return config_err("need at least 2 feature symbols");
    }
    let Some(first) = specs.first() else {
        return config_err("need at least one site");
    };
    let num_z = first.tables.p_z.len();
    let classes = first.tables.p_y_given_z.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emission = DiscreteOracle::random_emission(symbols, classes, num_z, sharpness, &mut rng);
    let oracle = DiscreteOracle::new(emission, specs.iter().map(|s| s.tables.clone()).collect())?;
    let data = (0..specs.len())
        .map(|i| oracle.sample(i, specs[i].n, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((oracle, data))
}

/// The exact ratio as a scorer. With `z` observed it returns
/// `Norm(P(x | Y, z))`; with `z` missing it returns `Norm(P_e(x | Y))` for
/// the chosen reference site, the exact target of the knockout path.
#[derive(Debug, Clone, Copy)]
pub struct OracleRatio<'a> {
    pub oracle: &'a DiscreteOracle,
    pub marginal_site: usize,
}

impl RatioScorer for OracleRatio<'_> {
    fn num_classes(&self) -> usize {
        self.oracle.num_classes
    }

    fn ratio_probs(&self, samples: &[Sample]) -> Result<Vec<ProbVector>> {
        let o = self.oracle;
        samples
            .iter()
            .map(|s| {
                if s.x.len() != o.num_symbols || s.z.len() != 1 {
                    return data_err("sample does not match the discrete oracle's shape");
                }
                let x = symbol_of(&s.x);
                let w: Vec<f64> = match s.z[0] {
                    Some(z) => (0..o.num_classes).map(|y| o.emission(x, y, z as usize)).collect(),
                    None => (0..o.num_classes).map(|y| o.class_conditional(self.marginal_site, x, y)).collect(),
                };
                ProbVector::normalize(w)
            })
            .collect()
    }
}
