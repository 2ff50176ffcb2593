use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return config_err("adam step size must be positive");
        }
        Ok(Self { cfg, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return config_err("sgd step size must be positive");
        }
        Ok(Self { lr })
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// First-order optimizer selection for minibatch training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam(AdamConfig::default())
    }
}

/// Live optimizer state for any of the supported methods.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd(Sgd),
    Adam(Adam),
    Lbfgs(Lbfgs),
}

impl OptimizerState {
    pub fn first_order(cfg: &OptimizerConfig, num_params: usize) -> Result<Self> {
        Ok(match *cfg {
            OptimizerConfig::Sgd { lr } => Self::Sgd(Sgd::new(lr)?),
            OptimizerConfig::Adam(a) => Self::Adam(Adam::new(a, num_params)?),
        })
    }

    /// One gradient step. LBFGS is driven through [`Lbfgs::minimize`] instead.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            Self::Sgd(s) => s.step(params, grad),
            Self::Adam(a) => a.step(params, grad),
            Self::Lbfgs(_) => return config_err("LBFGS does not take single gradient steps"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Backtracking factor.
    pub shrink: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { history: 10, c1: 1e-4, shrink: 0.5, grad_tol: 1e-7, max_iter: 100, max_backtracks: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when no step satisfying sufficient decrease was found; `x` is
    /// then the best point reached.
    pub line_search_failed: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    cfg: LbfgsConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Result<Self> {
        if cfg.history == 0 || !(cfg.shrink > 0.0 && cfg.shrink < 1.0) || !(cfg.c1 > 0.0 && cfg.c1 < 1.0) {
            return config_err(format!("invalid LBFGS settings {cfg:?}"));
        }
        Ok(Self { cfg, pairs: VecDeque::with_capacity(cfg.history) })
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in &mut q {
                *qi *= gamma;
            }
        } else {
            let norm = dot(g, g).sqrt();
            if norm > 1.0 {
                for qi in &mut q {
                    *qi /= norm;
                }
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        for qi in &mut q {
            *qi = -*qi;
        }
        q
    }

    pub fn minimize<F>(&mut self, mut objective: F, init: Vec<f64>) -> Result<LbfgsOutcome>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let cfg = self.cfg;
        let mut x = init;
        let (mut f, mut g) = objective(&x)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: 0, context: "LBFGS objective at initial point".into() });
        }
        let mut trace = vec![f];
        let mut converged = false;
        let mut line_search_failed = false;
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            if dot(&g, &g).sqrt() < cfg.grad_tol {
                converged = true;
                break;
            }
            let mut d = self.direction(&g);
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                self.pairs.clear();
                d = self.direction(&g);
                slope = dot(&g, &d);
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
                let (ft, gt) = objective(&trial)?;
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= f + cfg.c1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= cfg.shrink;
            }
            let Some((xn, fnew, gn)) = accepted else {
                log::warn!("LBFGS line search failed after {iterations} iterations; returning best point");
                line_search_failed = true;
                break;
            };
            iterations += 1;
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                if self.pairs.len() == cfg.history {
                    self.pairs.pop_front();
                }
                self.pairs.push_back((s, y, 1.0 / sy));
            }
            x = xn;
            f = fnew;
            g = gn;
            trace.push(f);
        }
        if !converged && dot(&g, &g).sqrt() < cfg.grad_tol {
            converged = true;
        }
        let grad_norm = dot(&g, &g).sqrt();
        Ok(LbfgsOutcome { x, value: f, grad_norm, iterations, converged, line_search_failed, trace })
    }
}

/// Minimizes a differentiable objective over a flat parameter vector
/// starting from `init`.
pub fn lbfgs_minimize<F>(objective: F, init: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    Lbfgs::new(*cfg)?.minimize(objective, init)
}
