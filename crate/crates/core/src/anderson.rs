//! Regularized, safeguarded Anderson acceleration for fixed points `x = f(x)`.
//!
//! Each iteration forms the gap `G = x - f(x)` and a relaxed fallback
//! `x - beta G`. The accelerated iterate combines the last `m` fallbacks with weights
//! recovered from a Tikhonov-regularized least-squares fit of the gap differences.
//! A safeguard compares the current gap against a decaying multiple of the first one
//! and reverts to the fallback when the accelerated sequence misbehaves.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaConfig {
    /// Weight of the Tikhonov term in the least-squares fit.
    pub regularization: f64,
    /// Safeguard scale `D_AA`.
    pub safeguard_scale: f64,
    /// Safeguard decay exponent `eps_AA`.
    pub safeguard_decay: f64,
    /// Safeguard cadence `R_check`, counted in accepted steps.
    pub check_every: usize,
    /// Maximum memory `M_AA`. Zero gives plain damped iteration.
    pub memory: usize,
    /// Relaxation `beta_AA` in (0, 1].
    pub relaxation: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl AaConfig {
    /// Preset for the reward-design fixed point.
    pub fn elo() -> Self {
        AaConfig {
            regularization: 1e-8,
            safeguard_scale: 1e5,
            safeguard_decay: 1e-5,
            check_every: 10,
            memory: 5,
            relaxation: 1.0,
            tolerance: 1e-6,
            max_iter: 200,
        }
    }

    /// Preset for the coupled price fixed point.
    pub fn equilibrium() -> Self {
        AaConfig {
            regularization: 1e-7,
            safeguard_scale: 1e4,
            safeguard_decay: 1e-5,
            check_every: 5,
            memory: 10,
            relaxation: 0.1,
            tolerance: 1e-4,
            max_iter: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::schema(name, format!("must be finite and > 0, got {v}")))
            }
        };
        pos("regularization", self.regularization)?;
        pos("safeguard_scale", self.safeguard_scale)?;
        pos("safeguard_decay", self.safeguard_decay)?;
        pos("tolerance", self.tolerance)?;
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::schema("relaxation", "must lie in (0, 1]"));
        }
        if self.check_every == 0 {
            return Err(Error::schema("check_every", "must be >= 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::schema("max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// How the iterate following a trace entry was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// First step, always the relaxed fallback.
    Initial,
    /// Accelerated step that passed the safeguard test.
    Checked,
    /// Accelerated step taken between safeguard checks.
    Unchecked,
    /// Safeguard rejected the accelerated step; fallback taken.
    Rejected,
    /// Gap below tolerance; iteration stopped here.
    Converged,
}

impl StepKind {
    pub fn accelerated(self) -> bool {
        matches!(self, StepKind::Checked | StepKind::Unchecked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaEntry {
    pub iteration: usize,
    pub residual: f64,
    pub step: StepKind,
    pub memory: usize,
    /// Right-hand side of the safeguard inequality when it was evaluated.
    pub safeguard_bound: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AaTrace {
    pub entries: Vec<AaEntry>,
}

impl AaTrace {
    pub fn residuals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.residual).collect()
    }
    pub fn final_residual(&self) -> f64 {
        self.entries.last().map_or(f64::INFINITY, |e| e.residual)
    }
    /// Number of iterates after the starting point.
    pub fn iterations(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }
    pub fn converged(&self) -> bool {
        self.entries.last().is_some_and(|e| e.step == StepKind::Converged)
    }
}

/// Weights of the regularized least-squares fit
/// `min |g - Y gamma|^2 + r (|Y|_F^2 + |S|_F^2) |gamma|^2`, via normal equations.
pub fn regularized_weights(y: &DMatrix<f64>, s: &DMatrix<f64>, g: &DVector<f64>, r: f64) -> DVector<f64> {
    let m = y.ncols();
    if m == 0 {
        return DVector::zeros(0);
    }
    let lambda = r * (y.norm_squared() + s.norm_squared());
    let mut normal = y.transpose() * y;
    for j in 0..m {
        normal[(j, j)] += lambda;
    }
    let rhs = y.transpose() * g;
    match normal.cholesky() {
        Some(ch) => ch.solve(&rhs),
        // Y and S both vanish: no information, fall back to the plain step.
        None => DVector::zeros(m),
    }
}

/// Mixing coefficients `alpha` from `gamma`: `alpha_0 = gamma_0`,
/// `alpha_j = gamma_j - gamma_{j-1}`, `alpha_m = 1 - gamma_{m-1}`.
pub fn mixing_coefficients(gamma: &DVector<f64>) -> Vec<f64> {
    let m = gamma.len();
    if m == 0 {
        return vec![1.0];
    }
    let mut alpha = Vec::with_capacity(m + 1);
    alpha.push(gamma[0]);
    for j in 1..m {
        alpha.push(gamma[j] - gamma[j - 1]);
    }
    alpha.push(1.0 - gamma[m - 1]);
    alpha
}

/// Solves `x = f(x)` from `x0`. Returns the first iterate whose gap norm is within
/// tolerance, with the iteration trace.
pub fn aa_solve<F>(mut f: F, x0: DVector<f64>, cfg: &AaConfig) -> Result<(DVector<f64>, AaTrace)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(0));
    }
    let beta = cfg.relaxation;
    let mut trace = AaTrace::default();

    let gap = |x: &DVector<f64>, fx: DVector<f64>, i: usize| -> Result<DVector<f64>> {
        if fx.len() != x.len() {
            return Err(Error::IndexMismatch(format!("map returned {} entries for {}", fx.len(), x.len())));
        }
        if fx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(x - fx)
    };

    let mut x = x0;
    let g0 = gap(&x, f(&x)?, 0)?;
    let g0_norm = g0.norm();
    if g0_norm <= cfg.tolerance {
        trace.entries.push(AaEntry {
            iteration: 0,
            residual: g0_norm,
            step: StepKind::Converged,
            memory: 0,
            safeguard_bound: None,
        });
        return Ok((x, trace));
    }
    trace.entries.push(AaEntry {
        iteration: 0,
        residual: g0_norm,
        step: StepKind::Initial,
        memory: 0,
        safeguard_bound: None,
    });

    // (x_k, G_k) for the last memory + 1 iterates.
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut x_next = &x - &g0 * beta;
    history.push_back((x, g0));

    let mut n_aa = 0usize;
    let mut r_aa = 0usize;
    let mut initial = true;

    for i in 1.. {
        x = x_next;
        let g = gap(&x, f(&x)?, i)?;
        let g_norm = g.norm();
        if g_norm <= cfg.tolerance {
            trace.entries.push(AaEntry {
                iteration: i,
                residual: g_norm,
                step: StepKind::Converged,
                memory: 0,
                safeguard_bound: None,
            });
            return Ok((x, trace));
        }
        if i > cfg.max_iter {
            trace.entries.push(AaEntry {
                iteration: i,
                residual: g_norm,
                step: StepKind::Rejected,
                memory: 0,
                safeguard_bound: None,
            });
            return Err(Error::NonConvergence {
                iterations: i,
                last_residual: g_norm,
                residuals: trace.residuals(),
            });
        }
        let m = cfg.memory.min(i);
        let fallback = &x - &g * beta;
        history.push_back((x.clone(), g.clone()));
        while history.len() > m + 1 {
            history.pop_front();
        }

        let n = x.len();
        let mut y = DMatrix::zeros(n, m);
        let mut s = DMatrix::zeros(n, m);
        for j in 0..m {
            let (xa, ga) = &history[j];
            let (xb, gb) = &history[j + 1];
            y.set_column(j, &(gb - ga));
            s.set_column(j, &(xb - xa));
        }
        let gamma = regularized_weights(&y, &s, &g, cfg.regularization);
        let alpha = mixing_coefficients(&gamma);
        let mut x_aa = DVector::zeros(n);
        for (a, (xk, gk)) in alpha.iter().zip(history.iter()) {
            x_aa.axpy(*a, &(xk - gk * beta), 1.0);
        }

        let (next, step, bound) = if initial || r_aa >= cfg.check_every {
            let bound = cfg.safeguard_scale
                * g0_norm
                * (n_aa as f64 / cfg.check_every as f64 + 1.0).powf(-1.0 - cfg.safeguard_decay);
            if g_norm * g_norm <= bound {
                n_aa += 1;
                r_aa = 1;
                initial = false;
                (x_aa, StepKind::Checked, Some(bound))
            } else {
                r_aa = 0;
                (fallback, StepKind::Rejected, Some(bound))
            }
        } else {
            n_aa += 1;
            r_aa += 1;
            (x_aa, StepKind::Unchecked, None)
        };
        trace.entries.push(AaEntry {
            iteration: i,
            residual: g_norm,
            step,
            memory: m,
            safeguard_bound: bound,
        });
        x_next = next;
    }
    unreachable!()
}

/// Damped iteration `x <- x - beta (x - f(x))`, the memory-free baseline.
pub fn damped_solve<F>(f: F, x0: DVector<f64>, relaxation: f64, tolerance: f64, max_iter: usize) -> Result<(DVector<f64>, AaTrace)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let cfg = AaConfig {
        memory: 0,
        relaxation,
        tolerance,
        max_iter,
        ..AaConfig::elo()
    };
    aa_solve(f, x0, &cfg)
}
