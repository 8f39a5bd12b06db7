//! Type-II maximum likelihood for GP hyperparameters.
//!
//! L-BFGS on the negative log marginal likelihood in log-parameter space with
//! a backtracking Armijo line search. When the quasi-Newton direction fails to
//! produce a sufficient decrease we fall back to steepest descent with a
//! halving step. Random restarts perturb the initial point.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp;
use crate::kernel::{HyperParams, KernelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Convergence threshold on the gradient ∞-norm.
    pub grad_tol: f64,
    /// Extra runs from perturbed starting points, on top of the run from `init`.
    pub restarts: usize,
    /// Standard deviation of the log-space perturbation used by restarts.
    pub restart_scale: f64,
    pub history: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            restarts: 2,
            restart_scale: 1.0,
            history: 10,
            seed: 0,
        }
    }
}

/// Largest allowed per-coordinate move in one iteration (log units).
const MAX_STEP: f64 = 3.0;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

struct Objective<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    spec: &'a KernelSpec,
}

impl Objective<'_> {
    /// Negative LML and its gradient; `None` when the point is numerically unusable.
    fn eval(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        if !theta.iter().all(|t| t.is_finite() && t.abs() < 50.0) {
            return None;
        }
        let params = HyperParams::from_slice(self.spec, theta).ok()?;
        let model = gp::fit(self.x, self.y, self.spec, &params).ok()?;
        let f = -model.log_marginal_likelihood();
        let g: Vec<f64> = model.lml_grad().into_iter().map(|v| -v).collect();
        (f.is_finite() && g.iter().all(|v| v.is_finite())).then_some((f, g))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a single local run.
struct Run {
    theta: Vec<f64>,
    value: f64,
}

fn lbfgs(obj: &Objective<'_>, start: Vec<f64>, first: (f64, Vec<f64>), cfg: &OptConfig) -> Run {
    let mut theta = start;
    let (mut f, mut g) = first;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);

    for _ in 0..cfg.max_iters {
        if inf_norm(&g) <= cfg.grad_tol {
            break;
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, yv, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = mem
            .back()
            .map(|(s, yv, _)| dot(s, yv) / dot(yv, yv))
            .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, yv, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            mem.clear();
            dir = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
        }

        let accepted = line_search(obj, &theta, f, &g, &dir).or_else(|| {
            mem.clear();
            let sd: Vec<f64> = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            line_search(obj, &theta, f, &g, &sd)
        });
        let Some((new_theta, new_f, new_g)) = accepted else {
            break;
        };

        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = new_g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, yv, 1.0 / sy));
        }
        theta = new_theta;
        f = new_f;
        g = new_g;
    }
    Run { theta, value: f }
}

/// Backtracking from unit step (capped at [`MAX_STEP`] per coordinate).
fn line_search(
    obj: &Objective<'_>,
    theta: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let slope = dot(g, dir);
    if slope >= 0.0 {
        return None;
    }
    let mut step = (MAX_STEP / inf_norm(dir)).min(1.0);
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t + step * d).collect();
        if let Some((ft, gt)) = obj.eval(&trial) {
            if ft <= f + ARMIJO_C * step * slope {
                return Some((trial, ft, gt));
            }
        }
        step *= 0.5;
    }
    None
}

/// Maximizes the log marginal likelihood starting from `init`.
///
/// The returned parameters never have a lower likelihood than `init`. If the
/// gradient at `init` is already below tolerance, `init` is returned as is.
pub fn optimize_hypers(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    init: &HyperParams,
    cfg: &OptConfig,
) -> Result<HyperParams> {
    if x.nrows() < 2 {
        return Err(Error::input("hyperparameter optimization needs at least 2 points"));
    }
    init.validate(spec)?;
    let obj = Objective { x, y, spec };
    let theta0 = init.to_vec();

    let mut best: Option<Run> = None;
    let mut consider = |run: Run| {
        if best.as_ref().is_none_or(|b| run.value < b.value) {
            best = Some(run);
        }
    };

    if let Some(first) = obj.eval(&theta0) {
        if inf_norm(&first.1) <= cfg.grad_tol {
            return Ok(init.clone());
        }
        consider(lbfgs(&obj, theta0.clone(), first, cfg));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.restart_scale).expect("restart scale must be finite");
    for _ in 0..cfg.restarts {
        let start: Vec<f64> = theta0.iter().map(|t| t + normal.sample(&mut rng)).collect();
        if let Some(first) = obj.eval(&start) {
            consider(lbfgs(&obj, start, first, cfg));
        }
    }

    let best = best.ok_or_else(|| {
        Error::numerical(format!(
            "every optimization start failed for kernel `{spec}` on {} points",
            x.nrows()
        ))
    })?;
    HyperParams::from_slice(spec, &best.theta)
}
