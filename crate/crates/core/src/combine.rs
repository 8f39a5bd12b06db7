//! Reduce phase: pooling per-expert Gaussians at a single test point.
//!
//! * BCM: `T = Σ Tᵢ + (1 − K)·T⋆⋆`, `m = Σ Tᵢ mᵢ / T`.
//! * rBCM: as BCM with each precision scaled by the raw entropy change βᵢ and
//!   the prior correction `(1 − Σ βᵢ)·T⋆⋆`.
//! * gPoE: `T = Σ αᵢ Tᵢ`, `m = Σ αᵢ Tᵢ mᵢ / T` with α on the simplex,
//!   proportional to the entropy change.
//! * dLOP: gPoE whose α is first pushed along the normalized gradient of the
//!   diversity term `C = ¼ αQαᵀ`, with `Qᵢⱼ` the symmetric KL between experts
//!   `i` and `j`, then renormalized.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::ExpertPrediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Bcm,
    Rbcm,
    Gpoe,
    Dlop,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Bcm, Rule::Rbcm, Rule::Gpoe, Rule::Dlop];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Bcm => "bcm",
            Rule::Rbcm => "rbcm",
            Rule::Gpoe => "gpoe",
            Rule::Dlop => "dlop",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::input(format!("unknown combination rule `{s}`")))
    }
}

/// Per-expert weights α(x⋆).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(alphas: Vec<f64>) -> Self {
        Self(alphas)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Nonnegative entries summing to one within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.0.iter().all(|&a| a >= 0.0 && a.is_finite())
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPrediction {
    pub mean: f64,
    pub variance: f64,
    pub rule: Rule,
    pub weights: Option<WeightVector>,
}

/// Pairwise symmetric KL divergences between expert predictive Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct KlMatrix(DMatrix<f64>);

impl KlMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `C(α) = ¼ αQαᵀ`.
    pub fn diversity(&self, weights: &WeightVector) -> f64 {
        let a = nalgebra::DVector::from_column_slice(weights.alphas());
        0.25 * a.dot(&(&self.0 * &a))
    }
}

/// `KL(p ‖ q)` for univariate Gaussians given as `(mean, variance)`.
pub fn gaussian_kl(p: (f64, f64), q: (f64, f64)) -> Result<f64> {
    let ((mp, vp), (mq, vq)) = (p, q);
    if !(vp > 0.0 && vq > 0.0) {
        return Err(Error::input(format!(
            "KL needs positive variances, got {vp} and {vq}"
        )));
    }
    let d = mp - mq;
    Ok((0.5 * (vq / vp).ln() + (vp + d * d) / (2.0 * vq) - 0.5).max(0.0))
}

/// `KL(p‖q) + KL(q‖p)`; the log terms cancel.
#[inline]
fn sym_kl(p: &ExpertPrediction, q: &ExpertPrediction) -> f64 {
    let d2 = (p.mean - q.mean) * (p.mean - q.mean);
    ((p.variance + d2) / (2.0 * q.variance) + (q.variance + d2) / (2.0 * p.variance) - 1.0).max(0.0)
}

fn check_nonempty(preds: &[ExpertPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::input("no expert predictions to combine"));
    }
    Ok(())
}

/// Entropy-change weights normalized onto the simplex; uniform when no
/// expert is informed by its data at this point.
pub fn entropy_change_weights(preds: &[ExpertPrediction]) -> WeightVector {
    let raw: Vec<f64> = preds.iter().map(|p| p.entropy_change().max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if !(total >= 1e-12) {
        return WeightVector::uniform(preds.len());
    }
    WeightVector(raw.into_iter().map(|h| h / total).collect())
}

pub fn combine_gpoe(preds: &[ExpertPrediction], weights: &WeightVector) -> Result<CombinedPrediction> {
    pooled(preds, weights, Rule::Gpoe)
}

fn pooled(preds: &[ExpertPrediction], weights: &WeightVector, rule: Rule) -> Result<CombinedPrediction> {
    check_nonempty(preds)?;
    if weights.len() != preds.len() {
        return Err(Error::input(format!(
            "{} weights for {} experts",
            weights.len(),
            preds.len()
        )));
    }
    let (mut precision, mut weighted_mean) = (0.0, 0.0);
    for (p, &a) in preds.iter().zip(weights.alphas()) {
        let t = a / p.variance;
        precision += t;
        weighted_mean += t * p.mean;
    }
    if !(precision > 0.0 && precision.is_finite()) {
        return Err(Error::numerical(format!("pooled precision {precision} is not positive")));
    }
    Ok(CombinedPrediction {
        mean: weighted_mean / precision,
        variance: 1.0 / precision,
        rule,
        weights: Some(weights.clone()),
    })
}

/// `1 / mean(prior_varianceᵢ)`; the shared prior precision when every expert
/// uses the same prior.
pub fn mean_prior_precision(preds: &[ExpertPrediction]) -> f64 {
    let mean_var = preds.iter().map(|p| p.prior_variance).sum::<f64>() / preds.len() as f64;
    1.0 / mean_var
}

fn committee(
    preds: &[ExpertPrediction],
    betas: &[f64],
    prior_precision: f64,
    rule: Rule,
) -> Result<CombinedPrediction> {
    check_nonempty(preds)?;
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::input(format!("prior precision must be positive, got {prior_precision}")));
    }
    let (mut precision, mut weighted_mean, mut beta_sum) = (0.0, 0.0, 0.0);
    for (p, &b) in preds.iter().zip(betas) {
        let t = b / p.variance;
        precision += t;
        weighted_mean += t * p.mean;
        beta_sum += b;
    }
    precision += (1.0 - beta_sum) * prior_precision;
    if !(precision > 0.0 && precision.is_finite()) {
        return Err(Error::numerical(format!(
            "{rule} combined precision {precision:.6e} is not positive"
        )));
    }
    Ok(CombinedPrediction {
        mean: weighted_mean / precision,
        variance: 1.0 / precision,
        rule,
        weights: (rule == Rule::Rbcm).then(|| WeightVector(betas.to_vec())),
    })
}

pub fn combine_bcm(preds: &[ExpertPrediction], prior_precision: f64) -> Result<CombinedPrediction> {
    committee(preds, &vec![1.0; preds.len()], prior_precision, Rule::Bcm)
}

/// rBCM with unnormalized entropy-change weights βᵢ; the returned `weights`
/// carry the raw β (they are not on the simplex).
pub fn combine_rbcm(preds: &[ExpertPrediction], prior_precision: f64) -> Result<CombinedPrediction> {
    let betas: Vec<f64> = preds.iter().map(|p| p.entropy_change().max(0.0)).collect();
    committee(preds, &betas, prior_precision, Rule::Rbcm)
}

pub fn sym_kl_matrix(preds: &[ExpertPrediction]) -> KlMatrix {
    let k = preds.len();
    let mut q = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = sym_kl(&preds[i], &preds[j]);
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    KlMatrix(q)
}

/// `½ Qα` without materializing Q.
fn diversity_gradient(preds: &[ExpertPrediction], alphas: &[f64]) -> Vec<f64> {
    let k = preds.len();
    let mut grad = vec![0.0; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let q = sym_kl(&preds[i], &preds[j]);
            grad[i] += q * alphas[j];
            grad[j] += q * alphas[i];
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlopConfig {
    pub lambda: f64,
    pub steps: usize,
}

impl Default for DlopConfig {
    fn default() -> Self {
        Self { lambda: 1.0, steps: 1 }
    }
}

/// One normalized ascent step on `C` from `gpoe_weights`, then renormalization.
pub fn dlop_weights(preds: &[ExpertPrediction], gpoe_weights: &WeightVector, lambda: f64) -> WeightVector {
    dlop_weights_steps(preds, gpoe_weights, lambda, 1)
}

pub fn dlop_weights_steps(
    preds: &[ExpertPrediction],
    gpoe_weights: &WeightVector,
    lambda: f64,
    steps: usize,
) -> WeightVector {
    let mut alphas = gpoe_weights.alphas().to_vec();
    for _ in 0..steps {
        let grad = diversity_gradient(preds, &alphas);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(norm >= 1e-12) {
            break;
        }
        for (a, g) in alphas.iter_mut().zip(&grad) {
            *a += lambda * g / norm;
        }
        let total: f64 = alphas.iter().sum();
        for a in &mut alphas {
            *a /= total;
        }
    }
    WeightVector(alphas)
}

pub fn combine_dlop(preds: &[ExpertPrediction], cfg: &DlopConfig) -> Result<CombinedPrediction> {
    check_nonempty(preds)?;
    let gpoe = entropy_change_weights(preds);
    let weights = dlop_weights_steps(preds, &gpoe, cfg.lambda, cfg.steps);
    pooled(preds, &weights, Rule::Dlop)
}

/// Applies `rule` at one test point. BCM and rBCM use the mean prior precision
/// across experts.
pub fn combine(rule: Rule, preds: &[ExpertPrediction], dlop: &DlopConfig) -> Result<CombinedPrediction> {
    check_nonempty(preds)?;
    match rule {
        Rule::Bcm => combine_bcm(preds, mean_prior_precision(preds)),
        Rule::Rbcm => combine_rbcm(preds, mean_prior_precision(preds)),
        Rule::Gpoe => combine_gpoe(preds, &entropy_change_weights(preds)),
        Rule::Dlop => combine_dlop(preds, dlop),
    }
}
