//! Exact GP regression on one data subset.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{self, HyperParams, KernelSpec};

/// Gaussian predictive distribution of one expert at one test point.
///
/// Both variances include the observation noise, so `variance == prior_variance`
/// exactly when the training data has no influence at the point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertPrediction {
    pub mean: f64,
    pub variance: f64,
    pub prior_variance: f64,
}

impl ExpertPrediction {
    pub fn precision(&self) -> f64 {
        1.0 / self.variance
    }

    pub fn prior_precision(&self) -> f64 {
        1.0 / self.prior_variance
    }

    /// Differential entropy drop from prior to posterior, `½ log(prior / posterior)`.
    pub fn entropy_change(&self) -> f64 {
        0.5 * (self.prior_variance.ln() - self.variance.ln())
    }
}

/// A fitted expert: subset data plus the factorization of `K + σ_n² I`.
#[derive(Clone, Debug)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    spec: KernelSpec,
    params: HyperParams,
    chol: Cholesky<f64, Dyn>,
    solve_vec: DVector<f64>,
    jitter: f64,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

pub fn fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    params: &HyperParams,
) -> Result<GpModel> {
    params.validate(spec)?;
    kernel::check_inputs(spec, x, "training inputs")?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::input("cannot fit a GP to zero points"));
    }
    if y.len() != n {
        return Err(Error::input(format!("{} inputs but {} targets", n, y.len())));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::input("training targets must be finite"));
    }

    let mut k = kernel::self_cov(spec, params, x);
    let noise = params.noise_variance();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let scale = k.trace() / n as f64;

    let (chol, jitter) = factorize_with_jitter(k, scale).ok_or_else(|| {
        Error::numerical(format!(
            "Cholesky of K + noise failed for kernel `{spec}` with log params {:?} even with jitter {:e}",
            params.to_vec(),
            JITTER_MAX * scale
        ))
    })?;
    let solve_vec = chol.solve(y);
    Ok(GpModel {
        x: x.clone(),
        y: y.clone(),
        spec: spec.clone(),
        params: params.clone(),
        chol,
        solve_vec,
        jitter,
    })
}

fn factorize_with_jitter(k: DMatrix<f64>, scale: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = k.clone().cholesky() {
        return Some((c, 0.0));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Some((c, jitter));
        }
        rel *= 10.0;
    }
    None
}

impl GpModel {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    /// Lower-triangular factor of `K + (σ_n² + jitter) I`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve_vec(&self) -> &DVector<f64> {
        &self.solve_vec
    }

    /// Diagonal jitter that was needed to factorize, zero in the common case.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn prior_variance(&self) -> f64 {
        self.params.total_signal_variance() + self.params.noise_variance()
    }

    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<Vec<ExpertPrediction>> {
        kernel::check_inputs(&self.spec, xstar, "test inputs")?;
        if xstar.nrows() == 0 {
            return Ok(Vec::new());
        }
        let kstar = kernel::cross_cov(&self.spec, &self.params, &self.x, xstar);
        let means = kstar.tr_mul(&self.solve_vec);
        let v = self.chol.l_dirty().solve_lower_triangular(&kstar).ok_or_else(|| {
            Error::numerical("singular Cholesky factor during prediction")
        })?;
        let kss = self.params.total_signal_variance();
        let noise = self.params.noise_variance();
        Ok(means
            .iter()
            .zip(v.column_iter())
            .map(|(&mean, col)| {
                let latent = (kss - col.norm_squared()).max(0.0);
                ExpertPrediction {
                    mean,
                    variance: latent + noise,
                    prior_variance: kss + noise,
                }
            })
            .collect())
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n() as f64;
        let log_det_half: f64 = self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * self.y.dot(&self.solve_vec) - log_det_half - 0.5 * n * (2.0 * PI).ln()
    }

    /// Gradient of the log marginal likelihood with respect to every log
    /// hyperparameter, in [`HyperParams::to_vec`] order.
    pub fn lml_grad(&self) -> Vec<f64> {
        // ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)
        let mut w = self.chol.inverse();
        w.neg_mut();
        w.ger(1.0, &self.solve_vec, &self.solve_vec, 1.0);
        kernel::grad_contract(&self.spec, &self.params, &self.x, &w)
            .into_iter()
            .map(|g| 0.5 * g)
            .collect()
    }
}

pub fn predict(model: &GpModel, xstar: &DMatrix<f64>) -> Result<Vec<ExpertPrediction>> {
    model.predict(xstar)
}

/// Data-scaled starting point: lengthscales from input spread, signal from
/// target variance (split across sum members), noise at a tenth of it.
pub fn default_hypers(spec: &KernelSpec, x: &DMatrix<f64>, y: &DVector<f64>) -> HyperParams {
    let var_y = sample_variance(y.iter().copied()).max(1e-12);
    let log_ls: Vec<f64> = (0..spec.input_dim())
        .map(|d| {
            let sd = sample_variance(x.column(d).iter().copied()).sqrt();
            if sd > 1e-12 {
                sd.ln()
            } else {
                0.0
            }
        })
        .collect();
    let per_member = var_y / spec.members().len() as f64;
    HyperParams {
        members: spec
            .members()
            .iter()
            .map(|_| kernel::MemberParams {
                log_lengthscales: log_ls.clone(),
                log_signal_variance: per_member.ln(),
            })
            .collect(),
        log_noise_variance: (0.1 * var_y).ln(),
    }
}

fn sample_variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = v.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::BaseKernel;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn se(d: usize) -> KernelSpec {
        KernelSpec::new(BaseKernel::SeArd, d).unwrap()
    }

    fn random_problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.1..0.1));
        (x, y)
    }

    fn noisy_k(spec: &KernelSpec, p: &HyperParams, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = kernel::eval_kernel(spec, p, x, x).unwrap();
        for i in 0..x.nrows() {
            k[(i, i)] += p.noise_variance();
        }
        k
    }

    #[test]
    fn single_point_system() {
        let spec = se(1);
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 1.0);
        let m = fit(
            &DMatrix::from_element(1, 1, 0.0),
            &DVector::from_element(1, 2.0),
            &spec,
            &p,
        )
        .unwrap();
        assert_relative_eq!(m.chol_factor()[(0, 0)], 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(m.solve_vec()[0], 1.0, epsilon = 1e-14);
        // univariate Gaussian log density, v = 2
        let expected = -0.5 * 4.0 / 2.0 - 0.5 * 2f64.ln() - 0.5 * (2.0 * PI).ln();
        assert_relative_eq!(m.log_marginal_likelihood(), expected, epsilon = 1e-14);
    }

    #[test]
    fn solve_vec_matches_dense_inverse() {
        let (x, y) = random_problem(10, 2, 11);
        let spec = KernelSpec::parse("matern52", 2).unwrap();
        let p = HyperParams::uniform(&spec, 0.8, 1.2, 0.05);
        let m = fit(&x, &y, &spec, &p).unwrap();
        let direct = noisy_k(&spec, &p, &x).try_inverse().unwrap() * &y;
        assert!((m.solve_vec() - direct).amax() < 1e-8);
        let l = m.chol_factor();
        let recon = &l * l.transpose();
        let k = noisy_k(&spec, &p, &x);
        assert!((recon - &k).norm() / k.norm() <= 1e-8);
    }

    #[test]
    fn duplicated_inputs_fit() {
        let spec = se(1);
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 0.1);
        let x = DMatrix::from_row_slice(4, 1, &[0.5, 0.5, 0.5, 1.0]);
        let y = DVector::from_row_slice(&[1.0, 1.1, 0.9, 0.0]);
        assert!(fit(&x, &y, &spec, &p).is_ok());
    }

    #[test]
    fn near_singular_uses_jitter() {
        let spec = se(1);
        let p = HyperParams::uniform(&spec, 10.0, 1.0, 1e-300);
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 0.0]);
        let y = DVector::from_row_slice(&[1.0, 1.0, 1.0]);
        let m = fit(&x, &y, &spec, &p).unwrap();
        assert!(m.jitter() > 0.0);
    }

    #[test]
    fn fit_rejects_bad_shapes() {
        let spec = se(2);
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 0.1);
        let x = DMatrix::zeros(3, 2);
        assert!(fit(&x, &DVector::zeros(2), &spec, &p).is_err());
        assert!(fit(&DMatrix::zeros(3, 1), &DVector::zeros(3), &spec, &p).is_err());
        assert!(fit(&DMatrix::zeros(0, 2), &DVector::zeros(0), &spec, &p).is_err());
    }

    #[test]
    fn far_test_point_reverts_to_prior() {
        let (x, y) = random_problem(8, 1, 12);
        let spec = se(1);
        let p = HyperParams::uniform(&spec, 0.5, 1.5, 0.1);
        let m = fit(&x, &y, &spec, &p).unwrap();
        let pr = m.predict(&DMatrix::from_element(1, 1, 1e3)).unwrap()[0];
        assert!(pr.mean.abs() < 1e-6);
        assert!((pr.variance - pr.prior_variance).abs() < 1e-6);
        assert_relative_eq!(pr.prior_variance, 1.6, epsilon = 1e-12);
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let (x, y) = random_problem(6, 1, 13);
        let spec = se(1);
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 1e-8);
        let m = fit(&x, &y, &spec, &p).unwrap();
        let preds = m.predict(&x).unwrap();
        for (pr, yi) in preds.iter().zip(y.iter()) {
            assert!((pr.mean - yi).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_test_set() {
        let (x, y) = random_problem(4, 2, 14);
        let spec = se(2);
        let m = fit(&x, &y, &spec, &HyperParams::uniform(&spec, 1.0, 1.0, 0.1)).unwrap();
        assert!(m.predict(&DMatrix::zeros(0, 2)).unwrap().is_empty());
        assert!(m.predict(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn prediction_matches_brute_force() {
        for (seed, name) in [(20, "seard"), (21, "matern32"), (22, "seard+matern52")] {
            let (x, y) = random_problem(6, 2, seed);
            let spec = KernelSpec::parse(name, 2).unwrap();
            let p = HyperParams::uniform(&spec, 0.9, 1.1, 0.2);
            let m = fit(&x, &y, &spec, &p).unwrap();
            let (xs, _) = random_problem(5, 2, seed + 100);
            let kinv = noisy_k(&spec, &p, &x).try_inverse().unwrap();
            let ks = kernel::eval_kernel(&spec, &p, &x, &xs).unwrap();
            let preds = m.predict(&xs).unwrap();
            for j in 0..5 {
                let kj = ks.column(j);
                let mean = (kj.transpose() * &kinv * &y)[0];
                let var = p.total_signal_variance() + p.noise_variance()
                    - (kj.transpose() * &kinv * kj)[0];
                assert!((preds[j].mean - mean).abs() < 1e-8);
                assert!((preds[j].variance - var).abs() < 1e-8);
                assert!(preds[j].variance <= preds[j].prior_variance + 1e-9);
            }
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let (x, y) = random_problem(8, 3, 30);
        let h = 1e-5;
        for name in ["seard", "matern32", "matern52", "seard+matern32", "seard+matern32+matern52"] {
            let spec = KernelSpec::parse(name, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let lml = |t: &[f64]| {
                let p = HyperParams::from_slice(&spec, t).unwrap();
                fit(&x, &y, &spec, &p).unwrap().log_marginal_likelihood()
            };
            let m = fit(&x, &y, &spec, &HyperParams::from_slice(&spec, &theta).unwrap()).unwrap();
            let g = m.lml_grad();
            for i in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (lml(&tp) - lml(&tm)) / (2.0 * h);
                let err = (g[i] - fd).abs();
                assert!(
                    err <= 1e-8 || err <= 1e-5 * g[i].abs().max(fd.abs()),
                    "{name} param {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn lml_change_of_variables() {
        let (x, y) = random_problem(9, 2, 40);
        let spec = KernelSpec::parse("seard+matern32", 2).unwrap();
        let p = HyperParams::uniform(&spec, 0.7, 0.8, 0.3);
        let c: f64 = 3.5;
        let mut scaled = p.clone();
        for m in &mut scaled.members {
            m.log_signal_variance += 2.0 * c.ln();
        }
        scaled.log_noise_variance += 2.0 * c.ln();
        let base = fit(&x, &y, &spec, &p).unwrap().log_marginal_likelihood();
        let after = fit(&x, &(&y * c), &spec, &scaled).unwrap().log_marginal_likelihood();
        assert_relative_eq!(after - base, -(9.0) * c.ln(), epsilon = 1e-10);
    }

    #[test]
    fn fit_predict_deterministic() {
        let (x, y) = random_problem(12, 2, 50);
        let spec = se(2);
        let p = HyperParams::uniform(&spec, 1.0, 1.0, 0.1);
        let a = fit(&x, &y, &spec, &p).unwrap().predict(&x).unwrap();
        let b = fit(&x, &y, &spec, &p).unwrap().predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_hypers_are_data_scaled() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 5.0, 2.0, 5.0, 4.0, 5.0, 6.0, 5.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let spec = KernelSpec::parse("seard+matern52", 2).unwrap();
        let p = default_hypers(&spec, &x, &y);
        let var_y = 5.0 / 3.0;
        assert_relative_eq!(p.members[0].log_lengthscales[0], (20.0f64 / 3.0).sqrt().ln(), epsilon = 1e-12);
        // constant column falls back to unit lengthscale
        assert_eq!(p.members[0].log_lengthscales[1], 0.0);
        assert_relative_eq!(p.total_signal_variance(), var_y, epsilon = 1e-12);
        assert_relative_eq!(p.noise_variance(), 0.1 * var_y, epsilon = 1e-12);
    }
}
