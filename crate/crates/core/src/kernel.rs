//! Stationary ARD covariance functions and their log-space gradients.
//!
//! A [`KernelSpec`] is either a single base family or a flat sum of base
//! families. Each member owns a per-dimension lengthscale vector and a signal
//! variance; the observation noise variance lives at model level and is never
//! added by the evaluation routines here.
//!
//! Flattened parameter order (used by gradients and the optimizer): for each
//! member, its `d` log lengthscales followed by its log signal variance; the
//! log noise variance comes last.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKernel {
    SeArd,
    Matern32,
    Matern52,
}

impl BaseKernel {
    pub const ALL: [BaseKernel; 3] = [BaseKernel::SeArd, BaseKernel::Matern32, BaseKernel::Matern52];

    pub fn name(self) -> &'static str {
        match self {
            BaseKernel::SeArd => "seard",
            BaseKernel::Matern32 => "matern32",
            BaseKernel::Matern52 => "matern52",
        }
    }

    /// Returns `(k / s², g)` for a scaled squared distance `r²`, where
    /// `∂k/∂log ℓ_d = s² · g · (Δ_d / ℓ_d)²`.
    #[inline]
    fn profile(self, r2: f64) -> (f64, f64) {
        match self {
            BaseKernel::SeArd => {
                let k = (-0.5 * r2).exp();
                (k, k)
            }
            BaseKernel::Matern32 => {
                let r = r2.sqrt();
                let e = (-SQRT3 * r).exp();
                ((1.0 + SQRT3 * r) * e, 3.0 * e)
            }
            BaseKernel::Matern52 => {
                let r = r2.sqrt();
                let e = (-SQRT5 * r).exp();
                (
                    (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * e,
                    5.0 / 3.0 * (1.0 + SQRT5 * r) * e,
                )
            }
        }
    }
}

impl FromStr for BaseKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seard" | "se" | "rbf" => Ok(BaseKernel::SeArd),
            "matern32" => Ok(BaseKernel::Matern32),
            "matern52" => Ok(BaseKernel::Matern52),
            other => Err(Error::input(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// A single base kernel or a flat sum of at least two base kernels over
/// `input_dim` inputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    members: Vec<BaseKernel>,
    input_dim: usize,
}

impl KernelSpec {
    pub fn new(family: BaseKernel, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::input("kernel input_dim must be positive"));
        }
        Ok(Self {
            members: vec![family],
            input_dim,
        })
    }

    pub fn sum(members: Vec<BaseKernel>, input_dim: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::input("a sum kernel needs at least two members"));
        }
        if input_dim == 0 {
            return Err(Error::input("kernel input_dim must be positive"));
        }
        Ok(Self { members, input_dim })
    }

    /// Parses the config grammar: `"seard"`, `"matern32"`, `"seard+matern52"`, ...
    pub fn parse(s: &str, input_dim: usize) -> Result<Self> {
        let members = s
            .split('+')
            .map(BaseKernel::from_str)
            .collect::<Result<Vec<_>>>()?;
        match members.as_slice() {
            [] => Err(Error::input("empty kernel specification")),
            [single] => Self::new(*single, input_dim),
            _ => Self::sum(members, input_dim),
        }
    }

    pub fn members(&self) -> &[BaseKernel] {
        &self.members
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn is_sum(&self) -> bool {
        self.members.len() > 1
    }

    /// Number of log hyperparameters including the noise term.
    pub fn n_params(&self) -> usize {
        self.members.len() * (self.input_dim + 1) + 1
    }

    pub fn name(&self) -> String {
        self.members
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
}

/// Log-scale hyperparameters matching a [`KernelSpec`] member for member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub members: Vec<MemberParams>,
    pub log_noise_variance: f64,
}

impl HyperParams {
    /// Every member gets the same lengthscale in every dimension and the same
    /// signal variance.
    pub fn uniform(
        spec: &KernelSpec,
        lengthscale: f64,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Self {
        let member = MemberParams {
            log_lengthscales: vec![lengthscale.ln(); spec.input_dim()],
            log_signal_variance: signal_variance.ln(),
        };
        Self {
            members: vec![member; spec.members().len()],
            log_noise_variance: noise_variance.ln(),
        }
    }

    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        if self.members.len() != spec.members().len() {
            return Err(Error::input(format!(
                "kernel `{spec}` has {} members but {} parameter blocks were given",
                spec.members().len(),
                self.members.len()
            )));
        }
        for m in &self.members {
            if m.log_lengthscales.len() != spec.input_dim() {
                return Err(Error::input(format!(
                    "expected {} lengthscales, got {}",
                    spec.input_dim(),
                    m.log_lengthscales.len()
                )));
            }
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::input("hyperparameters must be finite"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// `k(x, x)` for any stationary member combination.
    pub fn total_signal_variance(&self) -> f64 {
        self.members.iter().map(|m| m.log_signal_variance.exp()).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.members.len() * 4 + 1);
        for m in &self.members {
            out.extend_from_slice(&m.log_lengthscales);
            out.push(m.log_signal_variance);
        }
        out.push(self.log_noise_variance);
        out
    }

    pub fn from_slice(spec: &KernelSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.n_params() {
            return Err(Error::input(format!(
                "kernel `{spec}` needs {} parameters, got {}",
                spec.n_params(),
                theta.len()
            )));
        }
        let d = spec.input_dim();
        let members = theta[..theta.len() - 1]
            .chunks_exact(d + 1)
            .map(|c| MemberParams {
                log_lengthscales: c[..d].to_vec(),
                log_signal_variance: c[d],
            })
            .collect();
        Ok(Self {
            members,
            log_noise_variance: theta[theta.len() - 1],
        })
    }
}

pub(crate) fn check_inputs(spec: &KernelSpec, x: &DMatrix<f64>, what: &str) -> Result<()> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::input(format!(
            "{what} has {} columns but the kernel expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::input(format!(
            "{what} has a non-finite entry at row {}",
            pos % x.nrows().max(1)
        )));
    }
    Ok(())
}

/// Row-major copy of `x` with column `d` divided by `exp(log_ls[d])`.
fn scaled_rows(x: &DMatrix<f64>, log_ls: &[f64]) -> Vec<f64> {
    let (n, d) = x.shape();
    let inv: Vec<f64> = log_ls.iter().map(|l| (-l).exp()).collect();
    let mut out = vec![0.0; n * d];
    for j in 0..d {
        for i in 0..n {
            out[i * d + j] = x[(i, j)] * inv[j];
        }
    }
    out
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Cross-covariance without validation.
pub(crate) fn cross_cov(
    spec: &KernelSpec,
    params: &HyperParams,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = spec.input_dim();
    let (n, m) = (x1.nrows(), x2.nrows());
    let mut k = DMatrix::zeros(n, m);
    for (family, mp) in spec.members().iter().zip(&params.members) {
        let s2 = mp.log_signal_variance.exp();
        let a = scaled_rows(x1, &mp.log_lengthscales);
        let b = scaled_rows(x2, &mp.log_lengthscales);
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let col = k.column_mut(j);
            for (i, kij) in col.into_iter().enumerate() {
                *kij += s2 * family.profile(sq_dist(&a[i * d..(i + 1) * d], bj)).0;
            }
        }
    }
    k
}

/// Symmetric `K(X, X)`, evaluating each pair once.
pub(crate) fn self_cov(spec: &KernelSpec, params: &HyperParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = spec.input_dim();
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for (family, mp) in spec.members().iter().zip(&params.members) {
        let s2 = mp.log_signal_variance.exp();
        let a = scaled_rows(x, &mp.log_lengthscales);
        for j in 0..n {
            let aj = &a[j * d..(j + 1) * d];
            k[(j, j)] += s2;
            for i in (j + 1)..n {
                k[(i, j)] += s2 * family.profile(sq_dist(&a[i * d..(i + 1) * d], aj)).0;
            }
        }
    }
    k.fill_upper_triangle_with_lower_triangle();
    k
}

/// `Σ_ij W_ij ∂K_ij/∂θ_p` for every log hyperparameter θ_p (noise last),
/// where `K` includes the noise term. `w` must be symmetric.
pub(crate) fn grad_contract(
    spec: &KernelSpec,
    params: &HyperParams,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Vec<f64> {
    let d = spec.input_dim();
    let n = x.nrows();
    let mut grad = vec![0.0; spec.n_params()];
    let mut sq = vec![0.0; d];
    for (mi, (family, mp)) in spec.members().iter().zip(&params.members).enumerate() {
        let base = mi * (d + 1);
        let s2 = mp.log_signal_variance.exp();
        let a = scaled_rows(x, &mp.log_lengthscales);
        let mut ls_acc = vec![0.0; d];
        let mut sig_acc = 0.0;
        for j in 0..n {
            let aj = &a[j * d..(j + 1) * d];
            sig_acc += w[(j, j)];
            for i in (j + 1)..n {
                let ai = &a[i * d..(i + 1) * d];
                let mut r2 = 0.0;
                for k in 0..d {
                    let diff = ai[k] - aj[k];
                    sq[k] = diff * diff;
                    r2 += sq[k];
                }
                let (k0, g) = family.profile(r2);
                let wij = 2.0 * w[(i, j)];
                sig_acc += wij * k0;
                let wg = wij * g;
                for k in 0..d {
                    ls_acc[k] += wg * sq[k];
                }
            }
        }
        for k in 0..d {
            grad[base + k] = s2 * ls_acc[k];
        }
        grad[base + d] = s2 * sig_acc;
    }
    grad[spec.n_params() - 1] = params.noise_variance() * w.trace();
    grad
}

/// `K(X1, X2)` without the noise term.
pub fn eval_kernel(
    spec: &KernelSpec,
    params: &HyperParams,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    params.validate(spec)?;
    check_inputs(spec, x1, "X1")?;
    check_inputs(spec, x2, "X2")?;
    Ok(cross_cov(spec, params, x1, x2))
}

/// Diagonal of `K(X, X)`; every supported family is stationary so this is
/// the total signal variance repeated.
pub fn eval_kernel_diag(
    spec: &KernelSpec,
    params: &HyperParams,
    x: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    params.validate(spec)?;
    check_inputs(spec, x, "X")?;
    Ok(vec![params.total_signal_variance(); x.nrows()])
}

/// `∂(K + σ_n² I)/∂θ` for each log hyperparameter, in flattened order.
pub fn kernel_grad(
    spec: &KernelSpec,
    params: &HyperParams,
    x: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    params.validate(spec)?;
    check_inputs(spec, x, "X")?;
    let d = spec.input_dim();
    let n = x.nrows();
    let mut out = Vec::with_capacity(spec.n_params());
    for (family, mp) in spec.members().iter().zip(&params.members) {
        let s2 = mp.log_signal_variance.exp();
        let a = scaled_rows(x, &mp.log_lengthscales);
        let mut ls = vec![DMatrix::zeros(n, n); d];
        let mut sig = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let ai = &a[i * d..(i + 1) * d];
                let aj = &a[j * d..(j + 1) * d];
                let (k0, g) = family.profile(sq_dist(ai, aj));
                sig[(i, j)] = s2 * k0;
                for k in 0..d {
                    let diff = ai[k] - aj[k];
                    ls[k][(i, j)] = s2 * g * diff * diff;
                }
            }
        }
        out.extend(ls);
        out.push(sig);
    }
    out.push(DMatrix::identity(n, n) * params.noise_variance());
    Ok(out)
}
