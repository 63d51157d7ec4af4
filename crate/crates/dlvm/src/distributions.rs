//! Output and variational distribution families: log-densities, samplers,
//! and divergences.
//!
//! Gaussian sampling is reparameterised (`mean + sqrt(diag) * eps1 + u *
//! eps2`), so the same code path serves both plain sampling and
//! pathwise-gradient construction. All normal variates come from
//! [`RngStream::standard_normal`], which is pinned for reproducibility.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Bernoulli probabilities are kept inside `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`
/// so log-masses stay finite under decoder saturation.
pub const BERNOULLI_EPS: f64 = 1e-7;

/// Isotropic Gaussian `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianIso {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GaussianIso {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::contract(format!(
                "isotropic Gaussian variance must be positive, got {variance}"
            )));
        }
        Ok(GaussianIso { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianIso {
            mean: vec![0.0; dim],
            variance: 1.0,
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.mean.len())?;
        let p = x.len() as f64;
        let quad: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(xi, mi)| (xi - mi) * (xi - mi))
            .sum();
        Ok(-0.5 * p * (LN_2PI + self.variance.ln()) - 0.5 * quad / self.variance)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let sd = self.variance.sqrt();
        self.mean
            .iter()
            .map(|m| m + sd * rng.standard_normal())
            .collect()
    }
}

/// Diagonal-covariance Gaussian. Inverse variances and the log-determinant
/// are precomputed at construction: one decoded distribution is typically
/// evaluated at many points (Monte Carlo likelihood sweeps, EM
/// responsibilities, acceptance ratios), so density evaluations reduce to
/// multiply-adds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "GaussianDiagRepr", into = "GaussianDiagRepr")]
pub struct GaussianDiag {
    mean: Vec<f64>,
    diag: Vec<f64>,
    inv_diag: Vec<f64>,
    sum_log_diag: f64,
}

#[derive(Serialize, Deserialize, Clone)]
struct GaussianDiagRepr {
    mean: Vec<f64>,
    diag: Vec<f64>,
}

impl From<GaussianDiagRepr> for GaussianDiag {
    fn from(r: GaussianDiagRepr) -> Self {
        GaussianDiag::new_unchecked(r.mean, r.diag)
    }
}

impl From<GaussianDiag> for GaussianDiagRepr {
    fn from(g: GaussianDiag) -> Self {
        GaussianDiagRepr {
            mean: g.mean,
            diag: g.diag,
        }
    }
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, diag: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), diag.len())?;
        if diag.iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("diagonal variances must be positive"));
        }
        Ok(Self::new_unchecked(mean, diag))
    }

    pub(crate) fn new_unchecked(mean: Vec<f64>, diag: Vec<f64>) -> Self {
        let inv_diag: Vec<f64> = diag.iter().map(|v| 1.0 / v).collect();
        let sum_log_diag = diag.iter().map(|v| v.ln()).sum();
        GaussianDiag {
            mean,
            diag,
            inv_diag,
            sum_log_diag,
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.mean.len())?;
        let mut quad = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            quad += d * d * self.inv_diag[i];
        }
        Ok(-0.5 * (x.len() as f64 * LN_2PI + self.sum_log_diag + quad))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.diag)
            .map(|(m, v)| m + v.sqrt() * rng.standard_normal())
            .collect()
    }
}

/// Gaussian with covariance `Diag(diag) + u u^T` - the variational family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiagRank1 {
    pub mean: Vec<f64>,
    pub diag: Vec<f64>,
    pub u: Vec<f64>,
}

impl GaussianDiagRank1 {
    pub fn new(mean: Vec<f64>, diag: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), diag.len())?;
        check_dim(mean.len(), u.len())?;
        if diag.iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("diagonal variances must be positive"));
        }
        Ok(GaussianDiagRank1 { mean, diag, u })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Exact log-density using the rank-1 determinant and Sherman-Morrison
    /// identities:
    /// `log|D + uu^T| = log|D| + log(1 + u^T D^-1 u)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.mean.len())?;
        let d = x.len();
        let mut logdet_d = 0.0;
        let mut s = 0.0; // u^T D^-1 u
        let mut quad_d = 0.0; // r^T D^-1 r
        let mut cross = 0.0; // r^T D^-1 u
        for i in 0..d {
            let r = x[i] - self.mean[i];
            logdet_d += self.diag[i].ln();
            s += self.u[i] * self.u[i] / self.diag[i];
            quad_d += r * r / self.diag[i];
            cross += r * self.u[i] / self.diag[i];
        }
        let logdet = logdet_d + (1.0 + s).ln();
        let quad = quad_d - cross * cross / (1.0 + s);
        Ok(-0.5 * (d as f64 * LN_2PI + logdet + quad))
    }

    /// Reparameterised draw: `mean + sqrt(diag) * eps1 + u * eps2`.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let (eps1, eps2) = draw_reparam_eps(rng, self.dim());
        self.sample_with_eps(&eps1, eps2)
    }

    pub fn sample_with_eps(&self, eps1: &[f64], eps2: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.mean[i] + self.diag[i].sqrt() * eps1[i] + self.u[i] * eps2)
            .collect()
    }
}

/// Draws the noise pair used by the reparameterised diag + rank-1 sampler.
/// The order (the `d` diagonal variates first, then the rank-1 variate) is
/// pinned so tape-based and plain evaluations share random numbers.
pub fn draw_reparam_eps(rng: &mut RngStream, dim: usize) -> (Vec<f64>, f64) {
    let eps1 = rng.standard_normal_vec(dim);
    let eps2 = rng.standard_normal();
    (eps1, eps2)
}

/// Product of independent Bernoulli variables. Log-probabilities are
/// tabulated at construction for the same reason as [`GaussianDiag`]: one
/// decoded distribution gets evaluated at many binary vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BernoulliRepr", into = "BernoulliRepr")]
pub struct BernoulliProduct {
    probs: Vec<f64>,
    log_p: Vec<f64>,
    log_1mp: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct BernoulliRepr {
    probs: Vec<f64>,
}

impl From<BernoulliRepr> for BernoulliProduct {
    fn from(r: BernoulliRepr) -> Self {
        BernoulliProduct::new(r.probs)
    }
}

impl From<BernoulliProduct> for BernoulliRepr {
    fn from(b: BernoulliProduct) -> Self {
        BernoulliRepr { probs: b.probs }
    }
}

impl BernoulliProduct {
    /// Probabilities are clamped into `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`.
    pub fn new(probs: Vec<f64>) -> Self {
        let probs: Vec<f64> = probs
            .into_iter()
            .map(|p| p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS))
            .collect();
        let log_p = probs.iter().map(|p| p.ln()).collect();
        let log_1mp = probs.iter().map(|p| (1.0 - p).ln()).collect();
        BernoulliProduct {
            probs,
            log_p,
            log_1mp,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    /// Log-mass of a binary vector; always non-positive.
    pub fn log_mass(&self, x: &[f64]) -> Result<f64> {
        check_dim(x.len(), self.probs.len())?;
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            if *xi == 1.0 {
                acc += self.log_p[i];
            } else if *xi == 0.0 {
                acc += self.log_1mp[i];
            } else {
                return Err(Error::contract(format!(
                    "Bernoulli log-mass needs binary input, got {xi}"
                )));
            }
        }
        Ok(acc)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Output distribution emitted by a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum OutputDist {
    Gaussian(GaussianDiag),
    Bernoulli(BernoulliProduct),
}

impl OutputDist {
    pub fn dim(&self) -> usize {
        match self {
            OutputDist::Gaussian(g) => g.dim(),
            OutputDist::Bernoulli(b) => b.dim(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            OutputDist::Gaussian(g) => g.log_density(x),
            OutputDist::Bernoulli(b) => b.log_mass(x),
        }
    }

    /// Log-density of the coordinates selected by `idx` (valid for product
    /// families: the marginal is the coordinate-wise restriction).
    pub fn log_density_at(&self, x: &[f64], idx: &[usize]) -> Result<f64> {
        match self {
            OutputDist::Gaussian(g) => {
                let mut acc = 0.0;
                for (xi, &i) in x.iter().zip(idx) {
                    let d = xi - g.mean()[i];
                    acc += LN_2PI + g.diag()[i].ln() + d * d / g.diag()[i];
                }
                Ok(-0.5 * acc)
            }
            OutputDist::Bernoulli(b) => {
                let mut acc = 0.0;
                for (xi, &i) in x.iter().zip(idx) {
                    acc += if *xi == 1.0 {
                        b.log_p[i]
                    } else {
                        b.log_1mp[i]
                    };
                }
                Ok(acc)
            }
        }
    }

    /// Samples only the coordinates selected by `idx`.
    pub fn sample_at(&self, idx: &[usize], rng: &mut RngStream) -> Vec<f64> {
        match self {
            OutputDist::Gaussian(g) => idx
                .iter()
                .map(|&i| g.mean()[i] + g.diag()[i].sqrt() * rng.standard_normal())
                .collect(),
            OutputDist::Bernoulli(b) => idx
                .iter()
                .map(|&i| if rng.uniform() < b.probs()[i] { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Log-density of the standard normal prior.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let quad: f64 = z.iter().map(|zi| zi * zi).sum();
    -0.5 * (z.len() as f64 * LN_2PI + quad)
}

/// Max-shifted, numerically stable `log(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("log_sum_exp of an empty slice"));
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// `KL(q || N(0, I))` for the diag + rank-1 family:
/// `0.5 * (tr(S) + |mu|^2 - d - log|S|)`.
pub fn kl_gaussian_to_std(q: &GaussianDiagRank1) -> f64 {
    let d = q.dim() as f64;
    let trace: f64 = q.diag.iter().sum::<f64>() + q.u.iter().map(|u| u * u).sum::<f64>();
    let mean_sq: f64 = q.mean.iter().map(|m| m * m).sum();
    let s: f64 = q
        .u
        .iter()
        .zip(&q.diag)
        .map(|(u, v)| u * u / v)
        .sum();
    let logdet = q.diag.iter().map(|v| v.ln()).sum::<f64>() + (1.0 + s).ln();
    0.5 * (trace + mean_sq - d - logdet)
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "dimension mismatch: {got} vs {want}"
        )));
    }
    Ok(())
}

/// Tape-side density builders shared by the ELBO estimators. These mirror the
/// plain evaluations above, term for term, so values agree bitwise when fed
/// the same inputs.
pub mod graph {
    use super::*;

    /// `log N(x | mean, Diag(var))` for a constant observation `x`.
    pub fn gaussian_diag_logpdf(tape: &mut Tape, x: &[f64], mean: Var, var: Var) -> Result<Var> {
        let xc = tape.constant(Tensor::vector(x.to_vec()));
        let diff = tape.sub(xc, mean)?;
        let sq = tape.mul(diff, diff)?;
        let quad = tape.div(sq, var)?;
        let logvar = tape.log(var);
        let inner = tape.add(quad, logvar)?;
        let inner = tape.add_scalar(inner, LN_2PI);
        let total = tape.sum(inner);
        Ok(tape.mul_scalar(total, -0.5))
    }

    /// `log Bernoulli(x | probs)` for a constant binary observation `x`.
    pub fn bernoulli_logpmf(tape: &mut Tape, x: &[f64], probs: Var) -> Result<Var> {
        let xc = tape.constant(Tensor::vector(x.to_vec()));
        let ones = tape.constant(Tensor::vector(vec![1.0; x.len()]));
        let log_p = tape.log(probs);
        let one_m_p = tape.sub(ones, probs)?;
        let log_1mp = tape.log(one_m_p);
        let x_comp = tape.sub(ones, xc)?;
        let a = tape.mul(xc, log_p)?;
        let b = tape.mul(x_comp, log_1mp)?;
        let s = tape.add(a, b)?;
        Ok(tape.sum(s))
    }

    /// `log N(z | 0, I)` where `z` is a tape node.
    pub fn std_normal_logpdf(tape: &mut Tape, z: Var) -> Result<Var> {
        let d = tape.value(z).len() as f64;
        let sq = tape.mul(z, z)?;
        let quad = tape.sum(sq);
        let quad = tape.mul_scalar(quad, -0.5);
        Ok(tape.add_scalar(quad, -0.5 * d * LN_2PI))
    }

    /// Reparameterised draw `mean + exp(logdiag / 2) * eps1 + u * eps2` as a
    /// tape node; gradients flow into `mean`, `logdiag`, `u`.
    pub fn reparam_sample(
        tape: &mut Tape,
        mean: Var,
        logdiag: Var,
        u: Var,
        eps1: &[f64],
        eps2: f64,
    ) -> Result<Var> {
        let half_log = tape.mul_scalar(logdiag, 0.5);
        let sd = tape.exp(half_log);
        let e1 = tape.constant(Tensor::vector(eps1.to_vec()));
        let noise1 = tape.mul(sd, e1)?;
        let noise2 = tape.mul_scalar(u, eps2);
        let z = tape.add(mean, noise1)?;
        tape.add(z, noise2)
    }

    /// `log q(z | mean, Diag(exp(logdiag)) + u u^T)` on the tape.
    ///
    /// With `detach_params`, the distribution parameters are wrapped in stop-
    /// gradient markers before the density is formed: adjoints then reach the
    /// parameters only through `z` itself. That is exactly the path-derivative
    /// construction - the score-function term of the total derivative is
    /// removed.
    pub fn rank1_logpdf(
        tape: &mut Tape,
        z: Var,
        mean: Var,
        logdiag: Var,
        u: Var,
        detach_params: bool,
    ) -> Result<Var> {
        let (mean, logdiag, u) = if detach_params {
            (
                tape.stop_gradient(mean),
                tape.stop_gradient(logdiag),
                tape.stop_gradient(u),
            )
        } else {
            (mean, logdiag, u)
        };
        let d = tape.value(z).len() as f64;
        let diag = tape.exp(logdiag);
        let r = tape.sub(z, mean)?;

        // r^T D^-1 r
        let r_sq = tape.mul(r, r)?;
        let r_over = tape.div(r_sq, diag)?;
        let quad_d = tape.sum(r_over);

        // u^T D^-1 u
        let u_sq = tape.mul(u, u)?;
        let u_over = tape.div(u_sq, diag)?;
        let s = tape.sum(u_over);

        // r^T D^-1 u
        let ru = tape.mul(r, u)?;
        let ru_over = tape.div(ru, diag)?;
        let cross = tape.sum(ru_over);

        let one_plus_s = tape.add_scalar(s, 1.0);
        let cross_sq = tape.mul(cross, cross)?;
        let correction = tape.div(cross_sq, one_plus_s)?;
        let quad = tape.sub(quad_d, correction)?;

        let logdet_d = tape.sum(logdiag);
        let log_ops = tape.log(one_plus_s);
        let logdet = tape.add(logdet_d, log_ops)?;

        let inner = tape.add(quad, logdet)?;
        let inner = tape.add_scalar(inner, d * LN_2PI);
        Ok(tape.mul_scalar(inner, -0.5))
    }
}
