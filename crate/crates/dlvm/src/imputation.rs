//! Missing-data machinery: masks, the pseudo-Gibbs chain, the
//! Metropolis-within-Gibbs chain, scoring, and the linear-Gaussian
//! exactness oracle.
//!
//! Both samplers walk a Markov chain over `(z_t, x_miss_t)`. Pseudo-Gibbs
//! draws the code straight from the approximate posterior, so its stationary
//! law inherits every defect of the encoder. Metropolis-within-Gibbs instead
//! uses the encoder draw as an independent Metropolis-Hastings proposal for
//! the exact conditional `p(z | x_obs, x_miss)`: the acceptance probability
//! is a ratio of importance ratios, equal to one when the posterior
//! approximation is perfect, and the chain targets the true conditional
//! regardless of encoder quality. Every quantity in the ratio is needed by
//! the pseudo-Gibbs step too (the decoder output for the current code is
//! cached on the state), so the extra cost is a handful of density
//! evaluations.

use crate::data::{DataKind, Dataset};
use crate::distributions::{std_normal_logpdf, GaussianDiag, GaussianDiagRank1, OutputDist};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{DecodeModel, EncodeModel};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Missing-data scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskScenario {
    /// Missing uniformly at random with the given fraction in `(0, 1)`.
    Mar { fraction: f64 },
    /// First half of the (row-major image) features missing.
    TopHalf,
    /// Last half of the features missing.
    BottomHalf,
}

impl fmt::Display for MaskScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskScenario::Mar { fraction } => write!(f, "mar-{fraction}"),
            MaskScenario::TopHalf => write!(f, "top-half"),
            MaskScenario::BottomHalf => write!(f, "bottom-half"),
        }
    }
}

/// Partition of `0..p` into observed and missing index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessMask {
    p: usize,
    observed: Vec<usize>,
    missing: Vec<usize>,
    pub scenario: MaskScenario,
}

impl MissingnessMask {
    pub fn from_missing(p: usize, mut missing: Vec<usize>, scenario: MaskScenario) -> Result<Self> {
        missing.sort_unstable();
        missing.dedup();
        if missing.iter().any(|&i| i >= p) {
            return Err(Error::contract("missing index out of range"));
        }
        let observed = (0..p).filter(|i| !missing.contains(i)).collect();
        Ok(MissingnessMask {
            p,
            observed,
            missing,
            scenario,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    /// Full vector from the observed coordinates of `x` and imputed missing
    /// values.
    pub fn assemble(&self, x: &[f64], x_miss: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.p);
        debug_assert_eq!(x_miss.len(), self.missing.len());
        let mut full = x.to_vec();
        for (slot, &idx) in x_miss.iter().zip(&self.missing) {
            full[idx] = *slot;
        }
        full
    }

    pub fn extract_missing(&self, x: &[f64]) -> Vec<f64> {
        self.missing.iter().map(|&i| x[i]).collect()
    }
}

/// Draws a mask: MAR picks exactly `round(f * p)` indices uniformly without
/// replacement; the half scenarios split the feature vector in the declared
/// row-major order.
pub fn make_mask(p: usize, scenario: MaskScenario, rng: &mut RngStream) -> Result<MissingnessMask> {
    match scenario {
        MaskScenario::Mar { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::contract(format!(
                    "MAR fraction must lie in (0, 1), got {fraction}"
                )));
            }
            let k = (fraction * p as f64).round() as usize;
            let missing = rng.sample_without_replacement(p, k.min(p));
            MissingnessMask::from_missing(p, missing, scenario)
        }
        MaskScenario::TopHalf | MaskScenario::BottomHalf => {
            if !p.is_multiple_of(2) {
                return Err(Error::contract("half masks need an even feature count"));
            }
            let missing: Vec<usize> = match scenario {
                MaskScenario::TopHalf => (0..p / 2).collect(),
                _ => (p / 2..p).collect(),
            };
            MissingnessMask::from_missing(p, missing, scenario)
        }
    }
}

/// Which chain is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    PseudoGibbs,
    MetropolisWithinGibbs,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerKind::PseudoGibbs => write!(f, "pg"),
            SamplerKind::MetropolisWithinGibbs => write!(f, "mwg"),
        }
    }
}

/// Markov-chain state `(z_t, x_miss_t)` plus bookkeeping. The decoder output
/// at the current code is cached so the acceptance ratio never re-decodes the
/// retained code.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub t: u64,
    pub z: Vec<f64>,
    pub x_miss: Vec<f64>,
    pub accepted: u64,
    pub mode: SamplerKind,
    pub decoded: OutputDist,
}

/// Random initial imputation: fair coin flips for binary outputs, the mean of
/// the observed coordinates for Gaussian outputs (zero when nothing is
/// observed). The initial code comes from the encoder at the completed
/// vector.
pub fn init_chain<D, E>(
    decoder: &D,
    encoder: &E,
    x: &[f64],
    mask: &MissingnessMask,
    rng: &mut RngStream,
) -> Result<ChainState>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    let m = mask.missing().len();
    let probe = decoder.decode(&vec![0.0; decoder.latent_dim()]);
    let x_miss: Vec<f64> = match probe {
        OutputDist::Bernoulli(_) => (0..m)
            .map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 })
            .collect(),
        OutputDist::Gaussian(_) => {
            let obs = mask.observed();
            let fill = if obs.is_empty() {
                0.0
            } else {
                obs.iter().map(|&i| x[i]).sum::<f64>() / obs.len() as f64
            };
            vec![fill; m]
        }
    };
    let x_full = mask.assemble(x, &x_miss);
    let q = encoder.encode_dist(&x_full);
    let z = q.sample(rng);
    let decoded = decoder.decode(&z);
    Ok(ChainState {
        t: 0,
        z,
        x_miss,
        accepted: 0,
        mode: SamplerKind::PseudoGibbs,
        decoded,
    })
}

/// One pseudo-Gibbs sweep: `z ~ Psi(z | g(x_obs, x_miss))`, then
/// `x_miss ~ Phi(x_miss | f(z))` (the product structure makes the
/// conditional the coordinate marginal).
pub fn pseudo_gibbs_step<D, E>(
    state: &mut ChainState,
    x: &[f64],
    mask: &MissingnessMask,
    decoder: &D,
    encoder: &E,
    rng: &mut RngStream,
) -> Result<()>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    let x_full = mask.assemble(x, &state.x_miss);
    let q = encoder.encode_dist(&x_full);
    state.z = q.sample(rng);
    state.decoded = decoder.decode(&state.z);
    state.x_miss = state.decoded.sample_at(mask.missing(), rng);
    state.t += 1;
    state.mode = SamplerKind::PseudoGibbs;
    Ok(())
}

fn log_importance_weight(
    decoded: &OutputDist,
    z: &[f64],
    q: &GaussianDiagRank1,
    x_full: &[f64],
) -> Result<f64> {
    Ok(decoded.log_density(x_full)? + std_normal_logpdf(z) - q.log_density(z)?)
}

fn rho_from_log_weights(log_w_proposed: f64, log_w_current: f64) -> f64 {
    if log_w_proposed == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_w_current == f64::NEG_INFINITY {
        return 1.0;
    }
    (log_w_proposed - log_w_current).exp().min(1.0)
}

/// Acceptance probability of the independent Metropolis-Hastings move: the
/// ratio of importance ratios
/// `[Phi(x_full | f(z_prop)) p(z_prop) / Psi(z_prop | kappa)] /
///  [Phi(x_full | f(z_cur))  p(z_cur)  / Psi(z_cur  | kappa)]`
/// with `kappa = g(x_obs, x_miss_prev)`, clamped at one. Computed in log
/// space; infinite log-masses resolve to hard accept/reject.
pub fn mwg_acceptance<D, E>(
    decoder: &D,
    encoder: &E,
    x: &[f64],
    mask: &MissingnessMask,
    x_miss_prev: &[f64],
    z_proposed: &[f64],
    z_current: &[f64],
) -> Result<f64>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    if !z_proposed.iter().chain(z_current).all(|v| v.is_finite()) {
        return Err(Error::contract("acceptance ratio needs finite codes"));
    }
    let x_full = mask.assemble(x, x_miss_prev);
    let q = encoder.encode_dist(&x_full);
    let out_prop = decoder.decode(z_proposed);
    let out_cur = decoder.decode(z_current);
    let lw_prop = log_importance_weight(&out_prop, z_proposed, &q, &x_full)?;
    let lw_cur = log_importance_weight(&out_cur, z_current, &q, &x_full)?;
    Ok(rho_from_log_weights(lw_prop, lw_cur))
}

/// One Metropolis-within-Gibbs sweep: propose from the encoder, accept with
/// the importance-ratio probability (ties at one accepted deterministically,
/// without consuming a uniform), then refresh the missing coordinates from
/// the decoder at the retained code.
pub fn mwg_step<D, E>(
    state: &mut ChainState,
    x: &[f64],
    mask: &MissingnessMask,
    decoder: &D,
    encoder: &E,
    rng: &mut RngStream,
) -> Result<()>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    let x_full = mask.assemble(x, &state.x_miss);
    let q = encoder.encode_dist(&x_full);
    let z_prop = q.sample(rng);
    let out_prop = decoder.decode(&z_prop);
    let lw_prop = log_importance_weight(&out_prop, &z_prop, &q, &x_full)?;
    let lw_cur = log_importance_weight(&state.decoded, &state.z, &q, &x_full)?;

    let accept = if lw_prop == f64::NEG_INFINITY {
        false
    } else if lw_cur == f64::NEG_INFINITY || lw_prop >= lw_cur {
        true
    } else {
        rng.uniform().ln() < lw_prop - lw_cur
    };
    if accept {
        state.z = z_prop;
        state.decoded = out_prop;
        state.accepted += 1;
    }
    state.x_miss = state.decoded.sample_at(mask.missing(), rng);
    state.t += 1;
    state.mode = SamplerKind::MetropolisWithinGibbs;
    Ok(())
}

/// Output of one chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    /// Aggregated single imputation over the kept tail: coordinate majority
    /// vote for binary outputs (ties round up), mean for Gaussian outputs.
    pub final_imputation: Vec<f64>,
    /// Accepted / attempted Metropolis moves; 1 for pure pseudo-Gibbs.
    pub acceptance_rate: f64,
    /// Missing-coordinate states over the last quarter of the chain.
    pub tail: Vec<Vec<f64>>,
    /// Full missing-coordinate trace when requested.
    pub trace: Option<Vec<Vec<f64>>>,
    pub state: ChainState,
}

/// Runs a chain of `t_total` sweeps. In Metropolis-within-Gibbs mode the
/// first `warmup_pg` sweeps are pseudo-Gibbs (a cheap way to reach a sensible
/// imputation before exact moves start); in pseudo-Gibbs mode every sweep is
/// pseudo-Gibbs and `warmup_pg` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<D, E>(
    decoder: &D,
    encoder: &E,
    x: &[f64],
    mask: &MissingnessMask,
    sampler: SamplerKind,
    t_total: u64,
    warmup_pg: u64,
    rng: &mut RngStream,
    record_trace: bool,
) -> Result<ChainRun>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    if t_total == 0 {
        return Err(Error::contract("chain length must be >= 1"));
    }
    if sampler == SamplerKind::MetropolisWithinGibbs && warmup_pg >= t_total {
        return Err(Error::contract("warmup must satisfy 0 <= warmup < T"));
    }
    if mask.missing().is_empty() {
        return Err(Error::contract("imputation runs need a non-empty missing set"));
    }

    let mut state = init_chain(decoder, encoder, x, mask, rng)?;
    let tail_len = (t_total as usize).div_ceil(4);
    let mut tail: Vec<Vec<f64>> = Vec::with_capacity(tail_len);
    let mut trace = if record_trace {
        Some(Vec::with_capacity(t_total as usize))
    } else {
        None
    };
    let mut mwg_steps = 0u64;

    for step in 1..=t_total {
        match sampler {
            SamplerKind::PseudoGibbs => {
                pseudo_gibbs_step(&mut state, x, mask, decoder, encoder, rng)?
            }
            SamplerKind::MetropolisWithinGibbs => {
                if step <= warmup_pg {
                    pseudo_gibbs_step(&mut state, x, mask, decoder, encoder, rng)?;
                } else {
                    mwg_step(&mut state, x, mask, decoder, encoder, rng)?;
                    mwg_steps += 1;
                }
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(state.x_miss.clone());
        }
        if step as usize > t_total as usize - tail_len {
            tail.push(state.x_miss.clone());
        }
    }

    let acceptance_rate = if mwg_steps == 0 {
        1.0
    } else {
        state.accepted as f64 / mwg_steps as f64
    };

    let m = mask.missing().len();
    let mut final_imputation = vec![0.0; m];
    for states in &tail {
        for (acc, v) in final_imputation.iter_mut().zip(states) {
            *acc += v / tail.len() as f64;
        }
    }
    if matches!(state.decoded, OutputDist::Bernoulli(_)) {
        for v in final_imputation.iter_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    Ok(ChainRun {
        final_imputation,
        acceptance_rate,
        tail,
        trace,
        state,
    })
}

/// F1 score between binary truth and imputation over the missing
/// coordinates, with 1 as the positive class. Conventions for empty cases:
/// both sides all-negative scores 1, exactly one side all-negative scores 0.
pub fn f1_score(truth: &[f64], imputed: &[f64]) -> Result<f64> {
    if truth.len() != imputed.len() {
        return Err(Error::contract("f1_score needs equal-length vectors"));
    }
    if truth.iter().chain(imputed).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("f1_score needs binary vectors"));
    }
    let tp = truth
        .iter()
        .zip(imputed)
        .filter(|(t, i)| **t == 1.0 && **i == 1.0)
        .count() as f64;
    let true_pos = truth.iter().filter(|&&t| t == 1.0).count() as f64;
    let pred_pos = imputed.iter().filter(|&&i| i == 1.0).count() as f64;
    if true_pos == 0.0 && pred_pos == 0.0 {
        return Ok(1.0);
    }
    if true_pos == 0.0 || pred_pos == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / pred_pos;
    let recall = tp / true_pos;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Linear-Gaussian model `x = Lambda z + mu0 + sigma eps`, the zero-hidden-
/// layer special case whose posterior and missing-data conditional have
/// closed forms. Used to certify sampler exactness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    /// `p x d`
    pub lambda: Tensor,
    pub mu0: Vec<f64>,
    pub sigma2: f64,
}

impl LinearGaussianModel {
    pub fn new(lambda: Tensor, mu0: Vec<f64>, sigma2: f64) -> Result<Self> {
        if lambda.shape().len() != 2 || lambda.shape()[0] != mu0.len() {
            return Err(Error::shape("loading matrix must be p x d with p = len(mu0)"));
        }
        if sigma2 <= 0.0 {
            return Err(Error::contract("noise variance must be positive"));
        }
        Ok(LinearGaussianModel { lambda, mu0, sigma2 })
    }

    pub fn p(&self) -> usize {
        self.lambda.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.lambda.shape()[1]
    }

    /// Marginal covariance `Lambda Lambda^T + sigma2 I`.
    fn marginal_cov(&self) -> Vec<Vec<f64>> {
        let (p, d) = (self.p(), self.d());
        let mut cov = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                let mut acc = if i == j { self.sigma2 } else { 0.0 };
                for k in 0..d {
                    acc += self.lambda.at(i, k) * self.lambda.at(j, k);
                }
                cov[i][j] = acc;
            }
        }
        cov
    }
}

impl DecodeModel for LinearGaussianModel {
    fn latent_dim(&self) -> usize {
        self.d()
    }

    fn data_dim(&self) -> usize {
        self.p()
    }

    fn decode(&self, z: &[f64]) -> OutputDist {
        let (p, d) = (self.p(), self.d());
        let mean: Vec<f64> = (0..p)
            .map(|i| {
                let mut acc = self.mu0[i];
                for k in 0..d {
                    acc += self.lambda.at(i, k) * z[k];
                }
                acc
            })
            .collect();
        OutputDist::Gaussian(GaussianDiag::new_unchecked(mean, vec![self.sigma2; p]))
    }
}

/// Closed-form posterior `p(z | x)` of a [`LinearGaussianModel`], exposed as
/// an encoder. The posterior precision is `I + Lambda^T Lambda / sigma2`;
/// it must be diagonal (orthogonal loading columns) for the posterior to lie
/// inside the diag + rank-1 family, and the constructor rejects anything
/// else.
#[derive(Debug, Clone)]
pub struct ExactPosteriorEncoder {
    /// `d x p` map `Cov_post Lambda^T / sigma2`
    transform: Vec<f64>,
    mu0: Vec<f64>,
    post_var: Vec<f64>,
    p: usize,
    d: usize,
}

impl ExactPosteriorEncoder {
    pub fn new(model: &LinearGaussianModel) -> Result<Self> {
        let (p, d) = (model.p(), model.d());
        // gram = Lambda^T Lambda
        let mut gram = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..p {
                    acc += model.lambda.at(i, a) * model.lambda.at(i, b);
                }
                gram[a][b] = acc;
            }
        }
        let scale = gram
            .iter()
            .enumerate()
            .map(|(i, row)| row[i].abs())
            .fold(1.0f64, f64::max);
        for a in 0..d {
            for b in 0..d {
                if a != b && gram[a][b].abs() > 1e-9 * scale {
                    return Err(Error::contract(
                        "exact posterior encoder needs orthogonal loading columns",
                    ));
                }
            }
        }
        let post_var: Vec<f64> = (0..d)
            .map(|a| 1.0 / (1.0 + gram[a][a] / model.sigma2))
            .collect();
        let mut transform = vec![0.0; d * p];
        for a in 0..d {
            for i in 0..p {
                transform[a * p + i] = post_var[a] * model.lambda.at(i, a) / model.sigma2;
            }
        }
        Ok(ExactPosteriorEncoder {
            transform,
            mu0: model.mu0.clone(),
            post_var,
            p,
            d,
        })
    }
}

impl EncodeModel for ExactPosteriorEncoder {
    fn latent_dim(&self) -> usize {
        self.d
    }

    fn data_dim(&self) -> usize {
        self.p
    }

    fn encode_dist(&self, x: &[f64]) -> GaussianDiagRank1 {
        let mean: Vec<f64> = (0..self.d)
            .map(|a| {
                let mut acc = 0.0;
                for i in 0..self.p {
                    acc += self.transform[a * self.p + i] * (x[i] - self.mu0[i]);
                }
                acc
            })
            .collect();
        GaussianDiagRank1 {
            mean,
            diag: self.post_var.clone(),
            u: vec![0.0; self.d],
        }
    }
}

/// Wraps an encoder and shifts every posterior mean coordinate by a
/// constant; a deliberately broken approximation for bias experiments.
#[derive(Debug, Clone)]
pub struct MeanShiftedEncoder<E> {
    pub inner: E,
    pub shift: f64,
}

impl<E: EncodeModel> EncodeModel for MeanShiftedEncoder<E> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn encode_dist(&self, x: &[f64]) -> GaussianDiagRank1 {
        let mut q = self.inner.encode_dist(x);
        for m in q.mean.iter_mut() {
            *m += self.shift;
        }
        q
    }
}

/// Gaussian over the missing coordinates (in mask order) with a full
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Closed-form conditional `x_miss | x_obs` under the linear-Gaussian model:
/// the joint covariance `Lambda Lambda^T + sigma2 I` partitioned and
/// conditioned with the standard Gaussian formula.
pub fn linear_gaussian_conditional(
    model: &LinearGaussianModel,
    x: &[f64],
    mask: &MissingnessMask,
) -> Result<ConditionalGaussian> {
    if x.len() != model.p() || mask.p() != model.p() {
        return Err(Error::shape("observation and mask must match the model dimension"));
    }
    let cov = model.marginal_cov();
    let (obs, mis) = (mask.observed(), mask.missing());
    let mean_m: Vec<f64> = mis.iter().map(|&i| model.mu0[i]).collect();
    if obs.is_empty() {
        let cov_mm: Vec<Vec<f64>> = mis
            .iter()
            .map(|&i| mis.iter().map(|&j| cov[i][j]).collect())
            .collect();
        return Ok(ConditionalGaussian {
            mean: mean_m,
            cov: cov_mm,
        });
    }

    let no = obs.len();
    let sigma_oo: Vec<Vec<f64>> = obs
        .iter()
        .map(|&i| obs.iter().map(|&j| cov[i][j]).collect())
        .collect();
    let chol = cholesky(&sigma_oo)
        .ok_or_else(|| Error::contract("observed covariance block is not positive definite"))?;

    let resid: Vec<f64> = obs.iter().map(|&i| x[i] - model.mu0[i]).collect();
    let alpha = chol_solve(&chol, &resid); // Sigma_oo^-1 (x_o - mu_o)

    let mut mean = mean_m;
    for (mi, &i) in mis.iter().enumerate() {
        for (oj, &j) in obs.iter().enumerate() {
            mean[mi] += cov[i][j] * alpha[oj];
        }
    }

    // Sigma_mm - Sigma_mo Sigma_oo^-1 Sigma_om
    let mut cond_cov = vec![vec![0.0; mis.len()]; mis.len()];
    // solve for each column of Sigma_om
    let mut solved_cols: Vec<Vec<f64>> = Vec::with_capacity(mis.len());
    for &j in mis {
        let col: Vec<f64> = obs.iter().map(|&i| cov[i][j]).collect();
        solved_cols.push(chol_solve(&chol, &col));
    }
    for (a, &i) in mis.iter().enumerate() {
        for (b, &j) in mis.iter().enumerate() {
            let mut acc = cov[i][j];
            for (oi, &o) in obs.iter().enumerate() {
                acc -= cov[i][o] * solved_cols[b][oi];
            }
            cond_cov[a][b] = acc;
            let _ = no;
        }
    }
    Ok(ConditionalGaussian { mean, cov: cond_cov })
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

/// Per-item imputation outcome, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeItemResult {
    pub item_id: usize,
    pub scenario: String,
    pub sampler: String,
    pub t: u64,
    pub warmup: u64,
    pub acceptance_rate: f64,
    pub f1: f64,
}

pub fn write_impute_csv(rows: &[ImputeItemResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_impute_csv(path: impl AsRef<Path>) -> Result<Vec<ImputeItemResult>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(Error::from)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Imputes a set of binary test items with one sampler and scores each
/// against the ground truth. Masks are derived from the base stream and the
/// item id only, so pseudo-Gibbs and Metropolis-within-Gibbs runs over the
/// same seed see identical masks and truths (paired comparison); the chain
/// noise is sampler-specific. Items run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn impute_dataset<D, E>(
    decoder: &D,
    encoder: &E,
    data: &Dataset,
    items: &[usize],
    scenario: MaskScenario,
    sampler: SamplerKind,
    t_total: u64,
    warmup_pg: u64,
    rng: &RngStream,
) -> Result<Vec<ImputeItemResult>>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    if data.kind != DataKind::Binary {
        return Err(Error::contract(
            "scored imputation runs need binary data (F1 is the score)",
        ));
    }
    let mask_rng = rng.fork(0x3A);
    let chain_salt = match sampler {
        SamplerKind::PseudoGibbs => 0x70,
        SamplerKind::MetropolisWithinGibbs => 0x77,
    };
    let chain_rng = rng.fork(chain_salt);

    let results: Vec<Result<ImputeItemResult>> = exec::map_indexed(items.len(), |idx| {
        let item = items[idx];
        let x = data.row(item);
        let mask = make_mask(data.p(), scenario, &mut mask_rng.fork(item as u64))?;
        let run = run_chain(
            decoder,
            encoder,
            x,
            &mask,
            sampler,
            t_total,
            warmup_pg,
            &mut chain_rng.fork(item as u64),
            false,
        )?;
        let truth = mask.extract_missing(x);
        Ok(ImputeItemResult {
            item_id: item,
            scenario: scenario.to_string(),
            sampler: sampler.to_string(),
            t: t_total,
            warmup: warmup_pg,
            acceptance_rate: run.acceptance_rate,
            f1: f1_score(&truth, &run.final_imputation)?,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_orthogonal_loading;
    use crate::model::{ModelDims, OutputKind};

    #[test]
    fn mar_mask_counts_and_bounds() {
        let mut rng = RngStream::seed(1);
        let mask = make_mask(10, MaskScenario::Mar { fraction: 0.5 }, &mut rng).unwrap();
        assert_eq!(mask.missing().len(), 5);
        assert_eq!(mask.observed().len(), 5);
        assert!(make_mask(10, MaskScenario::Mar { fraction: 0.0 }, &mut rng).is_err());
        assert!(make_mask(10, MaskScenario::Mar { fraction: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn half_masks_are_definitional() {
        let mut rng = RngStream::seed(2);
        let top = make_mask(8, MaskScenario::TopHalf, &mut rng).unwrap();
        assert_eq!(top.missing(), &[0, 1, 2, 3]);
        let bottom = make_mask(8, MaskScenario::BottomHalf, &mut rng).unwrap();
        assert_eq!(bottom.missing(), &[4, 5, 6, 7]);
        assert!(make_mask(7, MaskScenario::TopHalf, &mut rng).is_err());
    }

    #[test]
    fn mar_frequencies_match_binomial_bound() {
        let p = 10;
        let f = 0.3;
        let reps = 10_000usize;
        let mut rng = RngStream::seed(3);
        let mut counts = vec![0usize; p];
        for _ in 0..reps {
            let mask = make_mask(p, MaskScenario::Mar { fraction: f }, &mut rng).unwrap();
            for &i in mask.missing() {
                counts[i] += 1;
            }
        }
        let bound = 3.0 * (f * (1.0 - f) / reps as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / reps as f64;
            assert!(
                (freq - f).abs() <= bound,
                "index {i}: frequency {freq} vs {f} (bound {bound})"
            );
        }
    }

    #[test]
    fn f1_trivia_and_hand_count() {
        assert_eq!(f1_score(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
        let half = f1_score(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        assert_eq!(f1_score(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(f1_score(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(f1_score(&[1.0], &[1.0, 0.0]).is_err());
        assert!(f1_score(&[0.5], &[1.0]).is_err());
    }

    fn toy_linear_model() -> LinearGaussianModel {
        // p = 4, d = 2, orthogonal columns
        let lambda = Tensor::matrix(
            4,
            2,
            vec![0.9, 0.0, 0.9, 0.0, 0.0, 1.2, 0.0, -1.2],
        )
        .unwrap();
        LinearGaussianModel::new(lambda, vec![0.1, -0.2, 0.3, 0.0], 0.4).unwrap()
    }

    #[test]
    fn conditional_with_zero_loading_is_marginal() {
        let model = LinearGaussianModel::new(
            Tensor::zeros(vec![3, 1]),
            vec![1.0, 2.0, 3.0],
            0.7,
        )
        .unwrap();
        let mut rng = RngStream::seed(4);
        let mask = make_mask(3, MaskScenario::Mar { fraction: 0.5 }, &mut rng).unwrap();
        let x = vec![9.0, 9.0, 9.0];
        let cond = linear_gaussian_conditional(&model, &x, &mask).unwrap();
        for (a, &i) in mask.missing().iter().enumerate() {
            assert!((cond.mean[a] - model.mu0[i]).abs() < 1e-12);
            for (b, _) in mask.missing().iter().enumerate() {
                let want = if a == b { 0.7 } else { 0.0 };
                assert!((cond.cov[a][b] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_two_dim_hand_computation() {
        // p=2, d=1, Lambda=(1,1)^T, sigma2=1, observe x2=2:
        // joint cov [[2,1],[1,2]]; mean of x1 | x2 = 1, var = 3/2
        let model = LinearGaussianModel::new(
            Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            vec![0.0, 0.0],
            1.0,
        )
        .unwrap();
        let mask = MissingnessMask::from_missing(2, vec![0], MaskScenario::TopHalf).unwrap();
        let cond = linear_gaussian_conditional(&model, &[0.0, 2.0], &mask).unwrap();
        assert!((cond.mean[0] - 1.0).abs() < 1e-12);
        assert!((cond.cov[0][0] - 1.5).abs() < 1e-12);

        // mirrored mask gives the mirrored answer
        let mask2 = MissingnessMask::from_missing(2, vec![1], MaskScenario::BottomHalf).unwrap();
        let cond2 = linear_gaussian_conditional(&model, &[2.0, 0.0], &mask2).unwrap();
        assert!((cond2.mean[0] - 1.0).abs() < 1e-12);
        assert!((cond2.cov[0][0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_posterior_matches_grid_bayes() {
        // d=1: check encoder mean/var against a dense z-grid posterior
        let model = LinearGaussianModel::new(
            Tensor::matrix(3, 1, vec![0.8, -0.5, 1.1]).unwrap(),
            vec![0.2, 0.0, -0.1],
            0.6,
        )
        .unwrap();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let x = vec![1.0, -0.3, 0.8];
        let q = enc.encode_dist(&x);

        let n = 20_000;
        let (lo, hi) = (-8.0, 8.0);
        let dz = (hi - lo) / n as f64;
        let mut norm = 0.0;
        let mut mean = 0.0;
        let mut second = 0.0;
        for i in 0..n {
            let z = lo + (i as f64 + 0.5) * dz;
            let out = model.decode(&[z]);
            let w = (out.log_density(&x).unwrap() + std_normal_logpdf(&[z])).exp();
            norm += w;
            mean += w * z;
            second += w * z * z;
        }
        mean /= norm;
        second /= norm;
        let var = second - mean * mean;
        assert!((q.mean[0] - mean).abs() < 1e-6, "{} vs {}", q.mean[0], mean);
        assert!((q.diag[0] - var).abs() < 1e-6, "{} vs {}", q.diag[0], var);
    }

    #[test]
    fn non_orthogonal_loadings_are_rejected() {
        let lambda = Tensor::matrix(3, 2, vec![1.0, 0.5, 0.3, 1.0, 0.0, 0.2]).unwrap();
        let model = LinearGaussianModel::new(lambda, vec![0.0; 3], 1.0).unwrap();
        assert!(ExactPosteriorEncoder::new(&model).is_err());
    }

    #[test]
    fn acceptance_is_one_for_identical_codes() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mut rng = RngStream::seed(5);
        let mask = make_mask(4, MaskScenario::TopHalf, &mut rng).unwrap();
        let x = vec![0.5, -0.1, 0.2, 0.9];
        let x_miss = vec![0.0, 0.0];
        let z = vec![0.3, -0.4];
        let rho = mwg_acceptance(&model, &enc, &x, &mask, &x_miss, &z, &z).unwrap();
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn acceptance_is_one_under_perfect_posterior() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mut rng = RngStream::seed(6);
        let mask = make_mask(4, MaskScenario::BottomHalf, &mut rng).unwrap();
        let x = vec![0.4, 0.4, -0.6, 0.1];
        let x_miss = vec![0.25, -0.5];
        let x_full = mask.assemble(&x, &x_miss);
        let q = enc.encode_dist(&x_full);
        for _ in 0..200 {
            let z_prop = q.sample(&mut rng);
            let z_cur = q.sample(&mut rng);
            let rho = mwg_acceptance(&model, &enc, &x, &mask, &x_miss, &z_prop, &z_cur).unwrap();
            assert!((rho - 1.0).abs() < 1e-8, "rho = {rho}");
        }
    }

    #[test]
    fn acceptance_matches_direct_formula_in_1d() {
        let model = LinearGaussianModel::new(
            Tensor::matrix(2, 1, vec![1.3, -0.7]).unwrap(),
            vec![0.0, 0.2],
            0.5,
        )
        .unwrap();
        // wrong encoder on purpose
        let enc = MeanShiftedEncoder {
            inner: ExactPosteriorEncoder::new(&model).unwrap(),
            shift: 0.8,
        };
        let mask = MissingnessMask::from_missing(2, vec![0], MaskScenario::TopHalf).unwrap();
        let x = vec![0.0, 1.0];
        let x_miss = vec![0.4];
        let x_full = mask.assemble(&x, &x_miss);
        let q = enc.encode_dist(&x_full);
        let (z_prop, z_cur) = (vec![0.9], vec![-0.2]);

        // direct route: assemble the two importance ratios separately
        let num = model.decode(&z_prop).log_density(&x_full).unwrap()
            + std_normal_logpdf(&z_prop)
            - q.log_density(&z_prop).unwrap();
        let den = model.decode(&z_cur).log_density(&x_full).unwrap()
            + std_normal_logpdf(&z_cur)
            - q.log_density(&z_cur).unwrap();
        let want = (num - den).exp().min(1.0);
        let got = mwg_acceptance(&model, &enc, &x, &mask, &x_miss, &z_prop, &z_cur).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pseudo_gibbs_with_empty_missing_only_resamples_code() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mask = MissingnessMask::from_missing(4, vec![], MaskScenario::TopHalf).unwrap();
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let mut rng = RngStream::seed(7);
        let mut state = init_chain(&model, &enc, &x, &mask, &mut rng).unwrap();
        let z0 = state.z.clone();
        pseudo_gibbs_step(&mut state, &x, &mask, &model, &enc, &mut rng).unwrap();
        assert!(state.x_miss.is_empty());
        assert_ne!(state.z, z0);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn bernoulli_chain_states_are_binary() {
        let dims = ModelDims { latent: 2, hidden: 3, data: 6 };
        let mut rng = RngStream::seed(8);
        let dec = crate::training::init_decoder(dims, OutputKind::Bernoulli, 0.0, &mut rng).unwrap();
        let enc = crate::training::init_encoder(dims, &mut rng).unwrap();
        let mask = make_mask(6, MaskScenario::Mar { fraction: 0.5 }, &mut rng).unwrap();
        let x = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let run = run_chain(
            &dec,
            &enc,
            &x,
            &mask,
            SamplerKind::MetropolisWithinGibbs,
            50,
            5,
            &mut rng,
            true,
        )
        .unwrap();
        for states in run.trace.as_ref().unwrap() {
            assert!(states.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(run.final_imputation.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(run.acceptance_rate >= 0.0 && run.acceptance_rate <= 1.0);
    }

    #[test]
    fn rejection_keeps_code_and_resamples_missing() {
        let model = toy_linear_model();
        // a hopeless proposal distribution far from the posterior mass makes
        // rejections overwhelming after a good first draw
        let enc = MeanShiftedEncoder {
            inner: ExactPosteriorEncoder::new(&model).unwrap(),
            shift: 30.0,
        };
        let mask = MissingnessMask::from_missing(4, vec![1], MaskScenario::TopHalf).unwrap();
        let x = vec![0.0, 0.0, 0.1, -0.1];
        let mut rng = RngStream::seed(9);
        let mut state = init_chain(&model, &enc, &x, &mask, &mut rng).unwrap();
        // plant a sane code so proposals lose
        state.z = vec![0.0, 0.0];
        state.decoded = model.decode(&state.z);
        let mut rejected_seen = false;
        for _ in 0..20 {
            let z_before = state.z.clone();
            let acc_before = state.accepted;
            mwg_step(&mut state, &x, &mask, &model, &enc, &mut rng).unwrap();
            if state.accepted == acc_before {
                assert_eq!(state.z, z_before);
                rejected_seen = true;
            }
        }
        assert!(rejected_seen, "expected at least one rejection");
        assert!(state.accepted < 20);
    }

    #[test]
    fn warmup_boundary_cases() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mask = MissingnessMask::from_missing(4, vec![0], MaskScenario::TopHalf).unwrap();
        let x = vec![0.0, 0.3, -0.2, 0.6];
        let mut rng = RngStream::seed(10);
        // warmup = T - 1: exactly one Metropolis step
        let run = run_chain(
            &model,
            &enc,
            &x,
            &mask,
            SamplerKind::MetropolisWithinGibbs,
            10,
            9,
            &mut rng,
            false,
        )
        .unwrap();
        assert!(run.state.accepted <= 1);
        // acceptance bookkeeping is per Metropolis step
        assert!(run.acceptance_rate == run.state.accepted as f64);
        assert!(run_chain(
            &model,
            &enc,
            &x,
            &mask,
            SamplerKind::MetropolisWithinGibbs,
            10,
            10,
            &mut rng,
            false
        )
        .is_err());
    }

    #[test]
    fn perfect_posterior_means_full_acceptance() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mask = MissingnessMask::from_missing(4, vec![2, 3], MaskScenario::BottomHalf).unwrap();
        let x = vec![0.8, -0.3, 0.0, 0.0];
        let mut rng = RngStream::seed(11);
        let run = run_chain(
            &model,
            &enc,
            &x,
            &mask,
            SamplerKind::MetropolisWithinGibbs,
            500,
            20,
            &mut rng,
            false,
        )
        .unwrap();
        assert_eq!(run.acceptance_rate, 1.0);
    }

    #[test]
    fn gibbs_reaches_the_analytic_conditional() {
        // with the exact posterior encoder, pseudo-Gibbs IS Gibbs; its
        // stationary mean over the missing block must match the closed form
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mask = MissingnessMask::from_missing(4, vec![0, 2], MaskScenario::TopHalf).unwrap();
        let x = vec![0.0, 0.7, 0.0, -0.4];
        let cond = linear_gaussian_conditional(&model, &x, &mask).unwrap();

        let chains = 24;
        let root = RngStream::seed(12);
        let per_chain: Vec<Vec<f64>> = exec::map_indexed(chains, |c| {
            let mut rng = root.fork(c as u64);
            let run = run_chain(
                &model,
                &enc,
                &x,
                &mask,
                SamplerKind::PseudoGibbs,
                2000,
                0,
                &mut rng,
                false,
            )
            .unwrap();
            let m = mask.missing().len();
            let mut mean = vec![0.0; m];
            for s in &run.tail {
                for (a, v) in mean.iter_mut().zip(s) {
                    *a += v / run.tail.len() as f64;
                }
            }
            mean
        });
        for a in 0..mask.missing().len() {
            let vals: Vec<f64> = per_chain.iter().map(|m| m[a]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() - 1) as f64;
            let se = (var / vals.len() as f64).sqrt();
            assert!(
                (mean - cond.mean[a]).abs() <= 3.0 * se.max(1e-4),
                "coordinate {a}: chain mean {mean} vs conditional {} (se {se})",
                cond.mean[a]
            );
        }
    }

    #[test]
    fn impute_requires_binary_data() {
        let model = toy_linear_model();
        let enc = ExactPosteriorEncoder::new(&model).unwrap();
        let mut rng = RngStream::seed(13);
        let data = crate::data::synth_ppca(
            &crate::data::PpcaParams {
                lambda: random_orthogonal_loading(4, 2, 1.0, &mut rng),
                mu0: vec![0.0; 4],
                sigma2: 0.5,
            },
            10,
            3,
        )
        .unwrap();
        assert!(impute_dataset(
            &model,
            &enc,
            &data,
            &[0, 1],
            MaskScenario::TopHalf,
            SamplerKind::PseudoGibbs,
            10,
            0,
            &RngStream::seed(1)
        )
        .is_err());
    }

    #[test]
    fn impute_results_roundtrip_csv() {
        let rows = vec![ImputeItemResult {
            item_id: 3,
            scenario: "mar-0.5".into(),
            sampler: "mwg".into(),
            t: 100,
            warmup: 20,
            acceptance_rate: 0.8,
            f1: 0.91,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("impute.csv");
        write_impute_csv(&rows, &path).unwrap();
        assert_eq!(read_impute_csv(&path).unwrap(), rows);
    }
}
