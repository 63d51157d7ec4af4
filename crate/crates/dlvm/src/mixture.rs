//! Constrained finite-mixture maximum likelihood via EM, the nonparametric
//! likelihood upper bound it realises, and sandwich reporting.
//!
//! The nonparametric mixture likelihood is maximised by a finite mixture of
//! at most `n` components (Bernoulli outputs, or Gaussian outputs under the
//! spectral floor `xi`), so multi-restart EM over a component schedule yields
//! a computable upper bound `l(G)` on the likelihood of any decoder from the
//! same output family. EM only finds local optima, so the reported bound is
//! itself a lower estimate of the true nonparametric maximum.

use crate::data::Dataset;
use crate::distributions::{
    log_sum_exp, BernoulliProduct, GaussianDiag, OutputDist, BERNOULLI_EPS,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::mc::McEstimate;
use crate::model::OutputKind;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Components with weight above this are counted as effective.
pub const EFFECTIVE_WEIGHT_EPS: f64 = 1e-8;

/// A component whose total responsibility falls below `n * this` is
/// re-seeded.
const EMPTY_RESPONSIBILITY_EPS: f64 = 1e-10;

/// Finite mixture with homogeneous components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMixture {
    pub weights: Vec<f64>,
    pub components: Vec<OutputDist>,
    /// Variance floor shared by all Gaussian components (0 for Bernoulli).
    pub xi: f64,
    #[serde(default)]
    pub digest: String,
}

impl FiniteMixture {
    pub fn new(weights: Vec<f64>, components: Vec<OutputDist>, xi: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::contract("mixture needs matching, non-empty weights and components"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::contract("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("mixture weights sum to {total}")));
        }
        let all_gauss = components.iter().all(|c| matches!(c, OutputDist::Gaussian(_)));
        let all_bern = components.iter().all(|c| matches!(c, OutputDist::Bernoulli(_)));
        if !all_gauss && !all_bern {
            return Err(Error::contract("mixture components must share one family"));
        }
        if all_gauss {
            for c in &components {
                if let OutputDist::Gaussian(g) = c {
                    if g.diag().iter().any(|&v| v < xi) {
                        return Err(Error::contract("Gaussian component variance below the floor xi"));
                    }
                }
            }
        }
        let mut mix = FiniteMixture {
            weights,
            components,
            xi,
            digest: String::new(),
        };
        mix.digest = mix.content_digest();
        Ok(mix)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn kind(&self) -> OutputKind {
        match self.components[0] {
            OutputDist::Gaussian(_) => OutputKind::Gaussian,
            OutputDist::Bernoulli(_) => OutputKind::Bernoulli,
        }
    }

    /// Number of components with non-negligible weight.
    pub fn effective_components(&self) -> usize {
        self.weights.iter().filter(|&&w| w > EFFECTIVE_WEIGHT_EPS).count()
    }

    /// `log p_G(x) = log sum_k pi_k Phi(x | eta_k)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.k());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                terms.push(w.ln() + c.log_density(x)?);
            }
        }
        log_sum_exp(&terms)
    }

    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.xi.to_le_bytes());
        for (w, c) in self.weights.iter().zip(&self.components) {
            hasher.update(w.to_le_bytes());
            match c {
                OutputDist::Gaussian(g) => {
                    hasher.update([0u8]);
                    for v in g.mean().iter().chain(g.diag()) {
                        hasher.update(v.to_le_bytes());
                    }
                }
                OutputDist::Bernoulli(b) => {
                    hasher.update([1u8]);
                    for v in b.probs() {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        crate::model::hex_digest(hasher)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("mixture serialisation failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(&path)?;
        let mix: FiniteMixture = serde_json::from_str(&raw)
            .map_err(|e| Error::format(format!("corrupt mixture {}: {e}", path.as_ref().display())))?;
        let computed = mix.content_digest();
        if computed != mix.digest {
            return Err(Error::DigestMismatch {
                stored: mix.digest,
                computed,
            });
        }
        Ok(mix)
    }
}

/// `l(G) = sum_i log p_G(x_i)`.
pub fn mixture_loglik(mix: &FiniteMixture, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.n() {
        total += mix.log_density(data.row(i))?;
    }
    Ok(total)
}

/// One logged EM iteration (CSV columns: iter, loglik, restart, reseeded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIter {
    pub iter: usize,
    pub loglik: f64,
    pub restart: usize,
    /// An empty component was re-seeded on this iteration; the monotonicity
    /// guarantee restarts from here.
    pub reseeded: bool,
}

/// Fit diagnostics across all restarts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmReport {
    pub trace: Vec<EmIter>,
    pub final_loglik: f64,
    pub effective_components: usize,
    pub best_restart: usize,
}

impl EmReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
        for rec in &self.trace {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Largest decrease between consecutive iterations of one restart,
    /// ignoring re-seed boundaries. Non-positive (up to slack) for a healthy
    /// EM run.
    pub fn worst_monotonicity_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for pair in self.trace.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.restart == b.restart && !b.reseeded {
                worst = worst.max(a.loglik - b.loglik);
            }
        }
        worst
    }
}

/// EM settings. Initialisation is k-means++-style seeding on data points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub components: usize,
    pub kind: OutputKind,
    /// Variance floor; must be positive for Gaussian mixtures.
    pub xi: f64,
    pub max_iters: usize,
    /// Relative log-likelihood gain below which a run stops.
    pub tol: f64,
    pub restarts: usize,
}

impl EmConfig {
    pub fn new(components: usize, kind: OutputKind, xi: f64) -> Self {
        EmConfig {
            components,
            kind,
            xi,
            max_iters: 500,
            tol: 1e-7,
            restarts: 10,
        }
    }
}

struct EmState {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>, // probabilities for the Bernoulli family
    vars: Vec<Vec<f64>>,  // unused for Bernoulli
}

impl EmState {
    fn to_mixture(&self, kind: OutputKind, xi: f64) -> Result<FiniteMixture> {
        let components: Vec<OutputDist> = match kind {
            OutputKind::Gaussian => self
                .means
                .iter()
                .zip(&self.vars)
                .map(|(m, v)| OutputDist::Gaussian(GaussianDiag::new_unchecked(m.clone(), v.clone())))
                .collect(),
            OutputKind::Bernoulli => self
                .means
                .iter()
                .map(|m| OutputDist::Bernoulli(BernoulliProduct::new(m.clone())))
                .collect(),
        };
        // weights can drift from 1 by rounding; renormalise defensively
        let total: f64 = self.weights.iter().sum();
        let weights = self.weights.iter().map(|w| w / total).collect();
        FiniteMixture::new(weights, components, xi)
    }
}

fn component_logpdf(kind: OutputKind, mean: &[f64], var: &[f64], xi: f64, x: &[f64]) -> f64 {
    match kind {
        OutputKind::Gaussian => {
            let mut acc = 0.0;
            for i in 0..x.len() {
                let d = x[i] - mean[i];
                let v = var[i].max(xi);
                acc += crate::distributions::LN_2PI + v.ln() + d * d / v;
            }
            -0.5 * acc
        }
        OutputKind::Bernoulli => {
            let mut acc = 0.0;
            for i in 0..x.len() {
                let p = mean[i].clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                acc += if x[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
            }
            acc
        }
    }
}

/// k-means++-style seeding: the first centre is a uniform data point, each
/// further centre a data point drawn with probability proportional to its
/// squared distance from the chosen set.
fn seed_centers(data: &Dataset, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let n = data.n();
    let mut centers = vec![rng.index(n)];
    let mut dist_sq: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.row(i), data.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = dist_sq.iter().sum();
        let next = if total <= 0.0 {
            rng.index(n)
        } else {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(next);
        for i in 0..n {
            dist_sq[i] = dist_sq[i].min(squared_distance(data.row(i), data.row(next)));
        }
    }
    centers
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn init_state(data: &Dataset, config: &EmConfig, rng: &mut RngStream) -> EmState {
    let (n, p, k) = (data.n(), data.p(), config.components);
    let centers = seed_centers(data, k, rng);

    // per-coordinate global variance, floored
    let mut global_mean = vec![0.0; p];
    for i in 0..n {
        for (g, v) in global_mean.iter_mut().zip(data.row(i)) {
            *g += v / n as f64;
        }
    }
    let mut global_var = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            let d = data.row(i)[j] - global_mean[j];
            global_var[j] += d * d / n as f64;
        }
    }
    for v in global_var.iter_mut() {
        *v = v.max(config.xi).max(1e-6);
    }

    let means: Vec<Vec<f64>> = centers
        .iter()
        .map(|&c| match config.kind {
            OutputKind::Gaussian => data.row(c).to_vec(),
            // blend data points toward 1/2 so initial responsibilities stay
            // finite-ish on mismatching bits
            OutputKind::Bernoulli => data.row(c).iter().map(|&x| 0.9 * x + 0.05).collect(),
        })
        .collect();
    EmState {
        weights: vec![1.0 / k as f64; k],
        means,
        vars: vec![global_var; k],
    }
}

fn em_single_run(
    data: &Dataset,
    config: &EmConfig,
    restart: usize,
    rng: &mut RngStream,
) -> Result<(FiniteMixture, Vec<EmIter>, f64)> {
    let (n, p, k) = (data.n(), data.p(), config.components);
    let mut state = init_state(data, config, rng);
    let mut trace = Vec::new();
    let mut prev_loglik = f64::NEG_INFINITY;
    let mut resp = vec![0.0; n * k];

    for iter in 0..config.max_iters {
        // E-step
        let mut loglik = 0.0;
        for i in 0..n {
            let x = data.row(i);
            let mut terms = Vec::with_capacity(k);
            for c in 0..k {
                let w = state.weights[c];
                let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
                terms.push(lw + component_logpdf(config.kind, &state.means[c], &state.vars[c], config.xi, x));
            }
            let norm = log_sum_exp(&terms)?;
            loglik += norm;
            for c in 0..k {
                resp[i * k + c] = (terms[c] - norm).exp();
            }
        }

        // M-step
        let mut reseeded = false;
        let mut totals = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                totals[c] += resp[i * k + c];
            }
        }
        for c in 0..k {
            if totals[c] < EMPTY_RESPONSIBILITY_EPS * n as f64 {
                // re-seed the dead component at the worst-explained datum
                let worst = (0..n)
                    .min_by(|&a, &b| {
                        let la = state_loglik_at(&state, config, data.row(a));
                        let lb = state_loglik_at(&state, config, data.row(b));
                        la.partial_cmp(&lb).unwrap()
                    })
                    .unwrap();
                state.means[c] = match config.kind {
                    OutputKind::Gaussian => data.row(worst).to_vec(),
                    OutputKind::Bernoulli => data.row(worst).iter().map(|&x| 0.9 * x + 0.05).collect(),
                };
                state.weights[c] = 1.0 / n as f64;
                let total: f64 = state.weights.iter().sum();
                for w in state.weights.iter_mut() {
                    *w /= total;
                }
                reseeded = true;
                continue;
            }
            state.weights[c] = totals[c] / n as f64;
            let mut mean = vec![0.0; p];
            for i in 0..n {
                let r = resp[i * k + c];
                for (m, v) in mean.iter_mut().zip(data.row(i)) {
                    *m += r * v / totals[c];
                }
            }
            match config.kind {
                OutputKind::Gaussian => {
                    let mut var = vec![0.0; p];
                    for i in 0..n {
                        let r = resp[i * k + c];
                        for j in 0..p {
                            let d = data.row(i)[j] - mean[j];
                            var[j] += r * d * d / totals[c];
                        }
                    }
                    // project onto the constraint set: floor each coordinate
                    for v in var.iter_mut() {
                        *v = v.max(config.xi);
                    }
                    state.vars[c] = var;
                }
                OutputKind::Bernoulli => {
                    for m in mean.iter_mut() {
                        *m = m.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                    }
                }
            }
            state.means[c] = mean;
        }

        trace.push(EmIter {
            restart,
            iter,
            loglik,
            reseeded,
        });

        let gain = loglik - prev_loglik;
        if iter > 0 && !reseeded && gain.abs() < config.tol * prev_loglik.abs().max(1.0) {
            break;
        }
        prev_loglik = loglik;
    }

    let mix = state.to_mixture(config.kind, config.xi)?;
    // final log-likelihood of the returned parameters (the trace records the
    // likelihood of the pre-M-step state)
    let final_loglik = mixture_loglik(&mix, data)?;
    Ok((mix, trace, final_loglik))
}

fn state_loglik_at(state: &EmState, config: &EmConfig, x: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..state.weights.len())
        .map(|c| {
            let w = state.weights[c];
            let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            lw + component_logpdf(config.kind, &state.means[c], &state.vars[c], config.xi, x)
        })
        .collect();
    log_sum_exp(&terms).unwrap_or(f64::NEG_INFINITY)
}

/// Multi-restart EM; restarts run in parallel on independent streams and the
/// best final log-likelihood wins (first restart on ties).
pub fn em_fit(data: &Dataset, config: &EmConfig, rng: &RngStream) -> Result<(FiniteMixture, EmReport)> {
    if config.components == 0 || config.components > data.n() {
        return Err(Error::contract(format!(
            "component count must satisfy 1 <= K <= n; got K={}, n={}",
            config.components,
            data.n()
        )));
    }
    if config.kind == OutputKind::Gaussian && config.xi <= 0.0 {
        return Err(Error::contract("Gaussian mixtures need a positive variance floor xi"));
    }
    if config.restarts == 0 {
        return Err(Error::contract("need at least one restart"));
    }

    let runs: Vec<Result<(FiniteMixture, Vec<EmIter>, f64)>> =
        exec::map_indexed(config.restarts, |r| {
            em_single_run(data, config, r, &mut rng.fork(r as u64))
        });

    let mut best: Option<(usize, FiniteMixture, f64)> = None;
    let mut trace = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        let (mix, run_trace, final_loglik) = run?;
        trace.extend(run_trace);
        let better = match &best {
            Some((_, _, cur)) => final_loglik > *cur,
            None => true,
        };
        if better {
            best = Some((r, mix, final_loglik));
        }
    }
    let (best_restart, mixture, final_loglik) = best.expect("at least one restart");
    let report = EmReport {
        trace,
        final_loglik,
        effective_components: mixture.effective_components(),
        best_restart,
    };
    Ok((mixture, report))
}

/// Best EM fit for one component count of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KResult {
    pub components: usize,
    pub loglik: f64,
    pub effective_components: usize,
}

/// The computable stand-in for the nonparametric maximum: best fit over a
/// component schedule. Being a local-search maximum, it is a lower estimate
/// of the true bound.
#[derive(Debug, Clone, PartialEq)]
pub struct NonparametricBound {
    pub best_loglik: f64,
    pub best_components: usize,
    pub mixture: FiniteMixture,
    pub per_k: Vec<KResult>,
    /// Full EM diagnostics, one report per schedule entry.
    pub reports: Vec<EmReport>,
}

/// Geometric default schedule `{1, 2, 4, ..., n}`.
pub fn default_k_schedule(n: usize) -> Vec<usize> {
    let mut schedule = Vec::new();
    let mut k = 1;
    while k < n {
        schedule.push(k);
        k *= 2;
    }
    schedule.push(n);
    schedule
}

/// Best EM fit over the component schedule. `base` supplies the family,
/// floor, restart count, iteration cap and tolerance; its component count is
/// overridden by each schedule entry.
pub fn nonparametric_bound(
    data: &Dataset,
    base: &EmConfig,
    k_schedule: &[usize],
    rng: &RngStream,
) -> Result<NonparametricBound> {
    if k_schedule.is_empty() {
        return Err(Error::contract("empty component schedule"));
    }
    let mut schedule: Vec<usize> = k_schedule.to_vec();
    schedule.sort_unstable();
    schedule.dedup();
    if schedule[0] == 0 || *schedule.last().unwrap() > data.n() {
        return Err(Error::contract("component schedule must lie in 1..=n"));
    }

    let fits: Vec<Result<(FiniteMixture, EmReport)>> = exec::map_indexed(schedule.len(), |si| {
        let mut config = base.clone();
        config.components = schedule[si];
        em_fit(data, &config, &rng.fork(si as u64))
    });

    let mut per_k = Vec::with_capacity(schedule.len());
    let mut reports = Vec::with_capacity(schedule.len());
    let mut best: Option<(usize, FiniteMixture, f64)> = None;
    for (si, fit) in fits.into_iter().enumerate() {
        let (mix, report) = fit?;
        per_k.push(KResult {
            components: schedule[si],
            loglik: report.final_loglik,
            effective_components: report.effective_components,
        });
        let better = match &best {
            Some((_, _, cur)) => report.final_loglik > *cur,
            None => true,
        };
        if better {
            best = Some((schedule[si], mix, report.final_loglik));
        }
        reports.push(report);
    }
    let (best_components, mixture, best_loglik) = best.expect("non-empty schedule");
    Ok(NonparametricBound {
        best_loglik,
        best_components,
        mixture,
        per_k,
        reports,
    })
}

/// Likelihood sandwich: `ELBO <= l(theta) <= l(G)`, with the parsimony gap
/// `l(G) - l(theta)` and the posterior-KL bound `l(G) - ELBO`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub elbo: McEstimate,
    pub iw_loglik: McEstimate,
    pub mixture_bound: f64,
    /// `l(G) - l_hat(theta)`
    pub parsimony_gap: f64,
    /// `l(G) - ELBO`, an upper bound on `KL(q || posterior)`
    pub kl_upper_bound: f64,
    pub ordering_ok: bool,
    pub violations: Vec<String>,
}

/// Assembles the sandwich from estimates computed on one dataset. Ordering
/// violations beyond 3 combined standard errors are flagged, not fatal: they
/// signal an EM failure or a broken estimate.
pub fn sandwich_report(elbo: McEstimate, iw_loglik: McEstimate, mixture_bound: f64) -> SandwichReport {
    let mut violations = Vec::new();
    let se_pair = (elbo.stderr.powi(2) + iw_loglik.stderr.powi(2)).sqrt();
    if elbo.value > iw_loglik.value + 3.0 * se_pair {
        violations.push(format!(
            "ELBO {} exceeds importance-weighted estimate {} beyond 3 se ({se_pair})",
            elbo.value, iw_loglik.value
        ));
    }
    if iw_loglik.value > mixture_bound + 3.0 * iw_loglik.stderr {
        violations.push(format!(
            "importance-weighted estimate {} exceeds mixture bound {mixture_bound} beyond 3 se ({})",
            iw_loglik.value, iw_loglik.stderr
        ));
    }
    SandwichReport {
        elbo,
        iw_loglik,
        mixture_bound,
        parsimony_gap: mixture_bound - iw_loglik.value,
        kl_upper_bound: mixture_bound - elbo.value,
        ordering_ok: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_bernoulli_mixture, synth_gauss_mixture, BernMixParams, DataKind, GaussMixParams};

    #[test]
    fn single_component_at_datum_with_unit_density() {
        let xi = 1.0 / (2.0 * std::f64::consts::PI);
        let data = Dataset::new(DataKind::Real, 1, 1, vec![0.7]).unwrap();
        let mix = FiniteMixture::new(
            vec![1.0],
            vec![OutputDist::Gaussian(GaussianDiag::new(vec![0.7], vec![xi]).unwrap())],
            xi,
        )
        .unwrap();
        let ll = mixture_loglik(&mix, &data).unwrap();
        assert!(ll.abs() < 1e-12, "got {ll}");
    }

    #[test]
    fn duplicate_components_collapse() {
        let data = Dataset::new(DataKind::Real, 3, 2, vec![0.1, 0.2, -0.5, 1.0, 0.0, 0.0]).unwrap();
        let comp = OutputDist::Gaussian(GaussianDiag::new(vec![0.0, 0.1], vec![0.5, 0.7]).unwrap());
        let one = FiniteMixture::new(vec![1.0], vec![comp.clone()], 0.1).unwrap();
        let two = FiniteMixture::new(vec![0.5, 0.5], vec![comp.clone(), comp], 0.1).unwrap();
        let a = mixture_loglik(&one, &data).unwrap();
        let b = mixture_loglik(&two, &data).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_mixture_loglik_matches_naive_oracle() {
        let mut rng = RngStream::seed(3);
        let k = 3;
        let p = 4;
        let weights = vec![0.2, 0.5, 0.3];
        let comps: Vec<OutputDist> = (0..k)
            .map(|_| {
                OutputDist::Bernoulli(BernoulliProduct::new(
                    (0..p).map(|_| rng.uniform_in(0.1, 0.9)).collect(),
                ))
            })
            .collect();
        let mix = FiniteMixture::new(weights.clone(), comps.clone(), 0.0).unwrap();
        let data: Vec<f64> = (0..5 * p).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
        let ds = Dataset::new(DataKind::Binary, 5, p, data).unwrap();

        let mut want = 0.0;
        for i in 0..5 {
            let mut density = 0.0f64;
            for (w, c) in weights.iter().zip(&comps) {
                if let OutputDist::Bernoulli(b) = c {
                    let mut mass = 1.0;
                    for (x, pr) in ds.row(i).iter().zip(b.probs()) {
                        mass *= if *x == 1.0 { *pr } else { 1.0 - pr };
                    }
                    density += w * mass;
                }
            }
            want += density.ln();
        }
        let got = mixture_loglik(&mix, &ds).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn em_recovers_separated_gaussian_pair() {
        let truth = GaussMixParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![3.0, 3.0], vec![-3.0, -3.0]],
            vars: vec![vec![0.25, 0.25], vec![0.25, 0.25]],
        };
        let data = synth_gauss_mixture(&truth, 1000, 42).unwrap();
        let config = EmConfig::new(2, OutputKind::Gaussian, 1e-3);
        let (mix, report) = em_fit(&data, &config, &RngStream::seed(7)).unwrap();
        assert!(report.worst_monotonicity_violation() <= 1e-9);

        let mut found = [false, false];
        for c in &mix.components {
            if let OutputDist::Gaussian(g) = c {
                for (t, target) in truth.means.iter().enumerate() {
                    let dist = squared_distance(g.mean(), target).sqrt();
                    if dist < 0.1 {
                        found[t] = true;
                    }
                }
            }
        }
        assert!(found[0] && found[1], "means not recovered: {mix:?}");
    }

    #[test]
    fn em_k1_bernoulli_closed_form() {
        let params = BernMixParams {
            weights: vec![0.6, 0.4],
            prototypes: vec![vec![0.9, 0.2, 0.4], vec![0.1, 0.8, 0.5]],
        };
        let data = synth_bernoulli_mixture(&params, 200, 11).unwrap();
        let config = EmConfig::new(1, OutputKind::Bernoulli, 0.0);
        let (mix, _) = em_fit(&data, &config, &RngStream::seed(1)).unwrap();
        // the single-component M-step fixed point is the column mean
        if let OutputDist::Bernoulli(b) = &mix.components[0] {
            for j in 0..3 {
                let col_mean: f64 =
                    (0..data.n()).map(|i| data.row(i)[j]).sum::<f64>() / data.n() as f64;
                assert!(
                    (b.probs()[j] - col_mean).abs() < 1e-12,
                    "probs[{j}] = {}, column mean {col_mean}",
                    b.probs()[j]
                );
            }
        } else {
            panic!("wrong family");
        }
        assert!(mixture_loglik(&mix, &data).unwrap() < 0.0);
    }

    #[test]
    fn em_k_equals_n_beats_per_point_construction_bound() {
        let truth = GaussMixParams {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            vars: vec![vec![4.0, 4.0]],
        };
        let data = synth_gauss_mixture(&truth, 12, 5).unwrap();
        let xi = 0.0625;
        let mut config = EmConfig::new(data.n(), OutputKind::Gaussian, xi);
        config.restarts = 4;
        let (_, report) = em_fit(&data, &config, &RngStream::seed(9)).unwrap();
        // one component per datum at its location with floored variance gives
        // at least -log n - (p/2) log(2 pi xi) per datum
        let n = data.n() as f64;
        let p = data.p() as f64;
        let analytic = n * (-(n.ln()) - (p / 2.0) * (2.0 * std::f64::consts::PI * xi).ln());
        assert!(
            report.final_loglik >= analytic - 1e-9,
            "EM {} below the placement bound {analytic}",
            report.final_loglik
        );
    }

    #[test]
    fn em_rejects_bad_contracts() {
        let data = Dataset::new(DataKind::Real, 3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(em_fit(&data, &EmConfig::new(4, OutputKind::Gaussian, 0.1), &RngStream::seed(0)).is_err());
        assert!(em_fit(&data, &EmConfig::new(2, OutputKind::Gaussian, 0.0), &RngStream::seed(0)).is_err());
    }

    #[test]
    fn gaussian_components_respect_floor_exactly() {
        // near-duplicate data forces variances onto the floor
        let data = Dataset::new(
            DataKind::Real,
            6,
            2,
            vec![0.0, 0.0, 0.0, 0.0, 1e-9, 0.0, 5.0, 5.0, 5.0, 5.0, 5.0 + 1e-9, 5.0],
        )
        .unwrap();
        let xi = 0.01;
        let config = EmConfig::new(2, OutputKind::Gaussian, xi);
        let (mix, _) = em_fit(&data, &config, &RngStream::seed(3)).unwrap();
        for c in &mix.components {
            if let OutputDist::Gaussian(g) = c {
                assert!(g.diag().iter().all(|&v| v >= xi));
                // with collapsed clusters the floor binds exactly
                assert!(g.diag().contains(&xi));
            }
        }
    }

    #[test]
    fn nonparametric_bound_nondecreasing_in_k() {
        let params = BernMixParams {
            weights: vec![0.5, 0.5],
            prototypes: vec![vec![0.9, 0.1, 0.9, 0.1, 0.5], vec![0.1, 0.9, 0.1, 0.9, 0.5]],
        };
        let data = synth_bernoulli_mixture(&params, 60, 21).unwrap();
        let mut base = EmConfig::new(1, OutputKind::Bernoulli, 0.0);
        base.restarts = 6;
        let bound = nonparametric_bound(&data, &base, &[1, 2, 4, 8], &RngStream::seed(2)).unwrap();
        assert!(bound.best_loglik < 0.0, "Bernoulli bound must be negative");
        for w in bound.per_k.windows(2) {
            assert!(
                w[1].loglik >= w[0].loglik - 1e-6,
                "bound decreased from K={} ({}) to K={} ({})",
                w[0].components,
                w[0].loglik,
                w[1].components,
                w[1].loglik
            );
        }
    }

    #[test]
    fn gaussian_bound_respects_constraint_cap() {
        let truth = GaussMixParams {
            weights: vec![1.0],
            means: vec![vec![0.0; 3]],
            vars: vec![vec![1.0; 3]],
        };
        let data = synth_gauss_mixture(&truth, 40, 33).unwrap();
        let xi = 0.0625;
        let mut base = EmConfig::new(1, OutputKind::Gaussian, xi);
        base.restarts = 4;
        let bound =
            nonparametric_bound(&data, &base, &default_k_schedule(data.n()), &RngStream::seed(4))
                .unwrap();
        let cap = -(data.n() as f64) * (data.p() as f64) * (2.0 * std::f64::consts::PI * xi).sqrt().ln();
        assert!(
            bound.best_loglik <= cap,
            "bound {} above theoretical cap {cap}",
            bound.best_loglik
        );
    }

    #[test]
    fn sandwich_report_trivia() {
        let exact = |v: f64| McEstimate { value: v, stderr: 0.0 };
        let r = sandwich_report(exact(-10.0), exact(-10.0), -10.0);
        assert!(r.ordering_ok);
        assert_eq!(r.kl_upper_bound, 0.0);
        assert_eq!(r.parsimony_gap, 0.0);

        let r = sandwich_report(exact(-12.0), exact(-11.0), -10.5);
        assert!(r.ordering_ok);
        assert!((r.parsimony_gap - 0.5).abs() < 1e-15);
        assert!((r.kl_upper_bound - 1.5).abs() < 1e-15);
        assert_eq!(r.elbo.value, -12.0);
        assert_eq!(r.iw_loglik.value, -11.0);
        assert_eq!(r.mixture_bound, -10.5);

        let broken = sandwich_report(exact(-5.0), exact(-11.0), -10.5);
        assert!(!broken.ordering_ok);
        assert_eq!(broken.violations.len(), 1);
    }

    #[test]
    fn mixture_persistence_roundtrip() {
        let mix = FiniteMixture::new(
            vec![0.25, 0.75],
            vec![
                OutputDist::Bernoulli(BernoulliProduct::new(vec![0.2, 0.8])),
                OutputDist::Bernoulli(BernoulliProduct::new(vec![0.5, 0.5])),
            ],
            0.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixture.json");
        mix.save(&path).unwrap();
        assert_eq!(FiniteMixture::load(&path).unwrap(), mix);
    }

    fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}
