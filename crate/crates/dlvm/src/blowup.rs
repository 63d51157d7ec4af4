//! Executable witnesses of likelihood blow-up and of the constrained bound.
//!
//! The divergent decoder sequence has a single effective hidden unit: the
//! mean head is pinned at one observation `x_i` while the isotropic variance
//! `exp(alpha tanh(alpha w^T z) - alpha)` collapses on the half-space
//! `w^T z <= 0` as `alpha` grows. That drives the Monte Carlo likelihood
//! contribution of `x_i` up without bound while every other contribution
//! stays bounded below, and the same machinery verifies that the additive
//! covariance floor `xi` restores the `-(p/2) log(2 pi xi)` per-datum cap.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::mc::{LogMeanAcc, McEstimate};
use crate::model::{DecodeModel, DecoderParams, OutputKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Monte Carlo draws per likelihood estimate unless overridden; the variance
/// of the estimator is large at big `alpha`.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

/// Default demand on the target contribution's growth over the grid.
pub const DEFAULT_GAIN_THRESHOLD_NATS: f64 = 100.0;

const MC_CHUNK: usize = 2048;

/// Configuration of one blow-up run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlowupSpec {
    /// Which observation the mean head collapses onto.
    pub target_index: usize,
    /// Direction `w` in latent space; must be nonzero.
    pub direction: Vec<f64>,
    /// Strictly increasing, nonnegative grid of `alpha` values.
    pub alpha_grid: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    /// Nats of growth demanded of the target contribution across the grid.
    pub gain_threshold_nats: f64,
}

impl BlowupSpec {
    pub fn new(target_index: usize, direction: Vec<f64>, alpha_grid: Vec<f64>, seed: u64) -> Self {
        BlowupSpec {
            target_index,
            direction,
            alpha_grid,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed,
            gain_threshold_nats: DEFAULT_GAIN_THRESHOLD_NATS,
        }
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.target_index >= data.n() {
            return Err(Error::contract(format!(
                "target index {} out of range for n={}",
                self.target_index,
                data.n()
            )));
        }
        if self.direction.iter().map(|w| w * w).sum::<f64>() == 0.0 {
            return Err(Error::contract("blow-up direction w must be nonzero"));
        }
        if self.alpha_grid.is_empty()
            || self.alpha_grid[0] < 0.0
            || self.alpha_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::contract(
                "alpha grid must be nonempty, nonnegative and strictly increasing",
            ));
        }
        if self.mc_samples == 0 {
            return Err(Error::contract("mc_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Decoder `theta_k`: constant mean `x_i`, isotropic variance
/// `exp(alpha_k tanh(alpha_k w^T z) - alpha_k)`, one hidden unit, no floor.
pub fn make_blowup_params(data: &Dataset, spec: &BlowupSpec, k: usize) -> Result<DecoderParams> {
    spec.validate(data)?;
    if k >= spec.alpha_grid.len() {
        return Err(Error::contract(format!(
            "grid index {k} out of range for {} alphas",
            spec.alpha_grid.len()
        )));
    }
    let alpha = spec.alpha_grid[k];
    let d = spec.direction.len();
    let p = data.p();
    let x_i = data.row(spec.target_index).to_vec();
    Ok(DecoderParams {
        w: Tensor::matrix(1, d, spec.direction.iter().map(|w| alpha * w).collect())?,
        a: Tensor::vector(vec![0.0]),
        v: Tensor::zeros(vec![p, 1]),
        b: Tensor::vector(x_i),
        alpha: Tensor::matrix(p, 1, vec![alpha; p])?,
        beta: Tensor::vector(vec![-alpha; p]),
        output_kind: OutputKind::Gaussian,
        xi: 0.0,
    })
}

/// Plain prior Monte Carlo estimates of `log p(x_j)` for every row of `data`:
/// `log-mean-exp` over `s` prior draws of the conditional log-density. Draws
/// are indexed, so results do not depend on chunking or thread count.
pub fn mc_loglik<D: DecodeModel + ?Sized>(
    model: &D,
    data: &Dataset,
    s: usize,
    rng: &RngStream,
) -> Result<Vec<McEstimate>> {
    if s == 0 {
        return Err(Error::contract("mc_loglik needs s >= 1"));
    }
    let n = data.n();
    let d = model.latent_dim();
    let chunks = s.div_ceil(MC_CHUNK);
    let partials: Vec<Result<Vec<LogMeanAcc>>> = exec::map_indexed(chunks, |c| {
        let lo = c * MC_CHUNK;
        let hi = ((c + 1) * MC_CHUNK).min(s);
        let mut accs = vec![LogMeanAcc::default(); n];
        for draw in lo..hi {
            let mut r = rng.fork(draw as u64);
            let z = r.standard_normal_vec(d);
            let out = model.decode(&z);
            for (j, acc) in accs.iter_mut().enumerate() {
                acc.push(out.log_density(data.row(j))?);
            }
        }
        Ok(accs)
    });

    let mut merged = vec![LogMeanAcc::default(); n];
    for part in partials {
        for (m, p) in merged.iter_mut().zip(part?) {
            m.merge(&p);
        }
    }
    merged.into_iter().map(|m| m.finish()).collect()
}

/// One grid point of a blow-up trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupRow {
    pub alpha: f64,
    /// Estimated `log p(x_i)` for the target observation.
    pub contrib_i: f64,
    /// Smallest estimated contribution among the other observations.
    pub min_contrib_other: f64,
    pub stderr_i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupTrace {
    pub rows: Vec<BlowupRow>,
    pub gain_threshold_nats: f64,
}

impl BlowupTrace {
    /// Growth of the target contribution from the first to the last grid
    /// point.
    pub fn gain_nats(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.contrib_i - a.contrib_i,
            _ => 0.0,
        }
    }

    /// Smallest non-target contribution anywhere on the grid (the recorded
    /// finite floor).
    pub fn other_floor(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.min_contrib_other)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn passes_threshold(&self) -> bool {
        self.gain_nats() > self.gain_threshold_nats && self.other_floor().is_finite()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BlowupRow>> {
        let mut r = csv::Reader::from_path(path.as_ref()).map_err(Error::from)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(rows)
    }
}

/// Runs the full grid: one decoder per `alpha`, Monte Carlo likelihood for
/// every observation, grid points fanned out in parallel with independent
/// streams.
pub fn blowup_trace(data: &Dataset, spec: &BlowupSpec) -> Result<BlowupTrace> {
    spec.validate(data)?;
    if data.n() < 2 {
        return Err(Error::contract("blow-up trace wants n >= 2 (one target, some others)"));
    }
    let root = RngStream::seed(spec.seed);
    let rows: Vec<Result<BlowupRow>> = exec::map_indexed(spec.alpha_grid.len(), |k| {
        let theta = make_blowup_params(data, spec, k)?;
        let ests = mc_loglik(&theta, data, spec.mc_samples, &root.fork(k as u64))?;
        let target = ests[spec.target_index];
        let min_other = ests
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != spec.target_index)
            .map(|(_, e)| e.value)
            .fold(f64::INFINITY, f64::min);
        Ok(BlowupRow {
            alpha: spec.alpha_grid[k],
            contrib_i: target.value,
            min_contrib_other: min_other,
            stderr_i: target.stderr,
        })
    });
    let rows: Result<Vec<BlowupRow>> = rows.into_iter().collect();
    Ok(BlowupTrace {
        rows: rows?,
        gain_threshold_nats: spec.gain_threshold_nats,
    })
}

/// Density estimate at one evaluation point of a shell sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellPoint {
    pub radius: f64,
    pub direction_index: usize,
    pub logpdf: f64,
    pub stderr: f64,
}

/// Report of the spherical-symmetry / unimodality check around a centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalReport {
    pub center: McEstimate,
    pub points: Vec<ShellPoint>,
    pub radii: Vec<f64>,
    /// Per radius: largest spread between direction estimates, in units of
    /// their combined standard error.
    pub max_spread_sigmas: f64,
    /// Estimated density is non-increasing along the radius grid.
    pub unimodal_ok: bool,
    /// Every pair of directions agrees within 3 combined standard errors.
    pub symmetric_ok: bool,
}

/// Estimates the model density on concentric shells around `center` with
/// common prior draws across all evaluation points (paired comparison), and
/// checks that the estimates depend on the radius only and decay with it.
pub fn check_spherical_unimodality<D: DecodeModel + ?Sized>(
    model: &D,
    center: &[f64],
    radii: &[f64],
    n_directions: usize,
    mc_samples: usize,
    rng: &RngStream,
) -> Result<SphericalReport> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] <= 0.0 {
        return Err(Error::contract("radii must be positive and strictly increasing"));
    }
    if n_directions < 2 || mc_samples == 0 {
        return Err(Error::contract("need at least 2 directions and 1 draw"));
    }
    let p = model.data_dim();
    let d = model.latent_dim();

    // antipodal pairs of random unit directions
    let mut dir_rng = rng.fork(0xD1);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_directions);
    while dirs.len() < n_directions {
        let v = dir_rng.standard_normal_vec(p);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
        dirs.push(unit.iter().map(|x| -x).collect());
        dirs.push(unit);
    }
    dirs.truncate(n_directions.max(2));

    // evaluation points: center plus every (radius, direction) shell point
    let mut points: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (ri, &r) in radii.iter().enumerate() {
        for (di, dir) in dirs.iter().enumerate() {
            let x: Vec<f64> = center.iter().zip(dir).map(|(c, u)| c + r * u).collect();
            points.push((ri, di, x));
        }
    }

    let chunks = mc_samples.div_ceil(MC_CHUNK);
    let draw_rng = rng.fork(0xD2);
    let partials: Vec<Result<(LogMeanAcc, Vec<LogMeanAcc>)>> = exec::map_indexed(chunks, |c| {
        let lo = c * MC_CHUNK;
        let hi = ((c + 1) * MC_CHUNK).min(mc_samples);
        let mut center_acc = LogMeanAcc::default();
        let mut accs = vec![LogMeanAcc::default(); points.len()];
        for draw in lo..hi {
            let mut r = draw_rng.fork(draw as u64);
            let z = r.standard_normal_vec(d);
            let out = model.decode(&z);
            center_acc.push(out.log_density(center)?);
            for (acc, (_, _, x)) in accs.iter_mut().zip(&points) {
                acc.push(out.log_density(x)?);
            }
        }
        Ok((center_acc, accs))
    });

    let mut center_acc = LogMeanAcc::default();
    let mut merged = vec![LogMeanAcc::default(); points.len()];
    for part in partials {
        let (c, accs) = part?;
        center_acc.merge(&c);
        for (m, a) in merged.iter_mut().zip(accs) {
            m.merge(&a);
        }
    }
    let center_est = center_acc.finish()?;
    let ests: Vec<McEstimate> = merged
        .into_iter()
        .map(|m| m.finish())
        .collect::<Result<_>>()?;

    let shell_points: Vec<ShellPoint> = points
        .iter()
        .zip(&ests)
        .map(|((ri, di, _), e)| ShellPoint {
            radius: radii[*ri],
            direction_index: *di,
            logpdf: e.value,
            stderr: e.stderr,
        })
        .collect();

    // symmetry: all directions on a shell agree within combined MC error
    let mut max_spread_sigmas = 0.0f64;
    let mut symmetric_ok = true;
    let mut radius_means = Vec::with_capacity(radii.len());
    for ri in 0..radii.len() {
        let shell: Vec<&ShellPoint> = shell_points
            .iter()
            .filter(|pnt| pnt.radius == radii[ri])
            .collect();
        let mean = shell.iter().map(|pnt| pnt.logpdf).sum::<f64>() / shell.len() as f64;
        radius_means.push(mean);
        for a in 0..shell.len() {
            for b in (a + 1)..shell.len() {
                let diff = (shell[a].logpdf - shell[b].logpdf).abs();
                let se = (shell[a].stderr.powi(2) + shell[b].stderr.powi(2)).sqrt().max(1e-300);
                max_spread_sigmas = max_spread_sigmas.max(diff / se);
                if diff > 3.0 * se {
                    symmetric_ok = false;
                }
            }
        }
    }

    // unimodality: center maximal, then non-increasing along the radius grid
    let mut unimodal_ok = radius_means
        .first()
        .is_none_or(|&m| center_est.value >= m);
    for w in radius_means.windows(2) {
        if w[1] > w[0] + 1e-9 {
            unimodal_ok = false;
        }
    }

    Ok(SphericalReport {
        center: center_est,
        points: shell_points,
        radii: radii.to_vec(),
        max_spread_sigmas,
        unimodal_ok,
        symmetric_ok,
    })
}

/// Per-datum outcome of the constrained-bound verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckRow {
    pub index: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedBoundReport {
    pub rows: Vec<BoundCheckRow>,
    pub total_estimate: f64,
    /// `-n p log sqrt(2 pi xi)`
    pub total_bound: f64,
    pub pass: bool,
}

/// Per-datum log-likelihood bound under the covariance floor:
/// `-(p/2) log(2 pi xi)`.
pub fn per_datum_bound(p: usize, xi: f64) -> f64 {
    -(p as f64 / 2.0) * (2.0 * std::f64::consts::PI * xi).ln()
}

/// Checks every per-datum Monte Carlo estimate against the constrained bound
/// (with a 3-standard-error allowance) and the total against
/// `-n p log sqrt(2 pi xi)`.
pub fn verify_constrained_bound(
    theta: &DecoderParams,
    data: &Dataset,
    s: usize,
    rng: &RngStream,
) -> Result<ConstrainedBoundReport> {
    if theta.xi <= 0.0 {
        return Err(Error::contract("constrained bound needs xi > 0"));
    }
    let ests = mc_loglik(theta, data, s, rng)?;
    let bound = per_datum_bound(data.p(), theta.xi);
    let rows: Vec<BoundCheckRow> = ests
        .iter()
        .enumerate()
        .map(|(index, e)| BoundCheckRow {
            index,
            estimate: e.value,
            stderr: e.stderr,
            bound,
            within_bound: e.value <= bound + 3.0 * e.stderr,
        })
        .collect();
    let total_estimate: f64 = rows.iter().map(|r| r.estimate).sum();
    let total_bound = bound * data.n() as f64;
    let pass = rows.iter().all(|r| r.within_bound) && total_estimate <= total_bound;
    Ok(ConstrainedBoundReport {
        rows,
        total_estimate,
        total_bound,
        pass,
    })
}
