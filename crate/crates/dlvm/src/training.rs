//! ELBO estimation, pathwise gradients, Adam optimisation, initialisation,
//! and importance-sampled likelihood estimates.
//!
//! Gradients of the sampled ELBO use the path-derivative construction: the
//! variational parameters inside `log q` are wrapped in stop-gradient
//! markers, so their score-function term (which has zero expectation) is
//! removed from the estimator. Decoder gradients are identical to the plain
//! reparameterised estimator by construction.

use crate::data::Dataset;
use crate::distributions::{draw_reparam_eps, graph, std_normal_logpdf};
use crate::error::{Error, Result};
use crate::exec;
use crate::mc::{log_mean_exp_with_stderr, McEstimate};
use crate::model::{
    Checkpoint, CheckpointMeta, DecodeModel, DecoderHeads, DecoderParams, EncodeModel,
    EncoderParams, ModelDims, OutputKind,
};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training aborts (unless `allow_divergence`) once the minibatch loss
/// exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

// rng fork salts; each fan-out site gets its own namespace
const SALT_INIT_DECODER: u64 = 0xD0;
const SALT_INIT_ENCODER: u64 = 0xE0;
const SALT_SHUFFLE: u64 = 0x51;
const SALT_STEP: u64 = 0x57;
const SALT_EVAL: u64 = 0x48;

/// Glorot-uniform tensor: entries on `+-sqrt(6 / (fan_in + fan_out))` for a
/// 2-D `(fan_out, fan_in)` shape.
pub fn glorot_init(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    if shape.len() != 2 {
        return Err(Error::contract(format!(
            "glorot_init expects a 2-D shape, got {shape:?}"
        )));
    }
    let (fan_out, fan_in) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_in(-limit, limit))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Glorot weights, zero biases.
pub fn init_decoder(
    dims: ModelDims,
    output_kind: OutputKind,
    xi: f64,
    rng: &mut RngStream,
) -> Result<DecoderParams> {
    let (d, h, p) = (dims.latent, dims.hidden, dims.data);
    Ok(DecoderParams {
        w: glorot_init(&[h, d], rng)?,
        a: Tensor::zeros(vec![h]),
        v: glorot_init(&[p, h], rng)?,
        b: Tensor::zeros(vec![p]),
        alpha: glorot_init(&[p, h], rng)?,
        beta: Tensor::zeros(vec![p]),
        output_kind,
        xi,
    })
}

/// Glorot weights, zero biases; the zero log-diagonal bias starts the
/// variational family at unit variances.
pub fn init_encoder(dims: ModelDims, rng: &mut RngStream) -> Result<EncoderParams> {
    let (d, h, p) = (dims.latent, dims.hidden, dims.data);
    Ok(EncoderParams {
        w: glorot_init(&[h, p], rng)?,
        a: Tensor::zeros(vec![h]),
        mean_w: glorot_init(&[d, h], rng)?,
        mean_b: Tensor::zeros(vec![d]),
        logdiag_w: glorot_init(&[d, h], rng)?,
        logdiag_b: Tensor::zeros(vec![d]),
        u_w: glorot_init(&[d, h], rng)?,
        u_b: Tensor::zeros(vec![d]),
    })
}

/// First and second moment buffers for one ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("adam_step: parameter/gradient/state counts disagree"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adam_step: param shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One per-datum, per-sample ELBO term with freshly drawn reparameterised
/// noise: `log p(x|z) + log p(z) - log q(z|x)`.
fn elbo_term_value<D, E>(decoder: &D, encoder: &E, x: &[f64], rng: &mut RngStream) -> Result<f64>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    let q = encoder.encode_dist(x);
    let (eps1, eps2) = draw_reparam_eps(rng, q.dim());
    let z = q.sample_with_eps(&eps1, eps2);
    let out = decoder.decode(&z);
    Ok(out.log_density(x)? + std_normal_logpdf(&z) - q.log_density(&z)?)
}

/// Monte Carlo ELBO over a batch: the mean over items and `l` samples of the
/// single-sample term.
pub fn elbo_estimate<D, E>(
    decoder: &D,
    encoder: &E,
    batch: &[&[f64]],
    l: usize,
    rng: &RngStream,
) -> Result<f64>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    if batch.is_empty() || l == 0 {
        return Err(Error::contract("elbo_estimate needs a non-empty batch and l >= 1"));
    }
    let mut total = 0.0;
    for (i, x) in batch.iter().enumerate() {
        for s in 0..l {
            let mut r = rng.fork((i * l + s) as u64);
            total += elbo_term_value(decoder, encoder, x, &mut r)?;
        }
    }
    Ok(total / (batch.len() * l) as f64)
}

/// The `k` log importance weights `log p(x|z) + log p(z) - log q(z|x)` with
/// `z ~ q(.|x)`. Exposed so paired comparisons (ELBO vs importance-weighted
/// estimate on shared draws) can reuse one set of terms.
pub fn iw_log_weights<D, E>(
    decoder: &D,
    encoder: &E,
    x: &[f64],
    k: usize,
    rng: &RngStream,
) -> Result<Vec<f64>>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    if k == 0 {
        return Err(Error::contract("importance sampling needs k >= 1"));
    }
    (0..k)
        .map(|s| elbo_term_value(decoder, encoder, x, &mut rng.fork(s as u64)))
        .collect()
}

/// Importance-sampled estimate of `log p(x)`: `log-mean-exp` of the `k` log
/// weights. A stochastic lower bound, non-decreasing in `k` in expectation;
/// at `k = 1` it coincides with a single-sample ELBO term.
pub fn marginal_loglik_importance<D, E>(
    decoder: &D,
    encoder: &E,
    x: &[f64],
    k: usize,
    rng: &RngStream,
) -> Result<McEstimate>
where
    D: DecodeModel + ?Sized,
    E: EncodeModel + ?Sized,
{
    let terms = iw_log_weights(decoder, encoder, x, k, rng)?;
    log_mean_exp_with_stderr(&terms)
}

/// Dataset-total ELBO `sum_i ELBO_i` with Monte Carlo standard error,
/// fanned out per item. Comparable against dataset-total log-likelihoods.
pub fn dataset_elbo_total<D, E>(
    decoder: &D,
    encoder: &E,
    rows: &[&[f64]],
    l: usize,
    rng: &RngStream,
) -> Result<McEstimate>
where
    D: DecodeModel + ?Sized + Sync,
    E: EncodeModel + ?Sized + Sync,
{
    if rows.is_empty() || l == 0 {
        return Err(Error::contract("need a non-empty dataset and l >= 1"));
    }
    let per_item: Vec<Result<(f64, f64)>> = exec::map_indexed(rows.len(), |i| {
        let item_rng = rng.fork(i as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for s in 0..l {
            let mut r = item_rng.fork(s as u64);
            let t = elbo_term_value(decoder, encoder, rows[i], &mut r)?;
            sum += t;
            sum_sq += t * t;
        }
        let mean = sum / l as f64;
        let var = (sum_sq / l as f64 - mean * mean).max(0.0);
        Ok((mean, var / l as f64)) // per-item mean and its variance
    });
    let mut total = 0.0;
    let mut var_total = 0.0;
    for r in per_item {
        let (mean, var) = r?;
        total += mean;
        var_total += var;
    }
    Ok(McEstimate {
        value: total,
        stderr: var_total.sqrt(),
    })
}

/// Dataset-total importance-weighted log-likelihood estimate
/// `sum_i log p(x_i)` with combined standard error, fanned out per item.
pub fn dataset_iw_total<D, E>(
    decoder: &D,
    encoder: &E,
    rows: &[&[f64]],
    k: usize,
    rng: &RngStream,
) -> Result<McEstimate>
where
    D: DecodeModel + ?Sized + Sync,
    E: EncodeModel + ?Sized + Sync,
{
    if rows.is_empty() {
        return Err(Error::contract("need a non-empty dataset"));
    }
    let per_item: Vec<Result<McEstimate>> = exec::map_indexed(rows.len(), |i| {
        marginal_loglik_importance(decoder, encoder, rows[i], k, &rng.fork(i as u64))
    });
    let mut total = 0.0;
    let mut var_total = 0.0;
    for r in per_item {
        let e = r?;
        total += e.value;
        var_total += e.stderr * e.stderr;
    }
    Ok(McEstimate {
        value: total,
        stderr: var_total.sqrt(),
    })
}

/// ELBO term on the tape; shared tail of every gradient estimator.
pub(crate) fn elbo_term_graph(
    tape: &mut Tape,
    log_px_z: Var,
    z: Var,
    mean: Var,
    logdiag: Var,
    u: Var,
    path_derivative: bool,
) -> Result<Var> {
    let log_prior = graph::std_normal_logpdf(tape, z)?;
    let log_q = graph::rank1_logpdf(tape, z, mean, logdiag, u, path_derivative)?;
    let t = tape.add(log_px_z, log_prior)?;
    tape.sub(t, log_q)
}

/// Gradients of the sampled ELBO with respect to decoder and encoder
/// parameters, in the order of `tensors()`.
#[derive(Debug)]
pub struct ElboGradients {
    /// Value of the sampled ELBO (identical draws to [`elbo_estimate`] under
    /// the same parent stream).
    pub elbo: f64,
    pub decoder: Vec<Tensor>,
    pub encoder: Vec<Tensor>,
    pub clamp_events: u64,
}

fn elbo_gradients_inner(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    batch: &[&[f64]],
    l: usize,
    rng: &RngStream,
    path_derivative: bool,
) -> Result<ElboGradients> {
    if batch.is_empty() || l == 0 {
        return Err(Error::contract("gradient estimation needs a non-empty batch and l >= 1"));
    }
    let d = decoder.dims().latent;
    let mut tape = Tape::new();
    let dvars = decoder.register(&mut tape);
    let evars = encoder.register(&mut tape);

    let mut acc: Option<Var> = None;
    for (i, x) in batch.iter().enumerate() {
        for s in 0..l {
            let mut r = rng.fork((i * l + s) as u64);
            let heads = encoder.forward_graph(&mut tape, &evars, x)?;
            let (eps1, eps2) = draw_reparam_eps(&mut r, d);
            let z = graph::reparam_sample(&mut tape, heads.mean, heads.logdiag, heads.u, &eps1, eps2)?;
            let log_px_z = match decoder.forward_graph(&mut tape, &dvars, z)? {
                DecoderHeads::Gaussian { mean, var } => {
                    graph::gaussian_diag_logpdf(&mut tape, x, mean, var)?
                }
                DecoderHeads::Bernoulli { probs } => graph::bernoulli_logpmf(&mut tape, x, probs)?,
            };
            let term = elbo_term_graph(
                &mut tape,
                log_px_z,
                z,
                heads.mean,
                heads.logdiag,
                heads.u,
                path_derivative,
            )?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
    }
    let total = acc.expect("batch checked non-empty");
    let elbo = tape.mul_scalar(total, 1.0 / (batch.len() * l) as f64);
    let grads = tape.backward(elbo)?;

    let collect = |vars: &[Var], tensors: &[&Tensor]| -> Vec<Tensor> {
        vars.iter()
            .zip(tensors)
            .map(|(v, t)| grads.wrt_or_zeros(*v, t.shape()))
            .collect()
    };
    Ok(ElboGradients {
        elbo: tape.value(elbo).data()[0],
        decoder: collect(&dvars.list(), &decoder.tensors()),
        encoder: collect(&evars.list(), &encoder.tensors()),
        clamp_events: tape.clamp_events(),
    })
}

/// Path-derivative gradient estimator: variational parameters inside `log q`
/// are detached, removing the score-function term. Decoder gradients match
/// the plain estimator bit for bit under a shared stream.
pub fn elbo_gradient_path_derivative(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    batch: &[&[f64]],
    l: usize,
    rng: &RngStream,
) -> Result<ElboGradients> {
    elbo_gradients_inner(decoder, encoder, batch, l, rng, true)
}

/// Plain reparameterised gradient estimator (no stop-gradient markers).
pub fn elbo_gradient_plain(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    batch: &[&[f64]],
    l: usize,
    rng: &RngStream,
) -> Result<ElboGradients> {
    elbo_gradients_inner(decoder, encoder, batch, l, rng, false)
}

/// Training configuration. Defaults: learning rate `1e-4`, minibatches of
/// 10, one Monte Carlo sample per datum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub output_kind: OutputKind,
    /// Covariance floor for Gaussian decoders (0 disables the constraint).
    pub xi: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Monte Carlo samples per datum (`L`) for training gradients.
    pub mc_samples: usize,
    /// Samples per datum for the held-out ELBO (evaluated each epoch).
    pub heldout_mc_samples: usize,
    /// Importance samples per held-out datum for the likelihood monitor.
    pub heldout_iw_samples: usize,
    /// Keep training through non-finite or runaway losses (the blow-up
    /// experiment needs to witness divergence).
    pub allow_divergence: bool,
    /// Use the path-derivative estimator (default) or the plain one.
    pub path_derivative: bool,
}

impl TrainConfig {
    pub fn new(dims: ModelDims, output_kind: OutputKind) -> Self {
        TrainConfig {
            dims,
            output_kind,
            xi: 0.0,
            learning_rate: 1e-4,
            batch_size: 10,
            steps: 1000,
            seed: 0,
            mc_samples: 1,
            heldout_mc_samples: 16,
            heldout_iw_samples: 64,
            allow_divergence: false,
            path_derivative: true,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        crate::model::sha256_hex(json.as_bytes())
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::contract("batch size and mc_samples must be >= 1"));
        }
        if data.n() == 0 {
            return Err(Error::contract("training data is empty"));
        }
        if data.p() != self.dims.data {
            return Err(Error::shape(format!(
                "config data dim {} disagrees with dataset p {}",
                self.dims.data,
                data.p()
            )));
        }
        Ok(())
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Minibatch ELBO estimate at this step.
    pub train_elbo: f64,
    /// Held-out ELBO, filled on epoch boundaries.
    pub heldout_elbo: Option<f64>,
    /// Mean held-out importance-weighted log-likelihood, filled on epoch
    /// boundaries.
    pub iw_loglik: Option<f64>,
    /// Numeric clamp events on this step's tape (0 on healthy runs).
    pub clamps: u64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

/// Append-only training trace with CSV import/export
/// (columns: step, train_elbo, heldout_elbo, iw_loglik, clamps, seconds).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<StepRecord>,
}

impl MetricsTrace {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < rec.step));
        self.records.push(rec);
    }

    /// Mean minibatch ELBO per completed epoch.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.records
            .chunks(steps_per_epoch)
            .filter(|c| c.len() == steps_per_epoch)
            .map(|c| c.iter().map(|r| r.train_elbo).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
        for rec in &self.records {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref()).map_err(Error::from)?;
        let mut records = Vec::new();
        for rec in r.deserialize() {
            records.push(rec?);
        }
        Ok(MetricsTrace { records })
    }
}

/// Deterministic model initialisation for a config; [`train`] starts from
/// exactly this state.
pub fn init_models(config: &TrainConfig) -> Result<(DecoderParams, EncoderParams)> {
    let root = RngStream::seed(config.seed);
    let dec = init_decoder(
        config.dims,
        config.output_kind,
        config.xi,
        &mut root.fork(SALT_INIT_DECODER),
    )?;
    let enc = init_encoder(config.dims, &mut root.fork(SALT_INIT_ENCODER))?;
    Ok((dec, enc))
}

/// Minibatch Adam ascent on the sampled ELBO. Bit-reproducible given
/// `(seed, config, dataset)`; the dataset is reshuffled once per epoch with
/// the seeded stream. Held-out metrics are evaluated at every epoch boundary
/// over the validation split, in parallel over items with per-item streams.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, MetricsTrace)> {
    config.validate(data)?;
    let root = RngStream::seed(config.seed);
    let (mut decoder, mut encoder) = init_models(config)?;
    let mut dec_state = AdamState::new(&decoder.tensors());
    let mut enc_state = AdamState::new(&encoder.tensors());

    let train_idx = data.train_indices();
    let held_idx = data.validation_indices();

    let mut trace = MetricsTrace::default();
    let start = Instant::now();
    let mut epoch: u64 = 0;
    let mut order = train_idx.clone();
    root.fork(SALT_SHUFFLE).fork(0).shuffle(&mut order);
    let mut pos = 0usize;

    for step in 0..config.steps {
        if pos >= order.len() {
            epoch += 1;
            order = train_idx.clone();
            root.fork(SALT_SHUFFLE).fork(epoch).shuffle(&mut order);
            pos = 0;
        }
        let end = (pos + config.batch_size).min(order.len());
        let batch = data.rows(&order[pos..end]);
        pos = end;
        let epoch_done = pos >= order.len();

        let grads = elbo_gradients_inner(
            &decoder,
            &encoder,
            &batch,
            config.mc_samples,
            &root.fork(SALT_STEP).fork(step),
            config.path_derivative,
        )?;
        let loss = -grads.elbo;
        if (!loss.is_finite() || loss > DIVERGENCE_LIMIT) && !config.allow_divergence {
            let norms = format!(
                "decoder {:.3e}, encoder {:.3e}",
                decoder.tensors().iter().map(|t| t.squared_norm()).sum::<f64>().sqrt(),
                encoder.tensors().iter().map(|t| t.squared_norm()).sum::<f64>().sqrt(),
            );
            return Err(Error::Diverged {
                step,
                loss,
                norms,
                clamps: grads.clamp_events,
            });
        }

        // ascend the ELBO: apply Adam to the negated gradients when finite
        let finite = grads.decoder.iter().chain(&grads.encoder).all(|t| t.is_finite());
        if finite {
            let neg = |ts: &[Tensor]| -> Vec<Tensor> {
                ts.iter()
                    .map(|t| {
                        let data = t.data().iter().map(|v| -v).collect();
                        Tensor::from_vec(t.shape().to_vec(), data).unwrap()
                    })
                    .collect()
            };
            let dneg = neg(&grads.decoder);
            let eneg = neg(&grads.encoder);
            adam_step(
                &mut decoder.tensors_mut(),
                &dneg.iter().collect::<Vec<_>>(),
                &mut dec_state,
                config.learning_rate,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            )?;
            adam_step(
                &mut encoder.tensors_mut(),
                &eneg.iter().collect::<Vec<_>>(),
                &mut enc_state,
                config.learning_rate,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            )?;
        }

        let (heldout_elbo, iw_loglik) = if epoch_done && !held_idx.is_empty() {
            let eval_rng = root.fork(SALT_EVAL).fork(epoch);
            let rows = data.rows(&held_idx);
            let elbo = heldout_elbo_parallel(
                &decoder,
                &encoder,
                &rows,
                config.heldout_mc_samples,
                &eval_rng.fork(0),
            )?;
            let iw = heldout_iw_parallel(
                &decoder,
                &encoder,
                &rows,
                config.heldout_iw_samples,
                &eval_rng.fork(1),
            )?;
            (Some(elbo), Some(iw))
        } else {
            (None, None)
        };

        trace.push(StepRecord {
            step,
            train_elbo: grads.elbo,
            heldout_elbo,
            iw_loglik,
            clamps: grads.clamp_events,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let meta = CheckpointMeta {
        seed: config.seed,
        steps: config.steps,
        config_digest: config.digest(),
    };
    Ok((Checkpoint::new(decoder, encoder, meta)?, trace))
}

/// Held-out ELBO averaged over items, fanned out per item.
fn heldout_elbo_parallel(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    rows: &[&[f64]],
    l: usize,
    rng: &RngStream,
) -> Result<f64> {
    let per_item: Vec<Result<f64>> = exec::map_indexed(rows.len(), |i| {
        elbo_estimate(decoder, encoder, &rows[i..=i], l, &rng.fork(i as u64))
    });
    let mut total = 0.0;
    for r in per_item {
        total += r?;
    }
    Ok(total / rows.len() as f64)
}

/// Mean held-out importance-weighted log-likelihood.
fn heldout_iw_parallel(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    rows: &[&[f64]],
    k: usize,
    rng: &RngStream,
) -> Result<f64> {
    let per_item: Vec<Result<McEstimate>> = exec::map_indexed(rows.len(), |i| {
        marginal_loglik_importance(decoder, encoder, rows[i], k, &rng.fork(i as u64))
    });
    let mut total = 0.0;
    for r in per_item {
        total += r?.value;
    }
    Ok(total / rows.len() as f64)
}
