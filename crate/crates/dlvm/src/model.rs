//! Decoder and encoder parametrisations, the covariance constraint, and
//! checkpoint persistence.
//!
//! The decoder is a one-hidden-layer MLP with a tanh nonlinearity and two
//! heads: mean `V tanh(W z + a) + b` and, for Gaussian outputs, diagonal
//! variances `exp(alpha tanh(W z + a) + beta) + xi`. The additive `xi` floor
//! realises the spectral constraint: every emitted covariance has all
//! eigenvalues at or above `xi`, which is what restores a bounded likelihood.
//! Bernoulli outputs use a sigmoid head clamped away from 0 and 1.
//!
//! The encoder mirrors the decoder: one tanh hidden layer with three linear
//! heads producing the mean, log-diagonal and rank-1 factor of the
//! variational family. The rank-1 head is left unconstrained.

use crate::distributions::{BernoulliProduct, GaussianDiag, GaussianDiagRank1, OutputDist, BERNOULLI_EPS};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Gaussian,
    Bernoulli,
}

/// Latent, hidden and data dimensions `(d, h, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub latent: usize,
    pub hidden: usize,
    pub data: usize,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decoder weights `theta = (W, a, V, b, alpha, beta)` plus the output family
/// and the constraint level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// `h x d`
    #[serde(rename = "W")]
    pub w: Tensor,
    /// `h`
    pub a: Tensor,
    /// `p x h`
    #[serde(rename = "V")]
    pub v: Tensor,
    /// `p`
    pub b: Tensor,
    /// `p x h` (Gaussian head; unused for Bernoulli outputs)
    pub alpha: Tensor,
    /// `p`
    pub beta: Tensor,
    pub output_kind: OutputKind,
    /// Covariance floor; must be 0 for Bernoulli outputs.
    pub xi: f64,
}

impl DecoderParams {
    pub fn zeros(dims: ModelDims, output_kind: OutputKind, xi: f64) -> Self {
        let (d, h, p) = (dims.latent, dims.hidden, dims.data);
        DecoderParams {
            w: Tensor::zeros(vec![h, d]),
            a: Tensor::zeros(vec![h]),
            v: Tensor::zeros(vec![p, h]),
            b: Tensor::zeros(vec![p]),
            alpha: Tensor::zeros(vec![p, h]),
            beta: Tensor::zeros(vec![p]),
            output_kind,
            xi,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            latent: self.w.shape()[1],
            hidden: self.w.shape()[0],
            data: self.v.shape()[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let (dl, h, p) = (d.latent, d.hidden, d.data);
        let checks = [
            (self.w.shape() == [h, dl], "W"),
            (self.a.shape() == [h], "a"),
            (self.v.shape() == [p, h], "V"),
            (self.b.shape() == [p], "b"),
            (self.alpha.shape() == [p, h], "alpha"),
            (self.beta.shape() == [p], "beta"),
        ];
        for (ok, name) in checks {
            if !ok {
                return Err(Error::shape(format!("decoder tensor {name} has inconsistent shape")));
            }
        }
        if self.xi < 0.0 {
            return Err(Error::contract("xi must be nonnegative"));
        }
        Ok(())
    }

    fn hidden(&self, z: &[f64]) -> Vec<f64> {
        let dims = self.dims();
        let mut h = vec![0.0; dims.hidden];
        for i in 0..dims.hidden {
            let mut acc = self.a.data()[i];
            for j in 0..dims.latent {
                acc += self.w.data()[i * dims.latent + j] * z[j];
            }
            h[i] = acc.tanh();
        }
        h
    }

    /// Gaussian head: `(mean, diagonal variances)`. Every variance carries
    /// the additive floor `xi`.
    pub fn decode_gaussian(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.output_kind != OutputKind::Gaussian {
            return Err(Error::contract("decode_gaussian on a Bernoulli decoder"));
        }
        let dims = self.dims();
        let hid = self.hidden(z);
        let mut mean = vec![0.0; dims.data];
        let mut var = vec![0.0; dims.data];
        for i in 0..dims.data {
            let mut m = self.b.data()[i];
            let mut s = self.beta.data()[i];
            for j in 0..dims.hidden {
                m += self.v.data()[i * dims.hidden + j] * hid[j];
                s += self.alpha.data()[i * dims.hidden + j] * hid[j];
            }
            mean[i] = m;
            var[i] = s.exp() + self.xi;
        }
        Ok((mean, var))
    }

    /// Bernoulli head: probabilities clamped into
    /// `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`.
    pub fn decode_bernoulli(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.output_kind != OutputKind::Bernoulli {
            return Err(Error::contract("decode_bernoulli on a Gaussian decoder"));
        }
        let dims = self.dims();
        let hid = self.hidden(z);
        let mut probs = vec![0.0; dims.data];
        for i in 0..dims.data {
            let mut m = self.b.data()[i];
            for j in 0..dims.hidden {
                m += self.v.data()[i * dims.hidden + j] * hid[j];
            }
            probs[i] = stable_sigmoid(m).clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
        }
        Ok(probs)
    }

    /// Ordered parameter list; the order is shared by [`DecoderVars`] and the
    /// optimiser state.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.a, &self.v, &self.b, &self.alpha, &self.beta]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w,
            &mut self.a,
            &mut self.v,
            &mut self.b,
            &mut self.alpha,
            &mut self.beta,
        ]
    }

    /// Registers all parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            w: tape.leaf(self.w.clone()),
            a: tape.leaf(self.a.clone()),
            v: tape.leaf(self.v.clone()),
            b: tape.leaf(self.b.clone()),
            alpha: tape.leaf(self.alpha.clone()),
            beta: tape.leaf(self.beta.clone()),
        }
    }

    /// Differentiable forward pass from a latent node.
    pub fn forward_graph(&self, tape: &mut Tape, vars: &DecoderVars, z: Var) -> Result<DecoderHeads> {
        let wz = tape.matmul(vars.w, z)?;
        let pre = tape.add(wz, vars.a)?;
        let hid = tape.tanh(pre);
        let vh = tape.matmul(vars.v, hid)?;
        let mean = tape.add(vh, vars.b)?;
        match self.output_kind {
            OutputKind::Gaussian => {
                let ah = tape.matmul(vars.alpha, hid)?;
                let s = tape.add(ah, vars.beta)?;
                let evar = tape.exp(s);
                let var = tape.add_scalar(evar, self.xi);
                Ok(DecoderHeads::Gaussian { mean, var })
            }
            OutputKind::Bernoulli => {
                let sig = tape.sigmoid(mean);
                let probs = tape.clamp(sig, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                Ok(DecoderHeads::Bernoulli { probs })
            }
        }
    }
}

impl crate::model::DecodeModel for DecoderParams {
    fn latent_dim(&self) -> usize {
        self.dims().latent
    }

    fn data_dim(&self) -> usize {
        self.dims().data
    }

    fn decode(&self, z: &[f64]) -> OutputDist {
        match self.output_kind {
            OutputKind::Gaussian => {
                let (mean, diag) = self.decode_gaussian(z).expect("kind checked");
                OutputDist::Gaussian(GaussianDiag::new_unchecked(mean, diag))
            }
            OutputKind::Bernoulli => {
                let probs = self.decode_bernoulli(z).expect("kind checked");
                OutputDist::Bernoulli(BernoulliProduct::new(probs))
            }
        }
    }
}

/// Tape handles for decoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w: Var,
    pub a: Var,
    pub v: Var,
    pub b: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl DecoderVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.w, self.a, self.v, self.b, self.alpha, self.beta]
    }
}

/// Decoder heads as tape nodes.
#[derive(Debug, Clone, Copy)]
pub enum DecoderHeads {
    Gaussian { mean: Var, var: Var },
    Bernoulli { probs: Var },
}

/// Encoder weights `gamma`: a tanh hidden layer and three linear heads
/// `(mean, log-diagonal, u)` for the diag + rank-1 variational family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `h x p`
    pub w: Tensor,
    /// `h`
    pub a: Tensor,
    /// `d x h`
    pub mean_w: Tensor,
    /// `d`
    pub mean_b: Tensor,
    /// `d x h`
    pub logdiag_w: Tensor,
    /// `d`
    pub logdiag_b: Tensor,
    /// `d x h`
    pub u_w: Tensor,
    /// `d`
    pub u_b: Tensor,
}

impl EncoderParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (d, h, p) = (dims.latent, dims.hidden, dims.data);
        EncoderParams {
            w: Tensor::zeros(vec![h, p]),
            a: Tensor::zeros(vec![h]),
            mean_w: Tensor::zeros(vec![d, h]),
            mean_b: Tensor::zeros(vec![d]),
            logdiag_w: Tensor::zeros(vec![d, h]),
            logdiag_b: Tensor::zeros(vec![d]),
            u_w: Tensor::zeros(vec![d, h]),
            u_b: Tensor::zeros(vec![d]),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            latent: self.mean_w.shape()[0],
            hidden: self.w.shape()[0],
            data: self.w.shape()[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let (d, h, p) = (dims.latent, dims.hidden, dims.data);
        let checks = [
            (self.w.shape() == [h, p], "w"),
            (self.a.shape() == [h], "a"),
            (self.mean_w.shape() == [d, h], "mean_w"),
            (self.mean_b.shape() == [d], "mean_b"),
            (self.logdiag_w.shape() == [d, h], "logdiag_w"),
            (self.logdiag_b.shape() == [d], "logdiag_b"),
            (self.u_w.shape() == [d, h], "u_w"),
            (self.u_b.shape() == [d], "u_b"),
        ];
        for (ok, name) in checks {
            if !ok {
                return Err(Error::shape(format!("encoder tensor {name} has inconsistent shape")));
            }
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let dims = self.dims();
        let mut h = vec![0.0; dims.hidden];
        for i in 0..dims.hidden {
            let mut acc = self.a.data()[i];
            for j in 0..dims.data {
                acc += self.w.data()[i * dims.data + j] * x[j];
            }
            h[i] = acc.tanh();
        }
        h
    }

    /// Raw heads `(mean, log-diagonal, u)`.
    pub fn encode_raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dims = self.dims();
        let hid = self.hidden(x);
        let head = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..dims.latent)
                .map(|i| {
                    let mut acc = b.data()[i];
                    for j in 0..dims.hidden {
                        acc += w.data()[i * dims.hidden + j] * hid[j];
                    }
                    acc
                })
                .collect()
        };
        (
            head(&self.mean_w, &self.mean_b),
            head(&self.logdiag_w, &self.logdiag_b),
            head(&self.u_w, &self.u_b),
        )
    }

    /// Variational distribution at `x`; the diagonal is exponentiated, so it
    /// is strictly positive for any finite weights.
    pub fn encode(&self, x: &[f64]) -> GaussianDiagRank1 {
        let (mean, logdiag, u) = self.encode_raw(x);
        GaussianDiagRank1 {
            mean,
            diag: logdiag.iter().map(|l| l.exp()).collect(),
            u,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w,
            &self.a,
            &self.mean_w,
            &self.mean_b,
            &self.logdiag_w,
            &self.logdiag_b,
            &self.u_w,
            &self.u_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w,
            &mut self.a,
            &mut self.mean_w,
            &mut self.mean_b,
            &mut self.logdiag_w,
            &mut self.logdiag_b,
            &mut self.u_w,
            &mut self.u_b,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w: tape.leaf(self.w.clone()),
            a: tape.leaf(self.a.clone()),
            mean_w: tape.leaf(self.mean_w.clone()),
            mean_b: tape.leaf(self.mean_b.clone()),
            logdiag_w: tape.leaf(self.logdiag_w.clone()),
            logdiag_b: tape.leaf(self.logdiag_b.clone()),
            u_w: tape.leaf(self.u_w.clone()),
            u_b: tape.leaf(self.u_b.clone()),
        }
    }

    /// Differentiable forward pass from a constant observation.
    pub fn forward_graph(&self, tape: &mut Tape, vars: &EncoderVars, x: &[f64]) -> Result<EncoderHeads> {
        let xc = tape.constant(Tensor::vector(x.to_vec()));
        let wx = tape.matmul(vars.w, xc)?;
        let pre = tape.add(wx, vars.a)?;
        let hid = tape.tanh(pre);
        let lin = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
            let wh = tape.matmul(w, hid)?;
            tape.add(wh, b)
        };
        Ok(EncoderHeads {
            mean: lin(tape, vars.mean_w, vars.mean_b)?,
            logdiag: lin(tape, vars.logdiag_w, vars.logdiag_b)?,
            u: lin(tape, vars.u_w, vars.u_b)?,
        })
    }
}

impl crate::model::EncodeModel for EncoderParams {
    fn latent_dim(&self) -> usize {
        self.dims().latent
    }

    fn data_dim(&self) -> usize {
        self.dims().data
    }

    fn encode_dist(&self, x: &[f64]) -> GaussianDiagRank1 {
        self.encode(x)
    }
}

/// Tape handles for encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w: Var,
    pub a: Var,
    pub mean_w: Var,
    pub mean_b: Var,
    pub logdiag_w: Var,
    pub logdiag_b: Var,
    pub u_w: Var,
    pub u_b: Var,
}

impl EncoderVars {
    pub fn list(&self) -> Vec<Var> {
        vec![
            self.w,
            self.a,
            self.mean_w,
            self.mean_b,
            self.logdiag_w,
            self.logdiag_b,
            self.u_w,
            self.u_b,
        ]
    }
}

/// Encoder heads as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncoderHeads {
    pub mean: Var,
    pub logdiag: Var,
    pub u: Var,
}

/// Anything that maps a latent point to an output distribution.
pub trait DecodeModel: Sync {
    fn latent_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn decode(&self, z: &[f64]) -> OutputDist;
}

/// Anything that maps an observation to a variational distribution.
pub trait EncodeModel: Sync {
    fn latent_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn encode_dist(&self, x: &[f64]) -> GaussianDiagRank1;
}

/// Run metadata embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub config_digest: String,
}

/// Persisted model state. Round-trips bit-exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: ModelDims,
    pub output_kind: OutputKind,
    pub xi: f64,
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
    pub meta: CheckpointMeta,
    #[serde(default)]
    pub digest: String,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(decoder: DecoderParams, encoder: EncoderParams, meta: CheckpointMeta) -> Result<Self> {
        decoder.validate()?;
        encoder.validate()?;
        let ddims = decoder.dims();
        let edims = encoder.dims();
        if ddims.latent != edims.latent || ddims.data != edims.data {
            return Err(Error::shape(format!(
                "decoder dims {ddims:?} incompatible with encoder dims {edims:?}"
            )));
        }
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: ddims,
            output_kind: decoder.output_kind,
            xi: decoder.xi,
            decoder,
            encoder,
            meta,
            digest: String::new(),
        };
        ckpt.digest = ckpt.content_digest();
        Ok(ckpt)
    }

    /// SHA-256 over the canonical little-endian byte stream of all
    /// parameters plus dims, output kind and xi.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.version.to_le_bytes());
        for dim in [self.dims.latent, self.dims.hidden, self.dims.data] {
            hasher.update((dim as u64).to_le_bytes());
        }
        hasher.update([match self.output_kind {
            OutputKind::Gaussian => 0u8,
            OutputKind::Bernoulli => 1u8,
        }]);
        hasher.update(self.xi.to_le_bytes());
        for t in self.decoder.tensors().into_iter().chain(self.encoder.tensors()) {
            for &s in t.shape() {
                hasher.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        for t in self.decoder.tensors().into_iter().chain(self.encoder.tensors()) {
            if !t.is_finite() {
                return Err(Error::contract("refusing to save non-finite parameters"));
            }
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("checkpoint serialisation failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(&path)?;
        let ckpt: Checkpoint = serde_json::from_str(&raw).map_err(|e| {
            Error::format(format!(
                "corrupt checkpoint {}: {e}",
                path.as_ref().display()
            ))
        })?;
        ckpt.decoder.validate()?;
        ckpt.encoder.validate()?;
        let computed = ckpt.content_digest();
        if computed != ckpt.digest {
            return Err(Error::DigestMismatch {
                stored: ckpt.digest,
                computed,
            });
        }
        Ok(ckpt)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 hex digest of arbitrary bytes (used for config provenance).
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_digest(hasher)
}
