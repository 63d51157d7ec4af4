//! Datasets: in-memory matrix, JSON persistence, synthetic generators, and
//! an IDX (MNIST-style) loader.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Binary,
    Real,
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n {
                return Err(Error::contract(format!("split index {i} out of range for n={n}")));
            }
            if seen[i] {
                return Err(Error::contract(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// An `n x p` data matrix with a kind tag, optional image layout (needed by
/// the half-image masks) and optional splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DataKind,
    n: usize,
    p: usize,
    /// Row-major values.
    data: Vec<f64>,
    /// `(rows, cols)` when the features form an image, row-major.
    pub image_shape: Option<(usize, usize)>,
    pub splits: Option<Splits>,
}

impl Dataset {
    pub fn new(kind: DataKind, n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::shape(format!(
                "dataset expects {} values for {}x{}, got {}",
                n * p,
                n,
                p,
                data.len()
            )));
        }
        if kind == DataKind::Binary && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("binary dataset contains non-binary values"));
        }
        Ok(Dataset {
            kind,
            n,
            p,
            data,
            image_shape: None,
            splits: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.row(i)).collect()
    }

    pub fn all_rows(&self) -> Vec<&[f64]> {
        (0..self.n).map(|i| self.row(i)).collect()
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.p {
            return Err(Error::shape(format!(
                "image shape {rows}x{cols} does not cover p={}",
                self.p
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.n)?;
        self.splits = Some(splits);
        Ok(self)
    }

    /// Training rows: the train split if present, every row otherwise.
    pub fn train_indices(&self) -> Vec<usize> {
        match &self.splits {
            Some(s) if !s.train.is_empty() => s.train.clone(),
            _ => (0..self.n).collect(),
        }
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        self.splits.as_ref().map(|s| s.validation.clone()).unwrap_or_default()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.splits.as_ref().map(|s| s.test.clone()).unwrap_or_default()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::format(format!("dataset serialisation failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(&path)?;
        let ds: Dataset = serde_json::from_str(&raw)
            .map_err(|e| Error::format(format!("corrupt dataset {}: {e}", path.as_ref().display())))?;
        if ds.data.len() != ds.n * ds.p {
            return Err(Error::format("dataset payload length disagrees with dims"));
        }
        if ds.kind == DataKind::Binary && ds.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format("binary dataset contains non-binary values"));
        }
        if let Some(s) = &ds.splits {
            s.validate(ds.n)?;
        }
        Ok(ds)
    }
}

/// Shuffled `frac_train` / `frac_val` / remainder split.
pub fn make_splits(n: usize, frac_train: f64, frac_val: f64, rng: &mut RngStream) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = ((n as f64) * frac_train).round() as usize;
    let n_val = ((n as f64) * frac_val).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Splits {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Linear-Gaussian generator parameters: `x = Lambda z + mu0 + sigma eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcaParams {
    /// `p x d` loading matrix.
    pub lambda: Tensor,
    pub mu0: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussMixParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernMixParams {
    pub weights: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
}

/// Generator parameters persisted next to every synthetic dataset so oracle
/// tests can recover the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroundTruth {
    Ppca(PpcaParams),
    GaussMixture(GaussMixParams),
    BernoulliMixture(BernMixParams),
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("ground truth serialisation failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(&path)?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::format(format!("corrupt ground truth {}: {e}", path.as_ref().display())))
    }
}

/// Samples `n` rows from the linear-Gaussian model.
pub fn synth_ppca(params: &PpcaParams, n: usize, seed: u64) -> Result<Dataset> {
    let p = params.lambda.shape()[0];
    let d = params.lambda.shape()[1];
    if params.mu0.len() != p {
        return Err(Error::shape("mu0 length disagrees with loading rows"));
    }
    if params.sigma2 <= 0.0 {
        return Err(Error::contract("sigma2 must be positive"));
    }
    let mut rng = RngStream::seed(seed);
    let sd = params.sigma2.sqrt();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let z = rng.standard_normal_vec(d);
        for i in 0..p {
            let mut v = params.mu0[i] + sd * rng.standard_normal();
            for j in 0..d {
                v += params.lambda.at(i, j) * z[j];
            }
            data.push(v);
        }
    }
    Dataset::new(DataKind::Real, n, p, data)
}

/// Samples `n` rows from a diagonal-covariance Gaussian mixture.
pub fn synth_gauss_mixture(params: &GaussMixParams, n: usize, seed: u64) -> Result<Dataset> {
    validate_mixture_params(&params.weights, params.means.len())?;
    let p = params.means[0].len();
    if params.vars.len() != params.means.len() || params.vars.iter().any(|v| v.len() != p) {
        return Err(Error::shape("mixture component shapes disagree"));
    }
    let mut rng = RngStream::seed(seed);
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let k = sample_category(&params.weights, &mut rng);
        for i in 0..p {
            data.push(params.means[k][i] + params.vars[k][i].sqrt() * rng.standard_normal());
        }
    }
    Dataset::new(DataKind::Real, n, p, data)
}

/// Samples `n` binary rows from a Bernoulli mixture.
pub fn synth_bernoulli_mixture(params: &BernMixParams, n: usize, seed: u64) -> Result<Dataset> {
    validate_mixture_params(&params.weights, params.prototypes.len())?;
    let p = params.prototypes[0].len();
    if params.prototypes.iter().any(|pr| pr.len() != p) {
        return Err(Error::shape("prototype lengths disagree"));
    }
    let mut rng = RngStream::seed(seed);
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let k = sample_category(&params.weights, &mut rng);
        for i in 0..p {
            data.push(if rng.uniform() < params.prototypes[k][i] { 1.0 } else { 0.0 });
        }
    }
    Dataset::new(DataKind::Binary, n, p, data)
}

fn validate_mixture_params(weights: &[f64], components: usize) -> Result<()> {
    if weights.is_empty() || weights.len() != components {
        return Err(Error::shape("mixture weights disagree with component count"));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::contract("mixture weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("mixture weights sum to {total}, not 1")));
    }
    Ok(())
}

fn sample_category(weights: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Random loading matrix with orthogonalised columns scaled to `scale`.
/// Orthogonal columns keep the exact latent posterior inside the diagonal
/// variational family, which the sampler-exactness oracles rely on.
pub fn random_orthogonal_loading(p: usize, d: usize, scale: f64, rng: &mut RngStream) -> Tensor {
    assert!(d <= p, "need d <= p for orthogonal columns");
    let mut cols: Vec<Vec<f64>> = (0..d).map(|_| rng.standard_normal_vec(p)).collect();
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = (0..p).map(|i| cols[j][i] * cols[k][i]).sum();
            for i in 0..p {
                cols[j][i] -= dot * cols[k][i];
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; p * d];
    for i in 0..p {
        for j in 0..d {
            data[i * d + j] = cols[j][i] * scale;
        }
    }
    Tensor::matrix(p, d, data).unwrap()
}

/// Four 8x8-style binary prototypes organised in two pairs. Within a pair
/// the upper halves share their body pattern and differ only in a small
/// "tell" (the first row lights its left corner for one member, its right
/// corner for the other), while the lower halves differ substantially.
/// Observing only the top half therefore leaves the bottom multimodal, with
/// the tell tipping the true conditional towards the right completion - the
/// regime where exact conditional sampling beats the approximate chain.
pub fn bars_prototypes(rows: usize, cols: usize, noise: f64) -> Vec<Vec<f64>> {
    assert!(rows >= 4 && cols >= 4, "prototypes need at least a 4x4 canvas");
    let p = rows * cols;
    let hi = 1.0 - noise;
    let lo = noise;
    let top_stripes = |r: usize, _c: usize| r.is_multiple_of(2);
    let top_solid = |r: usize, _c: usize| r >= 1 && r < rows / 2;
    let bottom_checker = |r: usize, c: usize| (r + c).is_multiple_of(2);
    let bottom_solid = |_r: usize, _c: usize| true;
    let bottom_stripes = |_r: usize, c: usize| c.is_multiple_of(2);
    let bottom_empty = |_r: usize, _c: usize| false;

    let build = |left_tell: bool,
                 top: &dyn Fn(usize, usize) -> bool,
                 bottom: &dyn Fn(usize, usize) -> bool| {
        let mut proto = vec![0.0; p];
        for r in 0..rows {
            for c in 0..cols {
                let on = if r == 0 {
                    // the tell: two corner pixels of the first row
                    if left_tell {
                        c < 2
                    } else {
                        c >= cols - 2
                    }
                } else if r < rows / 2 {
                    top(r, c)
                } else {
                    bottom(r, c)
                };
                proto[r * cols + c] = if on { hi } else { lo };
            }
        }
        proto
    };

    vec![
        build(true, &top_stripes, &bottom_solid),
        build(false, &top_stripes, &bottom_checker),
        build(true, &top_solid, &bottom_stripes),
        build(false, &top_solid, &bottom_empty),
    ]
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::format(format!(
                "IDX payload truncated at byte offset {} (needed 4 more bytes)",
                self.pos
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn u8(&mut self) -> Result<u8> {
        if self.pos >= self.bytes.len() {
            return Err(Error::format(format!(
                "IDX payload truncated at byte offset {}",
                self.pos
            )));
        }
        let v = self.bytes[self.pos];
        self.pos += 1;
        Ok(v)
    }
}

/// Loads an IDX image file (and optionally its label file). Pixels are scaled
/// into `[0, 1]`; with `binarize = Some(t)`, values at or above `t` map to 1
/// (so a pixel exactly at the threshold counts as on) and the dataset kind
/// becomes binary.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
    binarize: Option<f64>,
) -> Result<(Dataset, Option<Vec<u8>>)> {
    let bytes = std::fs::read(&images_path)?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
    let magic = cur.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "bad IDX image magic {magic:#010x} at byte offset 0 (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let p = rows * cols;
    let mut data = Vec::with_capacity(count * p);
    for _ in 0..count * p {
        let raw = cur.u8()? as f64 / 255.0;
        data.push(match binarize {
            Some(t) => {
                if raw >= t {
                    1.0
                } else {
                    0.0
                }
            }
            None => raw,
        });
    }
    let kind = if binarize.is_some() { DataKind::Binary } else { DataKind::Real };
    let mut ds = Dataset::new(kind, count, p, data)?;
    if count > 0 && p > 0 {
        ds = ds.with_image_shape(rows, cols)?;
    }

    let labels = match labels_path {
        Some(lp) => {
            let lbytes = std::fs::read(lp)?;
            let mut lcur = ByteCursor { bytes: &lbytes, pos: 0 };
            let lmagic = lcur.u32_be()?;
            if lmagic != IDX_LABELS_MAGIC {
                return Err(Error::format(format!(
                    "bad IDX label magic {lmagic:#010x} at byte offset 0"
                )));
            }
            let lcount = lcur.u32_be()? as usize;
            if lcount != count {
                return Err(Error::format(format!(
                    "label count {lcount} disagrees with image count {count}"
                )));
            }
            let mut labels = Vec::with_capacity(lcount);
            for _ in 0..lcount {
                labels.push(lcur.u8()?);
            }
            Some(labels)
        }
        None => None,
    };
    Ok((ds, labels))
}
