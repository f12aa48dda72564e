//! Fréchet distances between Gaussians fitted to features, and the
//! reconstruction metrics built on them.
//!
//! Moments and distances are computed in `f64` whatever the model precision.

mod linalg;

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use linalg::{check_symmetric, psd_sqrt, psd_sqrt_product, sym_eigen, symmetrize, NEG_EIG_TOL};

use crate::data::{sample_prior, DataError, Dataset};
use crate::models::{ArchConfig, DataShape, ModelBundle, ModelError};
use crate::nn::{Activation, LayerKind, LayerSpec, Network, NetworkSpec, NnError, Normalizer, LEAKY_SLOPE};
use crate::{Rng, Scalar, Tensor};

/// Rows pushed through a network at once during evaluation.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("matrix is not symmetric at ({row}, {col}): gap {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix has eigenvalue {0:e}, below the PSD tolerance")]
    NotPsd(f64),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("feature dimension must be at least 2, got {0}")]
    FeatureDim(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<crate::ShapeError> for EvalError {
    fn from(e: crate::ShapeError) -> Self {
        EvalError::Shape(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments<T> {
    pub mean: Vec<T>,
    /// `[d, d]`, exactly symmetric.
    pub cov: Tensor<T>,
    pub n: usize,
}

impl<T: Scalar> GaussianMoments<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn fit_gaussian<T: Scalar>(features: &Tensor<T>) -> Result<GaussianMoments<T>> {
    let (n, d) = features.dims2()?;
    if n < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: n });
    }
    if !features.is_finite() {
        return Err(EvalError::NonFinite("features"));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut mean = vec![T::zero(); d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(features.row(r)) {
            *m = *m + x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_n);
    let mut cov = vec![T::zero(); d * d];
    let mut centered = vec![T::zero(); d];
    for r in 0..n {
        for ((c, &x), &m) in centered.iter_mut().zip(features.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] = cov[i * d + j] + centered[i] * centered[j];
            }
        }
    }
    let inv = T::one() / T::lit((n - 1) as f64);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * inv;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianMoments { mean, cov: Tensor::matrix(d, d, cov), n })
}

/// `‖μ₁−μ₂‖² + Tr Σ₁ + Tr Σ₂ − 2 Tr((Σ₁Σ₂)^{1/2})`, floored at 0.
pub fn frechet_distance<T: Scalar>(a: &GaussianMoments<T>, b: &GaussianMoments<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(EvalError::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(T::zero());
    }
    let d = a.dim();
    let mean_sq = a.mean.iter().zip(&b.mean).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
    let trace = |t: &Tensor<T>| (0..d).map(|i| t.get2(i, i)).sum::<T>();
    let cross = psd_sqrt_product(&a.cov, &b.cov)?;
    let v = mean_sq + trace(&a.cov) + trace(&b.cov) - T::lit(2.0) * cross;
    Ok(v.max(T::zero()))
}

/// Frozen map from data rows to feature rows.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor<T> {
    Identity { dim: usize },
    /// First-head output of a frozen network.
    Net { net: Network<T>, id: String },
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(EvalError::FeatureDim(dim));
        }
        Ok(FeatureExtractor::Identity { dim })
    }

    /// A seeded random network ending in a leaky-ReLU layer of width `d_f`.
    /// Image inputs go through three stride-2 convolutions first.
    pub fn random_net(data: DataShape, d_f: usize, seed: u64) -> Result<Self> {
        if d_f < 2 {
            return Err(EvalError::FeatureDim(d_f));
        }
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let (body, width) = match data {
            DataShape::Planar(d) => (vec![LayerSpec::dense(d, 64, act, Normalizer::None)], 64),
            DataShape::Image(mut input) => {
                let mut body = Vec::new();
                for filters in [8, 16, 32] {
                    let kind = LayerKind::Conv { input, kernel: 4, stride: 2, filters };
                    input = kind.output_image().ok_or_else(|| EvalError::Shape(format!("image too small: {input:?}")))?;
                    body.push(LayerSpec { kind, activation: act, normalizer: Normalizer::None });
                }
                (body, input.len())
            }
        };
        let spec = NetworkSpec { body, heads: vec![LayerSpec::dense(width, d_f, act, Normalizer::None)], inject_dim: 0 };
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
        Ok(FeatureExtractor::Net { net: Network::new(spec, &mut rng)?, id: format!("random-net-{d_f}-{seed}") })
    }

    /// The body of a trained network (a discriminator, say) followed by a
    /// seeded random leaky-ReLU projection to `d_f`. Latent injections are
    /// left out.
    pub fn trained_body(trained: &Network<T>, d_f: usize, seed: u64, id: impl Into<String>) -> Result<Self> {
        if d_f < 2 {
            return Err(EvalError::FeatureDim(d_f));
        }
        let src = trained.spec();
        let width = src.body.last().map(|l| l.kind.fan_out()).unwrap_or(src.input_width());
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let spec = NetworkSpec {
            body: src.body.clone(),
            heads: vec![LayerSpec::dense(width, d_f, act, Normalizer::None)],
            inject_dim: 0,
        };
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut net = Network::new(spec, &mut rng)?;
        for (name, t) in trained.params.iter().filter(|(n, _)| n.starts_with("body.") && !n.ends_with(".inj")) {
            *net.params.get_mut(name).expect("body layout is copied") = t.clone();
        }
        let layers = src.body.len();
        net.spectral[..layers].clone_from_slice(&trained.spectral[..layers]);
        Ok(FeatureExtractor::Net { net, id: id.into() })
    }

    pub fn id(&self) -> String {
        match self {
            FeatureExtractor::Identity { .. } => "identity".into(),
            FeatureExtractor::Net { id, .. } => id.clone(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Net { net, .. } => net.spec().input_width(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Net { net, .. } => net.spec().heads[0].kind.fan_out(),
        }
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<f64>> {
        let (_, width) = x.dims2()?;
        if width != self.input_dim() {
            return Err(EvalError::Shape(format!("extractor takes width {}, got {width}", self.input_dim())));
        }
        match self {
            FeatureExtractor::Identity { .. } => Ok(x.cast()),
            FeatureExtractor::Net { net, .. } => Ok(chunked(x, |c| Ok(net.apply(c, None)?.remove(0)))?.cast()),
        }
    }
}

/// Applies `f` to row blocks of `x` and stacks the results.
fn chunked<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.rows();
    if n <= EVAL_CHUNK {
        return f(x);
    }
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let out = f(&x.select_rows(&idx))?;
        width = out.cols();
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::matrix(n, width, data))
}

/// Mean over pairs of `‖I(x) − I(recon)‖`.
pub fn recon_feature_l2<T: Scalar>(extractor: &FeatureExtractor<T>, x: &Tensor<T>, recon: &Tensor<T>) -> Result<f64> {
    if x.shape() != recon.shape() {
        return Err(EvalError::Shape(format!("batches {:?} vs {:?}", x.shape(), recon.shape())));
    }
    let (fx, fr) = (extractor.features(x)?, extractor.features(recon)?);
    let n = fx.rows();
    let total: f64 = (0..n)
        .map(|i| fx.row(i).iter().zip(fr.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n as f64)
}

/// One row of the evaluation CSV. Reconstruction metrics are empty for
/// objectives without an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run_id: String,
    pub step: u64,
    pub fid_samples: f64,
    pub fid_recon: Option<f64>,
    pub recon_l2: Option<f64>,
    pub n_eval: usize,
    pub extractor_id: String,
    pub seed: u64,
}

impl EvalRecord {
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ok(self.fid_samples) && self.fid_recon.is_none_or(ok) && self.recon_l2.is_none_or(ok)
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Metrics of one evaluation plus the same-distribution floor measured
/// between two independent real batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fid_samples: f64,
    pub fid_recon: Option<f64>,
    pub recon_l2: Option<f64>,
    pub estimator_floor: f64,
}

/// Evaluation against arbitrary samplers: `fake(n, rng)` draws model
/// samples, `recon(x)` reconstructs a real batch.
pub fn evaluate_with<T: Scalar>(
    dataset: &Dataset,
    extractor: &FeatureExtractor<T>,
    n_eval: usize,
    rng: &mut Rng,
    mut fake: impl FnMut(usize, &mut Rng) -> Result<Tensor<T>>,
    recon: Option<&dyn Fn(&Tensor<T>) -> Result<Tensor<T>>>,
) -> Result<Evaluation> {
    let need = 2 * extractor.dim();
    if n_eval < need {
        return Err(EvalError::TooFewSamples { need, got: n_eval });
    }
    let real: Tensor<T> = dataset.sample(n_eval, rng)?;
    let real2: Tensor<T> = dataset.sample(n_eval, rng)?;
    let fakes = fake(n_eval, rng)?;
    let real_m = fit_gaussian(&extractor.features(&real)?)?;
    let estimator_floor = frechet_distance(&real_m, &fit_gaussian(&extractor.features(&real2)?)?)?;
    let fid_samples = frechet_distance(&real_m, &fit_gaussian(&extractor.features(&fakes)?)?)?;
    let (fid_recon, recon_l2) = match recon {
        Some(f) => {
            let r = f(&real)?;
            let fid = frechet_distance(&real_m, &fit_gaussian(&extractor.features(&r)?)?)?;
            (Some(fid), Some(recon_feature_l2(extractor, &real, &r)?))
        }
        None => (None, None),
    };
    Ok(Evaluation { fid_samples, fid_recon, recon_l2, estimator_floor })
}

/// FID of samples and reconstructions, and the reconstruction feature-L2, of one model snapshot.
pub fn evaluate_checkpoint<T: Scalar>(
    bundle: &ModelBundle<T>,
    dataset: &Dataset,
    extractor: &FeatureExtractor<T>,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<Evaluation> {
    let d_z = bundle.arch.latent_dim;
    let fake = |n: usize, rng: &mut Rng| -> Result<Tensor<T>> {
        let z = sample_prior(d_z, n, rng)?;
        chunked(&z, |c| Ok(bundle.generate(c)?))
    };
    let recon = |x: &Tensor<T>| -> Result<Tensor<T>> {
        chunked(x, |c| Ok(bundle.reconstruct(c)?.expect("encoder present")))
    };
    let recon: Option<&dyn Fn(&Tensor<T>) -> Result<Tensor<T>>> = bundle.encoder.is_some().then_some(&recon as _);
    evaluate_with(dataset, extractor, n_eval, rng, fake, recon)
}

/// `E‖z − E(G(z))‖²` over `n` prior draws; `None` without an encoder.
pub fn latent_recon_mse<T: Scalar>(bundle: &ModelBundle<T>, n: usize, rng: &mut Rng) -> Result<Option<f64>> {
    if bundle.encoder.is_none() {
        return Ok(None);
    }
    let z: Tensor<T> = sample_prior(bundle.arch.latent_dim, n, rng)?;
    let back = chunked(&z, |c| Ok(bundle.encode(&bundle.generate(c)?)?.expect("encoder present")))?;
    let sq: f64 = z.data().iter().zip(back.data()).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum();
    Ok(Some(sq / n as f64))
}

/// The default extractor for a model's data: identity on planar data, a
/// seeded random network on images.
pub fn default_extractor<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<FeatureExtractor<T>> {
    match arch.data {
        DataShape::Planar(d) => FeatureExtractor::identity(d),
        DataShape::Image(_) => FeatureExtractor::random_net(arch.data, 64, seed),
    }
}

#[cfg(test)]
mod tests;
