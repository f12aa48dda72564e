//! The model zoo: generator, encoder, data discriminator, joint
//! discriminator with latent injection, and the VAE pair.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{AutodiffError, Graph, Result as AdResult, Var};
use crate::nn::{Activation, Bound, ImageShape, LayerKind, LayerSpec, Network, NetworkSpec, NnError, Normalizer, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Rng;

/// Bounds applied to VAE log-variance outputs.
pub const LOGVAR_RANGE: (f64, f64) = (-20.0, 5.0);

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown objective {0:?}")]
    UnknownObjective(String),
    #[error("objective {objective} {problem}")]
    Lambda { objective: Objective, problem: &'static str },
    #[error("parameter sharing needs two joint discriminators, got {0:?} and {1:?}")]
    Sharing(DiscKind, DiscKind),
    #[error("architecture: {0}")]
    Arch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Adversarial base game of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Base {
    Gan,
    Bigan,
    Vae,
}

/// Encoder loss added on top of the base game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Extra {
    ZAe,
    XAe,
    ZAdv,
    XAdv,
}

impl Extra {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Extra::ZAdv | Extra::XAdv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Objective {
    pub base: Base,
    pub extra: Option<Extra>,
}

impl Objective {
    pub const ALL: [Objective; 11] = [
        Objective::new(Base::Gan, None),
        Objective::new(Base::Gan, Some(Extra::ZAe)),
        Objective::new(Base::Gan, Some(Extra::XAe)),
        Objective::new(Base::Gan, Some(Extra::ZAdv)),
        Objective::new(Base::Gan, Some(Extra::XAdv)),
        Objective::new(Base::Bigan, None),
        Objective::new(Base::Bigan, Some(Extra::ZAe)),
        Objective::new(Base::Bigan, Some(Extra::XAe)),
        Objective::new(Base::Bigan, Some(Extra::ZAdv)),
        Objective::new(Base::Bigan, Some(Extra::XAdv)),
        Objective::new(Base::Vae, None),
    ];

    pub const fn new(base: Base, extra: Option<Extra>) -> Self {
        Self { base, extra }
    }

    /// λ weights the extra loss only on top of BiGAN.
    pub fn uses_lambda(&self) -> bool {
        self.base == Base::Bigan && self.extra.is_some()
    }

    pub fn has_encoder(&self) -> bool {
        self.base != Base::Gan || self.extra.is_some()
    }

    pub fn has_second_disc(&self) -> bool {
        self.extra.is_some_and(Extra::is_adversarial)
    }

    /// D₁'s input type.
    pub fn disc1_kind(&self) -> Option<DiscKind> {
        match self.base {
            Base::Gan => Some(DiscKind::X),
            Base::Bigan => Some(DiscKind::XZ),
            Base::Vae => None,
        }
    }

    /// Both discriminators see (x, z) pairs, so they share a body.
    pub fn shares_dual_disc(&self) -> bool {
        self.base == Base::Bigan && self.has_second_disc()
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.base {
            Base::Gan => "gan",
            Base::Bigan => "bigan",
            Base::Vae => "vae",
        };
        f.write_str(base)?;
        if let Some(e) = self.extra {
            f.write_str(match e {
                Extra::ZAe => "+zae",
                Extra::XAe => "+xae",
                Extra::ZAdv => "+zadv",
                Extra::XAdv => "+xadv",
            })?;
        }
        Ok(())
    }
}

impl FromStr for Objective {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Objective::ALL
            .into_iter()
            .find(|o| o.to_string() == s.trim())
            .ok_or_else(|| ModelError::UnknownObjective(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscKind {
    /// D(x)
    X,
    /// D(x, z)
    XZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Planar(usize),
    Image(ImageShape),
}

impl DataShape {
    pub fn width(&self) -> usize {
        match self {
            DataShape::Planar(d) => *d,
            DataShape::Image(img) => img.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub data: DataShape,
    pub latent_dim: usize,
    /// Dense hidden width (planar mode).
    pub hidden: usize,
    /// Number of hidden layers (planar mode).
    pub depth: usize,
    /// Base channel count (image mode); the widest layer has eight times this.
    pub channels: usize,
}

impl ArchConfig {
    pub fn planar(data_dim: usize, latent_dim: usize, hidden: usize, depth: usize) -> Self {
        Self {
            data: DataShape::Planar(data_dim),
            latent_dim,
            hidden,
            depth,
            channels: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 {
            return Err(ModelError::Arch("latent dimension must be positive".into()));
        }
        match self.data {
            DataShape::Planar(d) if d == 0 || self.hidden < 2 || self.depth == 0 => {
                Err(ModelError::Arch(format!("planar net needs d_X ≥ 1, hidden ≥ 2, depth ≥ 1: {self:?}")))
            }
            DataShape::Image(img) if img.height != img.width || img.height % 8 != 0 || self.channels == 0 => {
                Err(ModelError::Arch(format!("image side must be a multiple of 8: {img:?}")))
            }
            _ => Ok(()),
        }
    }

    fn dense_body(&self, normalizer: Normalizer, activation: Activation) -> Vec<LayerSpec> {
        let mut width = self.data.width();
        (0..self.depth)
            .map(|_| {
                let l = LayerSpec::dense(width, self.hidden, activation, normalizer);
                width = self.hidden;
                l
            })
            .collect()
    }

    /// Convolutional body: one stride-1 layer then three stride-2 halvings.
    fn conv_body(&self, img: ImageShape, normalizer: Normalizer, activation: Activation) -> Vec<LayerSpec> {
        let c = self.channels;
        let plan = [(3, 1, c), (4, 2, 2 * c), (4, 2, 4 * c), (4, 2, 8 * c)];
        let mut input = img;
        plan.iter()
            .map(|&(kernel, stride, filters)| {
                let kind = LayerKind::Conv { input, kernel, stride, filters };
                input = kind.output_image().expect("conv output");
                LayerSpec { kind, activation, normalizer }
            })
            .collect()
    }

    fn body(&self, normalizer: Normalizer) -> Vec<LayerSpec> {
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        match self.data {
            DataShape::Planar(_) => self.dense_body(normalizer, act),
            DataShape::Image(img) => self.conv_body(img, normalizer, act),
        }
    }

    fn body_width(&self) -> usize {
        match self.data {
            DataShape::Planar(_) => self.hidden,
            DataShape::Image(img) => 8 * self.channels * (img.height / 8) * (img.width / 8),
        }
    }

    pub fn generator_spec(&self) -> NetworkSpec {
        let (body, head) = match self.data {
            DataShape::Planar(d) => {
                let mut width = self.latent_dim;
                let body = (0..self.depth)
                    .map(|_| {
                        let l = LayerSpec::dense(width, self.hidden, Activation::Relu, Normalizer::LayerNorm);
                        width = self.hidden;
                        l
                    })
                    .collect();
                (body, LayerSpec::dense(self.hidden, d, Activation::Identity, Normalizer::None))
            }
            DataShape::Image(img) => {
                let c = self.channels;
                let s = img.height / 8;
                let seed = ImageShape::new(8 * c, s, s);
                let mut body = vec![LayerSpec::dense(self.latent_dim, seed.len(), Activation::Relu, Normalizer::LayerNorm)];
                let mut input = seed;
                for filters in [4 * c, 2 * c, c] {
                    let kind = LayerKind::TransposeConv { input, kernel: 4, stride: 2, filters };
                    input = kind.output_image().expect("tconv output");
                    body.push(LayerSpec {
                        kind,
                        activation: Activation::Relu,
                        normalizer: Normalizer::LayerNorm,
                    });
                }
                let head = LayerSpec {
                    kind: LayerKind::TransposeConv {
                        input,
                        kernel: 3,
                        stride: 1,
                        filters: img.channels,
                    },
                    activation: Activation::HalfTanh,
                    normalizer: Normalizer::None,
                };
                (body, head)
            }
        };
        NetworkSpec {
            body,
            heads: vec![head],
            inject_dim: 0,
        }
    }

    /// The discriminator body with a `head_width` output and layer norm.
    pub fn encoder_spec(&self, head_width: usize) -> NetworkSpec {
        NetworkSpec {
            body: self.body(Normalizer::LayerNorm),
            heads: vec![LayerSpec::dense(self.body_width(), head_width, Activation::Identity, Normalizer::None)],
            inject_dim: 0,
        }
    }

    pub fn disc_spec(&self, kind: DiscKind, heads: usize) -> NetworkSpec {
        NetworkSpec {
            body: self.body(Normalizer::SpectralNorm),
            heads: vec![LayerSpec::dense(self.body_width(), 1, Activation::Identity, Normalizer::None); heads],
            inject_dim: match kind {
                DiscKind::X => 0,
                DiscKind::XZ => self.latent_dim,
            },
        }
    }
}

/// One discriminator body with two independent logit heads.
pub fn shared_dual_disc<T: Scalar>(arch: &ArchConfig, first: DiscKind, second: DiscKind, rng: &mut Rng) -> Result<Network<T>, ModelError> {
    if first != DiscKind::XZ || second != DiscKind::XZ {
        return Err(ModelError::Sharing(first, second));
    }
    Ok(Network::new(arch.disc_spec(DiscKind::XZ, 2), rng)?)
}

/// Every network of one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub objective: Objective,
    pub lambda: Option<f64>,
    pub arch: ArchConfig,
    pub generator: Network<T>,
    pub encoder: Option<Network<T>>,
    /// D₁; when [`Objective::shares_dual_disc`] holds, head 1 is D₂.
    pub disc: Option<Network<T>>,
    /// A separate D₂.
    pub disc2: Option<Network<T>>,
    /// VAE observation scale `log σ` as a `[1, 1]` tensor.
    pub log_sigma: Option<Tensor<T>>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(objective: Objective, arch: ArchConfig, lambda: Option<f64>, rng: &mut Rng) -> Result<Self, ModelError> {
        arch.validate()?;
        match (objective.uses_lambda(), lambda) {
            (true, None) => return Err(ModelError::Lambda { objective, problem: "needs λ" }),
            (false, Some(_)) => return Err(ModelError::Lambda { objective, problem: "takes no λ" }),
            (true, Some(l)) if !(l >= 0.0) => return Err(ModelError::Lambda { objective, problem: "needs λ ≥ 0" }),
            _ => {}
        }
        let generator = Network::new(arch.generator_spec(), rng)?;
        let encoder = match objective.base {
            Base::Vae => Some(Network::new(arch.encoder_spec(2 * arch.latent_dim), rng)?),
            _ if objective.has_encoder() => Some(Network::new(arch.encoder_spec(arch.latent_dim), rng)?),
            _ => None,
        };
        let (disc, disc2) = match objective.disc1_kind() {
            None => (None, None),
            Some(_) if objective.shares_dual_disc() => (Some(shared_dual_disc(&arch, DiscKind::XZ, DiscKind::XZ, rng)?), None),
            Some(kind) => {
                let d1 = Network::new(arch.disc_spec(kind, 1), rng)?;
                let d2 = if objective.has_second_disc() {
                    Some(Network::new(arch.disc_spec(DiscKind::XZ, 1), rng)?)
                } else {
                    None
                };
                (Some(d1), d2)
            }
        };
        let log_sigma = (objective.base == Base::Vae).then(|| Tensor::zeros(vec![1, 1]));
        Ok(Self {
            objective,
            lambda,
            arch,
            generator,
            encoder,
            disc,
            disc2,
            log_sigma,
        })
    }

    pub fn discriminators_mut(&mut self) -> impl Iterator<Item = &mut Network<T>> {
        self.disc.iter_mut().chain(self.disc2.iter_mut())
    }

    pub fn refresh_spectral(&mut self, iters: usize) {
        for d in self.discriminators_mut() {
            d.refresh_spectral(iters);
        }
    }

    /// `G(z)` on plain tensors.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        check_width("generator input", z, self.arch.latent_dim)?;
        Ok(self.generator.apply(z, None)?.remove(0))
    }

    /// `E(x)`; for the VAE, the posterior mean.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Option<Tensor<T>>, ModelError> {
        let Some(enc) = &self.encoder else { return Ok(None) };
        check_width("encoder input", x, self.arch.data.width())?;
        let h = enc.apply(x, None)?.remove(0);
        if self.objective.base == Base::Vae {
            let d = self.arch.latent_dim;
            let rows: Vec<T> = (0..h.rows()).flat_map(|r| h.row(r)[..d].to_vec()).collect();
            return Ok(Some(Tensor::matrix(h.rows(), d, rows)));
        }
        Ok(Some(h))
    }

    /// `G(E(x))`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Option<Tensor<T>>, ModelError> {
        match self.encode(x)? {
            Some(z) => Ok(Some(self.generate(&z)?)),
            None => Ok(None),
        }
    }
}

fn check_width<T: Scalar>(what: &str, t: &Tensor<T>, width: usize) -> Result<(), ModelError> {
    if t.shape().len() != 2 || t.cols() != width {
        return Err(ModelError::Nn(NnError::Shape(format!("{what}: {:?}, expected width {width}", t.shape()))));
    }
    Ok(())
}

/// Whether a network call may send gradients into its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    /// Parameters act as constants; gradients still flow through inputs.
    Detach,
}

/// A network placed on a graph, callable under either gradient mode.
pub trait Module<'g, T: Scalar> {
    /// `x` is the primary input; `z` feeds latent injections when present.
    fn run(&self, x: Var<'g, T>, z: Option<Var<'g, T>>, mode: Grad) -> AdResult<Var<'g, T>>;
}

impl<'g, T: Scalar, F> Module<'g, T> for F
where
    F: Fn(Var<'g, T>, Option<Var<'g, T>>, Grad) -> AdResult<Var<'g, T>>,
{
    fn run(&self, x: Var<'g, T>, z: Option<Var<'g, T>>, mode: Grad) -> AdResult<Var<'g, T>> {
        self(x, z, mode)
    }
}

/// A [`Network`] bound twice: as differentiable parameters and as constants.
pub struct NetModule<'g, 'n, T: Scalar> {
    tracked: Option<Bound<'g, 'n, T>>,
    frozen: Bound<'g, 'n, T>,
    head: usize,
}

impl<'g, 'n, T: Scalar> NetModule<'g, 'n, T> {
    /// With `trainable` unset only the frozen copy exists, and `Track`
    /// calls behave like `Detach`.
    pub fn new(net: &'n Network<T>, graph: &'g Graph<T>, trainable: bool) -> AdResult<Self> {
        Ok(Self {
            tracked: if trainable { Some(net.bind(graph, true)?) } else { None },
            frozen: net.bind(graph, false)?,
            head: 0,
        })
    }

    /// The same bindings reading a different head.
    pub fn with_head(&self, head: usize) -> Self {
        Self {
            tracked: self.tracked.clone(),
            frozen: self.frozen.clone(),
            head,
        }
    }

    /// Differentiable parameter leaves (empty when not trainable).
    pub fn params(&self) -> &[Var<'g, T>] {
        self.tracked.as_ref().map_or(&[], |b| b.params())
    }

    fn run_head(&self, head: usize, x: Var<'g, T>, z: Option<Var<'g, T>>, mode: Grad) -> AdResult<Var<'g, T>> {
        let bound = match (mode, &self.tracked) {
            (Grad::Track, Some(b)) => b,
            _ => &self.frozen,
        };
        let h = bound.body(x, z)?;
        bound.head(head, h)
    }
}

impl<'g, T: Scalar> Module<'g, T> for NetModule<'g, '_, T> {
    fn run(&self, x: Var<'g, T>, z: Option<Var<'g, T>>, mode: Grad) -> AdResult<Var<'g, T>> {
        self.run_head(self.head, x, z, mode)
    }
}

fn width_err(what: &str, got: Vec<usize>, want: usize) -> AutodiffError {
    AutodiffError::Shape {
        op: "model",
        detail: format!("{what} {got:?}, expected width {want}"),
    }
}

/// `G(z)`.
pub fn generator_forward<'g, T: Scalar>(g: &impl Module<'g, T>, z: Var<'g, T>, latent_dim: usize, mode: Grad) -> AdResult<Var<'g, T>> {
    if z.value().cols() != latent_dim {
        return Err(width_err("latent", z.shape(), latent_dim));
    }
    g.run(z, None, mode)
}

/// `D(x, z)` as a `[n, 1]` logit column.
pub fn disc_xz_forward<'g, T: Scalar>(d: &impl Module<'g, T>, x: Var<'g, T>, z: Var<'g, T>, mode: Grad) -> AdResult<Var<'g, T>> {
    if x.value().rows() != z.value().rows() {
        return Err(width_err("latent batch", z.shape(), x.value().rows()));
    }
    d.run(x, Some(z), mode)
}

/// Reparameterized VAE pass.
pub struct VaeOutput<'g, T: Scalar> {
    pub recon: Var<'g, T>,
    pub mu: Var<'g, T>,
    /// Clamped log-variance of the diagonal posterior.
    pub logvar: Var<'g, T>,
    pub z: Var<'g, T>,
}

/// Encodes `x` to `(μ, log Σ)`, samples `z = μ + Σ^{1/2}·noise` and decodes.
pub fn vae_forward<'g, T: Scalar>(
    encoder: &impl Module<'g, T>,
    decoder: &impl Module<'g, T>,
    x: Var<'g, T>,
    noise: Var<'g, T>,
) -> AdResult<VaeOutput<'g, T>> {
    let h = encoder.run(x, None, Grad::Track)?;
    let two_d = h.value().cols();
    let d = two_d / 2;
    if noise.value().cols() != d || two_d != 2 * d || noise.value().rows() != x.value().rows() {
        return Err(width_err("noise", noise.shape(), d));
    }
    let mu = h.slice_cols(0, d)?;
    let logvar = h.slice_cols(d, d)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
    let z = mu.add(logvar.scale(0.5)?.exp()?.mul(noise)?)?;
    let recon = decoder.run(z, None, Grad::Track)?;
    Ok(VaeOutput { recon, mu, logvar, z })
}

#[cfg(test)]
mod tests;
