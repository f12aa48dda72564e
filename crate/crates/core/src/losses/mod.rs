//! Training objectives for every role of every model in the zoo.
//!
//! Detachment is decided here: each loss calls its networks with
//! [`Grad::Detach`] wherever a role must not receive gradient.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::models::{disc_xz_forward, vae_forward, Base, Extra, Grad, ModelBundle, Module, NetModule, Objective};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerical floor inside the gradient-norm square root.
pub const GP_NORM_EPS: f64 = 1e-12;

/// Encoder-loss weights searched for BiGAN+ objectives.
pub const LAMBDA_GRID: [f64; 6] = [0.01, 0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("λ must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("objective {0} needs {1}")]
    MissingNetwork(Objective, &'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn rows<T: Scalar>(v: Var<'_, T>) -> usize {
    v.value().rows()
}

fn check_pair<T: Scalar>(a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    let (n, m) = (rows(a), rows(b));
    if n == 0 || m == 0 {
        return Err(LossError::EmptyBatch);
    }
    if n != m {
        return Err(LossError::BatchMismatch(n, m));
    }
    Ok(())
}

/// Batch mean of `−log σ(l)` (target 1) or `−log(1 − σ(l))` (target 0).
pub fn bce_from_logit<'g, T: Scalar>(logits: Var<'g, T>, target_one: bool) -> Result<Var<'g, T>> {
    let signed = if target_one { logits.neg()? } else { logits };
    Ok(signed.softplus()?.mean()?)
}

/// Mean over rows of the squared Euclidean distance between `a` and `b`.
pub fn mean_sq_dist<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    check_pair(a, b)?;
    let n = rows(a) as f64;
    Ok(a.sub(b)?.square()?.sum()?.scale(1.0 / n)?)
}

/// Discriminator loss on logits: real labelled 1, fake labelled 0.
pub fn disc_logit_loss<'g, T: Scalar>(real: Var<'g, T>, fake: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(bce_from_logit(real, true)?.add(bce_from_logit(fake, false)?)?)
}

pub fn gan_disc_loss<'g, T: Scalar>(d: &impl Module<'g, T>, g: &impl Module<'g, T>, x: Var<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    check_pair(x, z)?;
    let fake = g.run(z, None, Grad::Detach)?.detach()?;
    disc_logit_loss(d.run(x, None, Grad::Track)?, d.run(fake, None, Grad::Track)?)
}

pub fn gan_gen_loss<'g, T: Scalar>(d: &impl Module<'g, T>, g: &impl Module<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let fake = g.run(z, None, Grad::Track)?;
    bce_from_logit(d.run(fake, None, Grad::Detach)?, true)
}

/// `(loss_D, loss_G)` for the standard game with the non-saturating generator loss.
pub fn gan_losses<'g, T: Scalar>(
    d: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    x: Var<'g, T>,
    z: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((gan_disc_loss(d, g, x, z)?, gan_gen_loss(d, g, z)?))
}

pub fn bigan_disc_loss<'g, T: Scalar>(
    d: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    x: Var<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_pair(x, z)?;
    let ex = e.run(x, None, Grad::Detach)?.detach()?;
    let gz = g.run(z, None, Grad::Detach)?.detach()?;
    disc_logit_loss(disc_xz_forward(d, x, ex, Grad::Track)?, disc_xz_forward(d, gz, z, Grad::Track)?)
}

/// `mean[−log(1 − D(x, E(x)))] + mean[−log D(G(z), z)]`.
pub fn bigan_gen_enc_loss<'g, T: Scalar>(
    d: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    x: Var<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_pair(x, z)?;
    let ex = e.run(x, None, Grad::Track)?;
    let gz = g.run(z, None, Grad::Track)?;
    let loss_e = bce_from_logit(disc_xz_forward(d, x, ex, Grad::Detach)?, false)?;
    let loss_g = bce_from_logit(disc_xz_forward(d, gz, z, Grad::Detach)?, true)?;
    Ok(loss_e.add(loss_g)?)
}

/// `(loss_D, loss_GE)` for the joint game.
pub fn bigan_losses<'g, T: Scalar>(
    d: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    x: Var<'g, T>,
    z: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((bigan_disc_loss(d, g, e, x, z)?, bigan_gen_enc_loss(d, g, e, x, z)?))
}

/// `mean ‖z − E(G(z))‖²`, reaching the encoder only.
pub fn z_ae_loss<'g, T: Scalar>(e: &impl Module<'g, T>, g: &impl Module<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let x = g.run(z, None, Grad::Detach)?.detach()?;
    mean_sq_dist(z, e.run(x, None, Grad::Track)?)
}

/// `mean ‖G(z) − G(E(G(z)))‖²`, reaching the encoder only.
pub fn x_ae_loss<'g, T: Scalar>(e: &impl Module<'g, T>, g: &impl Module<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let x = g.run(z, None, Grad::Detach)?.detach()?;
    let recon = g.run(e.run(x, None, Grad::Track)?, None, Grad::Detach)?;
    mean_sq_dist(x, recon)
}

/// Reconstruction of real data, `mean ‖x − G(E(x))‖²`, reaching the encoder only.
/// Excluded from the objective zoo; kept to reproduce its failure mode.
pub fn real_x_ae_loss<'g, T: Scalar>(e: &impl Module<'g, T>, g: &impl Module<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let recon = g.run(e.run(x, None, Grad::Track)?, None, Grad::Detach)?;
    mean_sq_dist(x, recon)
}

/// Which latent-space adversarial game D₂ plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvKind {
    /// `(G(z), z)` against `(G(z), E(G(z)))`.
    Z,
    /// `(G(z), z)` against `(G(E(G(z))), z)`.
    X,
}

/// D₂'s real and fake inputs with every network detached.
pub fn adv_pairs<'g, T: Scalar>(
    kind: AdvKind,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    z: Var<'g, T>,
) -> Result<(DiscInput<'g, T>, DiscInput<'g, T>)> {
    let x = g.run(z, None, Grad::Detach)?.detach()?;
    let z_rec = e.run(x, None, Grad::Detach)?.detach()?;
    let fake = match kind {
        AdvKind::Z => DiscInput { x, z: Some(z_rec) },
        AdvKind::X => DiscInput {
            x: g.run(z_rec, None, Grad::Detach)?.detach()?,
            z: Some(z),
        },
    };
    Ok((DiscInput { x, z: Some(z) }, fake))
}

pub fn adv_disc_loss<'g, T: Scalar>(
    kind: AdvKind,
    d2: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (real, fake) = adv_pairs(kind, g, e, z)?;
    disc_logit_loss(d2.run(real.x, real.z, Grad::Track)?, d2.run(fake.x, fake.z, Grad::Track)?)
}

/// Non-saturating encoder loss `mean[−log D₂(fake pair)]`.
pub fn adv_enc_loss<'g, T: Scalar>(
    kind: AdvKind,
    d2: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    z: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let x = g.run(z, None, Grad::Detach)?.detach()?;
    let z_rec = e.run(x, None, Grad::Track)?;
    let logit = match kind {
        AdvKind::Z => disc_xz_forward(d2, x, z_rec, Grad::Detach)?,
        AdvKind::X => disc_xz_forward(d2, g.run(z_rec, None, Grad::Detach)?, z, Grad::Detach)?,
    };
    bce_from_logit(logit, true)
}

/// `(loss_D₂, loss_E)` for the adversarial-Z game.
pub fn adv_z_losses<'g, T: Scalar>(
    d2: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    z: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((adv_disc_loss(AdvKind::Z, d2, g, e, z)?, adv_enc_loss(AdvKind::Z, d2, g, e, z)?))
}

/// `(loss_D₂, loss_E)` for the adversarial-X game.
pub fn adv_x_losses<'g, T: Scalar>(
    d2: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    e: &impl Module<'g, T>,
    z: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((adv_disc_loss(AdvKind::X, d2, g, e, z)?, adv_enc_loss(AdvKind::X, d2, g, e, z)?))
}

/// One side of a discriminator input: data plus the latent for joint discriminators.
#[derive(Clone, Copy)]
pub struct DiscInput<'g, T: Scalar> {
    pub x: Var<'g, T>,
    pub z: Option<Var<'g, T>>,
}

fn lerp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, u: &Tensor<T>) -> Tensor<T> {
    let c = a.cols();
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let w = u.data()[i / c];
        *v = w * *v + (T::one() - w) * b.data()[i];
    }
    out
}

/// `mean (‖∇D(x̂)‖ − 1)²` at `x̂ = u·real + (1 − u)·fake`, with `u` a
/// `[n, 1]` column. Joint inputs are interpolated with the same `u` and the
/// gradient norm covers both parts. Differentiable in D's parameters.
pub fn wgan_gp_penalty<'g, T: Scalar>(
    d: &impl Module<'g, T>,
    real: DiscInput<'g, T>,
    fake: DiscInput<'g, T>,
    u: &Tensor<T>,
) -> Result<Var<'g, T>> {
    check_pair(real.x, fake.x)?;
    let n = rows(real.x);
    if u.shape() != [n, 1] {
        return Err(LossError::BatchMismatch(n, u.len()));
    }
    let graph: &'g Graph<T> = real.x.graph();
    let xh = graph.param(lerp(&real.x.value(), &fake.x.value(), u))?;
    let zh = match (real.z, fake.z) {
        (Some(a), Some(b)) => Some(graph.param(lerp(&a.value(), &b.value(), u))?),
        _ => None,
    };
    let out = d.run(xh, zh, Grad::Track)?.sum()?;
    let mut wrt = vec![xh];
    wrt.extend(zh);
    let grads = graph.grad(out, &wrt, None)?;
    let mut sq = grads[0].square()?.sum_cols()?;
    if let Some(gz) = grads.get(1) {
        sq = sq.add(gz.square()?.sum_cols()?)?;
    }
    let norm = sq.add_scalar(GP_NORM_EPS)?.sqrt()?;
    Ok(norm.add_scalar(-1.0)?.square()?.mean()?)
}

/// Per-example terms of the VAE objective, averaged over the batch.
pub struct VaeTerms<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub recon: Var<'g, T>,
    pub kl: Var<'g, T>,
}

/// `mean[(1/2σ²)‖x − G(z)‖² + d_Z·log σ + KL(N(μ, Σ) ‖ N(0, I))]`
/// with `z` reparameterized from `noise` and `log σ` a `[1, 1]` leaf.
pub fn vae_loss<'g, T: Scalar>(
    e: &impl Module<'g, T>,
    g: &impl Module<'g, T>,
    log_sigma: Var<'g, T>,
    x: Var<'g, T>,
    noise: Var<'g, T>,
) -> Result<VaeTerms<'g, T>> {
    check_pair(x, noise)?;
    let out = vae_forward(e, g, x, noise)?;
    let d_z = out.mu.value().cols() as f64;
    // Losses are shape [1]; `log σ` is stored as [1, 1].
    let log_sigma = log_sigma.sum()?;
    let sq = mean_sq_dist(x, out.recon)?;
    let inv_two_var = log_sigma.scale(-2.0)?.exp()?.scale(0.5)?;
    let recon = sq.mul(inv_two_var)?;
    let n = rows(x) as f64;
    // ½ Σ (μ² + e^{logvar} − 1 − logvar)
    let kl = out
        .mu
        .square()?
        .add(out.logvar.exp()?)?
        .sub(out.logvar)?
        .add_scalar(-1.0)?
        .sum()?
        .scale(0.5 / n)?;
    let total = recon.add(log_sigma.scale(d_z)?)?.add(kl)?;
    Ok(VaeTerms { total, recon, kl })
}

/// `base + λ·extra`.
pub fn compose_encoder_loss<'g, T: Scalar>(base: Option<Var<'g, T>>, extra: Var<'g, T>, lambda: f64) -> Result<Var<'g, T>> {
    if !(lambda >= 0.0) {
        return Err(LossError::NegativeLambda(lambda));
    }
    let weighted = extra.scale(lambda)?;
    Ok(match base {
        Some(b) => b.add(weighted)?,
        None => weighted,
    })
}

/// Networks of one objective placed on a graph. Unused slots are `None`.
pub struct Nets<'a, 'g, T: Scalar> {
    pub g: &'a dyn Module<'g, T>,
    pub e: Option<&'a dyn Module<'g, T>>,
    pub d1: Option<&'a dyn Module<'g, T>>,
    pub d2: Option<&'a dyn Module<'g, T>>,
    /// VAE `log σ`, `[1, 1]`.
    pub log_sigma: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> Module<'g, T> for &dyn Module<'g, T> {
    fn run(&self, x: Var<'g, T>, z: Option<Var<'g, T>>, mode: Grad) -> crate::autodiff::Result<Var<'g, T>> {
        (**self).run(x, z, mode)
    }
}

/// Which update group a graph is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// D₁ and D₂ are trainable.
    Disc,
    /// G, E and σ are trainable.
    GenEnc,
}

/// Every network of a [`ModelBundle`] bound on one graph.
pub struct BoundBundle<'g, 'n, T: Scalar> {
    pub g: NetModule<'g, 'n, T>,
    pub e: Option<NetModule<'g, 'n, T>>,
    pub d1: Option<NetModule<'g, 'n, T>>,
    /// Separate D₂, or head 1 of D₁ when shared.
    pub d2: Option<NetModule<'g, 'n, T>>,
    pub log_sigma: Option<Var<'g, T>>,
    shared: bool,
}

impl<'g, 'n, T: Scalar> BoundBundle<'g, 'n, T> {
    pub fn new(bundle: &'n ModelBundle<T>, graph: &'g Graph<T>, phase: Phase) -> crate::autodiff::Result<Self> {
        let (disc, gen) = (phase == Phase::Disc, phase == Phase::GenEnc);
        let d1 = bundle.disc.as_ref().map(|d| NetModule::new(d, graph, disc)).transpose()?;
        let shared = bundle.objective.shares_dual_disc();
        let d2 = match (&bundle.disc2, &d1) {
            (Some(d), _) => Some(NetModule::new(d, graph, disc)?),
            (None, Some(d)) if shared => Some(d.with_head(1)),
            _ => None,
        };
        let log_sigma = match &bundle.log_sigma {
            Some(t) if gen => Some(graph.param(t.clone())?),
            Some(t) => Some(graph.constant(t.clone())?),
            None => None,
        };
        Ok(Self {
            g: NetModule::new(&bundle.generator, graph, gen)?,
            e: bundle.encoder.as_ref().map(|e| NetModule::new(e, graph, gen)).transpose()?,
            d1,
            d2,
            log_sigma,
            shared,
        })
    }

    pub fn nets(&self) -> Nets<'_, 'g, T> {
        Nets {
            g: &self.g,
            e: self.e.as_ref().map(|m| m as &dyn Module<'g, T>),
            d1: self.d1.as_ref().map(|m| m as &dyn Module<'g, T>),
            d2: self.d2.as_ref().map(|m| m as &dyn Module<'g, T>),
            log_sigma: self.log_sigma,
        }
    }

    /// Trainable leaves of the discriminator group: D₁ then a separate D₂.
    pub fn disc_params(&self) -> Vec<Var<'g, T>> {
        let mut out: Vec<Var<'g, T>> = self.d1.iter().flat_map(|m| m.params().to_vec()).collect();
        if !self.shared {
            out.extend(self.d2.iter().flat_map(|m| m.params().to_vec()));
        }
        out
    }

    /// Trainable leaves of G.
    pub fn gen_params(&self) -> Vec<Var<'g, T>> {
        self.g.params().to_vec()
    }

    /// Trainable leaves of E, then `log σ` for the VAE.
    pub fn enc_params(&self) -> Vec<Var<'g, T>> {
        let mut out: Vec<Var<'g, T>> = self.e.iter().flat_map(|m| m.params().to_vec()).collect();
        if let Some(s) = self.log_sigma.filter(|s| s.requires_grad()) {
            out.push(s);
        }
        out
    }
}

/// One training batch.
pub struct Batch<'g, T: Scalar> {
    pub x: Var<'g, T>,
    pub z: Var<'g, T>,
    /// Interpolation weights for the gradient penalty, `[n, 1]`.
    pub u: Tensor<T>,
    /// Reparameterization noise (VAE only).
    pub noise: Option<Var<'g, T>>,
}

/// A role group's scalar loss plus named components for logging.
pub struct RoleLoss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub parts: Vec<(&'static str, Var<'g, T>)>,
}

fn need<'a, 'g, T: Scalar>(m: Option<&'a dyn Module<'g, T>>, obj: Objective, what: &'static str) -> Result<&'a dyn Module<'g, T>> {
    m.ok_or(LossError::MissingNetwork(obj, what))
}

fn adv_kind(extra: Extra) -> Option<AdvKind> {
    match extra {
        Extra::ZAdv => Some(AdvKind::Z),
        Extra::XAdv => Some(AdvKind::X),
        Extra::ZAe | Extra::XAe => None,
    }
}

/// Loss of the discriminator group (D₁, plus D₂ when present); `None` for
/// objectives without discriminators. `gp_weight` scales the penalty on
/// each discriminator.
pub fn disc_objective<'g, T: Scalar>(obj: Objective, nets: &Nets<'_, 'g, T>, batch: &Batch<'g, T>, gp_weight: f64) -> Result<Option<RoleLoss<'g, T>>> {
    let (x, z) = (batch.x, batch.z);
    let (real, fake, d1) = match obj.base {
        Base::Vae => return Ok(None),
        Base::Gan => {
            let fake = nets.g.run(z, None, Grad::Detach)?.detach()?;
            (DiscInput { x, z: None }, DiscInput { x: fake, z: None }, need(nets.d1, obj, "D₁")?)
        }
        Base::Bigan => {
            let e = need(nets.e, obj, "an encoder")?;
            let ex = e.run(x, None, Grad::Detach)?.detach()?;
            let gz = nets.g.run(z, None, Grad::Detach)?.detach()?;
            (DiscInput { x, z: Some(ex) }, DiscInput { x: gz, z: Some(z) }, need(nets.d1, obj, "D₁")?)
        }
    };
    check_pair(x, z)?;
    let mut parts = Vec::new();
    let l1 = disc_logit_loss(d1.run(real.x, real.z, Grad::Track)?, d1.run(fake.x, fake.z, Grad::Track)?)?;
    parts.push(("d1", l1));
    let mut total = l1;
    if gp_weight > 0.0 {
        let gp = wgan_gp_penalty(&d1, real, fake, &batch.u)?;
        parts.push(("gp1", gp));
        total = total.add(gp.scale(gp_weight)?)?;
    }
    if let Some(kind) = obj.extra.and_then(adv_kind) {
        let d2 = need(nets.d2, obj, "D₂")?;
        let e = need(nets.e, obj, "an encoder")?;
        let (real, fake) = adv_pairs(kind, &nets.g, &e, z)?;
        let l2 = disc_logit_loss(d2.run(real.x, real.z, Grad::Track)?, d2.run(fake.x, fake.z, Grad::Track)?)?;
        parts.push(("d2", l2));
        total = total.add(l2)?;
        if gp_weight > 0.0 {
            let gp = wgan_gp_penalty(&d2, real, fake, &batch.u)?;
            parts.push(("gp2", gp));
            total = total.add(gp.scale(gp_weight)?)?;
        }
    }
    Ok(Some(RoleLoss { total, parts }))
}

/// Summed loss of the generator and encoder groups. Detachment keeps each
/// group's gradient equal to the gradient of its own per-role loss.
pub fn gen_enc_objective<'g, T: Scalar>(obj: Objective, nets: &Nets<'_, 'g, T>, batch: &Batch<'g, T>, lambda: Option<f64>) -> Result<RoleLoss<'g, T>> {
    let (x, z) = (batch.x, batch.z);
    let mut parts = Vec::new();
    let base = match obj.base {
        Base::Vae => {
            let e = need(nets.e, obj, "an encoder")?;
            let noise = batch.noise.ok_or(LossError::MissingNetwork(obj, "reparameterization noise"))?;
            let log_sigma = nets.log_sigma.ok_or(LossError::MissingNetwork(obj, "log σ"))?;
            let terms = vae_loss(&e, &nets.g, log_sigma, x, noise)?;
            parts.push(("vae_recon", terms.recon));
            parts.push(("vae_kl", terms.kl));
            return Ok(RoleLoss { total: terms.total, parts });
        }
        Base::Gan => gan_gen_loss(&need(nets.d1, obj, "D₁")?, &nets.g, z)?,
        Base::Bigan => bigan_gen_enc_loss(&need(nets.d1, obj, "D₁")?, &nets.g, &need(nets.e, obj, "an encoder")?, x, z)?,
    };
    parts.push(("gen", base));
    let Some(extra) = obj.extra else {
        return Ok(RoleLoss { total: base, parts });
    };
    let e = need(nets.e, obj, "an encoder")?;
    let enc = match adv_kind(extra) {
        None if extra == Extra::ZAe => z_ae_loss(&e, &nets.g, z)?,
        None => x_ae_loss(&e, &nets.g, z)?,
        Some(kind) => adv_enc_loss(kind, &need(nets.d2, obj, "D₂")?, &nets.g, &e, z)?,
    };
    parts.push(("enc_extra", enc));
    let weight = if obj.uses_lambda() {
        lambda.ok_or(LossError::MissingNetwork(obj, "λ"))?
    } else {
        1.0
    };
    let total = compose_encoder_loss(Some(base), enc, weight)?;
    Ok(RoleLoss { total, parts })
}
