//! Feed-forward stacks: a shared body, one or more heads, and an optional
//! latent injection into every body layer.

use rand::Rng as _;

use crate::autodiff::{Graph, Result, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Rng;

use super::layers::{add_channel_bias, affine, conv2d, layer_norm, transpose_conv2d, LayerKind, LayerSpec, Normalizer};
use super::params::ParamSet;
use super::spectral::{spectral_normalize_var, SpectralState};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub body: Vec<LayerSpec>,
    /// Each head reads the body output.
    pub heads: Vec<LayerSpec>,
    /// Width of the injected latent; 0 disables injection.
    pub inject_dim: usize,
}

impl NetworkSpec {
    pub fn input_width(&self) -> usize {
        self.body.first().or(self.heads.first()).map_or(0, |l| l.kind.fan_in())
    }

    pub fn validate(&self) -> std::result::Result<(), NnError> {
        if self.heads.is_empty() {
            return Err(NnError::InvalidLayer("network without a head".into()));
        }
        let mut width = self.input_width();
        for layer in &self.body {
            layer.validate()?;
            if layer.kind.fan_in() != width {
                return Err(NnError::InvalidLayer(format!("fan-in {} after width {width}", layer.kind.fan_in())));
            }
            width = layer.kind.fan_out();
        }
        for head in &self.heads {
            head.validate()?;
            if head.kind.fan_in() != width {
                return Err(NnError::InvalidLayer(format!("head fan-in {} after width {width}", head.kind.fan_in())));
            }
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = (String, &LayerSpec, bool)> {
        let body = self.body.iter().enumerate().map(|(i, l)| (format!("body.{i}"), l, self.inject_dim > 0));
        let heads = self.heads.iter().enumerate().map(|(i, l)| (format!("head.{i}"), l, false));
        body.chain(heads)
    }
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    w: usize,
    b: usize,
    ln: Option<(usize, usize)>,
    inj: Option<usize>,
}

/// A network holding its own parameters and power-iteration states.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    pub params: ParamSet<T>,
    /// One entry per layer (body first, then heads); `Some` for spectral-normalized layers.
    pub spectral: Vec<Option<SpectralState<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Weights uniform in `±1/√fan_in`; biases, layer-norm shifts and
    /// injections zero; layer-norm gains one.
    ///
    /// With zero biases a layer norm right after the first affine makes the
    /// output depend on the input's direction only, until the biases move.
    /// Random biases remove that but destabilised planar GAN training.
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> std::result::Result<Self, NnError> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut spectral = Vec::new();
        for (prefix, layer, inject) in spec.layers() {
            let [r, c] = layer.kind.weight_shape();
            let bound = 1.0 / (layer.kind.init_fan_in() as f64).sqrt();
            let w: Vec<T> = (0..r * c).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            params.push(format!("{prefix}.w"), Tensor::matrix(r, c, w));
            params.push(format!("{prefix}.b"), Tensor::zeros(vec![1, layer.kind.bias_len()]));
            if layer.normalizer == Normalizer::LayerNorm {
                let m = layer.kind.fan_out();
                params.push(format!("{prefix}.ln_g"), Tensor::ones(vec![1, m]));
                params.push(format!("{prefix}.ln_b"), Tensor::zeros(vec![1, m]));
            }
            if inject {
                params.push(format!("{prefix}.inj"), Tensor::zeros(vec![spec.inject_dim, layer.kind.channels_out()]));
            }
            spectral.push((layer.normalizer == Normalizer::SpectralNorm).then(|| SpectralState::new(r, c, rng)));
        }
        Ok(Self { spec, params, spectral })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn slots(&self) -> Vec<Slots> {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        self.spec
            .layers()
            .map(|(_, layer, inject)| Slots {
                w: take(),
                b: take(),
                ln: (layer.normalizer == Normalizer::LayerNorm).then(|| (take(), take())),
                inj: inject.then(&mut take),
            })
            .collect()
    }

    /// Advances every power-iteration state by `iters` rounds on the current weights.
    pub fn refresh_spectral(&mut self, iters: usize) {
        let slots = self.slots();
        for (state, slot) in self.spectral.iter_mut().zip(&slots) {
            if let Some(state) = state {
                state.iterate(&self.params.tensors()[slot.w], iters);
            }
        }
    }

    /// Places the parameters on `graph`, as differentiable leaves when
    /// `track` is set and as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, track: bool) -> Result<Bound<'g, '_, T>> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if track { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let slots = self.slots();
        let mut weights = Vec::with_capacity(slots.len());
        for (slot, state) in slots.iter().zip(&self.spectral) {
            let w = vars[slot.w];
            weights.push(match state {
                Some(s) => spectral_normalize_var(w, s)?,
                None => w,
            });
        }
        Ok(Bound {
            net: self,
            vars,
            slots,
            weights,
        })
    }

    /// Runs the network on plain tensors, returning one output per head.
    pub fn apply(&self, x: &Tensor<T>, z: Option<&Tensor<T>>) -> std::result::Result<Vec<Tensor<T>>, NnError> {
        let width = x.cols();
        if width != self.spec.input_width() {
            return Err(NnError::Shape(format!("input width {width} vs {}", self.spec.input_width())));
        }
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let z = z.map(|z| g.constant(z.clone())).transpose()?;
        let outs = bound.forward(g.constant(x.clone())?, z)?;
        Ok(outs.iter().map(|v| (*v.value()).clone()).collect())
    }
}

/// A network's parameters placed on one graph.
#[derive(Clone)]
pub struct Bound<'g, 'n, T: Scalar> {
    net: &'n Network<T>,
    vars: Vec<Var<'g, T>>,
    slots: Vec<Slots>,
    /// Effective (possibly spectral-normalized) weight per layer.
    weights: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, '_, T> {
    /// Parameter leaves in [`ParamSet`] order.
    pub fn params(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    fn layer(&self, idx: usize, spec: &LayerSpec, x: Var<'g, T>, z: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let slot = self.slots[idx];
        let (w, b) = (self.weights[idx], self.vars[slot.b]);
        let mut pre = match spec.kind {
            LayerKind::Dense { .. } => affine(x, w, b)?,
            LayerKind::Conv { input, kernel, stride, .. } => conv2d(x, w, b, input, kernel, stride)?,
            LayerKind::TransposeConv { input, kernel, stride, .. } => transpose_conv2d(x, w, b, input, kernel, stride)?,
        };
        if let (Some(inj), Some(z)) = (slot.inj, z) {
            pre = add_channel_bias(pre, z.matmul(self.vars[inj])?, &spec.kind)?;
        }
        if let Some((gain, shift)) = slot.ln {
            pre = layer_norm(pre, self.vars[gain], self.vars[shift])?;
        }
        spec.activation.apply(pre)
    }

    /// Body features; `z` feeds the injections when the network has them.
    pub fn body(&self, x: Var<'g, T>, z: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let mut h = x;
        for (i, spec) in self.net.spec.body.iter().enumerate() {
            h = self.layer(i, spec, h, z)?;
        }
        Ok(h)
    }

    pub fn head(&self, which: usize, features: Var<'g, T>) -> Result<Var<'g, T>> {
        let idx = self.net.spec.body.len() + which;
        self.layer(idx, &self.net.spec.heads[which], features, None)
    }

    pub fn forward(&self, x: Var<'g, T>, z: Option<Var<'g, T>>) -> Result<Vec<Var<'g, T>>> {
        let h = self.body(x, z)?;
        (0..self.net.spec.heads.len()).map(|i| self.head(i, h)).collect()
    }

    /// Output of the first head.
    pub fn forward1(&self, x: Var<'g, T>, z: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let h = self.body(x, z)?;
        self.head(0, h)
    }
}
