use std::rc::Rc;

use crate::autodiff::{Graph, Result, Var, NO_INDEX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::NnError;

/// Slope used by every LeakyReLU in the model zoo.
pub const LEAKY_SLOPE: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    /// `(tanh(x) + 1) / 2`, mapping onto `[0, 1]`.
    HalfTanh,
}

impl Activation {
    pub fn apply<'g, T: Scalar>(self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(a) => x.leaky_relu(a),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
            Activation::HalfTanh => x.tanh()?.add_scalar(1.0)?.scale(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    None,
    LayerNorm,
    SpectralNorm,
}

/// Channel-first image extents; batches store each image as one row of
/// `channels * height * width` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Conv {
        input: ImageShape,
        kernel: usize,
        stride: usize,
        filters: usize,
    },
    TransposeConv {
        input: ImageShape,
        kernel: usize,
        stride: usize,
        filters: usize,
    },
}

fn same_padding(kernel: usize, stride: usize) -> usize {
    (kernel + 1 - stride.min(kernel)) / 2
}

impl LayerKind {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv { input, .. } | LayerKind::TransposeConv { input, .. } => input.len(),
        }
    }

    pub fn fan_out(&self) -> usize {
        match self.output_image() {
            Some(img) => img.len(),
            None => match *self {
                LayerKind::Dense { fan_out, .. } => fan_out,
                _ => unreachable!(),
            },
        }
    }

    pub fn output_image(&self) -> Option<ImageShape> {
        match *self {
            LayerKind::Dense { .. } => None,
            LayerKind::Conv { input, kernel, stride, filters } => {
                let pad = same_padding(kernel, stride);
                let oh = (input.height + 2 * pad - kernel) / stride + 1;
                let ow = (input.width + 2 * pad - kernel) / stride + 1;
                Some(ImageShape::new(filters, oh, ow))
            }
            LayerKind::TransposeConv { input, kernel, stride, filters } => {
                let pad = same_padding(kernel, stride);
                let oh = (input.height - 1) * stride + kernel - 2 * pad;
                let ow = (input.width - 1) * stride + kernel - 2 * pad;
                Some(ImageShape::new(filters, oh, ow))
            }
        }
    }

    /// Shape of the weight matrix: `[fan_in, out]` for dense, `[C·k·k, F]`
    /// for conv, `[C, F·k·k]` for transposed conv.
    pub fn weight_shape(&self) -> [usize; 2] {
        match *self {
            LayerKind::Dense { fan_in, fan_out } => [fan_in, fan_out],
            LayerKind::Conv { input, kernel, filters, .. } => [input.channels * kernel * kernel, filters],
            LayerKind::TransposeConv { input, kernel, filters, .. } => [input.channels, filters * kernel * kernel],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_out, .. } => fan_out,
            LayerKind::Conv { filters, .. } | LayerKind::TransposeConv { filters, .. } => filters,
        }
    }

    /// Number of pre-activation channels a latent injection feeds.
    pub fn channels_out(&self) -> usize {
        self.bias_len()
    }

    /// Effective fan-in used to scale the uniform initializer.
    pub fn init_fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv { input, kernel, .. } => input.channels * kernel * kernel,
            LayerKind::TransposeConv { input, kernel, stride, .. } => {
                (input.channels * kernel * kernel / (stride * stride)).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub normalizer: Normalizer,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize, activation: Activation, normalizer: Normalizer) -> Self {
        Self {
            kind: LayerKind::Dense { fan_in, fan_out },
            activation,
            normalizer,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), NnError> {
        let ok = match self.kind {
            LayerKind::Dense { fan_in, fan_out } => fan_in > 0 && fan_out > 0,
            LayerKind::Conv { input, kernel, stride, filters } | LayerKind::TransposeConv { input, kernel, stride, filters } => {
                !input.is_empty() && kernel > 0 && stride > 0 && filters > 0 && kernel >= stride
            }
        };
        if !ok {
            return Err(NnError::InvalidLayer(format!("{self:?}")));
        }
        if matches!(self.kind, LayerKind::Conv { input, kernel, stride, .. } if input.height + 2 * same_padding(kernel, stride) < kernel)
        {
            return Err(NnError::InvalidLayer(format!("input too small for kernel: {self:?}")));
        }
        Ok(())
    }
}

/// `x W + b` for a `[n, fan_in]` batch.
pub fn affine<'g, T: Scalar>(x: Var<'g, T>, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    x.matmul(w)?.add_row(b)
}

/// Per-example standardization over all features followed by an
/// elementwise affine with `[1, m]` gain and bias.
pub fn layer_norm<'g, T: Scalar>(x: Var<'g, T>, gain: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
    let m = x.value().cols();
    let mean = x.sum_cols()?.scale(1.0 / m as f64)?;
    let centered = x.sub(mean.broadcast_cols(m)?)?;
    let var = centered.square()?.sum_cols()?.scale(1.0 / m as f64)?;
    let inv_std = var.add_scalar(LAYER_NORM_EPS)?.powf(-0.5)?;
    centered.mul_col(inv_std)?.mul_row(gain)?.add_row(bias)
}

/// Value-level layer norm on a plain tensor.
pub fn layer_norm_values<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> std::result::Result<Tensor<T>, NnError> {
    if x.cols() < 2 {
        return Err(NnError::InvalidLayer("layer norm needs at least two features".into()));
    }
    let g = Graph::new();
    let y = layer_norm(g.constant(x.clone())?, g.constant(gain.clone())?, g.constant(bias.clone())?)?;
    Ok((*y.value()).clone())
}

fn im2col_index(n: usize, input: ImageShape, kernel: usize, stride: usize, out: ImageShape) -> Rc<[u32]> {
    let pad = same_padding(kernel, stride) as isize;
    let kk = kernel * kernel;
    let mut idx = Vec::with_capacity(n * out.plane() * input.channels * kk);
    for b in 0..n {
        for oy in 0..out.height {
            for ox in 0..out.width {
                for c in 0..input.channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad;
                            let ix = (ox * stride + kx) as isize - pad;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < input.height && (ix as usize) < input.width;
                            idx.push(if inside {
                                (b * input.len() + c * input.plane() + iy as usize * input.width + ix as usize) as u32
                            } else {
                                NO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// `[n·P, F]` (rows are positions) to channel-first `[n, F·P]`.
fn positions_to_channels_index(n: usize, filters: usize, plane: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * filters * plane);
    for b in 0..n {
        for f in 0..filters {
            for p in 0..plane {
                idx.push(((b * plane + p) * filters + f) as u32);
            }
        }
    }
    idx.into()
}

/// Channel-first `[n, C·P]` to `[n·P, C]`.
fn channels_to_positions_index(n: usize, channels: usize, plane: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        for p in 0..plane {
            for c in 0..channels {
                idx.push((b * channels * plane + c * plane + p) as u32);
            }
        }
    }
    idx.into()
}

/// Repeats a `[n, F]` per-channel value over every spatial position.
fn spatial_broadcast_index(n: usize, filters: usize, plane: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * filters * plane);
    for b in 0..n {
        for f in 0..filters {
            idx.extend(std::iter::repeat_n((b * filters + f) as u32, plane));
        }
    }
    idx.into()
}

fn col2im_index(n: usize, input: ImageShape, kernel: usize, stride: usize, out: ImageShape) -> Rc<[u32]> {
    let pad = same_padding(kernel, stride) as isize;
    let f = out.channels;
    let mut idx = Vec::with_capacity(n * input.plane() * f * kernel * kernel);
    for b in 0..n {
        for iy in 0..input.height {
            for ix in 0..input.width {
                for c in 0..f {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let oy = (iy * stride + ky) as isize - pad;
                            let ox = (ix * stride + kx) as isize - pad;
                            let inside = oy >= 0 && ox >= 0 && (oy as usize) < out.height && (ox as usize) < out.width;
                            idx.push(if inside {
                                (b * out.len() + c * out.plane() + oy as usize * out.width + ox as usize) as u32
                            } else {
                                NO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Strided convolution with zero "same" padding on channel-first rows.
pub fn conv2d<'g, T: Scalar>(
    x: Var<'g, T>,
    w: Var<'g, T>,
    b: Var<'g, T>,
    input: ImageShape,
    kernel: usize,
    stride: usize,
) -> Result<Var<'g, T>> {
    let n = x.value().rows();
    let filters = w.value().cols();
    let out = LayerKind::Conv { input, kernel, stride, filters }.output_image().expect("conv output");
    let cols = x.gather(
        im2col_index(n, input, kernel, stride, out),
        vec![n * out.plane(), input.channels * kernel * kernel],
    )?;
    let y = cols.matmul(w)?.add_row(b)?;
    y.gather(positions_to_channels_index(n, filters, out.plane()), vec![n, out.len()])
}

/// Transposed convolution (the adjoint of [`conv2d`] in the input).
pub fn transpose_conv2d<'g, T: Scalar>(
    x: Var<'g, T>,
    w: Var<'g, T>,
    b: Var<'g, T>,
    input: ImageShape,
    kernel: usize,
    stride: usize,
) -> Result<Var<'g, T>> {
    let n = x.value().rows();
    let filters = b.value().len();
    let out = LayerKind::TransposeConv { input, kernel, stride, filters }.output_image().expect("tconv output");
    let rows = x.gather(channels_to_positions_index(n, input.channels, input.plane()), vec![n * input.plane(), input.channels])?;
    let spread = rows.matmul(w)?;
    let y = spread.scatter_add(col2im_index(n, input, kernel, stride, out), vec![n, out.len()])?;
    let bias_row = b.gather(spatial_broadcast_index(1, filters, out.plane()), vec![1, out.len()])?;
    y.add_row(bias_row)
}

/// Adds a per-channel `[n, F]` term to a layer pre-activation.
pub fn add_channel_bias<'g, T: Scalar>(pre: Var<'g, T>, per_channel: Var<'g, T>, kind: &LayerKind) -> Result<Var<'g, T>> {
    match kind.output_image() {
        None => pre.add(per_channel),
        Some(img) => {
            let n = per_channel.value().rows();
            let spread = per_channel.gather(spatial_broadcast_index(n, img.channels, img.plane()), vec![n, img.len()])?;
            pre.add(spread)
        }
    }
}

/// A standalone dense layer holding its own values.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
    /// Layer-norm gain/bias when present.
    pub layer_norm: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Self {
        Self {
            weight,
            bias,
            activation,
            layer_norm: None,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut pre = affine(x, g.constant(self.weight.clone())?, g.constant(self.bias.clone())?)?;
        if let Some((gain, bias)) = &self.layer_norm {
            pre = layer_norm(pre, g.constant(gain.clone())?, g.constant(bias.clone())?)?;
        }
        self.activation.apply(pre)
    }

    /// `activation(normalize(x W + b))` on a plain tensor.
    pub fn apply(&self, x: &Tensor<T>) -> std::result::Result<Tensor<T>, NnError> {
        let (_, width) = x.dims2()?;
        if width != self.weight.rows() {
            return Err(NnError::Shape(format!("input width {width} vs fan-in {}", self.weight.rows())));
        }
        let g = Graph::new();
        let y = self.forward(&g, g.constant(x.clone())?)?;
        Ok((*y.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::Rng;
    use rand::{Rng as _, SeedableRng};

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let id = Dense::new(Tensor::<f64>::identity(2), Tensor::zeros(vec![1, 2]), Activation::Identity);
        assert_eq!(id.apply(&Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);

        let leaky = Dense::new(Tensor::<f64>::identity(1), Tensor::zeros(vec![1, 1]), Activation::LeakyRelu(LEAKY_SLOPE));
        let y = leaky.apply(&Tensor::matrix(1, 1, vec![-1.0])).unwrap();
        assert!((y.item() + 0.1).abs() < 1e-15);

        let t = Dense::new(Tensor::matrix(1, 1, vec![2.0]), Tensor::matrix(1, 1, vec![1.0]), Activation::Tanh);
        let y = t.apply(&Tensor::matrix(1, 1, vec![0.0])).unwrap();
        assert!((y.item() - 0.7615941559557649f64).abs() < 1e-12);

        assert!(matches!(id.apply(&Tensor::matrix(1, 3, vec![0.0; 3])), Err(NnError::Shape(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let gain = Tensor::<f64>::ones(vec![1, 3]);
        let bias = Tensor::<f64>::zeros(vec![1, 3]);
        let y = layer_norm_values(&Tensor::matrix(1, 3, vec![4.0; 3]), &gain, &bias).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (g2, b2) = (Tensor::<f64>::ones(vec![1, 2]), Tensor::<f64>::zeros(vec![1, 2]));
        let y = layer_norm_values(&Tensor::matrix(1, 2, vec![1.0, -1.0]), &g2, &b2).unwrap();
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15 && (y.data()[1] + expect).abs() < 1e-15);

        let bias = Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]);
        let y = layer_norm_values(&Tensor::matrix(2, 3, vec![1.0, 5.0, -3.0, 0.2, 0.1, 9.0]), &Tensor::zeros(vec![1, 3]), &bias).unwrap();
        assert_eq!(y.row(0), bias.data());
        assert_eq!(y.row(1), bias.data());

        assert!(layer_norm_values(&Tensor::matrix(1, 1, vec![1.0]), &Tensor::ones(vec![1, 1]), &Tensor::zeros(vec![1, 1])).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = rand_tensor(&mut rng, vec![4, 7]).map(|v| 3.0 * v + 2.0);
            let y = layer_norm_values(&x, &Tensor::ones(vec![1, 7]), &Tensor::zeros(vec![1, 7])).unwrap();
            for r in 0..4 {
                let row = y.row(r);
                let mean = row.iter().sum::<f64>() / 7.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    /// Direct-sum reference convolution.
    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, input: ImageShape, k: usize, s: usize) -> Vec<f64> {
        let f = w.cols();
        let out = LayerKind::Conv { input, kernel: k, stride: s, filters: f }.output_image().unwrap();
        let pad = same_padding(k, s) as isize;
        let mut res = vec![0.0; x.rows() * out.len()];
        for n in 0..x.rows() {
            for fo in 0..f {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut acc = b.data()[fo];
                        for c in 0..input.channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - pad;
                                    let ix = (ox * s + kx) as isize - pad;
                                    if iy < 0 || ix < 0 || iy as usize >= input.height || ix as usize >= input.width {
                                        continue;
                                    }
                                    let xv = x.get2(n, c * input.plane() + iy as usize * input.width + ix as usize);
                                    acc += xv * w.get2(c * k * k + ky * k + kx, fo);
                                }
                            }
                        }
                        res[n * out.len() + fo * out.plane() + oy * out.width + ox] = acc;
                    }
                }
            }
        }
        res
    }

    #[test]
    fn conv_matches_direct_sum_and_output_extents() {
        let mut rng = Rng::seed_from_u64(2);
        for (k, s) in [(3, 1), (4, 2)] {
            let input = ImageShape::new(2, 6, 6);
            let x = rand_tensor(&mut rng, vec![2, input.len()]);
            let w = rand_tensor(&mut rng, vec![2 * k * k, 3]);
            let b = rand_tensor(&mut rng, vec![1, 3]);
            let g = Graph::<f64>::new();
            let y = conv2d(g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap(), input, k, s).unwrap();
            let expect = reference_conv(&x, &w, &b, input, k, s);
            let side = if s == 1 { 6 } else { 3 };
            assert_eq!(y.shape(), vec![2, 3 * side * side]);
            for (a, e) in y.value().data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_conv_is_the_input_adjoint_of_conv() {
        // <conv(x; W, 0), y> == <x, tconv(y; Wᵀ-arranged, 0)>
        let mut rng = Rng::seed_from_u64(3);
        let (k, s) = (4, 2);
        let input = ImageShape::new(2, 4, 4);
        let out = LayerKind::Conv { input, kernel: k, stride: s, filters: 3 }.output_image().unwrap();
        let x = rand_tensor(&mut rng, vec![1, input.len()]);
        let y = rand_tensor(&mut rng, vec![1, out.len()]);
        let w = rand_tensor(&mut rng, vec![2 * k * k, 3]);
        // conv weight [C·k·k, F] → tconv weight [F, C·k·k]
        let wt = w.transpose().unwrap();
        let g = Graph::<f64>::new();
        let cx = conv2d(g.constant(x.clone()).unwrap(), g.constant(w).unwrap(), g.constant(Tensor::zeros(vec![1, 3])).unwrap(), input, k, s).unwrap();
        let ty = transpose_conv2d(g.constant(y.clone()).unwrap(), g.constant(wt).unwrap(), g.constant(Tensor::zeros(vec![1, 2])).unwrap(), out, k, s).unwrap();
        assert_eq!(ty.shape(), vec![1, input.len()]);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = ty.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_layers_pass_finite_difference_checks() {
        let mut rng = Rng::seed_from_u64(4);
        let input = ImageShape::new(1, 4, 4);
        let g = Graph::<f64>::new();
        let x = g.param(rand_tensor(&mut rng, vec![2, input.len()])).unwrap();
        let w = g.param(rand_tensor(&mut rng, vec![16, 2])).unwrap();
        let b = g.param(rand_tensor(&mut rng, vec![1, 2])).unwrap();
        let h = conv2d(x, w, b, input, 4, 2).unwrap();
        let mid = ImageShape::new(2, 2, 2);
        let w2 = g.param(rand_tensor(&mut rng, vec![2, 16])).unwrap();
        let b2 = g.param(rand_tensor(&mut rng, vec![1, 1])).unwrap();
        let up = transpose_conv2d(h.tanh().unwrap(), w2, b2, mid, 4, 2).unwrap();
        let gain = g.param(rand_tensor(&mut rng, vec![1, 16])).unwrap();
        let beta = g.param(rand_tensor(&mut rng, vec![1, 16])).unwrap();
        let out = layer_norm(up, gain, beta).unwrap().softplus().unwrap().sum().unwrap();
        let err = finite_diff_check(&g, out, &[x, w, b, w2, b2, gain, beta], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_extents() {
        let k = LayerKind::Conv { input: ImageShape::new(3, 16, 16), kernel: 4, stride: 2, filters: 8 };
        assert_eq!(k.output_image(), Some(ImageShape::new(8, 8, 8)));
        let t = LayerKind::TransposeConv { input: ImageShape::new(8, 2, 2), kernel: 4, stride: 2, filters: 4 };
        assert_eq!(t.output_image(), Some(ImageShape::new(4, 4, 4)));
        let t = LayerKind::TransposeConv { input: ImageShape::new(8, 4, 4), kernel: 3, stride: 1, filters: 3 };
        assert_eq!(t.output_image(), Some(ImageShape::new(3, 4, 4)));
        assert!(LayerSpec::dense(0, 2, Activation::Identity, Normalizer::None).validate().is_err());
    }
}
