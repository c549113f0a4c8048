//! Sequential networks: layers, parameter binding onto a tape, initialization,
//! frozen batch-norm statistics, architecture builders and checkpoints.

pub mod arch;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Variance floor for batch norm, both as the minimum stored estimate and as
/// the additive term under the square root.
pub const BN_VAR_FLOOR: f64 = 1e-5;

/// Marks networks whose initialization is our own fan-in scaled normal rather
/// than the reference warm-up initialization.
pub const SIMPLIFIED_INIT: &str = "simplified-init";

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// `y = W x + b` with `W: out×in`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Cross-correlation with `weight: O×C×kh×kw`.
    Conv2d {
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    /// `shrink` overrides the Box shrinking coefficient for this layer.
    Relu { shrink: Option<f64> },
    Flatten,
    /// Batch norm frozen to a per-channel affine map.
    BatchNormAffine {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Layer::Linear {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn relu() -> Self {
        Layer::Relu { shrink: None }
    }

    pub fn batch_norm(channels: usize) -> Self {
        Layer::BatchNormAffine {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "Linear",
            Layer::Conv2d { .. } => "Conv2d",
            Layer::Relu { .. } => "ReLU",
            Layer::Flatten => "Flatten",
            Layer::BatchNormAffine { .. } => "BatchNormAffine",
        }
    }

    /// Every stored tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNormAffine { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
            Layer::Relu { .. } | Layer::Flatten => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNormAffine { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
            Layer::Relu { .. } | Layer::Flatten => Vec::new(),
        }
    }

    /// Trainable tensors (everything except running statistics).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNormAffine { gamma, beta, .. } => vec![gamma, beta],
            Layer::Relu { .. } | Layer::Flatten => Vec::new(),
        }
    }

    /// Output shape of one sample given its input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear { weight, bias } => {
                let s = weight.shape();
                if input.len() != 1 || input[0] != s[1] || bias.shape() != [s[0]] {
                    return Err(Error::shape("Linear", input, s));
                }
                Ok(vec![s[0]])
            }
            Layer::Conv2d { weight, bias, stride, padding } => {
                let s = weight.shape();
                if input.len() != 3 || bias.shape() != [s[0]] {
                    return Err(Error::shape("Conv2d", input, s));
                }
                let g = crate::tensor::kernels::ConvGeometry::new(
                    &[1, input[0], input[1], input[2]],
                    s,
                    *stride,
                    *padding,
                )?;
                Ok(vec![g.out_channels, g.out_h, g.out_w])
            }
            Layer::Relu { shrink } => {
                if let Some(cs) = shrink {
                    if !(*cs > 0.0 && *cs <= 1.0) {
                        return Err(Error::invalid(format!("shrink coefficient {cs} outside (0, 1]")));
                    }
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::BatchNormAffine { gamma, running_var, .. } => {
                if input.is_empty() || input[0] != gamma.numel() {
                    return Err(Error::shape("BatchNormAffine", input, gamma.shape()));
                }
                if running_var.data().iter().any(|&v| v <= T::zero()) {
                    return Err(Error::invalid("batch norm variance estimates must be positive"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Per-channel `1 / sqrt(var + floor)` for batch norm layers.
    pub fn inv_std(&self) -> Vec<T> {
        match self {
            Layer::BatchNormAffine { running_var, .. } => running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + T::of(BN_VAR_FLOOR)).sqrt())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// An ordered stack of layers mapping `input_shape` to `num_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub flags: Vec<String>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub enum LayerVars {
    /// `weight_t` is the transposed weight, `weight_t_abs` its absolute value.
    Linear { weight: Var, bias: Var, weight_t: Var, weight_t_abs: Var },
    Conv { weight: Var, bias: Var, weight_abs: Var },
    Norm { gamma: Var, beta: Var },
    None,
}

/// A network whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub layers: Vec<LayerVars>,
}

impl Bound {
    /// Trainable parameter handles, in checkpoint order.
    pub fn params(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                LayerVars::Linear { weight, bias, .. } | LayerVars::Conv { weight, bias, .. } => {
                    vec![*weight, *bias]
                }
                LayerVars::Norm { gamma, beta } => vec![*gamma, *beta],
                LayerVars::None => Vec::new(),
            })
            .collect()
    }

    /// Weight handles only (the ℓ1-regularized subset).
    pub fn weights(&self) -> Vec<Var> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerVars::Linear { weight, .. } | LayerVars::Conv { weight, .. } => Some(*weight),
                _ => None,
            })
            .collect()
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: &[usize], num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Self {
            layers,
            input_shape: input_shape.to_vec(),
            num_classes,
            flags: Vec::new(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Per-sample shapes: the input followed by every layer's output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let out = shapes.last().unwrap();
        if self.num_classes < 2 || out != &[self.num_classes] {
            return Err(Error::shape("network output", out, &[self.num_classes]));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(|t| t.numel())
            .sum()
    }

    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Relu { .. }))
            .count()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Conv2d { weight, bias, stride, padding } => Layer::Conv2d {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Relu { shrink } => Layer::Relu { shrink: *shrink },
                Layer::Flatten => Layer::Flatten,
                Layer::BatchNormAffine { gamma, beta, running_mean, running_var } => {
                    Layer::BatchNormAffine {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    }
                }
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            flags: self.flags.clone(),
        }
    }

    /// Copy with every per-layer shrinking override removed.
    pub fn without_shrink(&self) -> Self {
        let mut net = self.clone();
        for l in &mut net.layers {
            if let Layer::Relu { shrink } = l {
                *shrink = None;
            }
        }
        net
    }

    /// Places the parameters on `tape`; they track gradients iff `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone().with_requires_grad(trainable));
                    let b = tape.leaf(bias.clone().with_requires_grad(trainable));
                    let weight_t = tape.transpose(w).expect("2-d weight");
                    let weight_t_abs = tape.abs(weight_t);
                    LayerVars::Linear { weight: w, bias: b, weight_t, weight_t_abs }
                }
                Layer::Conv2d { weight, bias, .. } => {
                    let w = tape.leaf(weight.clone().with_requires_grad(trainable));
                    let b = tape.leaf(bias.clone().with_requires_grad(trainable));
                    let weight_abs = tape.abs(w);
                    LayerVars::Conv { weight: w, bias: b, weight_abs }
                }
                Layer::BatchNormAffine { gamma, beta, .. } => LayerVars::Norm {
                    gamma: tape.leaf(gamma.clone().with_requires_grad(trainable)),
                    beta: tape.leaf(beta.clone().with_requires_grad(trainable)),
                },
                Layer::Relu { .. } | Layer::Flatten => LayerVars::None,
            })
            .collect();
        Bound { layers }
    }

    /// Applies layer `i` to a batched input on the tape.
    pub fn apply_layer(&self, tape: &mut Tape<T>, bound: &Bound, i: usize, x: Var) -> Result<Var> {
        match (&self.layers[i], &bound.layers[i]) {
            (Layer::Linear { .. }, LayerVars::Linear { weight_t, bias, .. }) => {
                let y = tape.matmul(x, *weight_t)?;
                tape.add_bias(y, *bias)
            }
            (Layer::Conv2d { stride, padding, .. }, LayerVars::Conv { weight, bias, .. }) => {
                tape.conv2d(x, *weight, Some(*bias), *stride, *padding)
            }
            (Layer::Relu { .. }, _) => Ok(tape.relu(x)),
            (Layer::Flatten, _) => {
                let s = tape.shape(x).to_vec();
                let n = s[0];
                let rest = s[1..].iter().product::<usize>();
                tape.reshape(x, &[n, rest])
            }
            (layer @ Layer::BatchNormAffine { running_mean, .. }, LayerVars::Norm { gamma, beta }) => {
                tape.channel_affine(x, *gamma, Some(*beta), running_mean.data().to_vec(), layer.inv_std())
            }
            _ => Err(Error::invalid("tape bindings do not match the network")),
        }
    }

    /// Batched forward pass on a tape; `x` has shape `B×input_shape`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.check_batch(tape.shape(x))?;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = self.apply_layer(tape, bound, i, h)?;
        }
        Ok(h)
    }

    pub(crate) fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape("network input", shape, &self.input_shape));
        }
        Ok(())
    }

    /// Batched logits `B×n` for inputs `B×input_shape`.
    pub fn forward_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Logits of a single input of shape `input_shape`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("network input", x.shape(), &self.input_shape));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let out = self.forward_batch(&x.clone().reshape(&shape)?)?;
        out.reshape(&[self.num_classes])
    }

    /// Predicted classes for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward_batch(x)?;
        Ok((0..logits.shape()[0]).map(|b| argmax(logits.row(b))).collect())
    }

    /// Fan-in scaled normal initialization: weights ~ N(0, 2/fan_in), zero
    /// biases, identity batch norm. Deterministic per seed.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    let fan_in: usize = weight.shape()[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    for w in weight.data_mut() {
                        *w = T::of(normal.sample(&mut rng));
                    }
                    bias.data_mut().iter_mut().for_each(|b| *b = T::zero());
                }
                Layer::BatchNormAffine { gamma, beta, running_mean, running_var } => {
                    gamma.data_mut().iter_mut().for_each(|v| *v = T::one());
                    beta.data_mut().iter_mut().for_each(|v| *v = T::zero());
                    running_mean.data_mut().iter_mut().for_each(|v| *v = T::zero());
                    running_var.data_mut().iter_mut().for_each(|v| *v = T::one());
                }
                Layer::Relu { .. } | Layer::Flatten => {}
            }
        }
        if !self.flags.iter().any(|f| f == SIMPLIFIED_INIT) {
            self.flags.push(SIMPLIFIED_INIT.to_string());
        }
    }

    /// Recomputes every batch-norm layer's statistics from a clean batch,
    /// layer by layer. Variance is the population variance, floored.
    pub fn bn_update_stats(&mut self, batch: &Tensor<T>) -> Result<()> {
        self.check_batch(batch.shape())?;
        let n = batch.shape()[0];
        if !self.layers.iter().any(|l| matches!(l, Layer::BatchNormAffine { .. })) {
            return Ok(());
        }
        if n < 2 {
            return Err(Error::invalid("batch norm statistics need a batch of at least 2"));
        }
        let mut h = batch.clone();
        for i in 0..self.layers.len() {
            if let Layer::BatchNormAffine { running_mean, running_var, .. } = &mut self.layers[i] {
                let channels = running_mean.numel();
                let inner = h.numel() / (n * channels);
                // Welford per channel
                for c in 0..channels {
                    let (mut mean, mut m2, mut count) = (0.0f64, 0.0f64, 0.0f64);
                    for b in 0..n {
                        let start = (b * channels + c) * inner;
                        for &v in &h.data()[start..start + inner] {
                            count += 1.0;
                            let v = v.as_f64();
                            let d = v - mean;
                            mean += d / count;
                            m2 += d * (v - mean);
                        }
                    }
                    running_mean.data_mut()[c] = T::of(mean);
                    running_var.data_mut()[c] = T::of((m2 / count).max(BN_VAR_FLOOR));
                }
            }
            let layer_net = Network {
                layers: vec![self.layers[i].clone()],
                input_shape: h.shape()[1..].to_vec(),
                num_classes: 0,
                flags: Vec::new(),
            };
            let mut tape = Tape::new();
            let bound = layer_net.bind(&mut tape, false);
            let x = tape.constant(h);
            let y = layer_net.apply_layer(&mut tape, &bound, 0, x)?;
            h = tape.value(y).clone();
        }
        Ok(())
    }

    /// ℓ2 norm of each layer's stored tensors (diagnostics).
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                l.tensors()
                    .iter()
                    .flat_map(|t| t.data().iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_linear_passes_input() {
        let net = Network::new(
            &[3],
            3,
            vec![Layer::Linear {
                weight: t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
                bias: Tensor::zeros(&[3]),
            }],
        )
        .unwrap();
        let x = t(&[3], &[0.25, -1.5, 7.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn bias_only_head_on_zero_input() {
        let bias = t(&[2], &[0.5, -0.25]);
        let net = Network::new(
            &[4],
            2,
            vec![Layer::linear(4, 3), Layer::relu(), Layer::Linear { weight: Tensor::zeros(&[2, 3]), bias: bias.clone() }],
        )
        .unwrap();
        assert_eq!(net.forward(&Tensor::zeros(&[4])).unwrap(), bias);
    }

    #[test]
    fn mlp_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net: Network<f64> = arch::mlp(&[5], &[7], 3).unwrap();
        net.init_params(1);
        for l in &mut net.layers {
            if let Layer::Linear { bias, .. } = l {
                bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let affine = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            let (o, i) = (w.shape()[0], w.shape()[1]);
            (0..o)
                .map(|r| {
                    let mut acc = 0.0;
                    for c in 0..i {
                        acc += x[c] * w.data()[r * i + c];
                    }
                    acc + b.data()[r]
                })
                .collect()
        };
        let (Layer::Linear { weight: w1, bias: b1 }, Layer::Linear { weight: w2, bias: b2 }) = (&net.layers[0], &net.layers[2]) else {
            panic!("unexpected layers");
        };
        let h: Vec<f64> = affine(w1, b1, &x).into_iter().map(|v| v.max(0.0)).collect();
        let y = affine(w2, b2, &h);
        assert_eq!(net.forward(&t(&[5], &x)).unwrap().data(), y.as_slice());
    }

    #[test]
    fn shape_errors() {
        assert!(Network::<f64>::new(&[3], 2, vec![Layer::linear(4, 2)]).is_err());
        assert!(Network::<f64>::new(&[3], 1, vec![Layer::linear(3, 1)]).is_err());
        let net = Network::<f64>::new(&[3], 2, vec![Layer::linear(3, 2)]).unwrap();
        assert!(net.forward(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let mut a: Network<f32> = arch::desk_cnn([1, 28, 28], 10).unwrap();
        let mut b = a.clone();
        a.init_params(7);
        b.init_params(7);
        assert_eq!(a, b);
        assert!(a.flags.contains(&SIMPLIFIED_INIT.to_string()));
        let mut wide: Network<f64> = Network::new(&[100], 2, vec![Layer::linear(100, 200), Layer::relu(), Layer::linear(200, 2)]).unwrap();
        wide.init_params(3);
        let Layer::Linear { weight, bias } = &wide.layers[0] else { unreachable!() };
        let n = weight.numel() as f64;
        let mean = weight.sum() / n;
        let var = weight.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!((0.015..=0.025).contains(&var), "variance {var}");
        assert!(bias.data().iter().all(|&b| b == 0.0));
    }

    fn bn_net(channels: usize) -> Network<f64> {
        Network::new(
            &[channels, 2, 2],
            2,
            vec![Layer::batch_norm(channels), Layer::Flatten, Layer::linear(channels * 4, 2)],
        )
        .unwrap()
    }

    #[test]
    fn bn_stats_cases() {
        let mut net = bn_net(1);
        net.bn_update_stats(&Tensor::full(&[3, 1, 2, 2], 0.7)).unwrap();
        let Layer::BatchNormAffine { running_mean, running_var, .. } = &net.layers[0] else { unreachable!() };
        assert!((running_mean.item() - 0.7).abs() < 1e-15);
        assert_eq!(running_var.item(), BN_VAR_FLOOR);
        assert!(net.forward(&Tensor::full(&[1, 2, 2], 0.7)).unwrap().is_finite());

        let mut net = bn_net(2);
        let batch = t(&[2, 2, 2, 2], &[-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        net.bn_update_stats(&batch).unwrap();
        let Layer::BatchNormAffine { running_mean, running_var, .. } = &net.layers[0] else { unreachable!() };
        assert_eq!(running_mean.data(), &[0.0, 0.0]);
        assert_eq!(running_var.data(), &[1.0, 1.0]);

        assert!(net.bn_update_stats(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn bn_stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = bn_net(3);
        let (n, c, inner) = (17, 3, 4);
        let data: Vec<f64> = (0..n * c * inner).map(|_| rng.random_range(-3.0..5.0)).collect();
        net.bn_update_stats(&t(&[n, c, 2, 2], &data)).unwrap();
        let Layer::BatchNormAffine { running_mean, running_var, .. } = &net.layers[0] else { unreachable!() };
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| data[(b * c + ch) * inner..(b * c + ch + 1) * inner].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(((running_mean.data()[ch] - mean) / mean).abs() < 1e-12);
            assert!(((running_var.data()[ch] - var) / var).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_stats_follow_earlier_layers() {
        // second BN sees the output of the first affine + relu
        let mut net: Network<f64> = arch::cnn7_narrow([1, 8, 8], 3).unwrap();
        net.init_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..4 * 64).map(|_| rng.random()).collect();
        let x = t(&[4, 1, 8, 8], &data);
        net.bn_update_stats(&x).unwrap();
        // after updating, every BN output has zero mean per channel
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let mut h = tape.constant(x);
        for i in 0..net.layers.len() {
            h = net.apply_layer(&mut tape, &bound, i, h).unwrap();
            if matches!(net.layers[i], Layer::BatchNormAffine { .. }) {
                let v = tape.value(h);
                let c = v.shape()[1];
                let inner = v.numel() / (4 * c);
                for ch in 0..c {
                    let s: f64 = (0..4).map(|b| v.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum::<f64>()).sum();
                    assert!(s.abs() < 1e-9 * (4 * inner) as f64, "layer {i} channel {ch} mean {s}");
                }
            }
        }
    }
}
