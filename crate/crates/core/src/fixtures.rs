//! Random networks and inputs for property tests and the acceptance suite.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::network::{Layer, Network};
use crate::tensor::{Scalar, Tensor};

/// Knobs for [`random_network`].
#[derive(Clone, Debug)]
pub struct NetShape {
    /// Inclusive range for the number of affine (Linear/Conv) layers.
    pub min_layers: usize,
    pub max_layers: usize,
    /// Allow convolutions; the input is then an image.
    pub conv: bool,
    /// Insert frozen batch norm after some affine layers.
    pub batch_norm: bool,
    pub classes: usize,
    /// Flat input size when no convolution is used.
    pub input_len: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            min_layers: 2,
            max_layers: 5,
            conv: true,
            batch_norm: false,
            classes: 4,
            input_len: 6,
        }
    }
}

fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape, (0..n).map(|_| T::of(d.sample(rng))).collect()).unwrap()
}

fn batch_norm<T: Scalar, R: Rng>(rng: &mut R, channels: usize) -> Layer<T> {
    let u = |rng: &mut R, lo: f64, hi: f64| -> Tensor<T> {
        Tensor::new(&[channels], (0..channels).map(|_| T::of(rng.random_range(lo..hi))).collect()).unwrap()
    };
    Layer::BatchNormAffine {
        gamma: u(rng, -1.5, 1.5),
        beta: u(rng, -0.5, 0.5),
        running_mean: u(rng, -0.5, 0.5),
        running_var: u(rng, 0.2, 2.0),
    }
}

/// A random sequential ReLU network with a mix of convolutional and fully
/// connected layers. Weights are fan-in scaled, biases small and non-zero.
pub fn random_network<T: Scalar, R: Rng>(rng: &mut R, shape: &NetShape) -> Network<T> {
    let affine = rng.random_range(shape.min_layers..=shape.max_layers);
    let mut layers = Vec::new();
    let conv_layers = if shape.conv { rng.random_range(1..affine) } else { 0 };
    let input: Vec<usize> = if conv_layers > 0 {
        let c = rng.random_range(1..=2);
        let hw = rng.random_range(4..=6);
        vec![c, hw, hw]
    } else {
        vec![shape.input_len]
    };
    let mut cur = input.clone();
    for i in 0..affine {
        let last = i + 1 == affine;
        if i < conv_layers {
            let out = rng.random_range(1..=3);
            let k = rng.random_range(1..=3).min(cur[1]);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let fan_in = cur[0] * k * k;
            layers.push(Layer::Conv2d {
                weight: normal_tensor(rng, &[out, cur[0], k, k], (2.0 / fan_in as f64).sqrt()),
                bias: normal_tensor(rng, &[out], 0.1),
                stride,
                padding,
            });
            cur = layers.last().unwrap().output_shape(&cur).unwrap();
        } else {
            if cur.len() > 1 {
                layers.push(Layer::Flatten);
                cur = vec![cur.iter().product()];
            }
            let out = if last { shape.classes } else { rng.random_range(2..=8) };
            layers.push(Layer::Linear {
                weight: normal_tensor(rng, &[out, cur[0]], (2.0 / cur[0] as f64).sqrt()),
                bias: normal_tensor(rng, &[out], 0.1),
            });
            cur = vec![out];
        }
        if !last {
            if shape.batch_norm && rng.random_bool(0.5) {
                layers.push(batch_norm(rng, cur[0]));
            }
            layers.push(Layer::relu());
        }
    }
    Network::new(&input, shape.classes, layers).unwrap()
}

/// Uniform input in `[0, 1]` of the given per-sample shape.
pub fn random_input<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random::<f64>())).collect()).unwrap()
}

/// Uniform sample from the box `[centre - radius, centre + radius]`.
pub fn sample_in_box<T: Scalar, R: Rng>(rng: &mut R, centre: &Tensor<T>, radius: &Tensor<T>) -> Tensor<T> {
    let data = centre
        .data()
        .iter()
        .zip(radius.data())
        .map(|(&c, &r)| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            c + r * T::of(u)
        })
        .collect();
    Tensor::new(centre.shape(), data).unwrap()
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// every tensor in `inputs`.
pub fn finite_diff(f: impl Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].numel());
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = f(&work);
            work[k].data_mut()[j] = orig - h;
            let down = f(&work);
            work[k].data_mut()[j] = orig;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradients, measured against the
/// larger of the gradient's ℓ∞ norm and `floor`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().chain(b).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}
