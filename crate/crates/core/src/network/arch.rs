//! Architecture builders. Parameters come back zeroed; call
//! [`Network::init_params`] before training.

use crate::error::Result;
use crate::network::{Layer, Network};
use crate::tensor::Scalar;

/// The 7-layer convolutional network: five 3×3 convolutions (padding 1) with
/// the given filter counts and strides `[1, 1, 2, 1, 1]`, one hidden fully
/// connected layer, and the classifier. Every layer but the last is followed
/// by batch norm and ReLU.
fn cnn7_with<T: Scalar>(
    input: [usize; 3],
    classes: usize,
    filters: [usize; 5],
    hidden: usize,
) -> Result<Network<T>> {
    const STRIDES: [usize; 5] = [1, 1, 2, 1, 1];
    let mut layers = Vec::new();
    let mut ch = input[0];
    for (&f, &s) in filters.iter().zip(&STRIDES) {
        layers.push(Layer::conv2d(ch, f, 3, s, 1));
        layers.push(Layer::batch_norm(f));
        layers.push(Layer::relu());
        ch = f;
    }
    let (h, w) = (input[1].div_ceil(2), input[2].div_ceil(2));
    layers.push(Layer::Flatten);
    layers.push(Layer::linear(ch * h * w, hidden));
    layers.push(Layer::batch_norm(hidden));
    layers.push(Layer::relu());
    layers.push(Layer::linear(hidden, classes));
    Network::new(&input, classes, layers)
}

pub fn cnn7<T: Scalar>(input: [usize; 3], classes: usize) -> Result<Network<T>> {
    cnn7_with(input, classes, [64, 64, 128, 128, 128], 512)
}

pub fn cnn7_narrow<T: Scalar>(input: [usize; 3], classes: usize) -> Result<Network<T>> {
    cnn7_with(input, classes, [32, 32, 64, 64, 64], 216)
}

/// Desk-scale CNN: two stride-2 4×4 convolutions (16 and 32 filters) and two
/// fully connected layers (100 hidden units). No batch norm.
pub fn desk_cnn<T: Scalar>(input: [usize; 3], classes: usize) -> Result<Network<T>> {
    let (h, w) = (input[1] / 4, input[2] / 4);
    let layers = vec![
        Layer::conv2d(input[0], 16, 4, 2, 1),
        Layer::relu(),
        Layer::conv2d(16, 32, 4, 2, 1),
        Layer::relu(),
        Layer::Flatten,
        Layer::linear(32 * h * w, 100),
        Layer::relu(),
        Layer::linear(100, classes),
    ];
    Network::new(&input, classes, layers)
}

/// Fully connected ReLU network over flattened inputs.
pub fn mlp<T: Scalar>(input: &[usize], hidden: &[usize], classes: usize) -> Result<Network<T>> {
    let mut layers = Vec::new();
    if input.len() > 1 {
        layers.push(Layer::Flatten);
    }
    let mut width: usize = input.iter().product();
    for &h in hidden {
        layers.push(Layer::linear(width, h));
        layers.push(Layer::relu());
        width = h;
    }
    layers.push(Layer::linear(width, classes));
    Network::new(input, classes, layers)
}

/// Builds an architecture by name: `desk-cnn`, `cnn7`, `cnn7-narrow` or
/// `mlp-<h1>-<h2>-…`.
pub fn by_name<T: Scalar>(name: &str, input: [usize; 3], classes: usize) -> Result<Network<T>> {
    match name {
        "desk-cnn" => desk_cnn(input, classes),
        "cnn7" => cnn7(input, classes),
        "cnn7-narrow" => cnn7_narrow(input, classes),
        _ => {
            if let Some(rest) = name.strip_prefix("mlp") {
                let hidden = rest
                    .split('-')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| crate::Error::invalid(format!("bad mlp width `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                mlp(&input, &hidden, classes)
            } else {
                Err(crate::Error::invalid(format!("unknown architecture `{name}`")))
            }
        }
    }
}
