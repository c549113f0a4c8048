//! The Box (interval) domain in centre/radius form.
//!
//! All transformers are built from tape operations so the same code serves
//! certification (no gradients) and training (gradients w.r.t. parameters).

use crate::error::{Error, Result};
use crate::network::{Bound, Layer, LayerVars, Network};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Slack used when deciding certification from floating point bounds.
pub const CERT_SLACK: f64 = 1e-6;

/// Axis-aligned box `[centre - radius, centre + radius]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTensor<T> {
    pub centre: Tensor<T>,
    pub radius: Tensor<T>,
}

impl<T: Scalar> BoxTensor<T> {
    pub fn new(centre: Tensor<T>, radius: Tensor<T>) -> Result<Self> {
        if centre.shape() != radius.shape() {
            return Err(Error::shape("BoxTensor", centre.shape(), radius.shape()));
        }
        if radius.data().iter().any(|r| !(*r >= T::zero())) {
            return Err(Error::invalid("box radius must be non-negative"));
        }
        Ok(Self { centre, radius })
    }

    pub fn point(x: &Tensor<T>) -> Self {
        Self {
            centre: x.clone(),
            radius: Tensor::zeros(x.shape()),
        }
    }

    /// Box with the given elementwise bounds; requires `lower <= upper`.
    pub fn from_bounds(lower: &Tensor<T>, upper: &Tensor<T>) -> Result<Self> {
        let half = T::of(0.5);
        let centre = lower.zip_map(upper, |l, u| (l + u) * half)?;
        let radius = lower.zip_map(upper, |l, u| (u - l) * half)?;
        Self::new(centre, radius)
    }

    /// The ℓ∞ ball of radius `eps` around `x`, intersected with `[0, 1]`.
    pub fn linf_ball(x: &Tensor<T>, eps: f64) -> Result<Self> {
        let e = T::of(eps);
        let lower = x.map(|v| (v - e).max(T::zero()));
        let upper = x.map(|v| (v + e).min(T::one()));
        Self::from_bounds(&lower, &upper)
    }

    pub fn shape(&self) -> &[usize] {
        self.centre.shape()
    }

    pub fn lower(&self) -> Tensor<T> {
        self.centre.zip_map(&self.radius, |c, r| c - r).unwrap()
    }

    pub fn upper(&self) -> Tensor<T> {
        self.centre.zip_map(&self.radius, |c, r| c + r).unwrap()
    }

    /// Whether `x` lies in the box up to `slack` in every coordinate.
    pub fn contains(&self, x: &[T], slack: T) -> bool {
        x.len() == self.centre.numel()
            && x.iter()
                .zip(self.centre.data().iter().zip(self.radius.data()))
                .all(|(&v, (&c, &r))| v >= c - r - slack && v <= c + r + slack)
    }

    /// Adds a leading batch dimension of one.
    pub fn batched(&self) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape());
        Ok(Self {
            centre: self.centre.clone().reshape(&shape)?,
            radius: self.radius.clone().reshape(&shape)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BoxTensor<U> {
        BoxTensor {
            centre: self.centre.cast(),
            radius: self.radius.cast(),
        }
    }
}

/// A box living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoxVar {
    pub centre: Var,
    pub radius: Var,
}

/// Box transformer of layer `i` of `net` on a tape. `shrink` is the default
/// shrinking coefficient for unstable ReLUs; a per-layer override wins.
pub fn box_layer<T: Scalar>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    i: usize,
    x: BoxVar,
    shrink: f64,
) -> Result<BoxVar> {
    Ok(match (&net.layers[i], &bound.layers[i]) {
        (Layer::Linear { .. }, LayerVars::Linear { weight_t, weight_t_abs, bias, .. }) => {
            let c = tape.matmul(x.centre, *weight_t)?;
            let centre = tape.add_bias(c, *bias)?;
            let radius = tape.matmul(x.radius, *weight_t_abs)?;
            BoxVar { centre, radius }
        }
        (Layer::Conv2d { stride, padding, .. }, LayerVars::Conv { weight, bias, weight_abs }) => BoxVar {
            centre: tape.conv2d(x.centre, *weight, Some(*bias), *stride, *padding)?,
            radius: tape.conv2d(x.radius, *weight_abs, None, *stride, *padding)?,
        },
        (Layer::Relu { shrink: own }, _) => {
            let cs = T::of(own.unwrap_or(shrink));
            BoxVar {
                centre: tape.box_relu_centre(x.centre, x.radius, cs)?,
                radius: tape.box_relu_radius(x.centre, x.radius, cs)?,
            }
        }
        (Layer::Flatten, _) => {
            let s = tape.shape(x.centre).to_vec();
            let flat = [s[0], s[1..].iter().product()];
            BoxVar {
                centre: tape.reshape(x.centre, &flat)?,
                radius: tape.reshape(x.radius, &flat)?,
            }
        }
        (layer @ Layer::BatchNormAffine { running_mean, .. }, LayerVars::Norm { gamma, beta }) => {
            let inv_std = layer.inv_std();
            BoxVar {
                centre: tape.channel_affine(
                    x.centre,
                    *gamma,
                    Some(*beta),
                    running_mean.data().to_vec(),
                    inv_std.clone(),
                )?,
                radius: tape.channel_scale_abs(x.radius, *gamma, inv_std)?,
            }
        }
        _ => return Err(Error::invalid("tape bindings do not match the network")),
    })
}

/// Propagates a batched box through every layer; returns the box after each
/// layer (index 0 is the input).
pub fn propagate_box_tape<T: Scalar>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    input: BoxVar,
    shrink: f64,
) -> Result<Vec<BoxVar>> {
    net.check_batch(tape.shape(input.centre))?;
    let mut trace = vec![input];
    for i in 0..net.layers.len() {
        let next = box_layer(net, tape, bound, i, *trace.last().unwrap(), shrink)?;
        trace.push(next);
    }
    Ok(trace)
}

/// Centre and radius parts of the logit-difference bounds for every row of a
/// batched logit box, via the per-row difference matrix `D = I - 1 e_t^T`
/// (radius through `|D|`). Their sum is the upper bound on `y_i - y_t`.
pub fn logit_diff_parts_tape<T: Scalar>(tape: &mut Tape<T>, logits: BoxVar, targets: &[usize]) -> Result<(Var, Var)> {
    let s = tape.shape(logits.centre).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("logit_diff_upper", &s, &[targets.len()]));
    }
    let n = s[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Index { what: "target class", index: bad, len: n });
    }
    let mut diff = vec![T::zero(); targets.len() * n * n];
    let mut diff_abs = vec![T::zero(); targets.len() * n * n];
    for (b, &t) in targets.iter().enumerate() {
        for i in 0..n {
            if i == t {
                continue;
            }
            let row = (b * n + i) * n;
            diff[row + i] = T::one();
            diff[row + t] = -T::one();
            diff_abs[row + i] = T::one();
            diff_abs[row + t] = T::one();
        }
    }
    let c = tape.row_linear(logits.centre, diff, n)?;
    let r = tape.row_linear(logits.radius, diff_abs, n)?;
    Ok((c, r))
}

/// Upper bounds on `y_i - y_t` for every row of a batched logit box.
pub fn logit_diff_upper_tape<T: Scalar>(tape: &mut Tape<T>, logits: BoxVar, targets: &[usize]) -> Result<Var> {
    let (c, r) = logit_diff_parts_tape(tape, logits, targets)?;
    tape.add(c, r)
}

fn on_tape<T: Scalar>(tape: &mut Tape<T>, b: &BoxTensor<T>) -> BoxVar {
    BoxVar {
        centre: tape.constant(b.centre.clone()),
        radius: tape.constant(b.radius.clone()),
    }
}

fn off_tape<T: Scalar>(tape: &Tape<T>, b: BoxVar) -> BoxTensor<T> {
    BoxTensor {
        centre: tape.value(b.centre).clone(),
        radius: tape.value(b.radius).clone(),
    }
}

/// Box image of `y = W x + b` for `x` of shape `[in]` or `B×in`.
pub fn box_linear<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>, input: &BoxTensor<T>) -> Result<BoxTensor<T>> {
    let layer = Layer::Linear { weight: weight.clone(), bias: bias.clone() };
    single_layer(layer, input)
}

pub fn box_conv2d<T: Scalar>(
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    input: &BoxTensor<T>,
) -> Result<BoxTensor<T>> {
    let layer = Layer::Conv2d { weight: kernel.clone(), bias: bias.clone(), stride, padding };
    single_layer(layer, input)
}

pub fn box_relu<T: Scalar>(input: &BoxTensor<T>, shrink: f64) -> Result<BoxTensor<T>> {
    if !(shrink > 0.0 && shrink <= 1.0) {
        return Err(Error::invalid(format!("shrink coefficient {shrink} outside (0, 1]")));
    }
    let mut tape = Tape::new();
    let x = on_tape(&mut tape, input);
    let cs = T::of(shrink);
    let centre = tape.box_relu_centre(x.centre, x.radius, cs)?;
    let radius = tape.box_relu_radius(x.centre, x.radius, cs)?;
    Ok(off_tape(&tape, BoxVar { centre, radius }))
}

/// Box image of frozen batch norm, for inputs of shape `C×…` or `B×C×…`.
pub fn box_bn_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    input: &BoxTensor<T>,
) -> Result<BoxTensor<T>> {
    let layer = Layer::BatchNormAffine {
        gamma: gamma.clone(),
        beta: beta.clone(),
        running_mean: mean.clone(),
        running_var: var.clone(),
    };
    single_layer(layer, input)
}

fn single_layer<T: Scalar>(layer: Layer<T>, input: &BoxTensor<T>) -> Result<BoxTensor<T>> {
    let unbatched = match &layer {
        Layer::Linear { .. } => input.shape().len() == 1,
        Layer::Conv2d { .. } => input.shape().len() == 3,
        Layer::BatchNormAffine { gamma, .. } => input.shape().first() == Some(&gamma.numel()),
        _ => false,
    };
    let batched = if unbatched { input.batched()? } else { input.clone() };
    let out_shape = layer.output_shape(&batched.shape()[1..])?;
    let net = Network {
        layers: vec![layer],
        input_shape: batched.shape()[1..].to_vec(),
        num_classes: 0,
        flags: Vec::new(),
    };
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = on_tape(&mut tape, &batched);
    let y = box_layer(&net, &mut tape, &bound, 0, x, 1.0)?;
    let out = off_tape(&tape, y);
    if unbatched {
        Ok(BoxTensor {
            centre: out.centre.reshape(&out_shape)?,
            radius: out.radius.reshape(&out_shape)?,
        })
    } else {
        Ok(out)
    }
}

/// Per-layer boxes from a Box propagation.
#[derive(Clone, Debug)]
pub struct BoxTrace<T> {
    /// `boxes[0]` is the input box, `boxes[i + 1]` the output of layer `i`.
    pub boxes: Vec<BoxTensor<T>>,
}

impl<T: Scalar> BoxTrace<T> {
    pub fn output(&self) -> &BoxTensor<T> {
        self.boxes.last().unwrap()
    }
}

/// Propagates `input` (one sample, or a batch with a leading dimension)
/// through `net`.
pub fn propagate_box<T: Scalar>(net: &Network<T>, input: &BoxTensor<T>, shrink: f64) -> Result<BoxTrace<T>> {
    let unbatched = input.shape() == net.input_shape.as_slice();
    let batched = if unbatched { input.batched()? } else { input.clone() };
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = on_tape(&mut tape, &batched);
    let trace = propagate_box_tape(net, &mut tape, &bound, x, shrink)?;
    let boxes = trace
        .into_iter()
        .map(|b| {
            let out = off_tape(&tape, b);
            if unbatched {
                let shape = out.shape()[1..].to_vec();
                Ok(BoxTensor {
                    centre: out.centre.reshape(&shape)?,
                    radius: out.radius.reshape(&shape)?,
                })
            } else {
                Ok(out)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoxTrace { boxes })
}

/// Upper bounds on the logit differences `y_i - y_t` of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitDiffBounds<T> {
    pub upper: Tensor<T>,
    pub target: usize,
}

impl<T: Scalar> LogitDiffBounds<T> {
    /// `max_{i != t} u_i`, the worst-case margin.
    pub fn max_other(&self) -> T {
        self.upper
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.target)
            .map(|(_, &v)| v)
            .fold(T::neg_infinity(), T::max)
    }

    /// Certified iff every non-target bound is below `-CERT_SLACK`.
    pub fn certified(&self) -> bool {
        self.max_other() < -T::of(CERT_SLACK)
    }
}

/// Logit-difference upper bounds for an output box of shape `[n]`.
pub fn logit_diff_upper<T: Scalar>(out: &BoxTensor<T>, target: usize) -> Result<LogitDiffBounds<T>> {
    let n = out.centre.numel();
    let b = BoxTensor {
        centre: out.centre.clone().reshape(&[1, n])?,
        radius: out.radius.clone().reshape(&[1, n])?,
    };
    let mut tape = Tape::new();
    let x = on_tape(&mut tape, &b);
    let u = logit_diff_upper_tape(&mut tape, x, &[target])?;
    Ok(LogitDiffBounds {
        upper: tape.value(u).clone().reshape(&[n])?,
        target,
    })
}

/// Box certification of a batch of regions (leading batch dimension).
/// Returns per-sample `(certified, worst-case margin)`.
pub fn certify_box<T: Scalar>(net: &Network<T>, regions: &BoxTensor<T>, targets: &[usize]) -> Result<Vec<(bool, f64)>> {
    let net = &net.without_shrink();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = on_tape(&mut tape, regions);
    let trace = propagate_box_tape(net, &mut tape, &bound, x, 1.0)?;
    let u = logit_diff_upper_tape(&mut tape, *trace.last().unwrap(), targets)?;
    let u = tape.value(u);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(b, &t)| {
            let bounds = LogitDiffBounds {
                upper: Tensor::new(&[u.row_len()], u.row(b).to_vec()).unwrap(),
                target: t,
            };
            (bounds.certified(), bounds.max_other().as_f64())
        })
        .collect())
}
