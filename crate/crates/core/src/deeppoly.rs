//! DeepPoly-style verifier: per-neuron affine lower/upper bounds, resolved
//! by backsubstitution all the way to the input box.
//!
//! Concrete bounds are always intersected with the Box bounds of the same
//! neuron, so they are never looser than Box.

use crate::boxdom::{self, BoxTensor, LogitDiffBounds};
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Rows backsubstituted together; bounds memory for wide layers.
const ROW_BLOCK: usize = 256;

/// Symbolic bounds of one layer's outputs in terms of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Relaxation<T> {
    /// The layer is affine; its lower and upper bound are the layer itself.
    Affine,
    /// `lower_slope·x <= y <= upper_slope·x + upper_intercept`, per neuron.
    Relu {
        lower_slope: Vec<T>,
        upper_slope: Vec<T>,
        upper_intercept: Vec<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearBoundsElement<T> {
    pub relaxation: Relaxation<T>,
    /// Concrete bounds of the layer output, shaped like one sample.
    pub lower: Tensor<T>,
    pub upper: Tensor<T>,
}

/// Slopes of the ReLU relaxation for input bounds `[l, u]`:
/// `(lower_slope, upper_slope, upper_intercept)`.
pub fn relu_relaxation<T: Scalar>(l: T, u: T) -> (T, T, T) {
    if u <= T::zero() {
        (T::zero(), T::zero(), T::zero())
    } else if l >= T::zero() {
        (T::one(), T::one(), T::zero())
    } else {
        let s = u / (u - l);
        let alpha = if u > -l { T::one() } else { T::zero() };
        (alpha, s, -s * l)
    }
}

struct Analysis<'a, T> {
    net: &'a Network<T>,
    shapes: Vec<Vec<usize>>,
    /// Concrete bounds at every trace position (0 = input).
    lower: Vec<Vec<T>>,
    upper: Vec<Vec<T>>,
}

impl<'a, T: Scalar> Analysis<'a, T> {
    fn new(net: &'a Network<T>, input: &BoxTensor<T>) -> Result<Self> {
        if input.shape() != net.input_shape.as_slice() {
            return Err(Error::shape("deeppoly input", input.shape(), &net.input_shape));
        }
        let trace = boxdom::propagate_box(net, input, 1.0)?;
        let shapes = net.shapes()?;
        let lower = trace.boxes.iter().map(|b| b.lower().into_data()).collect();
        let upper = trace.boxes.iter().map(|b| b.upper().into_data()).collect();
        Ok(Self { net, shapes, lower, upper })
    }

    fn len(&self, j: usize) -> usize {
        self.shapes[j].iter().product()
    }

    /// Bounds `coeffs · z_j + consts` (rows × n_j) over the input box, from
    /// above if `upper`, else from below.
    fn backsubstitute(&self, j: usize, mut coeffs: Vec<T>, mut consts: Vec<T>, upper: bool) -> Result<Vec<T>> {
        let rows = consts.len();
        for m in (0..j).rev() {
            let (n_in, n_out) = (self.len(m), self.len(m + 1));
            debug_assert_eq!(coeffs.len(), rows * n_out);
            match &self.net.layers[m] {
                Layer::Linear { weight, bias } => {
                    for r in 0..rows {
                        let row = &coeffs[r * n_out..(r + 1) * n_out];
                        consts[r] = consts[r] + row.iter().zip(bias.data()).map(|(&c, &b)| c * b).sum::<T>();
                    }
                    let mut next = vec![T::zero(); rows * n_in];
                    kernels::gemm(rows, n_in, n_out, &coeffs, weight.data(), &mut next);
                    coeffs = next;
                }
                Layer::Conv2d { weight, bias, stride, padding } => {
                    let mut x_shape = vec![rows];
                    x_shape.extend_from_slice(&self.shapes[m]);
                    let g = ConvGeometry::new(&x_shape, weight.shape(), *stride, *padding)?;
                    let p = g.out_pixels();
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for (o, &b) in bias.data().iter().enumerate() {
                            let s: T = coeffs[(r * g.out_channels + o) * p..(r * g.out_channels + o + 1) * p]
                                .iter()
                                .copied()
                                .sum();
                            acc = acc + s * b;
                        }
                        consts[r] = consts[r] + acc;
                    }
                    coeffs = kernels::conv2d_backward_input(&coeffs, weight.data(), &g);
                }
                layer @ Layer::BatchNormAffine { gamma, beta, running_mean, .. } => {
                    let channels = gamma.numel();
                    let inner = n_out / channels;
                    let inv = layer.inv_std();
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for (i, c) in coeffs[r * n_out..(r + 1) * n_out].iter_mut().enumerate() {
                            let ch = i / inner;
                            let a = gamma.data()[ch] * inv[ch];
                            acc = acc + *c * (beta.data()[ch] - a * running_mean.data()[ch]);
                            *c = *c * a;
                        }
                        consts[r] = consts[r] + acc;
                    }
                }
                Layer::Flatten => {}
                Layer::Relu { .. } => {
                    let (l, u) = (&self.lower[m], &self.upper[m]);
                    let relax: Vec<(T, T, T)> = l.iter().zip(u).map(|(&l, &u)| relu_relaxation(l, u)).collect();
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for (c, &(ls, us, ui)) in coeffs[r * n_out..(r + 1) * n_out].iter_mut().zip(&relax) {
                            if (*c > T::zero()) == upper {
                                acc = acc + *c * ui;
                                *c = *c * us;
                            } else {
                                *c = *c * ls;
                            }
                        }
                        consts[r] = consts[r] + acc;
                    }
                }
            }
        }
        let (l0, u0) = (&self.lower[0], &self.upper[0]);
        let n0 = self.len(0);
        Ok((0..rows)
            .map(|r| {
                let row = &coeffs[r * n0..(r + 1) * n0];
                let mut acc = consts[r];
                for (i, &c) in row.iter().enumerate() {
                    let pick = if (c > T::zero()) == upper { u0[i] } else { l0[i] };
                    acc = acc + c * pick;
                }
                acc
            })
            .collect())
    }

    /// Refines the concrete bounds of the given neurons at trace position `j`.
    fn refine(&mut self, j: usize, neurons: &[usize]) -> Result<()> {
        let n = self.len(j);
        for block in neurons.chunks(ROW_BLOCK) {
            let mut coeffs = vec![T::zero(); block.len() * n];
            for (r, &i) in block.iter().enumerate() {
                coeffs[r * n + i] = T::one();
            }
            let zeros = vec![T::zero(); block.len()];
            let lo = self.backsubstitute(j, coeffs.clone(), zeros.clone(), false)?;
            let hi = self.backsubstitute(j, coeffs, zeros, true)?;
            for (r, &i) in block.iter().enumerate() {
                let (l, u) = (self.lower[j][i].max(lo[r]), self.upper[j][i].min(hi[r]));
                // rounding can cross the bounds of a degenerate interval;
                // keep the previous (sound) one then
                if l <= u {
                    self.lower[j][i] = l;
                    self.upper[j][i] = u;
                }
            }
        }
        Ok(())
    }

    /// Runs the analysis layer by layer. With `full`, every neuron of every
    /// layer is refined; otherwise only unstable ReLU inputs.
    fn run(&mut self, full: bool) -> Result<()> {
        let layers = self.net.layers.len();
        for j in 1..=layers {
            let layer = &self.net.layers[j - 1];
            if let Layer::Relu { .. } = layer {
                // output bounds follow from the (already refined) inputs
                let (l, u) = (self.lower[j - 1].clone(), self.upper[j - 1].clone());
                for i in 0..l.len() {
                    self.lower[j][i] = self.lower[j][i].max(l[i].max(T::zero()));
                    self.upper[j][i] = self.upper[j][i].min(u[i].max(T::zero()));
                }
                continue;
            }
            let feeds_relu = matches!(self.net.layers.get(j), Some(Layer::Relu { .. }));
            let neurons: Vec<usize> = if full {
                (0..self.len(j)).collect()
            } else if feeds_relu {
                (0..self.len(j))
                    .filter(|&i| self.lower[j][i] < T::zero() && self.upper[j][i] > T::zero())
                    .collect()
            } else {
                Vec::new()
            };
            if !neurons.is_empty() {
                self.refine(j, &neurons)?;
            }
        }
        Ok(())
    }

    /// Upper bounds on `y_i - y_t` at the output, intersected with Box.
    fn logit_diff_upper(&self, target: usize) -> Result<LogitDiffBounds<T>> {
        let last = self.net.layers.len();
        let n = self.len(last);
        if target >= n {
            return Err(Error::Index { what: "target class", index: target, len: n });
        }
        let mut coeffs = vec![T::zero(); n * n];
        for i in (0..n).filter(|&i| i != target) {
            coeffs[i * n + i] = T::one();
            coeffs[i * n + target] = -T::one();
        }
        let dp = self.backsubstitute(last, coeffs, vec![T::zero(); n], true)?;
        let boxed = self.box_logit_diff(target)?;
        let upper = boxed
            .upper
            .data()
            .iter()
            .zip(&dp)
            .enumerate()
            .map(|(i, (&b, &d))| if i == target { T::zero() } else { b.min(d) })
            .collect();
        Ok(LogitDiffBounds { upper: Tensor::new(&[n], upper)?, target })
    }

    fn box_logit_diff(&self, target: usize) -> Result<LogitDiffBounds<T>> {
        let last = self.net.layers.len();
        let n = self.len(last);
        let lo = Tensor::new(&[n], self.lower[last].clone())?;
        let hi = Tensor::new(&[n], self.upper[last].clone())?;
        boxdom::logit_diff_upper(&BoxTensor::from_bounds(&lo, &hi)?, target)
    }

    fn elements(&self) -> Result<Vec<LinearBoundsElement<T>>> {
        (0..self.net.layers.len())
            .map(|m| {
                let j = m + 1;
                let relaxation = match self.net.layers[m] {
                    Layer::Relu { .. } => {
                        let mut ls = Vec::new();
                        let mut us = Vec::new();
                        let mut ui = Vec::new();
                        for (&l, &u) in self.lower[m].iter().zip(&self.upper[m]) {
                            let (a, b, c) = relu_relaxation(l, u);
                            ls.push(a);
                            us.push(b);
                            ui.push(c);
                        }
                        Relaxation::Relu { lower_slope: ls, upper_slope: us, upper_intercept: ui }
                    }
                    _ => Relaxation::Affine,
                };
                Ok(LinearBoundsElement {
                    relaxation,
                    lower: Tensor::new(&self.shapes[j], self.lower[j].clone())?,
                    upper: Tensor::new(&self.shapes[j], self.upper[j].clone())?,
                })
            })
            .collect()
    }
}

/// ReLU overrides of the shrinking coefficient are a training device and are
/// unsound, so verification always uses the plain transformer.
fn sound<T: Scalar>(net: &Network<T>) -> std::borrow::Cow<'_, Network<T>> {
    if net.layers.iter().any(|l| matches!(l, Layer::Relu { shrink: Some(_) })) {
        std::borrow::Cow::Owned(net.without_shrink())
    } else {
        std::borrow::Cow::Borrowed(net)
    }
}

/// Full analysis of one input region: bounds for every layer output.
pub fn deeppoly_bounds<T: Scalar>(net: &Network<T>, input: &BoxTensor<T>) -> Result<Vec<LinearBoundsElement<T>>> {
    let net = sound(net);
    let mut a = Analysis::new(&net, input)?;
    a.run(true)?;
    a.elements()
}

/// Logit-difference upper bounds for one region, never looser than Box.
pub fn deeppoly_logit_diff<T: Scalar>(net: &Network<T>, region: &BoxTensor<T>, target: usize) -> Result<LogitDiffBounds<T>> {
    let net = sound(net);
    let mut a = Analysis::new(&net, region)?;
    a.run(false)?;
    a.logit_diff_upper(target)
}

/// Certifies one region: `(certified, worst-case margin bound)`.
pub fn certify_deeppoly<T: Scalar>(net: &Network<T>, region: &BoxTensor<T>, target: usize) -> Result<(bool, f64)> {
    let net = sound(net);
    let mut a = Analysis::new(&net, region)?;
    // regions Box already certifies need no refinement
    let boxed = a.box_logit_diff(target)?;
    if boxed.certified() {
        return Ok((true, boxed.max_other().as_f64()));
    }
    a.run(false)?;
    let u = a.logit_diff_upper(target)?;
    Ok((u.certified(), u.max_other().as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, NetShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn single_unstable_relu() {
        let net = Network::new(
            &[1],
            2,
            vec![
                Layer::Linear { weight: t(&[1, 1], &[1.0]), bias: t(&[1], &[0.0]) },
                Layer::relu(),
                Layer::Linear { weight: t(&[2, 1], &[1.0, 0.0]), bias: t(&[2], &[0.0, 0.0]) },
            ],
        )
        .unwrap();
        let region = BoxTensor::new(t(&[1], &[0.0]), t(&[1], &[1.0])).unwrap();
        let el = deeppoly_bounds(&net, &region).unwrap();
        assert_eq!(
            el[1].relaxation,
            Relaxation::Relu { lower_slope: vec![0.0], upper_slope: vec![0.5], upper_intercept: vec![0.5] }
        );
        assert_eq!(el[1].lower.data(), &[0.0]);
        assert_eq!(el[1].upper.data(), &[1.0]);
        assert_eq!(relu_relaxation(-1.0, 2.0), (1.0, 2.0 / 3.0, 2.0 / 3.0));
    }

    #[test]
    fn affine_net_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let d = rng.random_range(1..=6);
            let w1: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w2: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let net = Network::new(
                &[d],
                3,
                vec![
                    Layer::Linear { weight: t(&[4, d], &w1), bias: t(&[4], &[0.1, 0.2, -0.3, 0.0]) },
                    Layer::Linear { weight: t(&[3, 4], &w2), bias: t(&[3], &[0.5, -0.5, 0.0]) },
                ],
            )
            .unwrap();
            let c: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let r: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.2)).collect();
            let region = BoxTensor::new(t(&[d], &c), t(&[d], &r)).unwrap();
            let el = deeppoly_bounds(&net, &region).unwrap();
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for mask in 0..1u32 << d {
                let x: Vec<f64> = (0..d).map(|i| if mask >> i & 1 == 1 { c[i] + r[i] } else { c[i] - r[i] }).collect();
                let y = net.forward(&t(&[d], &x)).unwrap();
                for k in 0..3 {
                    lo[k] = lo[k].min(y.data()[k]);
                    hi[k] = hi[k].max(y.data()[k]);
                }
            }
            let out = el.last().unwrap();
            for k in 0..3 {
                assert!((out.lower.data()[k] - lo[k]).abs() <= 1e-9 * lo[k].abs().max(1.0));
                assert!((out.upper.data()[k] - hi[k]).abs() <= 1e-9 * hi[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn dominates_box_and_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape { batch_norm: true, ..Default::default() });
            let x = fixtures::random_input(&mut rng, &net.input_shape);
            let region = BoxTensor::linf_ball(&x, rng.random_range(0.01..0.3)).unwrap();
            let trace = boxdom::propagate_box(&net, &region, 1.0).unwrap();
            let el = deeppoly_bounds(&net, &region).unwrap();
            for (e, b) in el.iter().zip(&trace.boxes[1..]) {
                let (bl, bu) = (b.lower(), b.upper());
                for i in 0..e.lower.numel() {
                    assert!(
                        e.lower.data()[i] >= bl.data()[i] && e.upper.data()[i] <= bu.data()[i],
                        "{i}: dp [{}, {}] box [{}, {}]\n{net:?}",
                        e.lower.data()[i],
                        e.upper.data()[i],
                        bl.data()[i],
                        bu.data()[i]
                    );
                    assert!(e.lower.data()[i] <= e.upper.data()[i]);
                }
            }
            for _ in 0..200 {
                let p = fixtures::sample_in_box(&mut rng, &region.centre, &region.radius);
                let mut tape = crate::tensor::Tape::new();
                let bound = net.bind(&mut tape, false);
                let mut shape = vec![1];
                shape.extend_from_slice(&net.input_shape);
                let mut h = tape.constant(p.reshape(&shape).unwrap());
                for (i, e) in el.iter().enumerate() {
                    h = net.apply_layer(&mut tape, &bound, i, h).unwrap();
                    for (k, &v) in tape.value(h).data().iter().enumerate() {
                        assert!(v >= e.lower.data()[k] - 1e-6 && v <= e.upper.data()[k] + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn certification_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
        let x = fixtures::random_input(&mut rng, &net.input_shape);
        let label = crate::network::argmax(net.forward(&x).unwrap().data());
        let (ok, _) = certify_deeppoly(&net, &BoxTensor::point(&x), label).unwrap();
        assert!(ok);

        // y0 = x, y1 = 1 - x on [0, 1]: the region contains points of both classes
        let net = Network::new(
            &[1],
            2,
            vec![Layer::Linear { weight: t(&[2, 1], &[1.0, -1.0]), bias: t(&[2], &[0.0, 1.0]) }],
        )
        .unwrap();
        let region = BoxTensor::new(t(&[1], &[0.5]), t(&[1], &[0.5])).unwrap();
        assert!(net.forward(&t(&[1], &[0.0])).unwrap().data()[1] > 0.5);
        assert!(!certify_deeppoly(&net, &region, 0).unwrap().0);
    }

    #[test]
    fn box_certified_implies_deeppoly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
            let x = fixtures::random_input(&mut rng, &net.input_shape);
            let label = crate::network::argmax(net.forward(&x).unwrap().data());
            let region = BoxTensor::linf_ball(&x, rng.random_range(0.0..0.05)).unwrap();
            let bx = boxdom::logit_diff_upper(boxdom::propagate_box(&net, &region, 1.0).unwrap().output(), label).unwrap();
            let dp = deeppoly_logit_diff(&net, &region, label).unwrap();
            assert!(dp.max_other() <= bx.max_other());
            if bx.certified() {
                assert!(certify_deeppoly(&net, &region, label).unwrap().0);
            }
        }
    }
}
