//! Ablation metrics: ReLU activation states, gradient alignment between
//! losses, and robust loss as a function of the propagation region size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::boxdom::{self, BoxTensor};
use crate::deeppoly;
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::sabr;
use crate::tensor::{softmax_cross_entropy, Tape, Tensor};

use super::Dataset;

/// Subselection ratios used for loss curves by default.
pub const LAMBDA_GRID: [f64; 9] = [0.0125, 0.025, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateMode {
    /// Signs of concrete pre-activations.
    Point,
    /// Box bounds of the pre-activations over the ε-ball.
    Region,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateFractions {
    pub active: f64,
    pub inactive: f64,
    pub unstable: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluStateStats {
    pub mode: StateMode,
    pub per_layer: Vec<StateFractions>,
    /// Pooled over every ReLU neuron of every sample.
    pub mean: StateFractions,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    active: usize,
    inactive: usize,
    unstable: usize,
}

impl Counts {
    fn fractions(self) -> StateFractions {
        let n = (self.active + self.inactive + self.unstable).max(1) as f64;
        StateFractions {
            active: self.active as f64 / n,
            inactive: self.inactive as f64 / n,
            unstable: self.unstable as f64 / n,
        }
    }
}

/// Active / inactive / unstable ReLU fractions. In region mode a neuron is
/// active iff `l > 0`, inactive iff `u <= 0` and unstable otherwise, so
/// ε = 0 reproduces point mode.
pub fn relu_state_stats(net: &Network<f64>, inputs: &Tensor<f64>, mode: StateMode, eps: f64) -> Result<ReluStateStats> {
    let relus: Vec<usize> = (0..net.layers.len())
        .filter(|&i| matches!(net.layers[i], Layer::Relu { .. }))
        .collect();
    if relus.is_empty() {
        return Err(Error::invalid("network has no ReLU layers"));
    }
    let mut counts = vec![Counts::default(); relus.len()];
    let n = inputs.shape().first().copied().unwrap_or(0);
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let x = inputs.select_rows(&idx);
        let (lower, upper) = match mode {
            StateMode::Point => {
                let acts = pre_activations(net, &x, &relus)?;
                (acts.clone(), acts)
            }
            StateMode::Region => {
                let trace = boxdom::propagate_box(&net.without_shrink(), &BoxTensor::linf_ball(&x, eps)?, 1.0)?;
                relus.iter().map(|&i| (trace.boxes[i].lower(), trace.boxes[i].upper())).unzip()
            }
        };
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            for (&lo, &hi) in l.data().iter().zip(u.data()) {
                if lo > 0.0 {
                    counts[k].active += 1;
                } else if hi <= 0.0 {
                    counts[k].inactive += 1;
                } else {
                    counts[k].unstable += 1;
                }
            }
        }
    }
    let total = counts.iter().fold(Counts::default(), |a, c| Counts {
        active: a.active + c.active,
        inactive: a.inactive + c.inactive,
        unstable: a.unstable + c.unstable,
    });
    Ok(ReluStateStats {
        mode,
        per_layer: counts.iter().map(|c| c.fractions()).collect(),
        mean: total.fractions(),
    })
}

/// Inputs of the given ReLU layers for a batch.
fn pre_activations(net: &Network<f64>, x: &Tensor<f64>, relus: &[usize]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let mut h = tape.constant(x.clone());
    let mut out = Vec::new();
    for i in 0..net.layers.len() {
        if relus.contains(&i) {
            out.push(tape.value(h).clone());
        }
        h = net.apply_layer(&mut tape, &bound, i, h)?;
    }
    Ok(out)
}

/// A per-sample training objective whose parameter gradient can be compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    /// Cross-entropy at the clean input.
    Standard,
    /// Cross-entropy at a PGD point in the ε-ball.
    Adversarial,
    /// Box robust loss of the region chosen with ratio `lambda`.
    Robust { lambda: f64 },
    Negated(Box<LossSpec>),
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Standard => write!(f, "ce"),
            Self::Adversarial => write!(f, "adv"),
            Self::Robust { lambda } => write!(f, "robust:{lambda}"),
            Self::Negated(inner) => write!(f, "neg:{inner}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// `ce`, `adv`, `robust:<lambda>`, `ibp` (= `robust:1`) or `neg:<spec>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("neg:") {
            return Ok(Self::Negated(Box::new(rest.parse()?)));
        }
        if let Some(l) = s.strip_prefix("robust:") {
            let lambda: f64 = l.parse().map_err(|_| Error::invalid(format!("bad lambda in `{s}`")))?;
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::invalid(format!("lambda must lie in (0, 1] in `{s}`")));
            }
            return Ok(Self::Robust { lambda });
        }
        match s {
            "ce" => Ok(Self::Standard),
            "adv" => Ok(Self::Adversarial),
            "ibp" => Ok(Self::Robust { lambda: 1.0 }),
            _ => Err(Error::invalid(format!("unknown loss `{s}` (ce | adv | ibp | robust:<lambda> | neg:<spec>)"))),
        }
    }
}

/// Settings shared by the losses of [`grad_cosine`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossContext {
    pub eps: f64,
    pub attack: AttackConfig,
    pub shrink: f64,
}

/// Flattened parameter gradient of `spec` on sample `index` of `data`.
pub fn loss_gradient(net: &Network<f64>, spec: &LossSpec, ctx: &LossContext, data: &Dataset<f64>, index: usize) -> Result<Vec<f64>> {
    let x = data.images.select_rows(&[index]);
    let label = [data.labels[index]];
    let stream = [index as u64];
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let (loss, sign) = build_loss(net, spec, ctx, &mut tape, &bound, &x, &label, &stream)?;
    let loss = if sign < 0.0 { tape.scale(loss, -1.0) } else { loss };
    let total = tape.sum(loss);
    tape.backward(total)?;
    Ok(bound.params().iter().flat_map(|&p| tape.grad(p).unwrap().to_vec()).collect())
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    net: &Network<f64>,
    spec: &LossSpec,
    ctx: &LossContext,
    tape: &mut Tape<f64>,
    bound: &crate::network::Bound,
    x: &Tensor<f64>,
    label: &[usize],
    stream: &[u64],
) -> Result<(crate::Var, f64)> {
    Ok(match spec {
        LossSpec::Standard => {
            let xv = tape.constant(x.clone());
            let logits = net.forward_tape(tape, bound, xv)?;
            (tape.cross_entropy(logits, label)?, 1.0)
        }
        LossSpec::Adversarial => {
            let adv = if ctx.eps > 0.0 {
                attack::pgd_batch(net, x, label, ctx.eps, &ctx.attack, stream)?.best
            } else {
                x.clone()
            };
            let xv = tape.constant(adv);
            let logits = net.forward_tape(tape, bound, xv)?;
            (tape.cross_entropy(logits, label)?, 1.0)
        }
        LossSpec::Robust { lambda } => {
            let regions = sabr::select_regions(net, x, label, ctx.eps, *lambda, &ctx.attack, stream)?;
            (sabr::robust_loss_tape(net, tape, bound, &regions, label, ctx.shrink)?.loss, 1.0)
        }
        LossSpec::Negated(inner) => {
            let (l, s) = build_loss(net, inner, ctx, tape, bound, x, label, stream)?;
            (l, -s)
        }
    })
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        tracing::warn!("cosine of a zero gradient taken as 0");
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean over samples of the cosine between the parameter gradients of two losses.
pub fn grad_cosine(net: &Network<f64>, a: &LossSpec, b: &LossSpec, ctx: &LossContext, data: &Dataset<f64>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("grad_cosine needs at least one sample"));
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        let ga = loss_gradient(net, a, ctx, data, i)?;
        let gb = loss_gradient(net, b, ctx, data, i)?;
        sum += cosine(&ga, &gb);
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMethod {
    Box,
    #[value(name = "deeppoly")]
    #[serde(rename = "deeppoly")]
    DeepPoly,
}

/// One λ of a loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCurvePoint {
    pub lambda: f64,
    pub tau: f64,
    /// Mean cross-entropy at the clean inputs.
    pub std_loss: f64,
    /// Mean robust loss of `B(x, tau)`.
    pub robust_clean: f64,
    /// Mean robust loss of the region selected around a PGD point.
    pub robust_adv: f64,
}

pub const LOSS_CURVE_HEADER: &str = "lambda,tau,std_loss,robust_loss_clean,robust_loss_adv";

impl LossCurvePoint {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.lambda, self.tau, self.std_loss, self.robust_clean, self.robust_adv)
    }
}

/// Robust cross-entropy of every region under the chosen bound.
fn region_losses(net: &Network<f64>, regions: &BoxTensor<f64>, labels: &[usize], method: BoundMethod) -> Result<Vec<f64>> {
    match method {
        BoundMethod::Box => {
            let net = net.without_shrink();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, false);
            let terms = sabr::robust_loss_tape(&net, &mut tape, &bound, regions, labels, 1.0)?;
            Ok(tape.value(terms.loss).data().to_vec())
        }
        BoundMethod::DeepPoly => labels
            .iter()
            .enumerate()
            .map(|(b, &t)| {
                let shape = &regions.shape()[1..];
                let region = BoxTensor::new(
                    regions.centre.select_rows(&[b]).reshape(shape)?,
                    regions.radius.select_rows(&[b]).reshape(shape)?,
                )?;
                let mut u = deeppoly::deeppoly_logit_diff(net, &region, t)?.upper;
                u.data_mut()[t] = 0.0;
                Ok(softmax_cross_entropy(&u, t)?.item())
            })
            .collect(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean robust loss over `data` for every λ in `lambdas`, with regions of
/// radius `λ·eps` around the clean inputs and around projected PGD points.
pub fn loss_curve(
    net: &Network<f64>,
    data: &Dataset<f64>,
    eps: f64,
    lambdas: &[f64],
    method: BoundMethod,
    attack: &AttackConfig,
) -> Result<Vec<LossCurvePoint>> {
    if data.is_empty() {
        return Err(Error::invalid("loss curve needs at least one sample"));
    }
    let logits = net.forward_batch(&data.images)?;
    let std_loss = mean(
        &data
            .labels
            .iter()
            .enumerate()
            .map(|(b, &t)| Ok(softmax_cross_entropy(&Tensor::new(&[logits.row_len()], logits.row(b).to_vec())?, t)?.item()))
            .collect::<Result<Vec<f64>>>()?,
    );
    let streams: Vec<u64> = (0..data.len() as u64).collect();
    let x_star = if eps > 0.0 {
        attack::pgd_batch(net, &data.images, &data.labels, eps, attack, &streams)?.best
    } else {
        data.images.clone()
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let tau = lambda * eps;
            let clean = BoxTensor::linf_ball(&data.images, tau)?;
            let adv = sabr::regions_from_adversary(&data.images, &x_star, eps, lambda.max(f64::MIN_POSITIVE))?;
            Ok(LossCurvePoint {
                lambda,
                tau,
                std_loss,
                robust_clean: mean(&region_losses(net, &clean, &data.labels, method)?),
                robust_adv: mean(&region_losses(net, &adv, &data.labels, method)?),
            })
        })
        .collect()
}

/// Whether `ys` over ascending `xs` has non-decreasing slopes (up to `tol`
/// relative to the largest slope).
pub fn is_convex(xs: &[f64], ys: &[f64], tol: f64) -> bool {
    let slopes: Vec<f64> = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();
    let scale = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    slopes.windows(2).all(|s| s[1] >= s[0] - tol * scale)
}

/// Mean `(ȳΔ, δΔ)` over `data` for regions selected with ratio `lambda`.
pub fn mean_decomposition(
    net: &Network<f64>,
    data: &Dataset<f64>,
    eps: f64,
    lambda: f64,
    attack: &AttackConfig,
) -> Result<(f64, f64)> {
    let streams: Vec<u64> = (0..data.len() as u64).collect();
    let regions = sabr::select_regions(net, &data.images, &data.labels, eps, lambda, attack, &streams)?;
    let parts = sabr::decomposition_batch(&net.without_shrink(), &regions, &data.labels, 1.0)?;
    let n = parts.len().max(1) as f64;
    Ok((
        parts.iter().map(|p| p.0).sum::<f64>() / n,
        parts.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, NetShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, net: &Network<f64>, n: usize) -> Dataset<f64> {
        let mut shape = vec![n];
        shape.extend_from_slice(&net.input_shape);
        let images: Tensor<f64> = fixtures::random_input(rng, &shape);
        let labels = (0..n).map(|_| rng.random_range(0..net.num_classes)).collect();
        Dataset::new(images, labels, net.num_classes, "test").unwrap()
    }

    #[test]
    fn positive_preactivations_are_active() {
        let w = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap();
        let net = Network::new(&[2], 2, vec![Layer::Linear { weight: w, bias: b }, Layer::relu()]).unwrap();
        let x = Tensor::from_f64(&[3, 2], &[0.1, 0.2, 0.9, 0.0, 0.4, 0.4]).unwrap();
        let s = relu_state_stats(&net, &x, StateMode::Point, 0.0).unwrap();
        assert_eq!(s.mean, StateFractions { active: 1.0, inactive: 0.0, unstable: 0.0 });
    }

    #[test]
    fn region_mode_collapses_and_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape { batch_norm: true, ..Default::default() });
            let data = random_data(&mut rng, &net, 12);
            let p = relu_state_stats(&net, &data.images, StateMode::Point, 0.0).unwrap();
            let r0 = relu_state_stats(&net, &data.images, StateMode::Region, 0.0).unwrap();
            assert_eq!(p.per_layer, r0.per_layer);
            assert!(p.per_layer.iter().all(|f| f.unstable == 0.0));
            let r = relu_state_stats(&net, &data.images, StateMode::Region, 0.1).unwrap();
            for f in r.per_layer.iter().chain([&r.mean]) {
                assert!((f.active + f.inactive + f.unstable - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cosine_of_identical_and_negated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
        let data = random_data(&mut rng, &net, 4);
        let ctx = LossContext { eps: 0.05, attack: AttackConfig::training(), shrink: 1.0 };
        let spec: LossSpec = "robust:0.5".parse().unwrap();
        assert!((grad_cosine(&net, &spec, &spec, &ctx, &data).unwrap() - 1.0).abs() < 1e-12);
        let neg: LossSpec = "neg:robust:0.5".parse().unwrap();
        assert!((grad_cosine(&net, &spec, &neg, &ctx, &data).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!("bogus".parse::<LossSpec>().is_err());
        assert_eq!(neg.to_string(), "neg:robust:0.5");
    }

    #[test]
    fn loss_curve_limits_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
            let data = random_data(&mut rng, &net, 6);
            let mut grid = vec![0.0];
            grid.extend(LAMBDA_GRID);
            let c = loss_curve(&net, &data, 0.1, &grid, BoundMethod::Box, &AttackConfig::training()).unwrap();
            assert_eq!(c[0].robust_clean.to_bits(), c[0].std_loss.to_bits());
            assert!(c.windows(2).all(|w| w[1].robust_clean >= w[0].robust_clean));
            let dp = loss_curve(&net, &data, 0.1, &LAMBDA_GRID, BoundMethod::DeepPoly, &AttackConfig::training()).unwrap();
            for (d, b) in dp.iter().zip(&c[1..]) {
                assert!(d.robust_clean <= b.robust_clean + 1e-9);
            }
        }
    }

    #[test]
    fn convexity_check() {
        let xs = [0.1, 0.2, 0.4, 0.8];
        assert!(is_convex(&xs, &xs.map(|x| x * x), 1e-9));
        assert!(!is_convex(&xs, &xs.map(f64::sqrt), 1e-9));
    }
}
