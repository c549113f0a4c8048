//! Box growth through ReLU layers: closed forms, quadrature and Monte-Carlo
//! estimates of the expected output radius for a distribution of box centres.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::boxdom::{self, BoxTensor};
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

/// Quadrature tolerance for densities without a closed form.
pub const QUAD_TOL: f64 = 1e-10;

/// Distribution of pre-activation box centres.
#[derive(Clone, Debug, PartialEq)]
pub enum CentreDistribution {
    Gaussian { mean: f64, std: f64 },
    /// Density `a` on `[-l, 0)` and `b` on `(0, l]` with `l = 1 / (a + b)`.
    PiecewiseUniform { a: f64, b: f64 },
    Empirical(Vec<f64>),
}

impl CentreDistribution {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::invalid("gaussian needs a finite mean and std > 0"));
        }
        Ok(Self::Gaussian { mean, std })
    }

    pub fn piecewise_uniform(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0 && a + b > 0.0) {
            return Err(Error::invalid("piecewise uniform needs a, b >= 0 and a + b > 0"));
        }
        Ok(Self::PiecewiseUniform { a, b })
    }

    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("empirical distribution needs finite samples"));
        }
        Ok(Self::Empirical(samples))
    }

    /// Support half-width `l` of the piecewise-uniform family.
    pub fn support(&self) -> Option<f64> {
        match self {
            Self::PiecewiseUniform { a, b } => Some(1.0 / (a + b)),
            _ => None,
        }
    }

    fn normal(mean: f64, std: f64) -> Normal {
        Normal::new(mean, std).expect("validated parameters")
    }

    /// Density at `z`, if there is one.
    pub fn pdf(&self, z: f64) -> Result<f64> {
        match *self {
            Self::Gaussian { mean, std } => Ok(Self::normal(mean, std).pdf(z)),
            Self::PiecewiseUniform { a, b } => {
                let l = 1.0 / (a + b);
                Ok(if (-l..0.0).contains(&z) {
                    a
                } else if z > 0.0 && z <= l {
                    b
                } else {
                    0.0
                })
            }
            Self::Empirical(_) => Err(Error::invalid("an empirical distribution has no density")),
        }
    }

    /// `P(x <= z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian { mean, std } => Self::normal(*mean, *std).cdf(z),
            Self::PiecewiseUniform { a, b } => {
                let l = 1.0 / (a + b);
                if z < -l {
                    0.0
                } else if z < 0.0 {
                    a * (z + l)
                } else if z < l {
                    a * l + b * z
                } else {
                    1.0
                }
            }
            Self::Empirical(s) => s.iter().filter(|&&v| v <= z).count() as f64 / s.len() as f64,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { mean, std } => rand_distr::Normal::new(*mean, *std).unwrap().sample(rng),
            Self::PiecewiseUniform { a, b } => {
                let l = 1.0 / (a + b);
                let u: f64 = rng.random();
                if u < a * l {
                    -l + u / a
                } else {
                    (u - a * l) / b
                }
            }
            Self::Empirical(s) => s[rng.random_range(0..s.len())],
        }
    }
}

/// Output radius of the ReLU Box transformer for centre `z`, radius `delta`.
pub fn relu_output_radius(z: f64, delta: f64) -> f64 {
    if z + delta <= 0.0 {
        0.0
    } else if z - delta <= 0.0 {
        (z + delta) / 2.0
    } else {
        delta
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("input radius must be finite and >= 0, got {delta}")));
    }
    Ok(())
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 50)
}

/// `E[δ_y]` for ReLU boxes of radius `delta` with centres drawn from `dist`.
pub fn expected_output_radius(dist: &CentreDistribution, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if delta == 0.0 {
        return Ok(0.0);
    }
    Ok(match dist {
        CentreDistribution::PiecewiseUniform { a, b } => {
            let l = 1.0 / (a + b);
            if delta <= l {
                delta * delta * (a - b) / 4.0 + delta * b / (a + b)
            } else {
                let mean = (b - a) * l * l / 2.0;
                (mean + delta) / 2.0
            }
        }
        CentreDistribution::Gaussian { mean, std } => {
            let n = CentreDistribution::normal(*mean, *std);
            let inner = integrate(&|z| (z + delta) / 2.0 * n.pdf(z), -delta, delta, QUAD_TOL);
            inner + delta * (1.0 - n.cdf(delta))
        }
        CentreDistribution::Empirical(s) => s.iter().map(|&z| relu_output_radius(z, delta)).sum::<f64>() / s.len() as f64,
    })
}

/// First and second derivative of `E[δ_y]` in `delta`:
/// `½ P(-δ < x < δ) + P(x > δ)` and `½ (p(-δ) - p(δ))`.
pub fn growth_rate_derivative(dist: &CentreDistribution, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    let (p_lo, p_hi) = (dist.pdf(-delta)?, dist.pdf(delta)?);
    let below_hi = dist.cdf(delta);
    let first = 0.5 * (below_hi - dist.cdf(-delta)) + (1.0 - below_hi);
    Ok((first, 0.5 * (p_lo - p_hi)))
}

/// Monte-Carlo estimate of `E[δ_y]` and its standard error.
pub fn monte_carlo_radius(dist: &CentreDistribution, delta: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if draws < 2 {
        return Err(Error::invalid("Monte Carlo needs at least 2 draws"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..draws {
        let v = relu_output_radius(dist.sample(&mut rng), delta);
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    let var = m2 / (draws - 1) as f64;
    Ok((mean, (var / draws as f64).sqrt()))
}

/// Empirical growth rate of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthRate {
    /// Mean output radius over mean input radius.
    pub kappa: f64,
    /// For Linear layers, the mean row-wise ℓ1 norm of the weight, which
    /// equals `kappa` when all input radii are equal.
    pub row_l1: Option<f64>,
}

/// `κ` of layer `index` on a batch of input boxes.
pub fn layer_growth_rate(net: &Network<f64>, index: usize, inputs: &BoxTensor<f64>) -> Result<GrowthRate> {
    let layer = net
        .layers
        .get(index)
        .ok_or(Error::Index { what: "layer", index, len: net.layers.len() })?;
    let in_mean = inputs.radius.sum() / inputs.radius.numel().max(1) as f64;
    if !(in_mean > 0.0) {
        return Err(Error::invalid("growth rate needs a non-zero input radius"));
    }
    let (out, row_l1) = match layer {
        Layer::Linear { weight, bias } => {
            let rows = weight.shape()[0];
            let l1 = weight.data().iter().map(|w| w.abs()).sum::<f64>() / rows as f64;
            (boxdom::box_linear(weight, bias, inputs)?, Some(l1))
        }
        Layer::Conv2d { weight, bias, stride, padding } => (boxdom::box_conv2d(weight, bias, *stride, *padding, inputs)?, None),
        Layer::Relu { shrink } => (boxdom::box_relu(inputs, shrink.unwrap_or(1.0))?, None),
        other => return Err(Error::invalid(format!("growth rate undefined for {} layers", other.kind()))),
    };
    let out_mean = out.radius.sum() / out.radius.numel().max(1) as f64;
    Ok(GrowthRate { kappa: out_mean / in_mean, row_l1 })
}

/// What a growth curve is computed for.
pub enum GrowthSource<'a> {
    Distribution(&'a CentreDistribution),
    /// Mean logit radius of boxes of radius δ (unclipped) around `inputs`.
    Network { net: &'a Network<f64>, inputs: &'a Tensor<f64> },
}

impl GrowthSource<'_> {
    fn value(&self, delta: f64) -> Result<f64> {
        match self {
            Self::Distribution(d) => expected_output_radius(d, delta),
            Self::Network { net, inputs } => {
                check_delta(delta)?;
                let region = BoxTensor::new((*inputs).clone(), Tensor::full(inputs.shape(), delta))?;
                let out = boxdom::propagate_box(net, &region, 1.0)?;
                let r = &out.output().radius;
                Ok(r.sum() / r.numel().max(1) as f64)
            }
        }
    }

    fn slope(&self, delta: f64) -> Result<f64> {
        match self {
            Self::Distribution(d) if !matches!(d, CentreDistribution::Empirical(_)) => Ok(growth_rate_derivative(d, delta)?.0),
            _ => {
                let h = 1e-5 * delta.max(1e-3);
                let lo = (delta - h).max(0.0);
                Ok((self.value(delta + h)? - self.value(lo)?) / (delta + h - lo))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub delta: f64,
    pub expected: f64,
    /// Tangent-line extrapolation from the first grid point.
    pub linear_ref: f64,
}

/// Growth curve over `grid` (ascending), with the tangent at `grid[0]` as
/// the linear reference.
pub fn growth_curve(source: &GrowthSource, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    let Some(&anchor) = grid.first() else {
        return Ok(Vec::new());
    };
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("growth grid must be strictly ascending"));
    }
    let base = source.value(anchor)?;
    let slope = source.slope(anchor)?;
    grid.iter()
        .map(|&d| {
            Ok(CurvePoint {
                delta: d,
                expected: source.value(d)?,
                linear_ref: base + slope * (d - anchor),
            })
        })
        .collect()
}

/// Whether the actual curve lies above its linear reference beyond the anchor.
pub fn is_super_linear(curve: &[CurvePoint]) -> bool {
    curve.len() > 1 && curve[1..].iter().all(|p| p.expected > p.linear_ref)
}

pub const CURVE_HEADER: &str = "delta_x,expected_radius,linear_ref";

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CURVE_HEADER}")?;
    for p in curve {
        writeln!(f, "{},{},{}", p.delta, p.expected, p.linear_ref)?;
    }
    f.flush()?;
    Ok(())
}
