//! ℓ∞ PGD attacks, used both to pick propagation regions during training and
//! to estimate adversarial accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax, Network};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    CrossEntropy,
    /// `y_target - y_true` against one target class per restart.
    Margin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size as a fraction of the ball radius.
    pub alpha: f64,
    /// Steps after which the step size is multiplied by `decay_factor`.
    pub decay_after: Vec<usize>,
    pub decay_factor: f64,
    pub restarts: usize,
    pub loss: AttackLoss,
    pub seed: u64,
}

impl AttackConfig {
    /// 8 steps, α = 0.5 decayed ×0.1 after steps 4 and 7, cross-entropy.
    pub fn training() -> Self {
        Self {
            steps: 8,
            alpha: 0.5,
            decay_after: vec![4, 7],
            decay_factor: 0.1,
            restarts: 1,
            loss: AttackLoss::CrossEntropy,
            seed: 0,
        }
    }

    /// 50 steps, 5 restarts, targeted margin loss.
    pub fn evaluation() -> Self {
        Self {
            steps: 50,
            alpha: 0.5,
            decay_after: vec![20, 40],
            decay_factor: 0.1,
            restarts: 5,
            loss: AttackLoss::Margin,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.alpha > 0.0) || self.restarts == 0 {
            return Err(Error::invalid("attack needs steps >= 1, alpha > 0 and restarts >= 1"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::invalid("attack decay factor must be positive"));
        }
        Ok(())
    }

    /// Step size of step `n` (0-based) relative to the radius.
    pub fn step_size(&self, n: usize) -> f64 {
        let decays = self.decay_after.iter().filter(|&&d| d <= n).count();
        self.alpha * self.decay_factor.powi(decays as i32)
    }
}

/// `y_target - y_true`; positive iff `target` beats the true class.
pub fn margin_loss<T: Scalar>(logits: &[T], true_class: usize, target: usize) -> Result<T> {
    if target == true_class {
        return Err(Error::invalid("margin loss target must differ from the true class"));
    }
    let n = logits.len();
    for i in [true_class, target] {
        if i >= n {
            return Err(Error::Index { what: "margin loss class", index: i, len: n });
        }
    }
    Ok(logits[target] - logits[true_class])
}

/// Per-sample generator: stream `index` of the ChaCha generator keyed by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-sample feasible set `B_∞^radius(x) ∩ [0, 1]^d`.
fn feasible<T: Scalar>(x: &Tensor<T>, radius: f64) -> (Vec<T>, Vec<T>) {
    let r = T::of(radius);
    let lo = x.data().iter().map(|&v| (v - r).max(T::zero())).collect();
    let hi = x.data().iter().map(|&v| (v + r).min(T::one())).collect();
    (lo, hi)
}

enum Objective<'a> {
    CrossEntropy,
    Margin(&'a [usize]),
}

/// Per-sample attack losses and their gradient w.r.t. the inputs.
fn loss_and_grad<T: Scalar>(net: &Network<T>, x: &Tensor<T>, labels: &[usize], obj: &Objective) -> Result<(Vec<T>, Vec<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.param(x.clone());
    let logits = net.forward_tape(&mut tape, &bound, xv)?;
    let per: Var = match obj {
        Objective::CrossEntropy => tape.cross_entropy(logits, labels)?,
        Objective::Margin(targets) => {
            let a = tape.gather(logits, targets.to_vec())?;
            let b = tape.gather(logits, labels.to_vec())?;
            tape.sub(a, b)?
        }
    };
    let losses = tape.value(per).data().to_vec();
    let total = tape.sum(per);
    tape.backward(total)?;
    let grad = tape.grad(xv).unwrap().to_vec();
    Ok((losses, grad, tape.value(logits).clone()))
}

/// Result of one batched attack.
pub struct AttackOutcome<T> {
    /// Highest-loss iterate per sample.
    pub best: Tensor<T>,
    pub best_loss: Vec<T>,
    /// Whether any iterate was misclassified.
    pub fooled: Vec<bool>,
}

/// One PGD run (all restarts) on a batch. `rngs[b]` drives sample `b`;
/// `targets[r][b]` is the margin target of sample `b` in restart `r`.
fn run<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    radius: f64,
    cfg: &AttackConfig,
    rngs: &mut [ChaCha8Rng],
    targets: Option<&[Vec<usize>]>,
    stop_when_fooled: bool,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if !(radius >= 0.0) {
        return Err(Error::invalid("attack radius must be non-negative"));
    }
    let batch = labels.len();
    let row = x.row_len();
    let (lo, hi) = feasible(x, radius);
    let mut best = x.clone();
    let mut best_loss = vec![T::neg_infinity(); batch];
    let mut fooled = vec![false; batch];
    for r in 0..cfg.restarts {
        let obj = match (cfg.loss, targets) {
            (AttackLoss::Margin, Some(t)) => Objective::Margin(&t[r]),
            (AttackLoss::Margin, None) => return Err(Error::invalid("margin attack needs targets")),
            (AttackLoss::CrossEntropy, _) => Objective::CrossEntropy,
        };
        let mut cur = x.clone();
        for (b, rng) in rngs.iter_mut().enumerate() {
            for i in b * row..(b + 1) * row {
                let u: f64 = rng.random();
                cur.data_mut()[i] = lo[i] + (hi[i] - lo[i]) * T::of(u);
            }
        }
        for n in 0..=cfg.steps {
            let (losses, grad, logits) = loss_and_grad(net, &cur, labels, &obj)?;
            for b in 0..batch {
                if argmax(logits.row(b)) != labels[b] {
                    fooled[b] = true;
                }
                if losses[b] > best_loss[b] {
                    best_loss[b] = losses[b];
                    best.data_mut()[b * row..(b + 1) * row].copy_from_slice(cur.row(b));
                }
            }
            if n == cfg.steps || (stop_when_fooled && fooled.iter().all(|&f| f)) {
                break;
            }
            let step = T::of(cfg.step_size(n) * radius);
            for (i, v) in cur.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                let s = if g > T::zero() {
                    step
                } else if g < T::zero() {
                    -step
                } else {
                    T::zero()
                };
                *v = (*v + s).max(lo[i]).min(hi[i]);
                debug_assert!(*v >= lo[i] && *v <= hi[i]);
            }
        }
        if stop_when_fooled && fooled.iter().all(|&f| f) {
            break;
        }
    }
    Ok(AttackOutcome { best, best_loss, fooled })
}

/// PGD on a batch `x: B×…` with labels; sample `b` uses the random stream
/// `streams[b]`. Returns the highest-loss iterate per sample.
pub fn pgd_batch<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    radius: f64,
    cfg: &AttackConfig,
    streams: &[u64],
) -> Result<AttackOutcome<T>> {
    net.check_batch(x.shape())?;
    if labels.len() != x.shape()[0] || streams.len() != labels.len() {
        return Err(Error::shape("pgd batch", x.shape(), &[labels.len(), streams.len()]));
    }
    let mut rngs: Vec<ChaCha8Rng> = streams.iter().map(|&s| sample_rng(cfg.seed, s)).collect();
    let targets = match cfg.loss {
        AttackLoss::Margin => Some(margin_targets(net, x, labels, cfg.restarts)?),
        AttackLoss::CrossEntropy => None,
    };
    run(net, x, labels, radius, cfg, &mut rngs, targets.as_deref(), false)
}

/// Single-sample PGD: the worst input found in `B_∞^radius(x) ∩ [0, 1]^d`.
pub fn pgd<T: Scalar>(net: &Network<T>, x: &Tensor<T>, label: usize, radius: f64, cfg: &AttackConfig) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let out = pgd_batch(net, &x.clone().reshape(&shape)?, &[label], radius, cfg, &[0])?;
    out.best.reshape(x.shape())
}

/// Margin targets per restart: the non-true classes ranked by their clean
/// logit, highest first, cycling when restarts outnumber them.
fn margin_targets<T: Scalar>(net: &Network<T>, x: &Tensor<T>, labels: &[usize], restarts: usize) -> Result<Vec<Vec<usize>>> {
    let logits = net.forward_batch(x)?;
    let ranked: Vec<Vec<usize>> = labels
        .iter()
        .enumerate()
        .map(|(b, &t)| {
            let row = logits.row(b);
            let mut others: Vec<usize> = (0..row.len()).filter(|&i| i != t).collect();
            others.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
            others
        })
        .collect();
    Ok((0..restarts)
        .map(|r| ranked.iter().map(|o| o[r % o.len()]).collect())
        .collect())
}

/// Per-sample robustness under the attack: `true` iff the clean point is
/// classified correctly and no iterate of any restart is misclassified.
pub fn adversarial_robust<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    radius: f64,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<Vec<bool>> {
    net.check_batch(x.shape())?;
    let n = labels.len();
    let mut robust = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let xb = x.select_rows(&idx);
        let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let clean = net.predict(&xb)?;
        let mut rngs: Vec<ChaCha8Rng> = idx.iter().map(|&i| sample_rng(cfg.seed, i as u64)).collect();
        let targets = match cfg.loss {
            AttackLoss::Margin => Some(margin_targets(net, &xb, &lb, cfg.restarts)?),
            AttackLoss::CrossEntropy => None,
        };
        let out = if radius > 0.0 {
            Some(run(net, &xb, &lb, radius, cfg, &mut rngs, targets.as_deref(), true)?)
        } else {
            None
        };
        for b in 0..idx.len() {
            let fooled = out.as_ref().is_some_and(|o| o.fooled[b]);
            robust.push(clean[b] == lb[b] && !fooled);
        }
    }
    Ok(robust)
}

/// Fraction of samples robust under the attack.
pub fn adversarial_accuracy<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    radius: f64,
    cfg: &AttackConfig,
) -> Result<f64> {
    let robust = adversarial_robust(net, x, labels, radius, cfg, 100)?;
    Ok(robust.iter().filter(|&&r| r).count() as f64 / robust.len().max(1) as f64)
}
