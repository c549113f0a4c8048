//! Propagation-region selection, the robust loss and the certified training
//! loop. IBP training is the `lambda = 1` special case.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{self, sample_rng, AttackConfig, AttackLoss};
use crate::bench::Dataset;
use crate::boxdom::{self, BoxTensor, BoxVar};
use crate::error::{Error, Result};
use crate::network::{argmax, Bound, Network};
use crate::optim::{clip_grad_norm, Adam};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A propagation region `B(centre, tau)` chosen inside `B(anchor, eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec<T> {
    pub anchor: Tensor<T>,
    pub eps: f64,
    pub lambda: f64,
    pub tau: f64,
    /// The projected adversarial example `x'`.
    pub centre: Tensor<T>,
    /// The box actually propagated (`B(x', tau)` clipped to the ε-ball and
    /// the input domain).
    pub region: BoxTensor<T>,
}

/// Bounds of the propagation region for one coordinate.
///
/// `x'` is `x*` clipped to `[x - (eps - tau), x + (eps - tau)] ∩ [tau, 1 - tau]`.
/// When that interval is empty (the domain is narrower than `2 tau` around
/// `x`) the region is the clipped ε-ball itself, which then has radius below
/// `tau`. Bounds are finally intersected with the clipped ε-ball so that
/// containment also holds after rounding.
pub fn region_bounds<T: Scalar>(x: T, x_star: T, eps: T, tau: T) -> (T, T) {
    let (zero, one) = (T::zero(), T::one());
    let ball_lo = (x - eps).max(zero);
    let ball_hi = (x + eps).min(one);
    let r = eps - tau;
    let lo = (x - r).max(tau);
    let hi = (x + r).min(one - tau);
    if lo > hi {
        return (ball_lo, ball_hi);
    }
    let c = x_star.max(lo).min(hi);
    ((c - tau).max(ball_lo), (c + tau).min(ball_hi))
}

fn check_region_args(eps: f64, lambda: f64) -> Result<()> {
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("eps must be non-negative, got {eps}")));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    Ok(())
}

/// Regions for a batch given the adversarial points `x_star` (same shape as `x`).
pub fn regions_from_adversary<T: Scalar>(x: &Tensor<T>, x_star: &Tensor<T>, eps: f64, lambda: f64) -> Result<BoxTensor<T>> {
    check_region_args(eps, lambda)?;
    if x.shape() != x_star.shape() {
        return Err(Error::shape("regions_from_adversary", x.shape(), x_star.shape()));
    }
    let (e, tau) = (T::of(eps), T::of(lambda * eps));
    let (lo, hi): (Vec<T>, Vec<T>) = x
        .data()
        .iter()
        .zip(x_star.data())
        .map(|(&v, &s)| region_bounds(v, s, e, tau))
        .unzip();
    debug_assert!(x.data().iter().zip(lo.iter().zip(&hi)).all(|(&v, (&l, &u))| {
        l <= u && l >= (v - e).max(T::zero()) && u <= (v + e).min(T::one())
    }));
    BoxTensor::from_bounds(&Tensor::new(x.shape(), lo)?, &Tensor::new(x.shape(), hi)?)
}

/// Batched region selection: PGD inside the ε-ball, then projection. The
/// attack is skipped (`x* = x`) when `lambda == 1` or the attack has no steps.
pub fn select_regions<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    lambda: f64,
    cfg: &AttackConfig,
    streams: &[u64],
) -> Result<BoxTensor<T>> {
    check_region_args(eps, lambda)?;
    let x_star = if lambda == 1.0 || cfg.steps == 0 || eps == 0.0 {
        x.clone()
    } else {
        attack::pgd_batch(net, x, labels, eps, cfg, streams)?.best
    };
    regions_from_adversary(x, &x_star, eps, lambda)
}

/// Region for a single sample.
pub fn select_region<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    t: usize,
    eps: f64,
    lambda: f64,
    cfg: &AttackConfig,
) -> Result<RegionSpec<T>> {
    let xb = batch_of_one(x)?;
    let region = select_regions(net, &xb, &[t], eps, lambda, cfg, &[0])?;
    let region = BoxTensor::new(region.centre.reshape(x.shape())?, region.radius.reshape(x.shape())?)?;
    Ok(RegionSpec {
        anchor: x.clone(),
        eps,
        lambda,
        tau: lambda * eps,
        centre: region.centre.clone(),
        region,
    })
}

fn batch_of_one<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Tape handles of the robust loss of a batch.
#[derive(Clone, Copy, Debug)]
pub struct RobustTerms {
    /// Per-sample robust cross-entropy, shape `B`.
    pub loss: Var,
    /// Centre part of the logit-difference bounds, `B×n`.
    pub centre_diff: Var,
    /// Radius part of the logit-difference bounds, `B×n`.
    pub radius_diff: Var,
}

/// Robust loss of a batch of regions: Box propagation followed by
/// cross-entropy on the logit-difference upper bounds (`u_t = 0`).
pub fn robust_loss_tape<T: Scalar>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    regions: &BoxTensor<T>,
    labels: &[usize],
    shrink: f64,
) -> Result<RobustTerms> {
    let input = BoxVar {
        centre: tape.constant(regions.centre.clone()),
        radius: tape.constant(regions.radius.clone()),
    };
    let trace = boxdom::propagate_box_tape(net, tape, bound, input, shrink)?;
    let (centre_diff, radius_diff) = boxdom::logit_diff_parts_tape(tape, *trace.last().unwrap(), labels)?;
    let u = tape.add(centre_diff, radius_diff)?;
    let loss = tape.cross_entropy(u, labels)?;
    Ok(RobustTerms { loss, centre_diff, radius_diff })
}

/// `ln(1 + Σ_{i≠t} exp(u_i))` for the region of one sample.
pub fn robust_loss<T: Scalar>(net: &Network<T>, region: &RegionSpec<T>, t: usize, shrink: f64) -> Result<T> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let batched = region.region.batched()?;
    let terms = robust_loss_tape(net, &mut tape, &bound, &batched, &[t], shrink)?;
    Ok(tape.value(terms.loss).data()[0])
}

/// Index of the largest non-target entry of a row.
fn argmax_other<T: Scalar>(row: &[T], t: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i != t && (best == usize::MAX || v > row[best]) {
            best = i;
        }
    }
    best
}

/// Splits the worst logit-difference bound into its accuracy term (centre
/// margin) and robustness term (radius) for every row.
fn decompose<T: Scalar>(centre: &Tensor<T>, radius: &Tensor<T>, labels: &[usize]) -> Vec<(T, T)> {
    labels
        .iter()
        .enumerate()
        .map(|(b, &t)| {
            let (c, r) = (centre.row(b), radius.row(b));
            let u: Vec<T> = c.iter().zip(r).map(|(&a, &b)| a + b).collect();
            let i = argmax_other(&u, t);
            (c[i], r[i])
        })
        .collect()
}

/// `(ȳΔ, δΔ)` for the class with the largest logit-difference upper bound.
/// Their sum is exactly that bound. Uses the plain Box transformer.
pub fn loss_decomposition<T: Scalar>(net: &Network<T>, region: &RegionSpec<T>, t: usize) -> Result<(T, T)> {
    let out = decomposition_batch(net, &region.region.batched()?, &[t], 1.0)?;
    Ok(out[0])
}

/// Batched form of [`loss_decomposition`].
pub fn decomposition_batch<T: Scalar>(
    net: &Network<T>,
    regions: &BoxTensor<T>,
    labels: &[usize],
    shrink: f64,
) -> Result<Vec<(T, T)>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let terms = robust_loss_tape(net, &mut tape, &bound, regions, labels, shrink)?;
    Ok(decompose(tape.value(terms.centre_diff), tape.value(terms.radius_diff), labels))
}

/// Mean robust loss of a batch of regions (no gradients).
pub fn mean_robust_loss<T: Scalar>(net: &Network<T>, regions: &BoxTensor<T>, labels: &[usize], shrink: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let terms = robust_loss_tape(net, &mut tape, &bound, regions, labels, shrink)?;
    let l = tape.value(terms.loss);
    Ok(l.data().iter().map(|v| v.as_f64()).sum::<f64>() / l.numel().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Final perturbation radius.
    pub eps: f64,
    /// Epochs of standard training before the ramp starts.
    pub clean_epochs: usize,
    /// Epochs over which ε grows linearly (per step) to its final value.
    pub ramp_epochs: usize,
    pub lambda: f64,
    /// Shrinking coefficient of unstable ReLUs during training.
    pub shrink: f64,
    pub lr: f64,
    /// Epochs (0-based) from which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// ℓ1 coefficient on weights (not biases or batch norm).
    pub l1: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Attack used to pick propagation regions.
    pub attack: AttackConfig,
    /// Samples used for per-epoch monitoring.
    pub monitor_samples: usize,
    pub monitor_attack: AttackConfig,
    /// Stop after this many optimizer steps (for smoke runs).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            eps: 0.1,
            clean_epochs: 1,
            ramp_epochs: 20,
            lambda: 0.4,
            shrink: 1.0,
            lr: 5e-4,
            lr_milestones: vec![50, 60],
            lr_decay: 0.2,
            l1: 1e-5,
            grad_clip: 10.0,
            batch_size: 256,
            seed: 0,
            attack: AttackConfig::training(),
            monitor_samples: 500,
            monitor_attack: AttackConfig {
                steps: 20,
                alpha: 0.25,
                decay_after: vec![10, 15],
                decay_factor: 0.1,
                restarts: 1,
                loss: AttackLoss::Margin,
                seed: 0,
            },
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_region_args(self.eps, self.lambda)?;
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::invalid("shrink must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.l1 >= 0.0) || !(self.grad_clip > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("l1 must be >= 0, grad_clip and lr_decay > 0"));
        }
        if self.attack.steps > 0 {
            self.attack.validate()?;
        }
        self.monitor_attack.validate()
    }

    /// ε at step `step` (0-based) of epoch `epoch` (0-based).
    pub fn eps_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        if epoch < self.clean_epochs {
            return 0.0;
        }
        let ramp = self.ramp_epochs * steps_per_epoch;
        if ramp == 0 {
            return self.eps;
        }
        let k = (epoch - self.clean_epochs) * steps_per_epoch + step + 1;
        self.eps * (k as f64 / ramp as f64).min(1.0)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(n as i32)
    }
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean robust (or standard) loss of the batch, without the ℓ1 term.
    pub loss: f64,
    /// Per-sample accuracy term ȳΔ.
    pub margins: Vec<f64>,
    /// Per-sample robustness term δΔ.
    pub deltas: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Network plus optimizer state.
pub struct Trainer<T: Scalar> {
    pub net: Network<T>,
    pub cfg: TrainConfig,
    pub opt: Adam<T>,
    pub epoch: usize,
    pub steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        net.validate()?;
        let opt = Adam::new(cfg.lr);
        Ok(Self { net, cfg, opt, epoch: 0, steps: 0 })
    }

    /// One optimizer step on a batch at radius `eps`. `streams[b]` keys the
    /// attack randomness of sample `b`.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize], eps: f64, streams: &[u64]) -> Result<StepStats> {
        self.net.bn_update_stats(x)?;
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let (per_sample, parts) = if eps == 0.0 {
            let xv = tape.constant(x.clone());
            let logits = self.net.forward_tape(&mut tape, &bound, xv)?;
            let loss = tape.cross_entropy(logits, labels)?;
            let l = tape.value(logits);
            let parts: Vec<(f64, f64)> = labels
                .iter()
                .enumerate()
                .map(|(b, &t)| {
                    let row = l.row(b);
                    ((row[argmax_other(row, t)] - row[t]).as_f64(), 0.0)
                })
                .collect();
            (loss, parts)
        } else {
            let regions = select_regions(&self.net, x, labels, eps, self.cfg.lambda, &self.cfg.attack, streams)?;
            let terms = robust_loss_tape(&self.net, &mut tape, &bound, &regions, labels, self.cfg.shrink)?;
            let parts = decompose(tape.value(terms.centre_diff), tape.value(terms.radius_diff), labels)
                .into_iter()
                .map(|(m, d)| (m.as_f64(), d.as_f64()))
                .collect();
            (terms.loss, parts)
        };
        let mean = tape.mean(per_sample);
        let loss = tape.value(mean).item();
        let mut total = mean;
        if self.cfg.l1 > 0.0 {
            let mut reg: Option<Var> = None;
            for w in bound.weights() {
                let s = tape.sum_abs(w);
                reg = Some(match reg {
                    Some(r) => tape.add(r, s)?,
                    None => s,
                });
            }
            if let Some(r) = reg {
                let r = tape.scale(r, T::of(self.cfg.l1));
                total = tape.add(total, r)?;
            }
        }
        if !tape.value(total).item().is_finite() {
            return Err(self.non_finite(eps));
        }
        tape.backward(total)?;
        let mut grads: Vec<Vec<T>> = bound.params().iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.non_finite(eps));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.opt.lr = self.cfg.lr_at(self.epoch);
        let params: Vec<&mut Tensor<T>> = self.net.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect();
        self.opt.step(params, &grads);
        self.steps += 1;
        let (margins, deltas) = parts.into_iter().unzip();
        Ok(StepStats { loss: loss.as_f64(), margins, deltas, grad_norm })
    }

    fn non_finite(&self, eps: f64) -> Error {
        Error::NonFiniteLoss {
            epoch: self.epoch,
            step: self.steps,
            eps,
            norms: self.net.layer_norms(),
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,eps,lambda,loss,std_acc,pgd_acc,box_cert_acc,mean_margin,mean_delta";

/// One row of the training log. Accuracies are on the monitor set; PGD and
/// Box accuracy use the final ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub eps: f64,
    pub lambda: f64,
    pub loss: f64,
    pub std_acc: f64,
    pub pgd_acc: f64,
    pub box_cert_acc: f64,
    pub mean_margin: f64,
    pub mean_delta: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.eps,
            self.lambda,
            self.loss,
            self.std_acc,
            self.pgd_acc,
            self.box_cert_acc,
            self.mean_margin,
            self.mean_delta
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Fraction of samples whose clipped ε-ball is Box-certified (plain Box, f64).
pub fn box_certified_accuracy<T: Scalar>(net: &Network<T>, data: &Dataset<T>, eps: f64, batch: usize) -> Result<f64> {
    let net64: Network<f64> = net.cast();
    let mut hits = 0usize;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(data.len())).collect();
        let x: Tensor<f64> = data.images.select_rows(&idx).cast();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let region = BoxTensor::linf_ball(&x, eps)?;
        hits += boxdom::certify_box(&net64, &region, &labels)?.iter().filter(|c| c.0).count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

pub fn standard_accuracy<T: Scalar>(net: &Network<T>, data: &Dataset<T>, batch: usize) -> Result<f64> {
    let mut hits = 0usize;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch.max(1)).min(data.len())).collect();
        let pred = net.predict(&data.images.select_rows(&idx))?;
        hits += idx.iter().zip(pred).filter(|(&i, p)| data.labels[i] == *p).count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Result of [`train`].
pub struct TrainOutput<T: Scalar> {
    pub net: Network<T>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains with monitoring on the first `cfg.monitor_samples` training samples.
pub fn train<T: Scalar>(net: Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    let monitor = data.head(cfg.monitor_samples);
    train_with(net, data, &monitor, cfg, |_| {})
}

/// The training loop. `on_epoch` sees every metrics row as it is produced.
pub fn train_with<T: Scalar>(
    net: Network<T>,
    data: &Dataset<T>,
    monitor: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput<T>> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    trainer.cfg.attack.seed = cfg.attack.seed.wrapping_add(cfg.seed);
    let n = data.len();
    let has_bn = trainer.net.layers.iter().any(|l| l.kind() == "BatchNormAffine");
    let mut batches = n.div_ceil(cfg.batch_size);
    if has_bn && n % cfg.batch_size == 1 {
        batches -= 1;
    }
    let batches = batches.max(1);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    'epochs: for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(cfg.seed, (1 << 63) | epoch as u64));
        let (mut loss_sum, mut margin_sum, mut delta_sum, mut count, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut eps = 0.0;
        for b in 0..batches {
            if cfg.max_steps.is_some_and(|m| trainer.steps >= m) {
                break;
            }
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let x = data.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let streams: Vec<u64> = (0..idx.len()).map(|k| (epoch * n + b * cfg.batch_size + k) as u64).collect();
            eps = cfg.eps_at(epoch, b, batches);
            let s = trainer.step(&x, &labels, eps, &streams)?;
            loss_sum += s.loss;
            margin_sum += s.margins.iter().sum::<f64>();
            delta_sum += s.deltas.iter().sum::<f64>();
            count += idx.len();
            steps += 1;
        }
        if steps == 0 {
            break 'epochs;
        }
        let net = &trainer.net;
        let pgd_acc = if monitor.is_empty() {
            f64::NAN
        } else {
            attack::adversarial_accuracy(net, &monitor.images, &monitor.labels, cfg.eps, &cfg.monitor_attack)?
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            eps,
            lambda: cfg.lambda,
            loss: loss_sum / steps as f64,
            std_acc: standard_accuracy(net, monitor, 500)?,
            pgd_acc,
            box_cert_acc: box_certified_accuracy(net, monitor, cfg.eps, 500)?,
            mean_margin: margin_sum / count as f64,
            mean_delta: delta_sum / count as f64,
        };
        if eps > 0.0 && eps < cfg.eps {
            let cur = box_certified_accuracy(net, monitor, eps, 500)?;
            tracing::info!(epoch = epoch + 1, eps, box_cert_acc_current = cur, "certified at current eps");
        }
        tracing::info!(
            epoch = row.epoch,
            eps = row.eps,
            loss = row.loss,
            std_acc = row.std_acc,
            pgd_acc = row.pgd_acc,
            box_cert_acc = row.box_cert_acc,
            "epoch done"
        );
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutput { net: trainer.net, metrics })
}

/// Predicted class of each sample (convenience for reports).
pub fn predictions<T: Scalar>(net: &Network<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = net.forward_batch(x)?;
    Ok((0..logits.shape()[0]).map(|b| argmax(logits.row(b))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, NetShape};
    use crate::network::{arch, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn projection_example() {
        let r = regions_from_adversary(&t(&[1], &[0.5]), &t(&[1], &[0.59]), 0.1, 0.4).unwrap();
        let (l, u) = (r.lower().data()[0], r.upper().data()[0]);
        assert!(close(r.centre.data()[0], 0.56));
        assert!(close(l, 0.52) && close(u, 0.60));
        assert!(l >= 0.4 - 1e-12 && u <= 0.6 + 1e-12);
    }

    #[test]
    fn projection_near_domain_boundary() {
        let r = regions_from_adversary(&t(&[1], &[0.01]), &t(&[1], &[-0.05]), 0.1, 0.5).unwrap();
        let (l, u) = (r.lower().data()[0], r.upper().data()[0]);
        assert!(l >= 0.0 && u <= 0.11 + 1e-12);
        assert!(close(l, 0.0) && close(u, 0.1));
    }

    #[test]
    fn lambda_one_is_the_clipped_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Tensor<f32> = fixtures::random_input(&mut rng, &[2, 8]);
            let star: Tensor<f32> = fixtures::random_input(&mut rng, &[2, 8]);
            let eps = rng.random_range(0.0..0.4);
            let r = regions_from_adversary(&x, &star, eps, 1.0).unwrap();
            assert_eq!(r, BoxTensor::linf_ball(&x, eps).unwrap());
        }
    }

    #[test]
    fn containment_on_random_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            let x: f64 = rng.random();
            let eps: f64 = rng.random_range(0.0..0.5);
            let lambda: f64 = rng.random_range(0.01..=1.0);
            let star = (x + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
            let tau = lambda * eps;
            let (l, u) = region_bounds(x, star, eps, tau);
            assert!(l <= u);
            assert!(l >= (x - eps).max(0.0) && u <= (x + eps).min(1.0));
            assert!(u - l <= 2.0 * tau + 1e-15);
        }
    }

    #[test]
    fn select_region_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = NetShape { conv: false, input_len: 5, ..Default::default() };
        let net: Network<f64> = fixtures::random_network(&mut rng, &shape);
        let x: Tensor<f64> = fixtures::random_input(&mut rng, &[5]);
        let r = select_region(&net, &x, 1, 0.2, 0.3, &AttackConfig::training()).unwrap();
        assert!((r.tau - 0.06).abs() < 1e-15);
        let ball = BoxTensor::linf_ball(&x, 0.2).unwrap();
        for (i, (&l, &u)) in r.region.lower().data().iter().zip(r.region.upper().data()).enumerate() {
            assert!(l >= ball.lower().data()[i] && u <= ball.upper().data()[i]);
            assert!(u - l <= 0.12 + 1e-12);
        }
    }

    fn zero_net(classes: usize) -> Network<f64> {
        Network::new(&[3], classes, vec![Layer::linear(3, classes)]).unwrap()
    }

    #[test]
    fn symmetric_bounds_give_ln_n() {
        let net = zero_net(10);
        let x = t(&[3], &[0.2, 0.5, 0.9]);
        let r = select_region(&net, &x, 4, 0.1, 0.5, &AttackConfig::training()).unwrap();
        let l = robust_loss(&net, &r, 4, 1.0).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_tau_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
            let x: Tensor<f64> = fixtures::random_input(&mut rng, &net.input_shape);
            let target = rng.random_range(0..net.num_classes);
            let region = RegionSpec {
                anchor: x.clone(),
                eps: 0.0,
                lambda: 1.0,
                tau: 0.0,
                centre: x.clone(),
                region: BoxTensor::point(&x),
            };
            let robust = robust_loss(&net, &region, target, 1.0).unwrap();
            let ce = crate::tensor::softmax_cross_entropy(&net.forward(&x).unwrap(), target).unwrap().item();
            assert_eq!(robust.to_bits(), ce.to_bits());
        }
    }

    #[test]
    fn sandwich_and_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut positive = 0;
        for _ in 0..300 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
            let x: Tensor<f64> = fixtures::random_input(&mut rng, &net.input_shape);
            let target = rng.random_range(0..net.num_classes);
            let eps = rng.random_range(0.0..0.3);
            let r = select_region(&net, &x, target, eps, rng.random_range(0.05..=1.0), &AttackConfig::training()).unwrap();
            let l = robust_loss(&net, &r, target, 1.0).unwrap();
            let bounds = boxdom::logit_diff_upper(&boxdom::propagate_box(&net, &r.region, 1.0).unwrap().output().clone(), target).unwrap();
            let m = bounds.max_other();
            let (acc, rob) = loss_decomposition(&net, &r, target).unwrap();
            assert_eq!((acc + rob).to_bits(), m.to_bits());
            assert!(rob >= 0.0);
            if m > 0.0 {
                positive += 1;
                let n = net.num_classes as f64;
                assert!(l > m && l < m + n.ln(), "loss {l} outside ({m}, {m} + ln {n})");
            }
        }
        assert!(positive > 30);
    }

    #[test]
    fn zero_radius_has_no_robustness_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net: Network<f64> = fixtures::random_network(&mut rng, &NetShape::default());
        let x: Tensor<f64> = fixtures::random_input(&mut rng, &net.input_shape);
        let r = select_region(&net, &x, 0, 0.0, 0.5, &AttackConfig::training()).unwrap();
        assert_eq!(loss_decomposition(&net, &r, 0).unwrap().1, 0.0);
    }

    // With a single hidden ReLU layer the hidden centres do not depend on the
    // radius, so every output radius is monotone in it.
    #[test]
    fn radius_terms_grow_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = NetShape { min_layers: 2, max_layers: 2, ..Default::default() };
        for _ in 0..30 {
            let net: Network<f64> = fixtures::random_network(&mut rng, &shape);
            let x: Tensor<f64> = fixtures::random_input(&mut rng, &net.input_shape);
            let x = x.map(|v| 0.3 + 0.4 * v);
            let target = rng.random_range(0..net.num_classes);
            let mut prev: Option<Vec<f64>> = None;
            for k in 1..=8 {
                let tau = 0.0375 * k as f64;
                let region = BoxTensor::new(x.clone(), Tensor::full(x.shape(), tau)).unwrap().batched().unwrap();
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape, false);
                let terms = robust_loss_tape(&net, &mut tape, &bound, &region, &[target], 1.0).unwrap();
                let r = tape.value(terms.radius_diff).data().to_vec();
                if let Some(p) = &prev {
                    assert!(r.iter().zip(p).all(|(a, b)| a >= b));
                }
                prev = Some(r);
            }
        }
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig { clean_epochs: 1, ramp_epochs: 2, eps: 0.1, ..Default::default() };
        assert_eq!(cfg.eps_at(0, 5, 10), 0.0);
        assert!((cfg.eps_at(1, 0, 10) - 0.005).abs() < 1e-15);
        assert!((cfg.eps_at(2, 9, 10) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.eps_at(5, 0, 10), 0.1);
        assert_eq!(cfg.lr_at(49), 5e-4);
        assert!((cfg.lr_at(50) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(65) - 2e-5).abs() < 1e-18);
        assert!(TrainConfig { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }

    fn toy_data(n: usize, seed: u64) -> Dataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let c = rng.random_range(0..3);
            for j in 0..6 {
                let base = if j / 2 == c { 0.8 } else { 0.2 };
                x.push((base + rng.random_range(-0.15..0.15f32)).clamp(0.0, 1.0));
            }
            y.push(c);
        }
        Dataset::new(Tensor::new(&[n, 6], x).unwrap(), y, 3, "train").unwrap()
    }

    fn toy_cfg(lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            eps: 0.1,
            clean_epochs: 1,
            ramp_epochs: 2,
            lambda,
            lr: 5e-3,
            lr_milestones: vec![3],
            batch_size: 16,
            monitor_samples: 40,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let data = toy_data(160, 1);
        let mut net: Network<f32> = arch::mlp(&[6], &[16], 3).unwrap();
        net.init_params(2);
        let a = train(net.clone(), &data, &toy_cfg(0.4)).unwrap();
        let b = train(net, &data, &toy_cfg(0.4)).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 4);
        let last = a.metrics.last().unwrap();
        assert!(last.std_acc > 0.9, "{last:?}");
        assert!(last.mean_delta > 0.0);
        assert_eq!(a.metrics[0].mean_delta, 0.0);
    }

    #[test]
    fn nan_weights_abort_with_diagnostics() {
        let data = toy_data(32, 2);
        let mut net: Network<f32> = arch::mlp(&[6], &[4], 3).unwrap();
        net.init_params(0);
        if let Layer::Linear { weight, .. } = &mut net.layers[0] {
            weight.data_mut()[0] = f32::NAN;
        }
        match train(net, &data, &toy_cfg(0.5)) {
            Err(Error::NonFiniteLoss { norms, epoch, .. }) => {
                assert_eq!(epoch, 0);
                assert!(norms[0].is_nan());
            }
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = EpochMetrics {
            epoch: 1,
            eps: 0.0,
            lambda: 0.4,
            loss: 1.5,
            std_acc: 0.5,
            pgd_acc: 0.25,
            box_cert_acc: 0.125,
            mean_margin: -1.0,
            mean_delta: 0.0,
        };
        write_metrics_csv(&p, &[row]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, format!("{METRICS_HEADER}\n1,0,0.4,1.5,0.5,0.25,0.125,-1,0\n"));
    }
}
