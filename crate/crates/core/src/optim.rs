//! Adam and global gradient-norm clipping.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of `params` with the matching gradients.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.t));
        let c2 = T::one() - T::of(self.beta2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            assert_eq!(p.numel(), g.len());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global ℓ2 norm of a set of gradients.
pub fn grad_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = *v * s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p], &[vec![3.0, -0.5, 0.0]]);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-8);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[3.0, -4.0]).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().map(|&x| 2.0 * x).collect();
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.abs_max() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        let n = clip_grad_norm(&mut g, 10.0);
        assert_eq!(n, 5.0);
        assert_eq!(g, vec![vec![3.0, 0.0], vec![4.0]]);
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    }
}
