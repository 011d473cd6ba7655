//! Softmax classification head over a pooled feature vector.

use rand::Rng;

use super::{join, uniform_init, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, Tensor};

/// `logits = W C + b` with `W` n_classes×dim.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClsHead {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, classes: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[classes, dim], dim),
            bias: uniform_init(rng, &[classes], dim),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::shape(self.weight.shape(), &[features.len()], "head features"));
        }
        Ok((0..self.classes())
            .map(|k| dot(self.weight.row(k), features) + self.bias.data()[k])
            .collect())
    }

    /// Returns `dL/dC`.
    pub fn backward(&self, features: &[f64], d_logits: &[f64], grads: &mut ClsHead) -> Vec<f64> {
        let d = self.dim();
        let mut d_features = vec![0.0; d];
        for (k, &g) in d_logits.iter().enumerate() {
            grads.bias.data_mut()[k] += g;
            let gw = grads.weight.row_mut(k);
            for (w, &c) in gw.iter_mut().zip(features) {
                *w += g * c;
            }
            for (df, &w) in d_features.iter_mut().zip(self.weight.row(k)) {
                *df += g * w;
            }
        }
        d_features
    }
}

/// Class probabilities `softmax(W C + b)`.
pub fn classify(features: &Tensor, head: &ClsHead) -> Result<Tensor> {
    softmax(&Tensor::from_vec(head.logits(features.data())?)?)
}

impl Parameterized for ClsHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use crate::losses::{loss_batch, LossConfig};
    use crate::numerics::{grad_check, DEFAULT_GRAD_EPS};

    #[test]
    fn zero_head_is_uniform() {
        let head = ClsHead::new(&mut rng(0), 4, 5).zeros_like();
        let p = classify(&Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]).unwrap(), &head).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_class_log_three() {
        let head = ClsHead {
            weight: Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
            bias: Tensor::from_vec(vec![3f64.ln(), 0.0]).unwrap(),
        };
        let p = classify(&Tensor::from_vec(vec![1.0]).unwrap(), &head).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-15);
        assert!((p.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let head = ClsHead::new(&mut rng(0), 4, 3);
        assert!(classify(&Tensor::zeros(&[3]), &head).is_err());
    }

    #[test]
    fn head_composed_with_losses_passes_grad_check() {
        let mut r = rng(7);
        for cfg in [LossConfig::ce(), LossConfig::focal(2.0), LossConfig::cewf(2.0, 1.0)] {
            let head = ClsHead::new(&mut r, 5, 4);
            let c = random(&mut r, &[5]);
            let loss = |h: &ClsHead, c: &Tensor| {
                let logits = Tensor::matrix(1, 4, h.logits(c.data()).unwrap()).unwrap();
                loss_batch(&logits, &[2], &cfg).unwrap().0.total
            };
            let logits = Tensor::matrix(1, 4, head.logits(c.data()).unwrap()).unwrap();
            let (_, dl) = loss_batch(&logits, &[2], &cfg).unwrap();
            let mut g = head.zeros_like();
            let dc = head.backward(c.data(), dl.data(), &mut g);
            let dc = Tensor::from_vec(dc).unwrap();
            let rep = grad_check(|x| Ok(loss(&head, x)), &c, &dc, DEFAULT_GRAD_EPS).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            let rep = check_params(&head, &g, |h| loss(h, &c));
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }
}
