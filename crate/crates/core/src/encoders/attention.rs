//! Attention pooling: `M = tanh(H)`, `α = softmax(M w)`, `r = Hᵀ α`.

use rand::Rng;

use super::{expect_cols, join, uniform_init, Parameterized};
use crate::error::Result;
use crate::numerics::{dot, softmax_into, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnPool {
    pub w: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttnPoolCache {
    m: Tensor,
    alpha: Vec<f64>,
}

impl AttnPoolCache {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

impl AttnPool {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            w: uniform_init(rng, &[dim], dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn forward(&self, h: &Tensor) -> Result<(Vec<f64>, AttnPoolCache)> {
        let d = self.dim();
        let t = expect_cols(h, d, "attention pool input")?;
        let m = h.map(f64::tanh);
        let scores: Vec<f64> = (0..t).map(|i| dot(m.row(i), self.w.data())).collect();
        let mut alpha = vec![0.0; t];
        softmax_into(&scores, &mut alpha);
        let mut r = vec![0.0; d];
        for (i, &a) in alpha.iter().enumerate() {
            for (o, &v) in r.iter_mut().zip(h.row(i)) {
                *o += a * v;
            }
        }
        Ok((r, AttnPoolCache { m, alpha }))
    }

    /// Returns `dL/dH`.
    pub fn backward(&self, h: &Tensor, cache: &AttnPoolCache, d_r: &[f64], grads: &mut AttnPool) -> Tensor {
        let t = h.rows();
        let w = self.w.data();
        let mut dh = Tensor::zeros(h.shape());
        // r = Σ α_i h_i
        let d_alpha: Vec<f64> = (0..t).map(|i| dot(h.row(i), d_r)).collect();
        let inner: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        for i in 0..t {
            let a = cache.alpha[i];
            let d_score = a * (d_alpha[i] - inner);
            let m = cache.m.row(i);
            for (gw, &mv) in grads.w.data_mut().iter_mut().zip(m) {
                *gw += d_score * mv;
            }
            let row = dh.row_mut(i);
            for j in 0..row.len() {
                row[j] = a * d_r[j] + d_score * w[j] * (1.0 - m[j] * m[j]);
            }
        }
        dh
    }
}

pub fn attention_pool(h: &Tensor, pool: &AttnPool) -> Result<Tensor> {
    Tensor::from_vec(pool.forward(h)?.0)
}

impl Parameterized for AttnPool {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.w);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_GRAD_EPS};

    #[test]
    fn single_position() {
        let mut r = rng(0);
        let pool = AttnPool::new(&mut r, 4);
        let h = random(&mut r, &[1, 4]);
        let (out, cache) = pool.forward(&h).unwrap();
        assert_eq!(cache.alpha(), &[1.0]);
        assert_eq!(out, h.row(0));
    }

    #[test]
    fn identical_rows_are_uniform() {
        let mut r = rng(1);
        let pool = AttnPool::new(&mut r, 3);
        let row = random(&mut r, &[3]);
        let h = Tensor::matrix(5, 3, row.data().repeat(5)).unwrap();
        let (out, cache) = pool.forward(&h).unwrap();
        assert!(cache.alpha().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        for (a, b) in out.iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_is_a_distribution() {
        let mut r = rng(2);
        for t in 1..12 {
            let pool = AttnPool::new(&mut r, 5);
            let mut h = random(&mut r, &[t, 5]);
            h.scale(10.0);
            let (_, cache) = pool.forward(&h).unwrap();
            assert!(cache.alpha().iter().all(|&a| a >= 0.0));
            assert!((cache.alpha().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(attention_pool(&Tensor::zeros(&[2, 4]), &AttnPool::new(&mut r, 5)).is_err());
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut r = rng(3);
        for _ in 0..20 {
            let pool = AttnPool::new(&mut r, 4);
            let h = random(&mut r, &[3, 4]);
            let probe = random(&mut r, &[4]);
            let loss = |p: &AttnPool, h: &Tensor| attention_pool(h, p).unwrap().dot(&probe).unwrap();
            let (_, cache) = pool.forward(&h).unwrap();
            let mut g = pool.zeros_like();
            let dh = pool.backward(&h, &cache, probe.data(), &mut g);
            let rep = grad_check(|x| Ok(loss(&pool, x)), &h, &dh, DEFAULT_GRAD_EPS).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            let rep = check_params(&pool, &g, |p| loss(p, &h));
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }
}
