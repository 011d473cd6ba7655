//! Differentiable building blocks with hand-written backward passes.
//!
//! Every block follows the same shape: `forward` returns the output plus a
//! cache, and `backward` consumes the cache and an upstream gradient, returns
//! the gradient with respect to the block input and *accumulates* parameter
//! gradients into a second instance of the block (see [`Parameterized::zeros_like`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub mod attention;
pub mod dpcnn;
pub mod embedding;
pub mod head;
pub mod rcnn;
pub mod transformer;

pub use attention::{attention_pool, AttnPool, AttnPoolCache};
pub use dpcnn::{dpcnn_block, DpcnnBlock};
pub use embedding::EmbeddingTable;
pub use head::{classify, ClsHead};
pub use rcnn::{max_pool, rcnn_context, rcnn_word_repr, RcnnBlock};
pub use transformer::{trm_block, TrmBlock, TrmCache};

/// Fixed-order access to the parameter tensors of a block or model.
///
/// `visit` and `visit_mut` must enumerate tensors in the same order; the
/// optimizer pairs parameters with gradients by position and checkpoints pair
/// them by name.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Same structure with every parameter set to zero; used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |t| t.fill(0.0));
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

pub(crate) fn expect_cols(x: &Tensor, cols: usize, context: &'static str) -> Result<usize> {
    match x.shape() {
        [t, c] if *c == cols => Ok(*t),
        other => Err(Error::shape(other, &[0, cols], context)),
    }
}

/// Affine map `y = x W + b` applied to each row of `x`; `W` is in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[input, output], input),
            bias: uniform_init(rng, &[output], input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let t = expect_cols(x, i, "linear input")?;
        let mut out = Vec::with_capacity(t * o);
        for _ in 0..t {
            out.extend_from_slice(self.bias.data());
        }
        gemm_nn(x.data(), self.weight.data(), &mut out, t, i, o);
        Tensor::matrix(t, o, out)
    }

    /// Returns `dL/dx`; accumulates `dL/dW`, `dL/db` into `grads`.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor, grads: &mut Linear) -> Tensor {
        let (i, o) = (self.input_dim(), self.output_dim());
        let t = x.rows();
        gemm_tn(x.data(), d_out.data(), grads.weight.data_mut(), t, i, o);
        let gb = grads.bias.data_mut();
        for r in 0..t {
            for (b, d) in gb.iter_mut().zip(d_out.row(r)) {
                *b += d;
            }
        }
        let mut dx = vec![0.0; t * i];
        gemm_nt(d_out.data(), self.weight.data(), &mut dx, t, o, i);
        Tensor::matrix(t, i, dx).expect("linear dx shape")
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut gain = Tensor::zeros(&[dim]);
        gain.fill(1.0);
        Self {
            gain,
            shift: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.gain.len();
        let t = expect_cols(x, d, "layer norm input")?;
        let mut normalized = Tensor::zeros(&[t, d]);
        let mut out = Tensor::zeros(&[t, d]);
        let mut inv_std = Vec::with_capacity(t);
        for r in 0..t {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let n = normalized.row_mut(r);
            for (nv, &v) in n.iter_mut().zip(row) {
                *nv = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..d {
                o[j] = normalized.data()[r * d + j] * self.gain.data()[j] + self.shift.data()[j];
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &LayerNormCache, d_out: &Tensor, grads: &mut LayerNorm) -> Tensor {
        let d = self.gain.len();
        let t = d_out.rows();
        let mut dx = Tensor::zeros(&[t, d]);
        let mut dn = vec![0.0; d];
        for r in 0..t {
            let n = cache.normalized.row(r);
            let g = d_out.row(r);
            for j in 0..d {
                grads.gain.data_mut()[j] += g[j] * n[j];
                grads.shift.data_mut()[j] += g[j];
                dn[j] = g[j] * self.gain.data()[j];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for j in 0..d {
                out[j] = is * (dn[j] - mean_dn - n[j] * mean_dn_n);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_GRAD_EPS};

    #[test]
    fn linear_and_layer_norm_gradients() {
        let mut r = rng(1);
        for _ in 0..20 {
            let lin = Linear::new(&mut r, 4, 3);
            let mut ln = LayerNorm::new(3);
            ln.gain = random(&mut r, &[3]);
            ln.shift = random(&mut r, &[3]);
            let x = random(&mut r, &[5, 4]);
            let probe = random(&mut r, &[5, 3]);
            let loss = |lin: &Linear, ln: &LayerNorm, x: &Tensor| {
                let (y, _) = ln.forward(&lin.forward(x).unwrap()).unwrap();
                y.dot(&probe).unwrap()
            };
            let h = lin.forward(&x).unwrap();
            let (_, cache) = ln.forward(&h).unwrap();
            let mut g_ln = ln.zeros_like();
            let dh = ln.backward(&cache, &probe, &mut g_ln);
            let mut g_lin = lin.zeros_like();
            let dx = lin.backward(&x, &dh, &mut g_lin);

            let rep = grad_check(|x| Ok(loss(&lin, &ln, x)), &x, &dx, DEFAULT_GRAD_EPS).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            let rep = check_params(&lin, &g_lin, |b| loss(b, &ln, &x));
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            let rep = check_params(&ln, &g_ln, |b| loss(&lin, b, &x));
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn named_and_mutable_orders_agree() {
        let mut lin = Linear::new(&mut rng(0), 2, 5);
        let names: Vec<Vec<usize>> = lin.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let muts: Vec<Vec<usize>> = lin.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(names, muts);
        assert_eq!(lin.named_params()[0].0, "weight");
        assert_eq!(lin.param_count(), 15);
    }
}
