//! Post-norm transformer encoder block:
//! multi-head self-attention, residual, layer norm, ReLU feed-forward,
//! residual, layer norm. No dropout.

use rand::Rng;

use super::{expect_cols, join, LayerNorm, LayerNormCache, Linear, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_nt, gemm_tn, softmax_into, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrmBlock {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TrmCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// One T×T row-stochastic matrix per head.
    probs: Vec<Vec<f64>>,
    context: Tensor,
    norm1: LayerNormCache,
    y1: Tensor,
    hidden: Tensor,
    norm2: LayerNormCache,
}

impl TrmCache {
    /// Attention weights of `head` as a T×T row-major matrix.
    pub fn attention_weights(&self, head: usize) -> &[f64] {
        &self.probs[head]
    }

    /// Concatenated per-head attention outputs, before the output projection.
    pub fn attention_context(&self) -> &Tensor {
        &self.context
    }

    pub fn values(&self) -> &Tensor {
        &self.v
    }
}

fn head_slice(m: &Tensor, head: usize, dh: usize) -> Vec<f64> {
    let t = m.rows();
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&m.row(r)[head * dh..(head + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Tensor, src: &[f64], head: usize, dh: usize) {
    for r in 0..dst.rows() {
        let row = &mut dst.row_mut(r)[head * dh..(head + 1) * dh];
        for (d, s) in row.iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *d += s;
        }
    }
}

impl TrmBlock {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
            norm1: LayerNorm::new(dim),
            ff_in: Linear::new(rng, dim, ffn_dim),
            ff_out: Linear::new(rng, ffn_dim, dim),
            norm2: LayerNorm::new(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TrmCache)> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid(format!("model dim {d} is not divisible by {} heads", self.heads)));
        }
        let t = expect_cols(x, d, "transformer input")?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let mut context = Tensor::zeros(&[t, d]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (head_slice(&q, h, dh), head_slice(&k, h, dh), head_slice(&v, h, dh));
            let mut scores = vec![0.0; t * t];
            gemm_nt(&qh, &kh, &mut scores, t, dh, t);
            let mut a = vec![0.0; t * t];
            for r in 0..t {
                let row = &mut scores[r * t..(r + 1) * t];
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_into(row, &mut a[r * t..(r + 1) * t]);
            }
            let mut oh = vec![0.0; t * dh];
            gemm_nn(&a, &vh, &mut oh, t, t, dh);
            add_head_slice(&mut context, &oh, h, dh);
            probs.push(a);
        }

        let attn = self.output.forward(&context)?;
        let mut r1 = x.clone();
        r1.add_assign(&attn)?;
        let (y1, norm1) = self.norm1.forward(&r1)?;
        let hidden = self.ff_in.forward(&y1)?.map(|z| z.max(0.0));
        let mut r2 = self.ff_out.forward(&hidden)?;
        r2.add_assign(&y1)?;
        let (out, norm2) = self.norm2.forward(&r2)?;
        Ok((
            out,
            TrmCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                context,
                norm1,
                y1,
                hidden,
                norm2,
            },
        ))
    }

    pub fn backward(&self, cache: &TrmCache, d_out: &Tensor, grads: &mut TrmBlock) -> Tensor {
        let t = cache.x.rows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // out = LN2(y1 + FFN(y1))
        let d_r2 = self.norm2.backward(&cache.norm2, d_out, &mut grads.norm2);
        let mut d_hidden = self.ff_out.backward(&cache.hidden, &d_r2, &mut grads.ff_out);
        for (g, &h) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_y1 = self.ff_in.backward(&cache.y1, &d_hidden, &mut grads.ff_in);
        d_y1.add_assign(&d_r2).expect("same shape");

        // y1 = LN1(x + Attn(x))
        let d_r1 = self.norm1.backward(&cache.norm1, &d_y1, &mut grads.norm1);
        let d_context = self.output.backward(&cache.context, &d_r1, &mut grads.output);

        let d = self.dim();
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        for h in 0..self.heads {
            let a = &cache.probs[h];
            let (qh, kh, vh) = (
                head_slice(&cache.q, h, dh),
                head_slice(&cache.k, h, dh),
                head_slice(&cache.v, h, dh),
            );
            let doh = head_slice(&d_context, h, dh);
            // O = A V
            let mut da = vec![0.0; t * t];
            gemm_nt(&doh, &vh, &mut da, t, dh, t);
            let mut dvh = vec![0.0; t * dh];
            gemm_tn(a, &doh, &mut dvh, t, t, dh);
            // softmax rows, then the 1/sqrt(dh) scale
            let mut ds = vec![0.0; t * t];
            for r in 0..t {
                let ar = &a[r * t..(r + 1) * t];
                let dar = &da[r * t..(r + 1) * t];
                let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for c in 0..t {
                    ds[r * t + c] = ar[c] * (dar[c] - inner) * scale;
                }
            }
            let mut dqh = vec![0.0; t * dh];
            gemm_nn(&ds, &kh, &mut dqh, t, t, dh);
            let mut dkh = vec![0.0; t * dh];
            gemm_tn(&ds, &qh, &mut dkh, t, t, dh);
            add_head_slice(&mut dq, &dqh, h, dh);
            add_head_slice(&mut dk, &dkh, h, dh);
            add_head_slice(&mut dv, &dvh, h, dh);
        }

        let mut dx = d_r1;
        for (lin, g, dproj) in [
            (&self.query, &mut grads.query, &dq),
            (&self.key, &mut grads.key, &dk),
            (&self.value, &mut grads.value, &dv),
        ] {
            let part = lin.backward(&cache.x, dproj, g);
            dx.add_assign(&part).expect("same shape");
        }
        dx
    }
}

/// Runs one encoder block in evaluation mode.
pub fn trm_block(x: &Tensor, block: &TrmBlock) -> Result<Tensor> {
    Ok(block.forward(x)?.0)
}

impl Parameterized for TrmBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
        self.norm1.visit_mut(f);
        self.ff_in.visit_mut(f);
        self.ff_out.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}
