//! Recurrent left/right contexts, word representations and max pooling.
//!
//! The left context of position `i` is `tanh(W_l c_l(i-1) + W_sl e(i-1))`
//! and the right context mirrors it from the end of the sequence. Before
//! the first (after the last) position the recurrences start from learned
//! initial contexts and the embedding of the boundary token.

use rand::Rng;

use super::{expect_cols, join, uniform_init, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RcnnBlock {
    /// context_dim × context_dim
    pub w_left: Tensor,
    pub w_right: Tensor,
    /// context_dim × embed_dim
    pub w_side_left: Tensor,
    pub w_side_right: Tensor,
    pub init_left: Tensor,
    pub init_right: Tensor,
}

/// Contexts for every position, each `T × context_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contexts {
    pub left: Tensor,
    pub right: Tensor,
}

fn matvec_into(w: &Tensor, x: &[f64], out: &mut [f64]) {
    for (a, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(a), x);
    }
}

/// `grad_w += d ⊗ x`, `grad_x += Wᵀ d`.
fn matvec_backward(w: &Tensor, x: &[f64], d: &[f64], grad_w: &mut Tensor, grad_x: &mut [f64]) {
    for (a, &da) in d.iter().enumerate() {
        if da == 0.0 {
            continue;
        }
        for (g, &xv) in grad_w.row_mut(a).iter_mut().zip(x) {
            *g += da * xv;
        }
        for (gx, &wv) in grad_x.iter_mut().zip(w.row(a)) {
            *gx += da * wv;
        }
    }
}

impl RcnnBlock {
    pub fn new<R: Rng>(rng: &mut R, embed_dim: usize, context_dim: usize) -> Self {
        Self {
            w_left: uniform_init(rng, &[context_dim, context_dim], context_dim),
            w_right: uniform_init(rng, &[context_dim, context_dim], context_dim),
            w_side_left: uniform_init(rng, &[context_dim, embed_dim], embed_dim),
            w_side_right: uniform_init(rng, &[context_dim, embed_dim], embed_dim),
            init_left: uniform_init(rng, &[context_dim], context_dim),
            init_right: uniform_init(rng, &[context_dim], context_dim),
        }
    }

    pub fn context_dim(&self) -> usize {
        self.w_left.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w_side_left.shape()[1]
    }

    pub fn forward(&self, embeddings: &Tensor, boundary: &[f64]) -> Result<Contexts> {
        let e = self.embed_dim();
        let c = self.context_dim();
        let t = expect_cols(embeddings, e, "rcnn embeddings")?;
        if boundary.len() != e {
            return Err(Error::shape(&[e], &[boundary.len()], "rcnn boundary embedding"));
        }
        let mut left = Tensor::zeros(&[t, c]);
        let mut right = Tensor::zeros(&[t, c]);
        let mut pre = vec![0.0; c];
        for i in 0..t {
            pre.fill(0.0);
            let (prev_ctx, prev_emb) = if i == 0 {
                (self.init_left.data().to_vec(), boundary)
            } else {
                (left.row(i - 1).to_vec(), embeddings.row(i - 1))
            };
            matvec_into(&self.w_left, &prev_ctx, &mut pre);
            matvec_into(&self.w_side_left, prev_emb, &mut pre);
            for (o, p) in left.row_mut(i).iter_mut().zip(&pre) {
                *o = p.tanh();
            }
        }
        for i in (0..t).rev() {
            pre.fill(0.0);
            let (next_ctx, next_emb) = if i + 1 == t {
                (self.init_right.data().to_vec(), boundary)
            } else {
                (right.row(i + 1).to_vec(), embeddings.row(i + 1))
            };
            matvec_into(&self.w_right, &next_ctx, &mut pre);
            matvec_into(&self.w_side_right, next_emb, &mut pre);
            for (o, p) in right.row_mut(i).iter_mut().zip(&pre) {
                *o = p.tanh();
            }
        }
        Ok(Contexts { left, right })
    }

    /// Backpropagation through both recurrences. Returns `(dL/de, dL/dboundary)`.
    pub fn backward(
        &self,
        embeddings: &Tensor,
        boundary: &[f64],
        contexts: &Contexts,
        d_left: &Tensor,
        d_right: &Tensor,
        grads: &mut RcnnBlock,
    ) -> (Tensor, Vec<f64>) {
        let t = embeddings.rows();
        let c = self.context_dim();
        let mut d_emb = Tensor::zeros(embeddings.shape());
        let mut d_boundary = vec![0.0; boundary.len()];

        // carry[i] accumulates dL/dc(i) from the recurrence
        let mut carry = d_left.clone();
        let mut d_pre = vec![0.0; c];
        for i in (0..t).rev() {
            for ((dp, &g), &y) in d_pre.iter_mut().zip(carry.row(i)).zip(contexts.left.row(i)) {
                *dp = g * (1.0 - y * y);
            }
            if i == 0 {
                let mut d_init = vec![0.0; c];
                matvec_backward(&self.w_left, self.init_left.data(), &d_pre, &mut grads.w_left, &mut d_init);
                for (g, v) in grads.init_left.data_mut().iter_mut().zip(&d_init) {
                    *g += v;
                }
                matvec_backward(&self.w_side_left, boundary, &d_pre, &mut grads.w_side_left, &mut d_boundary);
            } else {
                let prev = contexts.left.row(i - 1).to_vec();
                let mut d_prev = vec![0.0; c];
                matvec_backward(&self.w_left, &prev, &d_pre, &mut grads.w_left, &mut d_prev);
                for (g, v) in carry.row_mut(i - 1).iter_mut().zip(&d_prev) {
                    *g += v;
                }
                matvec_backward(
                    &self.w_side_left,
                    embeddings.row(i - 1),
                    &d_pre,
                    &mut grads.w_side_left,
                    d_emb.row_mut(i - 1),
                );
            }
        }

        let mut carry = d_right.clone();
        for i in 0..t {
            for ((dp, &g), &y) in d_pre.iter_mut().zip(carry.row(i)).zip(contexts.right.row(i)) {
                *dp = g * (1.0 - y * y);
            }
            if i + 1 == t {
                let mut d_init = vec![0.0; c];
                matvec_backward(&self.w_right, self.init_right.data(), &d_pre, &mut grads.w_right, &mut d_init);
                for (g, v) in grads.init_right.data_mut().iter_mut().zip(&d_init) {
                    *g += v;
                }
                matvec_backward(&self.w_side_right, boundary, &d_pre, &mut grads.w_side_right, &mut d_boundary);
            } else {
                let next = contexts.right.row(i + 1).to_vec();
                let mut d_next = vec![0.0; c];
                matvec_backward(&self.w_right, &next, &d_pre, &mut grads.w_right, &mut d_next);
                for (g, v) in carry.row_mut(i + 1).iter_mut().zip(&d_next) {
                    *g += v;
                }
                matvec_backward(
                    &self.w_side_right,
                    embeddings.row(i + 1),
                    &d_pre,
                    &mut grads.w_side_right,
                    d_emb.row_mut(i + 1),
                );
            }
        }
        (d_emb, d_boundary)
    }
}

impl Parameterized for RcnnBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_left"), &self.w_left);
        f(join(prefix, "w_right"), &self.w_right);
        f(join(prefix, "w_side_left"), &self.w_side_left);
        f(join(prefix, "w_side_right"), &self.w_side_right);
        f(join(prefix, "init_left"), &self.init_left);
        f(join(prefix, "init_right"), &self.init_right);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.w_left);
        f(&mut self.w_right);
        f(&mut self.w_side_left);
        f(&mut self.w_side_right);
        f(&mut self.init_left);
        f(&mut self.init_right);
    }
}

/// Left and right contexts for every position.
pub fn rcnn_context(embeddings: &Tensor, boundary: &[f64], block: &RcnnBlock) -> Result<(Tensor, Tensor)> {
    let ctx = block.forward(embeddings, boundary)?;
    Ok((ctx.left, ctx.right))
}

/// Row-wise concatenation `[c_l; e; c_r]`.
pub fn rcnn_word_repr(left: &Tensor, embeddings: &Tensor, right: &Tensor) -> Result<Tensor> {
    let t = left.rows();
    if embeddings.rows() != t || right.rows() != t {
        return Err(Error::shape(left.shape(), embeddings.shape(), "word representation rows"));
    }
    let width = left.cols() + embeddings.cols() + right.cols();
    let mut data = Vec::with_capacity(t * width);
    for i in 0..t {
        data.extend_from_slice(left.row(i));
        data.extend_from_slice(embeddings.row(i));
        data.extend_from_slice(right.row(i));
    }
    Tensor::matrix(t, width, data)
}

/// Splits a gradient on `[c_l; e; c_r]` back into its three parts.
pub fn split_word_repr(d: &Tensor, left_dim: usize, embed_dim: usize) -> (Tensor, Tensor, Tensor) {
    let t = d.rows();
    let right_dim = d.cols() - left_dim - embed_dim;
    let (mut l, mut e, mut r) = (
        Vec::with_capacity(t * left_dim),
        Vec::with_capacity(t * embed_dim),
        Vec::with_capacity(t * right_dim),
    );
    for i in 0..t {
        let row = d.row(i);
        l.extend_from_slice(&row[..left_dim]);
        e.extend_from_slice(&row[left_dim..left_dim + embed_dim]);
        r.extend_from_slice(&row[left_dim + embed_dim..]);
    }
    (
        Tensor::matrix(t, left_dim, l).expect("left split"),
        Tensor::matrix(t, embed_dim, e).expect("embedding split"),
        Tensor::matrix(t, right_dim, r).expect("right split"),
    )
}

/// Elementwise maximum over positions; also returns the winning row per column
/// (first occurrence on ties).
pub fn max_pool(x: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let cols = x.cols();
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0; cols];
    for i in 1..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    (best, arg)
}

pub fn max_pool_backward(rows: usize, argmax: &[usize], d_pooled: &[f64]) -> Tensor {
    let cols = argmax.len();
    let mut d = Tensor::zeros(&[rows, cols]);
    for (j, (&i, &g)) in argmax.iter().zip(d_pooled).enumerate() {
        d.data_mut()[i * cols + j] += g;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_GRAD_EPS};

    /// Straight transcription of the two recurrences, one scalar at a time.
    fn unrolled(block: &RcnnBlock, e: &Tensor, boundary: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (t, c, d) = (e.rows(), block.context_dim(), block.embed_dim());
        let step = |w: &Tensor, ws: &Tensor, ctx: &[f64], emb: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|a| {
                    let mut s = 0.0;
                    for b in 0..c {
                        s += w.data()[a * c + b] * ctx[b];
                    }
                    let mut u = 0.0;
                    for b in 0..d {
                        u += ws.data()[a * d + b] * emb[b];
                    }
                    (s + u).tanh()
                })
                .collect()
        };
        let mut left: Vec<Vec<f64>> = Vec::new();
        for i in 0..t {
            let v = if i == 0 {
                step(&block.w_left, &block.w_side_left, block.init_left.data(), boundary)
            } else {
                step(&block.w_left, &block.w_side_left, &left[i - 1], e.row(i - 1))
            };
            left.push(v);
        }
        let mut right = vec![Vec::new(); t];
        for i in (0..t).rev() {
            right[i] = if i + 1 == t {
                step(&block.w_right, &block.w_side_right, block.init_right.data(), boundary)
            } else {
                step(&block.w_right, &block.w_side_right, &right[i + 1], e.row(i + 1))
            };
        }
        (left, right)
    }

    #[test]
    fn zero_parameters_give_zero_contexts() {
        let block = RcnnBlock::new(&mut rng(0), 3, 2).zeros_like();
        let e = random(&mut rng(1), &[4, 3]);
        let (l, r) = rcnn_context(&e, &[0.3, 0.1, -0.2], &block).unwrap();
        assert!(l.data().iter().chain(r.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_uses_the_boundary() {
        let mut r = rng(2);
        let block = RcnnBlock::new(&mut r, 3, 2);
        let e = random(&mut r, &[1, 3]);
        let boundary = [0.5, -0.5, 0.25];
        let (l, _) = rcnn_context(&e, &boundary, &block).unwrap();
        for a in 0..2 {
            let want = (dot(block.w_left.row(a), block.init_left.data()) + dot(block.w_side_left.row(a), &boundary)).tanh();
            assert!((l.data()[a] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_unrolled_oracle() {
        let mut r = rng(3);
        for t in [1, 3, 7] {
            let block = RcnnBlock::new(&mut r, 4, 3);
            let e = random(&mut r, &[t, 4]);
            let boundary = random(&mut r, &[4]);
            let (l, rt) = rcnn_context(&e, boundary.data(), &block).unwrap();
            let (ol, or) = unrolled(&block, &e, boundary.data());
            for i in 0..t {
                for a in 0..3 {
                    assert!((l.row(i)[a] - ol[i][a]).abs() < 1e-12);
                    assert!((rt.row(i)[a] - or[i][a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn word_repr_order_and_max_pool() {
        let mut r = rng(4);
        let l = random(&mut r, &[2, 2]);
        let e = random(&mut r, &[2, 3]);
        let rt = random(&mut r, &[2, 2]);
        let x = rcnn_word_repr(&l, &e, &rt).unwrap();
        assert_eq!(x.shape(), &[2, 7]);
        assert_eq!(&x.row(1)[..2], l.row(1));
        assert_eq!(&x.row(1)[2..5], e.row(1));
        assert_eq!(&x.row(1)[5..], rt.row(1));
        assert!(rcnn_word_repr(&l, &random(&mut r, &[3, 3]), &rt).is_err());

        let single = rcnn_word_repr(&l.clone().reshape(vec![2, 2]).unwrap(), &e, &rt).unwrap();
        assert_eq!(single.rows(), 2);

        let onehots = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (pooled, arg) = max_pool(&onehots);
        let naive: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| onehots.row(i)[j]).fold(f64::MIN, f64::max))
            .collect();
        assert_eq!(pooled, naive);
        assert_eq!(arg, vec![1, 0, 2]);
    }

    #[test]
    fn context_gradients_pass_grad_check() {
        let mut r = rng(5);
        for t in [1, 2, 4] {
            for _ in 0..7 {
                let block = RcnnBlock::new(&mut r, 3, 2);
                let e = random(&mut r, &[t, 3]);
                let boundary = random(&mut r, &[3]);
                let pl = random(&mut r, &[t, 2]);
                let pr = random(&mut r, &[t, 2]);
                let loss = |b: &RcnnBlock, e: &Tensor, bd: &[f64]| {
                    let ctx = b.forward(e, bd).unwrap();
                    ctx.left.dot(&pl).unwrap() + ctx.right.dot(&pr).unwrap()
                };
                let ctx = block.forward(&e, boundary.data()).unwrap();
                let mut g = block.zeros_like();
                let (de, db) = block.backward(&e, boundary.data(), &ctx, &pl, &pr, &mut g);
                let rep = grad_check(|x| Ok(loss(&block, x, boundary.data())), &e, &de, DEFAULT_GRAD_EPS).unwrap();
                assert!(rep.max_rel_err < 1e-4, "{rep:?}");
                let db = Tensor::from_vec(db).unwrap();
                let rep = grad_check(|x| Ok(loss(&block, &e, x.data())), &boundary, &db, DEFAULT_GRAD_EPS).unwrap();
                assert!(rep.max_rel_err < 1e-4, "{rep:?}");
                let rep = check_params(&block, &g, |b| loss(b, &e, boundary.data()));
                assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            }
        }
    }
}
