//! Token + position + segment embeddings.

use rand::Rng;

use super::{join, uniform_init, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub token: Tensor,
    pub position: Tensor,
    pub segment: Tensor,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(rng: &mut R, vocab_size: usize, max_len: usize, dim: usize) -> Self {
        Self {
            token: uniform_init(rng, &[vocab_size, dim], dim),
            position: uniform_init(rng, &[max_len, dim], dim),
            segment: uniform_init(rng, &[2, dim], dim),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.position.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.token.shape()[1]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// `out[t] = token[tokens[t]] + position[t] + segment[segments[t]]`.
    pub fn embed(&self, tokens: &[usize], segments: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if tokens.len() != segments.len() {
            return Err(Error::shape(&[tokens.len()], &[segments.len()], "tokens vs segments"));
        }
        if tokens.len() > self.max_len() {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds position table of {}",
                tokens.len(),
                self.max_len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s > 1) {
            return Err(Error::invalid(format!("segment id {bad} must be 0 or 1")));
        }
        let d = self.dim();
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        for (t, (&tok, &seg)) in tokens.iter().zip(segments).enumerate() {
            let row = out.row_mut(t);
            let (a, b, c) = (self.token.row(tok), self.position.row(t), self.segment.row(seg));
            for j in 0..d {
                row[j] = a[j] + b[j] + c[j];
            }
        }
        Ok(out)
    }

    /// Token embeddings only, one row per token.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            data.extend_from_slice(self.token.row(tok));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    pub fn backward_embed(&self, tokens: &[usize], segments: &[usize], d_out: &Tensor, grads: &mut Self) {
        for (t, (&tok, &seg)) in tokens.iter().zip(segments).enumerate() {
            let g = d_out.row(t);
            for (dst, v) in grads.token.row_mut(tok).iter_mut().zip(g) {
                *dst += v;
            }
            for (dst, v) in grads.position.row_mut(t).iter_mut().zip(g) {
                *dst += v;
            }
            for (dst, v) in grads.segment.row_mut(seg).iter_mut().zip(g) {
                *dst += v;
            }
        }
    }

    pub fn backward_lookup(&self, tokens: &[usize], d_out: &Tensor, grads: &mut Self) {
        for (t, &tok) in tokens.iter().enumerate() {
            for (dst, v) in grads.token.row_mut(tok).iter_mut().zip(d_out.row(t)) {
                *dst += v;
            }
        }
    }
}

impl Parameterized for EmbeddingTable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "token"), &self.token);
        f(join(prefix, "position"), &self.position);
        f(join(prefix, "segment"), &self.segment);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.token);
        f(&mut self.position);
        f(&mut self.segment);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;

    #[test]
    fn zero_tables_give_zero_output() {
        let table = EmbeddingTable::new(&mut rng(0), 6, 4, 3).zeros_like();
        let out = table.embed(&[1, 2, 5], &[0, 0, 1]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_position_is_three_way_sum() {
        let table = EmbeddingTable::new(&mut rng(1), 6, 4, 3);
        let out = table.embed(&[4], &[0]).unwrap();
        for j in 0..3 {
            let want = table.token.row(4)[j] + table.position.row(0)[j] + table.segment.row(0)[j];
            assert_eq!(out.data()[j], want);
        }
    }

    #[test]
    fn matches_naive_recomputation_and_is_additive() {
        let table = EmbeddingTable::new(&mut rng(2), 10, 8, 4);
        let tokens = [3, 9, 0, 3, 7];
        let segments = [0, 0, 1, 1, 0];
        let out = table.embed(&tokens, &segments).unwrap();
        for t in 0..5 {
            for j in 0..4 {
                let want = table.token.data()[tokens[t] * 4 + j]
                    + table.position.data()[t * 4 + j]
                    + table.segment.data()[segments[t] * 4 + j];
                assert_eq!(out.data()[t * 4 + j], want);
            }
        }
        let mut doubled = table.clone();
        doubled.visit_mut(&mut |t| t.scale(2.0));
        let out2 = doubled.embed(&tokens, &segments).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn range_errors() {
        let table = EmbeddingTable::new(&mut rng(3), 5, 3, 2);
        assert!(table.embed(&[5], &[0]).is_err());
        assert!(table.embed(&[0, 1, 2, 3], &[0, 0, 0, 0]).is_err());
        assert!(table.embed(&[0], &[2]).is_err());
        assert!(table.embed(&[0, 1], &[0]).is_err());
        assert!(table.lookup(&[]).is_err());
    }

    #[test]
    fn embed_gradient() {
        let mut r = rng(4);
        let table = EmbeddingTable::new(&mut r, 6, 5, 3);
        let (tokens, segments) = ([1, 4, 1, 0], [0, 1, 0, 0]);
        let probe = random(&mut r, &[4, 3]);
        let mut g = table.zeros_like();
        table.backward_embed(&tokens, &segments, &probe, &mut g);
        let rep = check_params(&table, &g, |t| t.embed(&tokens, &segments).unwrap().dot(&probe).unwrap());
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
