//! Pre-activation shortcut block applied per position: `z + W σ(z) + b`.

use rand::Rng;

use super::{expect_cols, join, uniform_init, Parameterized};
use crate::error::Result;
use crate::numerics::{dot, sigmoid, Tensor};

/// `weight` is dim×dim and multiplies `σ(z)` from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct DpcnnBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DpcnnBlock {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            weight: uniform_init(rng, &[dim, dim], dim),
            bias: uniform_init(rng, &[dim], dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Returns the output and `σ(z)` for the backward pass.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.dim();
        let t = expect_cols(z, d, "dpcnn input")?;
        let act = z.map(sigmoid);
        let mut out = z.clone();
        for i in 0..t {
            let s = act.row(i);
            let row = out.row_mut(i);
            for a in 0..d {
                row[a] += dot(self.weight.row(a), s) + self.bias.data()[a];
            }
        }
        Ok((out, act))
    }

    /// Returns `dL/dz`.
    pub fn backward(&self, act: &Tensor, d_out: &Tensor, grads: &mut DpcnnBlock) -> Tensor {
        let d = self.dim();
        let mut dz = d_out.clone();
        let mut d_act = vec![0.0; d];
        for i in 0..act.rows() {
            let g = d_out.row(i);
            let s = act.row(i);
            d_act.fill(0.0);
            for a in 0..d {
                grads.bias.data_mut()[a] += g[a];
                for (gw, &sv) in grads.weight.row_mut(a).iter_mut().zip(s) {
                    *gw += g[a] * sv;
                }
                for (da, &w) in d_act.iter_mut().zip(self.weight.row(a)) {
                    *da += g[a] * w;
                }
            }
            for ((o, &da), &sv) in dz.row_mut(i).iter_mut().zip(&d_act).zip(s) {
                *o += da * sv * (1.0 - sv);
            }
        }
        dz
    }
}

pub fn dpcnn_block(z: &Tensor, block: &DpcnnBlock) -> Result<Tensor> {
    Ok(block.forward(z)?.0)
}

impl Parameterized for DpcnnBlock {
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
    use crate::numerics::{grad_check, DEFAULT_GRAD_EPS};

    #[test]
    fn zero_block_is_identity() {
        let mut r = rng(0);
        let block = DpcnnBlock::new(&mut r, 4).zeros_like();
        let z = random(&mut r, &[6, 4]);
        assert_eq!(dpcnn_block(&z, &block).unwrap(), z);
    }

    #[test]
    fn zero_input_gives_half_row_sums() {
        let mut r = rng(1);
        let mut block = DpcnnBlock::new(&mut r, 3);
        block.bias.fill(0.0);
        let out = dpcnn_block(&Tensor::zeros(&[2, 3]), &block).unwrap();
        for i in 0..2 {
            for a in 0..3 {
                let want = 0.5 * block.weight.row(a).iter().sum::<f64>();
                assert!((out.row(i)[a] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stacked_blocks_pass_grad_check() {
        let mut r = rng(2);
        for _ in 0..20 {
            let b1 = DpcnnBlock::new(&mut r, 4);
            let b2 = DpcnnBlock::new(&mut r, 4);
            let z = random(&mut r, &[3, 4]);
            let probe = random(&mut r, &[3, 4]);
            let loss = |b1: &DpcnnBlock, b2: &DpcnnBlock, z: &Tensor| {
                dpcnn_block(&dpcnn_block(z, b1).unwrap(), b2).unwrap().dot(&probe).unwrap()
            };
            let (y1, s1) = b1.forward(&z).unwrap();
            let (_, s2) = b2.forward(&y1).unwrap();
            let (mut g1, mut g2) = (b1.zeros_like(), b2.zeros_like());
            let dy1 = b2.backward(&s2, &probe, &mut g2);
            let dz = b1.backward(&s1, &dy1, &mut g1);
            let rep = grad_check(|x| Ok(loss(&b1, &b2, x)), &z, &dz, DEFAULT_GRAD_EPS).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
            assert!(check_params(&b1, &g1, |b| loss(b, &b2, &z)).max_rel_err < 1e-4);
            assert!(check_params(&b2, &g2, |b| loss(&b1, b, &z)).max_rel_err < 1e-4);
        }
    }

    #[test]
    fn shape_mismatch() {
        let block = DpcnnBlock::new(&mut rng(3), 4);
        assert!(dpcnn_block(&Tensor::zeros(&[2, 3]), &block).is_err());
    }
}
