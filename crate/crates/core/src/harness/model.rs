//! The four classifiers: token ids in, class logits out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BOUNDARY;
use crate::encoders::attention::AttnPoolCache;
use crate::encoders::rcnn::{max_pool_backward, split_word_repr, Contexts};
use crate::encoders::{
    join, max_pool, rcnn_word_repr, uniform_init, AttnPool, ClsHead, DpcnnBlock, EmbeddingTable, Linear,
    Parameterized, RcnnBlock, TrmBlock, TrmCache,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Rcnn,
    AttnBirnn,
    Dpcnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Transformer, ModelKind::Rcnn, ModelKind::AttnBirnn, ModelKind::Dpcnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Rcnn => "rcnn",
            ModelKind::AttnBirnn => "attn_birnn",
            ModelKind::Dpcnn => "dpcnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}`")))
    }
}

/// Layer sizes. `dim` is the token embedding width for every model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Recurrent context width (rcnn, attn_birnn).
    pub context_dim: usize,
    /// Width of the rcnn projection before pooling.
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 2,
            ffn_dim: 128,
            layers: 2,
            context_dim: 32,
            hidden_dim: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let named = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("layers", self.layers),
            ("context_dim", self.context_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model dimension `{name}` must be positive")));
        }
        if kind == ModelKind::Transformer && self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Plain token lookup table for the models without position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub table: Tensor,
}

impl TokenEmbedding {
    fn new<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Self {
        Self {
            table: uniform_init(rng, &[vocab, dim], dim),
        }
    }

    fn lookup(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.table.cols();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.table.rows() {
                return Err(Error::invalid(format!("token id {t} out of range for vocabulary of {}", self.table.rows())));
            }
            data.extend_from_slice(self.table.row(t));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    fn scatter(&self, tokens: &[usize], d: &Tensor, grads: &mut TokenEmbedding) {
        for (i, &t) in tokens.iter().enumerate() {
            for (g, v) in grads.table.row_mut(t).iter_mut().zip(d.row(i)) {
                *g += v;
            }
        }
    }
}

impl Parameterized for TokenEmbedding {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "table"), &self.table);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.table);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub embed: EmbeddingTable,
    pub blocks: Vec<TrmBlock>,
    pub head: ClsHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcnnModel {
    pub embed: TokenEmbedding,
    pub rcnn: RcnnBlock,
    pub proj: Linear,
    pub head: ClsHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBirnnModel {
    pub embed: TokenEmbedding,
    pub rnn: RcnnBlock,
    pub attn: AttnPool,
    pub head: ClsHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpcnnModel {
    pub embed: TokenEmbedding,
    pub blocks: Vec<DpcnnBlock>,
    pub head: ClsHead,
}

/// Number of stacked shortcut blocks in the dpcnn model.
pub const DPCNN_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Transformer(TransformerModel),
    Rcnn(RcnnModel),
    AttnBirnn(AttnBirnnModel),
    Dpcnn(DpcnnModel),
}

/// Forward intermediates needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub enum ModelCache {
    Transformer {
        caches: Vec<TrmCache>,
        features: Vec<f64>,
    },
    Rcnn {
        emb: Tensor,
        ctx: Contexts,
        repr: Tensor,
        hidden: Tensor,
        argmax: Vec<usize>,
        pooled: Vec<f64>,
    },
    AttnBirnn {
        emb: Tensor,
        ctx: Contexts,
        repr: Tensor,
        attn: AttnPoolCache,
        pooled: Vec<f64>,
    },
    Dpcnn {
        acts: Vec<Tensor>,
        argmax: Vec<usize>,
        pooled: Vec<f64>,
    },
}

impl Model {
    pub fn new<R: Rng>(
        rng: &mut R,
        kind: ModelKind,
        dims: &ModelDims,
        vocab_size: usize,
        max_len: usize,
        classes: usize,
    ) -> Result<Self> {
        dims.validate(kind)?;
        if vocab_size <= BOUNDARY {
            return Err(Error::invalid("vocabulary is missing reserved tokens"));
        }
        let d = dims.dim;
        let c = dims.context_dim;
        Ok(match kind {
            ModelKind::Transformer => {
                let embed = EmbeddingTable::new(rng, vocab_size, max_len, d);
                let blocks = (0..dims.layers)
                    .map(|_| TrmBlock::new(rng, d, dims.heads, dims.ffn_dim))
                    .collect::<Result<_>>()?;
                let head = ClsHead::new(rng, d, classes);
                Model::Transformer(TransformerModel { embed, blocks, head })
            }
            ModelKind::Rcnn => Model::Rcnn(RcnnModel {
                embed: TokenEmbedding::new(rng, vocab_size, d),
                rcnn: RcnnBlock::new(rng, d, c),
                proj: Linear::new(rng, 2 * c + d, dims.hidden_dim),
                head: ClsHead::new(rng, dims.hidden_dim, classes),
            }),
            ModelKind::AttnBirnn => Model::AttnBirnn(AttnBirnnModel {
                embed: TokenEmbedding::new(rng, vocab_size, d),
                rnn: RcnnBlock::new(rng, d, c),
                attn: AttnPool::new(rng, 2 * c + d),
                head: ClsHead::new(rng, 2 * c + d, classes),
            }),
            ModelKind::Dpcnn => Model::Dpcnn(DpcnnModel {
                embed: TokenEmbedding::new(rng, vocab_size, d),
                blocks: (0..DPCNN_BLOCKS).map(|_| DpcnnBlock::new(rng, d)).collect(),
                head: ClsHead::new(rng, d, classes),
            }),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Transformer(_) => ModelKind::Transformer,
            Model::Rcnn(_) => ModelKind::Rcnn,
            Model::AttnBirnn(_) => ModelKind::AttnBirnn,
            Model::Dpcnn(_) => ModelKind::Dpcnn,
        }
    }

    pub fn classes(&self) -> usize {
        self.head().classes()
    }

    pub fn head(&self) -> &ClsHead {
        match self {
            Model::Transformer(m) => &m.head,
            Model::Rcnn(m) => &m.head,
            Model::AttnBirnn(m) => &m.head,
            Model::Dpcnn(m) => &m.head,
        }
    }

    pub fn head_mut(&mut self) -> &mut ClsHead {
        match self {
            Model::Transformer(m) => &mut m.head,
            Model::Rcnn(m) => &mut m.head,
            Model::AttnBirnn(m) => &mut m.head,
            Model::Dpcnn(m) => &mut m.head,
        }
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.0)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<(Vec<f64>, ModelCache)> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        match self {
            Model::Transformer(m) => {
                let segments = vec![0; tokens.len()];
                let mut x = m.embed.embed(tokens, &segments)?;
                let mut caches = Vec::with_capacity(m.blocks.len());
                for block in &m.blocks {
                    let (y, cache) = block.forward(&x)?;
                    caches.push(cache);
                    x = y;
                }
                let features = x.row(0).to_vec();
                let logits = m.head.logits(&features)?;
                Ok((logits, ModelCache::Transformer { caches, features }))
            }
            Model::Rcnn(m) => {
                let emb = m.embed.lookup(tokens)?;
                let ctx = m.rcnn.forward(&emb, m.embed.table.row(BOUNDARY))?;
                let repr = rcnn_word_repr(&ctx.left, &emb, &ctx.right)?;
                let hidden = m.proj.forward(&repr)?.map(f64::tanh);
                let (pooled, argmax) = max_pool(&hidden);
                let logits = m.head.logits(&pooled)?;
                Ok((
                    logits,
                    ModelCache::Rcnn {
                        emb,
                        ctx,
                        repr,
                        hidden,
                        argmax,
                        pooled,
                    },
                ))
            }
            Model::AttnBirnn(m) => {
                let emb = m.embed.lookup(tokens)?;
                let ctx = m.rnn.forward(&emb, m.embed.table.row(BOUNDARY))?;
                let repr = rcnn_word_repr(&ctx.left, &emb, &ctx.right)?;
                let (pooled, attn) = m.attn.forward(&repr)?;
                let logits = m.head.logits(&pooled)?;
                Ok((
                    logits,
                    ModelCache::AttnBirnn {
                        emb,
                        ctx,
                        repr,
                        attn,
                        pooled,
                    },
                ))
            }
            Model::Dpcnn(m) => {
                let mut x = m.embed.lookup(tokens)?;
                let mut acts = Vec::with_capacity(m.blocks.len());
                for block in &m.blocks {
                    let (y, act) = block.forward(&x)?;
                    acts.push(act);
                    x = y;
                }
                let (pooled, argmax) = max_pool(&x);
                let logits = m.head.logits(&pooled)?;
                Ok((logits, ModelCache::Dpcnn { acts, argmax, pooled }))
            }
        }
    }

    /// Accumulates parameter gradients for one sequence into `grads`, which
    /// must have the same variant and shapes as `self`.
    pub fn backward(&self, tokens: &[usize], cache: &ModelCache, d_logits: &[f64], grads: &mut Model) -> Result<()> {
        let mismatch = || Error::invalid("gradient buffer or cache does not match the model");
        match (self, cache, grads) {
            (Model::Transformer(m), ModelCache::Transformer { caches, features }, Model::Transformer(g)) => {
                let d_features = m.head.backward(features, d_logits, &mut g.head);
                let t = tokens.len();
                let mut dx = Tensor::zeros(&[t, m.embed.dim()]);
                dx.row_mut(0).copy_from_slice(&d_features);
                for ((block, c), gb) in m.blocks.iter().zip(caches).zip(g.blocks.iter_mut()).rev() {
                    dx = block.backward(c, &dx, gb);
                }
                let segments = vec![0; t];
                m.embed.backward_embed(tokens, &segments, &dx, &mut g.embed);
            }
            (
                Model::Rcnn(m),
                ModelCache::Rcnn {
                    emb,
                    ctx,
                    repr,
                    hidden,
                    argmax,
                    pooled,
                },
                Model::Rcnn(g),
            ) => {
                let d_pooled = m.head.backward(pooled, d_logits, &mut g.head);
                let mut d_hidden = max_pool_backward(hidden.rows(), argmax, &d_pooled);
                for (dv, &h) in d_hidden.data_mut().iter_mut().zip(hidden.data()) {
                    *dv *= 1.0 - h * h;
                }
                let d_repr = m.proj.backward(repr, &d_hidden, &mut g.proj);
                let boundary = m.embed.table.row(BOUNDARY);
                rnn_backward(&m.rcnn, &m.embed, tokens, emb, boundary, ctx, &d_repr, &mut g.rcnn, &mut g.embed);
            }
            (
                Model::AttnBirnn(m),
                ModelCache::AttnBirnn {
                    emb,
                    ctx,
                    repr,
                    attn,
                    pooled,
                },
                Model::AttnBirnn(g),
            ) => {
                let d_pooled = m.head.backward(pooled, d_logits, &mut g.head);
                let d_repr = m.attn.backward(repr, attn, &d_pooled, &mut g.attn);
                let boundary = m.embed.table.row(BOUNDARY);
                rnn_backward(&m.rnn, &m.embed, tokens, emb, boundary, ctx, &d_repr, &mut g.rnn, &mut g.embed);
            }
            (Model::Dpcnn(m), ModelCache::Dpcnn { acts, argmax, pooled }, Model::Dpcnn(g)) => {
                let d_pooled = m.head.backward(pooled, d_logits, &mut g.head);
                let mut dx = max_pool_backward(tokens.len(), argmax, &d_pooled);
                for ((block, act), gb) in m.blocks.iter().zip(acts).zip(g.blocks.iter_mut()).rev() {
                    dx = block.backward(act, &dx, gb);
                }
                m.embed.scatter(tokens, &dx, &mut g.embed);
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn rnn_backward(
    block: &RcnnBlock,
    embed: &TokenEmbedding,
    tokens: &[usize],
    emb: &Tensor,
    boundary: &[f64],
    ctx: &Contexts,
    d_repr: &Tensor,
    g_block: &mut RcnnBlock,
    g_embed: &mut TokenEmbedding,
) {
    let c = block.context_dim();
    let (d_left, mut d_emb, d_right) = split_word_repr(d_repr, c, block.embed_dim());
    let (d_emb_ctx, d_boundary) = block.backward(emb, boundary, ctx, &d_left, &d_right, g_block);
    d_emb.add_assign(&d_emb_ctx).expect("same shape");
    embed.scatter(tokens, &d_emb, g_embed);
    for (g, v) in g_embed.table.row_mut(BOUNDARY).iter_mut().zip(&d_boundary) {
        *g += v;
    }
}

impl Parameterized for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Model::Transformer(m) => {
                m.embed.visit(&join(prefix, "embed"), f);
                for (i, b) in m.blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("blocks.{i}")), f);
                }
                m.head.visit(&join(prefix, "head"), f);
            }
            Model::Rcnn(m) => {
                m.embed.visit(&join(prefix, "embed"), f);
                m.rcnn.visit(&join(prefix, "rcnn"), f);
                m.proj.visit(&join(prefix, "proj"), f);
                m.head.visit(&join(prefix, "head"), f);
            }
            Model::AttnBirnn(m) => {
                m.embed.visit(&join(prefix, "embed"), f);
                m.rnn.visit(&join(prefix, "rnn"), f);
                m.attn.visit(&join(prefix, "attn"), f);
                m.head.visit(&join(prefix, "head"), f);
            }
            Model::Dpcnn(m) => {
                m.embed.visit(&join(prefix, "embed"), f);
                for (i, b) in m.blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("blocks.{i}")), f);
                }
                m.head.visit(&join(prefix, "head"), f);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        match self {
            Model::Transformer(m) => {
                m.embed.visit_mut(f);
                for b in &mut m.blocks {
                    b.visit_mut(f);
                }
                m.head.visit_mut(f);
            }
            Model::Rcnn(m) => {
                m.embed.visit_mut(f);
                m.rcnn.visit_mut(f);
                m.proj.visit_mut(f);
                m.head.visit_mut(f);
            }
            Model::AttnBirnn(m) => {
                m.embed.visit_mut(f);
                m.rnn.visit_mut(f);
                m.attn.visit_mut(f);
                m.head.visit_mut(f);
            }
            Model::Dpcnn(m) => {
                m.embed.visit_mut(f);
                for b in &mut m.blocks {
                    b.visit_mut(f);
                }
                m.head.visit_mut(f);
            }
        }
    }
}
