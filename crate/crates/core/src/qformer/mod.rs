//! Querying transformer: learnable queries and a text stream share every
//! self-attention layer; queries alone cross-attend to tile features in the
//! even-indexed blocks; each stream keeps its own feed-forward layers.

mod mask;

pub use mask::{build_attention_mask, MaskMode};

use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::CLS;
use crate::error::{Error, Result};
use crate::params::{Linear, Norm, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{DType, Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_queries: usize,
    pub image_feature_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_dim: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            n_blocks: 4,
            hidden_dim: 64,
            n_heads: 4,
            n_queries: 16,
            image_feature_dim: 64,
            vocab_size: 128,
            max_text_len: 64,
            ffn_dim: 256,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("n_queries", self.n_queries),
            ("image_feature_dim", self.image_feature_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn has_cross_attention(block: usize) -> bool {
        block.is_multiple_of(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Used by both streams.
    pub self_attn: AttnLayer,
    pub cross_attn: Option<AttnLayer>,
    pub ffn_query: Ffn,
    pub ffn_text: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub store: ParamStore,
    pub query_embeddings: ParamId,
    pub token_embeddings: ParamId,
    pub position_embeddings: ParamId,
    pub embedding_norm: Norm,
    pub blocks: Vec<Block>,
    pub text_head: Linear,
    pub itm_head: Linear,
    pub log_temperature: ParamId,
    pub stage2_projection: Option<Linear>,
}

impl AttnLayer {
    fn new(s: &mut ParamStore, name: &str, d: usize, kv_in: usize, dt: DType, rng: &mut Rng) -> Self {
        AttnLayer {
            q: Linear::new(s, &format!("{name}.q"), d, d, INIT_STD, dt, rng),
            k: Linear::new(s, &format!("{name}.k"), kv_in, d, INIT_STD, dt, rng),
            v: Linear::new(s, &format!("{name}.v"), kv_in, d, INIT_STD, dt, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, INIT_STD, dt, rng),
            norm: Norm::new(s, &format!("{name}.norm"), d, dt),
        }
    }

    /// `LN(x + O(attention(Q x, K src, V src)))`.
    pub fn apply(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        src: Var,
        mask: Option<&crate::tensor::AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let q = self.q.apply(g, vars, x)?;
        let k = self.k.apply(g, vars, src)?;
        let v = self.v.apply(g, vars, src)?;
        let a = g.attention(q, k, v, mask, heads)?;
        let o = self.o.apply(g, vars, a)?;
        let r = g.add(x, o)?;
        self.norm.apply(g, vars, r)
    }
}

impl Ffn {
    fn new(s: &mut ParamStore, name: &str, d: usize, hidden: usize, dt: DType, rng: &mut Rng) -> Self {
        Ffn {
            up: Linear::new(s, &format!("{name}.up"), d, hidden, INIT_STD, dt, rng),
            down: Linear::new(s, &format!("{name}.down"), hidden, d, INIT_STD, dt, rng),
            norm: Norm::new(s, &format!("{name}.norm"), d, dt),
        }
    }

    /// `LN(x + W2 gelu(W1 x))`.
    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.up.apply(g, vars, x)?;
        let h = g.gelu(h);
        let h = self.down.apply(g, vars, h)?;
        let r = g.add(x, h)?;
        self.norm.apply(g, vars, r)
    }
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub queries: Option<Var>,
    pub text: Option<Var>,
}

impl QFormer {
    /// Fresh parameters; every weight matrix and embedding is drawn from
    /// `N(0, 0.02²)`, biases and norm shifts are 0, norm gains 1.
    pub fn new(config: QFormerConfig, dtype: DType, rng: &mut Rng) -> Result<QFormer> {
        config.validate()?;
        let d = config.hidden_dim;
        let s = &mut ParamStore::new();
        let query_embeddings =
            s.add_normal("qformer.query_embeddings", &[config.n_queries, d], INIT_STD, dtype, rng);
        let token_embeddings =
            s.add_normal("qformer.token_embeddings", &[config.vocab_size, d], INIT_STD, dtype, rng);
        let position_embeddings =
            s.add_normal("qformer.position_embeddings", &[config.max_text_len, d], INIT_STD, dtype, rng);
        let embedding_norm = Norm::new(s, "qformer.embedding_norm", d, dtype);
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let p = format!("qformer.block{i}");
                Block {
                    self_attn: AttnLayer::new(s, &format!("{p}.self"), d, d, dtype, rng),
                    cross_attn: QFormerConfig::has_cross_attention(i).then(|| {
                        AttnLayer::new(s, &format!("{p}.cross"), d, config.image_feature_dim, dtype, rng)
                    }),
                    ffn_query: Ffn::new(s, &format!("{p}.ffn_query"), d, config.ffn_dim, dtype, rng),
                    ffn_text: Ffn::new(s, &format!("{p}.ffn_text"), d, config.ffn_dim, dtype, rng),
                }
            })
            .collect();
        let text_head = Linear::new(s, "qformer.text_head", d, config.vocab_size, INIT_STD, dtype, rng);
        let itm_head = Linear::new(s, "qformer.itm_head", d, 1, INIT_STD, dtype, rng);
        let log_temperature =
            s.add_const("qformer.log_temperature", &[1], INIT_TEMPERATURE.ln(), dtype);
        Ok(QFormer {
            config,
            store: std::mem::take(s),
            query_embeddings,
            token_embeddings,
            position_embeddings,
            embedding_norm,
            blocks,
            text_head,
            itm_head,
            log_temperature,
            stage2_projection: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.get(self.query_embeddings).dtype()
    }

    pub fn cast(&self, dtype: DType) -> QFormer {
        QFormer {
            store: self.store.cast(dtype),
            ..self.clone()
        }
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_temperature).data()[0].exp()
    }

    /// Replaces the query embeddings with `n` freshly initialized ones.
    pub fn reinit_queries(&mut self, n: usize, rng: &mut Rng) -> Result<()> {
        if n == 0 {
            return Err(Error::config("n_queries must be positive"));
        }
        let d = self.config.hidden_dim;
        let t = Tensor::new(
            vec![n, d],
            self.dtype(),
            crate::rng::normal_vec(rng, n * d, INIT_STD),
        )?;
        *self.store.get_mut(self.query_embeddings) = t;
        self.config.n_queries = n;
        Ok(())
    }

    /// Adds the hidden→`lm_dim` map used to feed query outputs to a decoder.
    pub fn attach_projection(&mut self, lm_dim: usize, rng: &mut Rng) {
        let dt = self.dtype();
        let d = self.config.hidden_dim;
        self.stage2_projection = Some(Linear::new(
            &mut self.store,
            "qformer.stage2_projection",
            d,
            lm_dim,
            INIT_STD,
            dt,
            rng,
        ));
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if ids.len() > self.config.max_text_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_text_len {}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn check_tiles(&self, g: &Graph, tiles: Var) -> Result<()> {
        match g.shape(tiles) {
            [n, f] if *n > 0 && *f == self.config.image_feature_dim => Ok(()),
            s => Err(Error::shape(
                "qformer",
                format!(
                    "tile features {s:?}, expected [n_tiles, {}]",
                    self.config.image_feature_dim
                ),
            )),
        }
    }

    /// `LN(token_embedding[id_t] + position_embedding[t])`.
    pub fn embed_text(&self, g: &mut Graph, vars: &[Var], ids: &[usize]) -> Result<Var> {
        self.check_tokens(ids)?;
        let tok = g.gather(vars[self.token_embeddings.0], ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather(vars[self.position_embeddings.0], &positions)?;
        let e = g.add(tok, pos)?;
        self.embedding_norm.apply(g, vars, e)
    }

    /// One pass over `(queries ‖ text)`. With only one stream present the
    /// stream attends to itself without a mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        tiles: Option<Var>,
        ids: Option<&[usize]>,
        mode: MaskMode,
    ) -> Result<ForwardOut> {
        if tiles.is_none() && ids.is_none() {
            return Err(Error::invalid("forward needs tiles, tokens or both"));
        }
        if let Some(t) = tiles {
            self.check_tiles(g, t)?;
        }
        let heads = self.config.n_heads;
        let nq = if tiles.is_some() { self.config.n_queries } else { 0 };
        let mut xq = tiles.map(|_| vars[self.query_embeddings.0]);
        let mut xt = match ids {
            Some(ids) => Some(self.embed_text(g, vars, ids)?),
            None => None,
        };
        let nt = ids.map_or(0, <[usize]>::len);
        let mask = (nq > 0 && nt > 0).then(|| build_attention_mask(mode, nq, nt));

        for block in &self.blocks {
            match (xq, xt) {
                (Some(q), Some(t)) => {
                    let x = g.concat_rows(&[q, t])?;
                    let x = block.self_attn.apply(g, vars, x, x, mask.as_ref(), heads)?;
                    xq = Some(g.slice_rows(x, 0, nq)?);
                    xt = Some(g.slice_rows(x, nq, nt)?);
                }
                (Some(q), None) => {
                    xq = Some(block.self_attn.apply(g, vars, q, q, None, heads)?);
                }
                (None, Some(t)) => {
                    xt = Some(block.self_attn.apply(g, vars, t, t, None, heads)?);
                }
                (None, None) => unreachable!(),
            }
            if let (Some(cross), Some(q), Some(src)) = (&block.cross_attn, xq, tiles) {
                xq = Some(cross.apply(g, vars, q, src, None, heads)?);
            }
            if let Some(q) = xq {
                xq = Some(block.ffn_query.apply(g, vars, q)?);
            }
            if let Some(t) = xt {
                xt = Some(block.ffn_text.apply(g, vars, t)?);
            }
        }
        Ok(ForwardOut {
            queries: xq,
            text: xt,
        })
    }

    /// Per-position vocabulary logits from text states.
    pub fn text_logits(&self, g: &mut Graph, vars: &[Var], text: Var) -> Result<Var> {
        self.text_head.apply(g, vars, text)
    }

    fn eager<T>(&self, f: impl FnOnce(&mut Graph, &[Var]) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let mut frozen = self.store.clone();
        frozen.set_all_trainable(false);
        let vars = frozen.bind(&mut g);
        f(&mut g, &vars)
    }

    /// Final query states `[n_queries, hidden]` for a tile bag.
    pub fn encode_image(&self, tiles: &Tensor) -> Result<Tensor> {
        self.eager(|g, vars| {
            let t = g.constant(tiles.clone());
            let out = self.forward(g, vars, Some(t), None, MaskMode::Unimodal)?;
            Ok(g.tensor(out.queries.expect("image stream")))
        })
    }

    /// Final state at the CLS position; `ids` must start with CLS.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.first() != Some(&CLS) {
            return Err(Error::invalid("text sequence must start with CLS"));
        }
        self.eager(|g, vars| {
            let out = self.forward(g, vars, None, Some(ids), MaskMode::Unimodal)?;
            let cls = g.slice_rows(out.text.expect("text stream"), 0, 1)?;
            let t = g.tensor(cls);
            t.reshape(&[self.config.hidden_dim])
        })
    }

    /// `(query_states, text_states)` under `mode`.
    pub fn joint_forward(&self, tiles: &Tensor, ids: &[usize], mode: MaskMode) -> Result<(Tensor, Tensor)> {
        self.eager(|g, vars| {
            let t = g.constant(tiles.clone());
            let out = self.forward(g, vars, Some(t), Some(ids), mode)?;
            Ok((
                g.tensor(out.queries.expect("image stream")),
                g.tensor(out.text.expect("text stream")),
            ))
        })
    }
}
