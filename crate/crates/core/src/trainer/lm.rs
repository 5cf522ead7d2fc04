//! Small pre-norm decoder-only transformer standing in for a pretrained
//! language model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Linear, Norm, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, DType, Graph, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest text (in tokens) the positional table covers.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 2,
            dim: 48,
            n_heads: 4,
            ffn_dim: 192,
            vocab_size: 128,
            max_len: 64,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.n_layers, self.dim, self.n_heads, self.ffn_dim, self.vocab_size, self.max_len].contains(&0) {
            return Err(Error::config("language model sizes must be positive"));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::config("lm dim must be divisible by n_heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmLayer {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: Norm,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StubLm {
    pub config: LmConfig,
    pub store: ParamStore,
    pub token_embeddings: ParamId,
    pub position_embeddings: ParamId,
    pub layers: Vec<LmLayer>,
    pub final_norm: Norm,
    pub head: Linear,
}

impl StubLm {
    pub fn new(config: LmConfig, dtype: DType, rng: &mut Rng) -> Result<StubLm> {
        config.validate()?;
        let d = config.dim;
        let s = &mut ParamStore::new();
        let token_embeddings = s.add_normal("lm.token_embeddings", &[config.vocab_size, d], INIT_STD, dtype, rng);
        let position_embeddings = s.add_normal("lm.position_embeddings", &[config.max_len, d], INIT_STD, dtype, rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("lm.layer{i}");
                LmLayer {
                    norm1: Norm::new(s, &format!("{p}.norm1"), d, dtype),
                    q: Linear::new(s, &format!("{p}.q"), d, d, INIT_STD, dtype, rng),
                    k: Linear::new(s, &format!("{p}.k"), d, d, INIT_STD, dtype, rng),
                    v: Linear::new(s, &format!("{p}.v"), d, d, INIT_STD, dtype, rng),
                    o: Linear::new(s, &format!("{p}.o"), d, d, INIT_STD, dtype, rng),
                    norm2: Norm::new(s, &format!("{p}.norm2"), d, dtype),
                    up: Linear::new(s, &format!("{p}.up"), d, config.ffn_dim, INIT_STD, dtype, rng),
                    down: Linear::new(s, &format!("{p}.down"), config.ffn_dim, d, INIT_STD, dtype, rng),
                }
            })
            .collect();
        let final_norm = Norm::new(s, "lm.final_norm", d, dtype);
        let head = Linear::new(s, "lm.head", d, config.vocab_size, INIT_STD, dtype, rng);
        Ok(StubLm {
            config,
            store: std::mem::take(s),
            token_embeddings,
            position_embeddings,
            layers,
            final_norm,
            head,
        })
    }

    /// Freezes everything except the output head.
    pub fn freeze_body(&mut self) {
        self.store.set_all_trainable(false);
        for id in self.head.ids() {
            self.store.set_trainable(id, true);
        }
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        self.head.ids()
    }

    /// Next-token logits `[T, vocab]` for the text positions of
    /// `(prefix ‖ embed(ids))` under a causal mask. Prefix rows carry no
    /// positional embedding; text positions count from 0.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
        let t = ids.len();
        if t == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if t > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {t} tokens exceeds lm max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside the vocabulary")));
        }
        let tok = g.gather(vars[self.token_embeddings.0], ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather(vars[self.position_embeddings.0], &positions)?;
        let text = g.add(tok, pos)?;
        let (mut x, p) = match prefix {
            Some(p) => {
                let rows = g.shape(p)[0];
                if g.shape(p)[1] != self.config.dim {
                    return Err(Error::shape(
                        "lm",
                        format!("prefix width {} vs lm dim {}", g.shape(p)[1], self.config.dim),
                    ));
                }
                (g.concat_rows(&[p, text])?, rows)
            }
            None => (text, 0),
        };
        let n = p + t;
        let mask = AttentionMask::from_fn(n, n, |i, j| j <= i);
        for layer in &self.layers {
            let h = layer.norm1.apply(g, vars, x)?;
            let q = layer.q.apply(g, vars, h)?;
            let k = layer.k.apply(g, vars, h)?;
            let v = layer.v.apply(g, vars, h)?;
            let a = g.attention(q, k, v, Some(&mask), self.config.n_heads)?;
            let o = layer.o.apply(g, vars, a)?;
            x = g.add(x, o)?;
            let h = layer.norm2.apply(g, vars, x)?;
            let h = layer.up.apply(g, vars, h)?;
            let h = g.gelu(h);
            let h = layer.down.apply(g, vars, h)?;
            x = g.add(x, h)?;
        }
        let x = if p > 0 { g.slice_rows(x, p, t)? } else { x };
        let x = self.final_norm.apply(g, vars, x)?;
        self.head.apply(g, vars, x)
    }
}
