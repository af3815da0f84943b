//! Transformer building blocks and the attentional pooler.
//!
//! Every block is a small descriptor (name prefix plus dimensions). Weights
//! live in a [`ParameterStore`] under `"{prefix}.{weight}"`, so the same
//! descriptor works for 32-bit training and 64-bit gradient checks.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Component, Init, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Boolean attention mask of shape `[batch, q, k]`; `batch == 1` broadcasts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    q: usize,
    k: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, q: usize, k: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != batch * q * k || batch == 0 || q == 0 || k == 0 {
            return Err(Error::shape("Mask::new", &[batch, q, k], &[data.len()]));
        }
        Ok(Mask { batch, q, k, data })
    }

    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.data[(b * self.q + i) * self.k + j]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.q, self.k)
    }

    /// Rows as nested vectors (batch 0).
    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.q)
            .map(|i| (0..self.k).map(|j| self.allows(0, i, j)).collect())
            .collect()
    }

    fn expand(&self, batch: usize, heads: usize) -> Result<Arc<[bool]>> {
        if self.batch != 1 && self.batch != batch {
            return Err(Error::shape("mask", &[self.batch, self.q, self.k], &[batch]));
        }
        let mut out = Vec::with_capacity(batch * heads * self.q * self.k);
        for b in 0..batch {
            let src = if self.batch == 1 { 0 } else { b };
            let slab = &self.data[src * self.q * self.k..(src + 1) * self.q * self.k];
            for _ in 0..heads {
                out.extend_from_slice(slab);
            }
        }
        Ok(out.into())
    }
}

/// Lower-triangular mask: position `i` may attend to positions `0..=i`.
pub fn causal_mask(length: usize) -> Result<Mask> {
    if length == 0 {
        return Err(Error::invalid("causal mask length must be at least 1"));
    }
    let data = (0..length)
        .flat_map(|i| (0..length).map(move |j| j <= i))
        .collect();
    Mask::new(1, length, length, data)
}

fn param_name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, c: Component, init: &mut Init) -> Result<()> {
        store.insert(
            &param_name(&self.prefix, "w"),
            init.normal(&[self.input, self.output], INIT_STD)?,
            c,
        )?;
        store.insert(&param_name(&self.prefix, "b"), Tensor::zeros(vec![self.output])?, c)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.input) {
            return Err(Error::shape("linear", g.shape(x), &[self.input, self.output]));
        }
        let w = store.bind(g, &param_name(&self.prefix, "w"))?;
        let b = store.bind(g, &param_name(&self.prefix, "b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub prefix: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, c: Component) -> Result<()> {
        store.insert(
            &param_name(&self.prefix, "gamma"),
            Tensor::full(vec![self.width], F::one())?,
            c,
        )?;
        store.insert(&param_name(&self.prefix, "beta"), Tensor::zeros(vec![self.width])?, c)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, x: Var) -> Result<Var> {
        let gamma = store.bind(g, &param_name(&self.prefix, "gamma"))?;
        let beta = store.bind(g, &param_name(&self.prefix, "beta"))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub width: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new(prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            width,
            heads,
            q: Linear::new(param_name(prefix, "q"), width, width),
            k: Linear::new(param_name(prefix, "k"), width, width),
            v: Linear::new(param_name(prefix, "v"), width, width),
            o: Linear::new(param_name(prefix, "o"), width, width),
        })
    }

    /// Name of the output projection, for tests that zero it.
    pub fn output_prefix(&self) -> &str {
        &self.o.prefix
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, c: Component, init: &mut Init) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, c, init)?;
        }
        Ok(())
    }

    fn split_heads<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let x = g.reshape(x, &[b, n, self.heads, self.width / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `queries` is `[B, q, d]`, or `[q, d]` to share one query set across the batch.
    /// `keys_values` is `[B, k, d]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        queries: Var,
        keys_values: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let kv_shape = g.shape(keys_values).to_vec();
        if kv_shape.len() != 3 || kv_shape[2] != self.width {
            return Err(Error::shape("attention", &kv_shape, &[self.width]));
        }
        let batch = kv_shape[0];
        let q_shape = g.shape(queries).to_vec();
        let q = self.q.forward(g, store, queries)?;
        let q = match q_shape.len() {
            2 => g.expand(q, batch)?,
            3 if q_shape[0] == batch => q,
            _ => return Err(Error::shape("attention", &q_shape, &kv_shape)),
        };
        let nq = g.shape(q)[1];
        let k = self.k.forward(g, store, keys_values)?;
        let v = self.v.forward(g, store, keys_values)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / ((self.width / self.heads) as f64).sqrt());
        let weights = match mask {
            Some(m) => {
                let (_, mq, mk) = m.dims();
                if mq != nq || mk != kv_shape[1] {
                    return Err(Error::shape("attention mask", &[mq, mk], &[nq, kv_shape[1]]));
                }
                let full = m.expand(batch, self.heads)?;
                g.masked_softmax(scores, full)?
            }
            None => g.softmax(scores, 3)?,
        };
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[batch, nq, self.width])?;
        self.o.forward(g, store, out)
    }
}

/// Pre-layer-norm transformer block, optionally with cross-attention to a context.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub width: usize,
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(prefix: &str, width: usize, heads: usize, mlp_ratio: usize, cross: bool) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::new(param_name(prefix, "ln_cross"), width),
                Attention::new(&param_name(prefix, "cross"), width, heads)?,
            ))
        } else {
            None
        };
        Ok(TransformerBlock {
            width,
            ln1: LayerNorm::new(param_name(prefix, "ln1"), width),
            attn: Attention::new(&param_name(prefix, "attn"), width, heads)?,
            cross,
            ln2: LayerNorm::new(param_name(prefix, "ln2"), width),
            fc1: Linear::new(param_name(prefix, "fc1"), width, width * mlp_ratio),
            fc2: Linear::new(param_name(prefix, "fc2"), width * mlp_ratio, width),
        })
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, c: Component, init: &mut Init) -> Result<()> {
        self.ln1.init(store, c)?;
        self.attn.init(store, c, init)?;
        if let Some((ln, attn)) = &self.cross {
            ln.init(store, c)?;
            attn.init(store, c, init)?;
        }
        self.ln2.init(store, c)?;
        self.fc1.init(store, c, init)?;
        self.fc2.init(store, c, init)
    }

    /// Prefixes of the output projections that feed the residual stream.
    pub fn residual_outputs(&self) -> Vec<String> {
        let mut out = vec![self.attn.output_prefix().to_string(), self.fc2.prefix.clone()];
        if let Some((_, attn)) = &self.cross {
            out.push(attn.output_prefix().to_string());
        }
        out
    }

    pub fn cross_output(&self) -> Option<&str> {
        self.cross.as_ref().map(|(_, a)| a.output_prefix())
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParameterStore<F>,
        x: Var,
        mask: Option<&Mask>,
        context: Option<Var>,
    ) -> Result<Var> {
        if g.shape(x).last() != Some(&self.width) {
            return Err(Error::shape("transformer_block", g.shape(x), &[self.width]));
        }
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, h, mask)?;
        let mut x = g.add(x, h)?;
        match (&self.cross, context) {
            (Some((ln, attn)), Some(ctx)) => {
                let h = ln.forward(g, store, x)?;
                let h = attn.forward(g, store, h, ctx, None)?;
                x = g.add(x, h)?;
            }
            (Some(_), None) => return Err(Error::invalid("cross-attention block needs a context")),
            (None, _) => {}
        }
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Learned-query cross-attention followed by layer normalization.
///
/// The output always has `n_query` tokens, whatever the input length, and it
/// does not depend on the order of the input tokens.
#[derive(Debug, Clone)]
pub struct AttentionalPooler {
    pub prefix: String,
    pub n_query: usize,
    pub width: usize,
    attn: Attention,
    ln: LayerNorm,
}

impl AttentionalPooler {
    pub fn new(prefix: &str, n_query: usize, width: usize, heads: usize) -> Result<Self> {
        if n_query == 0 {
            return Err(Error::invalid("pooler needs at least one query"));
        }
        Ok(AttentionalPooler {
            prefix: prefix.to_string(),
            n_query,
            width,
            attn: Attention::new(&param_name(prefix, "attn"), width, heads)?,
            ln: LayerNorm::new(param_name(prefix, "ln"), width),
        })
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>, c: Component, init: &mut Init) -> Result<()> {
        store.insert(
            &param_name(&self.prefix, "queries"),
            init.normal(&[self.n_query, self.width], 1.0)?,
            c,
        )?;
        self.attn.init(store, c, init)?;
        self.ln.init(store, c)
    }

    /// `[B, S, d]` tokens to `[B, n_query, d]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParameterStore<F>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::shape("attentional_pool", s, &[self.width]));
        }
        let queries = store.bind(g, &param_name(&self.prefix, "queries"))?;
        let out = self.attn.forward(g, store, queries, tokens, None)?;
        self.ln.forward(g, store, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(1).unwrap().to_rows(), vec![vec![true]]);
        assert_eq!(
            causal_mask(3).unwrap().to_rows(),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(Attention::new("a", 10, 4).is_err());
        assert!(AttentionalPooler::new("p", 0, 8, 2).is_err());
    }
}
