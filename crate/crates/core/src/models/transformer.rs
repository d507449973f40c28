use serde::{Deserialize, Serialize};

use super::{Bound, Builder, Mode, ModelDims};
use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Post-norm transformer over the token set, no positional encoding:
///
/// ```text
/// Layer(X)       = LayerNorm(Residual(FFN, Residual(MHA, X)))
/// Residual(M, X) = X + Dropout_res(M(X))
/// FFN(X)         = Linear(Dropout_ffn(ReGLU(Linear(X))))
/// Prediction(X)  = Linear(ReLU(mean over tokens of X))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_factor: f64,
    pub attention_dropout: f64,
    pub ffn_dropout: f64,
    pub residual_dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            ffn_factor: 4.0 / 3.0,
            attention_dropout: 0.08,
            ffn_dropout: 0.3,
            residual_dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    /// ReGLU output width `⌊k · ffn_factor⌋`; the first FFN linear emits twice this.
    pub fn ffn_hidden(&self, k: usize) -> usize {
        (k as f64 * self.ffn_factor) as usize
    }
}

pub(super) fn init(b: &mut Builder<'_>, dims: &ModelDims, c: &TransformerConfig) {
    let k = dims.k;
    let h = c.ffn_hidden(k);
    for i in 0..c.layers {
        for proj in ["q", "k", "v", "out"] {
            b.linear(&format!("layers.{i}.attention.{proj}"), k, k);
        }
        b.linear(&format!("layers.{i}.ffn.linear1"), k, 2 * h);
        b.linear(&format!("layers.{i}.ffn.linear2"), h, k);
        b.norm(&format!("layers.{i}.norm"), k, false);
    }
    b.linear("head", k, dims.out);
}

pub(super) fn forward(
    g: &mut Graph,
    p: &Bound<'_>,
    dims: &ModelDims,
    c: &TransformerConfig,
    tokens: Var,
    batch: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let x = encode(g, p, dims, c, tokens, batch, mode)?;
    let pooled = g.group_mean(x, dims.d);
    let z = g.relu(pooled);
    Ok(p.linear(g, "head", z))
}

/// Output token set `[B·d, k]` after all layers.
pub(super) fn encode(
    g: &mut Graph,
    p: &Bound<'_>,
    dims: &ModelDims,
    c: &TransformerConfig,
    tokens: Var,
    batch: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let d = dims.d;
    let mut x = tokens;
    for i in 0..c.layers {
        let pre = format!("layers.{i}");
        let q = p.linear(g, &format!("{pre}.attention.q"), x);
        let k = p.linear(g, &format!("{pre}.attention.k"), x);
        let v = p.linear(g, &format!("{pre}.attention.v"), x);
        let mask = mode.mask(batch * c.heads * d * d, c.attention_dropout)?;
        let a = g.attention(q, k, v, batch, d, c.heads, mask);
        let a = p.linear(g, &format!("{pre}.attention.out"), a);
        let a = mode.dropout(g, a, c.residual_dropout)?;
        let x1 = g.add(x, a);

        let f = p.linear(g, &format!("{pre}.ffn.linear1"), x1);
        let f = g.reglu(f);
        let f = mode.dropout(g, f, c.ffn_dropout)?;
        let f = p.linear(g, &format!("{pre}.ffn.linear2"), f);
        let f = mode.dropout(g, f, c.residual_dropout)?;
        let x2 = g.add(x1, f);
        x = p.layer_norm(g, &format!("{pre}.norm"), x2);
    }
    Ok(x)
}
