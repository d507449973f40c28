use serde::{Deserialize, Serialize};

use super::{Bound, Builder, Mode, ModelDims};
use crate::error::Result;
use crate::numerics::{Graph, Var};
use crate::objective::combine;

/// `Linear(Block(…Block(x)))` with `Block(x) = Dropout(ReLU(Linear(x)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 168,
            dropout: 0.2,
        }
    }
}

pub(super) fn init(b: &mut Builder<'_>, dims: &ModelDims, c: &MlpConfig) {
    let mut width = dims.combined_width();
    for i in 0..c.layers {
        b.linear(&format!("blocks.{i}.linear"), width, c.hidden);
        width = c.hidden;
    }
    b.linear("head", width, dims.out);
}

pub(super) fn forward(
    g: &mut Graph,
    p: &Bound<'_>,
    dims: &ModelDims,
    c: &MlpConfig,
    tokens: Var,
    batch: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut x = combine(g, tokens, batch, dims.d, dims.combine);
    for i in 0..c.layers {
        let h = p.linear(g, &format!("blocks.{i}.linear"), x);
        let h = g.relu(h);
        x = mode.dropout(g, h, c.dropout)?;
    }
    Ok(p.linear(g, "head", x))
}
