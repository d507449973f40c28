use super::{Bound, Builder, ModelDims};
use crate::numerics::{Graph, Var};
use crate::objective::combine;

pub(super) fn init(b: &mut Builder<'_>, dims: &ModelDims) {
    b.linear("head", dims.combined_width(), dims.out);
}

pub(super) fn forward(g: &mut Graph, p: &Bound<'_>, dims: &ModelDims, tokens: Var, batch: usize) -> Var {
    let x = combine(g, tokens, batch, dims.d, dims.combine);
    p.linear(g, "head", x)
}
