//! Minimal differentiable dense-array core.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use array::Tensor;
pub use gradcheck::{compare_with_differences, finite_diff_check, param_gradient_check};
pub use graph::{AttnExtras, Gradients, Graph, Var};
pub use kernels::Mask;
pub use params::ParamStore;

use crate::error::{Error, Result};

/// Single-head biased, masked attention over plain tensors.
///
/// `q: [lq, d]`, `k: [lk, d]`, `v: [lk, dv]`, `bias: [lq, lk]`. Masked
/// entries get exactly zero weight; a query row with no admitted key is an
/// error.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, mask: Option<&Mask>) -> Result<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::Shape("attention expects matrices".into()));
    }
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 1, AttnExtras { bias, mask })?;
    Ok(g.value(out).clone())
}
