//! Dense `f64` numerics with reverse-mode gradients and Adam.

mod adam;
mod array;
mod gradcheck;
mod graph;
pub mod nn;
mod params;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use array::Tensor;
pub(crate) use array::gemm;
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use graph::{Gradients, Graph, Var, GATHER_ZERO, LAYER_NORM_EPS};
pub use nn::{forward_attention, Conv, ConvSpec, Linear, Volume};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::Result;

/// Mean cross-entropy of `logits` rows against `targets`, over rows where
/// `loss_mask` is true.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets, loss_mask)?;
    Ok(g.value(ce).data()[0])
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax(v)?;
    Ok(g.value(s).clone())
}
