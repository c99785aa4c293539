//! Dense tensors, reverse-mode differentiation and optimization.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, ConvGeom, DropoutCtx, Graph, Var};
pub use optim::{clip_global_norm, AdamWConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{softmax, Precision, Tensor};

/// `x W (+ b)` on plain tensors, for callers outside a graph.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> crate::Result<Tensor> {
    let mut store = ParamStore::new(0, Precision::F64);
    let wi = store.buffer("w", w.clone())?;
    let bi = b.map(|b| store.buffer("b", b.clone())).transpose()?;
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let wv = g.param(wi);
    let bv = bi.map(|b| g.param(b));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y))
}
