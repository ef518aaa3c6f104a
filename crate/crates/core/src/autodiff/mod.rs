//! Reverse-mode differentiation over the tensor kernels.
//!
//! Layers are written once against [`Graph`]. [`Eval`] runs them eagerly on
//! plain tensors; [`Tape`] records every operation so [`Tape::backward`] can
//! push a scalar's gradient back to the parameters and inputs.

mod check;
mod eval;
mod params;
mod tape;

pub use check::{finite_difference_check, FdReport};
pub use eval::Eval;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::{
    Activation, AttentionSpec, AxisPerm, ConvSpec, LinearSpec, PoolMode, Tensor,
};

/// Numerically stable `-y log σ(z) - (1 - y) log(1 - σ(z))`.
pub fn bce_from_logit(z: f64, label: f64) -> f64 {
    z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
}

/// Derivative of [`bce_from_logit`] with respect to the logit.
pub fn bce_grad(z: f64, label: f64) -> f64 {
    Activation::Sigmoid.apply(z) - label
}

/// The operations layers are built from. Values are opaque handles; use
/// [`Graph::value`] to look at the tensor behind one.
pub trait Graph {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    /// A leaf that receives no parameter gradient (inputs, masks).
    fn constant(&mut self, t: Tensor) -> Result<Self::Value>;

    /// A named parameter from `store`; repeated requests share one leaf.
    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Self::Value>;

    fn permute(&mut self, x: &Self::Value, p: &AxisPerm) -> Result<Self::Value>;

    fn adaptive_pool(
        &mut self,
        x: &Self::Value,
        targets: &[(usize, usize)],
        mode: PoolMode,
    ) -> Result<Self::Value>;

    fn repeat(&mut self, x: &Self::Value, axis: usize, factor: usize) -> Result<Self::Value>;

    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;

    fn conv(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        spec: &ConvSpec,
    ) -> Result<Self::Value>;

    fn linear(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        spec: &LinearSpec,
    ) -> Result<Self::Value>;

    /// `w` holds the query, key, value and output projections in that order.
    fn attention(
        &mut self,
        x: &Self::Value,
        w: [&Self::Value; 4],
        spec: &AttentionSpec,
    ) -> Result<Self::Value>;

    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
    ) -> Result<Self::Value>;

    fn activation(&mut self, x: &Self::Value, act: Activation) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Element-wise maximum, keeping `a` on ties.
    fn maximum(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn scale(&mut self, x: &Self::Value, s: f64) -> Result<Self::Value>;

    /// Sum of all elements as a scalar.
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// Binary cross-entropy of a single logit against a 0/1 label.
    fn bce_with_logit(&mut self, z: &Self::Value, label: f64) -> Result<Self::Value>;
}
