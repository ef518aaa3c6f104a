use std::collections::HashMap;

use super::{bce_from_logit, bce_grad, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    adaptive_pool, adaptive_pool_backward, conv_lastaxes, conv_lastaxes_backward,
    layer_norm_channels, layer_norm_channels_backward, linear_lastaxis, linear_lastaxis_backward,
    permute, resize_repeat, resize_repeat_backward, self_attention_lastaxis,
    self_attention_lastaxis_backward, Activation, AttentionSpec, AttentionWeights, AxisPerm,
    ConvSpec, LinearSpec, PoolMode, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(String),
    Permute(usize, AxisPerm),
    Pool(usize, Vec<(usize, usize)>, PoolMode),
    Repeat(usize, usize, usize),
    Reshape(usize),
    Conv([usize; 3], ConvSpec),
    Linear([usize; 3], LinearSpec),
    Attention(usize, [usize; 4], AttentionSpec),
    LayerNorm([usize; 3]),
    Activation(usize, Activation),
    Add(usize, usize),
    Mul(usize, usize),
    Maximum(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Bce(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in insertion order for a reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name, node });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(node))
    }

    fn val(&self, v: usize) -> &Tensor {
        &self.nodes[v].value
    }

    /// Reverse sweep from a single-element root, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<'_>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(root_value.map(|_| 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, tape: self })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |j: usize, t: Tensor| -> Result<()> {
            match &mut grads[j] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
            Ok(())
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Permute(x, p) => acc(*x, permute(g, &p.inverse())?)?,
            Op::Pool(x, targets, mode) => {
                acc(*x, adaptive_pool_backward(self.val(*x), targets, *mode, g)?)?
            }
            Op::Repeat(x, axis, factor) => {
                acc(*x, resize_repeat_backward(self.val(*x), *axis, *factor, g)?)?
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.val(*x).shape())?)?,
            Op::Conv([x, w, b], spec) => {
                let r = conv_lastaxes_backward(self.val(*x), self.val(*w), self.val(*b), spec, g)?;
                acc(*x, r.x)?;
                acc(*w, r.w)?;
                acc(*b, r.b)?;
            }
            Op::Linear([x, w, b], spec) => {
                let r = linear_lastaxis_backward(self.val(*x), self.val(*w), self.val(*b), spec, g)?;
                acc(*x, r.x)?;
                acc(*w, r.w)?;
                acc(*b, r.b)?;
            }
            Op::Attention(x, [q, k, v, o], spec) => {
                let weights = AttentionWeights {
                    wq: self.val(*q),
                    wk: self.val(*k),
                    wv: self.val(*v),
                    wo: self.val(*o),
                };
                let r = self_attention_lastaxis_backward(self.val(*x), &weights, spec, g)?;
                acc(*x, r.x)?;
                acc(*q, r.wq)?;
                acc(*k, r.wk)?;
                acc(*v, r.wv)?;
                acc(*o, r.wo)?;
            }
            Op::LayerNorm([x, gamma, beta]) => {
                let r = layer_norm_channels_backward(
                    self.val(*x),
                    self.val(*gamma),
                    self.val(*beta),
                    g,
                )?;
                acc(*x, r.x)?;
                acc(*gamma, r.gamma)?;
                acc(*beta, r.beta)?;
            }
            Op::Activation(x, act) => {
                acc(*x, self.val(*x).zip_map(g, |v, gv| gv * act.derivative(v))?)?
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.val(*b))?)?;
                acc(*b, g.mul(self.val(*a))?)?;
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let left = va.zip_map(vb, |x, y| (y <= x) as u8 as f64)?;
                acc(*a, g.mul(&left)?)?;
                acc(*b, g.mul(&left.map(|m| 1.0 - m))?)?;
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::Sum(x) => {
                let s = g.item()?;
                acc(*x, self.val(*x).map(|_| s))?;
            }
            Op::Bce(z, label) => {
                let s = g.item()?;
                let zv = self.val(*z).item()?;
                acc(*z, Tensor::scalar(s * bce_grad(zv, *label)))?;
            }
        }
        Ok(())
    }
}

/// Gradients of one backward sweep.
pub struct Gradients<'t> {
    grads: Vec<Option<Tensor>>,
    tape: &'t Tape,
}

impl Gradients<'_> {
    /// Gradient with respect to a node, `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients laid out like `params`, zero where unused.
    pub fn to_store(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = params.zeros_like();
        for (i, node) in self.tape.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &self.grads[i]) {
                let slot = out.get_mut(name)?;
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(out)
    }
}

impl Graph for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let t = store.get(name)?.clone();
        let v = self.push("param", t, Op::Param(name.to_string()))?;
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    fn permute(&mut self, x: &Var, p: &AxisPerm) -> Result<Var> {
        let y = permute(self.val(x.0), p)?;
        self.push("permute", y, Op::Permute(x.0, p.clone()))
    }

    fn adaptive_pool(&mut self, x: &Var, targets: &[(usize, usize)], mode: PoolMode) -> Result<Var> {
        let y = adaptive_pool(self.val(x.0), targets, mode)?;
        self.push("adaptive_pool", y, Op::Pool(x.0, targets.to_vec(), mode))
    }

    fn repeat(&mut self, x: &Var, axis: usize, factor: usize) -> Result<Var> {
        let y = resize_repeat(self.val(x.0), axis, factor)?;
        self.push("repeat", y, Op::Repeat(x.0, axis, factor))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(x.0).reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x.0))
    }

    fn conv(&mut self, x: &Var, w: &Var, b: &Var, spec: &ConvSpec) -> Result<Var> {
        let y = conv_lastaxes(self.val(x.0), self.val(w.0), self.val(b.0), spec)?;
        self.push("conv", y, Op::Conv([x.0, w.0, b.0], *spec))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var, spec: &LinearSpec) -> Result<Var> {
        let y = linear_lastaxis(self.val(x.0), self.val(w.0), self.val(b.0), spec)?;
        self.push("linear", y, Op::Linear([x.0, w.0, b.0], *spec))
    }

    fn attention(&mut self, x: &Var, w: [&Var; 4], spec: &AttentionSpec) -> Result<Var> {
        let weights = AttentionWeights {
            wq: self.val(w[0].0),
            wk: self.val(w[1].0),
            wv: self.val(w[2].0),
            wo: self.val(w[3].0),
        };
        let y = self_attention_lastaxis(self.val(x.0), &weights, spec)?;
        let ids = [w[0].0, w[1].0, w[2].0, w[3].0];
        self.push("attention", y, Op::Attention(x.0, ids, *spec))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let y = layer_norm_channels(self.val(x.0), self.val(gamma.0), self.val(beta.0))?;
        self.push("layer_norm", y, Op::LayerNorm([x.0, gamma.0, beta.0]))
    }

    fn activation(&mut self, x: &Var, act: Activation) -> Result<Var> {
        let y = self.val(x.0).map(|v| act.apply(v));
        self.push(act.name(), y, Op::Activation(x.0, act))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(a.0).add(self.val(b.0))?;
        self.push("add", y, Op::Add(a.0, b.0))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(a.0).mul(self.val(b.0))?;
        self.push("mul", y, Op::Mul(a.0, b.0))
    }

    fn maximum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(a.0).maximum(self.val(b.0))?;
        self.push("maximum", y, Op::Maximum(a.0, b.0))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Result<Var> {
        let y = self.val(x.0).scale(s);
        self.push("scale", y, Op::Scale(x.0, s))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(x.0).sum());
        self.push("sum", y, Op::Sum(x.0))
    }

    fn bce_with_logit(&mut self, z: &Var, label: f64) -> Result<Var> {
        let y = Tensor::scalar(bce_from_logit(self.val(z.0).item()?, label));
        self.push("bce", y, Op::Bce(z.0, label))
    }
}
