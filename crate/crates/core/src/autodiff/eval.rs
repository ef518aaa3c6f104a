use super::{bce_from_logit, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    adaptive_pool, conv_lastaxes, layer_norm_channels, linear_lastaxis, permute, resize_repeat,
    self_attention_lastaxis, Activation, AttentionSpec, AttentionWeights, AxisPerm, ConvSpec,
    LinearSpec, PoolMode, Tensor,
};

/// Eager evaluation with no recording.
#[derive(Debug, Default)]
pub struct Eval {
    ops: usize,
}

impl Eval {
    pub fn new() -> Self {
        Self::default()
    }

    fn finish(&mut self, op: &'static str, t: Tensor) -> Result<Tensor> {
        let node = self.ops;
        self.ops += 1;
        if !t.all_finite() {
            return Err(Error::NonFinite { op, node });
        }
        Ok(t)
    }
}

impl Graph for Eval {
    type Value = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Result<Tensor> {
        self.finish("constant", t)
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let t = store.get(name)?.clone();
        self.finish("param", t)
    }

    fn permute(&mut self, x: &Tensor, p: &AxisPerm) -> Result<Tensor> {
        permute(x, p)
    }

    fn adaptive_pool(&mut self, x: &Tensor, targets: &[(usize, usize)], mode: PoolMode) -> Result<Tensor> {
        adaptive_pool(x, targets, mode)
    }

    fn repeat(&mut self, x: &Tensor, axis: usize, factor: usize) -> Result<Tensor> {
        resize_repeat(x, axis, factor)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape)
    }

    fn conv(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
        let y = conv_lastaxes(x, w, b, spec)?;
        self.finish("conv", y)
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, spec: &LinearSpec) -> Result<Tensor> {
        let y = linear_lastaxis(x, w, b, spec)?;
        self.finish("linear", y)
    }

    fn attention(&mut self, x: &Tensor, w: [&Tensor; 4], spec: &AttentionSpec) -> Result<Tensor> {
        let weights = AttentionWeights {
            wq: w[0],
            wk: w[1],
            wv: w[2],
            wo: w[3],
        };
        let y = self_attention_lastaxis(x, &weights, spec)?;
        self.finish("attention", y)
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let y = layer_norm_channels(x, gamma, beta)?;
        self.finish("layer_norm", y)
    }

    fn activation(&mut self, x: &Tensor, act: Activation) -> Result<Tensor> {
        let y = x.map(|v| act.apply(v));
        self.finish(act.name(), y)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = a.add(b)?;
        self.finish("add", y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = a.mul(b)?;
        self.finish("mul", y)
    }

    fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.maximum(b)
    }

    fn scale(&mut self, x: &Tensor, s: f64) -> Result<Tensor> {
        let y = x.scale(s);
        self.finish("scale", y)
    }

    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = Tensor::scalar(x.sum());
        self.finish("sum", y)
    }

    fn bce_with_logit(&mut self, z: &Tensor, label: f64) -> Result<Tensor> {
        let y = Tensor::scalar(bce_from_logit(z.item()?, label));
        self.finish("bce", y)
    }
}
