use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Dense map over the last spatial axis with the channel axis fused into the
/// feature dimension: `[.., in_len, in_channels] -> [.., out_len, out_channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LinearSpec {
    pub in_len: usize,
    pub out_len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LinearSpec {
    pub fn fan_in(&self) -> usize {
        self.in_len * self.in_channels
    }

    pub fn fan_out(&self) -> usize {
        self.out_len * self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.fan_in(), self.fan_out()]
    }

    pub fn param_count(&self) -> usize {
        self.fan_in() * self.fan_out() + self.fan_out()
    }
}

fn check(x: &Tensor, w: &Tensor, b: &Tensor, spec: &LinearSpec) -> Result<(usize, Vec<usize>)> {
    let k = x.spatial_rank();
    if k == 0 {
        return Err(Error::invalid("linear_lastaxis needs at least one spatial axis"));
    }
    let last = x.shape()[k - 1];
    if last != spec.in_len || x.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.in_len, spec.in_channels],
            actual: vec![last, x.channels()],
        });
    }
    if w.len() != spec.fan_in() * spec.fan_out() || b.len() != spec.fan_out() {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.fan_in(), spec.fan_out()],
            actual: w.shape().to_vec(),
        });
    }
    let rows = x.len() / spec.fan_in();
    let mut shape = x.shape().to_vec();
    shape[k - 1] = spec.out_len;
    shape[k] = spec.out_channels;
    Ok((rows, shape))
}

/// `y[.., j] = Σ_i x[.., i] w[i, j] + b[j]` with `i`, `j` running over the
/// fused (position, channel) features of the last spatial axis.
pub fn linear_lastaxis(x: &Tensor, w: &Tensor, b: &Tensor, spec: &LinearSpec) -> Result<Tensor> {
    let (rows, shape) = check(x, w, b, spec)?;
    let mut out = Vec::with_capacity(rows * spec.fan_out());
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(
        MatRef::row_major(x.data(), rows, spec.fan_in()),
        MatRef::row_major(w.data(), spec.fan_in(), spec.fan_out()),
        &mut out,
        1.0,
    );
    Ok(Tensor::from_parts(shape, out))
}

pub struct LinearGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn linear_lastaxis_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    spec: &LinearSpec,
    grad_out: &Tensor,
) -> Result<LinearGrads> {
    let (rows, shape) = check(x, w, b, spec)?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: grad_out.shape().to_vec(),
        });
    }
    let (fi, fo) = (spec.fan_in(), spec.fan_out());
    let gy = MatRef::row_major(grad_out.data(), rows, fo);
    let mut gx = vec![0.0; x.len()];
    gemm(gy, MatRef::row_major(w.data(), fi, fo).t(), &mut gx, 0.0);
    let mut gw = vec![0.0; fi * fo];
    gemm(MatRef::row_major(x.data(), rows, fi).t(), gy, &mut gw, 0.0);
    let mut gb = vec![0.0; fo];
    for row in grad_out.data().chunks_exact(fo) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        b: Tensor::from_parts(b.shape().to_vec(), gb),
    })
}
