use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalises every spatial position over its channel vector, then applies
/// the per-channel affine `gamma * n + beta`.
pub fn layer_norm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = check(x, gamma, beta)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let (mean, inv) = moments(row);
        for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub struct LayerNormGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn layer_norm_channels_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    grad_out: &Tensor,
) -> Result<LayerNormGrads> {
    let c = check(x, gamma, beta)?;
    x.expect_same_shape(grad_out)?;
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut gn = vec![0.0; c];
    for (row, gy) in x.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let (mean, inv) = moments(row);
        for k in 0..c {
            xhat[k] = (row[k] - mean) * inv;
            gn[k] = gy[k] * gamma.data()[k];
            gg[k] += gy[k] * xhat[k];
            gb[k] += gy[k];
        }
        let mean_gn = gn.iter().sum::<f64>() / c as f64;
        let mean_gn_xhat = gn.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for k in 0..c {
            gx.push(inv * (gn[k] - mean_gn - xhat[k] * mean_gn_xhat));
        }
    }
    Ok(LayerNormGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        gamma: Tensor::from_parts(gamma.shape().to_vec(), gg),
        beta: Tensor::from_parts(beta.shape().to_vec(), gb),
    })
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::invalid(format!(
            "layer norm over {c} channels got gamma of {} and beta of {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(c)
}

/// Mean and reciprocal standard deviation (biased variance plus epsilon).
fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Gelu => 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
            Self::Sigmoid => sigmoid_scalar(v),
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Self::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + v * pdf
            }
            Self::Sigmoid => {
                let s = sigmoid_scalar(v);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Sigmoid => "sigmoid",
        }
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Relu.apply(v))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Gelu.apply(v))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| Activation::Sigmoid.apply(v))
}
