use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Zero padding so the output length is `ceil(n / stride)`; when the total
    /// pad is odd the extra element goes on the high side.
    Same,
}

/// Cross-correlation over the trailing `arity` spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub arity: usize,
}

impl ConvSpec {
    /// Stride-1, `same`-padded convolution.
    pub fn same(arity: usize, kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            stride: 1,
            padding: Padding::Same,
            in_channels,
            out_channels,
            arity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel size and stride must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Output length along a convolved axis of length `n`, if one kernel fits.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        match self.padding {
            Padding::Valid => (n >= self.kernel_size).then(|| (n - self.kernel_size) / self.stride + 1),
            Padding::Same => Some(n.div_ceil(self.stride)),
        }
    }

    fn pad_low(&self, n: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => {
                let out = n.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel_size).saturating_sub(n);
                total / 2
            }
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel_size.pow(self.arity as u32)
    }

    /// Weight shape `[kernel^arity, in, out]`.
    pub fn weight_shape(&self) -> [usize; 3] {
        [self.taps(), self.in_channels, self.out_channels]
    }

    pub fn param_count(&self) -> usize {
        self.taps() * self.in_channels * self.out_channels + self.out_channels
    }
}

struct Geometry {
    batch: usize,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
    /// `taps[a][o * k + t]`: input coordinate read by output `o`, tap `t` on axis `a`
    taps: Vec<Vec<Option<usize>>>,
    out_shape: Vec<usize>,
}

fn geometry(x: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let k = x.spatial_rank();
    if spec.arity > k {
        return Err(Error::invalid(format!(
            "a {}-axis convolution needs spatial rank >= {}, got {k}",
            spec.arity, spec.arity
        )));
    }
    if x.channels() != spec.in_channels {
        return Err(Error::invalid(format!(
            "convolution expects {} input channels, got {}",
            spec.in_channels,
            x.channels()
        )));
    }
    let lead = k - spec.arity;
    let spatial = x.spatial_shape();
    let batch = spatial[..lead].iter().product();
    let in_dims = spatial[lead..].to_vec();
    let mut out_dims = Vec::with_capacity(spec.arity);
    let mut taps = Vec::with_capacity(spec.arity);
    for &n in &in_dims {
        let out = spec.output_len(n).ok_or_else(|| {
            Error::invalid(format!(
                "axis of length {n} is shorter than kernel {} under valid padding",
                spec.kernel_size
            ))
        })?;
        let pad = spec.pad_low(n) as isize;
        let mut table = Vec::with_capacity(out * spec.kernel_size);
        for o in 0..out {
            for t in 0..spec.kernel_size {
                let i = (o * spec.stride + t) as isize - pad;
                table.push((i >= 0 && (i as usize) < n).then_some(i as usize));
            }
        }
        out_dims.push(out);
        taps.push(table);
    }
    let mut out_shape = spatial[..lead].to_vec();
    out_shape.extend(&out_dims);
    out_shape.push(spec.out_channels);
    Ok(Geometry {
        batch,
        in_dims,
        out_dims,
        taps,
        out_shape,
    })
}

fn check_params(spec: &ConvSpec, w: &Tensor, b: &Tensor) -> Result<()> {
    let want = spec.weight_shape();
    if w.len() != want.iter().product::<usize>() {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            actual: w.shape().to_vec(),
        });
    }
    if b.len() != spec.out_channels {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.out_channels],
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Walks every (output row, tap) pair, calling `f(row, tap, input_row)` for in-bounds taps.
fn for_each_tap(g: &Geometry, kernel: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = g.in_dims.len();
    let in_cells: usize = g.in_dims.iter().product();
    let out_cells: usize = g.out_dims.iter().product();
    let taps_total = kernel.pow(n as u32);
    let mut in_strides = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * g.in_dims[a + 1];
    }
    let mut o_idx = vec![0usize; n];
    let mut t_idx = vec![0usize; n];
    for b in 0..g.batch {
        for oc in 0..out_cells {
            let row = b * out_cells + oc;
            t_idx.iter_mut().for_each(|t| *t = 0);
            'tap: for tap in 0..taps_total {
                let mut offset = 0;
                let mut inside = true;
                for a in 0..n {
                    match g.taps[a][o_idx[a] * kernel + t_idx[a]] {
                        Some(i) => offset += i * in_strides[a],
                        None => {
                            inside = false;
                            break;
                        }
                    }
                }
                if inside {
                    f(row, tap, b * in_cells + offset);
                }
                for a in (0..n).rev() {
                    t_idx[a] += 1;
                    if t_idx[a] < kernel {
                        continue 'tap;
                    }
                    t_idx[a] = 0;
                }
            }
            super::increment(&mut o_idx, &g.out_dims);
        }
    }
}

fn im2col(x: &Tensor, g: &Geometry, spec: &ConvSpec) -> Vec<f64> {
    let c = spec.in_channels;
    let width = spec.taps() * c;
    let rows = g.batch * g.out_dims.iter().product::<usize>();
    let mut col = vec![0.0; rows * width];
    let src = x.data();
    for_each_tap(g, spec.kernel_size, |row, tap, input| {
        let dst = row * width + tap * c;
        col[dst..dst + c].copy_from_slice(&src[input * c..(input + 1) * c]);
    });
    col
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.arity == 0 || (spec.kernel_size == 1 && spec.stride == 1)
}

/// Convolution along the trailing `spec.arity` spatial axes; the leading spatial
/// axes are batch. Weights are laid out `[kernel^arity, in, out]`.
pub fn conv_lastaxes(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(x, spec)?;
    check_params(spec, w, b)?;
    let rows = g.batch * g.out_dims.iter().product::<usize>();
    let width = spec.taps() * spec.in_channels;
    let co = spec.out_channels;
    let mut out = Vec::with_capacity(rows * co);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    let col;
    let a = if is_pointwise(spec) {
        x.data()
    } else {
        col = im2col(x, &g, spec);
        &col
    };
    gemm(
        MatRef::row_major(a, rows, width),
        MatRef::row_major(w.data(), width, co),
        &mut out,
        1.0,
    );
    Ok(Tensor::from_parts(g.out_shape, out))
}

pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn conv_lastaxes_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = geometry(x, spec)?;
    check_params(spec, w, b)?;
    if grad_out.shape() != g.out_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: g.out_shape.clone(),
            actual: grad_out.shape().to_vec(),
        });
    }
    let rows = g.batch * g.out_dims.iter().product::<usize>();
    let width = spec.taps() * spec.in_channels;
    let co = spec.out_channels;
    let gy = MatRef::row_major(grad_out.data(), rows, co);

    let mut gb = vec![0.0; co];
    for row in grad_out.data().chunks_exact(co) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let pointwise = is_pointwise(spec);
    let col;
    let a = if pointwise {
        x.data()
    } else {
        col = im2col(x, &g, spec);
        &col
    };
    let mut gw = vec![0.0; width * co];
    gemm(MatRef::row_major(a, rows, width).t(), gy, &mut gw, 0.0);

    let mut gcol = vec![0.0; rows * width];
    gemm(gy, MatRef::row_major(w.data(), width, co).t(), &mut gcol, 0.0);
    let gx = if pointwise {
        gcol
    } else {
        let c = spec.in_channels;
        let mut gx = vec![0.0; x.len()];
        for_each_tap(&g, spec.kernel_size, |row, tap, input| {
            let src = row * width + tap * c;
            for (d, v) in gx[input * c..(input + 1) * c]
                .iter_mut()
                .zip(&gcol[src..src + c])
            {
                *d += v;
            }
        });
        gx
    };
    Ok(ConvGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        b: Tensor::from_parts(b.shape().to_vec(), gb),
    })
}
