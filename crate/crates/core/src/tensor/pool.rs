use super::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Half-open range of input positions feeding output bin `i` when an axis of
/// length `n` is pooled to `t` bins.
pub fn bin_bounds(n: usize, t: usize, i: usize) -> (usize, usize) {
    (i * n / t, (i + 1) * n / t)
}

struct PoolPlan {
    out_shape: Vec<usize>,
    /// output spatial offset for every input spatial position
    out_cell: Vec<usize>,
    channels: usize,
    cells_out: usize,
}

fn plan(x: &Tensor, targets: &[(usize, usize)]) -> Result<PoolPlan> {
    let k = x.spatial_rank();
    let mut out_shape = x.shape().to_vec();
    for &(axis, t) in targets {
        if axis >= k {
            return Err(Error::invalid(format!(
                "pool axis {axis} is not a spatial axis of a rank-{k} tensor"
            )));
        }
        let n = x.shape()[axis];
        if t < 1 || t > n {
            return Err(Error::invalid(format!(
                "pool target {t} must lie in 1..={n} for axis {axis}"
            )));
        }
        out_shape[axis] = t;
    }
    let spatial = x.spatial_shape();
    let out_strides = strides(&out_shape[..k]);
    // per-axis contribution to the output cell offset
    let tables: Vec<Vec<usize>> = (0..k)
        .map(|a| {
            let n = spatial[a];
            let t = out_shape[a];
            (0..n)
                .map(|i| {
                    // inverse of bin_bounds: the bin whose range contains i
                    let mut b = i * t / n;
                    while bin_bounds(n, t, b).1 <= i {
                        b += 1;
                    }
                    while bin_bounds(n, t, b).0 > i {
                        b -= 1;
                    }
                    b * out_strides[a]
                })
                .collect()
        })
        .collect();
    let cells_in: usize = spatial.iter().product();
    let mut out_cell = Vec::with_capacity(cells_in);
    let mut idx = vec![0usize; k];
    for _ in 0..cells_in {
        out_cell.push((0..k).map(|a| tables[a][idx[a]]).sum());
        super::increment(&mut idx, spatial);
    }
    let cells_out = out_shape[..k].iter().product();
    Ok(PoolPlan {
        out_shape,
        out_cell,
        channels: x.channels(),
        cells_out,
    })
}

/// Pools each listed `(axis, target)` spatial axis into `target` contiguous
/// bins. Bins over several axes are reduced jointly.
pub fn adaptive_pool(x: &Tensor, targets: &[(usize, usize)], mode: PoolMode) -> Result<Tensor> {
    let plan = plan(x, targets)?;
    if plan.cells_out == plan.out_cell.len() {
        return Ok(x.clone());
    }
    let c = plan.channels;
    let src = x.data();
    match mode {
        PoolMode::Max => {
            let mut out = vec![f64::NEG_INFINITY; plan.cells_out * c];
            for (cell, &oc) in plan.out_cell.iter().enumerate() {
                let row = &src[cell * c..(cell + 1) * c];
                let dst = &mut out[oc * c..(oc + 1) * c];
                for (d, &v) in dst.iter_mut().zip(row) {
                    if v > *d {
                        *d = v;
                    }
                }
            }
            Ok(Tensor::from_parts(plan.out_shape, out))
        }
        PoolMode::Avg => {
            let members = members(&plan);
            let mut out = vec![0.0; plan.cells_out * c];
            let mut scratch = Vec::new();
            for (oc, cells) in members.iter().enumerate() {
                for ch in 0..c {
                    scratch.clear();
                    scratch.extend(cells.iter().map(|&cell| src[cell * c + ch]));
                    // summed in sorted order so the result does not depend on axis layout
                    scratch.sort_by(f64::total_cmp);
                    out[oc * c + ch] = scratch.iter().sum::<f64>() / cells.len() as f64;
                }
            }
            Ok(Tensor::from_parts(plan.out_shape, out))
        }
    }
}

fn members(plan: &PoolPlan) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); plan.cells_out];
    for (cell, &oc) in plan.out_cell.iter().enumerate() {
        members[oc].push(cell);
    }
    members
}

/// Gradient of [`adaptive_pool`] with respect to `x`. Max routes each output
/// gradient to the first maximiser in row-major input order.
pub fn adaptive_pool_backward(
    x: &Tensor,
    targets: &[(usize, usize)],
    mode: PoolMode,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let plan = plan(x, targets)?;
    if grad_out.shape() != plan.out_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: plan.out_shape,
            actual: grad_out.shape().to_vec(),
        });
    }
    if plan.cells_out == plan.out_cell.len() {
        return Ok(grad_out.clone());
    }
    let c = plan.channels;
    let src = x.data();
    let g = grad_out.data();
    let mut grad = vec![0.0; x.len()];
    match mode {
        PoolMode::Max => {
            let mut best = vec![f64::NEG_INFINITY; plan.cells_out * c];
            let mut arg = vec![usize::MAX; plan.cells_out * c];
            for (cell, &oc) in plan.out_cell.iter().enumerate() {
                for ch in 0..c {
                    let v = src[cell * c + ch];
                    let o = oc * c + ch;
                    if v > best[o] || arg[o] == usize::MAX {
                        if v > best[o] {
                            best[o] = v;
                        }
                        arg[o] = cell * c + ch;
                    }
                }
            }
            for (o, &a) in arg.iter().enumerate() {
                grad[a] += g[o];
            }
        }
        PoolMode::Avg => {
            let members = members(&plan);
            for (oc, cells) in members.iter().enumerate() {
                let inv = 1.0 / cells.len() as f64;
                for &cell in cells {
                    for ch in 0..c {
                        grad[cell * c + ch] = g[oc * c + ch] * inv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Nearest-neighbour upsampling: every element along spatial `axis` is repeated
/// `factor` times in a row.
pub fn resize_repeat(x: &Tensor, axis: usize, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::invalid("repeat factor must be at least 1"));
    }
    if axis >= x.spatial_rank() {
        return Err(Error::invalid(format!(
            "repeat axis {axis} is not a spatial axis of a rank-{} tensor",
            x.spatial_rank()
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let mut data = Vec::with_capacity(x.len() * factor);
    for o in 0..outer {
        for i in 0..n {
            let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
            for _ in 0..factor {
                data.extend_from_slice(row);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n * factor;
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn resize_repeat_backward(
    x: &Tensor,
    axis: usize,
    factor: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let g = grad_out.data();
    let mut grad = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..n {
            let dst = &mut grad[(o * n + i) * inner..(o * n + i + 1) * inner];
            for r in 0..factor {
                let start = ((o * n + i) * factor + r) * inner;
                for (d, &v) in dst.iter_mut().zip(&g[start..start + inner]) {
                    *d += v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), grad))
}
