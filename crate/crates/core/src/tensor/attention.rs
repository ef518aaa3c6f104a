use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Multi-head scaled dot-product self-attention over the last spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionSpec {
    pub channels: usize,
    pub heads: usize,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Four `[C, C]` projections, no biases.
    pub fn param_count(&self) -> usize {
        4 * self.channels * self.channels
    }
}

/// Query, key, value and output projections, each `[C, C]`. Head `h` owns
/// columns `h*dh..(h+1)*dh` of the query, key and value projections.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
}

/// Multiplications performed by one attention call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionCount {
    /// score, scaling and weighted-sum products over sequence pairs
    pub pair_mults: u64,
    /// the four per-position projections
    pub projection_mults: u64,
    /// independent sequences (batch positions)
    pub sequences: u64,
}

/// Pair multiplications for one sequence of length `len`.
pub fn attention_mults_per_sequence(len: usize, spec: &AttentionSpec) -> u64 {
    let (l, dh, h) = (len as u64, spec.head_dim() as u64, spec.heads as u64);
    h * (2 * l * l * dh + l * l)
}

/// Pair multiplications of attention over all positions of `spatial` flattened
/// into a single sequence.
pub fn flattened_attention_mults(spatial: &[usize], spec: &AttentionSpec) -> u64 {
    attention_mults_per_sequence(spatial.iter().product(), spec)
}

struct Layout {
    rows: usize,
    len: usize,
    c: usize,
}

fn check(x: &Tensor, w: &AttentionWeights<'_>, spec: &AttentionSpec) -> Result<Layout> {
    spec.validate()?;
    let k = x.spatial_rank();
    if k == 0 {
        return Err(Error::invalid("attention needs at least one spatial axis"));
    }
    let c = spec.channels;
    if x.channels() != c {
        return Err(Error::invalid(format!(
            "attention expects {c} channels, got {}",
            x.channels()
        )));
    }
    for m in [w.wq, w.wk, w.wv, w.wo] {
        if m.len() != c * c {
            return Err(Error::ShapeMismatch {
                expected: vec![c, c],
                actual: m.shape().to_vec(),
            });
        }
    }
    Ok(Layout {
        rows: x.len() / c,
        len: x.shape()[k - 1],
        c,
    })
}

fn project(x: &[f64], w: &Tensor, rows: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c];
    gemm(
        MatRef::row_major(x, rows, c),
        MatRef::row_major(w.data(), c, c),
        &mut out,
        0.0,
    );
    out
}

/// Softmax-normalised scores of one (sequence, head): `p[i * len + j]`.
fn scores(q: &[f64], k: &[f64], base: usize, len: usize, c: usize, off: usize, dh: usize) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; len * len];
    for i in 0..len {
        let qi = &q[(base + i) * c + off..(base + i) * c + off + dh];
        let row = &mut p[i * len..(i + 1) * len];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[(base + j) * c + off..(base + j) * c + off + dh];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    p
}

pub fn self_attention_lastaxis(
    x: &Tensor,
    w: &AttentionWeights<'_>,
    spec: &AttentionSpec,
) -> Result<Tensor> {
    self_attention_lastaxis_counted(x, w, spec).map(|(y, _)| y)
}

/// Attention along the last spatial axis with every other spatial axis as
/// batch, also returning the multiplications it performed.
pub fn self_attention_lastaxis_counted(
    x: &Tensor,
    w: &AttentionWeights<'_>,
    spec: &AttentionSpec,
) -> Result<(Tensor, AttentionCount)> {
    let Layout { rows, len, c } = check(x, w, spec)?;
    let dh = spec.head_dim();
    let q = project(x.data(), w.wq, rows, c);
    let k = project(x.data(), w.wk, rows, c);
    let v = project(x.data(), w.wv, rows, c);
    let mut o = vec![0.0; rows * c];
    let sequences = rows / len;
    let mut count = AttentionCount {
        projection_mults: 4 * (rows * c * c) as u64,
        sequences: sequences as u64,
        ..Default::default()
    };
    for s in 0..sequences {
        let base = s * len;
        for h in 0..spec.heads {
            let off = h * dh;
            let p = scores(&q, &k, base, len, c, off, dh);
            count.pair_mults += (len * len * (dh + 1)) as u64;
            for i in 0..len {
                let dst = (base + i) * c + off;
                for j in 0..len {
                    let pij = p[i * len + j];
                    let src = (base + j) * c + off;
                    for d in 0..dh {
                        o[dst + d] += pij * v[src + d];
                    }
                }
            }
            count.pair_mults += (len * len * dh) as u64;
        }
    }
    let y = project(&o, w.wo, rows, c);
    Ok((Tensor::from_parts(x.shape().to_vec(), y), count))
}

pub struct AttentionGrads {
    pub x: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

pub fn self_attention_lastaxis_backward(
    x: &Tensor,
    w: &AttentionWeights<'_>,
    spec: &AttentionSpec,
    grad_out: &Tensor,
) -> Result<AttentionGrads> {
    let Layout { rows, len, c } = check(x, w, spec)?;
    x.expect_same_shape(grad_out)?;
    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(x.data(), w.wq, rows, c);
    let k = project(x.data(), w.wk, rows, c);
    let v = project(x.data(), w.wv, rows, c);
    let mut o = vec![0.0; rows * c];
    let gy = MatRef::row_major(grad_out.data(), rows, c);
    let mut go = vec![0.0; rows * c];
    gemm(gy, MatRef::row_major(w.wo.data(), c, c).t(), &mut go, 0.0);
    let mut gq = vec![0.0; rows * c];
    let mut gk = vec![0.0; rows * c];
    let mut gv = vec![0.0; rows * c];
    let mut dp = vec![0.0; len * len];
    for s in 0..rows / len {
        let base = s * len;
        for h in 0..spec.heads {
            let off = h * dh;
            let p = scores(&q, &k, base, len, c, off, dh);
            for i in 0..len {
                let oi = (base + i) * c + off;
                for j in 0..len {
                    let vj = (base + j) * c + off;
                    let pij = p[i * len + j];
                    let mut acc = 0.0;
                    for d in 0..dh {
                        o[oi + d] += pij * v[vj + d];
                        acc += go[oi + d] * v[vj + d];
                        gv[vj + d] += pij * go[oi + d];
                    }
                    dp[i * len + j] = acc;
                }
            }
            for i in 0..len {
                let row_p = &p[i * len..(i + 1) * len];
                let row_dp = &dp[i * len..(i + 1) * len];
                let dot: f64 = row_p.iter().zip(row_dp).map(|(a, b)| a * b).sum();
                let qi = (base + i) * c + off;
                for j in 0..len {
                    let ds = row_p[j] * (row_dp[j] - dot) * scale;
                    let kj = (base + j) * c + off;
                    for d in 0..dh {
                        gq[qi + d] += ds * k[kj + d];
                        gk[kj + d] += ds * q[qi + d];
                    }
                }
            }
        }
    }
    let xm = MatRef::row_major(x.data(), rows, c);
    let mut gx = vec![0.0; rows * c];
    for (g, wm) in [(&gq, w.wq), (&gk, w.wk), (&gv, w.wv)] {
        gemm(
            MatRef::row_major(g, rows, c),
            MatRef::row_major(wm.data(), c, c).t(),
            &mut gx,
            1.0,
        );
    }
    let grad_w = |g: &[f64]| {
        let mut out = vec![0.0; c * c];
        gemm(xm.t(), MatRef::row_major(g, rows, c), &mut out, 0.0);
        out
    };
    let mut gwo = vec![0.0; c * c];
    gemm(MatRef::row_major(&o, rows, c).t(), gy, &mut gwo, 0.0);
    Ok(AttentionGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        wq: Tensor::from_parts(w.wq.shape().to_vec(), grad_w(&gq)),
        wk: Tensor::from_parts(w.wk.shape().to_vec(), grad_w(&gk)),
        wv: Tensor::from_parts(w.wv.shape().to_vec(), grad_w(&gv)),
        wo: Tensor::from_parts(w.wo.shape().to_vec(), gwo),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{permute, AxisPerm};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_weights(c: usize, rng: &mut ChaCha8Rng) -> [Tensor; 4] {
        std::array::from_fn(|_| Tensor::random(&[c, c], rng).unwrap())
    }

    fn view(w: &[Tensor; 4]) -> AttentionWeights<'_> {
        AttentionWeights {
            wq: &w[0],
            wk: &w[1],
            wv: &w[2],
            wo: &w[3],
        }
    }

    fn matvec(x: &[f64], w: &Tensor, c: usize) -> Vec<f64> {
        (0..c)
            .map(|j| (0..c).map(|i| x[i] * w.data()[i * c + j]).sum())
            .collect()
    }

    #[test]
    fn singleton_sequence_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = AttentionSpec { channels: 4, heads: 2 };
        let w = random_weights(4, &mut rng);
        let x = Tensor::random(&[3, 1, 4], &mut rng).unwrap();
        let y = self_attention_lastaxis(&x, &view(&w), &spec).unwrap();
        for r in 0..3 {
            let xr = &x.data()[r * 4..(r + 1) * 4];
            let want = matvec(&matvec(xr, &w[2], 4), &w[3], 4);
            for j in 0..4 {
                assert!((y.data()[r * 4 + j] - want[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_key_averages_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let spec = AttentionSpec { channels: 2, heads: 1 };
        let mut w = random_weights(2, &mut rng);
        w[0] = Tensor::zeros(&[2, 2]).unwrap();
        w[1] = Tensor::zeros(&[2, 2]).unwrap();
        let eye = Tensor::from_fn(&[2, 2], |i| (i[0] == i[1]) as u8 as f64).unwrap();
        w[2] = eye.clone();
        w[3] = eye;
        let x = Tensor::random(&[5, 2], &mut rng).unwrap();
        let y = self_attention_lastaxis(&x, &view(&w), &spec).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..5).map(|i| x.data()[i * 2 + ch]).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((y.data()[i * 2 + ch] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_tokens_match_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let spec = AttentionSpec { channels: 3, heads: 1 };
        let w = random_weights(3, &mut rng);
        let x = Tensor::random(&[2, 3], &mut rng).unwrap();
        let y = self_attention_lastaxis(&x, &view(&w), &spec).unwrap();
        let rows: Vec<&[f64]> = x.data().chunks(3).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &w[0], 3)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &w[1], 3)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| matvec(r, &w[2], 3)).collect();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                .collect();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z = e[0] + e[1];
            let o: Vec<f64> = (0..3).map(|d| (e[0] * v[0][d] + e[1] * v[1][d]) / z).collect();
            let want = matvec(&o, &w[3], 3);
            for d in 0..3 {
                assert!((y.data()[i * 3 + d] - want[d]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn output_shape_and_batch_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = AttentionSpec { channels: 4, heads: 2 };
        let w = random_weights(4, &mut rng);
        let x = Tensor::random(&[3, 2, 5, 4], &mut rng).unwrap();
        let y = self_attention_lastaxis(&x, &view(&w), &spec).unwrap();
        assert_eq!(y.shape(), x.shape());
        let p = AxisPerm::transposition(3, 0, 1);
        let lhs = self_attention_lastaxis(&permute(&x, &p).unwrap(), &view(&w), &spec).unwrap();
        assert_eq!(lhs, permute(&y, &p).unwrap());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let w = [(); 4].map(|_| Tensor::zeros(&[3, 3]).unwrap());
        let x = Tensor::zeros(&[2, 3]).unwrap();
        let spec = AttentionSpec { channels: 3, heads: 2 };
        assert!(self_attention_lastaxis(&x, &view(&w), &spec).is_err());
    }

    #[test]
    fn counts_pair_multiplications() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = AttentionSpec { channels: 2, heads: 1 };
        let w = random_weights(2, &mut rng);
        let x = Tensor::random(&[4, 6, 2], &mut rng).unwrap();
        let (_, count) = self_attention_lastaxis_counted(&x, &view(&w), &spec).unwrap();
        assert_eq!(count.sequences, 4);
        assert_eq!(count.pair_mults, 4 * attention_mults_per_sequence(6, &spec));
        assert_eq!(flattened_attention_mults(&[4, 6], &spec), attention_mults_per_sequence(24, &spec));
    }
}
