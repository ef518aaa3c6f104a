use std::fmt;

use super::{strides, Tensor};
use crate::error::{Error, Result};

/// A permutation of the spatial axes of a rank-`K` tensor.
///
/// `dest(a)` is the position that source axis `a` moves to, so the cycle
/// `(1 3 2)` (one-based) sends axis 1 to position 3, axis 3 to position 2 and
/// axis 2 to position 1: an `H×W×D` tensor becomes `W×D×H`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AxisPerm {
    dest: Vec<usize>,
}

impl AxisPerm {
    pub fn identity(rank: usize) -> Self {
        Self {
            dest: (0..rank).collect(),
        }
    }

    /// Builds a permutation from the destination of every source axis (zero-based).
    pub fn from_dest(dest: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; dest.len()];
        for &d in &dest {
            if d >= dest.len() || seen[d] {
                return Err(Error::invalid(format!("{dest:?} is not a bijection")));
            }
            seen[d] = true;
        }
        Ok(Self { dest })
    }

    /// Builds a permutation from disjoint one-based cycles, e.g. `&[&[1, 3, 2]]`.
    pub fn from_cycles(rank: usize, cycles: &[&[usize]]) -> Result<Self> {
        let mut dest: Vec<usize> = (0..rank).collect();
        let mut touched = vec![false; rank];
        for cycle in cycles {
            for (n, &axis) in cycle.iter().enumerate() {
                if axis == 0 || axis > rank {
                    return Err(Error::invalid(format!(
                        "cycle element {axis} outside 1..={rank}"
                    )));
                }
                if touched[axis - 1] {
                    return Err(Error::invalid(format!("axis {axis} appears twice in cycles")));
                }
                touched[axis - 1] = true;
                let next = cycle[(n + 1) % cycle.len()];
                if next == 0 || next > rank {
                    return Err(Error::invalid(format!(
                        "cycle element {next} outside 1..={rank}"
                    )));
                }
                dest[axis - 1] = next - 1;
            }
        }
        Self::from_dest(dest)
    }

    /// Single one-based cycle.
    pub fn cycle(rank: usize, cycle: &[usize]) -> Result<Self> {
        Self::from_cycles(rank, &[cycle])
    }

    /// Swaps zero-based axes `a` and `b` (identity when equal).
    pub fn transposition(rank: usize, a: usize, b: usize) -> Self {
        let mut dest: Vec<usize> = (0..rank).collect();
        dest.swap(a, b);
        Self { dest }
    }

    /// Source axis `a` moves to position `(a + shift) mod rank`.
    pub fn rotation(rank: usize, shift: usize) -> Self {
        Self {
            dest: (0..rank).map(|a| (a + shift) % rank).collect(),
        }
    }

    /// All `rank!` permutations in lexicographic order of their destination lists.
    pub fn all(rank: usize) -> Vec<Self> {
        fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<AxisPerm>) {
            if prefix.len() == used.len() {
                out.push(AxisPerm {
                    dest: prefix.clone(),
                });
                return;
            }
            for d in 0..used.len() {
                if !used[d] {
                    used[d] = true;
                    prefix.push(d);
                    extend(prefix, used, out);
                    prefix.pop();
                    used[d] = false;
                }
            }
        }
        let mut out = Vec::new();
        extend(&mut Vec::new(), &mut vec![false; rank], &mut out);
        out
    }

    /// The `rank` rotations, starting from the identity.
    pub fn cyclic(rank: usize) -> Vec<Self> {
        (0..rank.max(1)).map(|s| Self::rotation(rank, s)).collect()
    }

    pub fn rank(&self) -> usize {
        self.dest.len()
    }

    pub fn dest(&self, axis: usize) -> usize {
        self.dest[axis]
    }

    pub fn dest_all(&self) -> &[usize] {
        &self.dest
    }

    /// The source axis that ends up at `position`.
    pub fn source(&self, position: usize) -> usize {
        self.dest.iter().position(|&d| d == position).unwrap()
    }

    pub fn is_identity(&self) -> bool {
        self.dest.iter().enumerate().all(|(a, &d)| a == d)
    }

    pub fn inverse(&self) -> Self {
        let mut dest = vec![0; self.rank()];
        for (a, &d) in self.dest.iter().enumerate() {
            dest[d] = a;
        }
        Self { dest }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &AxisPerm) -> Result<Self> {
        if self.rank() != other.rank() {
            return Err(Error::RankMismatch {
                expected: self.rank(),
                actual: other.rank(),
            });
        }
        Ok(Self {
            dest: other.dest.iter().map(|&d| self.dest[d]).collect(),
        })
    }

    /// Reorders a list of per-axis values the way `permute` reorders axes.
    pub fn apply<T: Clone>(&self, values: &[T]) -> Vec<T> {
        let mut out = values.to_vec();
        for (a, v) in values.iter().enumerate() {
            out[self.dest[a]] = v.clone();
        }
        out
    }

    /// Extends a permutation of the first `rank()` axes to `rank` axes, fixing the rest.
    pub fn extend_to(&self, rank: usize) -> Self {
        let mut dest = self.dest.clone();
        dest.extend(self.rank()..rank);
        Self { dest }
    }
}

impl fmt::Display for AxisPerm {
    /// One-based cycle notation; fixed points are omitted and the identity is `()`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut seen = vec![false; self.rank()];
        let mut wrote = false;
        for start in 0..self.rank() {
            if seen[start] || self.dest[start] == start {
                continue;
            }
            write!(f, "(")?;
            let mut a = start;
            let mut first = true;
            while !seen[a] {
                seen[a] = true;
                if !first {
                    write!(f, " ")?;
                }
                write!(f, "{}", a + 1)?;
                first = false;
                a = self.dest[a];
            }
            write!(f, ")")?;
            wrote = true;
        }
        if !wrote {
            write!(f, "()")?;
        }
        Ok(())
    }
}

/// Moves spatial axis `a` of `x` to position `p.dest(a)`; the channel axis stays last.
pub fn permute(x: &Tensor, p: &AxisPerm) -> Result<Tensor> {
    let k = x.spatial_rank();
    if p.rank() != k {
        return Err(Error::RankMismatch {
            expected: k,
            actual: p.rank(),
        });
    }
    if p.is_identity() {
        return Ok(x.clone());
    }
    let c = x.channels();
    let in_strides = strides(x.shape());
    let out_spatial = p.apply(x.spatial_shape());
    // stride in the input buffer for each output spatial axis
    let mut step = vec![0usize; k];
    for a in 0..k {
        step[p.dest(a)] = in_strides[a];
    }
    let mut data = Vec::with_capacity(x.len());
    let src = x.data();
    let mut idx = vec![0usize; k];
    let mut offset = 0usize;
    let positions: usize = out_spatial.iter().product();
    for _ in 0..positions {
        data.extend_from_slice(&src[offset..offset + c]);
        for b in (0..k).rev() {
            idx[b] += 1;
            offset += step[b];
            if idx[b] < out_spatial[b] {
                break;
            }
            offset -= step[b] * idx[b];
            idx[b] = 0;
        }
    }
    let mut shape = out_spatial;
    shape.push(c);
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cycle_notation_examples() {
        // H×W×D = 2×3×4
        let x = Tensor::zeros(&[2, 3, 4, 1]).unwrap();
        let p132 = AxisPerm::cycle(3, &[1, 3, 2]).unwrap();
        assert_eq!(permute(&x, &p132).unwrap().shape(), &[3, 4, 2, 1]);
        let p13 = AxisPerm::cycle(3, &[1, 3]).unwrap();
        assert_eq!(permute(&x, &p13).unwrap().shape(), &[4, 3, 2, 1]);
    }

    #[test]
    fn transpose_13_matches_index_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random(&[2, 3, 4, 1], &mut rng).unwrap();
        let y = permute(&x, &AxisPerm::cycle(3, &[1, 3]).unwrap()).unwrap();
        for h in 0..2 {
            for w in 0..3 {
                for d in 0..4 {
                    assert_eq!(y.get(&[d, w, h, 0]), x.get(&[h, w, d, 0]));
                }
            }
        }
    }

    #[test]
    fn permute_matches_generic_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[2, 3, 1, 4, 2], &mut rng).unwrap();
        for p in AxisPerm::all(4) {
            let y = permute(&x, &p).unwrap();
            let shape = x.shape().to_vec();
            let mut idx = vec![0usize; shape.len()];
            for _ in 0..x.len() {
                let mut out_idx = idx.clone();
                for a in 0..4 {
                    out_idx[p.dest(a)] = idx[a];
                }
                assert_eq!(y.get(&out_idx), x.get(&idx));
                super::super::increment(&mut idx, &shape);
            }
        }
    }

    #[test]
    fn identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(&[3, 2, 2], &mut rng).unwrap();
        assert_eq!(permute(&x, &AxisPerm::identity(2)).unwrap(), x);
    }

    #[test]
    fn inverse_and_compose() {
        let p = AxisPerm::cycle(3, &[1, 3, 2]).unwrap();
        assert_eq!(p.inverse(), AxisPerm::cycle(3, &[1, 2, 3]).unwrap());
        assert!(p.compose(&p.inverse()).unwrap().is_identity());
        let t = AxisPerm::cycle(3, &[1, 2]).unwrap();
        assert!(t.compose(&t).unwrap().is_identity());
        assert_eq!(AxisPerm::all(3).len(), 6);
        assert!(p.compose(&AxisPerm::identity(2)).is_err());
    }

    #[test]
    fn rejects_rank_mismatch_and_bad_cycles() {
        let x = Tensor::zeros(&[2, 2, 1]).unwrap();
        assert!(permute(&x, &AxisPerm::identity(3)).is_err());
        assert!(AxisPerm::cycle(3, &[1, 4]).is_err());
        assert!(AxisPerm::from_cycles(3, &[&[1, 2], &[2, 3]]).is_err());
        assert!(AxisPerm::from_dest(vec![0, 0]).is_err());
    }

    #[test]
    fn display_uses_cycle_notation() {
        assert_eq!(AxisPerm::cycle(3, &[1, 3, 2]).unwrap().to_string(), "(1 3 2)");
        assert_eq!(AxisPerm::identity(3).to_string(), "()");
    }
}
