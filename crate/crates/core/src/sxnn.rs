//! Set-based axial layers: one shared map applied to every permuted view of
//! the input, mapped back and aggregated.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, AxisPerm, ConvSpec, LinearSpec, PoolMode};

/// Permutation-invariant merge of branch outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => Err(Error::invalid(format!("unknown aggregation `{s}`"))),
        }
    }
}

/// Merges values in order. Mean sums first and divides once at the end.
pub fn aggregate<G: Graph>(g: &mut G, values: &[G::Value], agg: Aggregation) -> Result<G::Value> {
    let (first, rest) = values
        .split_first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let mut acc = first.clone();
    for v in rest {
        acc = match agg {
            Aggregation::Max => g.maximum(&acc, v)?,
            Aggregation::Sum | Aggregation::Mean => g.add(&acc, v)?,
        };
    }
    if agg == Aggregation::Mean && values.len() > 1 {
        acc = g.scale(&acc, 1.0 / values.len() as f64)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PermutationSet {
    /// Every ordering of the axes.
    All,
    /// The `K` rotations; each axis reaches the last position once.
    Cyclic,
}

impl PermutationSet {
    pub fn perms(self, rank: usize) -> Vec<AxisPerm> {
        match self {
            Self::All => AxisPerm::all(rank),
            Self::Cyclic => AxisPerm::cyclic(rank),
        }
    }
}

/// The shared map, acting along the last spatial axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerOp {
    /// Dense map over the fused (position, channel) features; inputs must be
    /// cubic with side `in_len`.
    Linear(LinearSpec),
    /// One-axis convolution.
    Conv(ConvSpec),
    Attention(AttentionSpec),
}

impl InnerOp {
    pub fn in_channels(&self) -> usize {
        match self {
            Self::Linear(s) => s.in_channels,
            Self::Conv(s) => s.in_channels,
            Self::Attention(s) => s.channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Linear(s) => s.out_channels,
            Self::Conv(s) => s.out_channels,
            Self::Attention(s) => s.channels,
        }
    }

    /// Length an axis of length `n` has after the layer.
    pub fn output_len(&self, n: usize) -> Result<usize> {
        match self {
            Self::Linear(s) => Ok(s.out_len),
            Self::Conv(s) => s
                .output_len(n)
                .ok_or_else(|| Error::invalid(format!("axis of length {n} is shorter than the kernel"))),
            Self::Attention(_) => Ok(n),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Linear(s) => s.param_count(),
            Self::Conv(s) => s.param_count(),
            Self::Attention(s) => s.param_count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SxLayerSpec {
    pub inner: InnerOp,
    pub aggregation: Aggregation,
    pub permutations: PermutationSet,
    /// Reduction used to bring the non-target axes to the output length.
    pub pool: PoolMode,
}

impl SxLayerSpec {
    pub fn new(inner: InnerOp, aggregation: Aggregation) -> Self {
        Self {
            inner,
            aggregation,
            permutations: PermutationSet::Cyclic,
            pool: PoolMode::Avg,
        }
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Creates the layer's parameters under `prefix`, uniform in `±sqrt(1/fan_in)`.
pub fn init_params(
    inner: &InnerOp,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<()> {
    match inner {
        InnerOp::Linear(s) => {
            store.init_uniform(format!("{prefix}.w"), &s.weight_shape(), s.fan_in(), rng)?;
            store.init_uniform(format!("{prefix}.b"), &[s.fan_out()], s.fan_in(), rng)
        }
        InnerOp::Conv(s) => {
            s.validate()?;
            let fan_in = s.taps() * s.in_channels;
            store.init_uniform(format!("{prefix}.w"), &s.weight_shape(), fan_in, rng)?;
            store.init_uniform(format!("{prefix}.b"), &[s.out_channels], fan_in, rng)
        }
        InnerOp::Attention(s) => {
            s.validate()?;
            for name in ["wq", "wk", "wv", "wo"] {
                let c = s.channels;
                store.init_uniform(format!("{prefix}.{name}"), &[c, c], c, rng)?;
            }
            Ok(())
        }
    }
}

enum Bound<V> {
    Affine(V, V),
    Attention([V; 4]),
}

fn bind<G: Graph>(g: &mut G, inner: &InnerOp, store: &ParamStore, prefix: &str) -> Result<Bound<G::Value>> {
    Ok(match inner {
        InnerOp::Linear(_) | InnerOp::Conv(_) => Bound::Affine(
            g.param(store, &format!("{prefix}.w"))?,
            g.param(store, &format!("{prefix}.b"))?,
        ),
        InnerOp::Attention(_) => Bound::Attention([
            g.param(store, &format!("{prefix}.wq"))?,
            g.param(store, &format!("{prefix}.wk"))?,
            g.param(store, &format!("{prefix}.wv"))?,
            g.param(store, &format!("{prefix}.wo"))?,
        ]),
    })
}

fn apply_inner<G: Graph>(
    g: &mut G,
    x: &G::Value,
    inner: &InnerOp,
    params: &Bound<G::Value>,
) -> Result<G::Value> {
    match (inner, params) {
        (InnerOp::Linear(s), Bound::Affine(w, b)) => g.linear(x, w, b, s),
        (InnerOp::Conv(s), Bound::Affine(w, b)) => {
            if s.arity != 1 {
                return Err(Error::invalid("axial convolution must span one axis"));
            }
            g.conv(x, w, b, s)
        }
        (InnerOp::Attention(s), Bound::Attention(w)) => g.attention(x, [&w[0], &w[1], &w[2], &w[3]], s),
        _ => unreachable!("parameters bound for a different op"),
    }
}

/// Pools or repeats each leading spatial axis of `y` to `targets`.
pub(crate) fn align_leading<G: Graph>(
    g: &mut G,
    y: G::Value,
    targets: &[usize],
    mode: PoolMode,
) -> Result<G::Value> {
    let shape = g.value(&y).shape().to_vec();
    let mut pools = Vec::new();
    let mut y = y;
    for (axis, &t) in targets.iter().enumerate() {
        let n = shape[axis];
        if t < n {
            pools.push((axis, t));
        } else if t > n {
            if t % n != 0 {
                return Err(Error::invalid(format!(
                    "cannot resize an axis of length {n} to {t}"
                )));
            }
            y = g.repeat(&y, axis, t / n)?;
        }
    }
    if pools.is_empty() {
        Ok(y)
    } else {
        g.adaptive_pool(&y, &pools, mode)
    }
}

/// `⊕_Π Π⁻¹ Align(inner(Π x))` over the configured permutation set.
pub fn sxnn_apply<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: &SxLayerSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<G::Value> {
    let shape = g.value(x).spatial_shape().to_vec();
    let k = shape.len();
    if k == 0 {
        return Err(Error::invalid("axial layers need at least one spatial axis"));
    }
    if let InnerOp::Linear(s) = &spec.inner {
        if shape.iter().any(|&n| n != s.in_len) {
            return Err(Error::invalid(format!(
                "axial linear layer needs every axis of length {}, got {shape:?}",
                s.in_len
            )));
        }
    }
    let params = bind(g, &spec.inner, store, prefix)?;
    let mut branches = Vec::new();
    for p in spec.permutations.perms(k) {
        let xp = g.permute(x, &p)?;
        let y = apply_inner(g, &xp, &spec.inner, &params)?;
        let leading = &g.value(&xp).spatial_shape()[..k - 1];
        let targets = leading
            .iter()
            .map(|&n| spec.inner.output_len(n))
            .collect::<Result<Vec<_>>>()?;
        let y = align_leading(g, y, &targets, spec.pool)?;
        branches.push(g.permute(&y, &p.inverse())?);
    }
    aggregate(g, &branches, spec.aggregation)
}

/// Linear map along each axis with the others pooled, summed over rotations.
pub fn axial_linear<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: LinearSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<G::Value> {
    let layer = SxLayerSpec::new(InnerOp::Linear(spec), Aggregation::Sum);
    sxnn_apply(g, x, &layer, store, prefix)
}

/// One-axis convolution along each axis, summed over rotations.
pub fn axial_conv<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: ConvSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<G::Value> {
    let layer = SxLayerSpec::new(InnerOp::Conv(spec), Aggregation::Sum);
    sxnn_apply(g, x, &layer, store, prefix)
}

/// Self-attention along each axis, averaged over rotations.
pub fn axial_attention<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: AttentionSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<G::Value> {
    let layer = SxLayerSpec::new(InnerOp::Attention(spec), Aggregation::Mean);
    sxnn_apply(g, x, &layer, store, prefix)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::autodiff::Eval;
    use crate::tensor::{permute, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perm_strategy(rank: usize) -> impl Strategy<Value = AxisPerm> {
        Just((0..rank).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(|dest| AxisPerm::from_dest(dest).unwrap())
    }

    proptest! {
        #[test]
        fn axial_conv_commutes_with_axis_permutations(
            p in (1usize..=4).prop_flat_map(perm_strategy),
            lengths in prop::collection::vec(1usize..=5, 4),
            seed in any::<u64>(),
        ) {
            let inner = InnerOp::Conv(ConvSpec::same(1, 3, 2, 2));
            let spec = SxLayerSpec::new(inner, Aggregation::Mean);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            init_params(&inner, &mut store, "l", &mut rng).unwrap();
            let shape: Vec<usize> = lengths[..p.rank()].iter().copied().chain([2]).collect();
            let x = Tensor::random(&shape, &mut rng).unwrap();
            let mut g = Eval::new();
            let y = sxnn_apply(&mut g, &x, &spec, &store, "l").unwrap();
            let yp = sxnn_apply(&mut g, &permute(&x, &p).unwrap(), &spec, &store, "l").unwrap();
            let want = permute(&y, &p).unwrap();
            prop_assert!(yp.max_abs_diff(&want).unwrap() <= 1e-12 * want.max_abs().max(1.0));
        }
    }
}
