//! Graph-based axial layers. A lifting layer turns one tensor into one
//! feature per axis, subsequent layers pass messages between those features,
//! and a pooling layer merges them back into one tensor.
//!
//! Feature `i` keeps the axes of the input with axis `i` swapped into the
//! last spatial position.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::sxnn::{aggregate, align_leading, Aggregation};
use crate::tensor::{AttentionSpec, AxisPerm, ConvSpec, PoolMode};

/// One tensor per source axis.
#[derive(Clone, Debug)]
pub struct AxialFeatures<V> {
    features: Vec<V>,
}

impl<V> AxialFeatures<V> {
    pub fn new(features: Vec<V>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("axial features need at least one axis"));
        }
        Ok(Self { features })
    }

    /// Spatial rank of the source input.
    pub fn rank(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[V] {
        &self.features
    }

    pub fn get(&self, i: usize) -> &V {
        &self.features[i]
    }

    pub fn into_features(self) -> Vec<V> {
        self.features
    }

    pub fn map<W>(self, f: impl FnMut(V) -> Result<W>) -> Result<AxialFeatures<W>> {
        Ok(AxialFeatures {
            features: self.features.into_iter().map(f).collect::<Result<_>>()?,
        })
    }
}

/// Swaps axis `i` with the last of `rank` axes.
pub fn to_last(rank: usize, i: usize) -> AxisPerm {
    AxisPerm::transposition(rank, i, rank - 1)
}

/// Puts axis `j` second to last and axis `i` last, keeping the remaining
/// axes in their original order in front.
pub fn pair_perm(rank: usize, i: usize, j: usize) -> AxisPerm {
    let mut dest = vec![0; rank];
    let mut next = 0;
    for (a, d) in dest.iter_mut().enumerate() {
        *d = if a == i {
            rank - 1
        } else if a == j {
            rank - 2
        } else {
            next += 1;
            next - 1
        };
    }
    AxisPerm::from_dest(dest).expect("pair_perm builds a bijection")
}

/// How permuting the input rearranges lifted features: feature `i` of `x`
/// becomes feature `p(i)` of `p(x)`, with its axes permuted by the returned
/// permutation, which always fixes the last axis.
pub fn induced_perm(p: &AxisPerm, i: usize) -> (usize, AxisPerm) {
    let k = p.rank();
    let target = p.dest(i);
    let inner = to_last(k, target)
        .compose(p)
        .and_then(|q| q.compose(&to_last(k, i).inverse()))
        .expect("ranks agree");
    (target, inner)
}

/// Rearranges features the way permuting the source input by `p` would.
pub fn permute_features<G: Graph>(
    g: &mut G,
    h: &AxialFeatures<G::Value>,
    p: &AxisPerm,
) -> Result<AxialFeatures<G::Value>> {
    let k = h.rank();
    if p.rank() != k {
        return Err(Error::RankMismatch {
            expected: k,
            actual: p.rank(),
        });
    }
    let mut out: Vec<Option<G::Value>> = vec![None; k];
    for (i, f) in h.features().iter().enumerate() {
        let (t, q) = induced_perm(p, i);
        out[t] = Some(g.permute(f, &q)?);
    }
    AxialFeatures::new(out.into_iter().map(Option::unwrap).collect())
}

/// The node update `φ(node, message)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Combine {
    /// Returns the aggregated message.
    Message,
    /// `node + message`.
    Residual,
    /// Element-wise maximum of node and message.
    Max,
}

impl Combine {
    pub fn name(self) -> &'static str {
        match self {
            Self::Message => "message",
            Self::Residual => "residual",
            Self::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "message" => Ok(Self::Message),
            "residual" => Ok(Self::Residual),
            "max" => Ok(Self::Max),
            _ => Err(Error::invalid(format!("unknown combine `{s}`"))),
        }
    }

    fn apply<G: Graph>(self, g: &mut G, node: &G::Value, msg: Option<&G::Value>) -> Result<G::Value> {
        let Some(msg) = msg else {
            return Ok(node.clone());
        };
        match self {
            Self::Message => Ok(msg.clone()),
            Self::Residual => g.add(node, msg),
            Self::Max => g.maximum(node, msg),
        }
    }
}

/// Learned map used inside the graph layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MessageOp {
    /// Convolution along the last axis.
    Conv1d(ConvSpec),
    /// Convolution over the last axis paired with each other axis in turn,
    /// merged with `merge`. A single axis is first repeated to the kernel
    /// size along a synthetic axis and averaged back afterwards.
    PairConv { conv: ConvSpec, merge: Aggregation },
    /// Self-attention along the last axis.
    Attention(AttentionSpec),
}

impl MessageOp {
    pub fn output_len(&self, n: usize) -> Result<usize> {
        match self {
            Self::Conv1d(c) | Self::PairConv { conv: c, .. } => c
                .output_len(n)
                .ok_or_else(|| Error::invalid(format!("axis of length {n} is shorter than the kernel"))),
            Self::Attention(_) => Ok(n),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Conv1d(c) | Self::PairConv { conv: c, .. } => c.param_count(),
            Self::Attention(a) => a.param_count(),
        }
    }

    fn expected_arity(&self) -> usize {
        match self {
            Self::Conv1d(_) | Self::Attention(_) => 1,
            Self::PairConv { .. } => 2,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        match self {
            Self::Conv1d(c) | Self::PairConv { conv: c, .. } => {
                c.validate()?;
                if c.arity != self.expected_arity() {
                    return Err(Error::invalid(format!(
                        "convolution spans {} axes, expected {}",
                        c.arity,
                        self.expected_arity()
                    )));
                }
                let fan_in = c.taps() * c.in_channels;
                store.init_uniform(format!("{prefix}.w"), &c.weight_shape(), fan_in, rng)?;
                store.init_uniform(format!("{prefix}.b"), &[c.out_channels], fan_in, rng)
            }
            Self::Attention(a) => {
                a.validate()?;
                for name in ["wq", "wk", "wv", "wo"] {
                    let c = a.channels;
                    store.init_uniform(format!("{prefix}.{name}"), &[c, c], c, rng)?;
                }
                Ok(())
            }
        }
    }
}

enum Bound<V> {
    Affine(V, V),
    Attention([V; 4]),
}

struct BoundOp<V> {
    op: MessageOp,
    params: Bound<V>,
    pool: PoolMode,
}

impl<V: Clone> BoundOp<V> {
    fn bind<G: Graph<Value = V>>(
        g: &mut G,
        op: MessageOp,
        pool: PoolMode,
        store: &ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        let params = match op {
            MessageOp::Conv1d(_) | MessageOp::PairConv { .. } => Bound::Affine(
                g.param(store, &format!("{prefix}.w"))?,
                g.param(store, &format!("{prefix}.b"))?,
            ),
            MessageOp::Attention(_) => Bound::Attention([
                g.param(store, &format!("{prefix}.wq"))?,
                g.param(store, &format!("{prefix}.wk"))?,
                g.param(store, &format!("{prefix}.wv"))?,
                g.param(store, &format!("{prefix}.wo"))?,
            ]),
        };
        Ok(Self { op, params, pool })
    }

    /// Applies the op; equivariant to permutations of all but the last axis,
    /// and maps every axis length through [`MessageOp::output_len`].
    fn apply<G: Graph<Value = V>>(&self, g: &mut G, x: &V) -> Result<V> {
        let k = g.value(x).spatial_rank();
        match (&self.op, &self.params) {
            (MessageOp::Conv1d(c), Bound::Affine(w, b)) => {
                let y = g.conv(x, w, b, c)?;
                self.align(g, x, y, k - 1)
            }
            (MessageOp::Attention(a), Bound::Attention(w)) => {
                g.attention(x, [&w[0], &w[1], &w[2], &w[3]], a)
            }
            (MessageOp::PairConv { conv, merge }, Bound::Affine(w, b)) => {
                if k == 1 {
                    return augment_1d(g, x, conv.kernel_size, |g, x2| g.conv(x2, w, b, conv));
                }
                let mut branches = Vec::new();
                for m in 0..k - 1 {
                    let q = AxisPerm::transposition(k, m, k - 2);
                    let xq = g.permute(x, &q)?;
                    let y = g.conv(&xq, w, b, conv)?;
                    let y = self.align(g, &xq, y, k - 2)?;
                    branches.push(g.permute(&y, &q)?);
                }
                aggregate(g, &branches, *merge)
            }
            _ => unreachable!("parameters bound for a different op"),
        }
    }

    /// Brings the first `leading` axes of `y` (computed from `x`) to their
    /// mapped lengths.
    fn align<G: Graph<Value = V>>(&self, g: &mut G, x: &V, y: V, leading: usize) -> Result<V> {
        let targets = g.value(x).spatial_shape()[..leading]
            .iter()
            .map(|&n| self.op.output_len(n))
            .collect::<Result<Vec<_>>>()?;
        align_leading(g, y, &targets, self.pool)
    }
}

/// Repeats a single-axis tensor `factor` times along a new leading axis,
/// applies `f`, and averages the new axis away.
fn augment_1d<G: Graph>(
    g: &mut G,
    x: &G::Value,
    factor: usize,
    f: impl FnOnce(&mut G, &G::Value) -> Result<G::Value>,
) -> Result<G::Value> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::RankMismatch {
            expected: 1,
            actual: shape.len() - 1,
        });
    }
    let x2 = g.reshape(x, &[1, shape[0], shape[1]])?;
    let x2 = g.repeat(&x2, 0, factor)?;
    let y = f(g, &x2)?;
    let y = g.adaptive_pool(&y, &[(0, 1)], PoolMode::Avg)?;
    let out = g.value(&y).shape()[1..].to_vec();
    g.reshape(&y, &out)
}

/// ψ of a lifting layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LiftOp {
    /// Convolution over the last two axes.
    Conv2d(ConvSpec),
    /// Self-attention along the last axis.
    Attention(AttentionSpec),
}

impl LiftOp {
    fn as_message(&self) -> MessageOp {
        match *self {
            Self::Conv2d(conv) => MessageOp::PairConv {
                conv,
                merge: Aggregation::Sum,
            },
            Self::Attention(a) => MessageOp::Attention(a),
        }
    }

    pub fn output_len(&self, n: usize) -> Result<usize> {
        self.as_message().output_len(n)
    }

    pub fn param_count(&self) -> usize {
        self.as_message().param_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiftSpec {
    pub psi: LiftOp,
    pub combine: Combine,
    pub aggregation: Aggregation,
    /// Reduction bringing the axes outside each pair to the output length.
    pub pool: PoolMode,
}

impl LiftSpec {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        self.psi.as_message().init_params(store, &format!("{prefix}.psi"), rng)
    }

    pub fn param_count(&self) -> usize {
        self.psi.param_count()
    }
}

/// Applies ψ with the leading axes as batch.
fn apply_lift_op<G: Graph>(g: &mut G, x: &G::Value, psi: &BoundOp<G::Value>) -> Result<G::Value> {
    match (&psi.op, &psi.params) {
        (MessageOp::PairConv { conv, .. }, Bound::Affine(w, b)) => {
            if g.value(x).spatial_rank() == 1 {
                augment_1d(g, x, conv.kernel_size, |g, x2| g.conv(x2, w, b, conv))
            } else {
                g.conv(x, w, b, conv)
            }
        }
        _ => psi.apply(g, x),
    }
}

/// Lifts a tensor of rank `K ≥ 2` to `K` axial features. Feature `i`
/// aggregates, over every other axis `j`, ψ applied with axes `j` and `i`
/// in the last two positions; axes outside the pair are pooled.
pub fn lift<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: &LiftSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<AxialFeatures<G::Value>> {
    let k = g.value(x).spatial_rank();
    if k < 2 {
        return Err(Error::invalid("lift needs spatial rank at least 2; use lift_1d"));
    }
    let psi = BoundOp::bind(g, spec.psi.as_message(), spec.pool, store, &format!("{prefix}.psi"))?;
    let lengths = g.value(x).spatial_shape().to_vec();
    let mut features = Vec::with_capacity(k);
    for i in 0..k {
        let back = to_last(k, i);
        let mut branches = Vec::with_capacity(k - 1);
        for j in (0..k).filter(|&j| j != i) {
            let p = pair_perm(k, i, j);
            let xp = g.permute(x, &p)?;
            let y = apply_lift_op(g, &xp, &psi)?;
            let leading: Vec<usize> = p.apply(&lengths)[..k - 2]
                .iter()
                .map(|&n| spec.psi.output_len(n))
                .collect::<Result<_>>()?;
            let y = align_leading(g, y, &leading, spec.pool)?;
            branches.push(g.permute(&y, &back.compose(&p.inverse())?)?);
        }
        let msg = aggregate(g, &branches, spec.aggregation)?;
        let node = g.permute(x, &back)?;
        features.push(spec.combine.apply(g, &node, Some(&msg))?);
    }
    AxialFeatures::new(features)
}

/// Lifting for a single spatial axis: the input is repeated along a
/// synthetic axis to ψ's kernel size, ψ runs over both, and the synthetic
/// axis is averaged away.
pub fn lift_1d<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: &LiftSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<AxialFeatures<G::Value>> {
    let k = g.value(x).spatial_rank();
    if k != 1 {
        return Err(Error::RankMismatch {
            expected: 1,
            actual: k,
        });
    }
    let psi = BoundOp::bind(g, spec.psi.as_message(), spec.pool, store, &format!("{prefix}.psi"))?;
    let msg = apply_lift_op(g, x, &psi)?;
    let h = spec.combine.apply(g, x, Some(&msg))?;
    AxialFeatures::new(vec![h])
}

/// Dispatches to [`lift`] or [`lift_1d`] by rank.
pub fn lift_any<G: Graph>(
    g: &mut G,
    x: &G::Value,
    spec: &LiftSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<AxialFeatures<G::Value>> {
    if g.value(x).spatial_rank() == 1 {
        lift_1d(g, x, spec, store, prefix)
    } else {
        lift(g, x, spec, store, prefix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsequentSpec {
    /// ψ, producing each feature's outgoing message.
    pub message: MessageOp,
    /// Optional map applied to a feature before it is combined with its
    /// incoming messages; `None` passes the feature through.
    pub node: Option<MessageOp>,
    pub combine: Combine,
    pub aggregation: Aggregation,
    /// Whether a feature also receives its own message.
    pub self_edge: bool,
    pub pool: PoolMode,
}

impl SubsequentSpec {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        if let Some(node) = &self.node {
            node.init_params(store, &format!("{prefix}.node"), rng)?;
        }
        self.message.init_params(store, &format!("{prefix}.msg"), rng)
    }

    pub fn param_count(&self) -> usize {
        self.message.param_count() + self.node.map_or(0, |n| n.param_count())
    }
}

/// One round of message passing between axial features: feature `i`
/// receives `⊕_j ψ(h_j)`, each message brought into `i`'s axis order.
pub fn subsequent<G: Graph>(
    g: &mut G,
    h: &AxialFeatures<G::Value>,
    spec: &SubsequentSpec,
    store: &ParamStore,
    prefix: &str,
) -> Result<AxialFeatures<G::Value>> {
    let k = h.rank();
    for f in h.features() {
        if g.value(f).spatial_rank() != k {
            return Err(Error::RankMismatch {
                expected: k,
                actual: g.value(f).spatial_rank(),
            });
        }
    }
    let psi = BoundOp::bind(g, spec.message, spec.pool, store, &format!("{prefix}.msg"))?;
    let node_op = match spec.node {
        Some(op) => Some(BoundOp::bind(g, op, spec.pool, store, &format!("{prefix}.node"))?),
        None => None,
    };
    // every message in the source axis order
    let mut msgs = Vec::with_capacity(k);
    for (j, f) in h.features().iter().enumerate() {
        let m = psi.apply(g, f)?;
        msgs.push(g.permute(&m, &to_last(k, j).inverse())?);
    }
    let shared = if spec.self_edge {
        Some(aggregate(g, &msgs, spec.aggregation)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(k);
    for (i, f) in h.features().iter().enumerate() {
        let incoming = match &shared {
            Some(m) => Some(m.clone()),
            None if k > 1 => {
                let others: Vec<_> = (0..k).filter(|&j| j != i).map(|j| msgs[j].clone()).collect();
                Some(aggregate(g, &others, spec.aggregation)?)
            }
            None => None,
        };
        let incoming = match incoming {
            Some(m) => Some(g.permute(&m, &to_last(k, i))?),
            None => None,
        };
        let node = match &node_op {
            Some(op) => op.apply(g, f)?,
            None => f.clone(),
        };
        if let Some(m) = &incoming {
            let (a, b) = (g.value(&node).shape(), g.value(m).shape());
            if a != b {
                return Err(Error::ShapeMismatch {
                    expected: a.to_vec(),
                    actual: b.to_vec(),
                });
            }
        }
        out.push(spec.combine.apply(g, &node, incoming.as_ref())?);
    }
    AxialFeatures::new(out)
}

/// Applies a shape-preserving pointwise map to every feature.
pub fn map_features<G: Graph>(
    g: &mut G,
    h: AxialFeatures<G::Value>,
    mut f: impl FnMut(&mut G, &G::Value) -> Result<G::Value>,
) -> Result<AxialFeatures<G::Value>> {
    h.map(|v| f(g, &v))
}

/// Merges the features back into the source axis order: `⊕_i T_i⁻¹ h_i`.
pub fn pool_features<G: Graph>(
    g: &mut G,
    h: &AxialFeatures<G::Value>,
    agg: Aggregation,
) -> Result<G::Value> {
    let k = h.rank();
    let mut parts = Vec::with_capacity(k);
    for (i, f) in h.features().iter().enumerate() {
        let shape = g.value(f).spatial_rank();
        if shape != k {
            return Err(Error::RankMismatch {
                expected: k,
                actual: shape,
            });
        }
        parts.push(g.permute(f, &to_last(k, i).inverse())?);
    }
    let first = g.value(&parts[0]).shape().to_vec();
    for p in &parts[1..] {
        if g.value(p).shape() != first.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: first,
                actual: g.value(p).shape().to_vec(),
            });
        }
    }
    aggregate(g, &parts, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;
    use crate::tensor::{conv_lastaxes, permute, Padding, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(arity: usize, k: usize, padding: Padding, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec {
            kernel_size: k,
            stride: 1,
            padding,
            in_channels: cin,
            out_channels: cout,
            arity,
        }
    }

    fn lift_spec(c: ConvSpec) -> LiftSpec {
        LiftSpec {
            psi: LiftOp::Conv2d(c),
            combine: Combine::Message,
            aggregation: Aggregation::Sum,
            pool: PoolMode::Avg,
        }
    }

    fn p1(rank: usize, cycle: &[usize]) -> AxisPerm {
        AxisPerm::cycle(rank, cycle).unwrap()
    }

    #[test]
    fn pair_perms_match_the_three_axis_expansion() {
        // feature H pairs with W and D, feature W with H and D, feature D with H and W
        assert_eq!(pair_perm(3, 0, 1), p1(3, &[1, 3]));
        assert_eq!(pair_perm(3, 0, 2), p1(3, &[1, 3, 2]));
        assert_eq!(pair_perm(3, 1, 0), p1(3, &[1, 2, 3]));
        assert_eq!(pair_perm(3, 1, 2), p1(3, &[2, 3]));
        assert_eq!(pair_perm(3, 2, 0), p1(3, &[1, 2]));
        assert_eq!(pair_perm(3, 2, 1), AxisPerm::identity(3));
        assert_eq!(to_last(3, 0), p1(3, &[1, 3]));
        assert_eq!(to_last(3, 2), AxisPerm::identity(3));
    }

    #[test]
    fn induced_perm_basics() {
        assert_eq!(induced_perm(&AxisPerm::identity(3), 1), (1, AxisPerm::identity(3)));
        let swap = AxisPerm::transposition(2, 0, 1);
        assert_eq!(induced_perm(&swap, 0), (1, AxisPerm::identity(2)));
        assert_eq!(induced_perm(&swap, 1), (0, AxisPerm::identity(2)));
        for p in AxisPerm::all(4) {
            for i in 0..4 {
                let (t, q) = induced_perm(&p, i);
                assert_eq!(t, p.dest(i));
                assert_eq!(q.dest(3), 3);
            }
        }
    }

    fn setup(spec: &LiftSpec, seed: u64) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        spec.init_params(&mut store, "lift", &mut rng).unwrap();
        (store, rng)
    }

    #[test]
    fn two_dimensional_lift_is_one_conv_per_orientation() {
        let c = conv(2, 3, Padding::Same, 1, 2);
        let spec = lift_spec(c);
        let (store, mut rng) = setup(&spec, 61);
        let x = Tensor::random(&[4, 5, 1], &mut rng).unwrap();
        let h = lift(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        let (w, b) = (store.get("lift.psi.w").unwrap(), store.get("lift.psi.b").unwrap());
        let swap = AxisPerm::transposition(2, 0, 1);
        let xt = permute(&x, &swap).unwrap();
        assert_eq!(h.get(0), &conv_lastaxes(&xt, w, b, &c).unwrap());
        assert_eq!(h.get(1), &conv_lastaxes(&x, w, b, &c).unwrap());
    }

    #[test]
    fn three_dimensional_lift_transcription() {
        let c = conv(2, 2, Padding::Valid, 1, 2);
        let spec = lift_spec(c);
        let (store, mut rng) = setup(&spec, 62);
        let x = Tensor::random(&[3, 4, 5, 1], &mut rng).unwrap();
        let h = lift(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        let (w, b) = (store.get("lift.psi.w").unwrap(), store.get("lift.psi.b").unwrap());
        let term = |t: &AxisPerm| -> Tensor {
            let y = conv_lastaxes(&permute(&x, t).unwrap(), w, b, &c).unwrap();
            let n = y.shape()[0];
            crate::tensor::adaptive_pool(&y, &[(0, c.output_len(n).unwrap())], PoolMode::Avg).unwrap()
        };
        let id = AxisPerm::identity(3);
        let (t13, t132, t23, t123, t12) = (
            p1(3, &[1, 3]),
            p1(3, &[1, 3, 2]),
            p1(3, &[2, 3]),
            p1(3, &[1, 2, 3]),
            p1(3, &[1, 2]),
        );
        let back = |outer: &AxisPerm, t: &AxisPerm| permute(&term(t), &outer.compose(&t.inverse()).unwrap()).unwrap();
        let h_h = back(&t13, &t13).add(&back(&t13, &t132)).unwrap();
        let h_w = back(&t23, &t23).add(&back(&t23, &t123)).unwrap();
        let h_d = back(&id, &id).add(&back(&id, &t12)).unwrap();
        for (got, want) in h.features().iter().zip([h_h, h_w, h_d]) {
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        }
        assert_eq!(h.get(0).shape(), &[4, 3, 2, 2]);
    }

    #[test]
    fn constant_cube_lifts_to_identical_features() {
        let spec = lift_spec(conv(2, 3, Padding::Same, 1, 2));
        let (store, _) = setup(&spec, 63);
        let x = Tensor::full(&[4, 4, 4, 1], 0.7).unwrap();
        let h = lift(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        for f in &h.features()[1..] {
            assert!(f.max_abs_diff(h.get(0)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn one_dimensional_lift_uses_the_row_summed_kernel() {
        let c = conv(2, 3, Padding::Valid, 2, 2);
        let spec = lift_spec(c);
        let (store, mut rng) = setup(&spec, 64);
        let x = Tensor::random(&[9, 2], &mut rng).unwrap();
        let h = lift_1d(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        let w = store.get("lift.psi.w").unwrap();
        // taps are laid out row-major over (synthetic, axis); sum the synthetic rows
        let per_tap = 2 * 2;
        let summed = Tensor::from_fn(&[3, 2, 2], |i| {
            (0..3).map(|r| w.data()[(r * 3 + i[0]) * per_tap + i[1] * 2 + i[2]]).sum::<f64>()
        })
        .unwrap();
        let c1 = ConvSpec { arity: 1, ..c };
        let want = conv_lastaxes(&x, &summed, store.get("lift.psi.b").unwrap(), &c1).unwrap();
        assert_eq!(h.get(0).shape(), &[7, 2]);
        assert!(h.get(0).max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn pointwise_psi_on_one_axis_is_pointwise() {
        let c = conv(2, 1, Padding::Valid, 1, 3);
        let spec = lift_spec(c);
        let (store, mut rng) = setup(&spec, 65);
        let x = Tensor::random(&[5, 1], &mut rng).unwrap();
        let h = lift_1d(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        let c1 = ConvSpec { arity: 1, ..c };
        let want = conv_lastaxes(&x, store.get("lift.psi.w").unwrap(), store.get("lift.psi.b").unwrap(), &c1).unwrap();
        assert!(h.get(0).max_abs_diff(&want).unwrap() <= 1e-15);
    }

    #[test]
    fn zero_message_with_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let spec = SubsequentSpec {
            message: MessageOp::Conv1d(conv(1, 3, Padding::Same, 2, 2)),
            node: None,
            combine: Combine::Residual,
            aggregation: Aggregation::Sum,
            self_edge: true,
            pool: PoolMode::Avg,
        };
        let mut store = ParamStore::new();
        store.insert("s.msg.w", Tensor::zeros(&[3, 2, 2]).unwrap()).unwrap();
        store.insert("s.msg.b", Tensor::zeros(&[2]).unwrap()).unwrap();
        let feats: Vec<Tensor> = (0..3).map(|_| Tensor::random(&[3, 3, 3, 2], &mut rng).unwrap()).collect();
        let h = AxialFeatures::new(feats.clone()).unwrap();
        let out = subsequent(&mut Eval::new(), &h, &spec, &store, "s").unwrap();
        assert_eq!(out.into_features(), feats);
    }

    #[test]
    fn attention_messages_match_the_expanded_and_shared_forms() {
        let a = AttentionSpec { channels: 2, heads: 1 };
        let spec = SubsequentSpec {
            message: MessageOp::Attention(a),
            node: None,
            combine: Combine::Residual,
            aggregation: Aggregation::Sum,
            self_edge: true,
            pool: PoolMode::Avg,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut store = ParamStore::new();
        spec.init_params(&mut store, "s", &mut rng).unwrap();
        let feats: Vec<Tensor> = (0..3).map(|_| Tensor::random(&[3, 3, 3, 2], &mut rng).unwrap()).collect();
        let h = AxialFeatures::new(feats.clone()).unwrap();
        let out = subsequent(&mut Eval::new(), &h, &spec, &store, "s").unwrap();
        let weights = crate::tensor::AttentionWeights {
            wq: store.get("s.msg.wq").unwrap(),
            wk: store.get("s.msg.wk").unwrap(),
            wv: store.get("s.msg.wv").unwrap(),
            wo: store.get("s.msg.wo").unwrap(),
        };
        let attn = |t: &Tensor| crate::tensor::self_attention_lastaxis(t, &weights, &a).unwrap();
        let t = [p1(3, &[1, 3]), p1(3, &[2, 3]), AxisPerm::identity(3)];
        // expanded: h'_i = h_i + Σ_j T_i T_j⁻¹ attn(h_j)
        for i in 0..3 {
            let mut want = feats[i].clone();
            for j in 0..3 {
                let q = t[i].compose(&t[j].inverse()).unwrap();
                want = want.add(&permute(&attn(&feats[j]), &q).unwrap()).unwrap();
            }
            assert!(out.get(i).max_abs_diff(&want).unwrap() <= 1e-12);
        }
        // shared: m = Σ_j T_j⁻¹ attn(h_j), h'_i = h_i + T_i m
        let mut m = permute(&attn(&feats[0]), &t[0].inverse()).unwrap();
        for j in 1..3 {
            m = m.add(&permute(&attn(&feats[j]), &t[j].inverse()).unwrap()).unwrap();
        }
        for i in 0..3 {
            let want = feats[i].add(&permute(&m, &t[i]).unwrap()).unwrap();
            assert!(out.get(i).max_abs_diff(&want).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn single_feature_message_passing() {
        let c = conv(1, 3, Padding::Same, 2, 2);
        let spec = SubsequentSpec {
            message: MessageOp::Conv1d(c),
            node: None,
            combine: Combine::Residual,
            aggregation: Aggregation::Sum,
            self_edge: true,
            pool: PoolMode::Avg,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let mut store = ParamStore::new();
        spec.init_params(&mut store, "s", &mut rng).unwrap();
        let x = Tensor::random(&[6, 2], &mut rng).unwrap();
        let h = AxialFeatures::new(vec![x.clone()]).unwrap();
        let out = subsequent(&mut Eval::new(), &h, &spec, &store, "s").unwrap();
        let msg = conv_lastaxes(&x, store.get("s.msg.w").unwrap(), store.get("s.msg.b").unwrap(), &c).unwrap();
        assert_eq!(out.get(0), &x.add(&msg).unwrap());
    }

    #[test]
    fn pooling_single_and_symmetric_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let x = Tensor::random(&[5, 2], &mut rng).unwrap();
        let h = AxialFeatures::new(vec![x.clone()]).unwrap();
        assert_eq!(pool_features(&mut Eval::new(), &h, Aggregation::Sum).unwrap(), x);
        let c = Tensor::full(&[3, 3, 1], 1.5).unwrap();
        let h = AxialFeatures::new(vec![c.clone(), c.clone()]).unwrap();
        assert_eq!(pool_features(&mut Eval::new(), &h, Aggregation::Sum).unwrap(), c.scale(2.0));
        assert_eq!(pool_features(&mut Eval::new(), &h, Aggregation::Max).unwrap(), c);
        assert_eq!(pool_features(&mut Eval::new(), &h, Aggregation::Mean).unwrap(), c);
    }

    #[test]
    fn non_cubic_features_have_permuted_shapes() {
        let spec = lift_spec(conv(2, 3, Padding::Same, 1, 2));
        let (store, mut rng) = setup(&spec, 70);
        let x = Tensor::random(&[3, 4, 5, 1], &mut rng).unwrap();
        let h = lift(&mut Eval::new(), &x, &spec, &store, "lift").unwrap();
        assert_eq!(h.get(0).shape(), &[5, 4, 3, 2]);
        assert_eq!(h.get(1).shape(), &[3, 5, 4, 2]);
        assert_eq!(h.get(2).shape(), &[3, 4, 5, 2]);
        let pooled = pool_features(&mut Eval::new(), &h, Aggregation::Max).unwrap();
        assert_eq!(pooled.shape(), &[3, 4, 5, 2]);
    }
}
