//! The three classifiers of the toy benchmark: a plain 3D CNN and the two
//! axial CNNs, which accept inputs of any spatial rank.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eval, Graph, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::gxnn::{
    lift_any, map_features, pool_features, subsequent, AxialFeatures, Combine, LiftOp, LiftSpec,
    MessageOp, SubsequentSpec,
};
use crate::sxnn::{sxnn_apply, Aggregation, InnerOp, PermutationSet, SxLayerSpec};
use crate::tensor::{Activation, ConvSpec, LinearSpec, PoolMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnn3d,
    Sxcnn,
    Gxcnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [Self::Cnn3d, Self::Sxcnn, Self::Gxcnn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cnn3d => "cnn3d",
            Self::Sxcnn => "sxcnn",
            Self::Gxcnn => "gxcnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind `{s}`")))
    }

    /// Whether the model's output ignores the order of the input axes.
    pub fn is_axial(self) -> bool {
        self != Self::Cnn3d
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Depth 4, width 128 for both axial models; the baseline keeps 3 × 32.
    Table1,
    /// 3 × 32 baseline, 5 × 64 set-based, lift + 4 × 32 graph-based.
    AppendixD,
    /// Small matched sizes that train in minutes on one core.
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Self::Table1, Self::AppendixD, Self::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::AppendixD => "appendixD",
            Self::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset `{s}`")))
    }

    /// `(depth, hidden)` for a model kind.
    pub fn size(self, kind: ModelKind) -> (usize, usize) {
        match (self, kind) {
            (Self::Desk, _) => (3, 8),
            (_, ModelKind::Cnn3d) => (3, 32),
            (Self::Table1, _) => (4, 128),
            (Self::AppendixD, ModelKind::Sxcnn) => (5, 64),
            (Self::AppendixD, ModelKind::Gxcnn) => (5, 32),
        }
    }
}

/// Declarative model description; serialises as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub preset: Option<Preset>,
    /// Layer count. For the graph-based model this includes the lifting layer.
    pub depth: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Length the baseline zero-pads a missing third axis to.
    pub pad_depth: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(kind: ModelKind, preset: Preset) -> Self {
        let (depth, hidden) = preset.size(kind);
        Self {
            kind,
            preset: Some(preset),
            depth,
            hidden,
            kernel: 3,
            pad_depth: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.kernel == 0 || self.pad_depth == 0 {
            return Err(Error::invalid(
                "depth, hidden, kernel and pad_depth must be positive",
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("kind={}\n", self.kind);
        if let Some(p) = self.preset {
            s += &format!("preset={}\n", p.name());
        }
        s += &format!(
            "depth={}\nhidden={}\nkernel={}\npad_depth={}\nseed={}\n",
            self.depth, self.hidden, self.kernel, self.pad_depth, self.seed
        );
        s
    }

    /// Parses `key=value` lines. A `preset` supplies defaults that any other
    /// key overrides; `kind` is required. Blank lines and `#` comments are
    /// skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got `{line}`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let kind = ModelKind::parse(get("kind").ok_or_else(|| Error::invalid("missing `kind`"))?)?;
        let mut cfg = match get("preset") {
            Some(p) => Self::preset(kind, Preset::parse(p)?),
            None => Self {
                preset: None,
                ..Self::preset(kind, Preset::Desk)
            },
        };
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::invalid(format!("`{v}` is not a non-negative integer")))
        };
        for (k, v) in &pairs {
            match *k {
                "kind" | "preset" => {}
                "depth" => cfg.depth = num(v)?,
                "hidden" => cfg.hidden = num(v)?,
                "kernel" => cfg.kernel = num(v)?,
                "pad_depth" => cfg.pad_depth = num(v)?,
                "seed" => cfg.seed = num(v)? as u64,
                other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn sx_layer(cfg: &ModelConfig, l: usize) -> SxLayerSpec {
    let cin = if l == 0 { 1 } else { cfg.hidden };
    SxLayerSpec {
        inner: InnerOp::Conv(ConvSpec::same(1, cfg.kernel, cin, cfg.hidden)),
        aggregation: Aggregation::Max,
        permutations: PermutationSet::Cyclic,
        pool: PoolMode::Max,
    }
}

fn gx_lift(cfg: &ModelConfig) -> LiftSpec {
    LiftSpec {
        psi: LiftOp::Conv2d(ConvSpec::same(2, cfg.kernel, 1, cfg.hidden)),
        combine: Combine::Message,
        aggregation: Aggregation::Max,
        pool: PoolMode::Max,
    }
}

fn gx_layer(cfg: &ModelConfig) -> SubsequentSpec {
    let pair = MessageOp::PairConv {
        conv: ConvSpec::same(2, cfg.kernel, cfg.hidden, cfg.hidden),
        merge: Aggregation::Max,
    };
    SubsequentSpec {
        message: pair,
        node: Some(pair),
        combine: Combine::Max,
        aggregation: Aggregation::Max,
        self_edge: false,
        pool: PoolMode::Max,
    }
}

fn cnn_layer(cfg: &ModelConfig, l: usize) -> ConvSpec {
    let cin = if l == 0 { 1 } else { cfg.hidden };
    ConvSpec::same(3, cfg.kernel, cin, cfg.hidden)
}

fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)?)?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c])?)
}

fn head_spec(c: usize) -> LinearSpec {
    LinearSpec {
        in_len: 1,
        out_len: 1,
        in_channels: c,
        out_channels: 1,
    }
}

/// Builds a model with freshly initialised parameters from `config.seed`.
pub fn build(config: &ModelConfig) -> Result<BuiltModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ParamStore::new();
    match config.kind {
        ModelKind::Cnn3d => {
            for l in 0..config.depth {
                let c = cnn_layer(config, l);
                let fan_in = c.taps() * c.in_channels;
                p.init_uniform(format!("conv{l}.w"), &c.weight_shape(), fan_in, &mut rng)?;
                p.init_uniform(format!("conv{l}.b"), &[c.out_channels], fan_in, &mut rng)?;
                init_norm(&mut p, &format!("conv{l}.ln"), config.hidden)?;
            }
        }
        ModelKind::Sxcnn => {
            for l in 0..config.depth {
                crate::sxnn::init_params(&sx_layer(config, l).inner, &mut p, &format!("sx{l}"), &mut rng)?;
                init_norm(&mut p, &format!("sx{l}.ln"), config.hidden)?;
            }
        }
        ModelKind::Gxcnn => {
            gx_lift(config).init_params(&mut p, "lift", &mut rng)?;
            init_norm(&mut p, "lift.ln", config.hidden)?;
            for l in 1..config.depth {
                gx_layer(config).init_params(&mut p, &format!("xconv{l}"), &mut rng)?;
                init_norm(&mut p, &format!("xconv{l}.ln"), config.hidden)?;
            }
        }
    }
    let head = head_spec(config.hidden);
    p.init_uniform("head.w", &head.weight_shape(), head.fan_in(), &mut rng)?;
    p.init_uniform("head.b", &[1], head.fan_in(), &mut rng)?;
    Ok(BuiltModel {
        config: config.clone(),
        params: p,
    })
}

/// Reshapes input of spatial rank 2 to 5 to rank 3 for the 3D baseline:
/// rank 2 gains a third axis zero-padded to `pad_depth`, rank 3 passes
/// through, ranks 4 and 5 fold every axis from the third on into the third.
pub fn adapt_input_cnn3d(x: &Tensor, pad_depth: usize) -> Result<Tensor> {
    let s = x.shape();
    match x.spatial_rank() {
        2 => {
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut out = Tensor::zeros(&[h, w, pad_depth.max(1), c])?;
            let d = pad_depth.max(1);
            let data = out.data_mut();
            for (row, chunk) in x.data().chunks_exact(c).enumerate() {
                let base = row * d * c;
                data[base..base + c].copy_from_slice(chunk);
            }
            Ok(out)
        }
        3 => Ok(x.clone()),
        4 | 5 => {
            let folded: usize = s[2..s.len() - 1].iter().product();
            x.reshape(&[s[0], s[1], folded, s[s.len() - 1]])
        }
        k => Err(Error::invalid(format!(
            "the 3D baseline accepts spatial rank 2 to 5, got {k}"
        ))),
    }
}

fn norm_relu<G: Graph>(g: &mut G, x: &G::Value, p: &ParamStore, prefix: &str) -> Result<G::Value> {
    let gamma = g.param(p, &format!("{prefix}.gamma"))?;
    let beta = g.param(p, &format!("{prefix}.beta"))?;
    let y = g.layer_norm(x, &gamma, &beta)?;
    g.activation(&y, Activation::Relu)
}

/// Max over every spatial position, then the dense head.
fn head<G: Graph>(g: &mut G, x: &G::Value, p: &ParamStore, hidden: usize) -> Result<G::Value> {
    let spatial = g.value(x).spatial_rank();
    let targets: Vec<(usize, usize)> = (0..spatial).map(|a| (a, 1)).collect();
    let pooled = if targets.is_empty() {
        x.clone()
    } else {
        g.adaptive_pool(x, &targets, PoolMode::Max)?
    };
    let flat = g.reshape(&pooled, &[1, hidden])?;
    let w = g.param(p, "head.w")?;
    let b = g.param(p, "head.b")?;
    let y = g.linear(&flat, &w, &b, &head_spec(hidden))?;
    g.reshape(&y, &[1])
}

/// Halves every spatial axis (rounding down, at least 1) with max pooling.
fn halve<G: Graph>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let shape = g.value(x).spatial_shape().to_vec();
    let targets: Vec<(usize, usize)> = shape
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 1)
        .map(|(a, &n)| (a, n / 2))
        .collect();
    if targets.is_empty() {
        Ok(x.clone())
    } else {
        g.adaptive_pool(x, &targets, PoolMode::Max)
    }
}

impl BuiltModel {
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// The scalar logit for one input with a single channel.
    pub fn forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        self.forward_with(g, x, &self.params)
    }

    /// As [`BuiltModel::forward`] with a substitute parameter set.
    pub fn forward_with<G: Graph>(&self, g: &mut G, x: &G::Value, p: &ParamStore) -> Result<G::Value> {
        let cfg = &self.config;
        let input = g.value(x);
        if input.channels() != 1 {
            return Err(Error::invalid(format!(
                "models take one input channel, got {}",
                input.channels()
            )));
        }
        if input.spatial_rank() == 0 {
            return Err(Error::invalid("models need at least one spatial axis"));
        }
        match cfg.kind {
            ModelKind::Cnn3d => {
                let adapted = adapt_input_cnn3d(g.value(x), cfg.pad_depth)?;
                let mut h = if adapted.shape() == g.value(x).shape() {
                    x.clone()
                } else {
                    let shape = adapted.shape().to_vec();
                    match g.value(x).spatial_rank() {
                        2 => g.constant(adapted)?,
                        _ => g.reshape(x, &shape)?,
                    }
                };
                for l in 0..cfg.depth {
                    let w = g.param(p, &format!("conv{l}.w"))?;
                    let b = g.param(p, &format!("conv{l}.b"))?;
                    h = g.conv(&h, &w, &b, &cnn_layer(cfg, l))?;
                    h = norm_relu(g, &h, p, &format!("conv{l}.ln"))?;
                }
                head(g, &h, p, cfg.hidden)
            }
            ModelKind::Sxcnn => {
                let mut h = x.clone();
                for l in 0..cfg.depth {
                    h = sxnn_apply(g, &h, &sx_layer(cfg, l), p, &format!("sx{l}"))?;
                    h = norm_relu(g, &h, p, &format!("sx{l}.ln"))?;
                }
                head(g, &h, p, cfg.hidden)
            }
            ModelKind::Gxcnn => {
                let h = lift_any(g, x, &gx_lift(cfg), p, "lift")?;
                let mut h: AxialFeatures<G::Value> = map_features(g, h, |g, v| norm_relu(g, v, p, "lift.ln"))?;
                for l in 1..cfg.depth {
                    let prefix = format!("xconv{l}");
                    let next = subsequent(g, &h, &gx_layer(cfg), p, &prefix)?;
                    h = map_features(g, next, |g, v| norm_relu(g, v, p, &format!("{prefix}.ln")))?;
                }
                let h = map_features(g, h, |g, v| halve(g, v))?;
                let pooled = pool_features(g, &h, Aggregation::Max)?;
                head(g, &pooled, p, cfg.hidden)
            }
        }
    }

    /// Logit of one input, evaluated eagerly.
    pub fn logit(&self, x: &Tensor) -> Result<f64> {
        let mut g = Eval::new();
        self.forward(&mut g, x)?.item()
    }

    /// Cross-entropy loss, logit and parameter gradients for one labelled input.
    pub fn loss_and_grads(&self, x: &Tensor, label: f64) -> Result<(f64, f64, ParamStore)> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone())?;
        let z = self.forward(&mut tape, &input)?;
        let loss = tape.bce_with_logit(&z, label)?;
        let grads = tape.backward(loss)?.to_store(&self.params)?;
        Ok((
            tape.value(&loss).item()?,
            tape.value(&z).item()?,
            grads,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path, &self.config.to_kv())
    }

    /// Loads a checkpoint and checks its parameters against its config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let config = ModelConfig::from_kv(&meta).map_err(|e| Error::format("XNNP", e.to_string()))?;
        let fresh = build(&config)?;
        let names_match = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .zip(params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !names_match {
            return Err(Error::format(
                "XNNP",
                "parameters do not match the stored configuration",
            ));
        }
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{permute, AxisPerm};

    fn tiny(kind: ModelKind) -> BuiltModel {
        let cfg = ModelConfig {
            depth: 2,
            hidden: 4,
            seed: 7,
            ..ModelConfig::preset(kind, Preset::Desk)
        };
        build(&cfg).unwrap()
    }

    #[test]
    fn table1_parameter_counts() {
        let sx = build(&ModelConfig::preset(ModelKind::Sxcnn, Preset::Table1)).unwrap();
        let gx = build(&ModelConfig::preset(ModelKind::Gxcnn, Preset::Table1)).unwrap();
        assert_eq!(sx.param_count(), 149_505);
        assert_eq!(gx.param_count(), 887_937);
    }

    #[test]
    fn dense_head_on_32_channels_has_33_parameters() {
        assert_eq!(head_spec(32).param_count(), 33);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ModelConfig {
            seed: 99,
            ..ModelConfig::preset(ModelKind::Gxcnn, Preset::AppendixD)
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let over = ModelConfig::from_kv("kind=sxcnn\npreset=table1\nhidden=16\n").unwrap();
        assert_eq!((over.depth, over.hidden), (4, 16));
        assert!(ModelConfig::from_kv("kind=sxcnn\nwidth=3").is_err());
        assert!(ModelConfig::from_kv("depth=3").is_err());
        assert!(ModelConfig::from_kv("kind=sxcnn\ndepth=0").is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(tiny(ModelKind::Gxcnn), tiny(ModelKind::Gxcnn));
    }

    #[test]
    fn adapter_shapes() {
        let x = Tensor::zeros(&[4, 4, 4, 4, 4, 1]).unwrap();
        assert_eq!(adapt_input_cnn3d(&x, 1).unwrap().shape(), &[4, 4, 64, 1]);
        let x = Tensor::zeros(&[16, 16, 16, 16, 16, 1]).unwrap();
        assert_eq!(adapt_input_cnn3d(&x, 1).unwrap().shape(), &[16, 16, 4096, 1]);
        let x = Tensor::zeros(&[3, 4, 5, 1]).unwrap();
        assert_eq!(adapt_input_cnn3d(&x, 1).unwrap(), x);
        assert!(adapt_input_cnn3d(&Tensor::zeros(&[4, 1]).unwrap(), 1).is_err());
        assert!(adapt_input_cnn3d(&Tensor::zeros(&[2; 7]).unwrap(), 1).is_err());
    }

    #[test]
    fn two_dimensional_input_is_zero_padded_in_depth() {
        let x = Tensor::from_fn(&[2, 3, 1], |i| (i[0] * 3 + i[1] + 1) as f64).unwrap();
        let y = adapt_input_cnn3d(&x, 3).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 1]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(y.get(&[i, j, 0, 0]), x.get(&[i, j, 0]));
                assert_eq!(y.get(&[i, j, 1, 0]), 0.0);
                assert_eq!(y.get(&[i, j, 2, 0]), 0.0);
            }
        }
        assert_eq!(adapt_input_cnn3d(&x, 1).unwrap().shape(), &[2, 3, 1, 1]);
    }

    #[test]
    fn axial_models_run_on_every_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [ModelKind::Sxcnn, ModelKind::Gxcnn] {
            let m = tiny(kind);
            for shape in [&[5, 1][..], &[4, 3, 1], &[3, 4, 2, 1], &[2, 3, 2, 2, 1], &[2, 2, 2, 2, 2, 1]] {
                let x = Tensor::random(shape, &mut rng).unwrap();
                assert!(m.logit(&x).unwrap().is_finite(), "{kind} {shape:?}");
            }
        }
    }

    #[test]
    fn graph_model_with_depth_one_is_lift_pool_head() {
        let cfg = ModelConfig {
            depth: 1,
            hidden: 3,
            ..ModelConfig::preset(ModelKind::Gxcnn, Preset::Desk)
        };
        let m = build(&cfg).unwrap();
        assert!(m.params.iter().all(|(n, _)| n.starts_with("lift") || n.starts_with("head")));
        let x = Tensor::full(&[3, 3, 1], 0.5).unwrap();
        assert!(m.logit(&x).unwrap().is_finite());
    }

    #[test]
    fn recorded_forward_equals_eager_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random(&[4, 3, 3, 1], &mut rng).unwrap();
        for kind in ModelKind::ALL {
            let m = tiny(kind);
            let mut tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            let z = m.forward(&mut tape, &v).unwrap();
            assert_eq!(tape.value(&z).item().unwrap().to_bits(), m.logit(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn axial_logits_ignore_axis_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random(&[3, 4, 5, 1], &mut rng).unwrap();
        for kind in [ModelKind::Sxcnn, ModelKind::Gxcnn] {
            let m = tiny(kind);
            let z = m.logit(&x).unwrap();
            for p in AxisPerm::all(3) {
                let zp = m.logit(&permute(&x, &p).unwrap()).unwrap();
                assert!((zp - z).abs() <= 1e-7 * (1.0 + z.abs()), "{kind} {p}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.xnnp");
        let m = tiny(ModelKind::Gxcnn);
        m.save(&path).unwrap();
        let back = BuiltModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = Tensor::full(&[3, 3, 1], 0.25).unwrap();
        assert_eq!(back.logit(&x).unwrap().to_bits(), m.logit(&x).unwrap().to_bits());
    }
}
