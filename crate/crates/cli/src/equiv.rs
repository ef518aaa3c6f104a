//! Brute-force permutation sweeps behind `xnn check-equiv`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xnn_core::autodiff::{Eval, ParamStore};
use xnn_core::error::Result;
use xnn_core::gxnn::{
    lift_any, permute_features, pool_features, subsequent, AxialFeatures, Combine, LiftOp,
    LiftSpec, MessageOp, SubsequentSpec,
};
use xnn_core::models::{build, ModelConfig, ModelKind, Preset};
use xnn_core::sxnn::{self, sxnn_apply, Aggregation, InnerOp, PermutationSet, SxLayerSpec};
use xnn_core::tensor::{permute, AttentionSpec, AxisPerm, ConvSpec, LinearSpec, PoolMode, Tensor};

/// Every permutation up to rank 5, otherwise the identity plus 119 samples.
pub fn sweep_perms(rank: usize, rng: &mut impl Rng) -> Vec<AxisPerm> {
    if rank <= 5 {
        return AxisPerm::all(rank);
    }
    let mut out = vec![AxisPerm::identity(rank)];
    for _ in 0..119 {
        let mut dest: Vec<usize> = (0..rank).collect();
        dest.shuffle(rng);
        out.push(AxisPerm::from_dest(dest).expect("shuffled axes form a permutation"));
    }
    out
}

/// `max |a - b| / max(1, max |b|)`.
pub fn relative_residual(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.max_abs_diff(b)? / b.max_abs().max(1.0))
}

fn random_shape(rank: usize, channels: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut s: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
    s.push(channels);
    s
}

fn sx_layers(rng: &mut impl Rng) -> Vec<(SxLayerSpec, usize, Option<usize>)> {
    let n = rng.gen_range(1..=4);
    let ops = [
        (InnerOp::Linear(LinearSpec { in_len: n, out_len: rng.gen_range(1..=4), in_channels: 2, out_channels: 3 }), 2, Some(n)),
        (InnerOp::Conv(ConvSpec::same(1, 3, 2, 3)), 2, None),
        (InnerOp::Attention(AttentionSpec { channels: 4, heads: 2 }), 4, None),
    ];
    let mut out = Vec::new();
    for (inner, cin, cube) in ops {
        for aggregation in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            let layer = SxLayerSpec { inner, aggregation, permutations: PermutationSet::Cyclic, pool: PoolMode::Avg };
            out.push((layer, cin, cube));
        }
    }
    out
}

/// Largest residual of `φ(Π x)` against `Π φ(x)` over set-based layers.
pub fn sxnn_sweep(rank: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = sweep_perms(rank, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        for (layer, cin, cube) in sx_layers(&mut rng) {
            let mut store = ParamStore::new();
            sxnn::init_params(&layer.inner, &mut store, "l", &mut rng)?;
            let shape = match cube {
                Some(n) => [vec![n; rank], vec![cin]].concat(),
                None => random_shape(rank, cin, &mut rng),
            };
            let x = Tensor::random(&shape, &mut rng)?;
            let mut g = Eval::new();
            let y = sxnn_apply(&mut g, &x, &layer, &store, "l")?;
            for p in &perms {
                let yp = sxnn_apply(&mut g, &permute(&x, p)?, &layer, &store, "l")?;
                worst = worst.max(relative_residual(&yp, &permute(&y, p)?)?);
            }
        }
    }
    Ok(worst)
}

fn gx_pipeline(
    x: &Tensor,
    store: &ParamStore,
    lift: &LiftSpec,
    layer: &SubsequentSpec,
) -> Result<(AxialFeatures<Tensor>, Tensor)> {
    let mut g = Eval::new();
    let h = lift_any(&mut g, x, lift, store, "lift")?;
    let h = subsequent(&mut g, &h, layer, store, "x1")?;
    let pooled = pool_features(&mut g, &h, Aggregation::Max)?;
    Ok((h, pooled))
}

/// Largest residual of the induced-permutation law for lift, one round of
/// message passing and feature pooling.
pub fn gxnn_sweep(rank: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = sweep_perms(rank, &mut rng);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let aggregation = [Aggregation::Sum, Aggregation::Mean, Aggregation::Max][trial % 3];
        let lift = LiftSpec {
            psi: LiftOp::Conv2d(ConvSpec::same(2, 3, 1, 3)),
            combine: Combine::Message,
            aggregation,
            pool: PoolMode::Avg,
        };
        let pair = MessageOp::PairConv { conv: ConvSpec::same(2, 3, 3, 3), merge: aggregation };
        let layer = SubsequentSpec {
            message: pair,
            node: Some(pair),
            combine: [Combine::Message, Combine::Residual, Combine::Max][trial % 3],
            aggregation,
            self_edge: trial % 2 == 0,
            pool: PoolMode::Avg,
        };
        let mut store = ParamStore::new();
        lift.init_params(&mut store, "lift", &mut rng)?;
        layer.init_params(&mut store, "x1", &mut rng)?;
        let x = Tensor::random(&random_shape(rank, 1, &mut rng), &mut rng)?;
        let (h, pooled) = gx_pipeline(&x, &store, &lift, &layer)?;
        for p in &perms {
            let (hp, pooled_p) = gx_pipeline(&permute(&x, p)?, &store, &lift, &layer)?;
            let expected = permute_features(&mut Eval::new(), &h, p)?;
            for (a, b) in hp.features().iter().zip(expected.features()) {
                worst = worst.max(relative_residual(a, b)?);
            }
            worst = worst.max(relative_residual(&pooled_p, &permute(&pooled, p)?)?);
        }
    }
    Ok(worst)
}

/// Largest `|z(Π x) - z(x)| / (1 + |z(x)|)` for a small model of `kind`.
pub fn model_sweep(kind: ModelKind, rank: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = sweep_perms(rank, &mut rng);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let config = ModelConfig { depth: 2, hidden: 4, seed: seed + trial as u64, ..ModelConfig::preset(kind, Preset::Desk) };
        let model = build(&config)?;
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(2..=5)).chain([1]).collect();
        let x = Tensor::random(&shape, &mut rng)?;
        let z = model.logit(&x)?;
        for p in &perms {
            let zp = model.logit(&permute(&x, p)?)?;
            worst = worst.max((zp - z).abs() / (1.0 + z.abs()));
        }
    }
    Ok(worst)
}
