mod equiv;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xnn_core::autodiff::{Eval, ParamStore};
use xnn_core::error::{Error, Result};
use xnn_core::gpdata::{generate_on_grid, GpDataset, Grid};
use xnn_core::models::{build, BuiltModel, ModelConfig, ModelKind, Preset};
use xnn_core::sxnn::{self, axial_conv, InnerOp};
use xnn_core::tensor::{
    conv_lastaxes, flattened_attention_mults, permute, self_attention_lastaxis_counted,
    AttentionCount, AttentionSpec, AttentionWeights, AxisPerm, ConvSpec, Tensor,
};
use xnn_core::train::{evaluate, train_model, Split, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "xnn", version, about = "Axial neural networks on tensors of any rank")]
struct Cli {
    /// Worker threads; falls back to XNN_THREADS, then to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled Gaussian-process dataset.
    GenData {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Points per axis; smaller values crop the default grid.
        #[arg(long)]
        grid_side: Option<usize>,
    },
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check permutation equivariance by brute force.
    CheckEquiv {
        #[arg(long, value_enum)]
        target: Target,
        /// Model kind for `--target model`.
        #[arg(long, value_enum, default_value_t = Kind::Gxcnn)]
        model: Kind,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter totals per model.
    ParamCount {
        /// Omit to list every model.
        #[arg(long, value_enum)]
        model: Option<Kind>,
        #[arg(long, value_enum, default_value_t = PresetArg::Table1)]
        preset: PresetArg,
        /// Spatial rank used for a smoke forward pass.
        #[arg(long, default_value_t = 3)]
        rank: usize,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Time an axial op and compare multiply counts with its dense form.
    Bench {
        #[arg(long, value_enum)]
        op: BenchOp,
        /// Comma-separated spatial lengths, e.g. 16,16,16.
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: Option<Kind>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// `key=value` file; flags override it and it overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Separate validation set; otherwise `--data` is split.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Cnn3d,
    Sxcnn,
    Gxcnn,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Cnn3d => ModelKind::Cnn3d,
            Kind::Sxcnn => ModelKind::Sxcnn,
            Kind::Gxcnn => ModelKind::Gxcnn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Table1,
    #[value(name = "appendixD", alias = "appendixd")]
    AppendixD,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Table1 => Preset::Table1,
            PresetArg::AppendixD => Preset::AppendixD,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Sxnn,
    Gxnn,
    Model,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchOp {
    Attention,
    Conv,
}

const LAYER_TOLERANCE: f64 = 1e-9;
const MODEL_TOLERANCE: f64 = 1e-7;

/// Failure of a check, as opposed to an error while running it.
struct CheckFailed;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CheckFailed)) => ExitCode::from(1),
        Err(e @ Error::InvalidArgument(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("XNN_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("XNN_THREADS=`{v}` is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidArgument("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<Result<(), CheckFailed>> {
    match command {
        Command::GenData { dim, n_per_class, seed, out, grid_side } => {
            gen_data(dim, n_per_class, seed, &out, grid_side)?
        }
        Command::Train(args) => train(args)?,
        Command::Eval { checkpoint, data } => {
            let model = BuiltModel::load(&checkpoint)?;
            let set = GpDataset::load(&data)?;
            let (loss, accuracy) = evaluate(&model, &set.samples)?;
            println!("model={} samples={} loss={loss:.6} accuracy={accuracy:.4}", model.config.kind, set.len());
        }
        Command::CheckEquiv { target, model, rank, trials, seed } => {
            return check_equiv(target, model.into(), rank, trials, seed);
        }
        Command::ParamCount { model, preset, rank, depth, hidden } => {
            param_count(model, preset.into(), rank, depth, hidden)?
        }
        Command::Bench { op, shape, channels, heads, reps, seed } => {
            bench(op, &shape, channels, heads, reps.max(1), seed)?
        }
    }
    Ok(Ok(()))
}

fn shape_text(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("({})", parts.join(","))
}

fn gen_data(dim: usize, n_per_class: usize, seed: u64, out: &PathBuf, side: Option<usize>) -> Result<()> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("--n-per-class must be at least 1".into()));
    }
    let grid = match side {
        Some(s) => Grid::cropped(dim, s)?,
        None => xnn_core::gpdata::make_grid(dim)?,
    };
    let start = Instant::now();
    let set = generate_on_grid(grid, n_per_class, seed)?;
    set.save(out)?;
    println!(
        "dim={dim} shape={} count={} seed={seed} out={} seconds={:.2}",
        shape_text(&grid.shape()),
        set.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

const TRAIN_KEYS: [&str; 3] = ["learning_rate", "batch_size", "epochs"];

/// Merges preset, config file and flags into model and training settings.
fn resolve_train(args: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut model_lines = String::new();
    let mut train_lines = Vec::new();
    if let Some(p) = args.preset {
        model_lines += &format!("preset={}\n", Preset::from(p).name());
    }
    if let Some(path) = &args.config {
        for line in fs::read_to_string(path)?.lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if TRAIN_KEYS.contains(&key) {
                train_lines.push(line.to_string());
            } else {
                model_lines += line;
                model_lines.push('\n');
            }
        }
    }
    let has_preset = model_lines.lines().any(|l| l.trim_start().starts_with("preset"));
    if !has_preset {
        model_lines = format!("preset={}\n{model_lines}", Preset::AppendixD.name());
    }
    if let Some(k) = args.model {
        model_lines += &format!("kind={}\n", ModelKind::from(k).name());
    }
    for (key, value) in [("depth", args.depth), ("hidden", args.hidden), ("kernel", args.kernel)] {
        if let Some(v) = value {
            model_lines += &format!("{key}={v}\n");
        }
    }
    if let Some(s) = args.seed {
        model_lines += &format!("seed={s}\n");
    }
    let model = ModelConfig::from_kv(&model_lines)?;

    let mut train = TrainConfig { seed: model.seed, ..TrainConfig::default() };
    for line in &train_lines {
        let (key, value) = line.split_once('=').expect("train keys come from key=value lines");
        let bad = || Error::InvalidArgument(format!("bad value in `{line}`"));
        match key.trim() {
            "learning_rate" => train.learning_rate = value.trim().parse().map_err(|_| bad())?,
            "batch_size" => train.batch_size = value.trim().parse().map_err(|_| bad())?,
            _ => train.epochs = value.trim().parse().map_err(|_| bad())?,
        }
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    train.validate()?;
    Ok((model, train))
}

fn train(args: TrainArgs) -> Result<()> {
    let (model_config, train_config) = resolve_train(&args)?;
    let data = GpDataset::load(&args.data)?;
    let (train_set, val_set) = match &args.val_data {
        Some(path) => (data, GpDataset::load(path)?),
        None => data.split(args.train_frac)?,
    };
    let mut model = build(&model_config)?;
    println!(
        "model={} depth={} hidden={} params={} train={} val={} epochs={}",
        model_config.kind,
        model_config.depth,
        model_config.hidden,
        model.param_count(),
        train_set.len(),
        val_set.len(),
        train_config.epochs
    );
    let metrics = train_model(&mut model, &train_set, &val_set, &train_config, |r| {
        println!(
            "epoch={} split={} loss={:.6} accuracy={:.4} seconds={:.2}",
            r.epoch,
            r.split.name(),
            r.loss,
            r.accuracy,
            r.seconds
        )
    })?;
    if let Some(path) = &args.metrics {
        fs::write(path, metrics.to_csv())?;
    }
    if let Some(path) = &args.out {
        model.save(path)?;
    }
    if let Some(v) = metrics.last(Split::Val) {
        println!("final val_loss={:.6} val_accuracy={:.4}", v.loss, v.accuracy);
    }
    Ok(())
}

fn check_equiv(target: Target, kind: ModelKind, rank: usize, trials: usize, seed: u64) -> Result<Result<(), CheckFailed>> {
    if rank == 0 {
        return Err(Error::InvalidArgument("--rank must be at least 1".into()));
    }
    let (label, residual, tolerance) = match target {
        Target::Sxnn => ("sxnn".to_string(), equiv::sxnn_sweep(rank, trials, seed)?, LAYER_TOLERANCE),
        Target::Gxnn => ("gxnn".to_string(), equiv::gxnn_sweep(rank, trials, seed)?, LAYER_TOLERANCE),
        Target::Model => {
            if kind == ModelKind::Cnn3d && !(2..=5).contains(&rank) {
                return Err(Error::InvalidArgument("cnn3d accepts ranks 2 to 5".into()));
            }
            (format!("model:{kind}"), equiv::model_sweep(kind, rank, trials, seed)?, MODEL_TOLERANCE)
        }
    };
    println!("target={label} rank={rank} trials={trials} tolerance={tolerance:e}");
    println!("MAX_RESIDUAL={residual:e}");
    let within = residual <= tolerance;
    if matches!(target, Target::Model) && !kind.is_axial() {
        let verdict = if within { "no counterexample found" } else { "NOT invariant (expected)" };
        println!("info: {kind} is not built to be permutation invariant: {verdict}");
        return Ok(Ok(()));
    }
    println!("{}", if within { "PASS" } else { "FAIL" });
    Ok(if within { Ok(()) } else { Err(CheckFailed) })
}

fn param_count(model: Option<Kind>, preset: Preset, rank: usize, depth: Option<usize>, hidden: Option<usize>) -> Result<()> {
    let kinds: Vec<ModelKind> = match model {
        Some(k) => vec![k.into()],
        None => ModelKind::ALL.to_vec(),
    };
    let mut counts = Vec::new();
    for kind in kinds {
        let mut config = ModelConfig::preset(kind, preset);
        config.depth = depth.unwrap_or(config.depth);
        config.hidden = hidden.unwrap_or(config.hidden);
        let built = build(&config)?;
        if kind.is_axial() || (2..=5).contains(&rank) {
            let x = Tensor::full(&[vec![3; rank], vec![1]].concat(), 0.5)?;
            built.logit(&x)?;
        }
        println!(
            "model={kind} preset={} depth={} hidden={} rank={rank} params={}",
            preset.name(),
            config.depth,
            config.hidden,
            built.param_count()
        );
        counts.push((kind, built.param_count()));
    }
    let find = |k| counts.iter().find(|(c, _)| *c == k).map(|(_, n)| *n as f64);
    if let (Some(g), Some(s)) = (find(ModelKind::Gxcnn), find(ModelKind::Sxcnn)) {
        println!("ratio gxcnn/sxcnn={:.3}", g / s);
    }
    Ok(())
}

/// Total pair multiplications over the axis branches, and the same count
/// for a single position of the other axes (one sequence per branch).
fn axial_totals(counts: &[AttentionCount]) -> (u64, u64) {
    let total = counts.iter().map(|c| c.pair_mults).sum();
    let per_position = counts.iter().map(|c| c.pair_mults / c.sequences.max(1)).sum();
    (total, per_position)
}

fn bench(op: BenchOp, shape: &[usize], channels: usize, heads: usize, reps: usize, seed: u64) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument("--shape needs positive lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full: Vec<usize> = [shape, &[channels]].concat();
    let x = Tensor::random(&full, &mut rng)?;
    let k = shape.len();
    match op {
        BenchOp::Attention => {
            let spec = AttentionSpec { channels, heads };
            spec.validate()?;
            let inner = InnerOp::Attention(spec);
            let mut store = ParamStore::new();
            sxnn::init_params(&inner, &mut store, "a", &mut rng)?;
            let w = |n: &str| store.get(&format!("a.{n}"));
            let weights = AttentionWeights { wq: w("wq")?, wk: w("wk")?, wv: w("wv")?, wo: w("wo")? };
            let start = Instant::now();
            let mut counts = Vec::new();
            for _ in 0..reps {
                counts.clear();
                for p in AxisPerm::cyclic(k) {
                    let (_, c) = self_attention_lastaxis_counted(&permute(&x, &p)?, &weights, &spec)?;
                    counts.push(c);
                }
            }
            let seconds = start.elapsed().as_secs_f64() / reps as f64;
            let (total, per_position) = axial_totals(&counts);
            let flat = flattened_attention_mults(shape, &spec);
            println!("op=attention shape={} channels={channels} heads={heads}", shape_text(shape));
            println!("axial_pair_mults={total} axial_pair_mults_per_position={per_position} flattened_pair_mults={flat}");
            println!("ratio_total_percent={:.4}", 100.0 * total as f64 / flat as f64);
            println!("ratio_per_position_percent={:.6}", 100.0 * per_position as f64 / flat as f64);
            println!("axial_ms={:.3}", seconds * 1e3);
        }
        BenchOp::Conv => {
            let spec = ConvSpec::same(1, 3, channels, channels);
            let mut store = ParamStore::new();
            sxnn::init_params(&InnerOp::Conv(spec), &mut store, "c", &mut rng)?;
            let dense = ConvSpec::same(k, 3, channels, channels);
            let wd = Tensor::random(&dense.weight_shape(), &mut rng)?;
            let bd = Tensor::zeros(&[channels])?;
            let start = Instant::now();
            for _ in 0..reps {
                axial_conv(&mut Eval::new(), &x, spec, &store, "c")?;
            }
            let axial = start.elapsed().as_secs_f64() / reps as f64;
            let start = Instant::now();
            for _ in 0..reps {
                conv_lastaxes(&x, &wd, &bd, &dense)?;
            }
            let dense_s = start.elapsed().as_secs_f64() / reps as f64;
            let positions: usize = shape.iter().product();
            let per_tap = (positions * channels * channels) as u64;
            println!("op=conv shape={} channels={channels} kernel=3", shape_text(shape));
            println!("axial_mults={} dense_mults={}", per_tap * 3 * k as u64, per_tap * 3u64.pow(k as u32));
            println!("axial_ms={:.3} dense_ms={:.3}", axial * 1e3, dense_s * 1e3);
        }
    }
    Ok(())
}
