use std::path::Path;
use std::process::{Command, Output};

fn xnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xnn"))
        .args(args)
        .env_remove("XNN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let mut args = vec!["gen-data", "--out", &path];
    args.extend_from_slice(extra);
    let o = xnn(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn gen_data_reports_table_shape_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = xnn(&["gen-data", "--dim", "2", "--n-per-class", "5", "--seed", "3", "--out", &dir.path().join("a.xnnd").to_string_lossy()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(field(&text, "shape"), "(32,32,1)");
    assert_eq!(field(&text, "count"), "10");
    let b = gen(dir.path(), "b.xnnd", &["--dim", "2", "--n-per-class", "5", "--seed", "3"]);
    let a = std::fs::read(dir.path().join("a.xnnd")).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").to_string_lossy().into_owned();
    assert_eq!(xnn(&["gen-data", "--dim", "2", "--n-per-class", "0", "--out", &out]).status.code(), Some(2));
    assert_eq!(xnn(&["gen-data", "--dim", "7", "--n-per-class", "1", "--out", &out]).status.code(), Some(2));
    assert_eq!(xnn(&["check-equiv", "--target", "nope", "--rank", "2"]).status.code(), Some(2));
    assert_eq!(xnn(&["param-count", "--unknown-flag"]).status.code(), Some(2));
    assert_eq!(xnn(&["--threads", "0", "param-count"]).status.code(), Some(2));
}

#[test]
fn check_equiv_reports_machine_readable_residuals() {
    let o = xnn(&["check-equiv", "--target", "sxnn", "--rank", "3", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let r: f64 = field(&stdout(&o), "MAX_RESIDUAL").parse().unwrap();
    assert!(r <= 1e-9);
    let o = xnn(&["check-equiv", "--target", "gxnn", "--rank", "1", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let o = xnn(&["check-equiv", "--target", "model", "--model", "cnn3d", "--rank", "3", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("NOT invariant"));
    let o = xnn(&["check-equiv", "--target", "model", "--model", "sxcnn", "--rank", "3", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn param_count_is_rank_independent_and_reports_ratio() {
    let count = |rank: &str| field(&stdout(&xnn(&["param-count", "--model", "sxcnn", "--rank", rank])), "params").to_string();
    assert_eq!(count("2"), count("5"));
    let text = stdout(&xnn(&["param-count", "--preset", "table1"]));
    let ratio: f64 = text.lines().find_map(|l| l.strip_prefix("ratio gxcnn/sxcnn=")).unwrap().parse().unwrap();
    assert!(ratio >= 4.0, "{ratio}");
}

#[test]
fn bench_attention_counts() {
    let o = xnn(&["bench", "--op", "attention", "--shape", "16,16,16", "--reps", "1"]);
    assert!(o.status.success());
    let per: f64 = field(&stdout(&o), "ratio_per_position_percent").parse().unwrap();
    assert!(per < 1.0);
    assert!(xnn(&["bench", "--op", "conv", "--shape", "6,6", "--reps", "1"]).status.success());
}

#[test]
fn train_eval_round_trip_with_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.xnnd", &["--dim", "3", "--n-per-class", "4", "--grid-side", "4"]);
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, "kind=sxcnn\npreset=desk\nhidden=6\ndepth=1\nepochs=3\n").unwrap();
    let ckpt = dir.path().join("m.xnnp").to_string_lossy().into_owned();
    let csv = dir.path().join("m.csv").to_string_lossy().into_owned();
    let o = xnn(&[
        "train", "--config", &cfg.to_string_lossy(), "--data", &data, "--hidden", "5",
        "--epochs", "1", "--batch-size", "4", "--out", &ckpt, "--metrics", &csv,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    // flag beats file, file beats preset
    assert_eq!(field(&text, "hidden"), "5");
    assert_eq!(field(&text, "depth"), "1");
    assert_eq!(field(&text, "epochs"), "1");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("epoch,split,loss,accuracy,seconds\n"));
    assert_eq!(csv_text.lines().count(), 3);
    let o = xnn(&["eval", "--checkpoint", &ckpt, "--data", &data]);
    assert!(o.status.success());
    let acc: f64 = field(&stdout(&o), "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn zero_epochs_leaves_checkpoint_at_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.xnnd", &["--dim", "4", "--n-per-class", "2", "--grid-side", "3"]);
    let run = |name: &str, epochs: &str| {
        let ckpt = dir.path().join(name).to_string_lossy().into_owned();
        let o = xnn(&[
            "train", "--model", "cnn3d", "--preset", "desk", "--data", &data, "--epochs", epochs,
            "--seed", "4", "--out", &ckpt,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(ckpt).unwrap()
    };
    assert_eq!(run("a.xnnp", "0"), run("b.xnnp", "0"));
    assert_ne!(run("a.xnnp", "0"), run("c.xnnp", "1"));
}
