//! End-to-end behaviour of the `agileir` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agileir::evalkit::EvalReport;
use agileir::model::save_checkpoint;
use agileir::{imageio, Model, ModelConfig, Tensor};

fn agileir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agileir")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn err(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn evalset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/evalset")
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&path, &Model::<f32>::new(ModelConfig::tiny(), 3).unwrap()).unwrap();
    path
}

fn write_png(path: &Path, h: usize, w: usize) {
    let img = Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 256) as f32 / 255.0);
    imageio::save_rgb(path, &img).unwrap();
}

/// Runs a short tiny-model training and returns (stdout, metrics log).
fn short_train(dir: &Path, tag: &str, extra: &[&str]) -> (Output, String) {
    let log = dir.join(format!("{tag}.log"));
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let data = format!("paths.data_dir={:?}", s(&evalset()));
    let log_set = format!("paths.metrics_log={:?}", s(&log));
    let ckpt_set = format!("paths.checkpoint={:?}", s(&ckpt));
    let mut args = vec![
        "train", "--set", "model.preset=tiny", "--set", "train.iters=3", "--set", "train.batch=1",
        "--set", "train.patch_lr=8", "--set", "train.prefetch=0", "--set", &data, "--set", &log_set,
        "--set", &ckpt_set,
    ];
    args.extend_from_slice(extra);
    let out = agileir(&args);
    let logged = std::fs::read_to_string(&log).unwrap_or_default();
    (out, logged)
}

#[test]
fn help_documents_every_command() {
    let out = agileir(&["--help"]);
    assert!(out.status.success());
    for cmd in ["train", "eval", "infer", "gradcheck", "memreport", "qksweep"] {
        assert!(text(&out).contains(cmd));
        assert!(agileir(&[cmd, "--help"]).status.success());
    }
    assert!(!text(&agileir(&["gradcheck", "--help"])).contains("inject"));
}

#[test]
fn unknown_flags_and_keys_are_usage_errors() {
    assert_eq!(agileir(&["train", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(agileir(&["train", "--set", "train.speed=2"]).status.code(), Some(1));
    assert_eq!(agileir(&["nonsense"]).status.code(), Some(1));
    let out = agileir(&["train", "--set", "model.preset=tiny"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(err(&out).contains("data_dir"));
}

#[test]
fn missing_data_dir_is_named() {
    let out = agileir(&["train", "--seed", "1", "--set", "model.preset=tiny", "--set", "paths.data_dir=/no/such/dir"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(err(&out).contains("/no/such/dir"));
}

#[test]
fn seeded_runs_repeat_and_preset_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, log_a) = short_train(dir.path(), "a", &["--seed", "7"]);
    let (_, log_b) = short_train(dir.path(), "b", &["--seed", "7"]);
    assert!(a.status.success(), "{}", err(&a));
    assert_eq!(log_a, log_b);
    assert!(log_a.lines().any(|l| l == "# model.preset = tiny"));
    assert!(log_a.lines().any(|l| l == "# seed = 7"));
    // stdout carries the same records as the file.
    for line in log_a.lines() {
        assert!(text(&a).lines().any(|l| l == line));
    }
    let (_, log_c) = short_train(dir.path(), "c", &["--seed", "8"]);
    assert_ne!(log_a, log_c);

    let (plus, log_plus) = short_train(
        dir.path(),
        "plus",
        &["--seed", "1", "--set", "model.preset=agileir_plus", "--set", "train.iters=1", "--set", "model.channels=8", "--set", "model.heads=2", "--set", "model.window=4", "--set", "model.num_blocks=1", "--set", "model.layers_per_block=2"],
    );
    assert!(plus.status.success(), "{}", err(&plus));
    assert!(log_plus.lines().any(|l| l == "# model.preset = agileir_plus"));
}

#[test]
fn eval_reference_scores_perfectly_and_report_parses() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.txt");
    let out = agileir(&["eval", "--method", "reference", "--scale", "2", "--data", s(&evalset()), "--report", s(&report)]);
    assert!(out.status.success(), "{}", err(&out));
    assert!(text(&out).contains("SSIM 1.0000"));
    let parsed = EvalReport::parse(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.mean_ssim, 1.0);
    assert_eq!(parsed.images.len(), 3);

    assert_eq!(agileir(&["eval", "--method", "reference", "--scale", "3", "--data", s(&evalset())]).status.code(), Some(1));
    assert_eq!(agileir(&["eval", "--scale", "2", "--data", s(&evalset())]).status.code(), Some(1));
    let ckpt = tiny_checkpoint(dir.path());
    let wrong_scale = agileir(&["eval", "--checkpoint", s(&ckpt), "--scale", "4", "--data", s(&evalset())]);
    assert_eq!(wrong_scale.status.code(), Some(1));
}

#[test]
fn infer_upscales_deterministically_including_single_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    for (h, w) in [(7, 10), (1, 1)] {
        let input = dir.path().join(format!("in_{h}x{w}.png"));
        write_png(&input, h, w);
        let out1 = dir.path().join("o1.png");
        let out2 = dir.path().join("o2.png");
        for out in [&out1, &out2] {
            let o = agileir(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(out), "--scale", "2"]);
            assert!(o.status.success(), "{}", err(&o));
        }
        let img = imageio::load_rgb(&out1).unwrap();
        assert_eq!(img.shape(), &[3, 2 * h, 2 * w]);
        assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    }
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not a png").unwrap();
    let o = agileir(&["infer", "--checkpoint", s(&ckpt), "--input", s(&bad), "--output", s(&dir.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_scope_and_fault() {
    let out = agileir(&["gradcheck", "--only", "softmax_lastdim", "--only", "gelu"]);
    assert!(out.status.success());
    let rows: Vec<String> = text(&out).lines().filter(|l| l.ends_with(" ok")).map(String::from).collect();
    assert_eq!(rows.len(), 2);
    let layer = agileir(&["gradcheck", "--scope", "layer"]);
    assert!(layer.status.success());
    assert!(text(&layer).lines().filter(|l| l.ends_with(" ok")).all(|l| l.starts_with("layer")));
    let faulty = agileir(&["gradcheck", "--only", "gelu", "--inject-fault", "gelu"]);
    assert_eq!(faulty.status.code(), Some(2));
    assert!(text(&faulty).contains("FAIL"));
}

#[test]
fn memreport_variants() {
    let same = agileir(&["memreport", "--a", "agileir", "--b", "agileir"]);
    assert!(text(&same).contains("ratio agileir/agileir: 1.00"));
    assert!(text(&same).contains("reference measured ratio: 2.23"));
    let small = text(&agileir(&["memreport", "--machine", "--batch", "8"]));
    let big = text(&agileir(&["memreport", "--machine", "--batch", "16"]));
    let activations = |t: &str| -> u64 {
        let line = t.lines().find(|l| l.starts_with("a.totals")).unwrap();
        let field = line.split_whitespace().find(|f| f.starts_with("activation_bytes=")).unwrap();
        field["activation_bytes=".len()..].parse().unwrap()
    };
    assert!(small.contains("batch=8"));
    assert_eq!(2 * activations(&small), activations(&big));
}

#[test]
fn qksweep_counts_and_rejections() {
    let out = agileir(&["qksweep", "--dk", "4,8,15"]);
    assert!(out.status.success());
    let params: Vec<u64> = text(&out).lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]));
    let bad = agileir(&["qksweep", "--total-qk", "30"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(err(&bad).contains("7.5"));
    assert_eq!(agileir(&["qksweep"]).status.code(), Some(1));
}

#[test]
fn qksweep_short_training_reports_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.tsv");
    let out = agileir(&[
        "qksweep", "--preset", "tiny", "--dk", "1,2", "--eval-dir", s(&evalset()), "--iters", "2", "--batch", "1",
        "--patch", "8", "--seed", "3", "--out", s(&table),
    ]);
    assert!(out.status.success(), "{}", err(&out));
    let written = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = written.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split('\t').nth(3).unwrap().parse::<f64>().is_ok()));
    assert!(rows[1].ends_with("+0.0000"));
}
