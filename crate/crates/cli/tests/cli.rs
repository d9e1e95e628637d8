use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn biqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biqa"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(biqa(&["--help"]).status.code(), Some(0));
    assert_eq!(biqa(&[]).status.code(), Some(1));
    assert_eq!(biqa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        biqa(&["synth-gen", "--name", "x", "--out", "/tmp"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        biqa(&[
            "synth-gen",
            "--name",
            "x",
            "--kinds",
            "fog",
            "--out",
            "/tmp"
        ])
        .status
        .code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "version = 7\n").unwrap();
    assert_eq!(
        biqa(&["run-experiment", "--config", p(&cfg)]).status.code(),
        Some(1)
    );
}

#[test]
fn missing_inputs_exit_two() {
    let o = biqa(&[
        "--json",
        "eval",
        "--manifest",
        "/nonexistent/m.csv",
        "--model",
        "/nonexistent/m.bin",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&o)["exit_code"], 2);
}

#[test]
fn single_stage_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");

    let gen = |name: &str, kinds: &str, remap: &str, n: &str, seed: &str| {
        let o = biqa(&[
            "--json",
            "--seed",
            seed,
            "synth-gen",
            "--name",
            name,
            "--n-images",
            n,
            "--kinds",
            kinds,
            "--remap",
            remap,
            "--image-size",
            "20",
            "--out",
            p(&data),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        json(&o)
    };
    let blur = gen("blur", "blur", "identity", "25", "1");
    assert_eq!(blur["n_images"], 25);
    gen("noise", "noise,contrast", "sqrt", "25", "2");
    gen("pool", "blur,noise,contrast", "identity", "16", "3");
    assert!(data.join("blur.truth.csv").exists());

    let model = |name: &str| d.join(format!("{name}.bin"));
    for name in ["blur", "noise"] {
        let o = biqa(&[
            "--json",
            "--threads",
            "2",
            "train-single",
            "--manifest",
            p(&data.join(format!("{name}.csv"))),
            "--out",
            p(&model(name)),
            "--epochs",
            "2",
            "--warmup-epochs",
            "0",
            "--patch-size",
            "16",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(json(&o)["dataset"], name);
    }

    let pairs = d.join("pairs.csv");
    let models = format!("blur={},noise={}", p(&model("blur")), p(&model("noise")));
    let o = biqa(&[
        "--seed",
        "4",
        "gen-pairs",
        "--models",
        &models,
        "--pool",
        p(&data.join("pool.csv")),
        "--n-pairs",
        "30",
        "--short-side",
        "20",
        "--crop",
        "16",
        "--keep-per-model",
        "--out",
        p(&pairs),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&pairs).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(d.join("pairs.json").exists());

    let cdr = d.join("cdr.bin");
    let o = biqa(&[
        "train-cdr",
        "--pairs",
        p(&pairs),
        "--pool",
        p(&data.join("pool.csv")),
        "--short-side",
        "20",
        "--out",
        p(&cdr),
        "--epochs",
        "2",
        "--warmup-epochs",
        "0",
        "--patch-size",
        "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = biqa(&[
        "--json",
        "eval",
        "--manifest",
        p(&data.join("noise.csv")),
        "--model",
        p(&cdr),
        "--truth",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o);
    assert_eq!(r["n"], 25);
    assert!(r["srcc"].as_f64().unwrap().abs() <= 1.0);

    let o = biqa(&[
        "--json",
        "eval",
        "--manifest",
        p(&data.join("blur.csv")),
        "--splits",
        "2",
        "--epochs",
        "1",
        "--warmup-epochs",
        "0",
        "--patch-size",
        "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["runs"].as_array().unwrap().len(), 2);

    let o = biqa(&["eval", "--manifest", p(&data.join("blur.csv"))]);
    assert_eq!(o.status.code(), Some(1));

    let matrix = d.join("matrix.csv");
    let all = format!("{models},cdr={}", p(&cdr));
    let sets = format!(
        "{},{}",
        p(&data.join("blur.csv")),
        p(&data.join("noise.csv"))
    );
    let o = biqa(&[
        "cross-eval",
        "--models",
        &all,
        "--datasets",
        &sets,
        "--truth",
        "--out",
        p(&matrix),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&matrix).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,trained_on,blur_SRCC,blur_PLCC,noise_SRCC,noise_PLCC"
    );
    assert_eq!(lines.count(), 3);
}

const SMALL: &str = r#"
version = 1
seed = 5

[[datasets]]
name = "a"
n_images = 25
allowed_kinds = ["gaussian_blur"]
label_remap = "identity"
image_size = 20

[[datasets]]
name = "b"
n_images = 25
allowed_kinds = ["additive_noise"]
label_remap = "square"
image_size = 20

[pool]
name = "pool"
n_images = 16
image_size = 20

[preprocess]
short_side = 20
crop = 16

[scorer]
patch_size = 16
channels_in = 1
conv_blocks = [3]
hidden = 4
activation = "relu"

[stage1]
epochs = 2
warmup_epochs = 0
patches_per_image = 2

[stage3]
epochs = 2
warmup_epochs = 0

[pairs]
n_pairs = 40

[eval]
n_patches = 2

[ablation]
pair_ladder = [10, 40]
ensembles = [["a"], ["a", "b"]]
"#;

#[test]
fn experiment_runs_resume_and_match_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out1 = dir.path().join("one");
    let out2 = dir.path().join("two");

    let o = biqa(&[
        "--json",
        "--threads",
        "1",
        "run-experiment",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out1),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = json(&o);
    assert!(first["stages"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s["status"] == "ran"));
    assert_eq!(
        first["summary"]["cross_eval"]["truth"]["models"]
            .as_array()
            .unwrap()
            .len(),
        3
    );

    let o = biqa(&[
        "run-experiment",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out1),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("skipped (up to date)"), "{text}");
    assert!(
        !text
            .lines()
            .any(|l| l.starts_with("stage1") && l.ends_with(" ran")),
        "{text}"
    );

    let o = biqa(&[
        "--threads",
        "3",
        "run-experiment",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out2),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(out1.join("summary.json")).unwrap(),
        fs::read(out2.join("summary.json")).unwrap()
    );

    let o = biqa(&[
        "--json",
        "ablate",
        "pairs",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out1),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["rows"].as_array().unwrap().len(), 2);
    let o = biqa(&[
        "ablate",
        "ensemble",
        "--config",
        p(&cfg),
        "--output-dir",
        p(&out1),
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn print_config_is_a_valid_experiment() {
    let o = biqa(&["print-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed = 42"));
    assert!(text.contains("n_pairs = 5000"));
}
