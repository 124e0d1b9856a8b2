use std::path::Path;
use std::process::{Command, Output};

fn fspool(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fspool"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_writes_outputs_and_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = fspool(
        &[
            "train",
            "--task",
            "polygon",
            "--model",
            "fspool-ae",
            "--loss",
            "direct",
            "--n",
            "4",
            "--steps",
            "40",
            "--eval-samples",
            "32",
            "--out",
            "a",
        ],
        d,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in ["checkpoint.json", "metrics.csv", "resolved-config.json"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    assert!(stdout(&o).starts_with("metric,raw,hundredths\ndirect_mse,"));

    let o = fspool(
        &["train", "--config", "a/resolved-config.json", "--out", "b"],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    for f in ["checkpoint.json", "metrics.csv", "resolved-config.json"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.json"),
        r#"{"autoencoder": {"n_points": 6, "steps": 3, "eval_samples": 4}}"#,
    )
    .unwrap();
    let o = fspool(
        &["train", "--config", "c.json", "--steps", "2", "--out", "o"],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("o/resolved-config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["autoencoder"]["n_points"], 6);
    assert_eq!(cfg["autoencoder"]["steps"], 2);
    assert_eq!(cfg["autoencoder"]["batch"], 16);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: [&[&str]; 5] = [
        &["train", "--model", "fspool-ae", "--loss", "chamfer"],
        &["train", "--model", "baseline", "--loss", "direct"],
        &["train", "--no-such-flag"],
        &["train", "--pool", "median"],
        &["gradcheck", "--suite", "nope"],
    ];
    for args in cases {
        assert_eq!(fspool(args, d).status.code(), Some(2), "{args:?}");
    }
    assert!(!d.join("out").exists());
}

#[test]
fn missing_mnist_is_a_runtime_error_with_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let o = fspool(
        &[
            "train",
            "--task",
            "mnist",
            "--data-dir",
            "nowhere",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fetch_mnist.py"));
}

#[test]
fn eval_probe_and_plot_read_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = fspool(
        &[
            "train",
            "--model",
            "baseline",
            "--loss",
            "hungarian",
            "--n",
            "4",
            "--steps",
            "20",
            "--eval-samples",
            "8",
            "--out",
            "m",
        ],
        d,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let o = fspool(
        &[
            "eval",
            "--checkpoint",
            "m/checkpoint.json",
            "--samples",
            "16",
            "--out",
            "eval.csv",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let table = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("metric,raw,hundredths"));
    assert!(table.contains("\nchamfer,") && table.contains("\nhungarian,"));

    let o = fspool(
        &["eval", "--checkpoint", "m/checkpoint.json", "--n", "8"],
        d,
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "baseline decodes a fixed number of points"
    );

    let o = fspool(
        &[
            "probe",
            "--checkpoint",
            "m/checkpoint.json",
            "--steps",
            "128",
            "--out",
            "p",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(d.join("p/probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 129);
    assert!(csv.starts_with("theta,d_l,d_s\n"));
    assert!(std::fs::read_to_string(d.join("p/probe.svg"))
        .unwrap()
        .starts_with("<svg"));

    let o = fspool(
        &[
            "plot",
            "--checkpoint",
            "m/checkpoint.json",
            "--out",
            "r.svg",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let svg = std::fs::read_to_string(d.join("r.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 12);
}

#[test]
fn gradcheck_reports_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = fspool(
        &["gradcheck", "--suite", "fspool", "--suite", "losses"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 7);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn sequential_flag_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["train", "--n", "4", "--steps", "10", "--eval-samples", "8"];
    let a = fspool(&[&args[..], &["--out", "a"]].concat(), d);
    let b = fspool(&[&args[..], &["--out", "b", "--sequential"]].concat(), d);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    assert_eq!(
        std::fs::read(d.join("a/checkpoint.json")).unwrap(),
        std::fs::read(d.join("b/checkpoint.json")).unwrap()
    );
}
