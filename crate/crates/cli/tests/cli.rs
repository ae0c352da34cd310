//! End-to-end tests of the `spaudit` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL_RUN: &str = r#"
seed = 3

[data]
n_train = 400
n_test = 200

[model]
arch = "mlp"
hidden = [8]

[train]
method = "erm"
lr = 0.1
weight_decay = 0.01
epochs = 20
batch_size = 32

[audit]
n_shadows = 4
n_targets = 0
"#;

fn spaudit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spaudit"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn spaudit")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = spaudit(args, cwd);
    assert!(
        out.status.success(),
        "spaudit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL_RUN).unwrap();
    let c = ["--config", "run.toml"];
    ok(&[&c[..], &["synth", "--out", "data"]].concat(), dir);
    ok(
        &[
            &c[..],
            &[
                "shadows",
                "--data",
                "data",
                "--out",
                "scores.csv",
                "--models",
                "models",
            ],
        ]
        .concat(),
        dir,
    );
    ok(
        &[
            &c[..],
            &[
                "attack",
                "--scores",
                "scores.csv",
                "--target",
                "0,1",
                "--out",
                "results.csv",
            ],
        ]
        .concat(),
        dir,
    );
    ok(
        &[
            &c[..],
            &[
                "report",
                "--results",
                "results.csv",
                "--per-group",
                "--manifest",
                "data/train.manifest.json",
                "--out",
                "report",
            ],
        ]
        .concat(),
        dir,
    );
}

#[test]
fn synth_shadows_attack_report_pipeline_is_reproducible() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    assert!(start.elapsed() < Duration::from_secs(120));

    for file in [
        "scores.csv",
        "results.csv",
        "report/report.csv",
        "report/report.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs between runs"
        );
    }
    let svg = fs::read_to_string(a.path().join("report/roc_lira_online.svg")).unwrap();
    // Two classes and two attributes give four groups, all evaluable at this size.
    assert_eq!(svg.matches("<polyline class=\"roc\"").count(), 4);
    assert_eq!(
        svg.matches("(spurious)").count(),
        4,
        "two spurious groups, label and legend"
    );
    let models: Vec<_> = fs::read_dir(a.path().join("models")).unwrap().collect();
    assert_eq!(models.len(), 4);
    let csv = fs::read_to_string(a.path().join("report/report.csv")).unwrap();
    assert!(csv.starts_with("group,is_spurious,attack,requested_fpr"));
}

#[test]
fn cka_and_complexity_on_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let emb = "sample_id,e0,e1,e2\n0,1.0,0.0,0.5\n1,0.0,2.0,0.1\n2,1.5,1.0,0.0\n3,0.2,0.3,3.0\n4,2.0,0.5,1.0\n";
    fs::write(dir.path().join("e.csv"), emb).unwrap();
    ok(
        &[
            "cka", "--emb-a", "e.csv", "--emb-b", "e.csv", "--out", "cka.csv",
        ],
        dir.path(),
    );
    let cka = fs::read_to_string(dir.path().join("cka.csv")).unwrap();
    let v: f64 = cka
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((v - 1.0).abs() < 1e-12);

    let out = ok(
        &[
            "complexity",
            "--emb",
            "e.csv",
            "--tau",
            "0.999999",
            "--out",
            "k.csv",
        ],
        dir.path(),
    );
    let k: usize = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert_eq!(k, 3);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spaudit(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        spaudit(
            &["attack", "--scores", "missing.csv", "--out", "r.csv"],
            dir.path()
        )
        .status
        .code(),
        Some(1)
    );
    fs::write(dir.path().join("bad.csv"), "not,a,score,file\n1,2,3,4\n").unwrap();
    let out = spaudit(
        &["attack", "--scores", "bad.csv", "--out", "r.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    // Constant embeddings have no variance to normalize by.
    fs::write(
        dir.path().join("flat.csv"),
        "sample_id,e0\n0,1.0\n1,1.0\n2,1.0\n",
    )
    .unwrap();
    let out = spaudit(
        &[
            "cka", "--emb-a", "flat.csv", "--emb-b", "flat.csv", "--out", "c.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn matrix_reads_a_directory_of_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = dir.path().join("cfgs");
    fs::create_dir(&cfgs).unwrap();
    for (file, label, arch) in [
        ("a.toml", "linear", "arch = \"linear\""),
        ("b.toml", "mlp-4", "arch = \"mlp\"\nhidden = [4]"),
    ] {
        fs::write(
            cfgs.join(file),
            format!(
                "label = \"{label}\"\n[model]\n{arch}\n[train]\nmethod = \"erm\"\nlr = 0.1\nweight_decay = 0.01\nepochs = 5\nbatch_size = 32\n"
            ),
        )
        .unwrap();
    }
    fs::write(
        dir.path().join("run.toml"),
        "[data]\nn_train = 200\nn_test = 100\n[audit]\nn_shadows = 4\nn_targets = 2\n",
    )
    .unwrap();
    ok(
        &[
            "--config",
            "run.toml",
            "matrix",
            "--config-dir",
            "cfgs",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "shadow\\target,linear,mlp-4");
    assert_eq!(lines.len(), 3);
}
