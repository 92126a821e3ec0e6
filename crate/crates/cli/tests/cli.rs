use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "backbone.width = 16
backbone.heads = 2
backbone.seq_len = 4
backbone.ffn_width = 32
adapter.experts = 4
adapter.expert_rank = 2
data.input_dim = 8
data.samples = 120
data.partition = iid
federation.batch_size = 16
federation.lr = 0.01
federation.rounds = 2
";

fn fedmoe(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedmoe"));
    cmd.args(args).env_remove("FEDMOE_OUTPUT_ROOT");
    if let Some(root) = env_root {
        cmd.env("FEDMOE_OUTPUT_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.txt");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = fedmoe(&["run", "-c", s(&cfg), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "config.txt",
        "metadata.txt",
        "metrics.csv",
        "partition.csv",
        "checkpoint.bin",
        "heatmap_round_01.csv",
        "heatmap_round_02.csv",
        "routing_probs_round_02.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let partition = std::fs::read_to_string(out.join("partition.csv")).unwrap();
    assert!(partition.starts_with("index,client_id\n"));
    // never overwrite an existing run
    let again = fedmoe(&["run", "-c", s(&cfg), "--out", s(&out)], None);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn bad_values_exit_with_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fedmoe(&["run", "-c", s(&cfg), "--out", s(&tmp.path().join("r")), "--backbone.heads", "3"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("backbone.heads"), "{}", stderr(&o));
    let o = fedmoe(&["run", "--out", s(&tmp.path().join("r2")), "--no.such_key", "1"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no.such_key"));
    let o = fedmoe(&["run", "--preset", "imagenet"], None);
    assert_eq!(o.status.code(), Some(1));
    let o = fedmoe(&["frobnicate"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = fedmoe(
        &[
            "run",
            "-c",
            s(&cfg),
            "--out",
            s(&tmp.path().join("r")),
            "--data.source",
            "csv",
            "--data.path",
            "/definitely/missing.csv",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/missing.csv"));
}

#[test]
fn zero_rounds_is_a_valid_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("r");
    let o = fedmoe(&["run", "-c", s(&cfg), "--out", s(&out), "--federation.rounds", "0"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("checkpoint.bin").is_file());
    assert!(!out.join("heatmap_round_01.csv").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn output_root_comes_from_environment_and_dirs_are_fresh() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let root = tmp.path().join("root");
    let args = ["run", "-c", s(&cfg), "--federation.rounds", "0"];
    let a = fedmoe(&args, Some(&root));
    let b = fedmoe(&args, Some(&root));
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().collect();
    assert_eq!(dirs.len(), 2);
    let printed = String::from_utf8(a.stdout).unwrap();
    assert!(Path::new(printed.trim()).starts_with(&root));
}

#[test]
fn resolved_config_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let first = tmp.path().join("a");
    let o = fedmoe(&["run", "-c", s(&cfg), "--out", s(&first), "--aux.lambda", "1e-3"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let second = tmp.path().join("b");
    let o = fedmoe(&["run", "-c", s(&first.join("config.txt")), "--out", s(&second)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.csv", "config.txt", "checkpoint.bin"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn presets_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    for (preset, clients) in [("agnews-like", "4"), ("cifar-like", "10")] {
        let out = tmp.path().join(preset);
        let o = fedmoe(
            &["run", "--preset", preset, "--out", s(&out), "--federation.rounds", "0", "--data.samples", "200"],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
        for line in [
            format!("federation.clients = {clients}"),
            "federation.batch_size = 128".into(),
            "federation.lr = 0.0003".into(),
            "federation.weight_decay = 0.01".into(),
        ] {
            assert!(text.lines().any(|l| l == line), "{preset}: {line}");
        }
    }
}

#[test]
fn sweep_runs_the_grid_and_records_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let grid = tmp.path().join("grid.txt");
    std::fs::write(&grid, "adapter.expert_rank, adapter.experts = 1:4, 2:2\nsparsity.k = 1, 3\n").unwrap();
    let out = tmp.path().join("sweep");
    let o = fedmoe(
        &["sweep", "-g", s(&grid), "-c", s(&cfg), "--out", s(&out), "--federation.rounds", "1"],
        None,
    );
    // k = 3 with 2 experts is invalid: that cell fails, the sweep carries on
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "config_id,adapter.expert_rank,adapter.experts,sparsity.k,final_accuracy,final_mean_util_kl,expert_params,trainable_params,status"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].ends_with(",ok"));
    assert!(lines[4].contains("failed"));
    assert!(out.join("cell_000/metrics.csv").is_file());
}

#[test]
fn empty_grid_gives_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.txt");
    std::fs::write(&grid, "# nothing to sweep\n").unwrap();
    let out = tmp.path().join("sweep");
    let o = fedmoe(&["sweep", "-g", s(&grid), "--out", s(&out)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1);
}

fn fake_run(dir: &Path, rows: &[(u32, f64)]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut text = String::from("round,client_id,task_loss,aux_loss,accuracy,mean_util_kl\n");
    for (r, acc) in rows {
        text.push_str(&format!("{r},0,1.0,0.1,,\n{r},global,0.9,0.05,{acc},0.2\n"));
    }
    std::fs::write(dir.join("metrics.csv"), text).unwrap();
}

#[test]
fn compare_merges_by_round() {
    let tmp = tempfile::tempdir().unwrap();
    let (on, off) = (tmp.path().join("aux_on"), tmp.path().join("aux_off"));
    fake_run(&on, &[(1, 0.5), (2, 0.6), (3, 0.7)]);
    fake_run(&off, &[(1, 0.4), (2, 0.45)]);
    let merged = tmp.path().join("cmp.csv");
    let o = fedmoe(&["compare", s(&on), s(&off), "-o", s(&merged)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let text = std::fs::read_to_string(&merged).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "round,aux_on.accuracy,aux_on.mean_util_kl,aux_on.task_loss,aux_off.accuracy,aux_off.mean_util_kl,aux_off.task_loss"
    );
    assert_eq!(lines[1], "1,0.5,0.2,0.9,0.4,0.2,0.9");
    assert_eq!(lines[3], "3,0.7,0.2,0.9,,,");
    assert_eq!(lines.len(), 4);

    let o = fedmoe(&["compare", s(&on)], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().nth(2), Some("2,0.6,0.2,0.9"));
}

#[test]
fn compare_names_the_broken_run() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    fake_run(&good, &[(1, 0.5)]);
    let empty = tmp.path().join("empty_run");
    std::fs::create_dir_all(&empty).unwrap();
    let o = fedmoe(&["compare", s(&good), s(&empty)], None);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("empty_run"));
    let bad = tmp.path().join("bad_run");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("metrics.csv"), "what,is,this\n1,2,3\n").unwrap();
    let o = fedmoe(&["compare", s(&good), s(&bad)], None);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad_run"));
}
