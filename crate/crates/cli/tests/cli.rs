//! End-to-end checks of the binary: run artifacts, determinism of exports,
//! override precedence, sweep and landscape outputs, compare output, and the
//! documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn flatmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &[
    "--set", "epochs=2",
    "--set", "steps_per_epoch=5",
    "--set", "eval_every=5",
    "--set", "labeled_batch=4",
    "--set", "mu=1",
    "--set", "model.hidden_dims=[4]",
    "--set", "dataset.total=60",
    "--set", "dataset.labels_per_class=2",
    "--set", "eval.probe_batch=8",
];

fn run_tiny(exp: &str, out: &Path, extra: &[&str]) -> Output {
    let out_s = out.display().to_string();
    let mut args = vec!["run", "--exp", exp, "--seed", "1", "--out", &out_s];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    flatmatch(&args)
}

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn repeated_runs_export_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_tiny("flatmatch", &a, &[]).status.success());
    assert!(run_tiny("flatmatch", &b, &[]).status.success());
    let ra = std::fs::read_to_string(a.join("record.csv")).unwrap();
    let rb = std::fs::read_to_string(b.join("record.csv")).unwrap();
    assert_eq!(strip_wall(&ra), strip_wall(&rb));
    assert_eq!(
        std::fs::read(a.join("config.json")).unwrap(),
        std::fs::read(b.join("config.json")).unwrap()
    );
}

#[test]
fn manifest_lists_existing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run_tiny("flatmatch_e", &out, &[]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        assert!(Path::new(o.as_str().unwrap()).exists(), "missing output {o}");
    }
    // efficient flag was implied by the experiment name
    assert_eq!(manifest["config"]["flatmatch"]["efficient"], true);
}

#[test]
fn degenerate_flatmatch_matches_supervised_accuracy_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("flat"), dir.path().join("sup"));
    assert!(run_tiny(
        "flatmatch",
        &a,
        &["--set", "flatmatch.rho=0", "--set", "flatmatch.lambda_xsharp=0"]
    )
    .status
    .success());
    assert!(run_tiny("supervised", &b, &[]).status.success());
    let col = |path: &Path| -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(4).unwrap().to_string()) // test_acc
            .collect()
    };
    assert_eq!(col(&a.join("record.csv")), col(&b.join("record.csv")));
}

#[test]
fn sweep_emits_per_value_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let status = run_tiny(
        "sweep",
        &out,
        &["--param", "flatmatch.rho", "--values", "0.01,0.1", "--seeds", "2"],
    );
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let summary = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert!(summary.starts_with("param,value,runs,mean_err,std_err"));
    assert_eq!(summary.lines().count(), 3); // header + one row per value
    let runs = std::fs::read_to_string(out.join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5); // header + 2 values x 2 seeds
    assert!(out.join("flatmatch_rho_0_01/seed_1/record.csv").exists());
    assert!(out.join("flatmatch_rho_0_1/seed_2/record.csv").exists());
}

#[test]
fn landscape_writes_grids_for_both_tags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scape");
    let status = run_tiny(
        "landscape",
        &out,
        &[
            "--set", "landscape.points=5",
            "--set", "landscape.grid_n=3",
            "--set", "landscape.probe_batch=16",
        ],
    );
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for tag in ["labeled", "unlabeled"] {
        for kind in ["1d", "2d"] {
            let csv = out.join(format!("landscape_{tag}_{kind}.csv"));
            let header = out.join(format!("landscape_{tag}_{kind}.json"));
            assert!(csv.exists() && header.exists(), "missing {tag} {kind} grid");
            let text = std::fs::read_to_string(&csv).unwrap();
            assert!(text.starts_with("a,b,loss\n"));
        }
    }
}

#[test]
fn invalid_config_exits_two_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let result = run_tiny("flatmatch", &out, &["--set", "flatmatch.rho=-1"]);
    assert_eq!(result.status.code(), Some(2));
    let err = String::from_utf8_lossy(&result.stderr);
    assert!(err.contains("flatmatch.rho"), "{err}");

    let result = run_tiny("flatmatch", &out, &["--set", "no.such.field=1"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn numeric_blowup_exits_three_with_flushed_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("blowup");
    let result = run_tiny("supervised", &out, &["--set", "optimizer.lr=1e30"]);
    assert_eq!(result.status.code(), Some(3), "{}", String::from_utf8_lossy(&result.stderr));
    // the record file exists with at least its header; the manifest records
    // the failure
    let record = std::fs::read_to_string(out.join("record.csv")).unwrap();
    assert!(record.starts_with("step,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
}

#[test]
fn compare_groups_methods_and_bolds_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let sup = dir.path().join("sup");
    let flat = dir.path().join("flat");
    assert!(run_tiny("supervised", &sup, &[]).status.success());
    assert!(run_tiny("flatmatch", &flat, &[]).status.success());

    let sup_rec = sup.join("record.csv").display().to_string();
    let flat_rec = flat.join("record.csv").display().to_string();
    let out_csv = dir.path().join("summary.csv").display().to_string();
    let result = flatmatch(&["compare", &sup_rec, &flat_rec, "--out", &out_csv]);
    assert!(result.status.success());
    let table = String::from_utf8_lossy(&result.stdout);
    assert!(table.contains("supervised") && table.contains("flatmatch"), "{table}");
    assert!(table.contains("**"), "best row not bolded: {table}");
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,runs,mean_err,std_err"));

    // single record: std column is zero
    let single = flatmatch(&["compare", &sup_rec]);
    assert!(String::from_utf8_lossy(&single.stdout).contains("+- 0.0000"));

    // mismatched eval schedules are a config error
    let short = dir.path().join("short");
    assert!(run_tiny("supervised", &short, &["--set", "epochs=1"]).status.success());
    let short_rec = short.join("record.csv").display().to_string();
    let mismatch = flatmatch(&["compare", &sup_rec, &short_rec]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn config_file_plus_overrides_resolve_with_documented_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        "epochs = 2\nsteps_per_epoch = 5\neval_every = 5\nlabeled_batch = 4\nmu = 1\n\
         [model]\nhidden_dims = [4]\n\
         [dataset]\ntotal = 60\nlabels_per_class = 2\n\
         [flatmatch]\nrho = 0.2\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let cfg_s = cfg_path.display().to_string();
    let result = flatmatch(&[
        "run", "--exp", "flatmatch", "--seed", "3", "--out", &out_s, "--config", &cfg_s,
        "--set", "flatmatch.rho=0.07",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["flatmatch"]["rho"], 0.07); // CLI beats file
    assert_eq!(config["epochs"], 2); // file beats defaults
    assert_eq!(config["seed"], 3);
}
