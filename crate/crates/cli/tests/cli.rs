//! Black-box checks of the binary: exit codes, config plumbing, file
//! outputs, and reproducibility of seeded subcommands.

use std::path::Path;
use std::process::{Command, Output};

fn nearquery(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearquery"))
        .args(args)
        .env("NEARQUERY_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_and_flags_exit_2_with_usage() {
    let o = nearquery(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("USAGE"));

    let o = nearquery(&["gen-data", "--out", "/tmp/x", "--not.a.key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown configuration key"), "{}", stderr(&o));

    let o = nearquery(&[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_failure_exits_1_with_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = nearquery(&["gen-data", "--out", out.to_str().unwrap(), "--phantom.size", "33"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn gen_data_writes_manifest_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = nearquery(&["gen-data", "--out", out.to_str().unwrap(), "--n", "4", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 4 samples"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 4);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["phantom"]["count"], 4);
    assert_eq!(resolved["phantom"]["seed"], 7);
}

#[test]
fn gen_data_is_reproducible_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = nearquery(&["gen-data", "--out", out.to_str().unwrap(), "--n", "3", "--seed", "9"]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["img_0000.f32", "lbl_0002.u8", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between same-seed runs"
        );
    }
}

#[test]
fn sample_stats_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spread.csv");
    let o = nearquery(&[
        "sample-stats",
        "--out",
        path.to_str().unwrap(),
        "--draws",
        "4000",
        "--levels",
        "2",
        "--seed",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "level,strategy,mean_norm,median_norm,max_norm,frac_within_1px"
    );
    // 4 strategies x 2 levels
    assert_eq!(lines.count(), 8);
    assert!(text.contains("none"));
    assert!(text.contains("clip_divide"));
    assert!(text.contains("sigmoid_symmetric"));
    assert!(text.contains("softmax_sign"));
}

#[test]
fn gradcheck_kernels_only_prints_pass_line() {
    let o = nearquery(&["gradcheck", "--skip-model", "true", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let pass = out.lines().last().unwrap();
    assert!(pass.starts_with("PASS max_rel_err="), "{pass}");
    let val: f64 = pass.trim_start_matches("PASS max_rel_err=").parse().unwrap();
    assert!(val < 1e-4);
}

fn train_micro(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "3",
        "--model.d_model",
        "8",
        "--model.n_heads",
        "2",
        "--model.n_points",
        "2",
        "--model.enc_layers",
        "1",
        "--model.dec_rounds",
        "1",
        "--model.n_queries",
        "3",
        "--model.ffn_hidden",
        "16",
        "--model.channels",
        "[4,6,8,10]",
        "--eval_interval",
        "3",
    ];
    args.extend_from_slice(extra);
    nearquery(&args)
}

#[test]
fn train_eval_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = nearquery(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "2",
        "--seed",
        "5",
        "--phantom.size",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let run = dir.path().join("run");
    let o = train_micro(&data, &run, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("train_log.csv").exists());

    // Re-feeding the resolved config reproduces the run bit for bit.
    let run2 = dir.path().join("run2");
    let resolved = run.join("config.resolved.json");
    let o = nearquery(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--config",
        resolved.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("train_log.csv")).unwrap(),
        std::fs::read(run2.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(run.join("model.ckpt")).unwrap(),
        std::fs::read(run2.join("model.ckpt")).unwrap()
    );

    // eval consumes the checkpoint and emits both report formats with
    // identical values.
    let evald = dir.path().join("eval");
    let o = nearquery(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        evald.to_str().unwrap(),
        "--config",
        resolved.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(evald.join("metrics.csv")).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evald.join("metrics.json")).unwrap()).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let class = cols[0];
        let dice: f64 = cols[2].parse().unwrap();
        let from_json = json["per_class"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["name"] == class)
            .unwrap_or_else(|| panic!("{class} missing in json"));
        assert_eq!(from_json["dice"].as_f64().unwrap(), dice, "csv/json disagree for {class}");
    }
}

#[test]
fn ablate_single_entry_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = nearquery(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "2",
        "--seed",
        "6",
        "--phantom.size",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0));

    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        serde_json::json!([{
            "name": "only",
            "trick": true,
            "offset": {"strategy": "none", "squash_kind": "sigmoid_symmetric",
                        "threshold_px": 4.0, "divisor": 2.0, "scale_c": 2.0},
            "fusion": {"position": "none", "source_level": "stride4"},
            "bls": "off"
        }])
        .to_string(),
    )
    .unwrap();

    let out = dir.path().join("ab");
    let o = nearquery(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--steps",
        "2",
        "--model.d_model",
        "8",
        "--model.n_heads",
        "2",
        "--model.n_points",
        "2",
        "--model.enc_layers",
        "1",
        "--model.dec_rounds",
        "1",
        "--model.n_queries",
        "3",
        "--model.ffn_hidden",
        "16",
        "--model.channels",
        "[4,6,8,10]",
        "--eval_interval",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2); // header + 1 data row
    assert!(csv.lines().nth(1).unwrap().starts_with("only,"));
    let results = std::fs::read_to_string(out.join("ablation_results.csv")).unwrap();
    assert_eq!(results.lines().next().unwrap(), "config,mDice,mAcc,mDice_small");
}
