use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn icre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icre"))
        .args(args)
        .output()
        .expect("icre runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "icre failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_record(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr ends with a JSON error record")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("train.toml");
    std::fs::write(
        &path,
        format!("epochs = 1\nwarmup_epochs = 0\ndecay_epochs = []\ndecay_lrs = []\np = 2\nk = 2\niters_per_epoch = 1\n{extra}"),
    )
    .unwrap();
    path
}

#[test]
fn end_to_end_generate_train_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = stdout_json(&icre(&[
        "gen-synthetic",
        "--ids",
        "3",
        "--per-id",
        "2",
        "--size",
        "64x32",
        "--seed",
        "1",
        "--out",
        s(&data),
    ]));
    assert_eq!(gen["identities"], 3);
    assert_eq!(gen["train_images"], 12);

    let cfg = tiny_config(dir.path(), "");
    let run = dir.path().join("run");
    let trained = stdout_json(&icre(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&data.join("train/manifest.csv")),
        "--out",
        s(&run),
    ]));
    assert_eq!(trained["epochs"], 1);
    assert_eq!(trained["param_hash"].as_str().unwrap().len(), 64);
    assert!(run.join("train_log.jsonl").exists());

    let protocol = dir.path().join("protocol.toml");
    std::fs::write(&protocol, "trials = 2\nranks = [1, 2]\n").unwrap();
    let ckpt = run.join("final.safetensors");
    let report = stdout_json(&icre(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--query",
        s(&data.join("query.csv")),
        "--gallery",
        s(&data.join("gallery.csv")),
        "--protocol",
        s(&protocol),
    ]));
    assert_eq!(report["per_trial"].as_array().unwrap().len(), 2);
    let r1 = report["cmc"]["1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));

    let hist = dir.path().join("dist.csv");
    let summary = stdout_json(&icre(&[
        "plot-dist",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&data.join("test/manifest.csv")),
        "--out",
        s(&hist),
        "--bins",
        "4",
    ]));
    assert!(summary["intra_mean"].is_number() && summary["inter_mean"].is_number());
    let csv = std::fs::read_to_string(&hist).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn ablate_writes_one_csv_line_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout_json(&icre(&[
        "gen-synthetic",
        "--ids",
        "2",
        "--per-id",
        "2",
        "--out",
        s(&data),
    ]));
    let cfg = tiny_config(dir.path(), "");
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "seeds = [0]\n\
         train_manifest = \"data/train/manifest.csv\"\n\
         query_manifest = \"data/query.csv\"\n\
         gallery_manifest = \"data/gallery.csv\"\n\
         [[row]]\nmpfr_on = true\nsdce_on = true\nloss = \"ICG\"\n\
         [[row]]\nmpfr_on = false\nloss = \"TRI\"\n",
    )
    .unwrap();
    let out_dir = dir.path().join("abl");
    let out = icre(&[
        "ablate",
        "--config",
        s(&cfg),
        "--grid",
        s(&grid),
        "--out",
        s(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "BASE,MPFR,SDCE,L_TRI,L_ICG,R1,mAP");
    assert!(lines[1].starts_with("1,0,0,1,0,"));
    assert!(lines[2].starts_with("1,1,1,0,1,"));
    assert_eq!(
        std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap(),
        text
    );
    assert!(out_dir.join("ablation.json").exists());
}

#[test]
fn failures_exit_nonzero_with_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let missing = icre(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope")),
        "--query",
        "q",
        "--gallery",
        "g",
    ]);
    assert_eq!(error_record(&missing)["error"]["kind"], "io");

    let bad_cfg = tiny_config(dir.path(), "learning_rate = 3\n");
    let out = icre(&[
        "train",
        "--config",
        s(&bad_cfg),
        "--manifest",
        "m.csv",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(error_record(&out)["error"]["kind"], "config");

    let bad_manifest = dir.path().join("m.csv");
    std::fs::write(
        &bad_manifest,
        "path,identity,modality,camera\na.png,1,THERMAL,0\n",
    )
    .unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = icre(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&bad_manifest),
        "--out",
        s(dir.path()),
    ]);
    let err = error_record(&out);
    assert!(
        err["error"]["message"]
            .as_str()
            .unwrap()
            .contains("THERMAL"),
        "{err}"
    );

    let usage = icre(&["gen-synthetic", "--size", "64by32", "--out", s(dir.path())]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_record(&usage)["error"]["kind"], "usage");
}
