use std::path::Path;
use std::process::Command;

fn worldroam(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_worldroam")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"layers": 1, "heads": 2, "width": 16, "mlp_hidden": 32, "patch": 4, "chunk_len": 2, "frame_height": 16, "frame_width": 16},
  "plan": {"iterations": 3, "batch": 1, "chunks": 2}
}"#;

#[test]
fn data_train_roam_eval_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, teachers, init, jdmd) = (tmp.path().join("data"), tmp.path().join("t"), tmp.path().join("i"), tmp.path().join("j"));
    let config = tmp.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();

    worldroam(&["mkdata", "--seed", "3", "--frames", "4", "--count", "2", "--size", "16", "--chunk-len", "2", "--out", p(&data)]);
    assert!(data.join("pair_00003/reference/meta.json").is_file() && data.join("pair_00004/commands.json").is_file());

    worldroam(&["train", "--stage", "teacher", "--config", p(&config), "--data", p(&data), "--out", p(&teachers), "--seed", "1"]);
    assert!(teachers.join("real/weights.bin").is_file() && teachers.join("synthetic/manifest.json").is_file());
    let metrics = std::fs::read_to_string(teachers.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iteration", "stage", "losses", "lrs", "wall_seconds"] {
        assert!(first.get(key).is_some(), "metric record lacks {key}");
    }

    worldroam(&["train", "--stage", "init", "--config", p(&config), "--data", p(&data), "--out", p(&init), "--teachers", p(&teachers)]);
    let student = init.join("student");
    worldroam(&["train", "--stage", "jdmd", "--config", p(&config), "--data", p(&data), "--out", p(&jdmd), "--teachers", p(&teachers), "--student", p(&student)]);

    // A later stage cannot feed an earlier one.
    let back = Command::new(env!("CARGO_BIN_EXE_worldroam"))
        .args(["train", "--stage", "init", "--config", p(&config), "--data", p(&data), "--out", p(&tmp.path().join("x"))])
        .args(["--student", p(&jdmd.join("student"))])
        .output()
        .unwrap();
    assert!(!back.status.success());

    let script = tmp.path().join("script.json");
    std::fs::write(&script, r#"[{"kind":"strafe_left","magnitude":0.2},{"kind":"move_forward","magnitude":0.2},{"kind":"stop","magnitude":0.0}]"#).unwrap();
    let run = tmp.path().join("run");
    let ckpt = jdmd.join("student");
    let episode = data.join("pair_00003");
    worldroam(&["roam", "--ckpt", p(&ckpt), "--episode", p(&episode), "--script", p(&script), "--out", p(&run)]);
    let report = tmp.path().join("report.json");
    let out = worldroam(&["eval", "--run", p(&run), "--report", p(&report)]);
    assert!(out.contains("chunks/sec:"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["chunks"], 3);
    assert!(r["chunks_per_sec"].as_f64().unwrap() > 0.0);

    // Same seed, checkpoint and script: identical stream.
    let again = tmp.path().join("again");
    worldroam(&["roam", "--ckpt", p(&ckpt), "--episode", p(&episode), "--script", p(&script), "--out", p(&again)]);
    assert_eq!(std::fs::read(run.join("frames.bin")).unwrap(), std::fs::read(again.join("frames.bin")).unwrap());
}

#[test]
fn warp_copy_roam_beats_nothing_but_runs_headless() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("s.json");
    std::fs::write(&script, r#"[{"kind":"yaw_left","magnitude":5.0},{"kind":"strafe_right","magnitude":0.1}]"#).unwrap();
    let run = tmp.path().join("run");
    worldroam(&["roam", "--warp-copy", "--scene-seed", "9", "--script", p(&script), "--out", p(&run)]);
    let out = worldroam(&["eval", "--run", p(&run)]);
    let json: serde_json::Value = serde_json::from_str(out.split("chunks/sec").next().unwrap()).unwrap();
    assert!(json["masked_psnr"].as_f64().unwrap() > json["baseline_psnr"].as_f64().unwrap());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_worldroam"))
        .args(["mkdata", "--frames", "5", "--chunk-len", "2", "--out", p(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple"));
    let out = Command::new(env!("CARGO_BIN_EXE_worldroam")).args(["eval", "--run", p(&tmp.path().join("none"))]).output().unwrap();
    assert!(!out.status.success());
}
