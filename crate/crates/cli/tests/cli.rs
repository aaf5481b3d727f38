use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_flexitok");

fn config(dir: &Path, extra_source: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 5
out = "{out}"

[[data.sources]]
kind = "advection"
name = "adv"
grid = [32, 32]
frames = 30
trajectories = 2
val_trajectories = 1
{extra_source}

[pretrain]
steps = 4
unique_batches = 2
log_every = 1
val_every = 2
val_batches = 1
checkpoint_every = 2

[pretrain.optimiser]
lr = 2e-3
betas = [0.95, 0.95]
weight_decay = 0.01
eps = 1e-8
clip_norm = 0.5

[rollout]
steps = 3
unique_batches = 2
log_every = 1
val_every = 0
val_batches = 1

[rollout.optimiser]
lr = 1e-3
betas = [0.9, 0.999]
weight_decay = 1e-4
eps = 1e-10
clip_norm = 5.0
"#,
        out = dir.join("run").display()
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn flexitok(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FLEXITOK_DETERMINISTIC").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap_or_else(|_| panic!("not json: {err}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let cfg = s(&cfg);

    let written = ok(flexitok(&["gen-data", cfg]));
    let archives: Vec<&str> = written.lines().collect();
    assert_eq!(archives.len(), 2);
    let val = archives.iter().find(|a| a.ends_with("adv.val.fxta")).unwrap();

    let same = ok(flexitok(&["eval", "--pred", val, "--target", val, "--format", "json"]));
    let report: Value = serde_json::from_str(&same).unwrap();
    assert_eq!(report["vrmse"], 0.0);
    for b in ["neps_low", "neps_mid", "neps_high"] {
        assert_eq!(report[b], 0.0);
    }

    let pre: Value = serde_json::from_str(&ok(flexitok(&["pretrain", cfg]))).unwrap();
    let ckpt = pre["final_checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).is_file());
    let run_dir = dir.path().join("run/pretrain");
    assert!(run_dir.join("config.snapshot").is_file());

    let report = ok(flexitok(&["report", s(&run_dir)]));
    let rec: Value = serde_json::from_str(&report).unwrap();
    // training rows at steps 0..4, validation at 0, 2 and after the last step
    assert_eq!(rec["rows"], 5);
    let curves = fs::read_to_string(run_dir.join("curves.csv")).unwrap();
    let cols: Vec<Vec<&str>> = curves.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(cols.iter().filter(|c| !c[1].is_empty()).count(), 4);
    let val_steps: Vec<&str> = cols.iter().filter(|c| !c[4].is_empty()).map(|c| c[0]).collect();
    assert_eq!(val_steps, ["0", "2", "4"]);
    assert!(fs::metadata(run_dir.join("curves.png")).unwrap().len() > 0);

    let csv = ok(flexitok(&["eval", cfg, "--checkpoint", &ckpt]));
    assert!(csv.starts_with("step,split,field,frame,metric,value"));
    assert!(csv.lines().any(|l| l.starts_with("4,eval,all,all,vrmse,")));

    let roll: Value = serde_json::from_str(&ok(flexitok(&[
        "rollout-train",
        cfg,
        "--tokeniser-init",
        &ckpt,
        "--freeze",
        "mostly-frozen",
        "--steps",
        "2",
    ])))
    .unwrap();
    assert_eq!(roll["steps"], 2);
    let rckpt = roll["final_checkpoint"].as_str().unwrap();
    let text = ok(flexitok(&["rollout-eval", cfg, "--checkpoint", rckpt]));
    for label in ["steps 1-2", "steps 3-6", "steps 7-18"] {
        assert!(text.contains(label), "{text}");
    }
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("colour = 3\n{}", fs::read_to_string(&cfg).unwrap())).unwrap();
    let out = flexitok(&["pretrain", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "config");

    let missing = dir.path().join("nope.ckpt");
    let out = flexitok(&["eval", s(&cfg), "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["error"], "missing_checkpoint");

    // pretrain a 3-channel tokeniser, then initialise a 4-channel model from it
    let mut short = vec!["pretrain", s(&cfg), "--steps", "1"];
    let pre: Value = serde_json::from_str(&ok(flexitok(&short))).unwrap();
    let ckpt = pre["final_checkpoint"].as_str().unwrap().to_string();
    let wide_dir = dir.path().join("wide");
    fs::create_dir_all(&wide_dir).unwrap();
    let grf = "\n[[data.sources]]\nkind = \"gaussian\"\nname = \"grf\"\ngrid = [32, 32]\nframes = 30\ntrajectories = 2\nval_trajectories = 1\nbeta = 2.0\n";
    let wide = config(&wide_dir, grf);
    let out = flexitok(&["rollout-train", s(&wide), "--tokeniser-init", &ckpt]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["error"], "incompatible");

    let lock_dir = dir.path().join("run/rollout");
    fs::create_dir_all(&lock_dir).unwrap();
    fs::write(lock_dir.join("run.lock"), "").unwrap();
    let out = flexitok(&["rollout-train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(7));
    assert_eq!(error_record(&out)["error"], "locked");

    short[0] = "frobnicate";
    let out = flexitok(&short);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "usage");
}
