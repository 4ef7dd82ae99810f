use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aec")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "task = \"PickupLocal\"\nseeds = [1, 2]\nframes = 5000\neval_envs = 4\ncheckpoint_every = 200\n").unwrap();
    let out = dir.path().join("out");
    ok(&aec(&["train", "--config", p(&cfg), "--frames", "400", "--seed", "3", "--gamma", "0.9", "--out", p(&out)]));
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let c = &stored["config"];
    assert_eq!(stored["command"], "train");
    assert_eq!(c["task"], "PickupLocal");
    assert_eq!(c["frames"], 400);
    assert_eq!(c["seeds"], serde_json::json!([3]));
    assert_eq!(c["gamma"], 0.9);
    assert_eq!(c["eval_envs"], 4);
    for f in ["report.json", "summary.json", "learning_curve.csv", "invocation_rate.csv", "memory/seed_3.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("traces/seed_3/episode_0.jsonl").exists());
}

#[test]
fn train_then_replay_then_eval_and_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let common = ["--frames", "300", "--seed", "0,1"];
    let mut args = vec!["train", "--task", "pickuplocal", "--out", p(&run)];
    args.extend(common);
    let stdout = ok(&aec(&args));
    assert!(stdout.contains("\"success_mean\""));

    assert!(ok(&aec(&["replay", p(&run)])).contains("replay identical"));

    let mem = run.join("memory/seed_0.jsonl");
    let before = fs::read(&mem).unwrap();
    let ev = dir.path().join("eval");
    ok(&aec(&["eval", "--task", "GoToLocal", "--memory-in", p(&mem), "--out", p(&ev)]));
    assert_eq!(fs::read(&mem).unwrap(), before);
    assert!(ev.join("transfer.csv").exists());

    let tr = dir.path().join("transfer");
    ok(&aec(&["transfer", "--task", "GoToLocal", "--memory-in", p(&mem), "--frames", "200", "--seed", "0", "--out", p(&tr)]));
    let csv = fs::read_to_string(tr.join("transfer.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("GoToLocal,PickupLocal,"), "{csv}");
}

#[test]
fn bad_input_fails_cleanly() {
    let out = aec(&["train", "--frames", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame budget"));

    let out = aec(&["transfer", "--task", "GoToLocal"]);
    assert!(!out.status.success());

    let out = aec(&["train", "--encoder", "llm", "--frames", "10"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("endpoint"));

    let out = aec(&["train", "--task", "Nope"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "frams = 3\n").unwrap();
    assert!(!aec(&["train", "--config", p(&cfg)]).status.success());
}

#[test]
fn help_lists_subcommands_and_flags() {
    let top = ok(&aec(&["--help"]));
    for s in ["train", "eval", "transfer", "replay"] {
        assert!(top.contains(s));
    }
    let train = ok(&aec(&["train", "--help"]));
    for f in [
        "--task", "--seed", "--frames", "--encoder", "--critic", "--explorer", "--gamma", "--split", "--endpoint", "--model",
        "--cache-dir", "--mode", "--memory-in", "--out", "--config",
    ] {
        assert!(train.contains(f), "{f}");
    }
}
