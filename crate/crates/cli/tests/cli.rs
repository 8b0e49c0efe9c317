use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unlearn"));
    c.env_remove("UF_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn defaults() -> Value {
    let o = run(&["defaults"]);
    assert_eq!(code(&o), 0);
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Small enough that the whole pipeline runs in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = defaults();
    c["data"]["mixture"]["samples_per_class"] = json!(120);
    c["data"]["heldout_per_class"] = json!(80);
    c["arch"]["width"] = json!(32);
    c["arch"]["depth"] = json!(2);
    c["pretrain"]["steps"] = json!(60);
    c["pretrain"]["checkpoint_every"] = json!(20);
    c["unlearn"]["steps"] = json!(20);
    c["unlearn"]["snapshot_every"] = json!(10);
    c["attack"]["steps"] = json!(20);
    c["attack"]["snapshot_every"] = json!(10);
    c["attack"]["aux_per_class"] = json!(40);
    c["attack"]["from_unlearn_steps"] = json!([10, 20]);
    c["eval"]["samples_per_eval"] = json!(60);
    c["eval"]["oracle"]["steps"] = json!(600);
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, run(&["defaults"]).stdout).unwrap();
    let mut c = defaults();
    c["pretrain"]["steps"] = json!(1);
    c["data"]["mixture"]["samples_per_class"] = json!(5);
    std::fs::write(&cfg, c.to_string()).unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut c = defaults();
    c["pretrain"]["learning_rate"] = json!(0.1);
    std::fs::write(&cfg, c.to_string()).unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let mut c = defaults();
    c["version"] = json!(7);
    std::fs::write(&cfg, c.to_string()).unwrap();
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())])), 2);

    // clap usage errors share the code
    assert_eq!(code(&run(&["pretrain", "--bogus"])), 2);
    let o = bin().args(["gen-data", "--out", s(dir.path())]).env("UF_SEED", "x").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_files_exit_4_and_missing_oracle_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let nope = dir.path().join("nope.ufcp");
    let o = run(&["unlearn", "--config", s(&cfg), "--checkpoint", s(&nope), "--method", "dimum", "--out", s(dir.path())]);
    assert_eq!(code(&o), 4);
    let o = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoints-glob",
        &format!("{}/*.ufcp", dir.path().display()),
        "--phase",
        "unlearn",
        "--oracle",
        s(&dir.path().join("oracle.ufo")),
        "--out",
        s(&dir.path().join("e.csv")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let gen = |sub: &str, seed: Option<&str>| {
        let out = dir.path().join(sub);
        let mut c = bin();
        c.args(["gen-data", "--config", s(&cfg), "--out", s(&out)]);
        if let Some(v) = seed {
            c.env("UF_SEED", v);
        }
        assert_eq!(code(&c.output().unwrap()), 0);
        std::fs::read(out.join("train.csv")).unwrap()
    };
    let a = gen("a", None);
    let b = gen("b", Some("0"));
    let c = gen("c", Some("5"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn step_by_step_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let cfg = s(&cfg);
    let ok = |o: Output| {
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };

    let data = d.join("data");
    ok(run(&["gen-data", "--config", cfg, "--out", s(&data)]));
    // refuses to clobber without --force
    assert_eq!(code(&run(&["gen-data", "--config", cfg, "--out", s(&data)])), 2);
    ok(run(&["gen-data", "--config", cfg, "--out", s(&data), "--force"]));
    let train = data.join("train.csv");
    let heldout = data.join("heldout.csv");

    let pre = d.join("pre");
    let pretrained = PathBuf::from(ok(run(&["pretrain", "--config", cfg, "--data", s(&train), "--out", s(&pre)])).trim());
    assert!(pretrained.is_file());
    for k in [20, 40, 60] {
        assert!(pre.join(format!("pretrain_{k}.ufcp")).is_file());
    }

    let oracle = d.join("oracle.ufo");
    ok(run(&["oracle", "--config", cfg, "--data", s(&train), "--heldout", s(&heldout), "--out", s(&oracle)]));

    let ul = d.join("ul");
    let printed = ok(run(&[
        "unlearn",
        "--config",
        cfg,
        "--checkpoint",
        s(&pretrained),
        "--method",
        "dimum",
        "--unlearn-class",
        "1",
        "--data",
        s(&train),
        "--out",
        s(&ul),
    ]));
    assert_eq!(printed.lines().count(), 2);
    assert!(ul.join("dimum_20.ufcp").is_file());
    assert!(ul.join("loss.csv").is_file());
    assert_eq!(code(&run(&["unlearn", "--config", cfg, "--checkpoint", s(&pretrained), "--method", "sgd", "--out", s(&ul)])), 2);
    // only pretrained checkpoints can be unlearned
    let again = run(&["unlearn", "--config", cfg, "--checkpoint", s(&ul.join("dimum_20.ufcp")), "--method", "dimum", "--out", s(&d.join("x"))]);
    assert_eq!(code(&again), 2);

    let att = d.join("att");
    let refused = run(&["attack", "--config", cfg, "--checkpoint", s(&pretrained), "--aux-mode", "retain", "--out", s(&att)]);
    assert_eq!(code(&refused), 2);
    ok(run(&["attack", "--config", cfg, "--checkpoint", s(&ul.join("dimum_20.ufcp")), "--aux-mode", "heldout", "--out", s(&att)]));
    assert!(att.join("attack_20.ufcp").is_file());
    ok(run(&[
        "attack",
        "--config",
        cfg,
        "--checkpoint",
        s(&pretrained),
        "--aux-mode",
        "synthetic",
        "--pretrained",
        s(&pretrained),
        "--allow-any",
        "--out",
        s(&d.join("att_any")),
    ]));

    let curves = d.join("eval").join("unlearn_dimum.csv");
    let pattern = format!("{}/dimum_*.ufcp", ul.display());
    ok(run(&[
        "eval",
        "--config",
        cfg,
        "--checkpoints-glob",
        &pattern,
        "--phase",
        "unlearn",
        "--oracle",
        s(&oracle),
        "--data",
        s(&train),
        "--out",
        s(&curves),
    ]));
    let text = std::fs::read_to_string(&curves).unwrap();
    let steps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["10", "20"]);
    assert!(d.join("eval").join("unlearn_dimum_20.json").is_file());

    let samples = d.join("s.csv");
    ok(run(&["sample", "--config", cfg, "--checkpoint", s(&pretrained), "--class", "2", "--count", "7", "--out", s(&samples)]));
    assert_eq!(std::fs::read_to_string(&samples).unwrap().lines().count(), 8);
}

#[test]
fn pipeline_writes_manifest_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let go = |out: &Path| {
        let o = run(&["pipeline", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let m: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["status"], "complete");
        assert_eq!(m["config"], std::fs::read_to_string(&cfg).unwrap());
        m["artifacts"].clone()
    };
    let a = go(&dir.path().join("a"));
    let arts = a.as_object().unwrap();
    for key in [
        "config.json",
        "data/train.csv",
        "pretrain/pretrained.ufcp",
        "oracle/oracle.ufo",
        "unlearn/ga_retain/loss.csv",
        "unlearn/dimum/dimum_20.ufcp",
        "attack/replace_10/heldout/attack_20.ufcp",
        "eval/unlearn_dimum.csv",
        "eval/attack_dimum_20_retain.csv",
    ] {
        assert!(arts.contains_key(key), "missing {key}");
    }
    assert_eq!(go(&dir.path().join("b")), a);
}
