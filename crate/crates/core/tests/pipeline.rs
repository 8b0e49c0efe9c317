use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use unlearn_core::checkpoint::Checkpoint;
use unlearn_core::config::Config;
use unlearn_core::datagen::{MixtureSpec, Role};
use unlearn_core::evaluator::read_curves;
use unlearn_core::exec::Exec;
use unlearn_core::pipeline::{self, expand_glob, read_dataset, run_pipeline, sha256_file, RunLayout, RunManifest, RunStatus};
use unlearn_core::trainer::LossLog;
use unlearn_core::unlearner::Method;
use unlearn_core::{Error, Phase};

fn tiny() -> Config {
    let mut c = Config::default();
    c.data.mixture = MixtureSpec::ring(3, 120, 1.0, 0.35, 0.12);
    c.data.heldout_per_class = 80;
    c.arch.width = 32;
    c.arch.depth = 2;
    c.pretrain.steps = 60;
    c.pretrain.checkpoint_every = 20;
    c.unlearn.steps = 20;
    c.unlearn.snapshot_every = 10;
    c.attack.steps = 20;
    c.attack.snapshot_every = 10;
    c.attack.aux_per_class = 40;
    c.attack.from_unlearn_steps = vec![10, 20];
    c.eval.samples_per_eval = 60;
    c.eval.oracle.steps = 600;
    c.validate().unwrap();
    c
}

fn hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    for p in expand_glob(&format!("{}/**", dir.display())).unwrap() {
        out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), sha256_file(&p).unwrap());
    }
    out
}

fn read_log(path: &Path) -> LossLog {
    LossLog::read_csv(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn pretrain_resumes_from_files() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    pipeline::gen_data(&cfg, &data, false).unwrap();
    let train = data.join("train.csv");

    let whole = dir.path().join("whole");
    pipeline::pretrain(&cfg, &train, &whole).unwrap();

    // keep only the first periodic checkpoint, as after a crash at step 20..40
    let cut = dir.path().join("cut");
    std::fs::create_dir(&cut).unwrap();
    std::fs::copy(whole.join("pretrain_20.ufcp"), cut.join("pretrain_20.ufcp")).unwrap();
    std::fs::copy(whole.join("loss.csv"), cut.join("loss.csv")).unwrap();
    pipeline::pretrain(&cfg, &train, &cut).unwrap();

    assert_eq!(hashes(&whole), hashes(&cut));
    assert_eq!(read_log(&whole.join("loss.csv")).rows.len(), 60);
}

#[test]
fn resume_refuses_a_foreign_checkpoint() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    pipeline::gen_data(&cfg, &data, false).unwrap();
    let out = dir.path().join("pre");
    pipeline::pretrain(&cfg, &data.join("train.csv"), &out).unwrap();
    let mut other = cfg.clone();
    other.seed = 9;
    let err = pipeline::pretrain(&other, &data.join("train.csv"), &out).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn full_run_logs_agree_with_each_other() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let text = cfg.to_json();
    let manifest = run_pipeline(&cfg, &text, &root, Exec::default()).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    let layout = RunLayout::new(&root);

    // every artifact is hashed, and hashes match the files
    let on_disk = hashes(&root);
    assert_eq!(on_disk.len(), manifest.artifacts.len() + 1);
    for (rel, h) in &manifest.artifacts {
        assert_eq!(&on_disk[Path::new(rel)], h, "{rel}");
    }

    let data = read_dataset(&layout.train_csv(), Role::Full, 3).unwrap();
    assert_eq!(data.len(), 360);

    for method in Method::ALL {
        let dir = layout.unlearn_dir(method);
        let log = read_log(&dir.join("loss.csv"));
        let curve = read_curves(std::fs::File::open(layout.curves(&pipeline::unlearn_series(method))).unwrap()).unwrap();
        let steps: Vec<usize> = curve.iter().map(|r| r.step).collect();
        let snaps: Vec<usize> = expand_glob(&format!("{}/{method}_*.ufcp", dir.display()))
            .unwrap()
            .iter()
            .map(|p| Checkpoint::load(p).unwrap().meta.step)
            .collect();
        let mut expect = vec![0];
        let mut sorted = snaps.clone();
        sorted.sort();
        expect.extend(&sorted);
        assert_eq!(steps, expect, "{method}");
        // the log covers exactly the steps that were run
        assert_eq!(log.rows.len(), *sorted.last().unwrap(), "{method}");
        assert!(curve.iter().all(|r| r.ar_mu.is_some() && r.frechet.is_some()));
        for step in &sorted {
            let json = root.join("reports").join(format!("unlearn_{method}_{step}.json"));
            assert!(json.is_file(), "{}", json.display());
        }

        for from in [10, 20] {
            for mode in &cfg.attack.aux_modes {
                let series = pipeline::attack_series(method, from, *mode);
                let curve = read_curves(std::fs::File::open(layout.curves(&series)).unwrap()).unwrap();
                assert_eq!(curve.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 10, 20], "{series}");
                assert!(curve.iter().all(|r| r.ar_dimra.is_some() && r.frechet.is_none()));
                let adir = layout.attack_dir(method, from, *mode);
                assert_eq!(read_log(&adir.join("loss.csv")).rows.len(), 20);
                let ck = Checkpoint::load(adir.join("attack_20.ufcp")).unwrap();
                assert_eq!((ck.meta.phase, ck.meta.method), (Phase::Attack, Some(method)));
            }
        }
    }
    let m = RunManifest::load(&layout.manifest()).unwrap();
    assert_eq!(m.config, text);
}

#[test]
fn evaluation_leaves_checkpoints_untouched() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline::gen_data(&cfg, &d.join("data"), false).unwrap();
    let train = d.join("data/train.csv");
    let pre = pipeline::pretrain(&cfg, &train, &d.join("pre")).unwrap();
    let oracle = d.join("oracle.ufo");
    pipeline::oracle(&cfg, &train, &d.join("data/heldout.csv"), &oracle).unwrap();
    let data = read_dataset(&train, Role::Full, 3).unwrap();
    let ul = d.join("ul");
    pipeline::unlearn(&cfg, &pre, Method::Replace, cfg.unlearn.unlearn_class, &data, &ul, None).unwrap();

    let before = hashes(&ul);
    let oracle_hash = sha256_file(&oracle).unwrap();
    let out = d.join("eval/replace.csv");
    let pattern = format!("{}/replace_*.ufcp", ul.display());
    let a = pipeline::eval_glob(&cfg, &pattern, Phase::Unlearn, &oracle, &data, &out, Exec::default()).unwrap();
    assert_eq!(hashes(&ul), before);
    assert_eq!(sha256_file(&oracle).unwrap(), oracle_hash);

    // and is itself a pure function of its inputs
    let first = std::fs::read(&out).unwrap();
    let b = pipeline::eval_glob(&cfg, &pattern, Phase::Unlearn, &oracle, &data, &out, Exec::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn failed_run_still_writes_an_incomplete_manifest() {
    let mut cfg = tiny();
    cfg.eval.oracle.steps = 1;
    cfg.eval.oracle.min_accuracy = 0.999;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let err = run_pipeline(&cfg, &cfg.to_json(), &root, Exec::default()).unwrap_err();
    assert!(matches!(err, Error::EvalSetup(_)), "{err}");
    let m = RunManifest::load(&root.join("manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::Incomplete);
    assert!(m.error.unwrap().contains("accuracy"));
    assert!(m.artifacts.contains_key("pretrain/pretrained.ufcp"));
}

#[test]
fn glob_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for p in ["a/x_1.ufcp", "a/x_2.ufcp", "a/y_1.ufcp", "a/b/x_3.ufcp", "c.txt"] {
        let p = d.join(p);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, b"").unwrap();
    }
    let names = |pat: &str| -> Vec<String> {
        expand_glob(&format!("{}/{pat}", d.display()))
            .unwrap()
            .iter()
            .map(|p| p.strip_prefix(d).unwrap().to_string_lossy().into_owned())
            .collect()
    };
    assert_eq!(names("a/x_*.ufcp"), ["a/x_1.ufcp", "a/x_2.ufcp"]);
    assert_eq!(names("a/?_1.ufcp"), ["a/x_1.ufcp", "a/y_1.ufcp"]);
    assert_eq!(names("**/x_*.ufcp"), ["a/b/x_3.ufcp", "a/x_1.ufcp", "a/x_2.ufcp"]);
    assert_eq!(names("c.txt"), ["c.txt"]);
    assert!(names("*.none").is_empty());
}
