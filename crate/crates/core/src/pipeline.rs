//! File-level operations behind each subcommand, and the end-to-end run.
//!
//! Run directory layout:
//!
//! ```text
//! config.json                         verbatim copy of the config document
//! data/train.csv, data/heldout.csv
//! pretrain/pretrain_<step>.ufcp       periodic, with optimizer moments
//! pretrain/pretrained.ufcp, pretrain/loss.csv
//! oracle/oracle.ufo
//! unlearn/<method>/<method>_<step>.ufcp, unlearn/<method>/loss.csv
//! attack/<method>_<from>/<mode>/attack_<step>.ufcp, .../loss.csv
//! eval/<series>.csv                   metric curves
//! reports/<series>_<step>.json        one report per evaluated snapshot
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacker::attack_loop;
use crate::checkpoint::{Checkpoint, OracleFile};
use crate::config::Config;
use crate::datagen::{
    build_aux, gen_mixture_dataset, gen_test_set, split_unlearn_retain, AuxMode, AuxSource, ConditionId, LabeledSet,
    Role,
};
use crate::epsnet::EpsilonNet;
use crate::evaluator::{eval_checkpoint, export_curves, train_oracle, EvalContext, EvalReport, OracleClassifier};
use crate::exec::Exec;
use crate::sampler::generate;
use crate::schedule::NoiseSchedule;
use crate::trainer::{pretrain_loop, LossLog, TrainState};
use crate::unlearner::{unlearn_loop, Method};
use crate::{Error, Phase};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join(TRAIN_CSV)
    }
    pub fn heldout_csv(&self) -> PathBuf {
        self.data_dir().join(HELDOUT_CSV)
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.pretrain_dir().join(PRETRAINED)
    }
    pub fn oracle(&self) -> PathBuf {
        self.root.join("oracle").join(ORACLE_FILE)
    }
    pub fn unlearn_dir(&self, method: Method) -> PathBuf {
        self.root.join("unlearn").join(method.as_str())
    }
    pub fn attack_dir(&self, method: Method, from: usize, mode: AuxMode) -> PathBuf {
        self.root.join("attack").join(format!("{method}_{from}")).join(mode.as_str())
    }
    pub fn curves(&self, series: &str) -> PathBuf {
        self.root.join("eval").join(format!("{series}.csv"))
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

pub const TRAIN_CSV: &str = "train.csv";
pub const HELDOUT_CSV: &str = "heldout.csv";
pub const PRETRAINED: &str = "pretrained.ufcp";
pub const ORACLE_FILE: &str = "oracle.ufo";
pub const LOSS_CSV: &str = "loss.csv";

pub fn unlearn_snapshot_name(method: Method, step: usize) -> String {
    format!("{method}_{step}.ufcp")
}

pub fn attack_snapshot_name(step: usize) -> String {
    format!("attack_{step}.ufcp")
}

pub fn attack_series(method: Method, from: usize, mode: AuxMode) -> String {
    format!("attack_{method}_{from}_{}", mode.as_str())
}

pub fn unlearn_series(method: Method) -> String {
    format!("unlearn_{method}")
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), Error>) -> Result<(), Error> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &buf)
}

pub fn read_dataset(path: &Path, role: Role, class_count: usize) -> Result<LabeledSet, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    LabeledSet::read_csv(std::io::BufReader::new(file), role, class_count)
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the training set and the held-out test set into `out`.
/// Existing files are only replaced with `force`.
pub fn gen_data(cfg: &Config, out: &Path, force: bool) -> Result<Vec<PathBuf>, Error> {
    let spec = &cfg.data.mixture;
    spec.validate()?;
    let paths = [out.join(TRAIN_CSV), out.join(HELDOUT_CSV)];
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let train = gen_mixture_dataset(spec, cfg.seed)?;
    let heldout = gen_test_set(spec, cfg.data.heldout_per_class, cfg.seed)?;
    write_with(&paths[0], |b| train.write_csv(b))?;
    write_with(&paths[1], |b| heldout.write_csv(b))?;
    Ok(paths.to_vec())
}

fn pretrain_checkpoint_step(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("pretrain_")?.strip_suffix(".ufcp")?.parse().ok()
}

/// Latest periodic checkpoint in `dir`, if any.
fn latest_pretrain_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>, Error> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(step) = pretrain_checkpoint_step(&path) {
            if best.as_ref().map_or(true, |(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Trains from scratch, or resumes from the newest `pretrain_<step>.ufcp` in `out`.
/// Writes `pretrained.ufcp` and `loss.csv`; returns the checkpoint path.
pub fn pretrain(cfg: &Config, data: &Path, out: &Path) -> Result<PathBuf, Error> {
    let full = read_dataset(data, Role::Full, cfg.arch.class_count)?;
    if full.dim != cfg.arch.dim {
        return Err(Error::Config(format!(
            "dataset is {}-dimensional but arch.dim is {}",
            full.dim, cfg.arch.dim
        )));
    }
    let sched = cfg.schedule.build()?;
    let tc = cfg.pretrain_config();
    create_dir(out)?;
    let mut net = EpsilonNet::init(cfg.arch, sched.steps(), cfg.seed)?;
    let mut resume = None;
    let mut prior = LossLog::new(&["loss"]);
    if let Some((step, path)) = latest_pretrain_checkpoint(out)? {
        let ck = Checkpoint::load(&path)?;
        let m = &ck.meta;
        if m.arch != cfg.arch || m.schedule != cfg.schedule || m.seed != cfg.seed || m.phase != Phase::Pretrain {
            return Err(Error::Config(format!("{} was written by a different configuration", path.display())));
        }
        if step > tc.steps {
            return Err(Error::Config(format!("{} is past pretrain.steps = {}", path.display(), tc.steps)));
        }
        let adam = ck.adam.clone().ok_or_else(|| Error::Format(format!("{} has no optimizer state", path.display())))?;
        net = ck.net()?;
        let log_path = out.join(LOSS_CSV);
        let file = std::fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        prior = LossLog::read_csv(std::io::BufReader::new(file))?;
        prior.rows.retain(|(s, _)| *s <= step);
        if prior.rows.len() != step {
            return Err(Error::Format(format!("{} does not cover steps 1..={step}", log_path.display())));
        }
        resume = Some(TrainState { step, adam });
    }
    let base = prior.rows.len();
    let (tail, _) = pretrain_loop(&mut net, &full, &tc, &sched, resume, |step, n, adam, log| {
        let ck = Checkpoint::new(n, cfg.schedule, Phase::Pretrain, step, cfg.seed).with_adam(adam);
        ck.save(out.join(format!("pretrain_{step}.ufcp")))?;
        let mut so_far = prior.clone();
        so_far.rows.extend(log.rows.iter().cloned());
        write_with(&out.join(LOSS_CSV), |b| so_far.write_csv(b))
    })?;
    prior.rows.extend(tail.rows);
    debug_assert_eq!(prior.rows.len(), base.max(tc.steps));
    write_with(&out.join(LOSS_CSV), |b| prior.write_csv(b))?;
    let path = out.join(PRETRAINED);
    Checkpoint::new(&net, cfg.schedule, Phase::Pretrain, tc.steps, cfg.seed).save(&path)?;
    Ok(path)
}

/// Trains and saves the frozen oracle.
pub fn oracle(cfg: &Config, data: &Path, heldout: &Path, out: &Path) -> Result<OracleFile, Error> {
    let train = read_dataset(data, Role::Full, cfg.arch.class_count)?;
    let test = read_dataset(heldout, Role::Full, cfg.arch.class_count)?;
    let (oracle, acc) = train_oracle(&train, &test, &cfg.oracle_config())?;
    let file = OracleFile {
        oracle,
        seed: cfg.seed,
        heldout_accuracy: acc,
    };
    write_file(out, &file.to_bytes()?)?;
    Ok(file)
}

pub fn load_oracle(path: &Path) -> Result<OracleClassifier, Error> {
    if !path.exists() {
        return Err(Error::EvalSetup(format!("oracle {} not found; run the oracle step first", path.display())));
    }
    Ok(OracleFile::load(path)?.oracle)
}

fn load_net(cfg: &Config, path: &Path) -> Result<(Checkpoint, EpsilonNet), Error> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.arch != cfg.arch || ck.meta.schedule != cfg.schedule {
        return Err(Error::Config(format!("{} does not match the configured arch/schedule", path.display())));
    }
    let net = ck.net()?;
    Ok((ck, net))
}

/// Evaluation callback for the in-process loops.
pub type Observer<'a> = dyn FnMut(usize, &EpsilonNet) -> Result<(), Error> + 'a;

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub snapshots: Vec<(usize, PathBuf)>,
    pub log: PathBuf,
    /// The abort message when the loss crossed the threshold.
    pub aborted: Option<String>,
}

/// Unlearns `unlearn_class` from a pretrained checkpoint; snapshots go to
/// `out/<method>_<step>.ufcp` and the loss log to `out/loss.csv`.
pub fn unlearn(
    cfg: &Config,
    checkpoint: &Path,
    method: Method,
    unlearn_class: ConditionId,
    data: &LabeledSet,
    out: &Path,
    observe: Option<&mut Observer<'_>>,
) -> Result<UnlearnRun, Error> {
    let (ck, mut net) = load_net(cfg, checkpoint)?;
    if ck.meta.phase != Phase::Pretrain {
        return Err(Error::Usage(format!(
            "{} is a {} checkpoint; unlearning starts from a pretrained one",
            checkpoint.display(),
            ck.meta.phase
        )));
    }
    let sched = cfg.schedule.build()?;
    let (du, dr) = split_unlearn_retain(data, unlearn_class)?;
    let uc = cfg.unlearn_config(method);
    create_dir(out)?;
    let mut snapshots = Vec::new();
    let mut observe = observe;
    let outcome = unlearn_loop(&mut net, &dr, &du, &uc, &sched, |step, n| {
        let path = out.join(unlearn_snapshot_name(method, step));
        Checkpoint::new(n, cfg.schedule, Phase::Unlearn, step, cfg.seed)
            .with_method(method, unlearn_class)
            .save(&path)?;
        snapshots.push((step, path));
        match observe.as_mut() {
            Some(f) => f(step, n),
            None => Ok(()),
        }
    })?;
    let log = out.join(LOSS_CSV);
    write_with(&log, |b| outcome.log.write_csv(b))?;
    Ok(UnlearnRun {
        snapshots,
        log,
        aborted: outcome.aborted.map(|e| e.to_string()),
    })
}

/// The attacker's dataset for `mode`. Synthetic mode samples the pretrained model.
pub fn aux_set(
    cfg: &Config,
    mode: AuxMode,
    unlearn_class: ConditionId,
    data: &LabeledSet,
    pretrained: Option<&EpsilonNet>,
    exec: Exec,
) -> Result<LabeledSet, Error> {
    match mode {
        AuxMode::Retain => {
            let (_, dr) = split_unlearn_retain(data, unlearn_class)?;
            build_aux(AuxSource::Retain(&dr), unlearn_class)
        }
        AuxMode::Heldout => build_aux(
            AuxSource::Heldout {
                spec: &cfg.data.mixture,
                per_class: cfg.attack.aux_per_class,
                seed: cfg.seed,
            },
            unlearn_class,
        ),
        AuxMode::Synthetic => {
            let samples = match pretrained {
                None => None,
                Some(net) => {
                    let sched = cfg.schedule.build()?;
                    let sampler = cfg.sampler_config();
                    let mut per_class = Vec::new();
                    for k in (0..cfg.arch.class_count as u32).map(ConditionId).filter(|c| *c != unlearn_class) {
                        let s = generate(net, cfg.arch.dim, cfg.arch.class_count, cfg.attack.aux_per_class, k, &sched, &sampler, exec)?;
                        per_class.push((k, s.points.chunks(cfg.arch.dim).map(|p| p.to_vec()).collect()));
                    }
                    Some(per_class)
                }
            };
            build_aux(
                AuxSource::Synthetic {
                    class_count: cfg.arch.class_count,
                    dim: cfg.arch.dim,
                    samples,
                },
                unlearn_class,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub snapshots: Vec<(usize, PathBuf)>,
    pub log: PathBuf,
}

/// Finetunes an unlearned checkpoint on `aux`; snapshots go to
/// `out/attack_<step>.ufcp`. Pretrained checkpoints are refused unless `allow_any`.
pub fn attack(
    cfg: &Config,
    checkpoint: &Path,
    aux_mode: AuxMode,
    aux: &LabeledSet,
    out: &Path,
    allow_any: bool,
    observe: Option<&mut Observer<'_>>,
) -> Result<AttackRun, Error> {
    let (ck, mut net) = load_net(cfg, checkpoint)?;
    if ck.meta.phase == Phase::Pretrain && !allow_any {
        return Err(Error::Usage(format!(
            "{} is a pretrained checkpoint; pass --allow-any to attack it anyway",
            checkpoint.display()
        )));
    }
    let unlearn_class = ck.meta.unlearn_class.unwrap_or(cfg.unlearn.unlearn_class);
    let sched = cfg.schedule.build()?;
    let ac = cfg.attack_config(aux_mode);
    create_dir(out)?;
    let mut snapshots = Vec::new();
    let mut observe = observe;
    let log = attack_loop(&mut net, aux, unlearn_class, &ac, &sched, |step, n| {
        let path = out.join(attack_snapshot_name(step));
        let mut snap = Checkpoint::new(n, cfg.schedule, Phase::Attack, step, cfg.seed);
        snap.meta.method = ck.meta.method;
        snap.meta.unlearn_class = Some(unlearn_class);
        snap.save(&path)?;
        snapshots.push((step, path));
        match observe.as_mut() {
            Some(f) => f(step, n),
            None => Ok(()),
        }
    })?;
    let log_path = out.join(LOSS_CSV);
    write_with(&log_path, |b| log.write_csv(b))?;
    Ok(AttackRun {
        snapshots,
        log: log_path,
    })
}

/// Everything needed to evaluate checkpoints of one run.
pub struct Evaluator {
    pub oracle: OracleClassifier,
    pub retain_reference: LabeledSet,
    pub unlearn_class: ConditionId,
    pub alternative_class: ConditionId,
    pub schedule: NoiseSchedule,
    pub exec: Exec,
    cfg: Config,
}

impl Evaluator {
    pub fn new(cfg: &Config, oracle: OracleClassifier, data: &LabeledSet, exec: Exec) -> Result<Self, Error> {
        if oracle.dim != cfg.arch.dim || oracle.class_count != cfg.arch.class_count {
            return Err(Error::EvalSetup("oracle does not match the configured data shape".into()));
        }
        let (_, dr) = split_unlearn_retain(data, cfg.unlearn.unlearn_class)?;
        Ok(Self {
            oracle,
            retain_reference: dr,
            unlearn_class: cfg.unlearn.unlearn_class,
            alternative_class: cfg.alternative_class()?,
            schedule: cfg.schedule.build()?,
            exec,
            cfg: cfg.clone(),
        })
    }

    pub fn eval(&self, net: &EpsilonNet, step: usize, phase: Phase) -> Result<EvalReport, Error> {
        let ctx = EvalContext {
            unlearn_class: self.unlearn_class,
            alternative_class: self.alternative_class,
            retain_reference: &self.retain_reference,
            oracle: &self.oracle,
            sampler: self.cfg.sampler_config(),
            samples_per_eval: self.cfg.eval.samples_per_eval,
            with_frechet: phase != Phase::Attack || self.cfg.eval.attack_frechet,
            exec: self.exec,
        };
        eval_checkpoint(net, step, phase, &self.schedule, &ctx)
    }
}

pub fn write_report(dir: &Path, series: &str, report: &EvalReport) -> Result<PathBuf, Error> {
    let path = dir.join(format!("{series}_{}.json", report.step));
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Format(format!("report: {e}")))?;
    write_file(&path, &json)?;
    Ok(path)
}

pub fn write_curves(path: &Path, reports: &[EvalReport]) -> Result<(), Error> {
    write_with(path, |b| export_curves(reports, b))
}

/// Evaluates every checkpoint matching `pattern`, sorted by step, and writes
/// the curve CSV to `out` and one JSON report per checkpoint beside it.
pub fn eval_glob(
    cfg: &Config,
    pattern: &str,
    phase: Phase,
    oracle_path: &Path,
    data: &LabeledSet,
    out: &Path,
    exec: Exec,
) -> Result<Vec<EvalReport>, Error> {
    let oracle = load_oracle(oracle_path)?;
    let ev = Evaluator::new(cfg, oracle, data, exec)?;
    let mut found = Vec::new();
    for p in expand_glob(pattern)? {
        let (ck, net) = load_net(cfg, &p)?;
        found.push((ck.meta.step, p, net));
    }
    if found.is_empty() {
        return Err(Error::Usage(format!("no checkpoint matches {pattern:?}")));
    }
    found.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let series = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval").to_string();
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reports = Vec::new();
    for (step, _, net) in &found {
        let r = ev.eval(net, *step, phase)?;
        write_report(&dir, &series, &r)?;
        reports.push(r);
    }
    write_curves(out, &reports)?;
    Ok(reports)
}

/// Files matching a shell-style pattern. Supports `*`, `?` and `**`
/// (any number of directories); no bracket classes.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, Error> {
    let is_wild = |c: &str| c.contains(['*', '?']);
    let comps: Vec<&str> = pattern.split('/').collect();
    let lit = comps.iter().take_while(|c| !is_wild(c)).count();
    if lit == comps.len() {
        let p = PathBuf::from(pattern);
        return Ok(if p.is_file() { vec![p] } else { Vec::new() });
    }
    let base = match comps[..lit].join("/") {
        b if b.is_empty() && pattern.starts_with('/') => "/".to_string(),
        b if b.is_empty() => ".".to_string(),
        b => b,
    };
    let mut re = String::from("^");
    let rest = &comps[lit..];
    for (i, c) in rest.iter().enumerate() {
        let last = i + 1 == rest.len();
        if *c == "**" {
            re.push_str(if last { ".*" } else { "(?:[^/]+/)*" });
            continue;
        }
        for ch in c.chars() {
            match ch {
                '*' => re.push_str("[^/]*"),
                '?' => re.push_str("[^/]"),
                _ => re.push_str(&regex::escape(ch.encode_utf8(&mut [0; 4]))),
            }
        }
        if !last {
            re.push('/');
        }
    }
    re.push('$');
    let re = regex::Regex::new(&re).map_err(|e| Error::Usage(format!("bad glob {pattern:?}: {e}")))?;
    let base = PathBuf::from(base);
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(&base).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| base.clone());
            Error::io(path, std::io::Error::other(e))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(&base).unwrap_or(entry.path());
        let rel = rel.to_string_lossy().replace('\\', "/");
        if re.is_match(&rel) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub seed: u64,
    /// The config document exactly as given.
    pub config: String,
    pub timings: Vec<PhaseTiming>,
    /// Run-relative path → SHA-256 of every file the run produced.
    pub artifacts: BTreeMap<String, String>,
    /// Unlearning runs that stopped at the abort threshold, by method.
    pub aborted: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>, Error> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path != root.join("manifest.json") {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

struct Timer<'a> {
    timings: &'a mut Vec<PhaseTiming>,
}

impl Timer<'_> {
    fn run<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T, Error>) -> Result<T, Error> {
        let t0 = Instant::now();
        let r = f();
        self.timings.push(PhaseTiming {
            phase: phase.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        r
    }
}

/// gen-data → pretrain → oracle → unlearn → attack → eval, writing
/// `manifest.json` at the end, also after a failure (marked incomplete).
pub fn run_pipeline(cfg: &Config, config_text: &str, out: &Path, exec: Exec) -> Result<RunManifest, Error> {
    let layout = RunLayout::new(out);
    create_dir(out)?;
    let mut timings = Vec::new();
    let mut aborted = BTreeMap::new();
    let result = run_phases(cfg, config_text, &layout, exec, &mut timings, &mut aborted);
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        status: if result.is_ok() { RunStatus::Complete } else { RunStatus::Incomplete },
        error: result.as_ref().err().map(|e| e.to_string()),
        seed: cfg.seed,
        config: config_text.to_string(),
        timings,
        artifacts: hash_tree(out)?,
        aborted,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    write_file(&layout.manifest(), &json)?;
    result.map(|_| manifest)
}

fn run_phases(
    cfg: &Config,
    config_text: &str,
    layout: &RunLayout,
    exec: Exec,
    timings: &mut Vec<PhaseTiming>,
    aborted: &mut BTreeMap<String, String>,
) -> Result<(), Error> {
    let mut timer = Timer { timings };
    write_file(&layout.config(), config_text.as_bytes())?;
    timer.run("gen-data", || gen_data(cfg, &layout.data_dir(), true))?;
    let data = read_dataset(&layout.train_csv(), Role::Full, cfg.arch.class_count)?;
    let pretrained = timer.run("pretrain", || pretrain(cfg, &layout.train_csv(), &layout.pretrain_dir()))?;
    let oracle_file = timer.run("oracle", || oracle(cfg, &layout.train_csv(), &layout.heldout_csv(), &layout.oracle()))?;
    let ev = Evaluator::new(cfg, oracle_file.oracle, &data, exec)?;
    let reports_dir = layout.reports_dir();
    let cu = cfg.unlearn.unlearn_class;

    let (_, base_net) = load_net(cfg, &pretrained)?;
    let baseline = timer.run("eval-pretrained", || ev.eval(&base_net, 0, Phase::Unlearn))?;
    write_report(&reports_dir, "pretrained", &baseline)?;

    let mut finals: BTreeMap<Method, Vec<(usize, PathBuf)>> = BTreeMap::new();
    for &method in &cfg.unlearn.methods {
        let series = unlearn_series(method);
        let mut reports = vec![baseline.clone()];
        let run = timer.run(&format!("unlearn-{method}"), || {
            let mut observe = |step: usize, n: &EpsilonNet| {
                let r = ev.eval(n, step, Phase::Unlearn)?;
                write_report(&reports_dir, &series, &r)?;
                reports.push(r);
                Ok(())
            };
            unlearn(cfg, &pretrained, method, cu, &data, &layout.unlearn_dir(method), Some(&mut observe))
        })?;
        write_curves(&layout.curves(&series), &reports)?;
        if let Some(msg) = run.aborted {
            aborted.insert(method.to_string(), msg);
        }
        finals.insert(method, run.snapshots);
    }

    for &method in &cfg.unlearn.methods {
        let snaps = &finals[&method];
        for &from in &cfg.attack.from_unlearn_steps {
            // A run that aborted early is attacked from its last snapshot.
            let Some((_, source)) = snaps.iter().rev().find(|(s, _)| *s <= from).or(snaps.last()) else {
                return Err(Error::Integrity(format!("{method} produced no snapshot to attack")));
            };
            for &mode in &cfg.attack.aux_modes {
                let series = attack_series(method, from, mode);
                let aux = aux_set(cfg, mode, cu, &data, Some(&base_net), exec)?;
                let mut reports = Vec::new();
                timer.run(&format!("attack-{method}-{from}-{}", mode.as_str()), || {
                    let mut observe = |step: usize, n: &EpsilonNet| {
                        let r = ev.eval(n, step, Phase::Attack)?;
                        write_report(&reports_dir, &series, &r)?;
                        reports.push(r);
                        Ok(())
                    };
                    attack(cfg, source, mode, &aux, &layout.attack_dir(method, from, mode), false, Some(&mut observe))
                })?;
                write_curves(&layout.curves(&series), &reports)?;
            }
        }
    }
    Ok(())
}

/// Dataset for the stand-alone subcommands: the given CSV, or a fresh draw from the config.
pub fn dataset_or_generate(cfg: &Config, data: Option<&Path>) -> Result<LabeledSet, Error> {
    match data {
        Some(p) => read_dataset(p, Role::Full, cfg.arch.class_count),
        None => gen_mixture_dataset(&cfg.data.mixture, cfg.seed),
    }
}

/// Optimizer state is only kept in periodic pretraining checkpoints.
pub fn has_optimizer_state(path: &Path) -> Result<bool, Error> {
    Ok(Checkpoint::load(path)?.adam.is_some())
}
