//! Unlearning losses and the finetuning loop that applies them.
//!
//! * `ga_retain`: `β·L(D_r) − L(D_u)`, gradient ascent on the forgotten class.
//! * `replace`: `β·L(D_r) + ‖sg[ε_θ(x_t|c′)] − ε_θ(x_t|c_u)‖²`, pulling the
//!   forgotten condition onto the prediction for an alternative class.
//! * `dimum`: `β·L(D_u′) + L(D_r)`, ordinary training on the retain set plus a
//!   replacement set that pairs alternative-class points with the forgotten label.

use serde::{Deserialize, Serialize};

use crate::datagen::{build_du_prime, ConditionId, LabeledSet, Role};
use crate::epsnet::{EpsilonNet, NoisePredictor};
use crate::numerics::{rng, AdamState, OptimConfig, Real, Tape, Var};
use crate::schedule::NoiseSchedule;
use crate::trainer::{at_step, check_compatible, descend, eps_loss, guard_loss, LossLog, NoisedBatch};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GaRetain,
    Replace,
    Dimum,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GaRetain, Method::Replace, Method::Dimum];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GaRetain => "ga_retain",
            Method::Replace => "replace",
            Method::Dimum => "dimum",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method '{s}' (expected ga_retain, replace or dimum)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Weight β between the two loss terms.
    pub balance_coef: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Defaults to the class after the unlearning class, cyclically.
    pub alternative_class: Option<ConditionId>,
    #[serde(skip)]
    pub seed: u64,
    pub snapshot_every: usize,
    /// |total loss| above this aborts the run.
    pub abort_threshold: f64,
    /// Size of the replacement set; defaults to |D_u|.
    pub replacement_size: Option<usize>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Dimum,
            balance_coef: 1.0,
            steps: 2000,
            batch_size: 128,
            optim: OptimConfig::default(),
            alternative_class: None,
            seed: 0,
            snapshot_every: 100,
            abort_threshold: 1e6,
            replacement_size: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.balance_coef > 0.0 && self.balance_coef.is_finite()) {
            return Err(Error::Config(format!("balance_coef must be > 0, got {}", self.balance_coef)));
        }
        if self.batch_size == 0 || self.snapshot_every == 0 {
            return Err(Error::Config("unlearn batch_size and snapshot_every must be >= 1".into()));
        }
        if !(self.abort_threshold > 0.0) {
            return Err(Error::Config("abort_threshold must be positive".into()));
        }
        self.optim.validate()?;
        Ok(())
    }

    pub fn alternative_for(&self, unlearn: ConditionId, class_count: usize) -> Result<ConditionId, Error> {
        let alt = self.alternative_class.unwrap_or_else(|| unlearn.next_class(class_count));
        if alt == unlearn || alt.index() >= class_count {
            return Err(Error::Config(format!(
                "alternative class {} must be a real class different from the unlearning class {}",
                alt.0, unlearn.0
            )));
        }
        Ok(alt)
    }
}

/// Loss graph handles: the optimized total and its two logged components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub retain: Var,
    pub unlearn: Var,
}

/// `β·L(retain) − L(unlearn)`.
pub fn loss_ga_retain<R: Real, P: NoisePredictor<R> + ?Sized>(
    pred: &P,
    tape: &mut Tape<R>,
    retain: &NoisedBatch,
    unlearn: &NoisedBatch,
    beta: f64,
) -> Result<LossTerms, Error> {
    let r = eps_loss(pred, tape, retain)?;
    let u = eps_loss(pred, tape, unlearn)?;
    let br = tape.scale(r, beta)?;
    let total = tape.sub(br, u)?;
    Ok(LossTerms { total, retain: r, unlearn: u })
}

/// `β·L(retain) + mean ‖sg[target(x_t|c′)] − pred(x_t|c_u)‖²` over the
/// noised unlearning batch. `target` is normally the same network as `pred`;
/// its output enters the graph only through a detach.
pub fn loss_replace<R: Real, P: NoisePredictor<R> + ?Sized, Q: NoisePredictor<R> + ?Sized>(
    pred: &P,
    target: &Q,
    tape: &mut Tape<R>,
    retain: &NoisedBatch,
    unlearn: &NoisedBatch,
    beta: f64,
    alternative: ConditionId,
) -> Result<LossTerms, Error> {
    let r = eps_loss(pred, tape, retain)?;
    let x = unlearn.x_t_input(tape)?;
    let alt = vec![alternative; unlearn.len()];
    let goal = target.predict(tape, x, &unlearn.t, &alt)?;
    let goal = tape.detach(goal)?;
    let out = pred.predict(tape, x, &unlearn.t, &unlearn.c)?;
    let mse = tape.mse(goal, out)?;
    let u = tape.scale(mse, unlearn.dim as f64)?;
    let br = tape.scale(r, beta)?;
    let total = tape.add(br, u)?;
    Ok(LossTerms { total, retain: r, unlearn: u })
}

/// `β·L(replacement) + L(retain)`, both plain noise-prediction losses.
pub fn loss_dimum<R: Real, P: NoisePredictor<R> + ?Sized>(
    pred: &P,
    tape: &mut Tape<R>,
    retain: &NoisedBatch,
    replacement: &NoisedBatch,
    beta: f64,
) -> Result<LossTerms, Error> {
    if replacement.role != Role::Replacement || retain.role != Role::Retain {
        return Err(Error::Usage(format!(
            "memorization loss needs retain and replacement batches, got {:?} and {:?}",
            retain.role, replacement.role
        )));
    }
    let r = eps_loss(pred, tape, retain)?;
    let u = eps_loss(pred, tape, replacement)?;
    let bu = tape.scale(u, beta)?;
    let total = tape.add(bu, r)?;
    Ok(LossTerms { total, retain: r, unlearn: u })
}

pub const LOG_COLUMNS: [&str; 3] = ["retain_loss", "unlearn_loss", "total_loss"];

/// Result of an unlearning run that may have stopped early.
#[derive(Debug)]
pub struct UnlearnOutcome {
    pub log: LossLog,
    /// Set when the loss crossed the abort threshold; the net holds the last good parameters.
    pub aborted: Option<Error>,
}

/// The single class of `unlearn`.
pub fn unlearn_class_of(unlearn: &LabeledSet) -> Result<ConditionId, Error> {
    let c = unlearn
        .labels()
        .first()
        .copied()
        .ok_or_else(|| Error::Usage("unlearning set is empty".into()))?;
    if unlearn.labels().iter().any(|l| *l != c) {
        return Err(Error::Integrity("unlearning set mixes several classes".into()));
    }
    Ok(c)
}

/// Finetunes `net` with the configured method for `cfg.steps` steps.
///
/// `on_snapshot` fires after every multiple of `snapshot_every` and after the
/// last completed step. A numeric abort ends the loop with the parameters of
/// the last finite step and is reported in the outcome rather than as an error,
/// since divergence is an expected result for gradient ascent.
pub fn unlearn_loop(
    net: &mut EpsilonNet,
    retain: &LabeledSet,
    unlearn: &LabeledSet,
    cfg: &UnlearnConfig,
    sched: &NoiseSchedule,
    mut on_snapshot: impl FnMut(usize, &EpsilonNet) -> Result<(), Error>,
) -> Result<UnlearnOutcome, Error> {
    cfg.validate()?;
    check_compatible(net, retain, sched)?;
    let cu = unlearn_class_of(unlearn)?;
    if retain.contains_label(cu) {
        return Err(Error::Integrity("retain set contains the unlearning class".into()));
    }
    let class_count = net.arch().class_count;
    let alt = cfg.alternative_for(cu, class_count)?;
    let replacement = match cfg.method {
        Method::Dimum => Some(build_du_prime(
            retain,
            unlearn,
            alt,
            cfg.replacement_size.unwrap_or(unlearn.len()),
            cfg.seed,
        )?),
        _ => None,
    };
    let phase = format!("unlearn.{}", cfg.method);
    let mut adam = AdamState::new(&net.params);
    let mut log = LossLog::new(&LOG_COLUMNS);
    let mut last_snap = None;
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, &phase, step as u64);
        let rb = NoisedBatch::draw(retain, cfg.batch_size, sched, 0.0, &mut r)?;
        let second = replacement.as_ref().unwrap_or(unlearn);
        let ub = NoisedBatch::draw(second, cfg.batch_size, sched, 0.0, &mut r)?;
        let mut tape = Tape::new();
        let built = at_step(&phase, step, {
            let me = &*net;
            match cfg.method {
                Method::GaRetain => loss_ga_retain(me, &mut tape, &rb, &ub, cfg.balance_coef),
                Method::Replace => loss_replace(me, me, &mut tape, &rb, &ub, cfg.balance_coef, alt),
                Method::Dimum => loss_dimum(me, &mut tape, &rb, &ub, cfg.balance_coef),
            }
        });
        let terms = match built {
            Ok(t) => t,
            Err(e @ Error::NumericAbort { .. }) => return finish(net, log, e, step, &mut last_snap, &mut on_snapshot),
            Err(e) => return Err(e),
        };
        let total = tape.value(terms.total).item() as f64;
        if let Err(e) = guard_loss(&phase, step, total, cfg.abort_threshold) {
            return finish(net, log, e, step, &mut last_snap, &mut on_snapshot);
        }
        let before = net.params.clone();
        if let Err(e) = at_step(&phase, step, descend(net, &mut adam, &cfg.optim, &tape, terms.total)) {
            if matches!(e, Error::NumericAbort { .. }) {
                net.params = before;
                return finish(net, log, e, step, &mut last_snap, &mut on_snapshot);
            }
            return Err(e);
        }
        log.push(
            step,
            vec![
                tape.value(terms.retain).item() as f64,
                tape.value(terms.unlearn).item() as f64,
                total,
            ],
        );
        if step % cfg.snapshot_every == 0 || step == cfg.steps {
            on_snapshot(step, net)?;
            last_snap = Some(step);
        }
    }
    Ok(UnlearnOutcome { log, aborted: None })
}

fn finish(
    net: &EpsilonNet,
    log: LossLog,
    err: Error,
    step: usize,
    last_snap: &mut Option<usize>,
    on_snapshot: &mut impl FnMut(usize, &EpsilonNet) -> Result<(), Error>,
) -> Result<UnlearnOutcome, Error> {
    // Parameters are those after step - 1.
    let done = step - 1;
    if done > 0 && *last_snap != Some(done) {
        on_snapshot(done, net)?;
    }
    Ok(UnlearnOutcome { log, aborted: Some(err) })
}
