//! Relearning attack: plain noise-prediction finetuning on auxiliary data
//! that never contains the unlearned class.

use serde::{Deserialize, Serialize};

use crate::datagen::{AuxMode, ConditionId, LabeledSet, Role};
use crate::epsnet::{EpsilonNet, NoisePredictor};
use crate::numerics::{rng, AdamState, OptimConfig, Real, Tape, Var};
use crate::schedule::NoiseSchedule;
use crate::trainer::{at_step, check_compatible, descend, eps_loss, guard_loss, LossLog, NoisedBatch};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub aux_mode: AuxMode,
    #[serde(skip)]
    pub seed: u64,
    pub snapshot_every: usize,
    /// Points per retain class for the heldout and synthetic modes.
    pub aux_per_class: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 128,
            optim: OptimConfig::default(),
            aux_mode: AuxMode::Retain,
            seed: 0,
            snapshot_every: 200,
            aux_per_class: 1000,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 || self.snapshot_every == 0 || self.aux_per_class == 0 {
            return Err(Error::Config("attack batch_size, snapshot_every and aux_per_class must be >= 1".into()));
        }
        self.optim.validate()?;
        Ok(())
    }
}

/// Noise-prediction loss on an auxiliary batch; refuses batches that carry the unlearned class.
pub fn dimra_loss<R: Real, P: NoisePredictor<R> + ?Sized>(
    pred: &P,
    tape: &mut Tape<R>,
    aux: &NoisedBatch,
    unlearn_class: ConditionId,
) -> Result<Var, Error> {
    if aux.role != Role::Auxiliary {
        return Err(Error::Usage(format!("attack batch must come from auxiliary data, got {:?}", aux.role)));
    }
    if aux.c.contains(&unlearn_class) {
        return Err(Error::Integrity("auxiliary batch contains the unlearned class".into()));
    }
    eps_loss(pred, tape, aux)
}

pub const PHASE: &str = "attack";

/// Runs `cfg.steps` attack steps. `on_snapshot` fires at step 0 and after
/// every multiple of `snapshot_every` (and the final step).
pub fn attack_loop(
    net: &mut EpsilonNet,
    aux: &LabeledSet,
    unlearn_class: ConditionId,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
    mut on_snapshot: impl FnMut(usize, &EpsilonNet) -> Result<(), Error>,
) -> Result<LossLog, Error> {
    cfg.validate()?;
    check_compatible(net, aux, sched)?;
    if aux.role != Role::Auxiliary {
        return Err(Error::Usage(format!("attack needs an auxiliary set, got {:?}", aux.role)));
    }
    if aux.contains_label(unlearn_class) {
        return Err(Error::Integrity("auxiliary set contains the unlearned class".into()));
    }
    let mut adam = AdamState::new(&net.params);
    let mut log = LossLog::new(&["dimra_loss"]);
    on_snapshot(0, net)?;
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, PHASE, step as u64);
        let b = NoisedBatch::draw(aux, cfg.batch_size, sched, 0.0, &mut r)?;
        let mut tape = Tape::new();
        let loss = at_step(PHASE, step, dimra_loss(&*net, &mut tape, &b, unlearn_class))?;
        let value = tape.value(loss).item() as f64;
        guard_loss(PHASE, step, value, f64::INFINITY)?;
        at_step(PHASE, step, descend(net, &mut adam, &cfg.optim, &tape, loss))?;
        log.push(step, vec![value]);
        if step % cfg.snapshot_every == 0 || step == cfg.steps {
            on_snapshot(step, net)?;
        }
    }
    Ok(log)
}
