//! Noise-prediction loss, minibatch drawing, and the pretraining loop.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{ConditionId, LabeledSet, Role};
use crate::epsnet::{EpsilonNet, NoisePredictor};
use crate::numerics::{rng, AdamState, NumericsError, OptimConfig, Real, Tape, Tensor, Var};
use crate::schedule::{diffuse_into, NoiseSchedule, Timestep};
use crate::{fmt_sig9, Error};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Probability of replacing a label by the null condition.
    pub p_uncond: f64,
    #[serde(skip)]
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            optim: OptimConfig {
                lr: 2e-3,
                ..OptimConfig::default()
            },
            p_uncond: 0.1,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must be in [0,1), got {}", self.p_uncond)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.optim.validate()?;
        Ok(())
    }
}

/// Noised minibatch: `x_t` rows with the `ε` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    /// Role of the set the items came from.
    pub role: Role,
    pub dim: usize,
    pub x_t: Vec<f32>,
    pub eps: Vec<f32>,
    pub t: Vec<Timestep>,
    pub c: Vec<ConditionId>,
}

impl NoisedBatch {
    /// Items drawn with replacement, one uniform `t` and fresh `ε` per item,
    /// each label dropped to ∅ with probability `p_uncond`.
    pub fn draw<G: Rng>(
        set: &LabeledSet,
        batch_size: usize,
        sched: &NoiseSchedule,
        p_uncond: f64,
        rng: &mut G,
    ) -> Result<Self, Error> {
        if set.is_empty() || batch_size == 0 {
            return Err(Error::Usage("cannot draw a batch from an empty set".into()));
        }
        let d = set.dim;
        let null = ConditionId::null(set.class_count);
        let mut b = Self {
            role: set.role,
            dim: d,
            x_t: Vec::with_capacity(batch_size * d),
            eps: Vec::with_capacity(batch_size * d),
            t: Vec::with_capacity(batch_size),
            c: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let i = rng.gen_range(0..set.len());
            let t = rng.gen_range(1..=sched.steps());
            let start = b.x_t.len();
            b.x_t.extend_from_slice(set.point(i));
            for _ in 0..d {
                b.eps.push(rng.sample::<f32, _>(StandardNormal));
            }
            diffuse_into(&mut b.x_t[start..], &b.eps[start..], sched.alpha_bar()[t - 1]);
            let drop = p_uncond > 0.0 && rng.gen::<f64>() < p_uncond;
            b.c.push(if drop { null } else { set.label(i) });
            b.t.push(Timestep(t));
        }
        Ok(b)
    }

    /// Batch from explicit clean points, timesteps and noise.
    pub fn from_noise(
        role: Role,
        dim: usize,
        x0: &[f32],
        c: &[ConditionId],
        t: &[Timestep],
        eps: &[f32],
        sched: &NoiseSchedule,
    ) -> Result<Self, Error> {
        let n = c.len();
        if n == 0 || x0.len() != n * dim || eps.len() != n * dim || t.len() != n {
            return Err(Error::Usage("inconsistent batch component lengths".into()));
        }
        let mut x_t = x0.to_vec();
        for (i, ti) in t.iter().enumerate() {
            let ab = sched.alpha_bar_at(*ti)?;
            diffuse_into(&mut x_t[i * dim..(i + 1) * dim], &eps[i * dim..(i + 1) * dim], ab);
        }
        Ok(Self {
            role,
            dim,
            x_t,
            eps: eps.to_vec(),
            t: t.to_vec(),
            c: c.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub(crate) fn x_t_input<R: Real>(&self, tape: &mut Tape<R>) -> Result<Var, Error> {
        input_matrix(tape, self.len(), self.dim, &self.x_t)
    }
}

pub(crate) fn input_matrix<R: Real>(
    tape: &mut Tape<R>,
    rows: usize,
    cols: usize,
    data: &[f32],
) -> Result<Var, Error> {
    let data = data.iter().map(|&v| R::lit(v as f64)).collect();
    Ok(tape.input(Tensor::matrix(rows, cols, data)?)?)
}

/// Mean over the batch of `‖ε − ε_θ(x_t | c)‖²`.
pub fn eps_loss<R: Real, P: NoisePredictor<R> + ?Sized>(
    pred: &P,
    tape: &mut Tape<R>,
    batch: &NoisedBatch,
) -> Result<Var, Error> {
    let x = batch.x_t_input(tape)?;
    let out = pred.predict(tape, x, &batch.t, &batch.c)?;
    let eps = input_matrix(tape, batch.len(), batch.dim, &batch.eps)?;
    let mse = tape.mse(eps, out)?;
    // mse averages over d as well; the loss sums over d.
    Ok(tape.scale(mse, batch.dim as f64)?)
}

/// Draws a batch from `set` and builds its noise-prediction loss.
pub fn base_loss<R: Real, P: NoisePredictor<R> + ?Sized, G: Rng>(
    pred: &P,
    tape: &mut Tape<R>,
    set: &LabeledSet,
    batch_size: usize,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut G,
) -> Result<(Var, NoisedBatch), Error> {
    let batch = NoisedBatch::draw(set, batch_size, sched, p_uncond, rng)?;
    let loss = eps_loss(pred, tape, &batch)?;
    Ok((loss, batch))
}

/// Per-step log with a fixed set of named value columns after `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend(self.columns.iter().cloned());
        wr.write_record(&header).map_err(csv_err)?;
        for (step, vals) in &self.rows {
            let mut rec = vec![step.to_string()];
            rec.extend(vals.iter().map(|v| fmt_sig9(*v)));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::io("loss log", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, Error> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("step") {
            return Err(Error::Format("loss log must start with a 'step' column".into()));
        }
        let mut log = Self {
            columns: header.iter().skip(1).map(String::from).collect(),
            rows: Vec::new(),
        };
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let step = rec[0].parse::<usize>().map_err(|e| Error::Format(e.to_string()))?;
            let vals = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>, _>>()?;
            log.push(step, vals);
        }
        Ok(log)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Optimizer progress carried across a resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: usize,
    pub adam: AdamState,
}

/// Rejects a non-finite or exploding loss before any update is applied.
pub(crate) fn guard_loss(phase: &str, step: usize, value: f64, limit: f64) -> Result<(), Error> {
    if !value.is_finite() || value.abs() > limit {
        return Err(Error::NumericAbort {
            phase: phase.to_string(),
            step,
            value,
        });
    }
    Ok(())
}

/// Maps a non-finite intermediate to an abort at `step`.
pub(crate) fn at_step<T>(phase: &str, step: usize, r: Result<T, Error>) -> Result<T, Error> {
    match r {
        Err(Error::Numerics(NumericsError::NonFinite { .. })) => Err(Error::NumericAbort {
            phase: phase.to_string(),
            step,
            value: f64::NAN,
        }),
        other => other,
    }
}

/// Backward from `root` into freshly zeroed grads, then one Adam update.
pub(crate) fn descend(
    net: &mut EpsilonNet,
    adam: &mut AdamState,
    optim: &OptimConfig,
    tape: &Tape<f32>,
    root: Var,
) -> Result<(), Error> {
    net.params.zero_grads();
    tape.backward(root, &mut net.params)?;
    adam.step(&mut net.params, optim)?;
    Ok(())
}

pub(crate) fn check_compatible(net: &EpsilonNet, set: &LabeledSet, sched: &NoiseSchedule) -> Result<(), Error> {
    let arch = net.arch();
    if set.dim != arch.dim || set.class_count != arch.class_count {
        return Err(Error::Usage(format!(
            "dataset has d={}, C={} but the network expects d={}, C={}",
            set.dim, set.class_count, arch.dim, arch.class_count
        )));
    }
    if sched.steps() != net.layout.horizon {
        return Err(Error::Usage(format!(
            "schedule has T={} but the network was built for T={}",
            sched.steps(),
            net.layout.horizon
        )));
    }
    Ok(())
}

pub const PRETRAIN_PHASE: &str = "pretrain";

/// Runs steps `resume.step + 1 ..= cfg.steps`. `on_checkpoint` fires after
/// every multiple of `checkpoint_every` with the log of this call so far. Step `k` draws from its own stream,
/// so a resumed run continues bit-identically.
pub fn pretrain_loop(
    net: &mut EpsilonNet,
    data: &LabeledSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    resume: Option<TrainState>,
    mut on_checkpoint: impl FnMut(usize, &EpsilonNet, &AdamState, &LossLog) -> Result<(), Error>,
) -> Result<(LossLog, TrainState), Error> {
    cfg.validate()?;
    if data.role != Role::Full {
        return Err(Error::Usage(format!("pretraining needs the full dataset, got {:?}", data.role)));
    }
    check_compatible(net, data, sched)?;
    let mut state = resume.unwrap_or_else(|| TrainState {
        step: 0,
        adam: AdamState::new(&net.params),
    });
    let mut log = LossLog::new(&["loss"]);
    for step in state.step + 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, "pretrain", step as u64);
        let mut tape = Tape::new();
        let (loss, _) = at_step(
            PRETRAIN_PHASE,
            step,
            base_loss(&*net, &mut tape, data, cfg.batch_size, sched, cfg.p_uncond, &mut r),
        )?;
        let value = tape.value(loss).item() as f64;
        guard_loss(PRETRAIN_PHASE, step, value, f64::INFINITY)?;
        at_step(PRETRAIN_PHASE, step, descend(net, &mut state.adam, &cfg.optim, &tape, loss))?;
        state.step = step;
        log.push(step, vec![value]);
        if step % cfg.checkpoint_every == 0 {
            on_checkpoint(step, net, &state.adam, &log)?;
        }
    }
    Ok((log, state))
}
