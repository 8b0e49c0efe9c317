//! Ancestral sampling with classifier-free guidance.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::ConditionId;
use crate::epsnet::{guided_eps, NoisePredictor, SamplerConfig};
use crate::exec::Exec;
use crate::numerics::rng::{self, StreamRng};
use crate::schedule::{NoiseSchedule, ReverseCoefficients, Timestep};
use crate::{fmt_sig9, Error};

/// Trajectories per batched network call.
pub const CHUNK: usize = 128;

/// `x ← a·(x − b·ε̂) + s·z`, in place.
pub fn reverse_update(x: &mut [f32], eps_hat: &[f32], k: ReverseCoefficients, z: &[f32]) {
    let (a, b, s) = (k.a as f32, k.b as f32, k.s as f32);
    for ((xi, &e), &zi) in x.iter_mut().zip(eps_hat).zip(z) {
        *xi = a * (*xi - b * e) + s * zi;
    }
}

/// One guided reverse step for a batch of rows. `z` is drawn from `rng`
/// (`d` normals per row) except at `t = 1`, where it is zero.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<P: NoisePredictor<f32> + ?Sized>(
    pred: &P,
    dim: usize,
    class_count: usize,
    x_t: &[f32],
    t: Timestep,
    c: &[ConditionId],
    sched: &NoiseSchedule,
    cfg_scale: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f32>, Error> {
    let k = sched.reverse_coefficients(t)?;
    let eps = guided_eps(pred, dim, class_count, x_t, t, c, cfg_scale)?;
    let z: Vec<f32> = if t.0 == 1 {
        vec![0.0; x_t.len()]
    } else {
        (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut x = x_t.to_vec();
    reverse_update(&mut x, &eps, k, &z);
    Ok(x)
}

/// Generated points with the condition each trajectory was steered by.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<f32>,
    pub conditions: Vec<ConditionId>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows whose condition is `c`, flattened.
    pub fn points_for(&self, c: ConditionId) -> Vec<f32> {
        (0..self.len())
            .filter(|&i| self.conditions[i] == c)
            .flat_map(|i| self.point(i).to_vec())
            .collect()
    }

    /// CSV `sample_id,x1..xd,condition`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["sample_id".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.push("condition".into());
        wr.write_record(&header).map_err(crate::trainer::csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.point(i).iter().map(|v| fmt_sig9(*v as f64)));
            rec.push(self.conditions[i].0.to_string());
            wr.write_record(&rec).map_err(crate::trainer::csv_err)?;
        }
        wr.flush().map_err(|e| Error::io("sample dump", e))?;
        Ok(())
    }
}

/// One trajectory per entry of `conditions`, from `x_T ~ N(0, I)` through all
/// `T` reverse steps. Trajectory `i` draws only from its own stream
/// `(seed, site, i)`, so output does not depend on chunking or scheduling.
#[allow(clippy::too_many_arguments)]
pub fn generate_conditions<P: NoisePredictor<f32> + Sync + ?Sized>(
    pred: &P,
    dim: usize,
    class_count: usize,
    conditions: &[ConditionId],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    site: &str,
    exec: Exec,
) -> Result<SampleSet, Error> {
    cfg.validate()?;
    if let Some(bad) = conditions.iter().find(|c| c.index() > class_count) {
        return Err(Error::Usage(format!("condition id {} outside 0..={class_count}", bad.0)));
    }
    let n = conditions.len();
    let chunks = n.div_ceil(CHUNK);
    let parts = exec.try_map(chunks, |k| {
        let lo = k * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let c = &conditions[lo..hi];
        let mut rngs: Vec<StreamRng> = (lo..hi).map(|i| rng::stream(cfg.seed, site, i as u64)).collect();
        let mut x: Vec<f32> = Vec::with_capacity(c.len() * dim);
        for r in rngs.iter_mut() {
            x.extend((0..dim).map(|_| r.sample::<f32, _>(StandardNormal)));
        }
        let mut z = vec![0.0f32; x.len()];
        for t in (1..=sched.steps()).rev() {
            let t = Timestep(t);
            let eps = guided_eps(pred, dim, class_count, &x, t, c, cfg.cfg_scale)?;
            if t.0 > 1 {
                for (j, r) in rngs.iter_mut().enumerate() {
                    for v in &mut z[j * dim..(j + 1) * dim] {
                        *v = r.sample(StandardNormal);
                    }
                }
            } else {
                z.iter_mut().for_each(|v| *v = 0.0);
            }
            reverse_update(&mut x, &eps, sched.reverse_coefficients(t)?, &z);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericAbort {
                phase: "sample".into(),
                step: 0,
                value: f64::NAN,
            });
        }
        Ok(x)
    })?;
    Ok(SampleSet {
        dim,
        points: parts.concat(),
        conditions: conditions.to_vec(),
    })
}

/// `count` samples for condition `c`.
#[allow(clippy::too_many_arguments)]
pub fn generate<P: NoisePredictor<f32> + Sync + ?Sized>(
    pred: &P,
    dim: usize,
    class_count: usize,
    count: usize,
    c: ConditionId,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    exec: Exec,
) -> Result<SampleSet, Error> {
    generate_conditions(pred, dim, class_count, &vec![c; count], sched, cfg, "sample", exec)
}
