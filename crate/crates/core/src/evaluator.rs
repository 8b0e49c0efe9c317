//! Oracle classifier, accuracy rates, Fréchet distance, and curve export.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ConditionId, LabeledSet};
use crate::epsnet::{EpsilonNet, SamplerConfig};
use crate::exec::Exec;
use crate::numerics::{rng, AdamState, OptimConfig, ParamStore, SegmentId, Tape, Tensor, Var};
use crate::sampler::generate_conditions;
use crate::schedule::NoiseSchedule;
use crate::trainer::{csv_err, input_matrix};
use crate::{fmt_sig9, Error, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    #[serde(skip)]
    pub seed: u64,
    /// Held-out accuracy below this is an evaluation-setup error.
    pub min_accuracy: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            width: 64,
            steps: 1500,
            batch_size: 128,
            optim: OptimConfig {
                lr: 5e-3,
                ..OptimConfig::default()
            },
            seed: 0,
            min_accuracy: 0.95,
        }
    }
}

/// Nearest-neighbour support test: a point is on the data support when some
/// reference point lies within `radius`.
///
/// A ReLU classifier extrapolates linearly, so points far outside the data
/// still get a confident label. The gate keeps those from counting as any class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGate {
    pub dim: usize,
    pub points: Vec<f32>,
    pub radius: f32,
}

impl SupportGate {
    pub fn new(dim: usize, points: Vec<f32>, radius: f32) -> Result<Self, Error> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Format("support reference is not a non-empty batch of d-vectors".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Format(format!("support radius {radius} must be finite and > 0")));
        }
        Ok(Self { dim, points, radius })
    }

    /// Radius = largest nearest-neighbour distance from a held-out point to `reference`.
    pub fn fit(reference: &LabeledSet, heldout: &LabeledSet) -> Result<Self, Error> {
        let mut gate = Self { dim: reference.dim, points: reference.points().to_vec(), radius: f32::INFINITY };
        let far = heldout.points().chunks(reference.dim).map(|p| gate.nearest_sq(p)).fold(0.0f32, f32::max);
        gate.radius = far.sqrt().max(f32::MIN_POSITIVE);
        Self::new(gate.dim, gate.points, gate.radius)
    }

    fn nearest_sq(&self, p: &[f32]) -> f32 {
        self.points
            .chunks(self.dim)
            .map(|q| q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
            .fold(f32::INFINITY, f32::min)
    }

    pub fn contains(&self, p: &[f32]) -> bool {
        self.nearest_sq(p) <= self.radius * self.radius
    }
}

/// One-hidden-layer ReLU classifier, `d → W → C`, with a support gate.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClassifier {
    pub dim: usize,
    pub class_count: usize,
    pub params: ParamStore,
    pub support: Option<SupportGate>,
    ids: [SegmentId; 4],
}

pub const ORACLE_SEGMENTS: [&str; 4] = ["hidden.w", "hidden.b", "logits.w", "logits.b"];

impl OracleClassifier {
    pub fn init(dim: usize, class_count: usize, width: usize, seed: u64) -> Result<Self, Error> {
        if dim == 0 || width == 0 || class_count < 2 {
            return Err(Error::Config("oracle needs d >= 1, W >= 1, C >= 2".into()));
        }
        let shapes = [
            (vec![dim, width], dim),
            (vec![1, width], dim),
            (vec![width, class_count], width),
            (vec![1, class_count], width),
        ];
        let mut params = ParamStore::new();
        for (i, ((shape, fan_in), name)) in shapes.into_iter().zip(ORACLE_SEGMENTS).enumerate() {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let mut r = rng::stream(seed, "init.oracle", i as u64);
            let n = shape.iter().product();
            params.add(name, Tensor::new(shape, (0..n).map(|_| r.gen_range(-bound..bound)).collect())?)?;
        }
        Self::from_params(dim, class_count, params)
    }

    pub fn from_params(dim: usize, class_count: usize, params: ParamStore) -> Result<Self, Error> {
        let mut ids = [SegmentId(0); 4];
        for (slot, name) in ids.iter_mut().zip(ORACLE_SEGMENTS) {
            *slot = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("oracle is missing segment '{name}'")))?;
        }
        let w = params.value(ids[0]).shape();
        if w.len() != 2 || w[0] != dim || params.value(ids[2]).shape() != [w[1], class_count] {
            return Err(Error::Format("oracle segment shapes do not match d and C".into()));
        }
        Ok(Self {
            dim,
            class_count,
            params,
            support: None,
            ids,
        })
    }

    pub fn with_support(mut self, gate: SupportGate) -> Result<Self, Error> {
        if gate.dim != self.dim {
            return Err(Error::Format(format!("support gate is {}-d, oracle is {}-d", gate.dim, self.dim)));
        }
        self.support = Some(gate);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.params.value(self.ids[0]).shape()[1]
    }

    fn hidden(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var, Error> {
        let w = tape.param(&self.params, self.ids[0])?;
        let b = tape.param(&self.params, self.ids[1])?;
        let h = tape.affine(x, w, b)?;
        Ok(tape.relu(h)?)
    }

    fn logits_var(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var, Error> {
        let h = self.hidden(tape, x)?;
        let w = tape.param(&self.params, self.ids[2])?;
        let b = tape.param(&self.params, self.ids[3])?;
        Ok(tape.affine(h, w, b)?)
    }

    fn rows(&self, points: &[f32]) -> Result<usize, Error> {
        if points.is_empty() || points.len() % self.dim != 0 {
            return Err(Error::Usage(format!("{} values is not a batch of {}-vectors", points.len(), self.dim)));
        }
        Ok(points.len() / self.dim)
    }

    pub fn logits(&self, points: &[f32]) -> Result<Vec<f32>, Error> {
        let n = self.rows(points)?;
        let mut tape = Tape::new();
        let x = input_matrix(&mut tape, n, self.dim, points)?;
        let l = self.logits_var(&mut tape, x)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Hidden-layer activations, the feature space for Fréchet distances.
    pub fn features(&self, points: &[f32]) -> Result<Vec<f32>, Error> {
        let n = self.rows(points)?;
        let mut tape = Tape::new();
        let x = input_matrix(&mut tape, n, self.dim, points)?;
        let h = self.hidden(&mut tape, x)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Top-1 class per row, ignoring the support gate.
    pub fn predict_raw(&self, points: &[f32]) -> Result<Vec<usize>, Error> {
        let logits = self.logits(points)?;
        Ok(logits.chunks(self.class_count).map(argmax).collect())
    }

    /// Top-1 class per row; `class_count` marks a row off the data support.
    pub fn predict(&self, points: &[f32]) -> Result<Vec<usize>, Error> {
        let mut pred = self.predict_raw(points)?;
        if let Some(gate) = &self.support {
            for (p, row) in pred.iter_mut().zip(points.chunks(self.dim)) {
                if !gate.contains(row) {
                    *p = self.class_count;
                }
            }
        }
        Ok(pred)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training on `train`; fails unless held-out accuracy reaches
/// `cfg.min_accuracy`. Returns the classifier, with its support gate fitted
/// on `train` and `heldout`, and the ungated held-out accuracy.
pub fn train_oracle(
    train: &LabeledSet,
    heldout: &LabeledSet,
    cfg: &OracleConfig,
) -> Result<(OracleClassifier, f64), Error> {
    cfg.optim.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("oracle batch_size must be >= 1".into()));
    }
    for k in 0..train.class_count {
        if !train.contains_label(ConditionId(k as u32)) {
            return Err(Error::EvalSetup(format!("oracle training data lacks class {k}")));
        }
    }
    if heldout.is_empty() {
        return Err(Error::EvalSetup("oracle held-out set is empty".into()));
    }
    let mut oracle = OracleClassifier::init(train.dim, train.class_count, cfg.width, cfg.seed)?;
    let mut adam = AdamState::new(&oracle.params);
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, "oracle", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.gen_range(0..train.len())).collect();
        let x: Vec<f32> = idx.iter().flat_map(|&i| train.point(i).to_vec()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| train.label(i).index()).collect();
        let mut tape = Tape::new();
        let xv = input_matrix(&mut tape, idx.len(), train.dim, &x)?;
        let logits = oracle.logits_var(&mut tape, xv)?;
        let loss = tape.softmax_xent(logits, &y)?;
        oracle.params.zero_grads();
        tape.backward(loss, &mut oracle.params)?;
        adam.step(&mut oracle.params, &cfg.optim)?;
    }
    oracle.params.zero_grads();
    let pred = oracle.predict_raw(heldout.points())?;
    let hits = pred.iter().zip(heldout.labels()).filter(|(p, c)| **p == c.index()).count();
    let acc = hits as f64 / heldout.len() as f64;
    if acc < cfg.min_accuracy {
        return Err(Error::EvalSetup(format!(
            "oracle held-out accuracy {acc:.4} is below {}",
            cfg.min_accuracy
        )));
    }
    let oracle = oracle.with_support(SupportGate::fit(train, heldout)?)?;
    Ok((oracle, acc))
}

/// Fraction of `samples` the oracle assigns to `target`.
pub fn accuracy_rate(samples: &[f32], target: ConditionId, oracle: &OracleClassifier) -> Result<f64, Error> {
    let pred = oracle.predict(samples)?;
    Ok(pred.iter().filter(|&&p| p == target.index()).count() as f64 / pred.len() as f64)
}

/// Fraction of `samples` assigned to each class; the extra last bin holds
/// samples off the data support.
pub fn class_histogram(samples: &[f32], oracle: &OracleClassifier) -> Result<Vec<f64>, Error> {
    let pred = oracle.predict(samples)?;
    let mut counts = vec![0usize; oracle.class_count + 1];
    for p in &pred {
        counts[*p] += 1;
    }
    Ok(counts.iter().map(|&k| k as f64 / pred.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrechetSpace {
    Raw,
    Feature,
}

impl FrechetSpace {
    /// Raw coordinates for `d ≤ 8`, oracle features above.
    pub fn for_dim(dim: usize) -> Self {
        if dim <= 8 {
            Self::Raw
        } else {
            Self::Feature
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// A covariance was singular and got `1e-6·I` added.
    pub regularized: bool,
}

const RIDGE: f64 = 1e-6;

fn moments(x: &[f32], dim: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(dim, dim);
    for row in x.chunks(dim) {
        for i in 0..dim {
            let di = row[i] as f64 - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn is_singular(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> bool {
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    eig.eigenvalues.iter().any(|v| *v <= 1e-12 * max.max(1.0))
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` between Gaussian fits of
/// two row-major point sets. The square-root trace is taken on the symmetric
/// `Σ_A^{1/2} Σ_B Σ_A^{1/2}`, which has the same eigenvalues as `Σ_A Σ_B`.
pub fn frechet_distance(a: &[f32], b: &[f32], dim: usize) -> Result<Frechet, Error> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Usage("point sets are not multiples of the dimension".into()));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < dim + 1 || nb < dim + 1 {
        return Err(Error::Usage(format!("need at least {} points per set, got {na} and {nb}", dim + 1)));
    }
    let (ma, mut ca) = moments(a, dim);
    let (mb, mut cb) = moments(b, dim);
    let mut regularized = false;
    let mut ea = SymmetricEigen::new(ca.clone());
    if is_singular(&ea) || is_singular(&SymmetricEigen::new(cb.clone())) {
        regularized = true;
        ca += DMatrix::identity(dim, dim) * RIDGE;
        cb += DMatrix::identity(dim, dim) * RIDGE;
        ea = SymmetricEigen::new(ca.clone());
    }
    let sa = psd_sqrt(&ea);
    let mut m = &sa * &cb * &sa;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let distance = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(Frechet { distance: distance.max(0.0), regularized })
}

/// Fréchet distance in the requested space.
pub fn frechet_in_space(
    a: &[f32],
    b: &[f32],
    dim: usize,
    oracle: &OracleClassifier,
    space: FrechetSpace,
) -> Result<Frechet, Error> {
    match space {
        FrechetSpace::Raw => frechet_distance(a, b, dim),
        FrechetSpace::Feature => frechet_distance(&oracle.features(a)?, &oracle.features(b)?, oracle.width()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub ar_mu: Option<f64>,
    pub ar_dimra: Option<f64>,
    pub ar_cl: Option<f64>,
    pub frechet: Option<f64>,
    #[serde(default)]
    pub frechet_regularized: bool,
    pub sample_count: usize,
}

/// Everything `eval_checkpoint` needs besides the network.
pub struct EvalContext<'a> {
    pub unlearn_class: ConditionId,
    pub alternative_class: ConditionId,
    /// Reference points for the Fréchet distance; must exclude the unlearning class.
    pub retain_reference: &'a LabeledSet,
    pub oracle: &'a OracleClassifier,
    pub sampler: SamplerConfig,
    pub samples_per_eval: usize,
    pub with_frechet: bool,
    pub exec: Exec,
}

/// Samples the unlearning class for the accuracy rates and, if requested,
/// the retain classes in equal shares for the Fréchet distance.
pub fn eval_checkpoint(
    net: &EpsilonNet,
    step: usize,
    phase: Phase,
    sched: &NoiseSchedule,
    ctx: &EvalContext<'_>,
) -> Result<EvalReport, Error> {
    let arch = net.arch();
    if ctx.samples_per_eval == 0 {
        return Err(Error::Config("samples_per_eval must be >= 1".into()));
    }
    if ctx.retain_reference.contains_label(ctx.unlearn_class) {
        return Err(Error::EvalSetup("retain reference contains the unlearning class".into()));
    }
    let conds = vec![ctx.unlearn_class; ctx.samples_per_eval];
    let s = generate_conditions(net, arch.dim, arch.class_count, &conds, sched, &ctx.sampler, "eval.unlearn", ctx.exec)?;
    let hist = class_histogram(&s.points, ctx.oracle)?;
    let ar = hist[ctx.unlearn_class.index()];
    let ar_cl = hist[ctx.alternative_class.index()];
    let mut report = EvalReport {
        step,
        ar_mu: None,
        ar_dimra: None,
        ar_cl: Some(ar_cl),
        frechet: None,
        frechet_regularized: false,
        sample_count: ctx.samples_per_eval,
    };
    match phase {
        Phase::Attack => report.ar_dimra = Some(ar),
        _ => report.ar_mu = Some(ar),
    }
    if ctx.with_frechet {
        let f = retain_frechet(net, sched, ctx)?;
        report.frechet = Some(f.distance);
        report.frechet_regularized = f.regularized;
    }
    Ok(report)
}

/// Fréchet distance between generated retain-class samples and the reference.
pub fn retain_frechet(net: &EpsilonNet, sched: &NoiseSchedule, ctx: &EvalContext<'_>) -> Result<Frechet, Error> {
    let arch = net.arch();
    let retain: Vec<ConditionId> = (0..arch.class_count as u32)
        .map(ConditionId)
        .filter(|c| *c != ctx.unlearn_class)
        .collect();
    let per = (ctx.samples_per_eval / retain.len()).max(arch.dim + 1);
    let conds: Vec<ConditionId> = retain.iter().flat_map(|c| std::iter::repeat(*c).take(per)).collect();
    let s = generate_conditions(net, arch.dim, arch.class_count, &conds, sched, &ctx.sampler, "eval.retain", ctx.exec)?;
    frechet_in_space(
        &s.points,
        ctx.retain_reference.points(),
        arch.dim,
        ctx.oracle,
        FrechetSpace::for_dim(arch.dim),
    )
}

/// Oracle-measured accuracy of `count` samples per class, each conditioned on that class.
pub fn class_generation_accuracy(
    net: &EpsilonNet,
    sched: &NoiseSchedule,
    oracle: &OracleClassifier,
    sampler: &SamplerConfig,
    count: usize,
    exec: Exec,
) -> Result<Vec<f64>, Error> {
    let arch = net.arch();
    let conds: Vec<ConditionId> = (0..arch.class_count as u32)
        .flat_map(|c| std::iter::repeat(ConditionId(c)).take(count))
        .collect();
    let s = generate_conditions(net, arch.dim, arch.class_count, &conds, sched, sampler, "eval.classes", exec)?;
    (0..arch.class_count)
        .map(|k| accuracy_rate(&s.points[k * count * arch.dim..(k + 1) * count * arch.dim], ConditionId(k as u32), oracle))
        .collect()
}

pub const CURVE_HEADER: [&str; 6] = ["step", "ar_mu", "ar_dimra", "ar_cl", "frechet", "sample_count"];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

/// CSV `step,ar_mu,ar_dimra,ar_cl,frechet,sample_count`; absent metrics are empty fields.
pub fn export_curves<W: Write>(reports: &[EvalReport], w: W) -> Result<(), Error> {
    if reports.windows(2).any(|p| p[0].step > p[1].step) {
        return Err(Error::Usage("reports must be sorted by step".into()));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CURVE_HEADER).map_err(csv_err)?;
    for r in reports {
        wr.write_record([
            r.step.to_string(),
            opt(r.ar_mu),
            opt(r.ar_dimra),
            opt(r.ar_cl),
            opt(r.frechet),
            r.sample_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io("curve csv", e))?;
    Ok(())
}

pub fn read_curves<R: Read>(r: R) -> Result<Vec<EvalReport>, Error> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(Error::Format(format!("unexpected curve header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>, Error> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| Error::Format(format!("{s:?}: {e}")))
        }
    };
    let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(EvalReport {
            step: int(&rec[0])?,
            ar_mu: num(&rec[1])?,
            ar_dimra: num(&rec[2])?,
            ar_cl: num(&rec[3])?,
            frechet: num(&rec[4])?,
            frechet_regularized: false,
            sample_count: int(&rec[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_mixture_dataset, gen_test_set, MixtureSpec};
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, mean: f32, std: f32, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, "t", 0);
        (0..n).map(|_| mean + std * r.sample::<f32, _>(StandardNormal)).collect()
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = gaussian(400, 0.0, 1.0, 1);
        let b = gaussian(400, 0.5, 2.0, 2);
        assert!(frechet_distance(&a, &a, 2).unwrap().distance < 1e-6);
        let ab = frechet_distance(&a, &b, 2).unwrap().distance;
        let ba = frechet_distance(&b, &a, 2).unwrap().distance;
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-9);
    }

    #[test]
    fn equal_covariance_gives_mean_gap() {
        let a = gaussian(600, 0.0, 1.0, 3);
        let b: Vec<f32> = a.chunks(2).flat_map(|p| [p[0] + 3.0, p[1] - 1.0]).collect();
        assert_abs_diff_eq!(frechet_distance(&a, &b, 2).unwrap().distance, 10.0, epsilon = 1e-4);
    }

    #[test]
    fn scalar_closed_form() {
        // Exact moments: {−1, 1} has mean 0, variance 2 (n−1); scale to var 1 and 4.
        let s = (0.5f32).sqrt();
        let a = [-s, s];
        let b = [1.0 - 2.0 * s, 1.0 + 2.0 * s];
        // N(0,1) vs N(1,4): 1 + 1 + 4 − 2·2 = 2
        assert_abs_diff_eq!(frechet_distance(&a, &b, 1).unwrap().distance, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let a: Vec<f32> = (0..50).flat_map(|i| [i as f32, 0.0]).collect();
        let f = frechet_distance(&a, &a, 2).unwrap();
        assert!(f.regularized);
        assert!(f.distance.abs() < 1e-6);
        assert!(frechet_distance(&a[..4], &a, 2).is_err());
    }

    fn trained() -> (OracleClassifier, f64, LabeledSet) {
        let spec = MixtureSpec::default();
        let train = gen_mixture_dataset(&spec, 0).unwrap();
        let test = gen_test_set(&spec, 500, 0).unwrap();
        let (o, acc) = train_oracle(&train, &test, &OracleConfig::default()).unwrap();
        (o, acc, test)
    }

    #[test]
    fn oracle_separates_default_mixture() {
        let (o, acc, test) = trained();
        assert!(acc >= 0.99, "{acc}");
        assert_eq!(o.predict(test.points()).unwrap(), o.predict(test.points()).unwrap());
        // all points of class 1 at its first mode
        let m = MixtureSpec::default().classes[1][0].mean.clone();
        let pts: Vec<f32> = (0..20).flat_map(|_| m.iter().map(|v| *v as f32)).collect();
        assert_eq!(accuracy_rate(&pts, ConditionId(1), &o).unwrap(), 1.0);
        assert_eq!(accuracy_rate(&pts, ConditionId(0), &o).unwrap(), 0.0);
    }

    #[test]
    fn oracle_rejects_unreachable_threshold() {
        let spec = MixtureSpec::ring(3, 200, 0.05, 0.35, 1.0);
        let train = gen_mixture_dataset(&spec, 0).unwrap();
        let test = gen_test_set(&spec, 200, 0).unwrap();
        let cfg = OracleConfig { steps: 50, ..OracleConfig::default() };
        assert!(matches!(train_oracle(&train, &test, &cfg), Err(Error::EvalSetup(_))));
    }

    #[test]
    fn curves_round_trip() {
        let reports = vec![
            EvalReport { step: 0, ar_mu: None, ar_dimra: Some(0.02), ar_cl: Some(0.9), frechet: None, frechet_regularized: false, sample_count: 500 },
            EvalReport { step: 200, ar_mu: None, ar_dimra: Some(0.5), ar_cl: Some(0.4), frechet: Some(0.013), frechet_regularized: false, sample_count: 500 },
        ];
        let mut buf = Vec::new();
        export_curves(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,ar_mu,ar_dimra,ar_cl,frechet,sample_count\n0,,0.02,0.9,,500\n"));
        assert_eq!(read_curves(&buf[..]).unwrap(), reports);
        let mut empty = Vec::new();
        export_curves(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
        assert!(export_curves(&[reports[1].clone(), reports[0].clone()], Vec::new()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn accuracy_is_order_invariant(seed in 0u64..1000) {
            let (o, _, test) = ORACLE.with(|o| o.clone());
            let n = test.len();
            let mut idx: Vec<usize> = (0..n).collect();
            let mut r = rng::stream(seed, "perm", 0);
            for i in (1..n).rev() {
                idx.swap(i, r.gen_range(0..=i));
            }
            let shuffled: Vec<f32> = idx.iter().flat_map(|&i| test.point(i).to_vec()).collect();
            for k in 0..3 {
                let c = ConditionId(k);
                proptest::prop_assert_eq!(accuracy_rate(test.points(), c, &o).unwrap(), accuracy_rate(&shuffled, c, &o).unwrap());
            }
        }

        #[test]
        fn frechet_nonnegative_and_symmetric(sa in 0.1f32..3.0, sb in 0.1f32..3.0, shift in -2.0f32..2.0, seed in 0u64..100) {
            let a = gaussian(200, 0.0, sa, seed);
            let b = gaussian(300, shift, sb, seed + 1000);
            let ab = frechet_distance(&a, &b, 2).unwrap().distance;
            let ba = frechet_distance(&b, &a, 2).unwrap().distance;
            proptest::prop_assert!(ab >= -1e-6);
            proptest::prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
        }
    }

    thread_local! {
        static ORACLE: (OracleClassifier, f64, LabeledSet) = trained();
    }
}
