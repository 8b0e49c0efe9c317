//! Class-conditional synthetic data and the dataset roles used by unlearning
//! and the relearning attack.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::rng;
use crate::Error;

/// Class label, or the reserved null condition when equal to the class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub u32);

impl ConditionId {
    pub fn null(class_count: usize) -> Self {
        Self(class_count as u32)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_null(self, class_count: usize) -> bool {
        self.index() == class_count
    }

    /// The class after `self`, wrapping around.
    pub fn next_class(self, class_count: usize) -> Self {
        Self(((self.index() + 1) % class_count) as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Full,
    Retain,
    Unlearn,
    Replacement,
    Auxiliary,
}

/// Role-tagged labeled points, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub role: Role,
    pub class_count: usize,
    pub dim: usize,
    points: Vec<f32>,
    labels: Vec<ConditionId>,
}

impl LabeledSet {
    pub fn new(role: Role, class_count: usize, dim: usize) -> Self {
        Self {
            role,
            class_count,
            dim,
            points: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(
        role: Role,
        class_count: usize,
        dim: usize,
        points: Vec<f32>,
        labels: Vec<ConditionId>,
    ) -> Result<Self, Error> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(Error::Format(format!(
                "{} values cannot hold {} points of dimension {dim}",
                points.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|c| c.index() >= class_count) {
            return Err(Error::Format(format!(
                "label {} outside 0..{class_count}",
                bad.0
            )));
        }
        Ok(Self {
            role,
            class_count,
            dim,
            points,
            labels,
        })
    }

    pub fn push(&mut self, x: &[f32], c: ConditionId) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert!(c.index() < self.class_count);
        self.points.extend_from_slice(x);
        self.labels.push(c);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> ConditionId {
        self.labels[i]
    }

    pub fn points(&self) -> &[f32] {
        &self.points
    }

    pub fn labels(&self) -> &[ConditionId] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], ConditionId)> {
        self.points.chunks(self.dim).zip(self.labels.iter().copied())
    }

    pub fn count_label(&self, c: ConditionId) -> usize {
        self.labels.iter().filter(|&&l| l == c).count()
    }

    pub fn contains_label(&self, c: ConditionId) -> bool {
        self.labels.contains(&c)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Items whose label satisfies `keep`, under a new role.
    pub fn filter_labels(&self, role: Role, keep: impl Fn(ConditionId) -> bool) -> Self {
        let mut out = Self::new(role, self.class_count, self.dim);
        for (x, c) in self.iter() {
            if keep(c) {
                out.push(x, c);
            }
        }
        out
    }

    /// Writes `x1,...,xd,label` CSV with 9 significant digits per coordinate.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), Error> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for (x, c) in self.iter() {
            let mut rec: Vec<String> = x.iter().map(|&v| crate::fmt_sig9(v as f64)).collect();
            rec.push(c.0.to_string());
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, role: Role, class_count: usize) -> Result<Self, Error> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let n = headers.len();
        if n < 2 || &headers[n - 1] != "label" {
            return Err(Error::Format(format!("unexpected dataset header {headers:?}")));
        }
        for (i, h) in headers.iter().take(n - 1).enumerate() {
            if h != format!("x{}", i + 1) {
                return Err(Error::Format(format!("unexpected column '{h}'")));
            }
        }
        let dim = n - 1;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            for f in rec.iter().take(dim) {
                points.push(
                    f.trim()
                        .parse::<f32>()
                        .map_err(|e| Error::Format(format!("bad coordinate '{f}': {e}")))?,
                );
            }
            let l = &rec[dim];
            labels.push(ConditionId(
                l.trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("bad label '{l}': {e}")))?,
            ));
        }
        Self::from_parts(role, class_count, dim, points, labels)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// One Gaussian component of a class mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, symmetric positive semi-definite.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// `classes[k]` is the mixture for label `k`.
    pub classes: Vec<Vec<Component>>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self::ring(3, 1000, 1.0, 0.35, 0.12)
    }
}

impl MixtureSpec {
    /// Classes evenly spaced on a circle of `radius`; each class is two
    /// equal-weight isotropic components offset `±spread` radians.
    pub fn ring(class_count: usize, samples_per_class: usize, radius: f64, spread: f64, std: f64) -> Self {
        let classes = (0..class_count)
            .map(|k| {
                let base = std::f64::consts::TAU * k as f64 / class_count as f64;
                [-spread, spread]
                    .iter()
                    .map(|off| Component {
                        weight: 0.5,
                        mean: vec![radius * (base + off).cos(), radius * (base + off).sin()],
                        cov: vec![std * std, 0.0, 0.0, std * std],
                    })
                    .collect()
            })
            .collect();
        Self {
            class_count,
            dim: 2,
            samples_per_class,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.class_count < 2 {
            return Err(Error::Config("mixture needs at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        if self.classes.len() != self.class_count {
            return Err(Error::Config(format!(
                "{} class mixtures for {} classes",
                self.classes.len(),
                self.class_count
            )));
        }
        for (k, comps) in self.classes.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::Config(format!("class {k} has no components")));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if comps.iter().any(|c| !(c.weight >= 0.0)) || !(total > 0.0) {
                return Err(Error::Config(format!("class {k} has invalid weights")));
            }
            for c in comps {
                if c.mean.len() != self.dim || c.cov.len() != self.dim * self.dim {
                    return Err(Error::Config(format!("class {k} component has wrong dimension")));
                }
                cholesky_psd(&c.cov, self.dim).ok_or_else(|| {
                    Error::Config(format!("class {k} covariance is not positive semi-definite"))
                })?;
            }
        }
        Ok(())
    }

    /// Population mean of class `k`.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let comps = &self.classes[k];
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let mut m = vec![0.0; self.dim];
        for c in comps {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight / total * ci;
            }
        }
        m
    }

    /// Population per-axis variance of class `k`.
    pub fn class_variance(&self, k: usize) -> Vec<f64> {
        let comps = &self.classes[k];
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let mean = self.class_mean(k);
        (0..self.dim)
            .map(|j| {
                comps
                    .iter()
                    .map(|c| c.weight / total * (c.cov[j * self.dim + j] + (c.mean[j] - mean[j]).powi(2)))
                    .sum()
            })
            .collect()
    }

    fn sample_class(&self, k: usize, count: usize, rng: &mut impl Rng, out: &mut LabeledSet) {
        let comps = &self.classes[k];
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let chols: Vec<Vec<f64>> = comps
            .iter()
            .map(|c| cholesky_psd(&c.cov, self.dim).expect("validated covariance"))
            .collect();
        let mut z = vec![0.0f64; self.dim];
        let mut x = vec![0.0f32; self.dim];
        for _ in 0..count {
            let mut u: f64 = rng.gen::<f64>() * total;
            let mut ci = comps.len() - 1;
            for (i, c) in comps.iter().enumerate() {
                if u < c.weight {
                    ci = i;
                    break;
                }
                u -= c.weight;
            }
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let l = &chols[ci];
            for r in 0..self.dim {
                let mut v = comps[ci].mean[r];
                for c in 0..=r {
                    v += l[r * self.dim + c] * z[c];
                }
                x[r] = v as f32;
            }
            out.push(&x, ConditionId(k as u32));
        }
    }
}

/// Lower Cholesky factor of a symmetric PSD matrix; zero pivots give zero columns.
fn cholesky_psd(a: &[f64], n: usize) -> Option<Vec<f64>> {
    const TOL: f64 = 1e-12;
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-9 * (1.0 + a[i * n + j].abs()) {
                return None;
            }
        }
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d < -TOL {
            return None;
        }
        let d = d.max(0.0).sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if d > TOL {
                l[i * n + j] = s / d;
            } else if s.abs() > 1e-9 {
                return None;
            }
        }
    }
    Some(l)
}

/// `samples_per_class` points for every class, labels in class order.
pub fn gen_mixture_dataset(spec: &MixtureSpec, seed: u64) -> Result<LabeledSet, Error> {
    gen_classes(spec, seed, "data.train", spec.samples_per_class, |_| true, Role::Full)
}

fn gen_classes(
    spec: &MixtureSpec,
    seed: u64,
    site: &str,
    per_class: usize,
    keep: impl Fn(usize) -> bool,
    role: Role,
) -> Result<LabeledSet, Error> {
    spec.validate()?;
    let mut out = LabeledSet::new(role, spec.class_count, spec.dim);
    for k in (0..spec.class_count).filter(|&k| keep(k)) {
        let mut r = rng::stream(seed, site, k as u64);
        spec.sample_class(k, per_class, &mut r, &mut out);
    }
    Ok(out)
}

/// Partition of `full` into the unlearning set and the retain set.
pub fn split_unlearn_retain(
    full: &LabeledSet,
    unlearn_class: ConditionId,
) -> Result<(LabeledSet, LabeledSet), Error> {
    if !full.contains_label(unlearn_class) {
        return Err(Error::Config(format!(
            "unlearning class {} does not occur in the dataset",
            unlearn_class.0
        )));
    }
    let du = full.filter_labels(Role::Unlearn, |c| c == unlearn_class);
    let dr = full.filter_labels(Role::Retain, |c| c != unlearn_class);
    Ok((du, dr))
}

/// Replacement set: `count` points drawn uniformly with replacement from the
/// `alternative` class of `retain`, each paired with the unlearning condition.
pub fn build_du_prime(
    retain: &LabeledSet,
    unlearn: &LabeledSet,
    alternative: ConditionId,
    count: usize,
    seed: u64,
) -> Result<LabeledSet, Error> {
    if retain.is_empty() || unlearn.is_empty() {
        return Err(Error::Config("retain and unlearning sets must be nonempty".into()));
    }
    if count == 0 {
        return Err(Error::Config("replacement set size must be at least 1".into()));
    }
    let target = unlearn.label(0);
    if unlearn.labels().iter().any(|&c| c != target) {
        return Err(Error::Integrity("unlearning set mixes several classes".into()));
    }
    if alternative == target {
        return Err(Error::Config("alternative class equals the unlearning class".into()));
    }
    let pool: Vec<usize> = (0..retain.len()).filter(|&i| retain.label(i) == alternative).collect();
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "alternative class {} has no retain points",
            alternative.0
        )));
    }
    let mut r = rng::stream(seed, "data.replacement", 0);
    let mut out = LabeledSet::new(Role::Replacement, retain.class_count, retain.dim);
    for _ in 0..count {
        let i = pool[r.gen_range(0..pool.len())];
        out.push(retain.point(i), target);
    }
    Ok(out)
}

/// Where the attacker's auxiliary data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    /// The leaked retain set.
    Retain,
    /// A fresh draw from the data distribution without the unlearning class.
    Heldout,
    /// Samples generated by a pretrained model for every retain class.
    Synthetic,
}

impl std::str::FromStr for AuxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "retain" => Ok(Self::Retain),
            "heldout" => Ok(Self::Heldout),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Usage(format!(
                "unknown aux mode '{other}' (expected retain, heldout or synthetic)"
            ))),
        }
    }
}

impl AuxMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Retain => "retain",
            Self::Heldout => "heldout",
            Self::Synthetic => "synthetic",
        }
    }
}

/// Fresh test draw over all classes, independent of the training data.
pub fn gen_test_set(spec: &MixtureSpec, per_class: usize, seed: u64) -> Result<LabeledSet, Error> {
    gen_classes(spec, seed, "data.test", per_class, |_| true, Role::Full)
}

/// Draws `per_class` fresh points for every class except `unlearn_class`.
pub fn heldout_excluding(
    spec: &MixtureSpec,
    unlearn_class: ConditionId,
    per_class: usize,
    seed: u64,
) -> Result<LabeledSet, Error> {
    gen_classes(
        spec,
        seed,
        "data.heldout",
        per_class,
        |k| k != unlearn_class.index(),
        Role::Auxiliary,
    )
}

/// Auxiliary-set construction inputs.
pub enum AuxSource<'a> {
    Retain(&'a LabeledSet),
    Heldout {
        spec: &'a MixtureSpec,
        per_class: usize,
        seed: u64,
    },
    /// Already generated per-class samples, `(class, points)`.
    Synthetic {
        class_count: usize,
        dim: usize,
        samples: Option<Vec<(ConditionId, Vec<Vec<f32>>)>>,
    },
}

/// Builds the attacker's dataset; never contains `unlearn_class`.
pub fn build_aux(source: AuxSource<'_>, unlearn_class: ConditionId) -> Result<LabeledSet, Error> {
    let out = match source {
        AuxSource::Retain(dr) => dr.clone().with_role(Role::Auxiliary),
        AuxSource::Heldout {
            spec,
            per_class,
            seed,
        } => heldout_excluding(spec, unlearn_class, per_class, seed)?,
        AuxSource::Synthetic {
            class_count,
            dim,
            samples,
        } => {
            let samples = samples.ok_or_else(|| {
                Error::Usage("synthetic auxiliary data needs a pretrained checkpoint".into())
            })?;
            let mut out = LabeledSet::new(Role::Auxiliary, class_count, dim);
            for (c, pts) in samples {
                if c == unlearn_class {
                    continue;
                }
                for p in pts {
                    out.push(&p, c);
                }
            }
            out
        }
    };
    if out.contains_label(unlearn_class) {
        return Err(Error::Integrity(
            "auxiliary data contains the unlearning class".into(),
        ));
    }
    Ok(out)
}
