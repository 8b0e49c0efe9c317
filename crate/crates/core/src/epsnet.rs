//! Conditional noise predictor and classifier-free guidance.
//!
//! The network is an MLP over `[x_t, time embedding, condition embedding]`.
//! The time embedding is `sin/cos(ω_k·t)` at frequencies spaced geometrically
//! from 1 down to 1/T, followed by one affine layer. The condition table has
//! `C + 1` rows; row `C` is the learned null condition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ConditionId;
use crate::numerics::{rng, ParamStore, Real, SegmentId, Tape, Tensor, Var};
use crate::schedule::Timestep;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    /// Data dimension `d`.
    pub dim: usize,
    /// Number of real classes `C`.
    pub class_count: usize,
    pub width: usize,
    /// Hidden affine+SiLU layers after the input projection.
    pub depth: usize,
    /// Number of sinusoid frequencies; also the width of both embeddings.
    pub time_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            dim: 2,
            class_count: 3,
            width: 128,
            depth: 3,
            time_dim: 32,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<(), Error> {
        if self.dim == 0 || self.width == 0 || self.time_dim == 0 || self.class_count < 2 {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.dim + 2 * self.time_dim
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, c, w, h, e) = (self.dim, self.class_count, self.width, self.depth, self.time_dim);
        let time = 2 * e * e + e;
        let cond = (c + 1) * e;
        let input = self.input_width() * w + w;
        let hidden = h * (w * w + w);
        let out = w * d + d;
        time + cond + input + hidden + out
    }
}

/// Guidance scale and seed for ancestral sampling.
///
/// The default scale is 1, plain conditional sampling. On the desk mixture the
/// conditional model already separates classes, and scales above 1 lean on the
/// ∅ branch, which unlearning never trains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Segment handles of one network inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetLayout {
    pub arch: Arch,
    /// Diffusion horizon `T` used for the time frequencies.
    pub horizon: usize,
    time_w: SegmentId,
    time_b: SegmentId,
    cond: SegmentId,
    in_w: SegmentId,
    in_b: SegmentId,
    hidden: Vec<(SegmentId, SegmentId)>,
    out_w: SegmentId,
    out_b: SegmentId,
}

pub const COND_TABLE: &str = "cond.table";

fn segment_shapes(arch: &Arch) -> Vec<(String, Vec<usize>, usize)> {
    // (name, shape, fan_in)
    let e = arch.time_dim;
    let w = arch.width;
    let mut v = vec![
        ("time.w".to_string(), vec![2 * e, e], 2 * e),
        ("time.b".to_string(), vec![1, e], 2 * e),
        (COND_TABLE.to_string(), vec![arch.class_count + 1, e], 0),
        ("in.w".to_string(), vec![arch.input_width(), w], arch.input_width()),
        ("in.b".to_string(), vec![1, w], arch.input_width()),
    ];
    for i in 0..arch.depth {
        v.push((format!("hidden{i}.w"), vec![w, w], w));
        v.push((format!("hidden{i}.b"), vec![1, w], w));
    }
    v.push(("out.w".to_string(), vec![w, arch.dim], w));
    v.push(("out.b".to_string(), vec![1, arch.dim], w));
    v
}

impl NetLayout {
    /// Resolves segment handles by name.
    pub fn bind<R: Real>(arch: Arch, horizon: usize, params: &ParamStore<R>) -> Result<Self, Error> {
        arch.validate()?;
        let shapes = segment_shapes(&arch);
        let mut ids = Vec::with_capacity(shapes.len());
        for (name, shape, _) in &shapes {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter segment '{name}'")))?;
            if params.value(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "segment '{name}' has shape {:?}, architecture needs {shape:?}",
                    params.value(id).shape()
                )));
            }
            ids.push(id);
        }
        let hidden = (0..arch.depth).map(|i| (ids[5 + 2 * i], ids[6 + 2 * i])).collect();
        let n = ids.len();
        Ok(Self {
            arch,
            horizon,
            time_w: ids[0],
            time_b: ids[1],
            cond: ids[2],
            in_w: ids[3],
            in_b: ids[4],
            hidden,
            out_w: ids[n - 2],
            out_b: ids[n - 1],
        })
    }

    pub fn cond_table(&self) -> SegmentId {
        self.cond
    }

    /// Time-embedding frequencies `ω_k`, geometric from 1 to 1/T.
    pub fn frequencies(&self) -> Vec<f64> {
        let k = self.arch.time_dim;
        if k == 1 {
            return vec![1.0];
        }
        let span = (self.horizon.max(1) as f64).ln();
        (0..k).map(|i| (-span * i as f64 / (k - 1) as f64).exp()).collect()
    }

    /// Builds `ε_θ(x_t, t, c)` on `tape`; `x: [B, d]`, one `t` and `c` per row.
    pub fn forward<R: Real>(
        &self,
        params: &ParamStore<R>,
        tape: &mut Tape<R>,
        x: Var,
        t: &[Timestep],
        c: &[ConditionId],
    ) -> Result<Var, Error> {
        let arch = &self.arch;
        let (rows, cols) = tape.value(x).as_matrix_dims();
        if cols != arch.dim || t.len() != rows || c.len() != rows {
            return Err(Error::Usage(format!(
                "batch of {rows}x{cols} with {} timesteps and {} conditions for dimension {}",
                t.len(),
                c.len(),
                arch.dim
            )));
        }
        if let Some(bad) = c.iter().find(|c| c.index() > arch.class_count) {
            return Err(Error::Usage(format!(
                "condition id {} outside 0..={} (null = {})",
                bad.0, arch.class_count, arch.class_count
            )));
        }
        if let Some(bad) = t.iter().find(|t| t.0 == 0 || t.0 > self.horizon) {
            return Err(Error::Usage(format!("timestep {} outside 1..={}", bad.0, self.horizon)));
        }

        let freqs = self.frequencies();
        let mut phase = Vec::with_capacity(rows * freqs.len());
        for ti in t {
            phase.extend(freqs.iter().map(|w| R::lit(w * ti.0 as f64)));
        }
        let phase = tape.input(Tensor::matrix(rows, freqs.len(), phase)?)?;
        let s = tape.sin(phase)?;
        let co = tape.cos(phase)?;
        let feats = tape.concat(&[s, co])?;
        let tw = tape.param(params, self.time_w)?;
        let tb = tape.param(params, self.time_b)?;
        let temb = tape.affine(feats, tw, tb)?;

        let table = tape.param(params, self.cond)?;
        let ids: Vec<usize> = c.iter().map(|c| c.index()).collect();
        let cemb = tape.embedding(table, &ids)?;

        let h = tape.concat(&[x, temb, cemb])?;
        let w = tape.param(params, self.in_w)?;
        let b = tape.param(params, self.in_b)?;
        let mut h = tape.affine(h, w, b)?;
        h = tape.silu(h)?;
        for &(wi, bi) in &self.hidden {
            let w = tape.param(params, wi)?;
            let b = tape.param(params, bi)?;
            h = tape.affine(h, w, b)?;
            h = tape.silu(h)?;
        }
        let w = tape.param(params, self.out_w)?;
        let b = tape.param(params, self.out_b)?;
        Ok(tape.affine(h, w, b)?)
    }
}

/// Anything that can put a noise prediction on a tape.
pub trait NoisePredictor<R: Real = f32> {
    fn predict(
        &self,
        tape: &mut Tape<R>,
        x_t: Var,
        t: &[Timestep],
        c: &[ConditionId],
    ) -> Result<Var, Error>;
}

/// A layout paired with concrete parameter values.
#[derive(Clone, Copy)]
pub struct Bound<'a, R: Real> {
    pub layout: &'a NetLayout,
    pub params: &'a ParamStore<R>,
}

impl<R: Real> NoisePredictor<R> for Bound<'_, R> {
    fn predict(
        &self,
        tape: &mut Tape<R>,
        x_t: Var,
        t: &[Timestep],
        c: &[ConditionId],
    ) -> Result<Var, Error> {
        self.layout.forward(self.params, tape, x_t, t, c)
    }
}

/// The trainable `ε_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet {
    pub layout: NetLayout,
    pub params: ParamStore,
}

impl EpsilonNet {
    /// Scaled-uniform initialization: `U(±1/sqrt(fan_in))` for affine layers,
    /// `U(±1)` for the condition table.
    pub fn init(arch: Arch, horizon: usize, seed: u64) -> Result<Self, Error> {
        arch.validate()?;
        if horizon == 0 {
            return Err(Error::Config("time horizon must be positive".into()));
        }
        let mut params = ParamStore::new();
        for (i, (name, shape, fan_in)) in segment_shapes(&arch).into_iter().enumerate() {
            let bound = if fan_in == 0 { 1.0 } else { 1.0 / (fan_in as f32).sqrt() };
            let mut r = rng::stream(seed, "init.epsnet", i as u64);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
            params.add(&name, Tensor::new(shape, data)?)?;
        }
        let layout = NetLayout::bind(arch, horizon, &params)?;
        Ok(Self { layout, params })
    }

    pub fn from_params(arch: Arch, horizon: usize, params: ParamStore) -> Result<Self, Error> {
        let layout = NetLayout::bind(arch, horizon, &params)?;
        Ok(Self { layout, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.layout.arch
    }

    pub fn bound(&self) -> Bound<'_, f32> {
        Bound {
            layout: &self.layout,
            params: &self.params,
        }
    }

    /// `ε_θ(x_t, t, c)` for a row-major batch `x: [B·d]`.
    pub fn predict_eps(&self, x: &[f32], t: &[Timestep], c: &[ConditionId]) -> Result<Vec<f32>, Error> {
        eval_eps(self, self.arch().dim, x, t, c)
    }

    /// Classifier-free guided noise estimate for every row at timestep `t`.
    pub fn cfg_predict(
        &self,
        x: &[f32],
        t: Timestep,
        c: &[ConditionId],
        cfg_scale: f64,
    ) -> Result<Vec<f32>, Error> {
        let arch = self.arch();
        guided_eps(self, arch.dim, arch.class_count, x, t, c, cfg_scale)
    }
}

/// Runs any predictor forward on a flat batch and returns its output rows.
pub fn eval_eps<P: NoisePredictor<f32> + ?Sized>(
    pred: &P,
    dim: usize,
    x: &[f32],
    t: &[Timestep],
    c: &[ConditionId],
) -> Result<Vec<f32>, Error> {
    if dim == 0 || x.is_empty() || x.len() % dim != 0 {
        return Err(Error::Usage(format!("{} values is not a batch of {dim}-vectors", x.len())));
    }
    let mut tape = Tape::new();
    let xv = tape.input(Tensor::matrix(x.len() / dim, dim, x.to_vec())?)?;
    let out = pred.predict(&mut tape, xv, t, c)?;
    Ok(tape.value(out).data().to_vec())
}

/// `ε(∅) + β·(ε(c) − ε(∅))` per row.
///
/// Evaluated as `ε(c) + (β − 1)·(ε(c) − ε(∅))`, the same affine function of
/// β but exact at β = 1. Rows conditioned on ∅ return ε(∅) untouched.
pub fn guided_eps<P: NoisePredictor<f32> + ?Sized>(
    pred: &P,
    dim: usize,
    class_count: usize,
    x: &[f32],
    t: Timestep,
    c: &[ConditionId],
    cfg_scale: f64,
) -> Result<Vec<f32>, Error> {
    if cfg_scale < 0.0 || !cfg_scale.is_finite() {
        return Err(Error::Config(format!("cfg scale must be >= 0, got {cfg_scale}")));
    }
    let d = dim;
    let rows = c.len();
    if x.len() != rows * d {
        return Err(Error::Usage(format!(
            "{} values for {rows} conditions of dimension {d}",
            x.len()
        )));
    }
    if cfg_scale == 1.0 {
        // ε(c) + 0·(…) is ε(c); skipping the ∅ pass also avoids 0·∞.
        return eval_eps(pred, d, x, &vec![t; rows], c);
    }
    let null = ConditionId::null(class_count);
    let cond_rows: Vec<usize> = (0..rows).filter(|&i| c[i] != null).collect();
    // One batch: all rows under ∅, then the conditioned rows under their labels.
    let mut xb = Vec::with_capacity((rows + cond_rows.len()) * d);
    xb.extend_from_slice(x);
    for &i in &cond_rows {
        xb.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    let mut cb = vec![null; rows];
    cb.extend(cond_rows.iter().map(|&i| c[i]));
    let tb = vec![t; cb.len()];
    let pred = eval_eps(pred, d, &xb, &tb, &cb)?;
    let (uncond, cond) = pred.split_at(rows * d);
    let mut out = uncond.to_vec();
    let k = (cfg_scale - 1.0) as f32;
    for (j, &i) in cond_rows.iter().enumerate() {
        let ec = &cond[j * d..(j + 1) * d];
        for (q, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            let en = *o;
            *o = ec[q] + k * (ec[q] - en);
        }
    }
    Ok(out)
}

impl NoisePredictor<f32> for EpsilonNet {
    fn predict(
        &self,
        tape: &mut Tape<f32>,
        x_t: Var,
        t: &[Timestep],
        c: &[ConditionId],
    ) -> Result<Var, Error> {
        self.layout.forward(&self.params, tape, x_t, t, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn tiny() -> Arch {
        Arch {
            dim: 2,
            class_count: 3,
            width: 8,
            depth: 2,
            time_dim: 4,
        }
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let a = EpsilonNet::init(Arch::default(), 100, 3).unwrap();
        let b = EpsilonNet::init(Arch::default(), 100, 3).unwrap();
        let c = EpsilonNet::init(Arch::default(), 100, 4).unwrap();
        assert!(a.params.values_bit_equal(&b.params));
        assert!(!a.params.values_bit_equal(&c.params));
        assert_eq!(a.params.parameter_count(), Arch::default().parameter_count());
        assert_eq!(a.params.value(a.layout.cond_table()).shape(), &[4, 32]);
    }

    #[test]
    fn fresh_net_output_is_finite_and_pure() {
        let net = EpsilonNet::init(Arch::default(), 100, 1).unwrap();
        let x = [0.3, -1.2, 2.0, 0.1];
        let t = [Timestep(1), Timestep(100)];
        let c = [ConditionId(0), ConditionId(3)];
        let a = net.predict_eps(&x, &t, &c).unwrap();
        let b = net.predict_eps(&x, &t, &c).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn condition_out_of_range_is_usage_error() {
        let net = EpsilonNet::init(tiny(), 10, 1).unwrap();
        let r = net.predict_eps(&[0.0, 0.0], &[Timestep(1)], &[ConditionId(4)]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn null_condition_uses_null_row() {
        let mut net = EpsilonNet::init(tiny(), 10, 1).unwrap();
        let x = [0.5, 0.5];
        let before = net.predict_eps(&x, &[Timestep(3)], &[ConditionId(3)]).unwrap();
        let table = net.layout.cond_table();
        // perturb a non-null row: null prediction unchanged
        net.params.segment_mut(table).value.data_mut()[0] += 1.0;
        assert_eq!(net.predict_eps(&x, &[Timestep(3)], &[ConditionId(3)]).unwrap(), before);
        // perturb the null row: prediction changes
        net.params.segment_mut(table).value.data_mut()[3 * 4] += 1.0;
        assert_ne!(net.predict_eps(&x, &[Timestep(3)], &[ConditionId(3)]).unwrap(), before);
    }

    #[test]
    fn cfg_identities() {
        let net = EpsilonNet::init(Arch::default(), 100, 9).unwrap();
        let x = [0.3, -0.4, 1.0, 1.0, -2.0, 0.5];
        let c = [ConditionId(0), ConditionId(2), ConditionId(3)];
        let t = Timestep(40);
        let plain = net.predict_eps(&x, &[t; 3], &c).unwrap();
        assert_eq!(net.cfg_predict(&x, t, &c, 1.0).unwrap(), plain);
        let null = [ConditionId(3); 3];
        let uncond = net.predict_eps(&x, &[t; 3], &null).unwrap();
        for beta in [0.0, 0.5, 2.0, 7.5] {
            assert_eq!(net.cfg_predict(&x, t, &null, beta).unwrap(), uncond);
        }
        assert!(net.cfg_predict(&x, t, &c, -1.0).is_err());
    }

    struct TwoLevel;

    impl NoisePredictor<f32> for TwoLevel {
        fn predict(&self, tape: &mut Tape<f32>, _x: Var, t: &[Timestep], c: &[ConditionId]) -> Result<Var, Error> {
            let data = c.iter().flat_map(|c| if c.0 == 3 { [0.0, 0.0] } else { [1.0, 1.0] }).collect();
            Ok(tape.input(Tensor::matrix(t.len(), 2, data)?)?)
        }
    }

    #[test]
    fn cfg_arithmetic_on_stub() {
        let out = guided_eps(&TwoLevel, 2, 3, &[0.0, 0.0], Timestep(1), &[ConditionId(1)], 2.0).unwrap();
        assert_eq!(out, vec![2.0, 2.0]);
    }

    #[test]
    fn cfg_is_affine_in_scale() {
        let net = EpsilonNet::init(Arch::default(), 100, 2).unwrap();
        let x = [0.7, -0.1];
        let c = [ConditionId(1)];
        let p = |b: f64| net.cfg_predict(&x, Timestep(12), &c, b).unwrap();
        let (a, b, m) = (p(0.0), p(4.0), p(2.0));
        for i in 0..2 {
            approx::assert_abs_diff_eq!(m[i], 0.5 * (a[i] + b[i]), epsilon = 1e-5);
        }
    }

    #[test]
    fn mse_gradient_passes_finite_differences() {
        let net = EpsilonNet::init(tiny(), 10, 5).unwrap();
        let params = net.params.cast::<f64>();
        let layout = net.layout.clone();
        let x = Tensor::matrix(3, 2, vec![0.2, -0.5, 1.1, 0.3, -0.8, 0.9]).unwrap();
        let eps = Tensor::matrix(3, 2, vec![0.5, 1.0, -0.3, 0.2, 0.1, -1.4]).unwrap();
        let t = [Timestep(1), Timestep(5), Timestep(10)];
        let c = [ConditionId(0), ConditionId(3), ConditionId(2)];
        let report = finite_diff_check(
            &params,
            |tape, live| {
                let xv = tape.input(x.clone())?;
                let ev = tape.input(eps.clone())?;
                let out = layout
                    .forward(live, tape, xv, &t, &c)
                    .map_err(|e| crate::NumericsError::Config(e.to_string()))?;
                tape.mse(ev, out)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
