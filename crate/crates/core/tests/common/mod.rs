//! Randomly assembled scalar graphs for gradient checks.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use unlearn_core::numerics::{finite_diff_check_frozen, rng, NumericsError, ParamStore, Tape, Tensor, Var};

const ROWS: usize = 5;
pub const IN: usize = 3;
pub const HID: usize = 4;

pub fn randn(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Silu,
    Sin,
    Cos,
    Scale(f64),
    MulSelf,
    AddDetached,
    MulDetached,
    SubInput,
}

pub struct Graph {
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub ops: Vec<Op>,
    pub xent: bool,
}

pub fn random_graph(seed: u64) -> (ParamStore<f64>, Graph) {
    let mut r = rng::stream(seed, "gradcheck", 0);
    let mut p = ParamStore::new();
    p.add("w1", randn(&mut r, &[IN, HID], 0.6)).unwrap();
    p.add("b1", randn(&mut r, &[1, HID], 0.3)).unwrap();
    p.add("table", randn(&mut r, &[3, HID], 0.5)).unwrap();
    p.add("w2", randn(&mut r, &[HID, 2], 0.6)).unwrap();
    p.add("b2", randn(&mut r, &[1, 2], 0.3)).unwrap();
    let n_ops = r.gen_range(2..=6);
    // one squaring at most; stacked powers leave the regime where central
    // differences are accurate to 1e-4
    let mut squared = false;
    let ops = (0..n_ops)
        .map(|_| match r.gen_range(0..8) {
            4 if squared => Op::Sin,
            0 => Op::Silu,
            1 => Op::Sin,
            2 => Op::Cos,
            3 => Op::Scale(r.gen_range(-1.5..1.5)),
            4 => {
                squared = true;
                Op::MulSelf
            }
            5 => Op::AddDetached,
            6 => Op::MulDetached,
            _ => Op::SubInput,
        })
        .collect();
    let g = Graph {
        x: randn(&mut r, &[ROWS, IN], 1.0),
        target: randn(&mut r, &[ROWS, 2], 1.0),
        ids: (0..ROWS).map(|_| r.gen_range(0..3)).collect(),
        labels: (0..ROWS).map(|_| r.gen_range(0..2)).collect(),
        ops,
        xent: r.gen_bool(0.5),
    };
    (p, g)
}

fn build(g: &Graph, t: &mut Tape<f64>, live: &ParamStore<f64>, frozen: &ParamStore<f64>) -> Result<Var, NumericsError> {
    let param = |t: &mut Tape<f64>, s: &ParamStore<f64>, name: &str| t.param(s, s.id(name).unwrap());
    let x = t.input(g.x.clone())?;
    let w1 = param(t, live, "w1")?;
    let b1 = param(t, live, "b1")?;
    let table = param(t, live, "table")?;
    let lin = t.affine(x, w1, b1)?;
    let emb = t.embedding(table, &g.ids)?;
    let mut h = t.add(lin, emb)?;
    // a stop-gradient branch computed from the unperturbed weights
    let fw = param(t, frozen, "w1")?;
    let fb = param(t, frozen, "b1")?;
    let flin = t.affine(x, fw, fb)?;
    let frozen_branch = t.detach(flin)?;
    let shift = t.input(randn(&mut rng::stream(1, "shift", 0), &[ROWS, HID], 0.5))?;
    for op in &g.ops {
        h = match *op {
            Op::Silu => t.silu(h)?,
            Op::Sin => t.sin(h)?,
            Op::Cos => t.cos(h)?,
            Op::Scale(c) => t.scale(h, c)?,
            Op::MulSelf => t.mul(h, h)?,
            Op::AddDetached => t.add(h, frozen_branch)?,
            Op::MulDetached => {
                let s = t.sin(frozen_branch)?;
                t.mul(h, s)?
            }
            Op::SubInput => t.sub(h, shift)?,
        };
    }
    let w2 = param(t, live, "w2")?;
    let b2 = param(t, live, "b2")?;
    let out = t.affine(h, w2, b2)?;
    if g.xent {
        t.softmax_xent(out, &g.labels)
    } else {
        let y = t.input(g.target.clone())?;
        t.mse(out, y)
    }
}

/// Runs the finite-difference check over graphs `0..count`.
/// Returns the worst relative error and how many graphs used a detached branch.
pub fn check_graphs(count: u64, tolerance: f64) -> Result<(f64, usize), String> {
    let mut worst: f64 = 0.0;
    let mut detached = 0;
    for seed in 0..count {
        let (p, g) = random_graph(seed);
        if g.ops.iter().any(|o| matches!(o, Op::AddDetached | Op::MulDetached)) {
            detached += 1;
        }
        let report = finite_diff_check_frozen(&p, |t, live, frozen| build(&g, t, live, frozen), tolerance)
            .map_err(|e| format!("graph {seed}: {e}"))?;
        if !report.passed() {
            return Err(format!("graph {seed} {:?}: {:?}", g.ops, report.per_segment));
        }
        worst = worst.max(report.max_rel_err);
    }
    Ok((worst, detached))
}
