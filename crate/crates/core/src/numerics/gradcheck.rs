use super::{NumericsError, ParamStore, Tape, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
const MAX_PARAMS: usize = 10_000;
/// Denominator floor. Central differences carry roughly 1e-11 of absolute
/// error at this step, so gradients far below the floor are judged on
/// absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(segment name, max relative error)` in segment order.
    pub per_segment: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares tape gradients of a scalar graph with central differences.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    graph: F,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>,
{
    finite_diff_check_frozen(params, |tape, live, _| graph(tape, live), tolerance)
}

/// Like [`finite_diff_check`], but the graph also receives the unperturbed
/// parameters. Branches built from the frozen copy behind a `detach` stay
/// constant under perturbation, matching the stop-gradient semantics.
pub fn finite_diff_check_frozen<F>(
    params: &ParamStore<f64>,
    graph: F,
    tolerance: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>,
{
    let count = params.parameter_count();
    if count > MAX_PARAMS {
        return Err(NumericsError::Config(format!(
            "{count} parameters is too many to perturb exhaustively (max {MAX_PARAMS})"
        )));
    }
    let frozen = params.clone();
    let mut live = params.clone();
    live.zero_grads();
    let mut tape = Tape::new();
    let root = graph(&mut tape, &live, &frozen)?;
    tape.backward(root, &mut live)?;
    let analytic = live.clone();

    let eval = |p: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let r = graph(&mut t, p, &frozen)?;
        Ok(t.value(r).item())
    };

    let mut per_segment = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    for (id, seg) in params.iter() {
        let mut seg_max: f64 = 0.0;
        for j in 0..seg.value.len() {
            let orig = seg.value.data()[j];
            live.segment_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = eval(&live)?;
            live.segment_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = eval(&live)?;
            live.segment_mut(id).value.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = analytic.grad(id).data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
            seg_max = seg_max.max(rel);
        }
        max_rel_err = max_rel_err.max(seg_max);
        per_segment.push((seg.name.clone(), seg_max));
    }
    Ok(GradCheckReport {
        per_segment,
        max_rel_err,
        tolerance,
    })
}
