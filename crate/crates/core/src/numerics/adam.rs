use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps_stab > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-segment first/second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .segments()
                .iter()
                .map(|s| Tensor::zeros(s.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update in place. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &OptimConfig) -> Result<(), NumericsError> {
        if self.m.len() != params.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} segments, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        // lr·m̂/(√v̂+ε) = (lr/bc1)·m / (√v/√bc2 + ε)
        let step_size = (cfg.lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = cfg.eps_stab as f32;

        for (i, seg) in params.segments_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != seg.value.shape() {
                return Err(NumericsError::Shape(format!(
                    "moment shape {:?} differs from segment '{}' {:?}",
                    m.shape(),
                    seg.name,
                    seg.value.shape()
                )));
            }
            let grads = seg.grad.data();
            for (((p, &g), mi), vi) in seg
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = ParamStore::new();
        let id = p.add("theta", Tensor::scalar(1.0)).unwrap();
        p.segment_mut(id).grad.data_mut()[0] = 0.5;
        let cfg = OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut st = AdamState::new(&p);
        st.step(&mut p, &cfg).unwrap();
        // m̂ = g, v̂ = g², so Δθ = -lr·g/(|g|+ε) ≈ -0.1
        approx::assert_abs_diff_eq!(p.value(id).item(), 0.9, epsilon = 1e-6);
        assert_eq!(st.step_count, 1);
        assert_eq!(p.grad(id).item(), 0.5);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = p.value(id).clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            st.step(&mut p, &OptimConfig::default()).unwrap();
        }
        assert_eq!(p.value(id), &before);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
