//! Linear noise schedule, forward diffusion, and reverse-step coefficients.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::Error;

/// Diffusion timestep, 1-based: `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestep(pub usize);

/// Schedule parameters as they appear in configs and checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // DDPM's 1e-4..0.02 over 1000 steps, rescaled by 1000/T for T = 100.
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, Error> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Immutable per-step coefficients. Arrays are indexed by `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Coefficients of one reverse step: `x_{t-1} = a·(x_t − b·ε̂) + s·z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

impl NoiseSchedule {
    /// Betas linearly interpolated over `t = 1..=T`; `sigma_t = sqrt(beta_t)` except `sigma_1 = 0`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, Error> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta
            .iter()
            .enumerate()
            .map(|(i, b)| if i == 0 { 0.0 } else { b.sqrt() })
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check(&self, t: Timestep) -> Result<usize, Error> {
        if t.0 == 0 || t.0 > self.steps() {
            return Err(Error::Usage(format!(
                "timestep {} outside 1..={}",
                t.0,
                self.steps()
            )));
        }
        Ok(t.0 - 1)
    }

    pub fn alpha_bar_at(&self, t: Timestep) -> Result<f64, Error> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn reverse_coefficients(&self, t: Timestep) -> Result<ReverseCoefficients, Error> {
        let i = self.check(t)?;
        Ok(reverse_coefficients_from(
            self.alpha[i],
            self.alpha_bar[i],
            self.sigma[i],
        ))
    }
}

/// Reverse-step coefficients from raw `alpha_t`, `alpha_bar_t`, `sigma_t`.
pub fn reverse_coefficients_from(alpha: f64, alpha_bar: f64, sigma: f64) -> ReverseCoefficients {
    let b = if alpha == 1.0 {
        0.0
    } else {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    };
    ReverseCoefficients {
        a: 1.0 / alpha.sqrt(),
        b,
        s: sigma,
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`, elementwise.
pub fn forward_diffuse(
    x0: &Tensor,
    t: Timestep,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, Error> {
    if x0.shape() != eps.shape() {
        return Err(Error::Usage(format!(
            "noise shape {:?} differs from data shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = sched.alpha_bar_at(t)?;
    let mut out = x0.clone();
    diffuse_into(out.data_mut(), eps.data(), ab);
    Ok(out)
}

/// In-place forward diffusion of one row given `ᾱ_t`.
pub(crate) fn diffuse_into(x: &mut [f32], eps: &[f32], alpha_bar: f64) {
    let (sa, sn) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    for (xi, &e) in x.iter_mut().zip(eps) {
        *xi = sa * *xi + sn * e;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.01, 0.02).unwrap();
        assert_eq!(s.beta(), &[0.01]);
        assert_eq!(s.alpha_bar(), &[0.99]);
        assert_eq!(s.sigma(), &[0.0]);
    }

    #[test]
    fn four_step_interpolation() {
        let s = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        // hand interpolation: 1e-4 + k·(0.0199/3)
        let expect = [0.0001, 0.006_733_333_333_333_333, 0.013_366_666_666_666_667, 0.02];
        for (b, e) in s.beta().iter().zip(expect) {
            assert_abs_diff_eq!(*b, e, epsilon = 1e-15);
        }
        assert_eq!(s.sigma()[0], 0.0);
        assert_abs_diff_eq!(s.sigma()[3], 0.02f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_arithmetic() {
        let x0 = Tensor::row_vector(vec![1.0, 0.0]);
        let eps = Tensor::row_vector(vec![0.0, 1.0]);
        let mut out = x0.clone();
        diffuse_into(out.data_mut(), eps.data(), 0.25);
        assert_abs_diff_eq!(out.data()[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(out.data()[1], 0.866_025_4, epsilon = 1e-6);
    }

    #[test]
    fn zero_noise_scales_data() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::row_vector(vec![1.5, -2.0]);
        let eps = Tensor::row_vector(vec![0.0, 0.0]);
        let t = Timestep(37);
        let out = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let k = s.alpha_bar_at(t).unwrap().sqrt() as f32;
        assert_eq!(out.data(), &[1.5 * k, -2.0 * k]);
    }

    #[test]
    fn final_step_is_nearly_pure_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::row_vector(vec![1.5, -2.0]);
        let eps = Tensor::row_vector(vec![0.3, 0.7]);
        let out = forward_diffuse(&x0, Timestep(100), &eps, &s).unwrap();
        assert!(s.alpha_bar()[99] < 1e-3);
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert_abs_diff_eq!(*o, *e, epsilon = 0.05);
        }
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = Tensor::row_vector(vec![0.0]);
        assert!(matches!(forward_diffuse(&x, Timestep(0), &x, &s), Err(Error::Usage(_))));
        assert!(matches!(forward_diffuse(&x, Timestep(11), &x, &s), Err(Error::Usage(_))));
    }

    #[test]
    fn reverse_coefficient_cases() {
        let c = reverse_coefficients_from(1.0, 0.7, 0.0);
        assert_eq!((c.a, c.b), (1.0, 0.0));
        let c = reverse_coefficients_from(0.99, 0.5, 0.1);
        // 1/sqrt(0.99), 0.01/sqrt(0.5)
        assert_abs_diff_eq!(c.a, 1.005_037_815_259_212, epsilon = 1e-12);
        assert_abs_diff_eq!(c.b, 0.014_142_135_623_730_95, epsilon = 1e-12);
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert_eq!(s.reverse_coefficients(Timestep(1)).unwrap().s, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn alpha_bar_is_running_product_and_decreasing(
            steps in 1usize..400,
            lo in 1e-5f64..0.05,
            span in 0.0f64..0.5,
        ) {
            let hi = (lo + span).min(0.999);
            let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
            let mut acc = 1.0;
            for (i, a) in s.alpha().iter().enumerate() {
                acc *= a;
                proptest::prop_assert_eq!(acc, s.alpha_bar()[i]);
                if i > 0 {
                    proptest::prop_assert!(s.alpha_bar()[i] < s.alpha_bar()[i - 1]);
                }
            }
            proptest::prop_assert!(s.alpha_bar()[steps - 1] > 0.0 && s.alpha_bar()[0] < 1.0);
            proptest::prop_assert_eq!(s.sigma()[0], 0.0);
        }
    }
}
