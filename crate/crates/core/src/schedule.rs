//! Noise schedules and the deterministic DDIM-style reverse update.
//!
//! Schedule arithmetic is carried out in `f64` and only rounded to `f32` when
//! the result is written into a tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// β linearly spaced in square-root space, as used by latent diffusion models.
    ScaledLinear,
    /// Squared-cosine ᾱ with offset 0.008 and β capped at 0.999.
    Cosine,
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::ScaledLinear,
            t_max: 1000,
            n_steps: 30,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_betas(
            self.kind,
            self.t_max,
            self.n_steps,
            self.beta_start,
            self.beta_end,
        )
    }
}

/// Cumulative signal levels `ᾱ_0..=ᾱ_T` plus the sampling timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
    steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule with the default β range.
    pub fn new(kind: ScheduleKind, t_max: usize, n_steps: usize) -> Result<Self> {
        let d = ScheduleConfig::default();
        Self::with_betas(kind, t_max, n_steps, d.beta_start, d.beta_end)
    }

    pub fn with_betas(
        kind: ScheduleKind,
        t_max: usize,
        n_steps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("T must be positive"));
        }
        if n_steps == 0 || n_steps > t_max {
            return Err(Error::invalid(format!(
                "n_steps must lie in [1, T={t_max}], got {n_steps}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::ScaledLinear => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::invalid("need 0 < beta_start <= beta_end < 1"));
                }
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (0..t_max)
                    .map(|i| {
                        let f = if t_max == 1 {
                            0.0
                        } else {
                            i as f64 / (t_max - 1) as f64
                        };
                        (a + f * (b - a)).powi(2)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + 0.008) / 1.008;
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for beta in betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - beta));
        }
        let steps = (0..n_steps)
            .map(|i| (t_max as f64 * (n_steps - i) as f64 / n_steps as f64).round() as usize)
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                kind,
                t_max,
                n_steps,
                beta_start,
                beta_end,
            },
            alpha_bar,
            steps,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    /// Sampling timesteps, strictly decreasing, first entry `T`.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`; panics if `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::invalid(format!(
                "timestep {t} exceeds T={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Timestep that follows `steps()[index]` (0 after the last step).
    pub fn prev_timestep(&self, index: usize) -> usize {
        self.steps.get(index + 1).copied().unwrap_or(0)
    }

    /// Index of the sampling step closest to `eta·T`; ties go to the larger timestep.
    pub fn start_index_for_strength(&self, eta: f64) -> Result<usize> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::invalid(format!(
                "strength must lie in (0, 1], got {eta}"
            )));
        }
        let target = eta * self.t_max() as f64;
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        // steps are decreasing, so the first minimum found is the larger timestep
        for (i, &t) in self.steps.iter().enumerate() {
            let d = (t as f64 - target).abs();
            if d < best_dist - 1e-9 {
                best = i;
                best_dist = d;
            }
        }
        Ok(best)
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
    }

    /// Clean-sample estimate `(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn predict_x0(&self, z: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        if ab <= 0.0 {
            return Err(Error::Numerical(format!("alpha_bar[{t}] is zero")));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z.zip_map(eps_hat, |z, e| ((z as f64 - b * e as f64) / a) as f32)
    }

    /// Deterministic step from `t` to `t_prev`:
    /// `√ᾱ_prev·x̂0 + √(1−ᾱ_prev)·ε̂`.
    pub fn ddim_update(
        &self,
        z: &Tensor,
        t: usize,
        t_prev: usize,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        if t_prev >= t {
            return Err(Error::invalid(format!(
                "reverse step needs t > t_prev, got t={t}, t_prev={t_prev}"
            )));
        }
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        if ab <= 0.0 {
            return Err(Error::Numerical(format!("alpha_bar[{t}] is zero")));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (ap, bp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z.zip_map(eps_hat, |z, e| {
            let (z, e) = (z as f64, e as f64);
            (ap * ((z - b * e) / a) + bp * e) as f32
        })
    }

    /// The update at `t = 0`, which targets the virtual level `ᾱ_{−1} = 1`.
    /// With `ᾱ_0 = 1` as well it leaves `z` unchanged whatever `ε̂` is.
    pub fn terminal_update(&self, z: &Tensor) -> Tensor {
        debug_assert_eq!(self.alpha_bar(0), 1.0);
        z.clone()
    }
}
