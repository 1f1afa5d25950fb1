//! Analytic denoisers. Each returns the exact noise that would take the
//! current latent back to a known clean target, so sampler output is
//! predictable in closed form.

use std::collections::BTreeMap;

use ndarray::ArrayView1;

use super::lora::{LoraStack, Matrix};
use super::{Denoiser, DenoiserCall};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian_like, SeededRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `(z − √ᾱ_t·x0)/√(1−ᾱ_t)`, and zero at `t = 0`.
fn oracle_eps(sched: &NoiseSchedule, z: &Tensor, t: usize, x0: &Tensor) -> Result<Tensor> {
    x0.ensure_shape(z.shape())?;
    if t > sched.t_max() {
        return Err(Error::OutOfRange(format!(
            "timestep {t} beyond T={}",
            sched.t_max()
        )));
    }
    if t == 0 {
        return Ok(Tensor::zeros(z.shape()));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    z.zip_map(x0, |z, x| ((z as f64 - sa * x as f64) / sb) as f32)
}

/// Always steers the sample toward one fixed target.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: Tensor,
    sched: NoiseSchedule,
}

pub fn oracle_denoiser(target: Tensor, sched: &NoiseSchedule) -> OracleDenoiser {
    OracleDenoiser {
        target,
        sched: sched.clone(),
    }
}

impl OracleDenoiser {
    pub fn target(&self) -> &Tensor {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        oracle_eps(&self.sched, call.z, call.t, &self.target)
    }
}

/// Oracle whose target brightens or darkens with the requested exposure: the
/// linear radiance `target^γ` is scaled by `2^ev` and re-encoded, giving
/// `2^{ev/γ}·target`.
#[derive(Debug, Clone)]
pub struct ExposureOracle {
    target: Tensor,
    gamma: f64,
    sched: NoiseSchedule,
}

impl ExposureOracle {
    pub fn new(target: Tensor, gamma: f64, sched: &NoiseSchedule) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        Ok(Self {
            target,
            gamma,
            sched: sched.clone(),
        })
    }

    pub fn target_at(&self, ev: f64) -> Tensor {
        let k = (ev / self.gamma).exp2() as f32;
        self.target.scale(k)
    }
}

impl Denoiser for ExposureOracle {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        oracle_eps(&self.sched, call.z, call.t, &self.target_at(call.cond.ev))
    }
}

/// Oracle toward `base + σ·G(seed)`, with `G` a unit Gaussian image fixed by
/// the call's run seed. Different seeds land on different "balls" scattered
/// around `base`.
#[derive(Debug, Clone)]
pub struct SeededLobeDenoiser {
    base: Tensor,
    sigma: f32,
    sched: NoiseSchedule,
}

/// Stream label separating lobe offsets from the sampler's own noise draws.
const LOBE_STREAM: u64 = 0x6c6f_6265;

pub fn seeded_lobe_denoiser(
    base: Tensor,
    sigma: f32,
    sched: &NoiseSchedule,
) -> Result<SeededLobeDenoiser> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "lobe sigma must be a finite non-negative number, got {sigma}"
        )));
    }
    Ok(SeededLobeDenoiser {
        base,
        sigma,
        sched: sched.clone(),
    })
}

impl SeededLobeDenoiser {
    pub fn target_for_seed(&self, run_seed: u64) -> Result<Tensor> {
        if self.sigma == 0.0 {
            return Ok(self.base.clone());
        }
        let mut rng = SeededRng::new(derive_seed(run_seed, &[LOBE_STREAM]));
        let g = gaussian_like(self.base.shape(), &mut rng)?;
        let sigma = self.sigma;
        self.base.zip_map(&g, |b, g| b + sigma * g)
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }
}

impl Denoiser for SeededLobeDenoiser {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        oracle_eps(
            &self.sched,
            call.z,
            call.t,
            &self.target_for_seed(call.run_seed)?,
        )
    }
}

/// `ε̂ = W_t · vec(z)` with `W_t` the stack's composed weight at `t`.
#[derive(Debug, Clone)]
pub struct LinearLoraDenoiser {
    stack: LoraStack,
    composed: BTreeMap<String, Matrix>,
}

impl LinearLoraDenoiser {
    pub fn new(stack: LoraStack) -> Result<Self> {
        let (m, n) = stack.w_base().dim();
        if m != n {
            return Err(Error::invalid(format!(
                "linear denoiser needs a square weight, got {m}x{n}"
            )));
        }
        let composed = stack
            .deltas()
            .map(|d| Ok((d.name.clone(), stack.compose_named(&d.name)?)))
            .collect::<Result<_>>()?;
        Ok(Self { stack, composed })
    }

    pub fn stack(&self) -> &LoraStack {
        &self.stack
    }

    /// Weight matrix used at timestep `t`.
    pub fn weight_at(&self, t: usize) -> Result<&Matrix> {
        let name = self.stack.schedule().active_at(t)?;
        Ok(&self.composed[name])
    }
}

impl Denoiser for LinearLoraDenoiser {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        let w = self.weight_at(call.t)?;
        if w.ncols() != call.z.len() {
            return Err(Error::invalid(format!(
                "weight is {}x{} but latent has {} elements",
                w.nrows(),
                w.ncols(),
                call.z.len()
            )));
        }
        let out = w.dot(&ArrayView1::from(call.z.data()));
        Tensor::new(call.z.shape(), out.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::super::lora::{LoraDelta, SwapSchedule, EXPOSURE_LORA, TURBO_LORA};
    use super::super::{ActiveLora, Conditioning};
    use super::*;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::ScaledLinear, 1000, 30).unwrap()
    }

    fn call<'a>(
        z: &'a Tensor,
        t: usize,
        cond: &'a Conditioning,
        seed: u64,
        lora: &'a ActiveLora,
    ) -> DenoiserCall<'a> {
        DenoiserCall {
            z,
            t,
            cond,
            run_seed: seed,
            lora,
        }
    }

    fn rand_tensor(shape: [usize; 3], seed: u64) -> Tensor {
        gaussian_like(shape, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn oracle_prediction_recovers_target() {
        let s = sched();
        let target = rand_tensor([3, 4, 4], 1).clamp(-1.0, 1.0);
        let d = oracle_denoiser(target.clone(), &s);
        let cond = Conditioning::default();
        let lora = ActiveLora {
            name: EXPOSURE_LORA.into(),
            scale: 0.75,
        };
        for (i, t) in [1usize, 33, 500, 999, 1000].into_iter().enumerate() {
            let z = rand_tensor([3, 4, 4], 10 + i as u64);
            let eps = d.predict_noise(&call(&z, t, &cond, 0, &lora)).unwrap();
            let x0 = s.predict_x0(&z, t, &eps).unwrap();
            assert!(x0.max_abs_diff(&target).unwrap() <= 1e-5, "t={t}");
        }
        let z = rand_tensor([3, 4, 4], 99);
        let eps = d.predict_noise(&call(&z, 0, &cond, 0, &lora)).unwrap();
        assert_eq!(eps, Tensor::zeros([3, 4, 4]));
    }

    #[test]
    fn lobe_with_zero_sigma_is_the_oracle() {
        let s = sched();
        let base = rand_tensor([1, 3, 3], 4);
        let lobe = seeded_lobe_denoiser(base.clone(), 0.0, &s).unwrap();
        let oracle = oracle_denoiser(base, &s);
        let z = rand_tensor([1, 3, 3], 5);
        let cond = Conditioning::default();
        let lora = ActiveLora {
            name: EXPOSURE_LORA.into(),
            scale: 0.75,
        };
        for seed in [0, 1, 77] {
            assert_eq!(
                lobe.predict_noise(&call(&z, 400, &cond, seed, &lora))
                    .unwrap(),
                oracle
                    .predict_noise(&call(&z, 400, &cond, seed, &lora))
                    .unwrap()
            );
        }
        assert!(seeded_lobe_denoiser(Tensor::zeros([1, 1, 1]), -0.1, &s).is_err());
    }

    #[test]
    fn lobe_targets_average_to_base() {
        let s = sched();
        let sigma = 0.2;
        let base = rand_tensor([1, 4, 4], 6);
        let lobe = seeded_lobe_denoiser(base.clone(), sigma, &s).unwrap();
        let mut acc = vec![0.0f64; base.len()];
        for seed in 0..1000u64 {
            for (a, v) in acc
                .iter_mut()
                .zip(lobe.target_for_seed(seed).unwrap().data())
            {
                *a += *v as f64;
            }
        }
        for (a, b) in acc.iter().zip(base.data()) {
            assert!((a / 1000.0 - *b as f64).abs() <= 0.1 * sigma as f64);
        }
    }

    #[test]
    fn exposure_oracle_scales_target() {
        let s = sched();
        let d = ExposureOracle::new(Tensor::full([1, 1, 1], 0.5), 2.4, &s).unwrap();
        assert_eq!(d.target_at(0.0).data()[0], 0.5);
        let dark = d.target_at(-2.4).data()[0];
        assert!((dark - 0.25).abs() < 1e-7);
    }

    fn identity_stack() -> LoraStack {
        let eye = Matrix::eye(4);
        let zero_a = Matrix::zeros((4, 1));
        let zero_b = Matrix::zeros((1, 4));
        let d = LoraDelta::new(EXPOSURE_LORA, zero_a, zero_b, 0.75).unwrap();
        LoraStack::new(
            eye,
            vec![d],
            SwapSchedule::constant(EXPOSURE_LORA, 1000).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn linear_identity_echoes_latent() {
        let d = LinearLoraDenoiser::new(identity_stack()).unwrap();
        let z = rand_tensor([1, 2, 2], 8);
        let cond = Conditioning::default();
        let lora = ActiveLora {
            name: EXPOSURE_LORA.into(),
            scale: 0.75,
        };
        assert_eq!(d.predict_noise(&call(&z, 10, &cond, 0, &lora)).unwrap(), z);
        let wrong = rand_tensor([1, 3, 3], 8);
        assert!(d.predict_noise(&call(&wrong, 10, &cond, 0, &lora)).is_err());
    }

    #[test]
    fn linear_scale_halving_halves_contribution() {
        let build = |scale| {
            let a = array![[1.0], [2.0], [0.0], [-1.0]];
            let b = array![[0.5, 0.0, 1.0, 3.0]];
            let d = LoraDelta::new(EXPOSURE_LORA, a, b, scale).unwrap();
            LinearLoraDenoiser::new(
                LoraStack::new(
                    Matrix::eye(4),
                    vec![d],
                    SwapSchedule::constant(EXPOSURE_LORA, 1000).unwrap(),
                )
                .unwrap(),
            )
            .unwrap()
        };
        let z = Tensor::new([1, 2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let cond = Conditioning::default();
        let lora = ActiveLora {
            name: EXPOSURE_LORA.into(),
            scale: 0.75,
        };
        let full = build(1.0)
            .predict_noise(&call(&z, 5, &cond, 0, &lora))
            .unwrap()
            .sub(&z)
            .unwrap();
        let half = build(0.5)
            .predict_noise(&call(&z, 5, &cond, 0, &lora))
            .unwrap()
            .sub(&z)
            .unwrap();
        assert_eq!(full.scale(0.5), half);
    }

    #[test]
    fn linear_switches_at_boundary() {
        let a = array![[1.0], [0.0], [0.0], [0.0]];
        let b = array![[0.0, 1.0, 0.0, 0.0]];
        let turbo = LoraDelta::new(TURBO_LORA, a.clone(), b.clone(), 1.0).unwrap();
        let expo = LoraDelta::new(EXPOSURE_LORA, a, b, -1.0).unwrap();
        let stack = LoraStack::new(
            Matrix::eye(4),
            vec![turbo, expo],
            SwapSchedule::turbo_then_exposure(800, 1000).unwrap(),
        )
        .unwrap();
        let d = LinearLoraDenoiser::new(stack).unwrap();
        let z = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cond = Conditioning::default();
        let lora = ActiveLora {
            name: EXPOSURE_LORA.into(),
            scale: 0.75,
        };
        let at800 = d.predict_noise(&call(&z, 800, &cond, 0, &lora)).unwrap();
        let at799 = d.predict_noise(&call(&z, 799, &cond, 0, &lora)).unwrap();
        assert_eq!(at800.data(), &[3.0, 2.0, 3.0, 4.0]);
        assert_eq!(at799.data(), &[-1.0, 2.0, 3.0, 4.0]);
    }
}
