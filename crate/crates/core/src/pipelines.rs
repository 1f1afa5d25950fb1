//! End-to-end light estimation: chrome balls generated at several exposures,
//! merged into an HDR ball and unwrapped into an environment map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    Conditioning, CountingDenoiser, Denoiser, DenoiserCall, SwapSchedule, EXPOSURE_LORA, TURBO_LORA,
};
use crate::error::{Error, Result};
use crate::hdr::{merge_ldrs, ExposureBracket};
use crate::inpaint::{
    ball_seed, crop_ball, iterative_inpaint, make_ball_mask, paint_depth_circle, BallPlacement,
    BallRecord, CloserIs, ImputeLevel, InpaintConfig, LoraPlan, Sampler,
};
use crate::probe::{ball_to_envmap, EnvMap};
use crate::rng::{gaussian_like, SeededRng};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineKind {
    /// Iterative median inpainting with the exposure adapter at every EV.
    #[serde(rename = "diffusionlight")]
    DiffusionLight,
    /// Full turbo pass, then a partial exposure pass from the threshold.
    #[serde(rename = "turbo-sdedit")]
    TurboSdedit,
    /// Turbo steps down to the threshold, a clean-ball prediction there, then
    /// a partial exposure pass.
    #[serde(rename = "turbo-pred")]
    TurboPred,
    /// One pass that switches from the turbo to the exposure adapter at the
    /// threshold.
    #[serde(rename = "turbo-swap")]
    TurboSwap,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [
        PipelineKind::DiffusionLight,
        PipelineKind::TurboSdedit,
        PipelineKind::TurboPred,
        PipelineKind::TurboSwap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::DiffusionLight => "diffusionlight",
            PipelineKind::TurboSdedit => "turbo-sdedit",
            PipelineKind::TurboPred => "turbo-pred",
            PipelineKind::TurboSwap => "turbo-swap",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pipeline {s:?}")))
    }
}

/// Every knob of an estimation run. Serialized as the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub evs: Vec<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub eta: f64,
    pub steps: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Denoiser spec string; interpreted by front ends.
    pub denoiser: Option<String>,
    pub ball_diameter: usize,
    pub ball_crop: usize,
    pub env_height: usize,
    pub guidance: f64,
    pub lora_scale: f32,
    pub ev_min: f64,
    pub gamma: f64,
    pub reuse_threshold_eps: bool,
    pub impute_level: ImputeLevel,
    pub schedule: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub closer: CloserIs,
    pub parallel_evs: bool,
    pub embed_o: Vec<f32>,
    pub embed_d: Vec<f32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sched = ScheduleConfig::default();
        Self {
            kind: PipelineKind::TurboSwap,
            evs: vec![0.0, -2.5, -5.0],
            n: 30,
            k: 2,
            eta: 0.8,
            steps: sched.n_steps,
            threshold: 0.8,
            seed: 0,
            denoiser: None,
            ball_diameter: 256,
            ball_crop: 256,
            env_height: 128,
            guidance: 5.0,
            lora_scale: 0.75,
            ev_min: -5.0,
            gamma: crate::hdr::DEFAULT_GAMMA,
            reuse_threshold_eps: true,
            impute_level: ImputeLevel::AsWritten,
            schedule: sched.kind,
            t_max: sched.t_max,
            beta_start: sched.beta_start,
            beta_end: sched.beta_end,
            closer: CloserIs::Smaller,
            parallel_evs: false,
            embed_o: Vec::new(),
            embed_d: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            kind: self.schedule,
            t_max: self.t_max,
            n_steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            eta: self.eta,
            k: self.k,
            n: self.n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.evs.first() != Some(&0.0) {
            return Err(Error::invalid("exposure list must start at 0"));
        }
        if self.evs.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid(
                "exposure values must be strictly decreasing",
            ));
        }
        if !(self.ev_min < 0.0) || self.evs.iter().any(|&e| e < self.ev_min) {
            return Err(Error::invalid(format!(
                "exposure values must lie in [{}, 0]",
                self.ev_min
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        self.inpaint_config().validate()?;
        if !self.guidance.is_finite() || !self.lora_scale.is_finite() {
            return Err(Error::invalid("guidance and adapter scale must be finite"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if self.ball_crop == 0 || self.env_height == 0 {
            return Err(Error::invalid(
                "ball crop and environment size must be positive",
            ));
        }
        if self.embed_o.len() != self.embed_d.len() {
            return Err(Error::invalid("prompt embeddings differ in length"));
        }
        Ok(())
    }

    /// Timestep at which the swap pipeline hands over from turbo to exposure.
    pub fn swap_timestep(&self) -> usize {
        (self.threshold * self.t_max as f64).round() as usize
    }

    fn conditioning(&self, ev: f64, control: &Arc<Tensor>) -> Conditioning {
        Conditioning {
            ev,
            ev_min: self.ev_min,
            embed_o: self.embed_o.clone(),
            embed_d: self.embed_d.clone(),
            guidance_scale: self.guidance,
            control: Some(control.clone()),
            ..Conditioning::default()
        }
    }
}

/// Denoiser evaluations a run makes, from the step grid alone.
pub fn expected_nfe(cfg: &PipelineConfig, sched: &NoiseSchedule) -> Result<u64> {
    let n = sched.steps().len();
    let full = n - sched.start_index_for_strength(1.0)?;
    let partial = n - sched.start_index_for_strength(cfg.eta)?;
    let thr = sched.start_index_for_strength(cfg.threshold)?;
    let per_ev = match cfg.kind {
        PipelineKind::DiffusionLight => cfg.n * full + (cfg.k - 1) * cfg.n * partial + partial,
        PipelineKind::TurboSdedit => full + (n - thr),
        PipelineKind::TurboPred => {
            let extra = if cfg.reuse_threshold_eps && thr > 0 {
                0
            } else {
                1
            };
            thr + extra + (n - thr)
        }
        PipelineKind::TurboSwap => full,
    };
    Ok((per_ev * cfg.evs.len()) as u64)
}

/// Denoiser evaluations per adapter, overall and per exposure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeReport {
    pub total: u64,
    pub per_lora: BTreeMap<String, u64>,
    pub per_ev: Vec<EvNfe>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvNfe {
    pub ev: String,
    pub total: u64,
    pub per_lora: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct EvOutput {
    pub ev: f64,
    /// Full frame with the generated ball, clamped to `[0, 1]`.
    pub image: Tensor,
    /// Ball region resampled to a square.
    pub ball: Tensor,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub per_ev: Vec<EvOutput>,
    pub hdr_ball: Tensor,
    pub env_map: EnvMap,
    pub nfe: NfeReport,
    pub records: Vec<BallRecord>,
    pub depth_condition: Tensor,
    pub mask: Tensor,
}

struct EvRun {
    output: EvOutput,
    records: Vec<BallRecord>,
    counts: BTreeMap<String, u64>,
}

/// Runs the configured pipeline on an LDR image and its depth map.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    image: &Tensor,
    depth: Option<&Tensor>,
    denoiser: &dyn Denoiser,
) -> Result<EstimateResult> {
    cfg.validate()?;
    let sched = cfg.schedule_config().build()?;
    if image.channels() != 3 {
        return Err(Error::invalid("input image needs 3 channels"));
    }
    if !image.is_finite() || image.min_value() < 0.0 || image.max_value() > 1.0 {
        return Err(Error::OutOfRange(
            "input image values must lie in [0, 1]".into(),
        ));
    }
    let depth = depth.ok_or_else(|| Error::invalid("a depth map is required"))?;
    depth.ensure_shape([1, image.height(), image.width()])?;
    let placement = BallPlacement::new(cfg.ball_diameter, (image.height(), image.width()))?;
    let mask = make_ball_mask(&placement)?;
    let depth_condition = Arc::new(paint_depth_circle(depth, &placement, cfg.closer)?);

    let run = |ev: f64| run_ev(cfg, &sched, image, &mask, &depth_condition, denoiser, ev);
    let runs: Vec<EvRun> = if cfg.parallel_evs {
        cfg.evs
            .par_iter()
            .map(|&ev| run(ev))
            .collect::<Result<_>>()?
    } else {
        cfg.evs.iter().map(|&ev| run(ev)).collect::<Result<_>>()?
    };

    let bracket = ExposureBracket::new(
        runs.iter().map(|r| r.output.ball.clone()).collect(),
        cfg.evs.clone(),
    )?;
    let hdr_ball = merge_ldrs(&bracket, cfg.gamma)?;
    let env_map = ball_to_envmap(&hdr_ball, (cfg.env_height, 2 * cfg.env_height))?;

    let mut per_lora = BTreeMap::new();
    let mut per_ev = Vec::with_capacity(runs.len());
    let mut records = Vec::new();
    let mut outputs = Vec::with_capacity(runs.len());
    for r in runs {
        for (k, v) in &r.counts {
            *per_lora.entry(k.clone()).or_insert(0) += v;
        }
        per_ev.push(EvNfe {
            ev: format_ev(r.output.ev),
            total: r.counts.values().sum(),
            per_lora: r.counts,
        });
        records.extend(r.records);
        outputs.push(r.output);
    }
    Ok(EstimateResult {
        per_ev: outputs,
        hdr_ball,
        env_map,
        nfe: NfeReport {
            total: per_lora.values().sum(),
            per_lora,
            per_ev,
        },
        records,
        depth_condition: Arc::try_unwrap(depth_condition).unwrap_or_else(|a| (*a).clone()),
        mask,
    })
}

/// Shortest decimal form of an exposure value, e.g. `0`, `-2.5`.
pub fn format_ev(ev: f64) -> String {
    format!("{ev}")
}

fn run_ev(
    cfg: &PipelineConfig,
    sched: &NoiseSchedule,
    image: &Tensor,
    mask: &Tensor,
    depth: &Arc<Tensor>,
    denoiser: &dyn Denoiser,
    ev: f64,
) -> Result<EvRun> {
    let counting = CountingDenoiser::new(denoiser);
    let cond = cfg.conditioning(ev, depth);
    let t_max = sched.t_max();
    let turbo = LoraPlan::constant(TURBO_LORA, cfg.lora_scale, t_max)?;
    let exposure = LoraPlan::constant(EXPOSURE_LORA, cfg.lora_scale, t_max)?;
    let sampler = |plan| Sampler {
        denoiser: &counting,
        sched,
        cond: &cond,
        plan,
        impute: cfg.impute_level,
    };
    let step_t =
        |eta: f64| -> Result<usize> { Ok(sched.steps()[sched.start_index_for_strength(eta)?]) };
    let record = |round: usize, start_t: usize| BallRecord {
        ev,
        round,
        ball: 0,
        seed: ball_seed(cfg.seed, ev, round, 0),
        start_t,
    };

    let (generated, records) = match cfg.kind {
        PipelineKind::DiffusionLight => {
            let out = iterative_inpaint(
                &sampler(&exposure),
                image,
                mask,
                &cfg.inpaint_config(),
                cfg.seed,
            )?;
            (out.image, out.records)
        }
        PipelineKind::TurboSdedit => {
            let (r1, r2) = (record(1, step_t(1.0)?), record(2, step_t(cfg.threshold)?));
            let ball = sampler(&turbo).sdedit(image, mask, 1.0, r1.seed)?;
            let guide = Tensor::composite(image, &ball, mask)?;
            let out = sampler(&exposure).sdedit(&guide, mask, cfg.threshold, r2.seed)?;
            (out, vec![r1, r2])
        }
        PipelineKind::TurboPred => {
            let (r1, r2) = (record(1, step_t(1.0)?), record(2, step_t(cfg.threshold)?));
            let guess = predict_turbo_ball(&sampler(&turbo), cfg, image, mask, r1.seed)?;
            let guide = Tensor::composite(image, &guess, mask)?;
            let out = sampler(&exposure).sdedit(&guide, mask, cfg.threshold, r2.seed)?;
            (out, vec![r1, r2])
        }
        PipelineKind::TurboSwap => {
            let swap = LoraPlan::new(
                SwapSchedule::turbo_then_exposure(cfg.swap_timestep(), t_max)?,
                cfg.lora_scale,
            );
            let r1 = record(1, step_t(1.0)?);
            let out = sampler(&swap).sdedit(image, mask, 1.0, r1.seed)?;
            (out, vec![r1])
        }
    };
    let full = Tensor::composite(image, &generated, mask)?.clamp(0.0, 1.0);
    let ball = crop_ball(&full, mask, cfg.ball_crop)?;
    Ok(EvRun {
        output: EvOutput {
            ev,
            image: full,
            ball,
        },
        records,
        counts: counting.counter().snapshot(),
    })
}

/// Turbo steps from pure noise down to the threshold, then the clean-ball
/// estimate `x̂₀` there, decoded to pixels.
fn predict_turbo_ball(
    sampler: &Sampler<'_>,
    cfg: &PipelineConfig,
    image: &Tensor,
    mask: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let sched = sampler.sched;
    let codec = sampler.denoiser.codec();
    let z = codec.encode(image)?;
    let eps = gaussian_like(z.shape(), &mut SeededRng::new(seed))?;
    let start = sched.start_index_for_strength(1.0)?;
    let z_t = sched.add_noise(&z, sched.steps()[start], &eps)?;
    let stop = sched.start_index_for_strength(cfg.threshold)?.max(start);
    let traj = sampler.denoise_range(&z, z_t, mask, start, stop, seed)?;
    let x0 = match traj.last {
        Some(last) if cfg.reuse_threshold_eps => sched.predict_x0(&last.z, last.t, &last.eps)?,
        _ => {
            let t = sched.steps()[stop];
            let lora = sampler.plan.active(t)?;
            let eps = sampler.denoiser.predict_noise(&DenoiserCall {
                z: &traj.z,
                t,
                cond: sampler.cond,
                run_seed: seed,
                lora: &lora,
            })?;
            sched.predict_x0(&traj.z, t, &eps)?
        }
    };
    codec.decode(&x0)
}
