//! Chrome-ball masks, the imputing inpainting sampler, SDEdit-style partial
//! denoising, and iterative median aggregation of many sampled balls.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ActiveLora, Conditioning, Denoiser, DenoiserCall, SwapSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian_like, SeededRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// A centred disk of `diameter_px` pixels in an `image_size = (H, W)` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallPlacement {
    pub diameter_px: usize,
    pub image_size: (usize, usize),
}

impl BallPlacement {
    pub fn new(diameter_px: usize, image_size: (usize, usize)) -> Result<Self> {
        let p = Self {
            diameter_px,
            image_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.diameter_px == 0 {
            return Err(Error::invalid("ball diameter must be positive"));
        }
        if self.diameter_px > h.min(w) {
            return Err(Error::invalid(format!(
                "ball of diameter {} does not fit in a {h}×{w} image",
                self.diameter_px
            )));
        }
        Ok(())
    }

    /// Centre in continuous pixel coordinates (pixel `(r, c)` spans
    /// `[r, r+1) × [c, c+1)`).
    pub fn center(&self) -> (f64, f64) {
        (
            self.image_size.0 as f64 / 2.0,
            self.image_size.1 as f64 / 2.0,
        )
    }

    pub fn radius(&self) -> f64 {
        self.diameter_px as f64 / 2.0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (cy, cx) = self.center();
        let dy = row as f64 + 0.5 - cy;
        let dx = col as f64 + 0.5 - cx;
        dy * dy + dx * dx <= self.radius() * self.radius()
    }
}

/// `1×H×W` binary mask: 1 where the pixel centre lies within the ball.
pub fn make_ball_mask(p: &BallPlacement) -> Result<Tensor> {
    p.validate()?;
    let (h, w) = p.image_size;
    Ok(Tensor::from_fn([1, h, w], |_, r, c| {
        if p.contains(r, c) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Bounding box `(row, col, height, width)` of the non-zero mask pixels.
pub fn mask_bbox(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let plane = mask.plane(0);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if plane[r * w + c] != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| (r0, c0, r1 - r0 + 1, c1 - c0 + 1))
}

/// Crops the mask's bounding box out of `image` and resamples it to a
/// `size×size` square with nearest-neighbour sampling.
pub fn crop_ball(image: &Tensor, mask: &Tensor, size: usize) -> Result<Tensor> {
    let (r, c, h, w) = mask_bbox(mask).ok_or_else(|| Error::invalid("mask is empty"))?;
    Ok(image.crop(r, c, h, w)?.resize_nearest(size, size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloserIs {
    /// Depth maps: small values are near.
    #[default]
    Smaller,
    /// Disparity maps: large values are near.
    Larger,
}

/// Copy of `depth` with the ball disk set to the nearest depth in the map, so
/// the ball is conditioned to sit in front of the scene.
pub fn paint_depth_circle(depth: &Tensor, p: &BallPlacement, closer: CloserIs) -> Result<Tensor> {
    if depth.channels() != 1 {
        return Err(Error::invalid("depth map must have one channel"));
    }
    if !depth.is_finite() {
        return Err(Error::Numerical(
            "depth map contains non-finite values".into(),
        ));
    }
    let (h, w) = p.image_size;
    depth.ensure_shape([1, h, w])?;
    let fill = match closer {
        CloserIs::Smaller => depth.min_value(),
        CloserIs::Larger => depth.max_value(),
    };
    let mask = make_ball_mask(p)?;
    Tensor::composite(depth, &Tensor::full(depth.shape(), fill), &mask)
}

/// Noise level used to re-noise the known background after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeLevel {
    /// Current step's level with the predicted noise.
    #[default]
    AsWritten,
    /// Next step's level with freshly drawn noise.
    TPrevFreshNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintConfig {
    /// SDEdit strength after the first round.
    pub eta: f64,
    /// Median rounds.
    pub k: usize,
    /// Balls per median.
    pub n: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            eta: 0.8,
            k: 2,
            n: 30,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(format!(
                "strength {} outside (0, 1]",
                self.eta
            )));
        }
        if self.k == 0 || self.n == 0 {
            return Err(Error::invalid(
                "rounds and balls per round must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Which adapter, at which scale, serves each timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPlan {
    schedule: SwapSchedule,
    scales: BTreeMap<String, f32>,
}

impl LoraPlan {
    pub fn new(schedule: SwapSchedule, scale: f32) -> Self {
        let scales = schedule.names().map(|n| (n.to_string(), scale)).collect();
        Self { schedule, scales }
    }

    pub fn constant(name: &str, scale: f32, t_max: usize) -> Result<Self> {
        Ok(Self::new(SwapSchedule::constant(name, t_max)?, scale))
    }

    pub fn schedule(&self) -> &SwapSchedule {
        &self.schedule
    }

    pub fn active(&self, t: usize) -> Result<ActiveLora> {
        let name = self.schedule.active_at(t)?;
        Ok(ActiveLora {
            name: name.to_string(),
            scale: self.scales[name],
        })
    }
}

/// The last denoiser evaluation of a partial trajectory.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub z: Tensor,
    pub eps: Tensor,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub z: Tensor,
    pub last: Option<StepRecord>,
}

/// Stream label for imputation noise, kept apart from the initial-noise draw.
const IMPUTE_STREAM: u64 = 0x696d_7075;

/// Everything a sampling pass needs besides the latents themselves.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub cond: &'a Conditioning,
    pub plan: &'a LoraPlan,
    pub impute: ImputeLevel,
}

impl<'a> Sampler<'a> {
    /// Runs sampling steps `start..end` of the schedule from latent `z`,
    /// re-imposing the noised background `z_bg` outside the mask after each.
    pub fn denoise_range(
        &self,
        z_bg: &Tensor,
        mut z: Tensor,
        mask: &Tensor,
        start: usize,
        end: usize,
        run_seed: u64,
    ) -> Result<Trajectory> {
        z_bg.ensure_same_shape(&z)?;
        let steps = self.sched.steps();
        if start > end || end > steps.len() {
            return Err(Error::invalid(format!(
                "step range {start}..{end} outside 0..{}",
                steps.len()
            )));
        }
        let m = mask.broadcast_mask(z.shape())?;
        let mut impute_rng = SeededRng::new(derive_seed(run_seed, &[IMPUTE_STREAM]));
        let mut last = None;
        for (i, &t) in steps.iter().enumerate().take(end).skip(start) {
            let t_prev = self.sched.prev_timestep(i);
            let lora = self.plan.active(t)?;
            let eps = self.denoiser.predict_noise(&DenoiserCall {
                z: &z,
                t,
                cond: self.cond,
                run_seed,
                lora: &lora,
            })?;
            eps.ensure_same_shape(&z)?;
            let stepped = self.sched.ddim_update(&z, t, t_prev, &eps)?;
            let known = match self.impute {
                ImputeLevel::AsWritten => self.sched.add_noise(z_bg, t, &eps)?,
                ImputeLevel::TPrevFreshNoise => {
                    let fresh = gaussian_like(z.shape(), &mut impute_rng)?;
                    self.sched.add_noise(z_bg, t_prev, &fresh)?
                }
            };
            let next = Tensor::composite(&known, &stepped, &m)?;
            if i + 1 == end {
                last = Some(StepRecord { t, z, eps });
            }
            z = next;
        }
        Ok(Trajectory { z, last })
    }

    /// Terminal update at `t = 0` and the final composite with the clean
    /// background. Both noise coefficients vanish at `t = 0`, so no denoiser
    /// evaluation is needed.
    pub fn finish(&self, z_bg: &Tensor, z: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let m = mask.broadcast_mask(z.shape())?;
        Tensor::composite(z_bg, &self.sched.terminal_update(z), &m)
    }

    /// Inpaints from `z_init` at timestep `denoising_start` down to a clean
    /// sample and decodes it.
    pub fn inpaint(
        &self,
        z_bg: &Tensor,
        z_init: &Tensor,
        mask: &Tensor,
        denoising_start: usize,
        run_seed: u64,
    ) -> Result<Tensor> {
        let start = self
            .sched
            .steps()
            .iter()
            .position(|&t| t == denoising_start)
            .ok_or_else(|| {
                Error::invalid(format!("timestep {denoising_start} is not a sampling step"))
            })?;
        let traj = self.denoise_range(
            z_bg,
            z_init.clone(),
            mask,
            start,
            self.sched.steps().len(),
            run_seed,
        )?;
        let z0 = self.finish(z_bg, &traj.z, mask)?;
        self.denoiser.codec().decode(&z0)
    }

    /// Encodes `image`, noises it to the step nearest `eta·T` with noise drawn
    /// from `run_seed`, and inpaints the masked region from there.
    pub fn sdedit(&self, image: &Tensor, mask: &Tensor, eta: f64, run_seed: u64) -> Result<Tensor> {
        let z = self.denoiser.codec().encode(image)?;
        let start = self.sched.start_index_for_strength(eta)?;
        let t0 = self.sched.steps()[start];
        let eps = gaussian_like(z.shape(), &mut SeededRng::new(run_seed))?;
        let z_t = self.sched.add_noise(&z, t0, &eps)?;
        self.inpaint(&z, &z_t, mask, t0, run_seed)
    }
}

/// Per-element median; an even count averages the two middle values.
pub fn pixelwise_median(balls: &[Tensor]) -> Result<Tensor> {
    let first = balls
        .first()
        .ok_or_else(|| Error::invalid("median of an empty list"))?;
    for b in balls {
        b.ensure_same_shape(first)?;
    }
    let n = balls.len();
    let mut column = vec![0.0f32; n];
    let data = (0..first.len())
        .map(|k| {
            for (slot, b) in column.iter_mut().zip(balls) {
                *slot = b.data()[k];
            }
            column.sort_unstable_by(f32::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                ((column[n / 2 - 1] as f64 + column[n / 2] as f64) / 2.0) as f32
            }
        })
        .collect();
    Tensor::new(first.shape(), data)
}

/// One sampled ball: where it sits in the algorithm and how it was seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRecord {
    pub ev: f64,
    pub round: usize,
    pub ball: usize,
    pub seed: u64,
    pub start_t: usize,
}

/// Seed of ball `ball` in round `round` at exposure `ev`.
pub fn ball_seed(master: u64, ev: f64, round: usize, ball: usize) -> u64 {
    derive_seed(master, &[ev.to_bits(), round as u64, ball as u64])
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub image: Tensor,
    pub records: Vec<BallRecord>,
    /// Median ball of each round, before compositing.
    pub medians: Vec<Tensor>,
}

/// `k` rounds of sampling `N` balls (full strength in round 1, `eta` after)
/// and compositing their pixel-wise median into the image, followed by one
/// last pass at `eta`.
pub fn iterative_inpaint(
    sampler: &Sampler<'_>,
    image: &Tensor,
    mask: &Tensor,
    cfg: &InpaintConfig,
    master_seed: u64,
) -> Result<IterativeOutcome> {
    cfg.validate()?;
    let ev = sampler.cond.ev;
    let start_t = |eta: f64| -> Result<usize> {
        Ok(sampler.sched.steps()[sampler.sched.start_index_for_strength(eta)?])
    };
    let mut current = image.clone();
    let mut records = Vec::with_capacity(cfg.k * cfg.n + 1);
    let mut medians = Vec::with_capacity(cfg.k);
    for round in 1..=cfg.k {
        let eta = if round > 1 { cfg.eta } else { 1.0 };
        let t0 = start_t(eta)?;
        let balls = (0..cfg.n)
            .into_par_iter()
            .map(|j| sampler.sdedit(&current, mask, eta, ball_seed(master_seed, ev, round, j)))
            .collect::<Result<Vec<_>>>()?;
        let median = pixelwise_median(&balls)?;
        current = Tensor::composite(&current, &median, mask)?;
        medians.push(median);
        records.extend((0..cfg.n).map(|j| BallRecord {
            ev,
            round,
            ball: j,
            seed: ball_seed(master_seed, ev, round, j),
            start_t: t0,
        }));
    }
    let seed = ball_seed(master_seed, ev, cfg.k + 1, 0);
    let last = sampler.sdedit(&current, mask, cfg.eta, seed)?;
    records.push(BallRecord {
        ev,
        round: cfg.k + 1,
        ball: 0,
        seed,
        start_t: start_t(cfg.eta)?,
    });
    Ok(IterativeOutcome {
        image: Tensor::composite(&current, &last, mask)?,
        records,
        medians,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::denoiser::{oracle_denoiser, CountingDenoiser, EXPOSURE_LORA};
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::ScaledLinear, 1000, 30).unwrap()
    }

    fn rand(shape: [usize; 3], seed: u64) -> Tensor {
        gaussian_like(shape, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn tiny_mask_is_central_block() {
        let m = make_ball_mask(&BallPlacement::new(2, (4, 4)).unwrap()).unwrap();
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| m.at(0, r, c) == 1.0)
            .collect();
        assert_eq!(ones, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert!(BallPlacement::new(6, (4, 4)).is_err());
    }

    #[test]
    fn mask_area_matches_disk() {
        let m = make_ball_mask(&BallPlacement::new(256, (1024, 1024)).unwrap()).unwrap();
        let ratio = m.sum() / (std::f64::consts::PI * 128.0 * 128.0);
        assert!((0.99..=1.01).contains(&ratio), "{ratio}");
        assert_eq!(mask_bbox(&m), Some((384, 384, 256, 256)));
    }

    #[test]
    fn depth_circle_cases() {
        let p = BallPlacement::new(2, (4, 4)).unwrap();
        let flat = Tensor::full([1, 4, 4], 3.0);
        assert_eq!(
            paint_depth_circle(&flat, &p, CloserIs::Smaller).unwrap(),
            flat
        );
        let mut d = Tensor::full([1, 4, 4], 1.0);
        d.set(0, 0, 0, 0.1);
        d.set(0, 3, 3, 3.7);
        let near = paint_depth_circle(&d, &p, CloserIs::Smaller).unwrap();
        assert_eq!(near.at(0, 1, 1), 0.1);
        assert_eq!(near.at(0, 0, 1), 1.0);
        let far = paint_depth_circle(&d, &p, CloserIs::Larger).unwrap();
        assert_eq!(far.at(0, 2, 2), 3.7);
        d.set(0, 0, 3, f32::NAN);
        assert!(paint_depth_circle(&d, &p, CloserIs::Smaller).is_err());
    }

    #[test]
    fn median_cases() {
        let t = |v: f32| Tensor::full([1, 1, 1], v);
        assert_eq!(
            pixelwise_median(&[t(1.0), t(100.0), t(2.0)]).unwrap(),
            t(2.0)
        );
        assert_eq!(pixelwise_median(&[t(1.0), t(3.0)]).unwrap(), t(2.0));
        assert!(pixelwise_median(&[]).is_err());
    }

    fn with_sampler<R>(d: &dyn Denoiser, f: impl FnOnce(&Sampler<'_>) -> R) -> R {
        let s = sched();
        let cond = Conditioning::default();
        let plan = LoraPlan::constant(EXPOSURE_LORA, 0.75, 1000).unwrap();
        f(&Sampler {
            denoiser: d,
            sched: &s,
            cond: &cond,
            plan: &plan,
            impute: ImputeLevel::AsWritten,
        })
    }

    #[test]
    fn full_mask_converges_to_oracle_target() {
        let s = sched();
        let target = rand([3, 8, 8], 3).clamp(-1.0, 1.0);
        let d = CountingDenoiser::new(oracle_denoiser(target.clone(), &s));
        let out = with_sampler(&d, |sp| {
            let z_init = rand([3, 8, 8], 4);
            sp.inpaint(
                &Tensor::zeros([3, 8, 8]),
                &z_init,
                &Tensor::full([1, 8, 8], 1.0),
                1000,
                0,
            )
        })
        .unwrap();
        assert!(out.max_abs_diff(&target).unwrap() <= 1e-4);
        assert_eq!(d.counter().total(), 30);
    }

    #[test]
    fn empty_mask_returns_background() {
        let s = sched();
        let d = oracle_denoiser(rand([3, 8, 8], 5), &s);
        let bg = rand([3, 8, 8], 6);
        let out = with_sampler(&d, |sp| sp.sdedit(&bg, &Tensor::zeros([1, 8, 8]), 0.8, 9)).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn strength_picks_start_step() {
        let s = sched();
        let d = CountingDenoiser::new(oracle_denoiser(Tensor::zeros([1, 4, 4]), &s));
        with_sampler(&d, |sp| {
            sp.sdedit(
                &Tensor::zeros([1, 4, 4]),
                &Tensor::full([1, 4, 4], 1.0),
                0.8,
                1,
            )
        })
        .unwrap();
        assert_eq!(d.counter().total(), 24);
        assert_eq!(s.steps()[s.start_index_for_strength(0.8).unwrap()], 800);
    }

    #[test]
    fn single_ball_iteration_reaches_target() {
        let s = sched();
        let target = rand([3, 8, 8], 7).clamp(-1.0, 1.0);
        let d = oracle_denoiser(target.clone(), &s);
        let image = rand([3, 8, 8], 8).clamp(0.0, 1.0);
        let mask = make_ball_mask(&BallPlacement::new(6, (8, 8)).unwrap()).unwrap();
        let cfg = InpaintConfig {
            eta: 0.8,
            k: 1,
            n: 1,
        };
        let out = with_sampler(&d, |sp| iterative_inpaint(sp, &image, &mask, &cfg, 3)).unwrap();
        let expect = Tensor::composite(&image, &target, &mask).unwrap();
        assert!(out.image.max_abs_diff(&expect).unwrap() <= 1e-4);
        assert_eq!(
            out.records.iter().map(|r| r.start_t).collect::<Vec<_>>(),
            vec![1000, 800]
        );
    }

    #[test]
    fn fresh_noise_imputation_keeps_background() {
        let s = sched();
        let d = oracle_denoiser(rand([3, 6, 6], 11), &s);
        let bg = rand([3, 6, 6], 12);
        let mask = make_ball_mask(&BallPlacement::new(4, (6, 6)).unwrap()).unwrap();
        let cond = Conditioning::default();
        let plan = LoraPlan::constant(EXPOSURE_LORA, 0.75, 1000).unwrap();
        let sp = Sampler {
            denoiser: &d,
            sched: &s,
            cond: &cond,
            plan: &plan,
            impute: ImputeLevel::TPrevFreshNoise,
        };
        let out = sp.sdedit(&bg, &mask, 1.0, 5).unwrap();
        let m = mask.broadcast_mask([3, 6, 6]).unwrap();
        for ((o, b), m) in out.data().iter().zip(bg.data()).zip(m.data()) {
            if *m == 0.0 {
                assert_eq!(o, b);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn median_of_copies_is_identity(seed in any::<u64>(), n in 1usize..7) {
            let t = rand([2, 3, 3], seed);
            prop_assert_eq!(pixelwise_median(&vec![t.clone(); n]).unwrap(), t);
        }

        #[test]
        fn off_mask_preserved_for_arbitrary_denoiser(seed in any::<u64>(), d in 1usize..8) {
            struct Wild;
            impl Denoiser for Wild {
                fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
                    Ok(call.z.map(|v| (v * 3.1).sin() * 2.0 + call.t as f32 * 1e-3))
                }
            }
            let bg = rand([3, 8, 8], seed).clamp(0.0, 1.0);
            let mask = make_ball_mask(&BallPlacement::new(d, (8, 8)).unwrap()).unwrap();
            let out = with_sampler(&Wild, |sp| sp.sdedit(&bg, &mask, 0.8, seed)).unwrap();
            let m = mask.broadcast_mask([3, 8, 8]).unwrap();
            for ((o, b), m) in out.data().iter().zip(bg.data()).zip(m.data()) {
                if *m == 0.0 {
                    prop_assert!((o - b).abs() <= 1e-4);
                }
            }
        }
    }
}
