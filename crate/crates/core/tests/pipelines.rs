use std::sync::Arc;

use ndarray::Array2;
use probelight_core::denoiser::{
    oracle_denoiser, seeded_lobe_denoiser, LinearLoraDenoiser, LoraDelta, LoraRouter, LoraStack,
    SwapSchedule, EXPOSURE_LORA, TURBO_LORA,
};
use probelight_core::inpaint::{make_ball_mask, BallPlacement};
use probelight_core::pipelines::expected_nfe;
use probelight_core::{
    run_pipeline, CountingDenoiser, Denoiser, PipelineConfig, PipelineKind, SeededRng, Tensor,
};
use proptest::prelude::*;

const SIZE: usize = 24;

fn small_config(kind: PipelineKind) -> PipelineConfig {
    PipelineConfig {
        kind,
        n: 3,
        k: 2,
        steps: 12,
        ball_diameter: 16,
        ball_crop: 16,
        env_height: 8,
        seed: 3,
        ..PipelineConfig::default()
    }
}

fn random_image(seed: u64, size: usize) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn([3, size, size], |_, _, _| rng.next_uniform() as f32)
}

fn smooth_target(size: usize) -> Tensor {
    Tensor::from_fn([3, size, size], |c, y, x| {
        0.5 + 0.3
            * ((x as f32 / size as f32) * 3.0 + c as f32).sin()
            * (y as f32 / size as f32 - 0.5)
    })
}

fn flat_depth(size: usize) -> Tensor {
    Tensor::from_fn([1, size, size], |_, y, _| 1.0 + y as f32 / size as f32)
}

fn linear_denoiser(size: usize, seed: u64) -> LinearLoraDenoiser {
    let n = 3 * size * size;
    let mut rng = SeededRng::new(seed);
    let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| (rng.next_normal() * 0.01) as f32);
    let turbo = LoraDelta::new(TURBO_LORA, rand(n, 2), rand(2, n), 0.75).unwrap();
    let exposure = LoraDelta::new(EXPOSURE_LORA, rand(n, 2), rand(2, n), 0.75).unwrap();
    let w = Array2::from_diag_elem(n, 0.5f32);
    let sched = SwapSchedule::turbo_then_exposure(800, 1000).unwrap();
    LinearLoraDenoiser::new(LoraStack::new(w, vec![turbo, exposure], sched).unwrap()).unwrap()
}

fn toy_denoisers(size: usize) -> Vec<(&'static str, Box<dyn Denoiser>)> {
    let sched = small_config(PipelineKind::TurboSwap)
        .schedule_config()
        .build()
        .unwrap();
    let target = smooth_target(size);
    vec![
        ("oracle", Box::new(oracle_denoiser(target.clone(), &sched))),
        (
            "lobe",
            Box::new(seeded_lobe_denoiser(target, 0.2, &sched).unwrap()),
        ),
        ("linear", Box::new(linear_denoiser(size, 1))),
    ]
}

fn off_mask_diff(out: &Tensor, input: &Tensor, mask: &Tensor) -> f32 {
    let plane = input.height() * input.width();
    let mut worst = 0.0f32;
    for (k, (&a, &b)) in out.data().iter().zip(input.data()).enumerate() {
        if mask.data()[k % plane] == 0.0 {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn off_ball_pixels_match_input_for_every_pipeline_and_denoiser() {
    let image = random_image(17, SIZE);
    let depth = flat_depth(SIZE);
    for (name, denoiser) in toy_denoisers(SIZE) {
        for kind in PipelineKind::ALL {
            let cfg = small_config(kind);
            let res = run_pipeline(&cfg, &image, Some(&depth), denoiser.as_ref()).unwrap();
            for out in &res.per_ev {
                let d = off_mask_diff(&out.image, &image, &res.mask);
                assert!(d <= 1e-4, "{name}/{kind} ev {}: {d}", out.ev);
            }
        }
    }
}

#[test]
fn shared_oracle_collapses_all_pipelines() {
    let image = random_image(2, SIZE);
    let depth = flat_depth(SIZE);
    let cfg = small_config(PipelineKind::TurboSwap);
    let sched = cfg.schedule_config().build().unwrap();
    let oracle = oracle_denoiser(smooth_target(SIZE), &sched);
    let maps: Vec<Tensor> = PipelineKind::ALL
        .iter()
        .map(|&kind| {
            let res = run_pipeline(&small_config(kind), &image, Some(&depth), &oracle).unwrap();
            res.env_map.into_radiance()
        })
        .collect();
    for (kind, m) in PipelineKind::ALL.iter().zip(&maps) {
        let d = m.max_abs_diff(&maps[0]).unwrap();
        assert!(
            d <= 1e-4,
            "{kind} differs from {} by {d}",
            PipelineKind::ALL[0]
        );
    }
}

#[test]
fn oracle_ball_region_equals_target() {
    let image = random_image(4, SIZE);
    let depth = flat_depth(SIZE);
    let target = smooth_target(SIZE);
    let mask = make_ball_mask(&BallPlacement::new(16, (SIZE, SIZE)).unwrap()).unwrap();
    let want = Tensor::composite(&image, &target, &mask).unwrap();
    for kind in PipelineKind::ALL {
        let cfg = small_config(kind);
        let sched = cfg.schedule_config().build().unwrap();
        let res = run_pipeline(
            &cfg,
            &image,
            Some(&depth),
            &oracle_denoiser(target.clone(), &sched),
        )
        .unwrap();
        for out in &res.per_ev {
            assert!(out.image.max_abs_diff(&want).unwrap() <= 1e-4, "{kind}");
        }
    }
}

#[test]
fn instrumented_counts_match_report_and_closed_form() {
    let image = random_image(8, SIZE);
    let depth = flat_depth(SIZE);
    let sched = small_config(PipelineKind::TurboSwap)
        .schedule_config()
        .build()
        .unwrap();
    let lobe = seeded_lobe_denoiser(smooth_target(SIZE), 0.2, &sched).unwrap();
    for kind in PipelineKind::ALL {
        for reuse in [true, false] {
            let cfg = PipelineConfig {
                reuse_threshold_eps: reuse,
                ..small_config(kind)
            };
            let counting = CountingDenoiser::new(&lobe);
            let res = run_pipeline(&cfg, &image, Some(&depth), &counting).unwrap();
            let sched = cfg.schedule_config().build().unwrap();
            assert_eq!(counting.counter().total(), res.nfe.total, "{kind}");
            assert_eq!(
                res.nfe.total,
                expected_nfe(&cfg, &sched).unwrap(),
                "{kind} reuse={reuse}"
            );
            assert_eq!(counting.counter().snapshot(), res.nfe.per_lora);
            assert_eq!(res.nfe.per_ev.len(), 3);
        }
    }
}

#[test]
fn turbo_pipelines_split_calls_between_adapters() {
    let image = random_image(9, SIZE);
    let depth = flat_depth(SIZE);
    let cfg = PipelineConfig {
        steps: 30,
        ..small_config(PipelineKind::TurboSwap)
    };
    let sched = cfg.schedule_config().build().unwrap();
    let oracle = oracle_denoiser(smooth_target(SIZE), &sched);
    let per_lora = |kind| {
        let res = run_pipeline(
            &PipelineConfig {
                kind,
                ..cfg.clone()
            },
            &image,
            Some(&depth),
            &oracle,
        )
        .unwrap();
        (
            res.nfe.per_lora[TURBO_LORA],
            res.nfe.per_lora[EXPOSURE_LORA],
        )
    };
    // t = 800 belongs to the turbo adapter: 7 of the 30 steps
    assert_eq!(per_lora(PipelineKind::TurboSwap), (21, 69));
    assert_eq!(per_lora(PipelineKind::TurboSdedit), (90, 72));
    assert_eq!(per_lora(PipelineKind::TurboPred), (18, 72));
}

#[test]
fn diffusionlight_first_round_starts_from_pure_noise() {
    let image = random_image(5, SIZE);
    let depth = flat_depth(SIZE);
    let cfg = PipelineConfig {
        steps: 30,
        ..small_config(PipelineKind::DiffusionLight)
    };
    let sched = cfg.schedule_config().build().unwrap();
    let res = run_pipeline(
        &cfg,
        &image,
        Some(&depth),
        &oracle_denoiser(smooth_target(SIZE), &sched),
    )
    .unwrap();
    assert!(!res.records.is_empty());
    for r in &res.records {
        let want = if r.round == 1 { 1000 } else { 800 };
        assert_eq!(r.start_t, want, "{r:?}");
    }
    let seeds: std::collections::BTreeSet<u64> = res.records.iter().map(|r| r.seed).collect();
    assert_eq!(
        seeds.len(),
        res.records.len(),
        "ball seeds must be distinct"
    );
}

#[test]
fn runs_are_deterministic_and_independent_of_ev_parallelism() {
    let image = random_image(6, SIZE);
    let depth = flat_depth(SIZE);
    let sched = small_config(PipelineKind::TurboSwap)
        .schedule_config()
        .build()
        .unwrap();
    let lobe = seeded_lobe_denoiser(smooth_target(SIZE), 0.2, &sched).unwrap();
    for kind in PipelineKind::ALL {
        let cfg = small_config(kind);
        let a = run_pipeline(&cfg, &image, Some(&depth), &lobe).unwrap();
        let b = run_pipeline(&cfg, &image, Some(&depth), &lobe).unwrap();
        let c = run_pipeline(
            &PipelineConfig {
                parallel_evs: true,
                ..cfg.clone()
            },
            &image,
            Some(&depth),
            &lobe,
        )
        .unwrap();
        assert_eq!(a.hdr_ball, b.hdr_ball, "{kind}");
        assert_eq!(a.env_map, b.env_map, "{kind}");
        assert_eq!(a.hdr_ball, c.hdr_ball, "{kind}");
        assert_eq!(a.records, c.records, "{kind}");
        let other = run_pipeline(
            &PipelineConfig { seed: 4, ..cfg },
            &image,
            Some(&depth),
            &lobe,
        )
        .unwrap();
        assert_ne!(a.hdr_ball, other.hdr_ball, "{kind}: seed must matter");
    }
}

#[test]
fn output_shapes_and_depth_condition() {
    let image = random_image(1, SIZE);
    let mut depth = flat_depth(SIZE);
    depth.set(0, 0, 0, 0.25);
    let cfg = small_config(PipelineKind::TurboSwap);
    let sched = cfg.schedule_config().build().unwrap();
    let res = run_pipeline(
        &cfg,
        &image,
        Some(&depth),
        &oracle_denoiser(smooth_target(SIZE), &sched),
    )
    .unwrap();
    assert_eq!(res.env_map.radiance().shape(), [3, 8, 16]);
    assert_eq!(res.hdr_ball.shape(), [3, 16, 16]);
    assert!(res.hdr_ball.min_value() >= 0.0);
    assert_eq!(res.per_ev.len(), 3);
    assert_eq!(res.depth_condition.at(0, SIZE / 2, SIZE / 2), 0.25);
    assert_eq!(res.depth_condition.at(0, 0, 0), 0.25);
    assert_eq!(
        res.depth_condition.at(0, SIZE - 1, 0),
        depth.at(0, SIZE - 1, 0)
    );
}

#[test]
fn missing_depth_and_bad_images_are_rejected() {
    let cfg = small_config(PipelineKind::TurboSwap);
    let sched = cfg.schedule_config().build().unwrap();
    let oracle = oracle_denoiser(smooth_target(SIZE), &sched);
    let image = random_image(1, SIZE);
    assert!(run_pipeline(&cfg, &image, None, &oracle).is_err());
    let bright = image.scale(3.0);
    assert!(run_pipeline(&cfg, &bright, Some(&flat_depth(SIZE)), &oracle).is_err());
    let big_ball = PipelineConfig {
        ball_diameter: SIZE + 2,
        ..cfg
    };
    assert!(run_pipeline(&big_ball, &image, Some(&flat_depth(SIZE)), &oracle).is_err());
}

fn blur(img: &Tensor, sigma: f64) -> Tensor {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let [c, h, w] = img.shape();
    let pass = |src: &Tensor, horizontal: bool| {
        Tensor::from_fn([c, h, w], |ch, y, x| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, wt) in kernel.iter().enumerate() {
                let o = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, x as isize + o)
                } else {
                    (y as isize + o, x as isize)
                };
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += wt * src.at(ch, yy as usize, xx as usize) as f64;
                    norm += wt;
                }
            }
            (acc / norm) as f32
        })
    };
    pass(&pass(img, true), false)
}

#[test]
fn turbo_sdedit_keeps_turbo_low_frequencies() {
    let size = 48;
    let cfg = PipelineConfig {
        ball_diameter: 40,
        ball_crop: 40,
        steps: 30,
        ..small_config(PipelineKind::TurboSdedit)
    };
    let sched = cfg.schedule_config().build().unwrap();
    let turbo_target = smooth_target(size);
    let detail = Tensor::from_fn(
        [3, size, size],
        |_, y, x| if (x + y) % 2 == 0 { 0.1 } else { -0.1 },
    );
    let exposure_target = turbo_target.add(&detail).unwrap();
    let router = LoraRouter::new()
        .route(
            TURBO_LORA,
            Arc::new(oracle_denoiser(turbo_target.clone(), &sched)),
        )
        .route(
            EXPOSURE_LORA,
            Arc::new(oracle_denoiser(exposure_target, &sched)),
        );
    let image = random_image(3, size);
    let res = run_pipeline(&cfg, &image, Some(&flat_depth(size)), &router).unwrap();
    let mask = &res.mask;
    let want = blur(
        &Tensor::composite(&image, &turbo_target, mask).unwrap(),
        8.0,
    );
    let got = blur(&res.per_ev[0].image, 8.0);
    let plane = size * size;
    let (mut l1, mut n) = (0.0, 0);
    for (k, (a, b)) in got.data().iter().zip(want.data()).enumerate() {
        if mask.data()[k % plane] == 1.0 {
            l1 += (a - b).abs() as f64;
            n += 1;
        }
    }
    let l1 = l1 / n as f64;
    assert!(l1 <= 0.05, "low-pass L1 {l1}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counts_follow_closed_form(
        kind in prop::sample::select(PipelineKind::ALL.to_vec()),
        n in 1usize..4,
        k in 1usize..3,
        steps in 4usize..16,
        eta in 0.3f64..1.0,
        threshold in 0.2f64..0.95,
        n_evs in 1usize..4,
        reuse in any::<bool>(),
    ) {
        let evs = [0.0, -2.5, -5.0][..n_evs].to_vec();
        let cfg = PipelineConfig { evs, n, k, steps, eta, threshold, reuse_threshold_eps: reuse, ..small_config(kind) };
        let sched = cfg.schedule_config().build().unwrap();
        let oracle = oracle_denoiser(smooth_target(SIZE), &sched);
        let counting = CountingDenoiser::new(&oracle);
        let res = run_pipeline(&cfg, &random_image(1, SIZE), Some(&flat_depth(SIZE)), &counting).unwrap();
        prop_assert_eq!(counting.counter().total(), expected_nfe(&cfg, &sched).unwrap());
        prop_assert_eq!(res.nfe.total, counting.counter().total());
    }

    #[test]
    fn lobe_output_is_seed_deterministic(seed in any::<u64>()) {
        let cfg = PipelineConfig { seed, evs: vec![0.0, -5.0], ..small_config(PipelineKind::TurboPred) };
        let sched = cfg.schedule_config().build().unwrap();
        let lobe = seeded_lobe_denoiser(smooth_target(SIZE), 0.2, &sched).unwrap();
        let image = random_image(seed ^ 1, SIZE);
        let a = run_pipeline(&cfg, &image, Some(&flat_depth(SIZE)), &lobe).unwrap();
        let b = run_pipeline(&cfg, &image, Some(&flat_depth(SIZE)), &lobe).unwrap();
        prop_assert_eq!(a.env_map, b.env_map);
    }
}
