use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use probelight_bench::random_image;
use probelight_core::denoiser::{oracle_denoiser, seeded_lobe_denoiser};
use probelight_core::{run_pipeline, PipelineConfig, PipelineKind, Tensor};

fn pipelines(c: &mut Criterion) {
    let size = 64;
    let image = random_image(1, [3, size, size]);
    let target = random_image(2, [3, size, size]);
    let depth = Tensor::full([1, size, size], 1.0);
    let mut g = c.benchmark_group("pipeline 3x64x64");
    g.sample_size(10);
    for kind in PipelineKind::ALL {
        let cfg = PipelineConfig {
            kind,
            ball_diameter: 48,
            ball_crop: 48,
            env_height: 32,
            ..PipelineConfig::default()
        };
        let sched = cfg.schedule_config().build().unwrap();
        let oracle = oracle_denoiser(target.clone(), &sched);
        g.bench_function(format!("{kind} oracle"), |b| {
            b.iter(|| run_pipeline(black_box(&cfg), &image, Some(&depth), &oracle).unwrap())
        });
        if kind == PipelineKind::TurboSwap {
            let lobe = seeded_lobe_denoiser(target.clone(), 0.2, &sched).unwrap();
            g.bench_function(format!("{kind} lobe"), |b| {
                b.iter(|| run_pipeline(black_box(&cfg), &image, Some(&depth), &lobe).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, pipelines);
criterion_main!(benches);
