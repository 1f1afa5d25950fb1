//! Deterministic fixtures shared by the benchmarks.

use probelight_core::probe::Vec3;
use probelight_core::{EnvMap, SeededRng, Tensor};

pub fn random_image(seed: u64, shape: [usize; 3]) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_, _, _| rng.next_uniform() as f32)
}

/// Smooth sky with a bright sun lobe.
pub fn sky_env(h: usize) -> EnvMap {
    let sun: Vec3 = [0.3, 0.8, 0.52];
    EnvMap::from_direction_fn(h, |d| {
        let c = (d[0] * sun[0] + d[1] * sun[1] + d[2] * sun[2]).max(0.0);
        let base = 0.4 + 0.3 * d[1];
        let s = 20.0 * c.powi(64);
        [base + s, base + 0.9 * s, base * 1.2 + 0.7 * s]
    })
    .expect("valid env size")
}

/// An LDR exposure bracket of `sky_env` rendered at EV 0, -2.5 and -5.
pub fn bracket(size: usize) -> (Vec<Tensor>, Vec<f64>) {
    let ball = probelight_core::probe::envmap_to_ball(&sky_env(64), size);
    let evs = vec![0.0, -2.5, -5.0];
    let images = evs
        .iter()
        .map(|&ev| {
            let gain = 2f32.powf(ev as f32);
            ball.map(|v| (v * gain).min(1.0).powf(1.0 / 2.4))
        })
        .collect();
    (images, evs)
}
