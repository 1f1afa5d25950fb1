//! The pluggable noise-prediction contract and everything that feeds it:
//! exposure-conditioned prompt embeddings, low-rank adapter composition and
//! per-timestep adapter swapping, analytic stand-in denoisers, a wire-protocol
//! client for a real model, and call accounting.

mod lora;
mod remote;
mod toy;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use lora::{
    compose_lora, LoraDelta, LoraStack, LoraStackConfig, Matrix, SwapInterval, SwapSchedule,
    EXPOSURE_LORA, TURBO_LORA,
};
pub use remote::{Endpoint, HelloInfo, RemoteDenoiser, PROTOCOL_VERSION};
pub use toy::{
    oracle_denoiser, seeded_lobe_denoiser, ExposureOracle, LinearLoraDenoiser, OracleDenoiser,
    SeededLobeDenoiser,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PROMPT: &str = "a perfect mirrored reflective chrome ball sphere";
pub const DEFAULT_NEGATIVE_PROMPT: &str = "matte, diffuse, flat, dull";

/// Text and exposure conditioning for one chrome-ball generation.
///
/// Embeddings are opaque vectors supplied by the caller; `control` carries the
/// painted depth map for denoisers that accept it.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub ev: f64,
    pub ev_min: f64,
    pub embed_o: Vec<f32>,
    pub embed_d: Vec<f32>,
    pub guidance_scale: f64,
    pub prompt_text: String,
    pub negative_prompt_text: String,
    pub control: Option<Arc<Tensor>>,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            ev: 0.0,
            ev_min: -5.0,
            embed_o: Vec::new(),
            embed_d: Vec::new(),
            guidance_scale: 5.0,
            prompt_text: DEFAULT_PROMPT.to_string(),
            negative_prompt_text: DEFAULT_NEGATIVE_PROMPT.to_string(),
            control: None,
        }
    }
}

impl Conditioning {
    pub fn at_ev(ev: f64) -> Self {
        Self {
            ev,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ev_min < 0.0) {
            return Err(Error::invalid(format!(
                "ev_min must be negative, got {}",
                self.ev_min
            )));
        }
        if !(self.ev_min..=0.0).contains(&self.ev) {
            return Err(Error::invalid(format!(
                "ev {} outside [{}, 0]",
                self.ev, self.ev_min
            )));
        }
        if self.embed_o.len() != self.embed_d.len() {
            return Err(Error::invalid("prompt embeddings differ in length"));
        }
        Ok(())
    }
}

/// `ξ_o + (ev/EV_min)·(ξ_d − ξ_o)`, evaluated as `(1−w)·ξ_o + w·ξ_d` so both
/// endpoints are reproduced exactly.
pub fn interp_embedding(cond: &Conditioning) -> Result<Vec<f32>> {
    cond.validate()?;
    let w = cond.ev / cond.ev_min;
    Ok(cond
        .embed_o
        .iter()
        .zip(&cond.embed_d)
        .map(|(&o, &d)| ((1.0 - w) * o as f64 + w * d as f64) as f32)
        .collect())
}

/// Mean over all elements of `(M ⊙ (ε̂ − ε))²`.
pub fn masked_noise_loss(eps_hat: &Tensor, eps: &Tensor, mask: &Tensor) -> Result<f64> {
    eps_hat.ensure_same_shape(eps)?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("mask must be binary"));
    }
    let m = mask.broadcast_mask(eps.shape())?;
    let total: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .zip(m.data())
        .map(|((&a, &b), &m)| {
            let d = m as f64 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    Ok(total / eps.len() as f64)
}

/// Adapter selected for one denoiser call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLora {
    pub name: String,
    pub scale: f32,
}

/// Arguments of a single noise prediction `ε_θ(z_t, t, C)`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserCall<'a> {
    pub z: &'a Tensor,
    pub t: usize,
    pub cond: &'a Conditioning,
    pub run_seed: u64,
    pub lora: &'a ActiveLora,
}

/// Latent encoder/decoder. The identity codec makes latents equal pixels.
pub trait Codec: Send + Sync {
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

/// Noise predictor. Implementations must tolerate concurrent calls.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor>;

    fn codec(&self) -> &dyn Codec {
        &IdentityCodec
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        (**self).predict_noise(call)
    }

    fn codec(&self) -> &dyn Codec {
        (**self).codec()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        (**self).predict_noise(call)
    }

    fn codec(&self) -> &dyn Codec {
        (**self).codec()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        (**self).predict_noise(call)
    }

    fn codec(&self) -> &dyn Codec {
        (**self).codec()
    }
}

/// Number of function evaluations, per adapter name.
#[derive(Debug, Default)]
pub struct NfeCounter {
    counts: Mutex<BTreeMap<String, u64>>,
}

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, lora: &str) {
        let mut counts = self.counts.lock().unwrap_or_else(|p| p.into_inner());
        *counts.entry(lora.to_string()).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.snapshot().values().sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.counts
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }
}

/// Wraps a denoiser and counts every invocation before forwarding it.
pub struct CountingDenoiser<D> {
    inner: D,
    counter: Arc<NfeCounter>,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self::with_counter(inner, Arc::new(NfeCounter::new()))
    }

    pub fn with_counter(inner: D, counter: Arc<NfeCounter>) -> Self {
        Self { inner, counter }
    }

    pub fn counter(&self) -> &Arc<NfeCounter> {
        &self.counter
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        self.counter.record(&call.lora.name);
        self.inner.predict_noise(call)
    }

    fn codec(&self) -> &dyn Codec {
        self.inner.codec()
    }
}

/// Dispatches each call to a denoiser chosen by the active adapter name.
#[derive(Default)]
pub struct LoraRouter {
    routes: BTreeMap<String, Arc<dyn Denoiser>>,
}

impl LoraRouter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, lora: &str, denoiser: Arc<dyn Denoiser>) -> Self {
        self.routes.insert(lora.to_string(), denoiser);
        self
    }
}

impl Denoiser for LoraRouter {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        self.routes
            .get(&call.lora.name)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no denoiser routed for adapter {:?}",
                    call.lora.name
                ))
            })?
            .predict_noise(call)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(ev: f64, o: Vec<f32>, d: Vec<f32>) -> Conditioning {
        Conditioning {
            ev,
            embed_o: o,
            embed_d: d,
            ..Conditioning::default()
        }
    }

    #[test]
    fn embedding_endpoints_and_midpoint() {
        let o = vec![0.1, -3.7, 2.0];
        let d = vec![0.3, 1.1, -0.4];
        assert_eq!(
            interp_embedding(&cond(0.0, o.clone(), d.clone())).unwrap(),
            o
        );
        assert_eq!(
            interp_embedding(&cond(-5.0, o.clone(), d.clone())).unwrap(),
            d
        );
        let mid = interp_embedding(&cond(-2.5, vec![0.0, 0.0], vec![2.0, 4.0])).unwrap();
        assert_eq!(mid, vec![1.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_bad_ev() {
        assert!(interp_embedding(&cond(0.5, vec![], vec![])).is_err());
        assert!(interp_embedding(&cond(-6.0, vec![], vec![])).is_err());
        assert!(interp_embedding(&cond(-1.0, vec![1.0], vec![])).is_err());
    }

    #[test]
    fn embedding_is_affine_in_ev() {
        let o = vec![0.25, -1.0, 3.0];
        let d = vec![-2.0, 0.5, 1.0];
        let f = |ev| interp_embedding(&cond(ev, o.clone(), d.clone())).unwrap();
        for (e1, e2) in [(-1.0, -2.5), (-0.3, -4.1), (0.0, -5.0)] {
            let lhs: Vec<f32> = f(e1).iter().zip(f(e2)).map(|(a, b)| a + b).collect();
            let rhs: Vec<f32> = f(0.0).iter().zip(f(e1 + e2)).map(|(a, b)| a + b).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_loss_cases() {
        let eps = Tensor::new([1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            masked_noise_loss(&eps, &eps, &Tensor::full([1, 1, 2], 1.0)).unwrap(),
            0.0
        );
        let hat = Tensor::new([1, 1, 2], vec![4.0, 7.0]).unwrap();
        assert_eq!(
            masked_noise_loss(&hat, &eps, &Tensor::zeros([1, 1, 2])).unwrap(),
            0.0
        );
        let mask = Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(masked_noise_loss(&hat, &eps, &mask).unwrap(), 4.5);
        assert!(masked_noise_loss(&hat, &Tensor::zeros([1, 1, 3]), &mask).is_err());
        assert!(masked_noise_loss(&hat, &eps, &Tensor::full([1, 1, 2], 0.5)).is_err());
    }

    #[test]
    fn counter_counts_at_send() {
        struct Failing;
        impl Denoiser for Failing {
            fn predict_noise(&self, _: &DenoiserCall<'_>) -> Result<Tensor> {
                Err(Error::Protocol("boom".into()))
            }
        }
        let d = CountingDenoiser::new(Failing);
        let z = Tensor::zeros([1, 1, 1]);
        let c = Conditioning::default();
        let lora = ActiveLora {
            name: "exposure".into(),
            scale: 0.75,
        };
        let call = DenoiserCall {
            z: &z,
            t: 10,
            cond: &c,
            run_seed: 0,
            lora: &lora,
        };
        assert!(d.predict_noise(&call).is_err());
        assert!(d.predict_noise(&call).is_err());
        assert_eq!(d.counter().total(), 2);
        assert_eq!(d.counter().snapshot()["exposure"], 2);
    }
}
