use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f32>;

pub const TURBO_LORA: &str = "turbo";
pub const EXPOSURE_LORA: &str = "exposure";

/// Low-rank weight delta `ΔW = A·B` applied with scale `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub name: String,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f32,
}

impl LoraDelta {
    pub fn new(name: impl Into<String>, a: Matrix, b: Matrix, scale: f32) -> Result<Self> {
        let delta = Self {
            name: name.into(),
            a,
            b,
            scale,
        };
        delta.validate()?;
        Ok(delta)
    }

    fn validate(&self) -> Result<()> {
        let (m, d) = self.a.dim();
        let (d2, n) = self.b.dim();
        if d != d2 {
            return Err(Error::invalid(format!(
                "adapter {:?}: A is {m}x{d} but B is {d2}x{n}",
                self.name
            )));
        }
        if d > m.min(n) {
            return Err(Error::invalid(format!(
                "adapter {:?}: rank {d} exceeds min({m}, {n})",
                self.name
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::invalid(format!(
                "adapter {:?}: scale is not finite",
                self.name
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// One closed interval `[t_low, t_high]` of timesteps served by adapter `name`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapInterval {
    pub t_low: usize,
    pub t_high: usize,
    pub name: String,
}

/// Timestep → active adapter, backed by a lookup table over `[1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapSchedule {
    intervals: Vec<SwapInterval>,
    t_max: usize,
    table: Vec<usize>,
}

impl SwapSchedule {
    /// Intervals must be disjoint and together cover `[1, t_max]` exactly.
    pub fn new(intervals: Vec<SwapInterval>, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("swap schedule needs T ≥ 1"));
        }
        const UNSET: usize = usize::MAX;
        let mut table = vec![UNSET; t_max + 1];
        for (k, iv) in intervals.iter().enumerate() {
            if iv.t_low < 1 || iv.t_low > iv.t_high || iv.t_high > t_max {
                return Err(Error::invalid(format!(
                    "swap interval [{}, {}] invalid for T={t_max}",
                    iv.t_low, iv.t_high
                )));
            }
            for slot in &mut table[iv.t_low..=iv.t_high] {
                if *slot != UNSET {
                    return Err(Error::invalid(format!(
                        "swap interval [{}, {}] overlaps another",
                        iv.t_low, iv.t_high
                    )));
                }
                *slot = k;
            }
        }
        if let Some(t) = (1..=t_max).find(|&t| table[t] == UNSET) {
            return Err(Error::invalid(format!(
                "timestep {t} not covered by swap schedule"
            )));
        }
        Ok(Self {
            intervals,
            t_max,
            table,
        })
    }

    /// A single adapter for every timestep.
    pub fn constant(name: &str, t_max: usize) -> Result<Self> {
        Self::new(
            vec![SwapInterval {
                t_low: 1,
                t_high: t_max,
                name: name.to_string(),
            }],
            t_max,
        )
    }

    /// `[threshold_t, T]` → turbo, `[1, threshold_t − 1]` → exposure.
    pub fn turbo_then_exposure(threshold_t: usize, t_max: usize) -> Result<Self> {
        if threshold_t <= 1 || threshold_t > t_max {
            return Err(Error::invalid(format!(
                "swap threshold {threshold_t} must lie in [2, {t_max}]"
            )));
        }
        Self::new(
            vec![
                SwapInterval {
                    t_low: threshold_t,
                    t_high: t_max,
                    name: TURBO_LORA.to_string(),
                },
                SwapInterval {
                    t_low: 1,
                    t_high: threshold_t - 1,
                    name: EXPOSURE_LORA.to_string(),
                },
            ],
            t_max,
        )
    }

    pub fn intervals(&self) -> &[SwapInterval] {
        &self.intervals
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Adapter active at `t`. The terminal `t = 0` update inherits the adapter
    /// of `t = 1`.
    pub fn active_at(&self, t: usize) -> Result<&str> {
        if t > self.t_max {
            return Err(Error::OutOfRange(format!(
                "timestep {t} beyond swap schedule T={}",
                self.t_max
            )));
        }
        let k = self.table[t.max(1)];
        Ok(&self.intervals[k].name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.intervals.iter().map(|iv| iv.name.as_str())
    }
}

/// Base weight, named deltas and the swap schedule choosing between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraStack {
    w_base: Matrix,
    deltas: BTreeMap<String, LoraDelta>,
    schedule: SwapSchedule,
}

impl LoraStack {
    pub fn new(w_base: Matrix, deltas: Vec<LoraDelta>, schedule: SwapSchedule) -> Result<Self> {
        let (m, n) = w_base.dim();
        let mut by_name = BTreeMap::new();
        for delta in deltas {
            delta.validate()?;
            if delta.output_dim() != m || delta.input_dim() != n {
                return Err(Error::invalid(format!(
                    "adapter {:?} is {}x{} but base weight is {m}x{n}",
                    delta.name,
                    delta.output_dim(),
                    delta.input_dim()
                )));
            }
            if by_name.insert(delta.name.clone(), delta).is_some() {
                return Err(Error::invalid("duplicate adapter name"));
            }
        }
        for name in schedule.names() {
            if !by_name.contains_key(name) {
                return Err(Error::invalid(format!(
                    "swap schedule references unknown adapter {name:?}"
                )));
            }
        }
        Ok(Self {
            w_base,
            deltas: by_name,
            schedule,
        })
    }

    pub fn w_base(&self) -> &Matrix {
        &self.w_base
    }

    pub fn delta(&self, name: &str) -> Option<&LoraDelta> {
        self.deltas.get(name)
    }

    pub fn deltas(&self) -> impl Iterator<Item = &LoraDelta> {
        self.deltas.values()
    }

    pub fn schedule(&self) -> &SwapSchedule {
        &self.schedule
    }

    /// `W + α·A·B` for the named delta.
    pub fn compose_named(&self, name: &str) -> Result<Matrix> {
        let delta = self
            .deltas
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown adapter {name:?}")))?;
        let ab = delta.a.dot(&delta.b);
        Ok(&self.w_base + &(ab * delta.scale))
    }
}

/// Composed weight matrix active at timestep `t`.
pub fn compose_lora(stack: &LoraStack, t: usize) -> Result<Matrix> {
    stack.compose_named(stack.schedule.active_at(t)?)
}

/// JSON form of a [`LoraStack`]; matrices are row lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraStackConfig {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub w_base: Vec<Vec<f32>>,
    pub deltas: Vec<LoraDeltaConfig>,
    pub swap: Vec<SwapInterval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraDeltaConfig {
    pub name: String,
    pub a: Vec<Vec<f32>>,
    pub b: Vec<Vec<f32>>,
    #[serde(default = "default_scale")]
    pub scale: f32,
}

fn default_scale() -> f32 {
    0.75
}

fn rows_to_matrix(what: &str, rows: &[Vec<f32>]) -> Result<Matrix> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::invalid(format!(
            "{what}: matrix rows must be non-empty and equal length"
        )));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n_rows, n_cols), flat)
        .map_err(|e| Error::invalid(format!("{what}: {e}")))
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f32>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl LoraStackConfig {
    pub fn build(&self) -> Result<LoraStack> {
        let w = rows_to_matrix("w_base", &self.w_base)?;
        let deltas = self
            .deltas
            .iter()
            .map(|d| {
                LoraDelta::new(
                    d.name.clone(),
                    rows_to_matrix(&d.name, &d.a)?,
                    rows_to_matrix(&d.name, &d.b)?,
                    d.scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        LoraStack::new(w, deltas, SwapSchedule::new(self.swap.clone(), self.t_max)?)
    }

    pub fn from_stack(stack: &LoraStack) -> Self {
        Self {
            t_max: stack.schedule.t_max,
            w_base: matrix_to_rows(&stack.w_base),
            deltas: stack
                .deltas()
                .map(|d| LoraDeltaConfig {
                    name: d.name.clone(),
                    a: matrix_to_rows(&d.a),
                    b: matrix_to_rows(&d.b),
                    scale: d.scale,
                })
                .collect(),
            swap: stack.schedule.intervals.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn naive(w: &Matrix, a: &Matrix, b: &Matrix, scale: f32) -> Vec<f64> {
        let (m, n) = w.dim();
        let d = a.ncols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += a[[i, k]] as f64 * b[[k, j]] as f64;
                }
                out[i * n + j] = w[[i, j]] as f64 + scale as f64 * acc;
            }
        }
        out
    }

    fn two_delta_stack(scale: f32) -> LoraStack {
        let w = Matrix::zeros((2, 2));
        let turbo =
            LoraDelta::new(TURBO_LORA, array![[1.0], [0.0]], array![[0.0, 1.0]], scale).unwrap();
        let expo = LoraDelta::new(
            EXPOSURE_LORA,
            array![[0.0], [1.0]],
            array![[1.0, 0.0]],
            scale,
        )
        .unwrap();
        LoraStack::new(
            w,
            vec![turbo, expo],
            SwapSchedule::turbo_then_exposure(800, 1000).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rank_one_hand_product() {
        let w = compose_lora(&two_delta_stack(2.0), 900).unwrap();
        assert_eq!(w, array![[0.0, 2.0], [0.0, 0.0]]);
    }

    #[test]
    fn zero_scale_returns_base() {
        let w = compose_lora(&two_delta_stack(0.0), 500).unwrap();
        assert_eq!(w, Matrix::zeros((2, 2)));
    }

    #[test]
    fn default_schedule_boundary() {
        let s = SwapSchedule::turbo_then_exposure(800, 1000).unwrap();
        assert_eq!(s.active_at(900).unwrap(), TURBO_LORA);
        assert_eq!(s.active_at(800).unwrap(), TURBO_LORA);
        assert_eq!(s.active_at(799).unwrap(), EXPOSURE_LORA);
        assert_eq!(s.active_at(1).unwrap(), EXPOSURE_LORA);
        assert_eq!(s.active_at(0).unwrap(), EXPOSURE_LORA);
        assert!(s.active_at(1001).is_err());
    }

    #[test]
    fn schedule_rejects_gaps_and_overlaps() {
        let iv = |lo, hi| SwapInterval {
            t_low: lo,
            t_high: hi,
            name: "x".into(),
        };
        assert!(SwapSchedule::new(vec![iv(1, 5), iv(7, 10)], 10).is_err());
        assert!(SwapSchedule::new(vec![iv(1, 6), iv(6, 10)], 10).is_err());
        assert!(SwapSchedule::new(vec![iv(0, 10)], 10).is_err());
        assert!(SwapSchedule::new(vec![iv(1, 10)], 10).is_ok());
    }

    #[test]
    fn unknown_adapter_rejected() {
        let w = Matrix::zeros((2, 2));
        assert!(
            LoraStack::new(w, vec![], SwapSchedule::constant("exposure", 10).unwrap()).is_err()
        );
    }

    #[test]
    fn rank_above_min_dim_rejected() {
        assert!(LoraDelta::new("x", Matrix::zeros((2, 3)), Matrix::zeros((3, 2)), 1.0).is_err());
        assert!(LoraDelta::new("x", Matrix::zeros((2, 1)), Matrix::zeros((2, 2)), 1.0).is_err());
        assert!(
            LoraDelta::new("x", Matrix::zeros((2, 1)), Matrix::zeros((1, 2)), f32::NAN).is_err()
        );
    }

    #[test]
    fn config_roundtrip() {
        let stack = two_delta_stack(0.75);
        let json = serde_json::to_string(&LoraStackConfig::from_stack(&stack)).unwrap();
        let back: LoraStackConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), stack);
        assert!(serde_json::from_str::<LoraStackConfig>(
            r#"{"T":1,"w_base":[[1]],"deltas":[],"swap":[],"extra":1}"#
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn composed_matches_triple_loop(
            m in 1usize..6, n in 1usize..6, seed in any::<u64>(), scale in -2.0f32..2.0,
        ) {
            let d = 1 + (seed as usize % m.min(n));
            let mut rng = crate::rng::SeededRng::new(seed);
            let mut mat = |r, c| Matrix::from_shape_fn((r, c), |_| rng.next_normal() as f32);
            let (w, a, b) = (mat(m, n), mat(m, d), mat(d, n));
            let delta = LoraDelta::new("exposure", a.clone(), b.clone(), scale).unwrap();
            let stack = LoraStack::new(w.clone(), vec![delta], SwapSchedule::constant("exposure", 10).unwrap()).unwrap();
            let got = compose_lora(&stack, 3).unwrap();
            for (g, r) in got.iter().zip(naive(&w, &a, &b, scale)) {
                prop_assert!((*g as f64 - r).abs() <= 1e-5 * r.abs().max(1.0));
            }
        }
    }
}
