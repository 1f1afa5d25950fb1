//! Scale-invariant image error measures for comparing lighting estimates.

use crate::error::{Error, Result};
use crate::tensor::{percentile, Tensor};

/// Prediction and ground truth of equal shape with finite values.
#[derive(Debug, Clone, Copy)]
pub struct ScorePair<'a> {
    pub pred: &'a Tensor,
    pub gt: &'a Tensor,
}

impl<'a> ScorePair<'a> {
    pub fn new(pred: &'a Tensor, gt: &'a Tensor) -> Result<Self> {
        pred.ensure_same_shape(gt)?;
        if !pred.is_finite() || !gt.is_finite() {
            return Err(Error::Numerical("non-finite values in score pair".into()));
        }
        Ok(Self { pred, gt })
    }
}

/// RMSE after scaling `pred` by the single least-squares factor
/// `s* = ⟨pred, gt⟩ / ⟨pred, pred⟩` shared by all channels.
pub fn si_rmse(p: &ScorePair<'_>) -> Result<f64> {
    if p.gt.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical("ground truth is all zero".into()));
    }
    let (mut pg, mut pp) = (0.0f64, 0.0f64);
    for (&a, &b) in p.pred.data().iter().zip(p.gt.data()) {
        pg += a as f64 * b as f64;
        pp += a as f64 * a as f64;
    }
    let s = if pp == 0.0 { 0.0 } else { pg / pp };
    let sq: f64 = p
        .pred
        .data()
        .iter()
        .zip(p.gt.data())
        .map(|(&a, &b)| (s * a as f64 - b as f64).powi(2))
        .sum();
    Ok((sq / p.pred.len() as f64).sqrt())
}

/// Mean per-pixel angle, in degrees, between RGB vectors. A pixel where both
/// vectors are zero scores 0°, a pixel where exactly one is zero scores 90°.
pub fn angular_error_deg(p: &ScorePair<'_>) -> Result<f64> {
    if p.pred.channels() != 3 {
        return Err(Error::invalid("angular error needs 3-channel images"));
    }
    let n = p.pred.height() * p.pred.width();
    if n == 0 {
        return Err(Error::invalid("empty images"));
    }
    let (a, b) = (p.pred, p.gt);
    let mut total = 0.0f64;
    for k in 0..n {
        let u = [0, 1, 2].map(|c| a.plane(c)[k] as f64);
        let v = [0, 1, 2].map(|c| b.plane(c)[k] as f64);
        let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        total += match (nu == 0.0, nv == 0.0) {
            (true, true) => 0.0,
            (true, false) | (false, true) => 90.0,
            // atan2(|u×v|, u·v) equals arccos of the clipped cosine but stays
            // accurate for nearly parallel vectors.
            _ => {
                let cross = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
                let cos = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                sin.atan2(cos).to_degrees()
            }
        };
    }
    Ok(total / n as f64)
}

/// Maps the 0.1st and 99.9th percentiles of `x` to 0 and 1, without clamping.
fn percentile_normalize(x: &Tensor) -> Result<Vec<f64>> {
    let lo = percentile(x.data(), 0.1)?;
    let hi = percentile(x.data(), 99.9)?;
    if !(hi > lo) {
        return Err(Error::Numerical(
            "image has a degenerate percentile range".into(),
        ));
    }
    let span = hi - lo;
    Ok(x.data().iter().map(|&v| (v as f64 - lo) / span).collect())
}

/// RMSE between the two images after independent percentile normalization.
pub fn normalized_rmse(p: &ScorePair<'_>) -> Result<f64> {
    let a = percentile_normalize(p.pred)?;
    let b = percentile_normalize(p.gt)?;
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(shape: [usize; 3], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn si_rmse_cases() {
        let gt = t([3, 1, 2], &[0.1, 0.5, 2.0, 0.3, 1.0, 0.7]);
        assert_eq!(si_rmse(&ScorePair::new(&gt, &gt).unwrap()).unwrap(), 0.0);
        let scaled = gt.scale(3.7);
        assert!(si_rmse(&ScorePair::new(&scaled, &gt).unwrap()).unwrap() < 1e-7);
        let (a, b) = (t([1, 1, 2], &[1.0, 0.0]), t([1, 1, 2], &[0.0, 1.0]));
        let v = si_rmse(&ScorePair::new(&a, &b).unwrap()).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        let z = Tensor::zeros([1, 1, 2]);
        assert!(si_rmse(&ScorePair::new(&a, &z).unwrap()).is_err());
        assert!(ScorePair::new(&a, &gt).is_err());
    }

    #[test]
    fn angular_cases() {
        let a = t([3, 1, 1], &[1.0, 0.0, 0.0]);
        let b = t([3, 1, 1], &[0.0, 1.0, 0.0]);
        assert!(
            (angular_error_deg(&ScorePair::new(&a, &b).unwrap()).unwrap() - 90.0).abs() < 1e-12
        );
        let c = t([3, 1, 1], &[1.0, 1.0, 0.0]);
        assert!((angular_error_deg(&ScorePair::new(&c, &a).unwrap()).unwrap() - 45.0).abs() < 1e-9);
        let z = Tensor::zeros([3, 1, 1]);
        assert_eq!(
            angular_error_deg(&ScorePair::new(&z, &z).unwrap()).unwrap(),
            0.0
        );
        assert_eq!(
            angular_error_deg(&ScorePair::new(&z, &a).unwrap()).unwrap(),
            90.0
        );
        let scaled = c.scale(5.0);
        assert!(angular_error_deg(&ScorePair::new(&scaled, &c).unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn normalized_cases() {
        let gt = t([1, 1, 4], &[0.0, 1.0, 5.0, 2.0]);
        assert_eq!(
            normalized_rmse(&ScorePair::new(&gt, &gt).unwrap()).unwrap(),
            0.0
        );
        let affine = gt.map(|v| 2.0 * v + 3.0);
        assert!(normalized_rmse(&ScorePair::new(&affine, &gt).unwrap()).unwrap() < 1e-9);
        let flat = Tensor::full([1, 1, 4], 2.0);
        assert!(normalized_rmse(&ScorePair::new(&gt, &flat).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn angular_is_symmetric(a in proptest::collection::vec(0.0f32..5.0, 12), b in proptest::collection::vec(0.0f32..5.0, 12)) {
            let (x, y) = (t([3, 2, 2], &a), t([3, 2, 2], &b));
            let ab = angular_error_deg(&ScorePair::new(&x, &y).unwrap()).unwrap();
            let ba = angular_error_deg(&ScorePair::new(&y, &x).unwrap()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }
}
