//! Online kernel bandwidth selection, one bandwidth per measurement dimension.
//!
//! `σ̂_μ = 1 / (y_μ² / R̂_μμ + H_μ P⁻ H_μᵀ)`, clamped to `[σ_min, σ_max]`.
//! A healthy dimension (small normalised innovation) gets a wide kernel and a
//! weight near one; an outlier shrinks its own kernel and is suppressed.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub const DEFAULT_MIN: f64 = 1e-3;
pub const DEFAULT_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for BandwidthBounds {
    fn default() -> Self {
        BandwidthBounds {
            min: DEFAULT_MIN,
            max: DEFAULT_MAX,
        }
    }
}

impl BandwidthBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0) || !(max >= min) || !max.is_finite() {
            return Err(Error::config(
                "sigma_min/sigma_max",
                format!("need 0 < min <= max < inf, got [{min}, {max}]"),
            ));
        }
        Ok(BandwidthBounds { min, max })
    }

    fn clamp(&self, s: f64) -> f64 {
        // NaN (0/0 cannot happen, but inf·0 upstream could) maps to the cap
        if s.is_nan() {
            self.max
        } else {
            s.clamp(self.min, self.max)
        }
    }
}

/// Adaptive bandwidth from the pre-update innovation, the previous `R̂`, the
/// observation Jacobian and the predicted covariance.
pub fn adapt_bandwidth(
    innovation: &DVector<f64>,
    previous_noise: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    predicted_covariance: &DMatrix<f64>,
    bounds: BandwidthBounds,
) -> DVector<f64> {
    let m = innovation.len();
    let hp = jacobian * predicted_covariance;
    DVector::from_fn(m, |mu, _| {
        let projected = hp.row(mu).dot(&jacobian.row(mu));
        let normalised = innovation[mu] * innovation[mu] / previous_noise[(mu, mu)];
        // projected can only be negative through rounding on a PSD P
        bounds.clamp(1.0 / (normalised + projected.max(0.0)))
    })
}

/// How the bandwidth of a sensor is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthMode {
    /// Same fixed bandwidth for every dimension.
    Static(f64),
    Adaptive(BandwidthBounds),
}

impl Default for BandwidthMode {
    fn default() -> Self {
        BandwidthMode::Adaptive(BandwidthBounds::default())
    }
}

/// Per-sensor bandwidth vector with its update policy.
#[derive(Debug, Clone)]
pub struct BandwidthState {
    sigma: DVector<f64>,
    mode: BandwidthMode,
}

impl BandwidthState {
    pub fn new(dim: usize, mode: BandwidthMode) -> Self {
        let initial = match mode {
            BandwidthMode::Static(s) => s,
            BandwidthMode::Adaptive(b) => b.max,
        };
        BandwidthState {
            sigma: DVector::from_element(dim, initial),
            mode,
        }
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn mode(&self) -> BandwidthMode {
        self.mode
    }

    /// Recompute the bandwidth before a correction.
    pub fn update(
        &mut self,
        innovation: &DVector<f64>,
        previous_noise: &DMatrix<f64>,
        jacobian: &DMatrix<f64>,
        predicted_covariance: &DMatrix<f64>,
    ) -> &DVector<f64> {
        if let BandwidthMode::Adaptive(bounds) = self.mode {
            self.sigma = adapt_bandwidth(
                innovation,
                previous_noise,
                jacobian,
                predicted_covariance,
                bounds,
            );
        }
        &self.sigma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::correntropy_weights;
    use proptest::prelude::*;

    fn unclamped() -> BandwidthBounds {
        BandwidthBounds {
            min: f64::MIN_POSITIVE,
            max: f64::MAX,
        }
    }

    fn scalar(y: f64, r: f64, hph: f64, bounds: BandwidthBounds) -> f64 {
        adapt_bandwidth(
            &DVector::from_element(1, y),
            &DMatrix::from_element(1, 1, r),
            &DMatrix::identity(1, 1),
            &DMatrix::from_element(1, 1, hph),
            bounds,
        )[0]
    }

    #[test]
    fn zero_innovation_is_reciprocal_of_projected_covariance() {
        assert_eq!(scalar(0.0, 1.0, 0.25, unclamped()), 4.0);
    }

    #[test]
    fn direct_arithmetic_case() {
        // 1/0.5 + 1 = 3
        assert!((scalar(1.0, 0.5, 1.0, unclamped()) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn large_innovation_hits_floor() {
        let b = BandwidthBounds::default();
        assert_eq!(scalar(1e4, 1.0, 0.1, b), b.min);
    }

    #[test]
    fn degenerate_inputs_are_clamped() {
        let b = BandwidthBounds::default();
        assert_eq!(scalar(0.0, 1.0, 0.0, b), b.max);
    }

    #[test]
    fn rows_use_their_own_jacobian_row() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let s = adapt_bandwidth(
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            &h,
            &p,
            unclamped(),
        );
        assert!((s[0] - 1.0).abs() < 1e-15);
        // [1 1] P [1 1]ᵀ = 1 + 0.5 + 0.5 + 2 = 4
        assert!((s[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn static_mode_ignores_data() {
        let mut state = BandwidthState::new(3, BandwidthMode::Static(2.5));
        state.update(
            &DVector::from_element(3, 100.0),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
        );
        assert!(state.sigma().iter().all(|&s| s == 2.5));
    }

    proptest! {
        #[test]
        fn always_positive(y in -1e8f64..1e8, r in 1e-9f64..1e6, hph in 0.0f64..1e6) {
            prop_assert!(scalar(y, r, hph, BandwidthBounds::default()) > 0.0);
        }

        #[test]
        fn non_increasing_in_innovation_magnitude(
            a in 0.0f64..1e4, b in 0.0f64..1e4, r in 1e-6f64..1e3, hph in 0.0f64..1e3,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let bounds = BandwidthBounds::default();
            prop_assert!(scalar(hi, r, hph, bounds) <= scalar(lo, r, hph, bounds));
        }

        #[test]
        fn healthy_dimension_saturates_kernel(y in -1e-4f64..1e-4, hph in 1e-3f64..1.0) {
            let r = DMatrix::from_element(1, 1, 0.01);
            let yv = DVector::from_element(1, y);
            let sigma = adapt_bandwidth(
                &yv, &r, &DMatrix::identity(1, 1), &DMatrix::from_element(1, 1, hph),
                BandwidthBounds::default(),
            );
            let w = correntropy_weights(&yv, &r, &sigma);
            prop_assert!(w.weighted[0] > 0.99);
            prop_assert!(w.unweighted[0] > 0.99);
        }
    }
}
