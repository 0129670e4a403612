//! Monotone piecewise-linear map from virtual image distance `a` to object depth `w`.

use crate::error::{config, Result};
use crate::geometry::{CameraModel, DepthRange};
use crate::simulator::object_to_virtual;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthCalibration {
    /// `(a_mm, w_mm)` knots with strictly increasing `a`.
    knots: Vec<(f64, f64)>,
    w_increasing: bool,
}

/// Result of evaluating the calibration; `clamped` is set when `a` fell
/// outside the knot range and the end value was returned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedDepth {
    pub w_mm: f64,
    pub clamped: bool,
}

impl DepthCalibration {
    /// Fits the calibration to measured `(a_mm, w_mm)` pairs.
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.len() < 2 {
            return config("calibration needs at least 2 (a, w) pairs");
        }
        if pairs.iter().any(|(a, w)| !a.is_finite() || !w.is_finite()) {
            return config("calibration pairs must be finite");
        }
        let mut knots = pairs.to_vec();
        knots.sort_by(|x, y| x.0.total_cmp(&y.0));
        for win in knots.windows(2) {
            if win[0].0 == win[1].0 {
                return config(format!(
                    "duplicate virtual distance a = {} mm in calibration",
                    win[0].0
                ));
            }
        }
        let w_increasing = knots[1].1 > knots[0].1;
        for (i, win) in knots.windows(2).enumerate() {
            let ok = if w_increasing {
                win[1].1 > win[0].1
            } else {
                win[1].1 < win[0].1
            };
            if !ok {
                return config(format!(
                    "calibration is not monotone at pair {} (a = {} mm, w = {} mm) after (a = {} mm, w = {} mm)",
                    i + 1,
                    win[1].0,
                    win[1].1,
                    win[0].0,
                    win[0].1
                ));
            }
        }
        Ok(Self {
            knots,
            w_increasing,
        })
    }

    /// Calibration pairs generated from the camera's thin-lens model over
    /// `range` at `step_mm` intervals (end point always included).
    pub fn from_camera(camera: &CameraModel, range: DepthRange, step_mm: f64) -> Result<Self> {
        if !(step_mm > 0.0) {
            return config("calibration step must be positive");
        }
        let n = (range.span() / step_mm).round().max(1.0) as usize;
        let mut pairs = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let w = (range.min_mm + i as f64 * step_mm).min(range.max_mm);
            pairs.push((object_to_virtual(w, &camera.optics)? * 1e-3, w));
        }
        if pairs.last().map(|p| p.1) != Some(range.max_mm) {
            pairs.push((
                object_to_virtual(range.max_mm, &camera.optics)? * 1e-3,
                range.max_mm,
            ));
        }
        pairs.dedup_by(|x, y| x.1 == y.1);
        Self::fit(&pairs)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn w_increasing(&self) -> bool {
        self.w_increasing
    }

    /// Valid interval of `a` (mm).
    pub fn valid_range(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[self.knots.len() - 1].0)
    }

    pub fn eval(&self, a_mm: f64) -> CalibratedDepth {
        let (lo, hi) = self.valid_range();
        let k = &self.knots;
        if a_mm <= lo {
            return CalibratedDepth {
                w_mm: k[0].1,
                clamped: a_mm < lo,
            };
        }
        if a_mm >= hi {
            return CalibratedDepth {
                w_mm: k[k.len() - 1].1,
                clamped: a_mm > hi,
            };
        }
        let i = k.partition_point(|p| p.0 <= a_mm) - 1;
        let (a0, w0) = k[i];
        let (a1, w1) = k[i + 1];
        let t = (a_mm - a0) / (a1 - a0);
        CalibratedDepth {
            w_mm: w0 + t * (w1 - w0),
            clamped: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn thin_lens_round_trip() {
        let cam = CameraModel::default();
        let cal = DepthCalibration::from_camera(&cam, DepthRange::new(62.5, 67.5), 0.5).unwrap();
        assert_eq!(cal.knots().len(), 11);
        // w -> a (thin lens, independent of the calibration) -> w_hat.
        for i in 0..=20 {
            let w = 62.5 + 0.25 * i as f64;
            let a = object_to_virtual(w, &cam.optics).unwrap() * 1e-3;
            let got = cal.eval(a);
            assert!(!got.clamped);
            let tol = if i % 2 == 0 { 0.02 } else { 0.05 };
            assert!((got.w_mm - w).abs() < tol, "w={w} got {}", got.w_mm);
            if i % 2 == 0 {
                assert!((got.w_mm - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_knots_interpolate_linearly() {
        let cal = DepthCalibration::fit(&[(4.0, 66.0), (3.0, 64.0)]).unwrap();
        assert!(cal.w_increasing());
        assert!((cal.eval(3.25).w_mm - 64.5).abs() < 1e-12);
        let c = cal.eval(5.0);
        assert!(c.clamped && c.w_mm == 66.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(DepthCalibration::fit(&[(1.0, 2.0)]).is_err());
        assert!(DepthCalibration::fit(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        let err = DepthCalibration::fit(&[(1.0, 2.0), (2.0, 3.0), (3.0, 2.5)]).unwrap_err();
        assert!(err.to_string().contains("a = 3"), "{err}");
    }

    proptest! {
        #[test]
        fn monotone_between_knots(a in 3.0f64..5.5, b in 3.0f64..5.5) {
            let cam = CameraModel::default();
            let cal = DepthCalibration::from_camera(&cam, DepthRange::new(62.5, 67.5), 0.5).unwrap();
            let (wa, wb) = (cal.eval(a).w_mm, cal.eval(b).w_mm);
            // w decreases with a for this optics.
            if a < b { prop_assert!(wa >= wb); } else { prop_assert!(wa <= wb); }
        }
    }
}
