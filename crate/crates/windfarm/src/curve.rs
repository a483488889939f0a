//! Reference power curve.

use serde::{Deserialize, Serialize};
use std::path::Path;

/// Piecewise curve: zero below cut-in and from cut-out up, cubic between
/// cut-in and rated, flat at rated power in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub cut_in_ms: f64,
    pub rated_ms: f64,
    pub cut_out_ms: f64,
    pub rated_power_kw: f64,
}

impl Default for PowerCurve {
    fn default() -> Self {
        PowerCurve { cut_in_ms: 3.0, rated_ms: 12.0, cut_out_ms: 25.0, rated_power_kw: 2000.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurveError {
    #[error("power curve {0}: {1}")]
    Read(String, String),
    #[error("power curve needs 0 < cut_in < rated < cut_out and rated power > 0")]
    Shape,
}

impl PowerCurve {
    pub fn load(path: &Path) -> Result<Self, CurveError> {
        let text = std::fs::read_to_string(path).map_err(|e| CurveError::Read(path.display().to_string(), e.to_string()))?;
        let curve: PowerCurve =
            serde_json::from_str(&text).map_err(|e| CurveError::Read(path.display().to_string(), e.to_string()))?;
        curve.check()?;
        Ok(curve)
    }

    pub fn check(&self) -> Result<(), CurveError> {
        let ok = 0.0 < self.cut_in_ms
            && self.cut_in_ms < self.rated_ms
            && self.rated_ms < self.cut_out_ms
            && self.rated_power_kw > 0.0;
        if ok { Ok(()) } else { Err(CurveError::Shape) }
    }

    /// Expected output in kW at wind speed `v` (m/s). The analysis script
    /// evaluates the same expression, operation for operation.
    pub fn expected_kw(&self, v: f64) -> f64 {
        if v < self.cut_in_ms || v >= self.cut_out_ms {
            0.0
        } else if v >= self.rated_ms {
            self.rated_power_kw
        } else {
            let lo = self.cut_in_ms * self.cut_in_ms * self.cut_in_ms;
            let hi = self.rated_ms * self.rated_ms * self.rated_ms;
            self.rated_power_kw * (v * v * v - lo) / (hi - lo)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions() {
        let c = PowerCurve::default();
        assert_eq!(c.expected_kw(0.0), 0.0);
        assert_eq!(c.expected_kw(2.99), 0.0);
        assert_eq!(c.expected_kw(3.0), 0.0);
        assert_eq!(c.expected_kw(12.0), 2000.0);
        assert_eq!(c.expected_kw(24.9), 2000.0);
        assert_eq!(c.expected_kw(25.0), 0.0);
        let mid = c.expected_kw(7.5);
        assert!(mid > 0.0 && mid < 2000.0);
    }

    #[test]
    fn monotone_below_rated() {
        let c = PowerCurve::default();
        let mut last = 0.0;
        for i in 0..=120 {
            let p = c.expected_kw(i as f64 / 10.0);
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn shipped_curve_matches_default() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../packs/windfarm/power_curve.json");
        assert_eq!(PowerCurve::load(&path).unwrap(), PowerCurve::default());
    }
}
