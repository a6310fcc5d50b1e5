use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// False-alarm ratio.
    pub fa: f64,
    pub pd: f64,
}

/// Area under Pd over `[0, cutoff]` of Fa, divided by `cutoff`, with Fa
/// expressed in units of 1e-6 (`cutoff = 0.5` means Fa = 0.5e-6).
///
/// `points` are `(fa, pd)` with `fa` in the same units. The curve starts at
/// `(0, 0)` unless a point with Fa 0 exists, is interpolated linearly at the
/// cutoff and held flat past its last point.
pub fn auc_truncated(points: &[(f64, f64)], cutoff: f64) -> Result<f64> {
    if !(cutoff > 0.0) {
        return Err(Error::Config(format!(
            "AUC cutoff must be > 0, got {cutoff}"
        )));
    }
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if pts.first().is_none_or(|p| p.0 > 0.0) {
        pts.insert(0, (0.0, 0.0));
    }
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cutoff {
            break;
        }
        if x1 > cutoff {
            let y = y0 + (y1 - y0) * (cutoff - x0) / (x1 - x0);
            area += 0.5 * (y0 + y) * (cutoff - x0);
            return Ok(area / cutoff);
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
    }
    let (last_x, last_y) = *pts.last().expect("nonempty");
    if last_x < cutoff {
        area += last_y * (cutoff - last_x);
    }
    Ok(area / cutoff)
}

/// Truncated AUC of an ROC sweep, converting Fa to units of 1e-6.
pub fn roc_auc(points: &[RocPoint], cutoff: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fa * 1e6, p.pd)).collect();
    auc_truncated(&pts, cutoff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_curves() {
        let three = [(0.0, 0.0), (0.25, 0.5), (0.5, 1.0)];
        assert!((auc_truncated(&three, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(auc_truncated(&[(0.0, 1.0), (3.0, 1.0)], 0.5).unwrap(), 1.0);
        assert_eq!(auc_truncated(&[(0.0, 1.0)], 1.0).unwrap(), 1.0);
        assert_eq!(auc_truncated(&[(0.0, 0.0)], 0.5).unwrap(), 0.0);
        assert!(auc_truncated(&three, 0.0).is_err());
    }

    #[test]
    fn interpolates_at_cutoff() {
        let a = auc_truncated(&[(0.0, 0.0), (1.0, 1.0)], 0.5).unwrap();
        assert!((a - 0.25).abs() < 1e-15);
    }
}
