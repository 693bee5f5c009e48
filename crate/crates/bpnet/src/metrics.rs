//! Depth-completion error metrics. Inverse-depth metrics are computed on
//! raw `1/depth`; with depths in meters, multiply by [`M_TO_KM_INV`] to
//! report them in 1/km. Multi-sample reports average per-sample metrics,
//! not per-pixel pools.

use serde::Serialize;

use crate::{BpError, Result};

pub const DEFAULT_DELTAS: [f64; 3] = [1.25, 1.5625, 1.953125];

/// Converts 1/m inverse-depth errors to 1/km for reporting.
pub const M_TO_KM_INV: f64 = 1000.0;

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub rel: f64,
    /// Inlier ratios for each threshold in `thresholds`.
    pub deltas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub n_valid: usize,
}

/// Metrics over pixels where `gt > 0`. Predictions at those pixels must be
/// positive for the inverse and ratio metrics to be defined.
pub fn compute_metrics(pred: &[f64], gt: &[f64], thresholds: &[f64]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(BpError::Metrics(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut n = 0usize;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ise = 0.0;
    let mut iae = 0.0;
    let mut rel = 0.0;
    let mut inliers = vec![0usize; thresholds.len()];
    for (&p, &g) in pred.iter().zip(gt) {
        if g <= 0.0 {
            continue;
        }
        if !(p.is_finite() && p > 0.0) {
            return Err(BpError::Metrics(format!(
                "non-positive or non-finite prediction {p} at a valid pixel"
            )));
        }
        n += 1;
        let e = p - g;
        se += e * e;
        ae += e.abs();
        let ie = 1.0 / p - 1.0 / g;
        ise += ie * ie;
        iae += ie.abs();
        rel += e.abs() / g;
        let ratio = (p / g).max(g / p);
        for (i, &t) in thresholds.iter().enumerate() {
            if ratio < t {
                inliers[i] += 1;
            }
        }
    }
    if n == 0 {
        return Err(BpError::Metrics("no valid ground-truth pixels".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse: (se / nf).sqrt(),
        mae: ae / nf,
        irmse: (ise / nf).sqrt(),
        imae: iae / nf,
        rel: rel / nf,
        deltas: inliers.iter().map(|&c| c as f64 / nf).collect(),
        thresholds: thresholds.to_vec(),
        n_valid: n,
    })
}

/// Average per-sample reports; every sample must use the same thresholds.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| BpError::Metrics("no reports to average".into()))?;
    if reports
        .iter()
        .any(|r| r.thresholds != first.thresholds)
    {
        return Err(BpError::Metrics("mismatched delta thresholds".into()));
    }
    let nf = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / nf;
    Ok(MetricReport {
        rmse: avg(|r| r.rmse),
        mae: avg(|r| r.mae),
        irmse: avg(|r| r.irmse),
        imae: avg(|r| r.imae),
        rel: avg(|r| r.rel),
        deltas: (0..first.thresholds.len())
            .map(|i| reports.iter().map(|r| r.deltas[i]).sum::<f64>() / nf)
            .collect(),
        thresholds: first.thresholds.clone(),
        n_valid: reports.iter().map(|r| r.n_valid).sum(),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    // Worked example kept as a frozen oracle: pred [2, 4] vs gt [1, 5].
    #[test]
    fn two_pixel_example() {
        let r = compute_metrics(&[2.0, 4.0], &[1.0, 5.0], &[1.25]).unwrap();
        assert_relative_eq!(r.rmse, 1.0);
        assert_relative_eq!(r.mae, 1.0);
        assert_relative_eq!(r.rel, 0.6);
        // inverse errors |1/2 - 1| = 0.5 and |1/4 - 1/5| = 0.05
        assert_relative_eq!(r.irmse, (0.2525f64 / 2.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(r.imae, 0.275);
        assert_relative_eq!(r.deltas[0], 0.0);
        assert_eq!(r.n_valid, 2);
    }

    #[test]
    fn perfect_prediction() {
        let gt = vec![1.0, 2.5, 0.0, 4.0];
        let r = compute_metrics(&gt, &gt, &DEFAULT_DELTAS).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.irmse, 0.0);
        assert_eq!(r.rel, 0.0);
        assert!(r.deltas.iter().all(|&d| d == 1.0));
        assert_eq!(r.n_valid, 3);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let r = compute_metrics(&[9.0, 2.0], &[0.0, 2.0], &DEFAULT_DELTAS).unwrap();
        assert_eq!(r.n_valid, 1);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn empty_and_nonpositive_error() {
        assert!(compute_metrics(&[1.0], &[0.0], &DEFAULT_DELTAS).is_err());
        assert!(compute_metrics(&[0.0], &[1.0], &DEFAULT_DELTAS).is_err());
        assert!(compute_metrics(&[-1.0], &[1.0], &DEFAULT_DELTAS).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0], &DEFAULT_DELTAS).is_err());
    }

    #[test]
    fn per_sample_averaging_differs_from_pooling() {
        let a = compute_metrics(&[2.0], &[1.0], &[1.25]).unwrap();
        let b = compute_metrics(&[5.0, 5.0, 5.0], &[5.0, 5.0, 5.0], &[1.25]).unwrap();
        let avg = average_reports(&[a, b]).unwrap();
        // per-sample mean of MAE: (1 + 0) / 2, not pooled 1/4.
        assert_relative_eq!(avg.mae, 0.5);
        assert_eq!(avg.n_valid, 4);
    }
}
