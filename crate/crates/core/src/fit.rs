//! Least-squares power-law fits on log–log data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("too few points for a fit: {got} (need {need})")]
    TooFewPoints { got: usize, need: usize },
    #[error("non-positive or non-finite value at point {0}")]
    BadValue(usize),
    #[error("abscissae are all equal")]
    Degenerate,
}

/// `log y ≈ intercept + slope·log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in natural-log units.
    pub residual: f64,
    pub points: usize,
}

impl LineFit {
    /// Fitted constant `C` in `y ≈ C x^slope`.
    pub fn constant(&self) -> f64 {
        self.intercept.exp()
    }

    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

pub fn fit_loglog(xs: &[f64], ys: &[f64], min_points: usize) -> Result<LineFit, FitError> {
    let n = xs.len().min(ys.len());
    if n < min_points.max(2) {
        return Err(FitError::TooFewPoints { got: n, need: min_points.max(2) });
    }
    let mut lx = Vec::with_capacity(n);
    let mut ly = Vec::with_capacity(n);
    for i in 0..n {
        if !(xs[i] > 0.0 && ys[i] > 0.0 && xs[i].is_finite() && ys[i].is_finite()) {
            return Err(FitError::BadValue(i));
        }
        lx.push(xs[i].ln());
        ly.push(ys[i].ln());
    }
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FitError::Degenerate);
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(LineFit { slope, intercept, residual: (rss / n as f64).sqrt(), points: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power_law() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.25)).collect();
        let f = fit_loglog(&xs, &ys, 4).unwrap();
        assert!((f.slope + 1.25).abs() < 1e-12);
        assert!((f.constant() - 3.0).abs() < 1e-10);
        assert!(f.residual < 1e-12);
    }

    #[test]
    fn rejects_short_or_bad_input() {
        assert!(matches!(fit_loglog(&[1.0], &[1.0], 2), Err(FitError::TooFewPoints { .. })));
        assert!(matches!(fit_loglog(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 1.0, 1.0], 4), Err(FitError::BadValue(1))));
        assert!(matches!(fit_loglog(&[2.0, 2.0], &[1.0, 3.0], 2), Err(FitError::Degenerate)));
    }

    proptest! {
        #[test]
        fn refit_is_bit_identical(a in -3.0f64..3.0, c in 0.1f64..10.0, noise in prop::collection::vec(-0.1f64..0.1, 5)) {
            let xs: Vec<f64> = (0..5).map(|k| 2f64.powi(k + 2)).collect();
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| c * x.powf(a) * e.exp()).collect();
            let f1 = fit_loglog(&xs, &ys, 4).unwrap();
            let f2 = fit_loglog(&xs, &ys, 4).unwrap();
            prop_assert_eq!(f1, f2);
            prop_assert!((f1.slope - a).abs() < 0.2);
        }
    }
}
