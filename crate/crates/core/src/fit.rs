//! Small dense Levenberg–Marquardt least squares for few-parameter models.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("fit diverged: {0}")]
    FitDiverged(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOutcome<const P: usize> {
    pub params: [f64; P],
    /// Root of the residual sum of squares.
    pub residual: f64,
    pub iterations: usize,
}

/// Minimizes `Σ (model(p, x_i) - y_i)²`.
///
/// `model` returns the prediction and its gradient with respect to `p`.
pub fn levenberg_marquardt<const P: usize, F>(
    model: F,
    xs: &[f64],
    ys: &[f64],
    start: [f64; P],
    max_iter: usize,
) -> Result<LmOutcome<P>, FitError>
where
    F: Fn(&[f64; P], f64) -> (f64, [f64; P]),
{
    let sse = |p: &[f64; P]| -> f64 { xs.iter().zip(ys).map(|(&x, &y)| (model(p, x).0 - y).powi(2)).sum() };
    let mut p = start;
    let mut cost = sse(&p);
    if !cost.is_finite() {
        return Err(FitError::FitDiverged("non-finite residual at the starting point".into()));
    }
    let mut lambda = 1e-3;
    for iter in 0..max_iter {
        let mut jtj = DMatrix::<f64>::zeros(P, P);
        let mut jtr = DVector::<f64>::zeros(P);
        for (&x, &y) in xs.iter().zip(ys) {
            let (f, g) = model(&p, x);
            let g = DVector::<f64>::from_row_slice(&g);
            jtj += &g * g.transpose();
            jtr += &g * (y - f);
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..P {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p;
            for i in 0..P {
                trial[i] += step[i];
            }
            let trial_cost = sse(&trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel = (cost - trial_cost) / cost.max(1e-300);
                let step_small = (0..P).all(|i| step[i].abs() <= 1e-12 * (p[i].abs() + 1e-12));
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel < 1e-15 || step_small || cost == 0.0 {
                    return Ok(LmOutcome { params: p, residual: cost.sqrt(), iterations: iter + 1 });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no downhill step exists at any damping: converged
            return Ok(LmOutcome { params: p, residual: cost.sqrt(), iterations: iter + 1 });
        }
    }
    if p.iter().all(|v| v.is_finite()) {
        Ok(LmOutcome { params: p, residual: cost.sqrt(), iterations: max_iter })
    } else {
        Err(FitError::FitDiverged("non-finite parameters".into()))
    }
}
