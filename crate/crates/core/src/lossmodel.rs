//! Expected-loss modelling and convergence-bound calculators.
//!
//! The expected learning loss after training on `n` samples is modelled as
//! the power law `a * n^(-b)`. The bound on the optimality gap after `t`
//! rounds with data-deficit factor `alpha = ((D - |X|)/D)^2` is
//!
//! ```text
//! (4 xi2 alpha)^t (C + 2 alpha xi1 / ((1 - 4 xi2 alpha) L)) + 2 alpha xi1 / ((1 - 4 xi2 alpha) L)
//! ```
//!
//! which contracts only when `4 xi2 alpha < 1`, giving the minimum sample
//! count `D - D / (2 sqrt(xi2))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted power-law learning curve `a * n^(-b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub a: f64,
    pub b: f64,
    /// Mean squared error of the fit over the training points.
    pub residual: f64,
    /// False when Gauss-Newton refinement failed and the log-log estimate was kept.
    pub refined: bool,
}

impl LossCurve {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::domain(format!("need a > 0 and b > 0, got a = {a}, b = {b}")));
        }
        Ok(Self {
            a,
            b,
            residual: 0.0,
            refined: true,
        })
    }

    pub fn expected_loss(&self, n: f64) -> f64 {
        expected_loss(self, n)
    }
}

/// `a * n^(-b)`.
pub fn expected_loss(curve: &LossCurve, n: f64) -> f64 {
    debug_assert!(n >= 1.0);
    curve.a * n.powf(-curve.b)
}

fn mean_squared_error(points: &[(f64, f64)], a: f64, b: f64) -> f64 {
    points
        .iter()
        .map(|&(n, loss)| {
            let r = a * n.powf(-b) - loss;
            r * r
        })
        .sum::<f64>()
        / points.len() as f64
}

/// Ordinary least squares `y = intercept + slope * x`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Fits `a * n^(-b)` to `(n, loss)` pairs by least squares on the loss scale.
///
/// A log-log linear regression provides the starting point, refined by
/// damped Gauss-Newton on the mean squared error. If refinement does not
/// improve on the starting point the log-log estimate is returned with
/// `refined = false`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<LossCurve> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(&(n, loss)) = points
        .iter()
        .find(|(n, loss)| !(*n >= 1.0 && *loss > 0.0 && n.is_finite() && loss.is_finite()))
    {
        return Err(Error::Degenerate(format!(
            "need n >= 1 and loss > 0, got ({n}, {loss})"
        )));
    }
    let first = points[0].0;
    if points.iter().all(|(n, _)| *n == first) {
        return Err(Error::Degenerate("all sample sizes are equal".into()));
    }

    let xs: Vec<f64> = points.iter().map(|(n, _)| n.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, l)| l.ln()).collect();
    let (intercept, slope) = linear_fit(&xs, &ys);
    let (a0, b0) = (intercept.exp(), -slope);
    let start_cost = mean_squared_error(points, a0, b0);

    let (a, b, refined) = match gauss_newton(points, a0, b0) {
        Some((a, b)) if mean_squared_error(points, a, b) <= start_cost => (a, b, true),
        _ => (a0, b0, false),
    };
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::FitFailure(format!(
            "losses do not decay with sample size (a = {a}, b = {b})"
        )));
    }
    Ok(LossCurve {
        a,
        b,
        residual: mean_squared_error(points, a, b),
        refined,
    })
}

fn gauss_newton(points: &[(f64, f64)], a0: f64, b0: f64) -> Option<(f64, f64)> {
    let (mut a, mut b) = (a0, b0);
    let mut cost = mean_squared_error(points, a, b);
    let mut damping = 1e-6;
    for _ in 0..500 {
        // Normal equations J^T J d = -J^T r with J = [n^-b, -a ln(n) n^-b].
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(n, loss) in points {
            let pow = n.powf(-b);
            let r = a * pow - loss;
            let da = pow;
            let db = -a * n.ln() * pow;
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let (maa, mbb) = (jaa * (1.0 + damping), jbb * (1.0 + damping));
            let det = maa * mbb - jab * jab;
            if !(det.is_finite() && det > 0.0) {
                damping *= 10.0;
                continue;
            }
            let step_a = -(mbb * ga - jab * gb) / det;
            let step_b = -(maa * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            let new_cost = mean_squared_error(points, na, nb);
            if na > 0.0 && new_cost.is_finite() && new_cost <= cost {
                let small = step_a.abs() <= 1e-15 * a.abs() && step_b.abs() <= 1e-15 * b.abs().max(1e-300);
                a = na;
                b = nb;
                cost = new_cost;
                damping = (damping * 0.1).max(1e-15);
                accepted = true;
                if small {
                    return Some((a, b));
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted || cost == 0.0 {
            break;
        }
    }
    (a.is_finite() && b.is_finite()).then_some((a, b))
}

/// `((D - collected) / D)^2`.
pub fn data_deficit(dataset_size: f64, collected: f64) -> Result<f64> {
    if !(dataset_size > 0.0 && collected >= 0.0 && collected <= dataset_size) {
        return Err(Error::domain(format!(
            "need 0 <= collected <= D and D > 0, got collected = {collected}, D = {dataset_size}"
        )));
    }
    let frac = (dataset_size - collected) / dataset_size;
    Ok(frac * frac)
}

/// Constants of the smoothness and gradient-moment assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub xi1: f64,
    pub xi2: f64,
    /// Gradient Lipschitz constant `L`.
    pub smoothness: f64,
    /// Initial gap `F(w(0)) - F(w*)`.
    pub initial_gap: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi1 >= 0.0 && self.xi2 > 0.0 && self.smoothness > 0.0) {
            return Err(Error::domain(format!(
                "need xi1 >= 0, xi2 > 0, L > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Evaluates the optimality-gap bound after `t` rounds.
pub fn convergence_bound(params: &BoundParams, alpha: f64, t: u32) -> Result<f64> {
    params.validate()?;
    if !(alpha >= 0.0) {
        return Err(Error::domain(format!("alpha must be nonnegative, got {alpha}")));
    }
    let factor = 4.0 * params.xi2 * alpha;
    if factor >= 1.0 {
        return Err(Error::ContractionViolated { factor });
    }
    let floor = 2.0 * alpha * params.xi1 / ((1.0 - factor) * params.smoothness);
    Ok(factor.powi(t as i32) * (params.initial_gap + floor) + floor)
}

/// Strict lower bound on collected samples for the bound to contract,
/// clamped at zero.
pub fn min_samples(dataset_size: f64, xi2: f64) -> f64 {
    (dataset_size - dataset_size / (2.0 * xi2.sqrt())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "quantile")]
pub enum XiEstimator {
    /// Least-squares line through the moment observations.
    #[default]
    LeastSquares,
    /// Least squares with the intercept raised so that the given fraction of
    /// observations lies on or below the line.
    UpperQuantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiEstimate {
    pub xi1: f64,
    pub xi2: f64,
    /// Mean squared residual of the fitted line.
    pub residual: f64,
}

const XI2_FLOOR: f64 = 1e-12;

/// Fits `E||grad f||^2 ~ xi1 + xi2 ||grad F||^2` from
/// `(per-sample squared norm, full-gradient squared norm)` observations.
///
/// The assumption is an upper bound, so these are empirical estimates only;
/// `UpperQuantile` gives a more conservative intercept.
pub fn estimate_xi(observations: &[(f64, f64)], method: XiEstimator) -> Result<XiEstimate> {
    if observations.len() < 2 {
        return Err(Error::Degenerate("need at least 2 gradient observations".into()));
    }
    let xs: Vec<f64> = observations.iter().map(|o| o.1).collect();
    let ys: Vec<f64> = observations.iter().map(|o| o.0).collect();
    let first = xs[0];
    if xs.iter().all(|x| (x - first).abs() <= 1e-300) {
        return Err(Error::Degenerate(
            "full-gradient norms are all equal; xi2 is unidentifiable".into(),
        ));
    }
    let (mut xi1, mut xi2) = linear_fit(&xs, &ys);
    if xi1 < 0.0 {
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        xi1 = 0.0;
        xi2 = sxy / sxx;
    }
    if xi2 < XI2_FLOOR {
        xi2 = XI2_FLOOR;
        let m = xs.len() as f64;
        xi1 = (xs.iter().zip(&ys).map(|(x, y)| y - xi2 * x).sum::<f64>() / m).max(0.0);
    }
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - xi1 - xi2 * x).collect();
    if let XiEstimator::UpperQuantile(q) = method {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::domain(format!("quantile must lie in [0, 1], got {q}")));
        }
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((q * (sorted.len() - 1) as f64).ceil() as usize).min(sorted.len() - 1);
        xi1 = (xi1 + sorted[idx].max(0.0)).max(0.0);
    }
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - xi1 - xi2 * x).powi(2))
        .sum::<f64>()
        / xs.len() as f64;
    Ok(XiEstimate { xi1, xi2, residual })
}
