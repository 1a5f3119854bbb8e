//! Ratio metrics reported for downstream tasks, computed from user-supplied counts.

use crate::error::{Error, Result};

fn ratio(part: f64, rest: f64) -> Result<f64> {
    if !(part.is_finite() && rest.is_finite() && part >= 0.0 && rest >= 0.0) {
        return Err(Error::domain("counts and times must be finite and nonnegative"));
    }
    if part + rest == 0.0 {
        return Err(Error::domain("ratio of two zero counts is undefined"));
    }
    Ok(part / (part + rest))
}

/// Share of wall time spent learning rather than optimizing.
pub fn learning_ratio(learning_time: f64, optimization_time: f64) -> Result<f64> {
    ratio(learning_time, optimization_time)
}

/// Collisions per obstacle encountered.
pub fn collision_rate(collisions: u64, avoidances: u64) -> Result<f64> {
    ratio(collisions as f64, avoidances as f64)
}

/// Successful arrivals per trial.
pub fn goal_rate(goals: u64, failures: u64) -> Result<f64> {
    ratio(goals as f64, failures as f64)
}
