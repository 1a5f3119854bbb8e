//! Loss versus dataset size, for fitting the power-law learning curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::task::SyntheticTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSettings {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Converged once the training loss moves by less than `tol` over `window` epochs.
    pub window: usize,
    pub tol: f64,
    pub test_size: usize,
    /// Stream the nested training sets are drawn from.
    pub stream: u64,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 5000,
            window: 50,
            tol: 1e-6,
            test_size: 5000,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub samples: usize,
    /// Held-out loss of the model trained on the first `samples` samples.
    pub loss: f64,
    pub train_loss: f64,
    pub epochs: usize,
    pub converged: bool,
}

/// Trains from scratch on nested prefixes of one sample stream and records the
/// held-out loss of each trained model.
pub fn measure_loss_curve(
    task: &SyntheticTask,
    sizes: &[usize],
    settings: &CurveSettings,
) -> Result<Vec<CurvePoint>> {
    if sizes.is_empty() || sizes[0] == 0 {
        return Err(Error::config("sizes must be nonempty and positive"));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("sizes must be strictly increasing"));
    }
    if settings.window == 0 || !(settings.learning_rate > 0.0 && settings.tol > 0.0) {
        return Err(Error::config("curve settings need window >= 1, learning_rate > 0, tol > 0"));
    }
    let pool = task.sample(settings.stream, *sizes.last().expect("nonempty"));
    let test = task.test_set(settings.test_size);
    Ok(sizes
        .par_iter()
        .map(|&n| {
            let data = pool.prefix(n);
            let mut w = task.zero_weights();
            let mut history = vec![task.loss(&w, &data)];
            let mut converged = false;
            while history.len() <= settings.max_epochs {
                let g = task.gradient(&w, &data);
                w.iter_mut().zip(&g).for_each(|(v, g)| *v -= settings.learning_rate * g);
                history.push(task.loss(&w, &data));
                let e = history.len() - 1;
                if e >= settings.window && (history[e - settings.window] - history[e]).abs() < settings.tol {
                    converged = true;
                    break;
                }
            }
            CurvePoint {
                samples: n,
                loss: task.loss(&w, &test),
                train_loss: *history.last().expect("nonempty"),
                epochs: history.len() - 1,
                converged,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::task::TaskConfig;

    #[test]
    fn rejects_unsorted_or_repeated_sizes() {
        let task = SyntheticTask::new(TaskConfig::default()).unwrap();
        let s = CurveSettings::default();
        assert!(measure_loss_curve(&task, &[50, 50, 100], &s).is_err());
        assert!(measure_loss_curve(&task, &[100, 50], &s).is_err());
        assert!(measure_loss_curve(&task, &[], &s).is_err());
    }

    #[test]
    fn epoch_cap_is_reported() {
        let task = SyntheticTask::new(TaskConfig {
            input_dim: 4,
            ..TaskConfig::default()
        })
        .unwrap();
        let s = CurveSettings {
            max_epochs: 5,
            test_size: 100,
            ..CurveSettings::default()
        };
        let pts = measure_loss_curve(&task, &[20, 40], &s).unwrap();
        assert!(pts.iter().all(|p| !p.converged && p.epochs == 5));
        let s = CurveSettings {
            tol: 1.0,
            window: 2,
            ..s
        };
        let pts = measure_loss_curve(&task, &[20], &s).unwrap();
        assert!(pts[0].converged);
    }
}
