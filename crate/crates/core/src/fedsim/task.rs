//! Gaussian-mixture classification with a ridge-penalised softmax model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RNG stream reserved for the held-out evaluation set.
const TEST_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub input_dim: usize,
    pub class_count: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise_std: f64,
    /// Coefficient of `ridge / 2 * ||W||^2` (biases are not penalised).
    pub ridge: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            class_count: 3,
            separation: 2.0,
            noise_std: 1.0,
            ridge: 1e-2,
            seed: 0,
        }
    }
}

/// Samples stored row-major: `features[j * dim..(j + 1) * dim]` belongs to `labels[j]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn prefix(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dim: self.dim,
            features: self.features[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    config: TaskConfig,
    means: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.input_dim == 0 || config.class_count < 2 {
            return Err(Error::config("task needs input_dim >= 1 and class_count >= 2"));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(config.separation) && config.noise_std > 0.0 && finite_nonneg(config.ridge))
        {
            return Err(Error::config(
                "task needs separation >= 0, noise_std > 0 and ridge >= 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let means = (0..config.class_count)
            .map(|_| {
                let raw: Vec<f64> = (0..config.input_dim).map(|_| normal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                raw.iter().map(|v| v / norm * config.separation).collect()
            })
            .collect();
        Ok(Self { config, means })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn num_params(&self) -> usize {
        self.config.class_count * (self.config.input_dim + 1)
    }

    pub fn zero_weights(&self) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }

    /// `n` i.i.d. samples from an independent stream; the same stream always
    /// yields the same sequence, so shorter draws are prefixes of longer ones.
    pub fn sample(&self, stream: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        let classes = Uniform::new(0, self.config.class_count).expect("at least two classes");
        let noise = Normal::new(0.0, self.config.noise_std).expect("positive noise");
        let dim = self.config.input_dim;
        let mut out = Dataset {
            dim,
            features: Vec::with_capacity(n * dim),
            labels: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let c = classes.sample(&mut rng);
            out.labels.push(c);
            out.features
                .extend(self.means[c].iter().map(|m| m + noise.sample(&mut rng)));
        }
        out
    }

    /// Samples for node `node`; stream 0 is left unused.
    pub fn node_data(&self, node: usize, n: usize) -> Dataset {
        self.sample(node as u64 + 1, n)
    }

    pub fn test_set(&self, n: usize) -> Dataset {
        self.sample(TEST_STREAM, n)
    }

    /// Softmax probabilities for one input, written into `probs`.
    fn softmax(&self, w: &[f64], x: &[f64], probs: &mut [f64]) {
        let d = self.config.input_dim;
        for (c, z) in probs.iter_mut().enumerate() {
            let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
            *z = row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for z in probs.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        probs.iter_mut().for_each(|z| *z /= total);
    }

    fn ridge_term(&self, w: &[f64]) -> f64 {
        let d = self.config.input_dim;
        let sq: f64 = w
            .chunks(d + 1)
            .map(|row| row[..d].iter().map(|v| v * v).sum::<f64>())
            .sum();
        0.5 * self.config.ridge * sq
    }

    fn add_ridge_gradient(&self, w: &[f64], grad: &mut [f64]) {
        let d = self.config.input_dim;
        for (g, v) in grad.chunks_mut(d + 1).zip(w.chunks(d + 1)) {
            for j in 0..d {
                g[j] += self.config.ridge * v[j];
            }
        }
    }

    /// Gradient of the unpenalised loss of one sample, added into `grad` with weight `scale`.
    fn accumulate_sample(&self, w: &[f64], x: &[f64], y: usize, scale: f64, probs: &mut [f64], grad: &mut [f64]) {
        let d = self.config.input_dim;
        self.softmax(w, x, probs);
        for (c, g) in grad.chunks_mut(d + 1).enumerate() {
            let err = scale * (probs[c] - if c == y { 1.0 } else { 0.0 });
            for j in 0..d {
                g[j] += err * x[j];
            }
            g[d] += err;
        }
    }

    /// Mean cross-entropy plus the ridge penalty. Zero-length data gives the penalty alone.
    pub fn loss(&self, w: &[f64], data: &Dataset) -> f64 {
        let mut probs = vec![0.0; self.config.class_count];
        let mut total = 0.0;
        for j in 0..data.len() {
            self.softmax(w, data.row(j), &mut probs);
            total -= probs[data.labels[j]].max(f64::MIN_POSITIVE).ln();
        }
        let mean = if data.is_empty() { 0.0 } else { total / data.len() as f64 };
        mean + self.ridge_term(w)
    }

    pub fn gradient(&self, w: &[f64], data: &Dataset) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        let mut probs = vec![0.0; self.config.class_count];
        let scale = 1.0 / data.len().max(1) as f64;
        for j in 0..data.len() {
            self.accumulate_sample(w, data.row(j), data.labels[j], scale, &mut probs, &mut grad);
        }
        self.add_ridge_gradient(w, &mut grad);
        grad
    }

    /// Mean per-sample squared gradient norm and the squared norm of the full gradient,
    /// the two moments related by the gradient-variance assumption.
    pub fn gradient_moments(&self, w: &[f64], data: &Dataset) -> (f64, f64) {
        let full = self.gradient(w, data);
        let mut probs = vec![0.0; self.config.class_count];
        let mut per_sample = 0.0;
        let mut g = vec![0.0; self.num_params()];
        for j in 0..data.len() {
            g.iter_mut().for_each(|v| *v = 0.0);
            self.accumulate_sample(w, data.row(j), data.labels[j], 1.0, &mut probs, &mut g);
            self.add_ridge_gradient(w, &mut g);
            per_sample += g.iter().map(|v| v * v).sum::<f64>();
        }
        let n = data.len().max(1) as f64;
        (per_sample / n, full.iter().map(|v| v * v).sum())
    }

    /// Upper bound on the Lipschitz constant of the loss gradient over `data`:
    /// the softmax Hessian is at most `||(x, 1)||^2 / 2` per sample.
    pub fn smoothness(&self, data: &Dataset) -> f64 {
        let widest = (0..data.len())
            .map(|j| 1.0 + data.row(j).iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        0.5 * widest + self.config.ridge
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig {
            input_dim: 3,
            class_count: 3,
            ridge: 0.1,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TaskConfig {
            class_count: 1,
            ..TaskConfig::default()
        };
        assert!(SyntheticTask::new(bad).is_err());
        let bad = TaskConfig {
            noise_std: 0.0,
            ..TaskConfig::default()
        };
        assert!(SyntheticTask::new(bad).is_err());
    }

    #[test]
    fn streams_are_deterministic_and_nested() {
        let task = small_task();
        let long = task.node_data(2, 50);
        assert_eq!(task.node_data(2, 20), long.prefix(20));
        assert_ne!(task.node_data(3, 20), long.prefix(20));
        assert_eq!(SyntheticTask::new(task.config().clone()).unwrap().node_data(2, 50), long);
    }

    #[test]
    fn means_have_requested_norm() {
        let task = small_task();
        for m in task.means() {
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let task = small_task();
        let data = task.node_data(0, 10);
        assert!((task.loss(&task.zero_weights(), &data) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let task = small_task();
        let data = task.node_data(0, 25);
        let w: Vec<f64> = (0..task.num_params()).map(|j| 0.1 * (j as f64).sin()).collect();
        let g = task.gradient(&w, &data);
        for j in 0..w.len() {
            let h = 1e-6;
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (task.loss(&hi, &data) - task.loss(&lo, &data)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7, "coordinate {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn moments_dominate_full_gradient() {
        let task = small_task();
        let data = task.node_data(1, 40);
        let w: Vec<f64> = (0..task.num_params()).map(|j| 0.05 * j as f64).collect();
        let (per_sample, full) = task.gradient_moments(&w, &data);
        // Jensen: the mean of squared norms is at least the squared norm of the mean.
        assert!(per_sample >= full - 1e-12);
        let direct: f64 = task.gradient(&w, &data).iter().map(|v| v * v).sum();
        assert!((full - direct).abs() < 1e-12);
    }

    #[test]
    fn smoothness_bounds_gradient_growth() {
        let task = small_task();
        let data = task.node_data(0, 30);
        let l = task.smoothness(&data);
        let a: Vec<f64> = (0..task.num_params()).map(|j| (j as f64).cos()).collect();
        let b: Vec<f64> = (0..task.num_params()).map(|j| -(j as f64 * 0.3).sin()).collect();
        let ga = task.gradient(&a, &data);
        let gb = task.gradient(&b, &data);
        let dg: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let dw: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dg <= l * dw);
    }
}
