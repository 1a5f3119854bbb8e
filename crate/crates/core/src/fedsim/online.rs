//! Closed-loop simulation: allocate power, collect samples, train locally, aggregate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::PowerAllocator;
use crate::channel::{rates, sample_channels, ChannelState, NetworkConfig};
use crate::error::{Error, Result};
use crate::fedsim::task::{Dataset, SyntheticTask};
use crate::lossmodel::min_samples;
use crate::mm::SolveStatus;
use crate::problem::AllocationProblem;

/// Full-batch gradient steps on `data`, starting from the global model.
pub fn local_sgd_round(
    task: &SyntheticTask,
    node: usize,
    global: &[f64],
    data: &Dataset,
    learning_rate: f64,
    epochs: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(node));
    }
    let mut w = global.to_vec();
    if learning_rate == 0.0 {
        return Ok(w);
    }
    for _ in 0..epochs {
        let g = task.gradient(&w, data);
        w.iter_mut().zip(&g).for_each(|(v, g)| *v -= learning_rate * g);
    }
    Ok(w)
}

/// Weighted average of local models. Weights must be nonnegative and sum to one.
pub fn aggregate(locals: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::Weights(format!(
            "{} models with {} weights",
            locals.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::Weights("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Weights(format!("weights sum to {total}, expected 1")));
    }
    let dim = locals[0].len();
    if locals.iter().any(|w| w.len() != dim) {
        return Err(Error::Weights("local models differ in length".into()));
    }
    // A single model with full weight is returned bit-exactly.
    if let Some(i) = weights.iter().position(|a| *a == 1.0) {
        return Ok(locals[i].clone());
    }
    let mut out = vec![0.0; dim];
    for (w, a) in locals.iter().zip(weights) {
        out.iter_mut().zip(w).for_each(|(o, v)| *o += a * v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    /// One draw for the whole run.
    #[default]
    Fixed,
    /// A fresh draw every round.
    Redrawn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub channels: ChannelPolicy,
    /// Nodes starting with fewer samples stay in warm-up and are left out.
    pub min_initial: u64,
    /// Size of the held-out set on which the global loss is measured.
    pub test_size: usize,
    /// Seeds the channel draws.
    pub seed: u64,
}

impl Default for OnlineSettings {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 100,
            learning_rate: 0.1,
            channels: ChannelPolicy::Fixed,
            min_initial: 1,
            test_size: 2000,
            seed: 0,
        }
    }
}

impl OnlineSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and nonnegative"));
        }
        if self.test_size == 0 {
            return Err(Error::config("test_size must be positive"));
        }
        Ok(())
    }
}

/// Smallest integer initial count that clears the minimum-sample threshold on every node.
pub fn admission_threshold(caps: &[u64], xi2: f64) -> u64 {
    let strict = caps
        .iter()
        .map(|&d| min_samples(d as f64, xi2))
        .fold(0.0, f64::max);
    strict.floor() as u64 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub status: SolveStatus,
    pub powers: Vec<f64>,
    /// Per-device rates in bit/s/Hz under `powers`.
    pub rates: Vec<f64>,
    pub new_samples: Vec<u64>,
    /// Dataset size per node after this round's collection.
    pub samples: Vec<u64>,
    pub weights: Vec<f64>,
    /// Local empirical loss of the aggregated model; NaN for warm-up nodes.
    pub node_loss: Vec<f64>,
    /// Squared norm of the local gradient at the aggregated model; NaN for warm-up nodes.
    pub grad_sq_norm: Vec<f64>,
    /// Loss of the aggregated model on the held-out set.
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub allocator: String,
    pub seed: u64,
    pub initial_samples: Vec<u64>,
    pub warm_up: Vec<usize>,
    pub records: Vec<RoundRecord>,
    pub final_weights: Vec<f64>,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.global_loss)
    }

    pub const CSV_HEADER: &'static str =
        "round,node,active,samples,new_samples,alpha,node_loss,grad_sq_norm,global_loss";

    /// One row per round and node.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            for i in 0..r.samples.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.round,
                    i,
                    u8::from(!self.warm_up.contains(&i)),
                    r.samples[i],
                    r.new_samples[i],
                    r.weights[i],
                    r.node_loss[i],
                    r.grad_sq_norm[i],
                    r.global_loss
                )?;
            }
        }
        Ok(())
    }
}

fn round_channels(cfg: &NetworkConfig, settings: &OnlineSettings, round: usize) -> Result<ChannelState> {
    let seed = match settings.channels {
        ChannelPolicy::Fixed => settings.seed,
        ChannelPolicy::Redrawn => settings
            .seed
            .wrapping_add((round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    };
    sample_channels(cfg, seed)
}

/// Runs `settings.rounds` rounds of allocation, collection and federated training.
///
/// Each node's dataset is a prefix of its own sample stream, grown by the
/// floored per-device sample counts and capped at `D_i`.
/// Aggregation weights are `D_i` over the sum of admitted caps. Rates are
/// always computed on the full network, so warm-up devices (powered off)
/// still appear in the interference sums.
pub fn run_online(
    cfg: &NetworkConfig,
    allocator: &dyn PowerAllocator,
    task: &SyntheticTask,
    settings: &OnlineSettings,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    settings.validate()?;
    let nodes = cfg.num_nodes();
    let active: Vec<usize> = (0..nodes)
        .filter(|&i| cfg.initial_samples[i] >= settings.min_initial.max(1))
        .collect();
    if active.is_empty() {
        return Err(Error::config("no node meets the admission threshold"));
    }
    let warm_up: Vec<usize> = (0..nodes).filter(|i| !active.contains(i)).collect();
    let pools: Vec<Dataset> = (0..nodes)
        .map(|i| task.node_data(i, cfg.dataset_caps[i] as usize))
        .collect();
    let test = task.test_set(settings.test_size);
    let admitted_caps: f64 = active.iter().map(|&i| cfg.dataset_caps[i] as f64).sum();
    let weights: Vec<f64> = (0..nodes)
        .map(|i| {
            if active.contains(&i) {
                cfg.dataset_caps[i] as f64 / admitted_caps
            } else {
                0.0
            }
        })
        .collect();

    let mut counts = cfg.initial_samples.clone();
    let mut global = task.zero_weights();
    let mut records = Vec::with_capacity(settings.rounds);
    let mut channels = None;
    for round in 1..=settings.rounds {
        if channels.is_none() || settings.channels == ChannelPolicy::Redrawn {
            channels = Some(round_channels(cfg, settings, round)?);
        }
        let gains = &channels.as_ref().expect("drawn above").gains;
        let full = AllocationProblem::from_network(cfg, gains.clone())?
            .with_initials(counts.iter().map(|&c| c as f64).collect())?;
        let (sub, devices) = full.restrict(&active)?;
        let allocation = allocator.allocate(&sub)?;
        let mut powers = vec![0.0; cfg.num_devices()];
        for (&k, &v) in devices.iter().zip(&allocation.p_opt) {
            powers[k] = v;
        }
        let device_rates = rates(gains, &powers, cfg.noise_mw)?;
        let mut new_samples = vec![0u64; nodes];
        for &i in &active {
            let delivered: f64 = cfg
                .partition
                .devices(i)
                .iter()
                .map(|&k| (cfg.samples_per_rate(k) * device_rates[k]).floor())
                .sum();
            let room = cfg.dataset_caps[i] - counts[i];
            new_samples[i] = (delivered as u64).min(room);
            counts[i] += new_samples[i];
        }

        let locals: Vec<Vec<f64>> = active
            .par_iter()
            .map(|&i| {
                let data = pools[i].prefix(counts[i] as usize);
                local_sgd_round(task, i, &global, &data, settings.learning_rate, settings.local_epochs)
            })
            .collect::<Result<_>>()?;
        let active_weights: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
        global = aggregate(&locals, &active_weights)?;

        let mut node_loss = vec![f64::NAN; nodes];
        let mut grad_sq_norm = vec![f64::NAN; nodes];
        let stats: Vec<(f64, f64)> = active
            .par_iter()
            .map(|&i| {
                let data = pools[i].prefix(counts[i] as usize);
                let g = task.gradient(&global, &data);
                (task.loss(&global, &data), g.iter().map(|v| v * v).sum())
            })
            .collect();
        for (&i, (l, g)) in active.iter().zip(stats) {
            node_loss[i] = l;
            grad_sq_norm[i] = g;
        }
        records.push(RoundRecord {
            round,
            status: allocation.status,
            powers,
            rates: device_rates,
            new_samples,
            samples: counts.clone(),
            weights: weights.clone(),
            node_loss,
            grad_sq_norm,
            global_loss: task.loss(&global, &test),
        });
    }
    Ok(TrainingTrace {
        allocator: allocator.name().to_string(),
        seed: settings.seed,
        initial_samples: cfg.initial_samples.clone(),
        warm_up,
        records,
        final_weights: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{Allocator, AllocatorKind, SolverSettings};
    use crate::fedsim::task::TaskConfig;
    use crate::mm::AllocationResult;

    struct Silent;

    impl PowerAllocator for Silent {
        fn name(&self) -> &str {
            "zero"
        }

        fn allocate(&self, prob: &AllocationProblem) -> Result<AllocationResult> {
            AllocationResult::fixed(prob, vec![0.0; prob.num_devices()])
        }
    }

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig {
            input_dim: 5,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    fn short_run() -> OnlineSettings {
        OnlineSettings {
            rounds: 4,
            local_epochs: 3,
            test_size: 200,
            ..OnlineSettings::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_global_model() {
        let t = task();
        let w: Vec<f64> = (0..t.num_params()).map(|j| j as f64).collect();
        let data = t.node_data(0, 5);
        assert_eq!(local_sgd_round(&t, 0, &w, &data, 0.0, 10).unwrap(), w);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let t = task();
        let err = local_sgd_round(&t, 3, &t.zero_weights(), &Dataset::default(), 0.1, 1);
        assert_eq!(err, Err(Error::EmptyDataset(3)));
    }

    #[test]
    fn one_epoch_is_one_gradient_step() {
        let t = task();
        let data = t.node_data(0, 1);
        let w0 = t.zero_weights();
        let g = t.gradient(&w0, &data);
        let w1 = local_sgd_round(&t, 0, &w0, &data, 0.5, 1).unwrap();
        for (a, b) in w1.iter().zip(&g) {
            assert_eq!(*a, -0.5 * b);
        }
    }

    #[test]
    fn full_batch_training_decreases_loss() {
        let t = SyntheticTask::new(TaskConfig {
            input_dim: 2,
            class_count: 2,
            separation: 3.0,
            noise_std: 0.3,
            ..TaskConfig::default()
        })
        .unwrap();
        let data = t.node_data(0, 40);
        let mut w = t.zero_weights();
        let mut last = t.loss(&w, &data);
        for _ in 0..20 {
            w = local_sgd_round(&t, 0, &w, &data, 0.2, 1).unwrap();
            let now = t.loss(&w, &data);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn aggregation_rules() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, -2.0];
        assert_eq!(aggregate(&[a.clone(), a.clone()], &[0.3, 0.7]).unwrap(), a);
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap(), vec![2.0, 0.0]);
        assert!(matches!(aggregate(&[a.clone(), b.clone()], &[0.5, 0.6]), Err(Error::Weights(_))));
        assert!(matches!(aggregate(&[a, b], &[1.5, -0.5]), Err(Error::Weights(_))));
    }

    #[test]
    fn zero_power_collects_nothing() {
        let cfg = NetworkConfig::reference(2, 4, 0).unwrap();
        let trace = run_online(&cfg, &Silent, &task(), &short_run()).unwrap();
        assert_eq!(trace.records.len(), 4);
        for r in &trace.records {
            assert_eq!(r.samples, cfg.initial_samples);
            assert!(r.new_samples.iter().all(|n| *n == 0));
        }
    }

    #[test]
    fn sample_counts_follow_logged_rates() {
        let cfg = NetworkConfig::reference(2, 6, 3).unwrap();
        let uniform = Allocator::new(AllocatorKind::Uniform, SolverSettings::default());
        let settings = OnlineSettings {
            rounds: 10,
            ..short_run()
        };
        let trace = run_online(&cfg, &uniform, &task(), &settings).unwrap();
        let mut counts: Vec<u64> = cfg.initial_samples.clone();
        for r in &trace.records {
            for i in 0..2 {
                let delivered: u64 = cfg
                    .partition
                    .devices(i)
                    .iter()
                    .map(|&k| (4e6 * 200.0 / 5.6e6 * r.rates[k]).floor() as u64)
                    .sum();
                counts[i] = (counts[i] + delivered).min(cfg.dataset_caps[i]);
            }
            assert_eq!(r.samples, counts);
        }
    }

    #[test]
    fn datasets_only_grow_and_reruns_match() {
        let cfg = NetworkConfig::reference(3, 6, 1).unwrap();
        let fom = Allocator::new(AllocatorKind::Fom, SolverSettings::default());
        let settings = OnlineSettings {
            channels: ChannelPolicy::Redrawn,
            ..short_run()
        };
        let trace = run_online(&cfg, &fom, &task(), &settings).unwrap();
        let mut last = cfg.initial_samples.clone();
        for r in &trace.records {
            assert!(r.samples.iter().zip(&last).all(|(a, b)| a >= b));
            assert!(r.samples.iter().zip(&cfg.dataset_caps).all(|(a, d)| a <= d));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            last = r.samples.clone();
        }
        assert_eq!(run_online(&cfg, &fom, &task(), &settings).unwrap(), trace);
    }

    #[test]
    fn warm_up_nodes_are_left_out() {
        let mut cfg = NetworkConfig::reference(3, 6, 2).unwrap();
        cfg.initial_samples = vec![50, 0, 50];
        let uniform = Allocator::new(AllocatorKind::Uniform, SolverSettings::default());
        let trace = run_online(&cfg, &uniform, &task(), &short_run()).unwrap();
        assert_eq!(trace.warm_up, vec![1]);
        for r in &trace.records {
            assert_eq!(r.samples[1], 0);
            assert_eq!(r.weights[1], 0.0);
            assert!(r.node_loss[1].is_nan());
            assert!(cfg.partition.devices(1).iter().all(|&k| r.powers[k] == 0.0));
        }
        cfg.initial_samples = vec![0, 0, 0];
        assert!(run_online(&cfg, &uniform, &task(), &short_run()).is_err());
    }

    #[test]
    fn admission_from_xi2() {
        // D - D / (2 sqrt(xi2)) = 150 for D = 200, xi2 = 4.
        assert_eq!(admission_threshold(&[200, 100], 4.0), 151);
        assert_eq!(admission_threshold(&[1000], 0.16), 1);
    }

    #[test]
    fn zero_rounds_give_header_only_csv() {
        let cfg = NetworkConfig::reference(2, 4, 0).unwrap();
        let settings = OnlineSettings {
            rounds: 0,
            ..short_run()
        };
        let trace = run_online(&cfg, &Silent, &task(), &settings).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", TrainingTrace::CSV_HEADER));
    }
}
