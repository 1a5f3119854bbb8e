//! Reference allocators: equal power split and sum-rate maximization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::AllocationProblem;
use crate::projection::project_budget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Uniform,
    Srm,
}

/// `P / K` to every device.
pub fn uniform_allocate(prob: &AllocationProblem) -> Vec<f64> {
    vec![prob.budget() / prob.num_devices() as f64; prob.num_devices()]
}

/// Sum of device rates in bit/s/Hz.
pub fn sum_rate(prob: &AllocationProblem, p: &[f64]) -> f64 {
    (0..prob.num_devices())
        .map(|k| {
            let u = prob.interference(k, p);
            (prob.snr_at(k, k) * p[k] / u).ln_1p()
        })
        .sum::<f64>()
        / std::f64::consts::LN_2
}

fn sum_rate_gradient(prob: &AllocationProblem, p: &[f64]) -> Vec<f64> {
    let n = prob.num_devices();
    let mut g = vec![0.0; n];
    for k in 0..n {
        let u = prob.interference(k, p);
        let tot = u + prob.snr_at(k, k) * p[k];
        for (m, gm) in g.iter_mut().enumerate() {
            let s = prob.snr_at(k, m);
            *gm += if m == k { s / tot } else { s * (1.0 / tot - 1.0 / u) };
        }
    }
    g.iter_mut().for_each(|v| *v /= std::f64::consts::LN_2);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrmSettings {
    /// Random starting points in addition to the uniform allocation.
    pub restarts: usize,
    /// Stop a restart when the sum rate improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SrmSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            tol: 1e-10,
            max_iter: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrmResult {
    pub p: Vec<f64>,
    pub sum_rate: f64,
    /// Ascent iterations of the winning restart.
    pub iterations: usize,
}

/// Projected gradient ascent with Armijo backtracking from one start.
fn ascend(prob: &AllocationProblem, start: Vec<f64>, settings: &SrmSettings) -> SrmResult {
    let budget = prob.budget();
    let mut p = start;
    project_budget(&mut p, budget);
    let mut value = sum_rate(prob, &p);
    let mut step = budget;
    let mut iterations = 0;
    for _ in 0..settings.max_iter {
        iterations += 1;
        let g = sum_rate_gradient(prob, &p);
        let mut improved = None;
        for _ in 0..60 {
            let mut q: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            project_budget(&mut q, budget);
            let gain: f64 = q.iter().zip(&p).zip(&g).map(|((a, b), g)| g * (a - b)).sum();
            let v = sum_rate(prob, &q);
            if v >= value + 1e-4 * gain && gain >= 0.0 {
                improved = Some((q, v));
                break;
            }
            step *= 0.5;
        }
        let Some((q, v)) = improved else { break };
        let delta = v - value;
        p = q;
        value = v;
        step *= 2.0;
        if delta <= settings.tol {
            break;
        }
    }
    SrmResult {
        p,
        sum_rate: value,
        iterations,
    }
}

/// Best-effort sum-rate maximization over `{p >= 0, sum p <= P}`.
///
/// The problem is nonconvex; ascent runs from the uniform allocation and
/// `restarts` seeded random points, in parallel, and the best local optimum
/// is returned. Ties go to the earliest start.
pub fn srm_allocate(prob: &AllocationProblem, settings: &SrmSettings) -> Result<SrmResult> {
    if !(settings.tol > 0.0) || settings.max_iter == 0 {
        return Err(Error::config("SRM needs tol > 0 and max_iter >= 1"));
    }
    let n = prob.num_devices();
    let mut starts = vec![uniform_allocate(prob)];
    for r in 0..settings.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(r as u64 + 1);
        let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let total: f64 = raw.iter().sum();
        starts.push(raw.iter().map(|v| v / total * prob.budget()).collect());
    }
    let results: Vec<SrmResult> = starts
        .into_par_iter()
        .map(|s| ascend(prob, s, settings))
        .collect();
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.sum_rate > results[best].sum_rate {
            best = i;
        }
    }
    Ok(results.into_iter().nth(best).expect("at least the uniform start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{rates, sample_channels, GainMatrix, NetworkConfig, Partition};
    use crate::fom::{solve_fom, FomSettings};
    use crate::mm::{solve_mm, MmSettings};
    use crate::problem::tests::random_problem;

    fn problem(rows: Vec<Vec<f64>>, budget: f64) -> AllocationProblem {
        let k = rows.len();
        AllocationProblem::new(
            GainMatrix::from_rows(rows).unwrap(),
            1.0,
            vec![1.0; k],
            vec![100.0],
            vec![0.0],
            Partition::contiguous(&[k]).unwrap(),
            budget,
        )
        .unwrap()
    }

    #[test]
    fn uniform_examples() {
        let cfg = NetworkConfig::reference(5, 20, 0).unwrap();
        let prob =
            AllocationProblem::from_network(&cfg, sample_channels(&cfg, 0).unwrap().gains).unwrap();
        let p = uniform_allocate(&prob);
        assert!(p.iter().all(|v| *v == 2.5));
        assert_eq!(p.iter().sum::<f64>(), 50.0);
        assert_eq!(uniform_allocate(&problem(vec![vec![1.0]], 7.0)), vec![7.0]);
    }

    #[test]
    fn sum_rate_matches_channel_rates() {
        let prob = random_problem(3, 5, 2);
        let p = vec![0.4, 1.0, 2.0, 0.0, 3.0];
        let direct: f64 = rates(prob.gains(), &p, prob.noise()).unwrap().iter().sum();
        assert!((sum_rate(&prob, &p) - direct).abs() < 1e-12);
    }

    #[test]
    fn single_device_takes_everything() {
        let prob = problem(vec![vec![0.8]], 5.0);
        let r = srm_allocate(&prob, &SrmSettings::default()).unwrap();
        assert!((r.p[0] - 5.0).abs() < 1e-12);
        assert!((r.sum_rate - (1.0f64 + 4.0).log2()).abs() < 1e-12);
    }

    #[test]
    fn dead_device_gets_nothing() {
        let prob = problem(vec![vec![0.0, 0.0], vec![0.0, 1.0]], 5.0);
        let r = srm_allocate(&prob, &SrmSettings::default()).unwrap();
        assert!(r.p[0] < 1e-9);
        assert!((r.p[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_matches_grid_water_filling() {
        let prob = problem(vec![vec![2.0, 0.0], vec![0.0, 0.5]], 4.0);
        let r = srm_allocate(&prob, &SrmSettings::default()).unwrap();
        let mut best = 0.0f64;
        let steps = 4000;
        for i in 0..=steps {
            let a = 4.0 * i as f64 / steps as f64;
            best = best.max(sum_rate(&prob, &[a, 4.0 - a]));
        }
        assert!((r.sum_rate - best).abs() < 1e-6, "{} vs {best}", r.sum_rate);
        // Water level: p1 + 1/2 = p2 + 2, p1 + p2 = 4.
        assert!((r.p[0] - 2.75).abs() < 1e-4 && (r.p[1] - 1.25).abs() < 1e-4);
    }

    #[test]
    fn srm_beats_uniform_and_is_deterministic() {
        for seed in 0..5 {
            let prob = random_problem(seed, 8, 2);
            let s = SrmSettings {
                seed,
                ..SrmSettings::default()
            };
            let r = srm_allocate(&prob, &s).unwrap();
            assert!(r.sum_rate >= sum_rate(&prob, &uniform_allocate(&prob)));
            assert!(r.p.iter().all(|v| *v >= 0.0));
            assert!(r.p.iter().sum::<f64>() <= prob.budget() + 1e-9);
            assert_eq!(srm_allocate(&prob, &s).unwrap(), r);
        }
    }

    /// SRM ignores the per-node storage caps, so samples above `D_i` are lost.
    #[test]
    fn learning_aware_allocators_beat_srm_under_caps() {
        for (nodes, seeds) in [(5, 0..4), (10, 0..2)] {
            for seed in seeds {
                let cfg = NetworkConfig::reference(nodes, 20, seed).unwrap();
                let prob = AllocationProblem::from_network(
                    &cfg,
                    sample_channels(&cfg, seed).unwrap().gains,
                )
                .unwrap();
                let srm_p = srm_allocate(&prob, &SrmSettings::default()).unwrap().p;
                let srm = prob.capped_deviation(&srm_p).unwrap();
                let mm = solve_mm(&prob, &MmSettings::default()).unwrap().p_opt;
                let mm = prob.capped_deviation(&mm).unwrap();
                assert!(mm < srm, "I = {nodes}, seed {seed}: mm {mm} vs srm {srm}");
                if nodes == 5 {
                    let fom = solve_fom(&prob, &FomSettings::default()).unwrap().result.p_opt;
                    let fom = prob.capped_deviation(&fom).unwrap();
                    assert!(fom < srm, "seed {seed}: fom {fom} vs srm {srm}");
                }
            }
        }
    }
}
