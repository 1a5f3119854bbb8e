//! Distributed first-order allocator with momentum.
//!
//! Every node `i` holds its devices' powers `p_i`, a momentum buffer `z_i`
//! and a multiplier `lambda_i` for its sample constraint. A coordinator holds
//! the shared budget multiplier `beta`, the momentum weight `theta` and the
//! budget split `P_i`. One iteration:
//!
//! 1. each node takes a projected gradient step on its augmented Lagrangian
//!    `L_i = phi_i^2 / 2 + lambda_i phi_i + beta (1'p_i - P_i) + mu/2 (1'p_i - P_i)^2`,
//!    with `phi_i` linearised against the previous iterate;
//! 2. each node raises `lambda_i` by `eta * phi_i`;
//! 3. the coordinator updates `beta`, `theta` and re-splits the budget.
//!
//! Node updates read only the previous snapshot, so they run in parallel and
//! give the same result in any order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mm::{distance, AllocationResult, SolveStatus};
use crate::problem::AllocationProblem;
use crate::projection::project_budget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumScheme {
    /// Gradient taken at the extrapolated point, `z` kept as a separate sequence.
    #[default]
    Accelerated,
    /// `z = max(p - eta grad L(p), 0)` followed by `p = (1 - theta) p + theta z`.
    Literal,
    /// Plain projected gradient, `p = z`.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `max_i ||p_i(t) - p_i(t-1)|| <= tol`.
    #[default]
    NodeStep,
    /// Combined primal, budget and dual change `<= tol`.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FomInit {
    /// `P / K` per device, so the start meets the budget.
    #[default]
    Uniform,
    /// `P / I` per device.
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FomSettings {
    pub step: f64,
    pub penalty: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub momentum: MomentumScheme,
    pub stop_rule: StopRule,
    pub init: FomInit,
    /// Halve the step while the aggregate Lagrangian increases.
    pub backtracking: bool,
}

impl Default for FomSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            penalty: 0.5,
            tol: 1e-4,
            max_iter: 20_000,
            momentum: MomentumScheme::Accelerated,
            stop_rule: StopRule::NodeStep,
            init: FomInit::Uniform,
            backtracking: false,
        }
    }
}

impl FomSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.penalty > 0.0 && self.tol > 0.0) {
            return Err(Error::config(format!(
                "step, penalty and tol must be positive, got {}, {}, {}",
                self.step, self.penalty, self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        Ok(())
    }

    pub fn momentum_enabled(&self) -> bool {
        self.momentum != MomentumScheme::Off
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FomState {
    /// Device-indexed powers; node `i` owns the entries of its devices.
    pub powers: Vec<f64>,
    pub candidates: Vec<f64>,
    pub duals: Vec<f64>,
    pub beta: f64,
    pub theta: f64,
    pub node_budgets: Vec<f64>,
    pub iteration: usize,
}

/// `1'p_i - (1'p - P) / I` for every node; the entries sum to `P`.
pub fn update_budget_split(prob: &AllocationProblem, powers: &[f64]) -> Vec<f64> {
    let nodes = prob.num_nodes() as f64;
    let excess = (powers.iter().sum::<f64>() - prob.budget()) / nodes;
    (0..prob.num_nodes())
        .map(|i| prob.partition().node_sum(i, powers) - excess)
        .collect()
}

/// `max(beta + mu / I (1'p - P), 0)`.
pub fn update_beta(beta: f64, total_power: f64, prob: &AllocationProblem, penalty: f64) -> f64 {
    (beta + penalty / prob.num_nodes() as f64 * (total_power - prob.budget())).max(0.0)
}

/// Positive root of `x^2 = theta^2 (1 - x)`.
pub fn next_theta(theta: f64) -> f64 {
    2.0 * theta / (theta + (theta * theta + 4.0).sqrt())
}

/// One accelerated projected step: gradient at `y = (1 - theta) p + theta z`,
/// `z <- max(z - step / theta * grad, 0)`, `p <- (1 - theta) p + theta z`.
pub fn accelerated_update(
    p: &[f64],
    z: &[f64],
    theta: f64,
    step: f64,
    grad: impl FnOnce(&[f64]) -> Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> = p.iter().zip(z).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
    let g = grad(&y);
    let z_new: Vec<f64> = z
        .iter()
        .zip(&g)
        .map(|(a, g)| (a - step / theta * g).max(0.0))
        .collect();
    let p_new = p
        .iter()
        .zip(&z_new)
        .map(|(a, b)| (1.0 - theta) * a + theta * b)
        .collect();
    (p_new, z_new)
}

pub fn init_state(prob: &AllocationProblem, settings: &FomSettings) -> FomState {
    let per_device = match settings.init {
        FomInit::Uniform => prob.budget() / prob.num_devices() as f64,
        FomInit::PerNode => prob.budget() / prob.num_nodes() as f64,
    };
    let powers = vec![per_device; prob.num_devices()];
    FomState {
        node_budgets: update_budget_split(prob, &powers),
        candidates: powers.clone(),
        powers,
        duals: vec![1.0; prob.num_nodes()],
        beta: 1.0,
        theta: 1.0,
        iteration: 0,
    }
}

/// Node `i`'s augmented Lagrangian at local powers `local`, with other
/// nodes and the linearisation point taken from `state.powers`.
pub fn node_lagrangian(
    prob: &AllocationProblem,
    node: usize,
    state: &FomState,
    local: &[f64],
    penalty: f64,
) -> Result<f64> {
    let phi = prob.phi_node(node, local, &state.powers)?;
    let gap = local.iter().sum::<f64>() - state.node_budgets[node];
    Ok(0.5 * phi * phi
        + state.duals[node] * phi
        + state.beta * gap
        + 0.5 * penalty * gap * gap)
}

/// Gradient of [`node_lagrangian`] over the node's devices.
pub fn node_gradient(
    prob: &AllocationProblem,
    node: usize,
    state: &FomState,
    local: &[f64],
    penalty: f64,
) -> Result<Vec<f64>> {
    let phi = prob.phi_node(node, local, &state.powers)?;
    let grad = prob.grad_phi_node(node, local, &state.powers)?;
    let gap = local.iter().sum::<f64>() - state.node_budgets[node];
    let weight = phi + state.duals[node];
    let shift = state.beta + penalty * gap;
    Ok(grad.iter().map(|g| weight * g + shift).collect())
}

struct NodeUpdate {
    powers: Vec<f64>,
    candidates: Vec<f64>,
    dual: f64,
}

fn node_update(
    prob: &AllocationProblem,
    node: usize,
    state: &FomState,
    settings: &FomSettings,
    step: f64,
) -> NodeUpdate {
    let part = prob.partition();
    let p = part.slice(node, &state.powers);
    let z = part.slice(node, &state.candidates);
    let grad = |x: &[f64]| -> Vec<f64> {
        let x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        node_gradient(prob, node, state, &x, settings.penalty)
            .expect("node slices come from a validated partition")
    };
    let theta = state.theta;
    let (powers, candidates) = match settings.momentum {
        MomentumScheme::Accelerated => accelerated_update(&p, &z, theta, step, grad),
        MomentumScheme::Literal | MomentumScheme::Off => {
            let g = grad(&p);
            let z_new: Vec<f64> = p.iter().zip(&g).map(|(a, g)| (a - step * g).max(0.0)).collect();
            let p_new = if settings.momentum == MomentumScheme::Off {
                z_new.clone()
            } else {
                p.iter()
                    .zip(&z_new)
                    .map(|(a, b)| (1.0 - theta) * a + theta * b)
                    .collect()
            };
            (p_new, z_new)
        }
    };
    let full = prob.merge(node, &powers, &state.powers);
    let phi = prob.node_surrogate_unchecked(node, &full, &state.powers);
    NodeUpdate {
        powers,
        candidates,
        dual: (state.duals[node] + step * phi).max(0.0),
    }
}

fn advance(
    prob: &AllocationProblem,
    state: &FomState,
    settings: &FomSettings,
    step: f64,
) -> Result<FomState> {
    let updates: Vec<NodeUpdate> = (0..prob.num_nodes())
        .into_par_iter()
        .map(|i| node_update(prob, i, state, settings, step))
        .collect();
    let mut powers = state.powers.clone();
    let mut candidates = state.candidates.clone();
    let mut duals = state.duals.clone();
    for (i, u) in updates.into_iter().enumerate() {
        prob.partition().scatter(i, &u.powers, &mut powers);
        prob.partition().scatter(i, &u.candidates, &mut candidates);
        duals[i] = u.dual;
    }
    let norm = powers.iter().map(|v| v * v).sum::<f64>().sqrt();
    let limit = 1e6 * prob.budget();
    if !(norm <= limit) {
        return Err(Error::Divergence {
            iteration: state.iteration + 1,
            norm,
            limit,
        });
    }
    let total: f64 = powers.iter().sum();
    Ok(FomState {
        beta: update_beta(state.beta, total, prob, settings.penalty),
        theta: match settings.momentum {
            MomentumScheme::Off => state.theta,
            _ => next_theta(state.theta),
        },
        node_budgets: update_budget_split(prob, &powers),
        powers,
        candidates,
        duals,
        iteration: state.iteration + 1,
    })
}

fn aggregate_lagrangian(prob: &AllocationProblem, state: &FomState, settings: &FomSettings) -> f64 {
    (0..prob.num_nodes())
        .map(|i| {
            let local = prob.partition().slice(i, &state.powers);
            node_lagrangian(prob, i, state, &local, settings.penalty).unwrap_or(f64::INFINITY)
        })
        .sum()
}

/// One synchronous iteration of all nodes followed by the coordinator update.
pub fn step(state: &FomState, prob: &AllocationProblem, settings: &FomSettings) -> Result<FomState> {
    if !settings.backtracking {
        return advance(prob, state, settings, settings.step);
    }
    let before = aggregate_lagrangian(prob, state, settings);
    let mut eta = settings.step;
    for _ in 0..30 {
        let next = advance(prob, state, settings, eta)?;
        if aggregate_lagrangian(prob, &next, settings) <= before {
            return Ok(next);
        }
        eta *= 0.5;
    }
    advance(prob, state, settings, eta)
}

/// `||dp|| + ||dP_i|| + ||dlambda|| + |dbeta|`.
pub fn mse_metric(current: &FomState, previous: &FomState) -> f64 {
    distance(&current.powers, &previous.powers)
        + distance(&current.node_budgets, &previous.node_budgets)
        + distance(&current.duals, &previous.duals)
        + (current.beta - previous.beta).abs()
}

fn max_node_step(prob: &AllocationProblem, a: &FomState, b: &FomState) -> f64 {
    prob.partition()
        .nodes()
        .iter()
        .map(|devices| {
            devices
                .iter()
                .map(|&k| (a.powers[k] - b.powers[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FomRecord {
    pub iteration: usize,
    pub mse: f64,
    pub objective: f64,
    pub beta: f64,
    pub theta: f64,
    pub total_power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FomOutcome {
    /// `p_opt` is the last iterate projected onto the budget set; the last
    /// trace entries describe that projected point.
    pub result: AllocationResult,
    pub records: Vec<FomRecord>,
    pub final_state: FomState,
}

impl FomOutcome {
    /// First iteration whose MSE is at most `level`.
    pub fn iterations_to_mse(&self, level: f64) -> Option<usize> {
        self.records.iter().find(|r| r.mse <= level).map(|r| r.iteration)
    }
}

/// Iterates until the stop rule holds or `max_iter` is reached.
pub fn solve_fom(prob: &AllocationProblem, settings: &FomSettings) -> Result<FomOutcome> {
    solve_fom_with(prob, settings, |_| {})
}

/// As [`solve_fom`], calling `observe` with every state including the initial one.
pub fn solve_fom_with(
    prob: &AllocationProblem,
    settings: &FomSettings,
    mut observe: impl FnMut(&FomState),
) -> Result<FomOutcome> {
    settings.validate()?;
    let mut state = init_state(prob, settings);
    observe(&state);
    let mut result = AllocationResult::start(prob, &state.powers);
    let mut records = Vec::new();
    for _ in 0..settings.max_iter {
        let next = step(&state, prob, settings)?;
        observe(&next);
        let mse = mse_metric(&next, &state);
        let node_step = max_node_step(prob, &next, &state);
        result.record(prob, next.powers.clone());
        records.push(FomRecord {
            iteration: next.iteration,
            mse,
            objective: result.objective(),
            beta: next.beta,
            theta: next.theta,
            total_power: next.powers.iter().sum(),
        });
        state = next;
        let done = match settings.stop_rule {
            StopRule::NodeStep => node_step <= settings.tol,
            StopRule::Mse => mse <= settings.tol,
        };
        if done {
            result.status = SolveStatus::Converged;
            break;
        }
    }
    let mut p = state.powers.clone();
    project_budget(&mut p, prob.budget());
    let psi = prob.psi_unchecked(&p);
    *result.objective_trace.last_mut().expect("nonempty") = psi * psi;
    *result.sample_trace.last_mut().expect("nonempty") = psi + prob.total_cap();
    result.p_opt = p;
    Ok(FomOutcome {
        result,
        records,
        final_state: state,
    })
}
