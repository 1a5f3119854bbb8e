//! Centralized majorization-minimization allocator.
//!
//! Each outer step replaces the objective by its convex surrogate at the
//! current iterate and solves
//!
//! ```text
//! min  psi~(p | p_t)^2
//! s.t. psi~_i(p | p_t) <= 0          for every node i
//!      psi~(p | p_t)^2 <= D^2 / 2    (optional)
//!      p >= 0, sum p <= P
//! ```
//!
//! with an accelerated projected gradient method on the augmented
//! Lagrangian of the nonlinear constraints. Values are scaled by `D` inside
//! the subproblem so tolerances are dimensionless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::AllocationProblem;
use crate::projection::{project_blocks, project_budget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmSettings {
    /// Stop when `||p(t) - p(t-1)||` falls to this many mW.
    pub outer_tol: f64,
    /// Projected-gradient residual of the scaled subproblem.
    pub inner_tol: f64,
    pub max_outer: usize,
    /// Gradient steps per augmented-Lagrangian round.
    pub max_inner: usize,
    /// Initial augmented-Lagrangian penalty.
    pub inner_penalty: f64,
    /// Enforce `Phi~ <= D^2 / 2`.
    pub objective_cap: bool,
    /// Fixed per-node budgets; `None` enforces only the total budget.
    pub node_budgets: Option<Vec<f64>>,
}

impl Default for MmSettings {
    fn default() -> Self {
        Self {
            outer_tol: 1e-4,
            inner_tol: 1e-9,
            max_outer: 100,
            max_inner: 2000,
            inner_penalty: 10.0,
            objective_cap: true,
            node_budgets: None,
        }
    }
}

impl MmSettings {
    pub fn validate(&self, prob: &AllocationProblem) -> Result<()> {
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0 && self.inner_penalty > 0.0) {
            return Err(Error::config("MM tolerances and penalty must be positive"));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::config("MM iteration caps must be at least 1"));
        }
        if let Some(b) = &self.node_budgets {
            if b.len() != prob.num_nodes() {
                return Err(Error::config(format!(
                    "need {} node budgets, got {}",
                    prob.num_nodes(),
                    b.len()
                )));
            }
            if b.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config("node budgets must be nonnegative"));
            }
            if b.iter().sum::<f64>() > prob.budget() * (1.0 + 1e-12) {
                return Err(Error::config("node budgets exceed the total budget"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    /// The sample target was met; the returned point meets it exactly.
    RegimeExit,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::RegimeExit => "regime_exit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub p_opt: Vec<f64>,
    /// Objective at the starting point followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    /// `||p(t) - p(t-1)||`, aligned with `objective_trace` (first entry 0).
    pub step_trace: Vec<f64>,
    /// Total samples (initial plus collected), aligned with `objective_trace`.
    pub sample_trace: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl AllocationResult {
    pub(crate) fn start(prob: &AllocationProblem, p: &[f64]) -> Self {
        let psi = prob.psi_unchecked(p);
        Self {
            p_opt: p.to_vec(),
            objective_trace: vec![psi * psi],
            step_trace: vec![0.0],
            sample_trace: vec![psi + prob.total_cap()],
            iterations: 0,
            status: SolveStatus::MaxIter,
        }
    }

    pub(crate) fn record(&mut self, prob: &AllocationProblem, p: Vec<f64>) {
        let psi = prob.psi_unchecked(&p);
        self.step_trace.push(distance(&p, &self.p_opt));
        self.objective_trace.push(psi * psi);
        self.sample_trace.push(psi + prob.total_cap());
        self.p_opt = p;
        self.iterations += 1;
    }

    /// Result of a non-iterative allocator that simply returns `p`.
    pub fn fixed(prob: &AllocationProblem, p: Vec<f64>) -> Result<Self> {
        prob.check_power(&p)?;
        let mut out = Self::start(prob, &p);
        out.status = SolveStatus::Converged;
        Ok(out)
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Feasible region of the subproblem: budgets plus zero power on dead devices.
pub(crate) struct PowerSet<'a> {
    prob: &'a AllocationProblem,
    node_budgets: Option<&'a [f64]>,
}

impl<'a> PowerSet<'a> {
    pub(crate) fn new(prob: &'a AllocationProblem, node_budgets: Option<&'a [f64]>) -> Self {
        Self { prob, node_budgets }
    }

    pub(crate) fn project(&self, p: &mut [f64]) {
        for (k, v) in p.iter_mut().enumerate() {
            if self.prob.is_dead(k) {
                *v = 0.0;
            }
        }
        match self.node_budgets {
            Some(b) => project_blocks(p, self.prob.partition().nodes(), b),
            None => project_budget(p, self.prob.budget()),
        }
    }

    /// Budget spread evenly over live devices.
    pub(crate) fn uniform(&self) -> Vec<f64> {
        let prob = self.prob;
        let mut p = vec![0.0; prob.num_devices()];
        let blocks: Vec<(Vec<usize>, f64)> = match self.node_budgets {
            Some(b) => prob.partition().nodes().iter().cloned().zip(b.iter().copied()).collect(),
            None => vec![((0..prob.num_devices()).collect(), prob.budget())],
        };
        for (devices, budget) in blocks {
            let live: Vec<usize> = devices.into_iter().filter(|&k| !prob.is_dead(k)).collect();
            for &k in &live {
                p[k] = budget / live.len() as f64;
            }
        }
        p
    }
}

/// Scaled subproblem at reference `p_ref`.
struct Subproblem<'a> {
    prob: &'a AllocationProblem,
    u_ref: Vec<f64>,
    scale: f64,
    objective_cap: bool,
}

struct Evaluation {
    objective: f64,
    objective_grad: Vec<f64>,
    constraints: Vec<f64>,
    constraint_grads: Vec<Vec<f64>>,
}

impl<'a> Subproblem<'a> {
    fn new(prob: &'a AllocationProblem, p_ref: &'a [f64], objective_cap: bool) -> Self {
        let u_ref = (0..prob.num_devices()).map(|k| prob.interference(k, p_ref)).collect();
        Self {
            prob,
            u_ref,
            scale: 1.0 / prob.total_cap(),
            objective_cap,
        }
    }

    fn num_constraints(&self) -> usize {
        self.prob.num_nodes() + usize::from(self.objective_cap)
    }

    fn evaluate(&self, p: &[f64]) -> Evaluation {
        let prob = self.prob;
        let n = prob.num_devices();
        let nodes = prob.num_nodes();
        let mut node_val: Vec<f64> = (0..nodes)
            .map(|i| prob.initials()[i] - prob.caps()[i])
            .collect();
        let mut node_grad = vec![vec![0.0; n]; nodes];
        for k in 0..n {
            let i = prob.partition().node_of(k);
            let u_ref = self.u_ref[k];
            let u = prob.interference(k, p);
            let direct = prob.snr_at(k, k) * p[k];
            let tot = u + direct;
            let shift = u - u_ref;
            let c = prob.scale()[k];
            node_val[i] += c * (((direct + shift) / u_ref).ln_1p() - shift / u_ref);
            let grad = &mut node_grad[i];
            for (m, g) in grad.iter_mut().enumerate() {
                let s = prob.snr_at(k, m);
                *g += if m == k {
                    c * s / tot
                } else {
                    c * s * (1.0 / tot - 1.0 / u_ref)
                };
            }
        }
        let inner: f64 = node_val.iter().sum::<f64>();
        let inner = inner * self.scale;
        let mut inner_grad = vec![0.0; n];
        for g in &node_grad {
            for (a, b) in inner_grad.iter_mut().zip(g) {
                *a += b * self.scale;
            }
        }
        let objective = inner * inner;
        let objective_grad: Vec<f64> = inner_grad.iter().map(|g| 2.0 * inner * g).collect();
        let mut constraints: Vec<f64> = node_val.iter().map(|v| v * self.scale).collect();
        let mut constraint_grads: Vec<Vec<f64>> = node_grad
            .into_iter()
            .map(|g| g.into_iter().map(|v| v * self.scale).collect())
            .collect();
        if self.objective_cap {
            constraints.push(objective - 0.5);
            constraint_grads.push(objective_grad.clone());
        }
        Evaluation {
            objective,
            objective_grad,
            constraints,
            constraint_grads,
        }
    }

    /// Augmented Lagrangian value and gradient for multipliers `mult` and penalty `rho`.
    fn lagrangian(&self, p: &[f64], mult: &[f64], rho: f64) -> (f64, Vec<f64>) {
        let e = self.evaluate(p);
        let mut value = e.objective;
        let mut grad = e.objective_grad;
        for ((g, gg), y) in e.constraints.iter().zip(&e.constraint_grads).zip(mult) {
            let shifted = (y + rho * g).max(0.0);
            value += (shifted * shifted - y * y) / (2.0 * rho);
            if shifted > 0.0 {
                for (a, b) in grad.iter_mut().zip(gg) {
                    *a += shifted * b;
                }
            }
        }
        (value, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub p: Vec<f64>,
    /// `||p - Proj(p - grad L)||` of the scaled augmented Lagrangian at `p`.
    pub kkt_residual: f64,
    /// Largest scaled constraint violation at `p`.
    pub max_violation: f64,
    /// Scaled surrogate objective at `p` and at the reference point.
    pub objective: f64,
    pub reference_objective: f64,
}

fn projected_residual(set: &PowerSet, p: &[f64], grad: &[f64]) -> f64 {
    let mut q: Vec<f64> = p.iter().zip(grad).map(|(a, b)| a - b).collect();
    set.project(&mut q);
    distance(p, &q)
}

/// Monotone accelerated projected gradient with backtracking and restart.
fn minimize_lagrangian(
    sub: &Subproblem,
    set: &PowerSet,
    start: &[f64],
    mult: &[f64],
    rho: f64,
    settings: &MmSettings,
    initial_lipschitz: f64,
) -> (Vec<f64>, f64) {
    let mut lip = initial_lipschitz;
    let mut x = start.to_vec();
    let (mut fx, mut gx) = sub.lagrangian(&x, mult, rho);
    let mut y = x.clone();
    let (mut fy, mut gy) = (fx, gx.clone());
    let mut momentum = 1.0f64;
    for it in 0..settings.max_inner {
        let (z, fz, gz) = loop {
            let mut z: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - g / lip).collect();
            set.project(&mut z);
            let (fz, gz) = sub.lagrangian(&z, mult, rho);
            let model: f64 = fy
                + z.iter()
                    .zip(&y)
                    .zip(&gy)
                    .map(|((a, b), g)| g * (a - b) + 0.5 * lip * (a - b).powi(2))
                    .sum::<f64>();
            if fz <= model + 1e-15 * fz.abs() || lip > 1e30 {
                break (z, fz, gz);
            }
            lip *= 2.0;
        };
        if fz > fx {
            // Restart from the best point.
            momentum = 1.0;
            y = x.clone();
            fy = fx;
            gy = gx.clone();
            if it > 0 {
                continue;
            }
            break;
        }
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        y = z.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
        momentum = next;
        x = z;
        fx = fz;
        gx = gz;
        if y != x {
            set.project(&mut y);
            (fy, gy) = sub.lagrangian(&y, mult, rho);
        } else {
            fy = fx;
            gy = gx.clone();
        }
        if it % 5 == 0 && projected_residual(set, &x, &gx) <= settings.inner_tol {
            break;
        }
        lip *= 0.9;
    }
    (x, lip)
}

fn solve_subproblem(
    prob: &AllocationProblem,
    p_ref: &[f64],
    settings: &MmSettings,
    initial_lipschitz: f64,
) -> InnerSolution {
    let set = PowerSet::new(prob, settings.node_budgets.as_deref());
    let sub = Subproblem::new(prob, p_ref, settings.objective_cap);
    let mut start = p_ref.to_vec();
    set.project(&mut start);
    let reference = sub.evaluate(&start);
    let reference_feasible = reference.constraints.iter().all(|g| *g <= 0.0);
    let mut mult = vec![0.0; sub.num_constraints()];
    let mut rho = settings.inner_penalty;
    let mut x = start.clone();
    let mut lip = initial_lipschitz;
    let mut last_violation = f64::INFINITY;
    // Points that do not raise the surrogate above its reference value.
    let mut fallback: Option<Vec<f64>> = None;
    for _ in 0..50 {
        let (next, l) = minimize_lagrangian(&sub, &set, &x, &mult, rho, settings, lip);
        let moved = distance(&next, &x);
        x = next;
        lip = l.max(initial_lipschitz);
        let e = sub.evaluate(&x);
        let violation = e.constraints.iter().fold(0.0f64, |m, g| m.max(*g));
        if e.objective <= reference.objective {
            fallback = Some(x.clone());
        }
        for (y, g) in mult.iter_mut().zip(&e.constraints) {
            *y = (*y + rho * g).max(0.0);
        }
        let (_, grad) = sub.lagrangian(&x, &mult, rho);
        let residual = projected_residual(&set, &x, &grad);
        if violation <= settings.inner_tol && residual <= settings.inner_tol.sqrt() {
            break;
        }
        // An infeasible subproblem settles on the least-violating point.
        if violation >= last_violation * (1.0 - 1e-6) && moved <= settings.outer_tol * 1e-3 {
            break;
        }
        if violation > 0.25 * last_violation {
            rho = (rho * 10.0).min(1e8);
        }
        last_violation = violation;
    }
    let mut e = sub.evaluate(&x);
    if reference_feasible && e.objective > reference.objective {
        if let Some(f) = fallback {
            x = f;
            e = sub.evaluate(&x);
        }
    }
    let (_, grad) = sub.lagrangian(&x, &mult, rho);
    InnerSolution {
        kkt_residual: projected_residual(&set, &x, &grad),
        max_violation: e.constraints.iter().fold(0.0f64, |m, g| m.max(*g)),
        objective: e.objective,
        reference_objective: reference.objective,
        p: x,
    }
}

/// Solves the convex subproblem at `p_ref`.
///
/// When `p_ref` satisfies the subproblem's constraints the result does not
/// increase the surrogate; otherwise the step is retried once with a halved
/// initial step size before an inner-failure error is raised.
pub fn solve_inner(
    prob: &AllocationProblem,
    p_ref: &[f64],
    settings: &MmSettings,
) -> Result<InnerSolution> {
    settings.validate(prob)?;
    prob.check_power(p_ref)?;
    let mut lipschitz = 1e-3;
    for _ in 0..2 {
        let sol = solve_subproblem(prob, p_ref, settings, lipschitz);
        let sub = Subproblem::new(prob, p_ref, settings.objective_cap);
        let mut start = p_ref.to_vec();
        PowerSet::new(prob, settings.node_budgets.as_deref()).project(&mut start);
        let feasible = sub.evaluate(&start).constraints.iter().all(|g| *g <= 0.0);
        let tolerance = 1e-12 * (1.0 + sol.reference_objective);
        if !sol.objective.is_finite() || sol.p.iter().any(|v| !v.is_finite()) {
            lipschitz *= 2.0;
            continue;
        }
        if !feasible || sol.objective <= sol.reference_objective + tolerance {
            return Ok(sol);
        }
        lipschitz *= 2.0;
    }
    Err(Error::InnerFailure(format!(
        "no sufficient decrease within {} iterations",
        settings.max_inner
    )))
}

/// Point on the segment `from -> to` where the sample surplus crosses zero.
/// Requires `psi(from) <= 0 <= psi(to)`.
fn zero_crossing(prob: &AllocationProblem, from: &[f64], to: &[f64]) -> Vec<f64> {
    let at = |s: f64| -> Vec<f64> { from.iter().zip(to).map(|(a, b)| a + s * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if prob.psi_unchecked(&at(mid)) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Prefer the side with the smaller residual.
    let (a, b) = (at(lo), at(hi));
    if prob.psi_unchecked(&a).abs() <= prob.psi_unchecked(&b).abs() {
        a
    } else {
        b
    }
}

/// Runs the MM outer loop from the uniform allocation.
pub fn solve_mm(prob: &AllocationProblem, settings: &MmSettings) -> Result<AllocationResult> {
    settings.validate(prob)?;
    let start = PowerSet::new(prob, settings.node_budgets.as_deref()).uniform();
    solve_mm_from(prob, settings, &start)
}

/// Runs the MM outer loop from a feasible starting point.
pub fn solve_mm_from(
    prob: &AllocationProblem,
    settings: &MmSettings,
    start: &[f64],
) -> Result<AllocationResult> {
    settings.validate(prob)?;
    prob.check_power(start)?;
    let set = PowerSet::new(prob, settings.node_budgets.as_deref());
    let mut p = start.to_vec();
    set.project(&mut p);
    let mut result = AllocationResult::start(prob, &p);
    let target = 1e-6 * prob.total_cap().powi(2);

    if prob.psi_unchecked(&p) >= 0.0 {
        let zero = vec![0.0; p.len()];
        let exact = zero_crossing(prob, &zero, &p);
        result.record(prob, exact);
        result.status = SolveStatus::RegimeExit;
        return Ok(result);
    }

    for _ in 0..settings.max_outer {
        let phi = result.objective();
        if phi <= target {
            result.status = SolveStatus::Converged;
            return Ok(result);
        }
        let cand = solve_inner(prob, &p, settings)?.p;
        if prob.psi_unchecked(&cand) > 0.0 {
            let exact = zero_crossing(prob, &p, &cand);
            result.record(prob, exact);
            result.status = SolveStatus::RegimeExit;
            return Ok(result);
        }
        let mut next = None;
        let mut s = 1.0;
        for _ in 0..30 {
            let trial: Vec<f64> = p.iter().zip(&cand).map(|(a, b)| a + s * (b - a)).collect();
            if prob.psi_unchecked(&trial).powi(2) <= phi {
                next = Some(trial);
                break;
            }
            s *= 0.5;
        }
        let Some(next) = next else {
            result.status = SolveStatus::Converged;
            return Ok(result);
        };
        let step = distance(&next, &p);
        p = next.clone();
        result.record(prob, next);
        if step <= settings.outer_tol || result.objective() <= target {
            result.status = SolveStatus::Converged;
            return Ok(result);
        }
    }
    result.status = SolveStatus::MaxIter;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channels, GainMatrix, NetworkConfig, Partition};
    use crate::problem::tests::random_problem;

    fn single(gain: f64, cap: f64, budget: f64) -> AllocationProblem {
        AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![gain]]).unwrap(),
            1.0,
            vec![10.0],
            vec![cap],
            vec![5.0],
            Partition::contiguous(&[1]).unwrap(),
            budget,
        )
        .unwrap()
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) <= f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        f(0.5 * (lo + hi))
    }

    #[test]
    fn single_device_matches_golden_section() {
        // Reachable target, and a target beyond the budget.
        for cap in [30.0, 200.0] {
            let prob = single(0.5, cap, 4.0);
            let r = solve_mm(&prob, &MmSettings::default()).unwrap();
            let best = golden_section(|p| prob.phi_global(&[p]).unwrap(), 0.0, 4.0);
            let got = r.objective();
            assert!(got <= best + 1e-6 * (1.0 + best), "{got} vs {best}");
            assert!((got - best).abs() <= 1e-3 * (1.0 + best));
        }
    }

    #[test]
    fn unreachable_target_uses_full_budget() {
        let prob = single(0.5, 200.0, 4.0);
        let r = solve_mm(&prob, &MmSettings::default()).unwrap();
        assert!((r.p_opt[0] - 4.0).abs() < 1e-8);
        assert_eq!(r.status, SolveStatus::Converged);
    }

    #[test]
    fn reachable_target_exits_regime() {
        let prob = single(0.5, 30.0, 400.0);
        let r = solve_mm(&prob, &MmSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::RegimeExit);
        assert!(prob.psi(&r.p_opt).unwrap().abs() < 1e-9);
    }

    #[test]
    fn symmetric_pair_stays_symmetric() {
        let prob = AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![2.0, 0.3], vec![0.3, 2.0]]).unwrap(),
            1.0,
            vec![10.0, 10.0],
            vec![60.0, 60.0],
            vec![5.0, 5.0],
            Partition::contiguous(&[1, 1]).unwrap(),
            3.0,
        )
        .unwrap();
        let r = solve_mm(&prob, &MmSettings::default()).unwrap();
        let (a, b) = (r.p_opt[0], r.p_opt[1]);
        assert!((a - b).abs() <= 1e-6 * a.max(b), "{a} vs {b}");
    }

    #[test]
    fn descent_on_random_instances() {
        for seed in 0..10 {
            let prob = random_problem(seed, 8, 2);
            let r = solve_mm(&prob, &MmSettings::default()).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", r.objective_trace);
            }
            assert!(r.p_opt.iter().all(|v| *v >= 0.0));
            assert!(r.p_opt.iter().sum::<f64>() <= prob.budget() + 1e-9);
        }
    }

    #[test]
    fn reference_scale_beats_uniform() {
        let cfg = NetworkConfig::reference(10, 20, 7).unwrap();
        let ch = sample_channels(&cfg, 7).unwrap();
        let prob = AllocationProblem::from_network(&cfg, ch.gains).unwrap();
        let r = solve_mm(&prob, &MmSettings::default()).unwrap();
        let uniform = prob.phi_global(&[2.5; 20]).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(r.objective() <= 0.9 * uniform, "{} vs {uniform}", r.objective());
    }

    #[test]
    fn fixed_point_returns_in_one_iteration() {
        let prob = random_problem(3, 6, 2);
        let settings = MmSettings::default();
        let first = solve_mm(&prob, &settings).unwrap();
        assert_eq!(first.status, SolveStatus::Converged);
        let again = solve_mm_from(&prob, &settings, &first.p_opt).unwrap();
        assert!(again.iterations <= 1);
    }

    #[test]
    fn inner_start_at_optimum_is_unchanged() {
        let prob = single(0.5, 200.0, 4.0);
        let sol = solve_inner(&prob, &[4.0], &MmSettings::default()).unwrap();
        assert!((sol.p[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn inner_interior_optimum_has_small_residual() {
        // Target reachable well inside the budget.
        let prob = single(0.5, 30.0, 400.0);
        let settings = MmSettings::default();
        let sol = solve_inner(&prob, &[1.0], &settings).unwrap();
        assert!(sol.kkt_residual < settings.inner_tol, "{}", sol.kkt_residual);
        assert!(sol.p[0] < 400.0);
    }

    #[test]
    fn inner_budget_active() {
        // Interference-free, so more power always means more samples.
        let prob = AllocationProblem::new(
            GainMatrix::from_rows(vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0],
                vec![0.0, 0.0, 2.0],
            ])
            .unwrap(),
            0.1,
            vec![10.0, 12.0, 8.0],
            vec![400.0, 400.0],
            vec![0.0, 0.0],
            Partition::contiguous(&[2, 1]).unwrap(),
            6.0,
        )
        .unwrap();
        let p = vec![1.0; 3];
        let sol = solve_inner(&prob, &p, &MmSettings::default()).unwrap();
        assert!((sol.p.iter().sum::<f64>() - prob.budget()).abs() < 1e-8);
        assert!(sol.objective <= sol.reference_objective);
    }

    #[test]
    fn strict_mode_respects_node_budgets() {
        let prob = random_problem(9, 6, 3);
        let settings = MmSettings {
            node_budgets: Some(vec![2.0, 6.0]),
            ..MmSettings::default()
        };
        let r = solve_mm(&prob, &settings).unwrap();
        assert!(r.p_opt[..3].iter().sum::<f64>() <= 2.0 + 1e-9);
        assert!(r.p_opt[3..].iter().sum::<f64>() <= 6.0 + 1e-9);
        let bad = MmSettings {
            node_budgets: Some(vec![8.0, 6.0]),
            ..MmSettings::default()
        };
        assert!(matches!(solve_mm(&prob, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn dead_devices_get_no_power() {
        let prob = AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![0.0, 0.0], vec![0.1, 1.0]]).unwrap(),
            1.0,
            vec![5.0, 5.0],
            vec![500.0],
            vec![0.0],
            Partition::contiguous(&[2]).unwrap(),
            3.0,
        )
        .unwrap();
        let r = solve_mm(&prob, &MmSettings::default()).unwrap();
        assert_eq!(r.p_opt[0], 0.0);
        assert!((r.p_opt[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn objective_cap_can_be_disabled() {
        let prob = random_problem(12, 6, 2);
        let on = solve_mm(&prob, &MmSettings::default()).unwrap();
        let off = solve_mm(
            &prob,
            &MmSettings {
                objective_cap: false,
                ..MmSettings::default()
            },
        )
        .unwrap();
        assert!((on.objective() - off.objective()).abs() <= 1e-6 * (1.0 + on.objective()));
    }
}
