//! Sample-target objective and its surrogates.
//!
//! With `s_k = G_kk p_k / sigma^2`, `u_k(p) = 1 + sum_{l != k} G_kl p_l / sigma^2`
//! and `c_k = B T / (V_k ln 2)`, the signed sample surplus is
//!
//! ```text
//! psi(p) = sum_k c_k ln(1 + s_k / u_k(p)) + A - D
//! ```
//!
//! and the objective is `psi^2`. Linearising `-ln u_k` at `p*` gives the
//! concave minorant `psi~(p | p*) <= psi(p)`; its square majorizes `psi^2`
//! wherever `psi(p) <= 0`.

use std::io::Write;

use crate::channel::{GainMatrix, NetworkConfig, Partition};
use crate::error::{Error, Result};
use crate::lossmodel::{min_samples, BoundParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    gains: GainMatrix,
    noise: f64,
    /// `G / sigma^2`, row-major.
    snr: Vec<f64>,
    scale: Vec<f64>,
    caps: Vec<f64>,
    initials: Vec<f64>,
    partition: Partition,
    budget: f64,
    bound: Option<BoundParams>,
}

impl AllocationProblem {
    /// `scale` is the per-device `B T / (V_k ln 2)`; `caps` and `initials` are per node.
    pub fn new(
        gains: GainMatrix,
        noise: f64,
        scale: Vec<f64>,
        caps: Vec<f64>,
        initials: Vec<f64>,
        partition: Partition,
        budget: f64,
    ) -> Result<Self> {
        let k = gains.dim();
        if partition.num_devices() != k {
            return Err(Error::config(format!(
                "partition covers {} devices, gain matrix has {k}",
                partition.num_devices()
            )));
        }
        if !(noise.is_finite() && noise > 0.0) {
            return Err(Error::config(format!("noise must be positive, got {noise}")));
        }
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::config(format!("power budget must be positive, got {budget}")));
        }
        if scale.len() != k || scale.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::config("need one positive scale factor per device"));
        }
        let nodes = partition.num_nodes();
        if caps.len() != nodes || initials.len() != nodes {
            return Err(Error::config(format!("need {nodes} dataset caps and initial counts")));
        }
        for (i, (&d, &a)) in caps.iter().zip(&initials).enumerate() {
            if !(d > 0.0 && a >= 0.0 && a <= d && d.is_finite()) {
                return Err(Error::config(format!(
                    "node {i}: need 0 <= A_i <= D_i, D_i > 0, got A_i = {a}, D_i = {d}"
                )));
            }
        }
        let snr = (0..k)
            .flat_map(|r| gains.row(r).iter().map(|g| g / noise).collect::<Vec<_>>())
            .collect();
        Ok(Self {
            gains,
            noise,
            snr,
            scale,
            caps,
            initials,
            partition,
            budget,
            bound: None,
        })
    }

    pub fn from_network(cfg: &NetworkConfig, gains: GainMatrix) -> Result<Self> {
        cfg.validate()?;
        let scale = (0..cfg.num_devices())
            .map(|k| cfg.samples_per_rate(k) / std::f64::consts::LN_2)
            .collect();
        Self::new(
            gains,
            cfg.noise_mw,
            scale,
            cfg.dataset_caps.iter().map(|&d| d as f64).collect(),
            cfg.initial_samples.iter().map(|&a| a as f64).collect(),
            cfg.partition.clone(),
            cfg.power_budget_mw,
        )
    }

    pub fn with_bound(mut self, params: BoundParams) -> Self {
        self.bound = Some(params);
        self
    }

    /// Same problem with the initial sample counts replaced.
    pub fn with_initials(self, initials: Vec<f64>) -> Result<Self> {
        if initials.len() != self.num_nodes() {
            return Err(Error::config("one initial count per node required"));
        }
        let p = Self::new(
            self.gains,
            self.noise,
            self.scale,
            self.caps,
            initials,
            self.partition,
            self.budget,
        )?;
        Ok(Self { bound: self.bound, ..p })
    }

    /// Restriction to a subset of nodes. Returns the subproblem and, for each
    /// of its devices, the device index in `self`.
    pub fn restrict(&self, nodes: &[usize]) -> Result<(Self, Vec<usize>)> {
        if nodes.is_empty() {
            return Err(Error::config("restriction to an empty node set"));
        }
        let mut devices = Vec::new();
        let mut sizes = Vec::new();
        for &i in nodes {
            if i >= self.num_nodes() {
                return Err(Error::Index(format!("node {i} out of range")));
            }
            devices.extend_from_slice(self.partition.devices(i));
            sizes.push(self.partition.devices(i).len());
        }
        let sub = Self::new(
            self.gains.submatrix(&devices),
            self.noise,
            devices.iter().map(|&k| self.scale[k]).collect(),
            nodes.iter().map(|&i| self.caps[i]).collect(),
            nodes.iter().map(|&i| self.initials[i]).collect(),
            Partition::contiguous(&sizes)?,
            self.budget,
        )?;
        Ok((Self { bound: self.bound, ..sub }, devices))
    }

    pub fn gains(&self) -> &GainMatrix {
        &self.gains
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn initials(&self) -> &[f64] {
        &self.initials
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn bound(&self) -> Option<&BoundParams> {
        self.bound.as_ref()
    }

    pub fn num_devices(&self) -> usize {
        self.gains.dim()
    }

    pub fn num_nodes(&self) -> usize {
        self.partition.num_nodes()
    }

    pub fn total_cap(&self) -> f64 {
        self.caps.iter().sum()
    }

    pub fn total_initial(&self) -> f64 {
        self.initials.iter().sum()
    }

    /// Nodes whose initial count is below the minimum sample count implied by
    /// the attached bound parameters. Empty when no bound is attached.
    pub fn warm_up_nodes(&self) -> Vec<usize> {
        let Some(b) = self.bound else {
            return Vec::new();
        };
        (0..self.num_nodes())
            .filter(|&i| self.initials[i] < min_samples(self.caps[i], b.xi2))
            .collect()
    }

    pub fn needs_warm_up(&self) -> bool {
        !self.warm_up_nodes().is_empty()
    }

    /// Devices with a zero direct gain; they can never deliver samples.
    pub fn is_dead(&self, device: usize) -> bool {
        self.snr_at(device, device) == 0.0
    }

    #[inline]
    pub(crate) fn snr_at(&self, k: usize, l: usize) -> f64 {
        self.snr[k * self.gains.dim() + l]
    }

    #[inline]
    fn snr_row(&self, k: usize) -> &[f64] {
        let n = self.gains.dim();
        &self.snr[k * n..(k + 1) * n]
    }

    pub fn check_power(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_devices() {
            return Err(Error::Index(format!(
                "power vector has {} entries, expected {}",
                p.len(),
                self.num_devices()
            )));
        }
        if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(format!("powers must be finite and nonnegative, got {v}")));
        }
        Ok(())
    }

    /// Interference-plus-noise `u_k(p)`, normalised by noise.
    #[inline]
    pub(crate) fn interference(&self, k: usize, p: &[f64]) -> f64 {
        let row = self.snr_row(k);
        1.0 + row
            .iter()
            .zip(p)
            .enumerate()
            .filter(|(l, _)| *l != k)
            .map(|(_, (g, q))| g * q)
            .sum::<f64>()
    }

    /// Expected samples delivered by device `k` (continuous relaxation).
    #[inline]
    pub(crate) fn device_samples(&self, k: usize, p: &[f64]) -> f64 {
        let u = self.interference(k, p);
        self.scale[k] * (self.snr_at(k, k) * p[k] / u).ln_1p()
    }

    fn surrogate_term(&self, k: usize, p: &[f64], p_ref: &[f64], u_ref: f64) -> f64 {
        let row = self.snr_row(k);
        let shift: f64 = row
            .iter()
            .zip(p.iter().zip(p_ref))
            .enumerate()
            .filter(|(l, _)| *l != k)
            .map(|(_, (g, (a, b)))| g * (a - b))
            .sum();
        let direct = row[k] * p[k];
        self.scale[k] * (((direct + shift) / u_ref).ln_1p() - shift / u_ref)
    }

    pub(crate) fn psi_unchecked(&self, p: &[f64]) -> f64 {
        let collected: f64 = (0..self.num_devices()).map(|k| self.device_samples(k, p)).sum();
        collected + self.total_initial() - self.total_cap()
    }

    pub(crate) fn surrogate_inner_unchecked(&self, p: &[f64], p_ref: &[f64]) -> f64 {
        let collected: f64 = (0..self.num_devices())
            .map(|k| self.surrogate_term(k, p, p_ref, self.interference(k, p_ref)))
            .sum();
        collected + self.total_initial() - self.total_cap()
    }

    /// Signed sample surplus `psi(p)`: collected plus initial minus target.
    pub fn psi(&self, p: &[f64]) -> Result<f64> {
        self.check_power(p)?;
        Ok(self.psi_unchecked(p))
    }

    /// Squared deviation of the collected sample count from the target.
    pub fn phi_global(&self, p: &[f64]) -> Result<f64> {
        Ok(self.psi(p)?.powi(2))
    }

    /// Inner value of the surrogate, `psi~(p | p_ref)`.
    pub fn surrogate_inner(&self, p: &[f64], p_ref: &[f64]) -> Result<f64> {
        self.check_power(p)?;
        self.check_power(p_ref)?;
        Ok(self.surrogate_inner_unchecked(p, p_ref))
    }

    pub fn phi_surrogate(&self, p: &[f64], p_ref: &[f64]) -> Result<f64> {
        Ok(self.surrogate_inner(p, p_ref)?.powi(2))
    }

    /// `d psi / dp`, or `d psi~ / dp` when `p_ref` is given.
    pub(crate) fn inner_gradient(&self, p: &[f64], p_ref: Option<&[f64]>, out: &mut [f64]) {
        out.fill(0.0);
        let n = self.num_devices();
        for k in 0..n {
            let u = self.interference(k, p);
            let tot = u + self.snr_at(k, k) * p[k];
            let u_lin = match p_ref {
                Some(r) => self.interference(k, r),
                None => u,
            };
            let c = self.scale[k];
            for (m, (g, o)) in self.snr_row(k).iter().zip(out.iter_mut()).enumerate() {
                if m == k {
                    *o += c * g / tot;
                } else {
                    *o += c * g * (1.0 / tot - 1.0 / u_lin);
                }
            }
        }
    }

    pub fn grad_psi(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_power(p)?;
        let mut g = vec![0.0; p.len()];
        self.inner_gradient(p, None, &mut g);
        Ok(g)
    }

    pub fn grad_phi_global(&self, p: &[f64]) -> Result<Vec<f64>> {
        let psi = self.psi(p)?;
        let mut g = vec![0.0; p.len()];
        self.inner_gradient(p, None, &mut g);
        g.iter_mut().for_each(|v| *v *= 2.0 * psi);
        Ok(g)
    }

    pub fn grad_surrogate_inner(&self, p: &[f64], p_ref: &[f64]) -> Result<Vec<f64>> {
        self.check_power(p)?;
        self.check_power(p_ref)?;
        let mut g = vec![0.0; p.len()];
        self.inner_gradient(p, Some(p_ref), &mut g);
        Ok(g)
    }

    pub fn grad_phi_surrogate(&self, p: &[f64], p_ref: &[f64]) -> Result<Vec<f64>> {
        let inner = self.surrogate_inner(p, p_ref)?;
        let mut g = vec![0.0; p.len()];
        self.inner_gradient(p, Some(p_ref), &mut g);
        g.iter_mut().for_each(|v| *v *= 2.0 * inner);
        Ok(g)
    }

    /// Second directional derivative of `psi~(. | p_ref)` at `p` along `dir`.
    pub fn surrogate_curvature(&self, p: &[f64], dir: &[f64]) -> Result<f64> {
        self.check_power(p)?;
        Ok(-(0..self.num_devices())
            .map(|k| {
                let tot = self.interference(k, p) + self.snr_at(k, k) * p[k];
                let d: f64 = self.snr_row(k).iter().zip(dir).map(|(g, v)| g * v).sum();
                self.scale[k] * d * d / (tot * tot)
            })
            .sum::<f64>())
    }

    fn check_node(&self, node: usize, local: &[f64], p_ref: &[f64]) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(Error::Index(format!("node {node} out of range")));
        }
        let expect = self.partition.devices(node).len();
        if local.len() != expect {
            return Err(Error::Index(format!(
                "node {node} has {expect} devices, got {} powers",
                local.len()
            )));
        }
        self.check_power(p_ref)?;
        if let Some(v) = local.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(format!("powers must be finite and nonnegative, got {v}")));
        }
        Ok(())
    }

    /// `p_ref` with node `node`'s entries replaced by `local`.
    pub fn merge(&self, node: usize, local: &[f64], p_ref: &[f64]) -> Vec<f64> {
        let mut full = p_ref.to_vec();
        self.partition.scatter(node, local, &mut full);
        full
    }

    pub(crate) fn node_surrogate_unchecked(&self, node: usize, p: &[f64], p_ref: &[f64]) -> f64 {
        let collected: f64 = self
            .partition
            .devices(node)
            .iter()
            .map(|&k| self.surrogate_term(k, p, p_ref, self.interference(k, p_ref)))
            .sum();
        collected + self.initials[node] - self.caps[node]
    }

    /// Gradient of node `node`'s surrogate surplus with respect to the full power vector.
    pub(crate) fn node_surrogate_gradient(
        &self,
        node: usize,
        p: &[f64],
        p_ref: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
        for &k in self.partition.devices(node) {
            let u = self.interference(k, p);
            let tot = u + self.snr_at(k, k) * p[k];
            let u_ref = self.interference(k, p_ref);
            let c = self.scale[k];
            for (m, (g, o)) in self.snr_row(k).iter().zip(out.iter_mut()).enumerate() {
                if m == k {
                    *o += c * g / tot;
                } else {
                    *o += c * g * (1.0 / tot - 1.0 / u_ref);
                }
            }
        }
    }

    /// Node surrogate surplus with the other nodes' powers frozen at `p_ref`.
    pub fn phi_node(&self, node: usize, local: &[f64], p_ref: &[f64]) -> Result<f64> {
        self.check_node(node, local, p_ref)?;
        Ok(self.node_surrogate_unchecked(node, &self.merge(node, local, p_ref), p_ref))
    }

    /// Gradient of [`Self::phi_node`] over the node's own devices.
    pub fn grad_phi_node(&self, node: usize, local: &[f64], p_ref: &[f64]) -> Result<Vec<f64>> {
        self.check_node(node, local, p_ref)?;
        let full = self.merge(node, local, p_ref);
        let mut g = vec![0.0; full.len()];
        self.node_surrogate_gradient(node, &full, p_ref, &mut g);
        Ok(self.partition.slice(node, &g))
    }

    /// Exact (non-surrogate) sample surplus of one node.
    pub fn node_surplus(&self, node: usize, p: &[f64]) -> Result<f64> {
        self.check_power(p)?;
        if node >= self.num_nodes() {
            return Err(Error::Index(format!("node {node} out of range")));
        }
        let collected: f64 = self
            .partition
            .devices(node)
            .iter()
            .map(|&k| self.device_samples(k, p))
            .sum();
        Ok(collected + self.initials[node] - self.caps[node])
    }

    /// Continuous sample count per node, `A_i` plus delivered samples.
    pub fn samples_per_node(&self, p: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_nodes())
            .map(|i| Ok(self.node_surplus(i, p)? + self.caps[i]))
            .collect()
    }

    /// Squared deviation from the target when each node keeps at most `D_i`
    /// samples. Equals [`Self::phi_global`] whenever no node overshoots its cap.
    pub fn capped_deviation(&self, p: &[f64]) -> Result<f64> {
        let kept: f64 = (0..self.num_nodes())
            .map(|i| Ok(self.node_surplus(i, p)?.min(0.0)))
            .sum::<Result<f64>>()?;
        Ok(kept * kept)
    }

    /// Dumps `node,phi_node,surplus` rows for `p` against reference `p_ref`.
    pub fn write_node_terms_csv<W: Write>(
        &self,
        p: &[f64],
        p_ref: &[f64],
        mut out: W,
    ) -> Result<()> {
        let io = |e: std::io::Error| Error::config(format!("write failed: {e}"));
        writeln!(out, "node,phi_node,surplus").map_err(io)?;
        for i in 0..self.num_nodes() {
            let local = self.partition.slice(i, p);
            let phi = self.phi_node(i, &local, p_ref)?;
            let surplus = self.node_surplus(i, p)?;
            writeln!(out, "{i},{phi},{surplus}").map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random instance with gains around `[0.02, 1]` of noise and one node per `per_node` devices.
    pub(crate) fn random_problem(seed: u64, k: usize, per_node: usize) -> AllocationProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|r| {
                (0..k)
                    .map(|c| {
                        if r == c {
                            rng.random_range(0.2..1.0)
                        } else {
                            rng.random_range(0.0..0.1)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut sizes = vec![per_node; k / per_node];
        if !k.is_multiple_of(per_node) {
            sizes.push(k % per_node);
        }
        let nodes = sizes.len();
        AllocationProblem::new(
            GainMatrix::from_rows(rows).unwrap(),
            0.1,
            (0..k).map(|_| rng.random_range(5.0..20.0)).collect(),
            vec![400.0; nodes],
            vec![20.0; nodes],
            Partition::contiguous(&sizes).unwrap(),
            10.0,
        )
        .unwrap()
    }

    fn symmetric_pair() -> AllocationProblem {
        AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap(),
            1.0,
            vec![10.0, 10.0],
            vec![100.0],
            vec![5.0],
            Partition::contiguous(&[2]).unwrap(),
            2.0,
        )
        .unwrap()
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|m| {
                let h = 1e-6 * (1.0 + p[m].abs());
                let mut up = p.to_vec();
                let mut down = p.to_vec();
                up[m] += h;
                down[m] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_power_gives_initial_deficit() {
        let prob = symmetric_pair();
        assert_eq!(prob.phi_global(&[0.0, 0.0]).unwrap(), 95.0 * 95.0);
    }

    #[test]
    fn symmetric_pair_matches_scalar_recomputation() {
        let prob = symmetric_pair();
        // SINR = 2 / (1 + 1) = 1 for both devices.
        let samples = 2.0 * 10.0 * 2.0f64.ln();
        let expected = (samples + 5.0 - 100.0).powi(2);
        let got = prob.phi_global(&[1.0, 1.0]).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn target_met_gives_zero() {
        let prob = AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![1.0]]).unwrap(),
            1.0,
            vec![1.0],
            vec![1.0 + 3.0f64.ln()],
            vec![1.0],
            Partition::contiguous(&[1]).unwrap(),
            5.0,
        )
        .unwrap();
        assert!(prob.phi_global(&[2.0]).unwrap() < 1e-28);
    }

    #[test]
    fn negative_power_is_rejected() {
        let prob = symmetric_pair();
        assert!(matches!(prob.phi_global(&[-1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(prob.phi_surrogate(&[1.0, 0.0], &[0.0, -0.1]), Err(Error::Domain(_))));
        assert!(matches!(prob.phi_global(&[1.0]), Err(Error::Index(_))));
    }

    #[test]
    fn single_device_surrogate_is_exact() {
        let prob = random_problem(3, 1, 1);
        for (p, r) in [(0.5, 3.0), (7.0, 0.0), (0.0, 9.0)] {
            let a = prob.phi_surrogate(&[p], &[r]).unwrap();
            let b = prob.phi_global(&[p]).unwrap();
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn single_device_gradient_closed_form() {
        let prob = random_problem(5, 1, 1);
        let (g, c) = (prob.snr_at(0, 0), prob.scale()[0]);
        let (d, a) = (prob.total_cap(), prob.total_initial());
        for p in [0.0, 0.3, 4.0] {
            let inner = c * (1.0 + g * p).ln() + a - d;
            let expected = 2.0 * inner * c * g / (1.0 + g * p);
            let got = prob.grad_phi_global(&[p]).unwrap()[0];
            assert!((got - expected).abs() <= 1e-12 * expected.abs());
        }
    }

    #[test]
    fn tangency_and_gradient_consistency() {
        for seed in 0..20 {
            let prob = random_problem(seed, 6, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..3.0)).collect();
            let phi = prob.phi_global(&p).unwrap();
            let sur = prob.phi_surrogate(&p, &p).unwrap();
            assert!((phi - sur).abs() <= 1e-10 * phi);
            let g1 = prob.grad_phi_global(&p).unwrap();
            let g2 = prob.grad_phi_surrogate(&p, &p).unwrap();
            let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let prob = random_problem(seed, 5, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
            let r: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
            let fd = central_difference(|x| prob.phi_surrogate(x, &r).unwrap(), &p);
            let an = prob.grad_phi_surrogate(&p, &r).unwrap();
            for (a, b) in an.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
            let fd = central_difference(|x| prob.phi_global(x).unwrap(), &p);
            let an = prob.grad_phi_global(&p).unwrap();
            for (a, b) in an.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn node_terms_sum_to_surrogate_inner() {
        let prob = random_problem(11, 9, 3);
        let p: Vec<f64> = (0..9).map(|k| 0.3 * k as f64).collect();
        let sum: f64 = (0..prob.num_nodes())
            .map(|i| prob.phi_node(i, &prob.partition().slice(i, &p), &p).unwrap())
            .sum();
        let inner = prob.surrogate_inner(&p, &p).unwrap();
        assert!((sum - inner).abs() <= 1e-10 * inner.abs());
    }

    #[test]
    fn node_term_at_zero() {
        let prob = random_problem(2, 4, 2);
        let zero = vec![0.0; 4];
        assert_eq!(prob.phi_node(1, &[0.0, 0.0], &zero).unwrap(), 20.0 - 400.0);
    }

    #[test]
    fn node_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let prob = random_problem(seed, 6, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 31);
            let r: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..3.0)).collect();
            let local: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..3.0)).collect();
            let node = (seed % 2) as usize;
            let fd = central_difference(|x| prob.phi_node(node, x, &r).unwrap(), &local);
            let an = prob.grad_phi_node(node, &local, &r).unwrap();
            for (a, b) in an.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn node_gradient_is_positive_at_reference() {
        let prob = random_problem(4, 6, 3);
        let r = vec![1.0; 6];
        for i in 0..2 {
            let g = prob.grad_phi_node(i, &prob.partition().slice(i, &r), &r).unwrap();
            assert!(g.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn dead_device_has_zero_node_gradient() {
        let prob = AllocationProblem::new(
            GainMatrix::from_rows(vec![vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            1.0,
            vec![3.0, 3.0],
            vec![50.0],
            vec![1.0],
            Partition::contiguous(&[2]).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(prob.is_dead(0));
        let g = prob.grad_phi_node(0, &[0.5, 0.5], &[0.2, 0.2]).unwrap();
        assert_eq!(g[0], 0.0);
        // Single active device: derivative of c ln(1 + g p).
        assert!((g[1] - 3.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn warm_up_flag() {
        let prob = random_problem(1, 4, 2);
        assert!(!prob.needs_warm_up());
        let bound = BoundParams {
            xi1: 1.0,
            xi2: 1.0,
            smoothness: 1.0,
            initial_gap: 1.0,
        };
        // min_samples(400, 1) = 200 > A_i = 20.
        let flagged = prob.clone().with_bound(bound);
        assert_eq!(flagged.warm_up_nodes(), vec![0, 1]);
        let ok = prob
            .with_initials(vec![200.0, 199.0])
            .unwrap()
            .with_bound(bound);
        assert_eq!(ok.warm_up_nodes(), vec![1]);
    }

    #[test]
    fn restriction_keeps_node_terms() {
        let prob = random_problem(8, 6, 2);
        let (sub, devices) = prob.restrict(&[0, 2]).unwrap();
        assert_eq!(devices, vec![0, 1, 4, 5]);
        let p = vec![1.0, 2.0, 0.0, 0.0, 0.5, 0.7];
        let sp: Vec<f64> = devices.iter().map(|&k| p[k]).collect();
        assert!((sub.node_surplus(1, &sp).unwrap() - prob.node_surplus(2, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn capped_deviation_discards_overshoot() {
        let prob = random_problem(8, 4, 2);
        let small = vec![0.01; 4];
        assert_eq!(prob.capped_deviation(&small).unwrap(), prob.phi_global(&small).unwrap());
        let loud = prob.clone().with_initials(vec![400.0, 100.0]).unwrap();
        let p = vec![1.0; 4];
        let deficit = loud.node_surplus(1, &p).unwrap();
        assert!(deficit < 0.0);
        assert!((loud.capped_deviation(&p).unwrap() - deficit * deficit).abs() < 1e-9);
    }

    #[test]
    fn node_dump_layout() {
        let prob = random_problem(8, 4, 2);
        let p = vec![1.0; 4];
        let mut buf = Vec::new();
        prob.write_node_terms_csv(&p, &p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("node,phi_node,surplus\n0,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn surrogate_majorizes_in_deficit_regime(
            seed in 0u64..1000,
            k in 1usize..=10,
            xs in proptest::collection::vec(0.0f64..10.0, 20),
        ) {
            let prob = random_problem(seed, k, 2);
            let p = &xs[..k];
            let r = &xs[10..10 + k];
            let psi = prob.psi(p).unwrap();
            prop_assume!(psi <= 0.0);
            let phi = prob.phi_global(p).unwrap();
            let sur = prob.phi_surrogate(p, r).unwrap();
            prop_assert!(phi <= sur + 1e-9 * (1.0 + sur));
            prop_assert!(prob.surrogate_inner(p, r).unwrap() <= psi + 1e-9 * psi.abs());
        }

        #[test]
        fn surrogate_inner_is_concave(
            seed in 0u64..1000,
            xs in proptest::collection::vec(0.0f64..10.0, 8),
            dir in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let prob = random_problem(seed, 8, 3);
            prop_assert!(prob.surrogate_curvature(&xs, &dir).unwrap() <= 1e-12);
        }
    }
}
