//! Uplink channel model.
//!
//! Devices are grouped under edge nodes by a [`Partition`]. Each device `k`
//! has an `N`-antenna small-scale fading vector `h_k` and a linear path loss
//! `rho_k`. After receive processing the composite gain seen when decoding
//! device `k` is
//!
//! ```text
//! G[k][k] = rho_k * ||h_k||^2
//! G[k][l] = rho_l * |h_k^H h_l|^2 / ||h_k||^2      (l != k)
//! ```
//!
//! and the achievable rate is `log2(1 + G[k][k] p_k / (sum_{l != k} G[k][l] p_l + sigma^2))`,
//! with the interference sum running over every other device in the network.

use std::io::Write;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `10^(db/10)`.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Power in dBm to milliwatts.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    db_to_linear(dbm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MegabyteConvention {
    /// 1 MB = 10^6 bytes.
    #[default]
    Decimal,
    /// 1 MB = 2^20 bytes.
    Binary,
}

impl MegabyteConvention {
    pub fn bits(self, megabytes: f64) -> f64 {
        let bytes = match self {
            MegabyteConvention::Decimal => 1e6,
            MegabyteConvention::Binary => 1_048_576.0,
        };
        megabytes * bytes * 8.0
    }
}

/// Assignment of devices `0..K` to edge nodes `0..I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    nodes: Vec<Vec<usize>>,
    node_of: Vec<usize>,
}

impl Partition {
    /// Builds a partition from explicit device lists. The lists must cover
    /// `0..K` exactly once and no node may be empty.
    pub fn new(nodes: Vec<Vec<usize>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::config("partition has no nodes"));
        }
        let num_devices: usize = nodes.iter().map(Vec::len).sum();
        let mut node_of = vec![usize::MAX; num_devices];
        for (i, devices) in nodes.iter().enumerate() {
            if devices.is_empty() {
                return Err(Error::config(format!("node {i} has no devices")));
            }
            for &k in devices {
                if k >= num_devices {
                    return Err(Error::config(format!(
                        "device index {k} out of range for {num_devices} devices"
                    )));
                }
                if node_of[k] != usize::MAX {
                    return Err(Error::config(format!("device {k} assigned twice")));
                }
                node_of[k] = i;
            }
        }
        Ok(Self { nodes, node_of })
    }

    /// Consecutive blocks of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut next = 0;
        let nodes = sizes
            .iter()
            .map(|&n| {
                let block: Vec<usize> = (next..next + n).collect();
                next += n;
                block
            })
            .collect();
        Self::new(nodes)
    }

    /// `num_devices` split into `num_nodes` consecutive blocks whose sizes
    /// differ by at most one.
    pub fn even(num_nodes: usize, num_devices: usize) -> Result<Self> {
        if num_nodes == 0 || num_devices < num_nodes {
            return Err(Error::config(format!(
                "cannot split {num_devices} devices over {num_nodes} nodes"
            )));
        }
        let base = num_devices / num_nodes;
        let extra = num_devices % num_nodes;
        let sizes: Vec<usize> = (0..num_nodes)
            .map(|i| base + usize::from(i < extra))
            .collect();
        Self::contiguous(&sizes)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_devices(&self) -> usize {
        self.node_of.len()
    }

    pub fn devices(&self, node: usize) -> &[usize] {
        &self.nodes[node]
    }

    pub fn node_of(&self, device: usize) -> usize {
        self.node_of[device]
    }

    pub fn nodes(&self) -> &[Vec<usize>] {
        &self.nodes
    }

    /// Sum of `values[k]` over the devices of `node`.
    pub fn node_sum(&self, node: usize, values: &[f64]) -> f64 {
        self.nodes[node].iter().map(|&k| values[k]).sum()
    }

    /// Copies the entries of `node` out of a full device vector.
    pub fn slice(&self, node: usize, values: &[f64]) -> Vec<f64> {
        self.nodes[node].iter().map(|&k| values[k]).collect()
    }

    /// Writes node-local entries back into a full device vector.
    pub fn scatter(&self, node: usize, local: &[f64], full: &mut [f64]) {
        for (&k, &v) in self.nodes[node].iter().zip(local) {
            full[k] = v;
        }
    }
}

/// Static scenario parameters. Powers in mW, bandwidth in Hz, time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub partition: Partition,
    pub num_antennas: usize,
    pub power_budget_mw: f64,
    pub bandwidth_hz: f64,
    pub tx_time_s: f64,
    /// Bits per data sample, one entry per device.
    pub bits_per_sample: Vec<f64>,
    pub noise_mw: f64,
    /// Linear path loss per device.
    pub path_loss: Vec<f64>,
    /// Dataset caps `D_i`, one per node.
    pub dataset_caps: Vec<u64>,
    /// Initial (historical) samples `A_i`, one per node.
    pub initial_samples: Vec<u64>,
    pub rng_seed: u64,
}

impl NetworkConfig {
    /// Simulation defaults: N = 4 antennas, P = 50 mW, B = 4 MHz, T = 200 s,
    /// 0.7 MB samples, -77 dBm noise, -90 dB path loss, A_i = 50.
    /// Dataset caps default to 300 samples per node.
    pub fn reference(num_nodes: usize, num_devices: usize, seed: u64) -> Result<Self> {
        let partition = Partition::even(num_nodes, num_devices)?;
        Ok(Self {
            partition,
            num_antennas: 4,
            power_budget_mw: 50.0,
            bandwidth_hz: 4e6,
            tx_time_s: 200.0,
            bits_per_sample: vec![MegabyteConvention::Decimal.bits(0.7); num_devices],
            noise_mw: dbm_to_mw(-77.0),
            path_loss: vec![db_to_linear(-90.0); num_devices],
            dataset_caps: vec![300; num_nodes],
            initial_samples: vec![50; num_nodes],
            rng_seed: seed,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.partition.num_nodes()
    }

    pub fn num_devices(&self) -> usize {
        self.partition.num_devices()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_devices();
        let i = self.num_nodes();
        if self.num_antennas == 0 {
            return Err(Error::config("num_antennas must be positive"));
        }
        let positive = [
            ("power_budget_mw", self.power_budget_mw),
            ("bandwidth_hz", self.bandwidth_hz),
            ("tx_time_s", self.tx_time_s),
            ("noise_mw", self.noise_mw),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bits_per_sample.len() != k || self.path_loss.len() != k {
            return Err(Error::config(format!(
                "per-device vectors must have {k} entries"
            )));
        }
        if let Some(v) = self
            .bits_per_sample
            .iter()
            .chain(&self.path_loss)
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::config(format!(
                "bits per sample and path loss must be positive, got {v}"
            )));
        }
        if self.dataset_caps.len() != i || self.initial_samples.len() != i {
            return Err(Error::config(format!("per-node vectors must have {i} entries")));
        }
        for (node, (&d, &a)) in self.dataset_caps.iter().zip(&self.initial_samples).enumerate() {
            if d == 0 || a > d {
                return Err(Error::config(format!(
                    "node {node}: need D_i > 0 and D_i >= A_i, got D_i = {d}, A_i = {a}"
                )));
            }
        }
        Ok(())
    }

    /// `B * T / V_k`: samples delivered per bit/s/Hz of rate.
    pub fn samples_per_rate(&self, device: usize) -> f64 {
        self.bandwidth_hz * self.tx_time_s / self.bits_per_sample[device]
    }
}

/// Dense `K x K` composite gain matrix, row `k` is what the decoder of device `k` sees.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl GainMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::config("gain matrix must be square"));
        }
        if rows.iter().flatten().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::config("gains must be finite and nonnegative"));
        }
        Ok(Self {
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }

    /// Composite gains from fading vectors and linear path losses.
    pub fn from_fading(fading: &[Vec<Complex64>], path_loss: &[f64]) -> Self {
        let dim = fading.len();
        let mut data = vec![0.0; dim * dim];
        for k in 0..dim {
            let hk = &fading[k];
            let norm_sq: f64 = hk.iter().map(Complex64::norm_sqr).sum();
            if norm_sq == 0.0 {
                continue;
            }
            for l in 0..dim {
                data[k * dim + l] = if l == k {
                    path_loss[k] * norm_sq
                } else {
                    let inner: Complex64 = hk
                        .iter()
                        .zip(&fading[l])
                        .map(|(a, b)| a.conj() * b)
                        .sum();
                    path_loss[l] * inner.norm_sqr() / norm_sq
                };
            }
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.data[k * self.dim + l]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Principal submatrix on the given device indices.
    pub fn submatrix(&self, devices: &[usize]) -> Self {
        let dim = devices.len();
        let mut data = Vec::with_capacity(dim * dim);
        for &k in devices {
            for &l in devices {
                data.push(self.get(k, l));
            }
        }
        Self { dim, data }
    }
}

/// One channel realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub fading: Vec<Vec<Complex64>>,
    pub gains: GainMatrix,
}

impl ChannelState {
    pub fn from_fading(fading: Vec<Vec<Complex64>>, path_loss: &[f64]) -> Self {
        let gains = GainMatrix::from_fading(&fading, path_loss);
        Self { fading, gains }
    }

    /// CSV rows `k,antenna,re,im`.
    pub fn write_fading_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,antenna,re,im")?;
        for (k, h) in self.fading.iter().enumerate() {
            for (n, z) in h.iter().enumerate() {
                writeln!(out, "{k},{n},{},{}", z.re, z.im)?;
            }
        }
        Ok(())
    }
}

/// Draws i.i.d. circularly-symmetric unit-variance fading for every device
/// antenna and builds the composite gains. The path loss enters once, through
/// the gain formulas.
pub fn sample_channels(cfg: &NetworkConfig, seed: u64) -> Result<ChannelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let fading: Vec<Vec<Complex64>> = (0..cfg.num_devices())
        .map(|_| {
            (0..cfg.num_antennas)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re * scale, im * scale)
                })
                .collect()
        })
        .collect();
    Ok(ChannelState::from_fading(fading, &cfg.path_loss))
}

fn check_power(p: &[f64], noise: f64) -> Result<()> {
    if !(noise > 0.0) {
        return Err(Error::domain(format!("noise power must be positive, got {noise}")));
    }
    if let Some((k, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::domain(format!("power p[{k}] = {v} is negative")));
    }
    Ok(())
}

#[inline]
pub(crate) fn sinr_unchecked(gains: &GainMatrix, p: &[f64], noise: f64, k: usize) -> f64 {
    let row = gains.row(k);
    let interference: f64 = row
        .iter()
        .zip(p)
        .enumerate()
        .filter(|(l, _)| *l != k)
        .map(|(_, (g, q))| g * q)
        .sum();
    row[k] * p[k] / (interference + noise)
}

/// Achievable rate of device `k` in bit/s/Hz.
pub fn rate(gains: &GainMatrix, p: &[f64], noise: f64, k: usize) -> Result<f64> {
    check_power(p, noise)?;
    if p.len() != gains.dim() || k >= gains.dim() {
        return Err(Error::Index(format!(
            "device {k} / power vector of length {} against {} devices",
            p.len(),
            gains.dim()
        )));
    }
    Ok(sinr_unchecked(gains, p, noise, k).ln_1p() / std::f64::consts::LN_2)
}

/// Rates of every device.
pub fn rates(gains: &GainMatrix, p: &[f64], noise: f64) -> Result<Vec<f64>> {
    (0..gains.dim()).map(|k| rate(gains, p, noise, k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// `sum_k floor(B T R_k / V) + A_i`, as devices deliver whole samples.
    Floored,
    /// `sum_k B T R_k / V + A_i`, the relaxation used inside the optimizers.
    Continuous,
}

/// Samples held by `node` after one transmission period under power `p`.
pub fn sample_count(
    gains: &GainMatrix,
    p: &[f64],
    noise: f64,
    cfg: &NetworkConfig,
    node: usize,
    mode: SampleMode,
) -> Result<f64> {
    if node >= cfg.num_nodes() {
        return Err(Error::Index(format!("node {node} out of range")));
    }
    let mut total = cfg.initial_samples[node] as f64;
    for &k in cfg.partition.devices(node) {
        let delivered = cfg.samples_per_rate(k) * rate(gains, p, noise, k)?;
        total += match mode {
            SampleMode::Floored => delivered.floor(),
            SampleMode::Continuous => delivered,
        };
    }
    Ok(total)
}
