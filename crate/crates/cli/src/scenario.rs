//! TOML scenario files. Every section is optional and falls back to the reference setup.

use std::path::{Path, PathBuf};

use lopa_core::allocator::{AllocatorKind, SolverSettings};
use lopa_core::channel::{db_to_linear, dbm_to_mw, MegabyteConvention, NetworkConfig, Partition};
use lopa_core::fedsim::{CurveSettings, OnlineSettings, TaskConfig};
use lopa_core::lossmodel::BoundParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub nodes: usize,
    pub devices: usize,
    /// Devices per node; even split when absent.
    pub node_sizes: Option<Vec<usize>>,
    pub antennas: usize,
    pub power_budget_mw: f64,
    pub bandwidth_hz: f64,
    pub tx_time_s: f64,
    /// One value for all devices or one per device.
    pub bits_per_sample_mb: Vec<f64>,
    pub megabyte: MegabyteConvention,
    pub noise_dbm: f64,
    /// One value for all devices or one per device.
    pub path_loss_db: Vec<f64>,
    /// One value for all nodes or one per node.
    pub dataset_caps: Vec<u64>,
    /// One value for all nodes or one per node.
    pub initial_samples: Vec<u64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            nodes: 5,
            devices: 20,
            node_sizes: None,
            antennas: 4,
            power_budget_mw: 50.0,
            bandwidth_hz: 4e6,
            tx_time_s: 200.0,
            bits_per_sample_mb: vec![0.7],
            megabyte: MegabyteConvention::Decimal,
            noise_dbm: -77.0,
            path_loss_db: vec![-90.0],
            dataset_caps: vec![300],
            initial_samples: vec![50],
        }
    }
}

fn broadcast<T: Copy>(values: &[T], n: usize, name: &str) -> Result<Vec<T>, Failure> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(Failure::Config(format!("{name} has {len} entries, expected 1 or {n}"))),
    }
}

impl NetworkSection {
    pub fn to_config(&self, seed: u64) -> Result<NetworkConfig, Failure> {
        let partition = match &self.node_sizes {
            Some(sizes) => {
                if sizes.len() != self.nodes || sizes.iter().sum::<usize>() != self.devices {
                    return Err(Failure::Config(format!(
                        "node_sizes must list {} nodes covering {} devices",
                        self.nodes, self.devices
                    )));
                }
                Partition::contiguous(sizes)?
            }
            None => Partition::even(self.nodes, self.devices)?,
        };
        let cfg = NetworkConfig {
            partition,
            num_antennas: self.antennas,
            power_budget_mw: self.power_budget_mw,
            bandwidth_hz: self.bandwidth_hz,
            tx_time_s: self.tx_time_s,
            bits_per_sample: broadcast(&self.bits_per_sample_mb, self.devices, "bits_per_sample_mb")?
                .into_iter()
                .map(|mb| self.megabyte.bits(mb))
                .collect(),
            noise_mw: dbm_to_mw(self.noise_dbm),
            path_loss: broadcast(&self.path_loss_db, self.devices, "path_loss_db")?
                .into_iter()
                .map(db_to_linear)
                .collect(),
            dataset_caps: broadcast(&self.dataset_caps, self.nodes, "dataset_caps")?,
            initial_samples: broadcast(&self.initial_samples, self.nodes, "initial_samples")?,
            rng_seed: seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub xi1: f64,
    pub xi2: f64,
    pub smoothness: f64,
    pub initial_gap: f64,
    pub alpha: f64,
    pub t_max: u32,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            xi1: 1.0,
            xi2: 0.1,
            smoothness: 2.0,
            initial_gap: 1.0,
            alpha: 0.25,
            t_max: 100,
        }
    }
}

impl BoundSection {
    pub fn params(&self) -> BoundParams {
        BoundParams {
            xi1: self.xi1,
            xi2: self.xi2,
            smoothness: self.smoothness,
            initial_gap: self.initial_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    pub sizes: Vec<usize>,
    pub training: CurveSettings,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            sizes: (1..=20).map(|j| 50 * j).collect(),
            training: CurveSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub allocator: AllocatorKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub network: NetworkSection,
    pub solver: SolverSettings,
    pub task: TaskConfig,
    pub online: OnlineSettings,
    pub bound: BoundSection,
    pub curve: CurveSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            allocator: AllocatorKind::Mm,
            seeds: vec![0],
            out: PathBuf::from("out"),
            network: NetworkSection::default(),
            solver: SolverSettings::default(),
            task: TaskConfig::default(),
            online: OnlineSettings::default(),
            bound: BoundSection::default(),
            curve: CurveSection::default(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Failure::Config(msg) => Failure::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.seeds.is_empty() {
            return Err(Failure::Config("seeds must not be empty".into()));
        }
        self.network.to_config(self.seeds[0])?;
        self.solver.fom.validate()?;
        self.online.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the resolved scenario.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_network() {
        let cfg = Scenario::default().network.to_config(7).unwrap();
        assert_eq!(cfg, NetworkConfig::reference(5, 20, 7).unwrap());
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::default();
        assert_eq!(Scenario::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Scenario::parse("alocator = \"mm\"").is_err());
        assert!(Scenario::parse("[network]\nnode = 3").is_err());
        assert!(Scenario::parse("[solver.fom]\nstep = 0.01\nwarp = 1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let s = Scenario::parse("allocator = \"fom\"\n[network]\nnodes = 2\ndevices = 4\n").unwrap();
        assert_eq!(s.allocator, AllocatorKind::Fom);
        assert_eq!(s.network.power_budget_mw, 50.0);
        let cfg = s.network.to_config(0).unwrap();
        assert_eq!(cfg.num_nodes(), 2);
        assert_eq!(cfg.dataset_caps, vec![300, 300]);
    }

    #[test]
    fn per_entry_lists_must_match_sizes() {
        let s = Scenario::parse("[network]\nnodes = 2\ndevices = 4\ndataset_caps = [1, 2, 3]").unwrap();
        assert!(matches!(s.network.to_config(0), Err(Failure::Config(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = Scenario::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seeds = vec![1];
        assert_ne!(a.digest(), b.digest());
    }
}
