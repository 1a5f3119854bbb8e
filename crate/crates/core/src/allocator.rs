//! A common interface over the solvers and baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{srm_allocate, uniform_allocate, SrmSettings};
use crate::error::{Error, Result};
use crate::fom::{solve_fom, FomSettings};
use crate::mm::{solve_mm, AllocationResult, MmSettings};
use crate::problem::AllocationProblem;

/// Anything that maps a problem instance to a power vector.
pub trait PowerAllocator: Sync {
    fn name(&self) -> &str;
    fn allocate(&self, prob: &AllocationProblem) -> Result<AllocationResult>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorKind {
    Mm,
    Fom,
    Uniform,
    Srm,
}

impl AllocatorKind {
    pub const ALL: [AllocatorKind; 4] = [Self::Uniform, Self::Srm, Self::Mm, Self::Fom];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mm => "mm",
            Self::Fom => "fom",
            Self::Uniform => "uniform",
            Self::Srm => "srm",
        }
    }
}

impl fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::config(format!("unknown allocator `{s}`, expected mm, fom, uniform or srm"))
            })
    }
}

/// Settings for every allocator, so a kind can be swapped without rebuilding them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub mm: MmSettings,
    pub fom: FomSettings,
    pub srm: SrmSettings,
}

/// An allocator kind bound to its settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocator {
    pub kind: AllocatorKind,
    pub settings: SolverSettings,
}

impl Allocator {
    pub fn new(kind: AllocatorKind, settings: SolverSettings) -> Self {
        Self { kind, settings }
    }
}

impl PowerAllocator for Allocator {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn allocate(&self, prob: &AllocationProblem) -> Result<AllocationResult> {
        match self.kind {
            AllocatorKind::Mm => solve_mm(prob, &self.settings.mm),
            AllocatorKind::Fom => solve_fom(prob, &self.settings.fom).map(|o| o.result),
            AllocatorKind::Uniform => AllocationResult::fixed(prob, uniform_allocate(prob)),
            AllocatorKind::Srm => {
                let srm = srm_allocate(prob, &self.settings.srm)?;
                let mut out = AllocationResult::fixed(prob, srm.p)?;
                out.iterations = srm.iterations;
                Ok(out)
            }
        }
    }
}
