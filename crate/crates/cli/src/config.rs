//! Config files accepted by the CLI. Chips and models may be given inline,
//! as a bundled preset name, or as a path to a JSON file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use spadsim::chip::{ChipSpec, InterconnectSpec, MachineSpec};
use spadsim::model::{ModelSpec, ParallelismSpec};
use spadsim::presets;
use spadsim::sim::{ClusterConfig, Deployment, Pool, Role};

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ChipRef {
    Named(String),
    Inline(Box<ChipSpec>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named(String),
    Inline(Box<ModelSpec>),
}

/// Resolves names relative to the config file that mentions them.
fn resolve(name: &str, base: &Path) -> String {
    let candidate = base.join(name);
    if candidate.is_file() {
        candidate.to_string_lossy().into_owned()
    } else {
        name.to_string()
    }
}

impl ChipRef {
    pub fn load(&self, base: &Path) -> Result<ChipSpec> {
        match self {
            ChipRef::Inline(c) => {
                c.validate()?;
                Ok((**c).clone())
            }
            ChipRef::Named(n) => Ok(presets::load_chip(&resolve(n, base))?),
        }
    }
}

impl ModelRef {
    pub fn load(&self, base: &Path) -> Result<ModelSpec> {
        match self {
            ModelRef::Inline(m) => {
                m.validate()?;
                Ok((**m).clone())
            }
            ModelRef::Named(n) => Ok(presets::load_model(&resolve(n, base))?),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolFile {
    pub role: Role,
    pub chip: ChipRef,
    pub count: u64,
    #[serde(default = "eight")]
    pub chips_per_machine: u64,
    #[serde(default)]
    pub interconnect: InterconnectSpec,
}

fn eight() -> u64 {
    8
}

/// A cluster description: one model, replicated with the same parallelism
/// on every machine, across one or more pools.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub model: ModelRef,
    /// Defaults to tensor parallelism across all chips of a machine.
    #[serde(default)]
    pub parallelism: Option<ParallelismSpec>,
    #[serde(default)]
    pub reserve_frac: Option<f64>,
    pub pools: Vec<PoolFile>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&src).with_context(|| format!("parsing {}", path.display()))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn deployment(model: ModelSpec, par: Option<ParallelismSpec>, chips: u64, reserve: Option<f64>) -> Deployment {
    let mut d = Deployment::new(model, par.unwrap_or(ParallelismSpec::tp(chips)));
    if let Some(r) = reserve {
        d.reserve_frac = r;
    }
    d
}

impl ClusterFile {
    pub fn load(path: &Path) -> Result<ClusterConfig> {
        let f: ClusterFile = read_json(path)?;
        let base = base_dir(path);
        let model = f.model.load(&base)?;
        let pools = f
            .pools
            .iter()
            .map(|p| {
                let machine = MachineSpec {
                    chip: p.chip.load(&base)?,
                    chips_per_machine: p.chips_per_machine,
                    interconnect: p.interconnect,
                };
                Ok(Pool {
                    role: p.role,
                    count: p.count,
                    deployment: deployment(model.clone(), f.parallelism, p.chips_per_machine, f.reserve_frac),
                    machine,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cluster = ClusterConfig { pools };
        cluster.validate()?;
        Ok(cluster)
    }
}
