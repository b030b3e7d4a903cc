//! Accelerator, machine and interconnect descriptions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemProtocol {
    GDDR7,
    HBM3,
    HBM2e,
    #[serde(rename = "custom")]
    Custom,
}

impl MemProtocol {
    /// Stacked memory, priced per GB at the HBM rate and powered per package.
    pub fn is_hbm(self) -> bool {
        matches!(self, MemProtocol::HBM3 | MemProtocol::HBM2e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipSpec {
    pub name: String,
    pub core_count: u64,
    pub lanes_per_core: u64,
    /// FP32 lanes per vector unit.
    pub vector_width: u64,
    pub systolic_h: u64,
    pub systolic_w: u64,
    pub l1_kb_per_core: f64,
    pub l2_mb: f64,
    pub mem_protocol: MemProtocol,
    pub mem_bus_bits: u64,
    pub pin_gbps: f64,
    pub mem_packages: u64,
    pub gb_per_package: f64,
    pub clock_tensor_ghz: f64,
    pub clock_vector_ghz: f64,
    pub die_area_mm2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_override_gbs: Option<f64>,
    #[serde(default = "default_fp8_scale")]
    pub tensor_flops_scale_fp8: f64,
    /// Fixed price for chips outside the die/memory cost model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_usd_override: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tdp_w_override: Option<f64>,
}

fn default_fp8_scale() -> f64 {
    2.0
}

impl ChipSpec {
    pub fn from_json(src: &str) -> Result<Self> {
        let spec: ChipSpec = serde_json::from_str(src).map_err(|source| Error::Json {
            context: "chip spec".into(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let src = read_to_string(path)?;
        Self::from_json(&src).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("core_count", self.core_count),
            ("lanes_per_core", self.lanes_per_core),
            ("vector_width", self.vector_width),
            ("systolic_h", self.systolic_h),
            ("systolic_w", self.systolic_w),
            ("mem_bus_bits", self.mem_bus_bits),
            ("mem_packages", self.mem_packages),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{}: {field} must be positive", self.name)));
            }
        }
        let reals = [
            ("pin_gbps", self.pin_gbps),
            ("gb_per_package", self.gb_per_package),
            ("clock_tensor_ghz", self.clock_tensor_ghz),
            ("clock_vector_ghz", self.clock_vector_ghz),
            ("die_area_mm2", self.die_area_mm2),
            ("tensor_flops_scale_fp8", self.tensor_flops_scale_fp8),
        ];
        for (field, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{}: {field} must be positive", self.name)));
            }
        }
        if self.l1_kb_per_core < 0.0 || self.l2_mb < 0.0 {
            return Err(Error::invalid(format!("{}: cache sizes must be non-negative", self.name)));
        }
        if let Some(bw) = self.bandwidth_override_gbs {
            if !(bw > 0.0) {
                return Err(Error::invalid(format!("{}: bandwidth override must be positive", self.name)));
            }
        }
        Ok(())
    }

    pub fn systolic_area(&self) -> u64 {
        self.systolic_h * self.systolic_w
    }

    /// Dense tensor FLOP/s at the given element width.
    pub fn peak_tensor_flops(&self, elem_bytes: u64) -> f64 {
        let macs = (self.core_count * self.lanes_per_core * self.systolic_area()) as f64;
        let base = macs * 2.0 * self.clock_tensor_ghz * 1e9;
        if elem_bytes == 1 {
            base * self.tensor_flops_scale_fp8
        } else {
            base
        }
    }

    /// FP32 FLOP/s of the vector units.
    pub fn peak_vector_flops(&self) -> f64 {
        (self.core_count * self.lanes_per_core * self.vector_width) as f64 * 2.0 * self.clock_vector_ghz * 1e9
    }

    pub fn memory_bandwidth_gbs(&self) -> f64 {
        self.bandwidth_override_gbs
            .unwrap_or(self.mem_bus_bits as f64 * self.pin_gbps / 8.0)
    }

    pub fn memory_bandwidth_bytes(&self) -> f64 {
        self.memory_bandwidth_gbs() * 1e9
    }

    pub fn memory_capacity_gb(&self) -> f64 {
        self.mem_packages as f64 * self.gb_per_package
    }

    pub fn memory_capacity_bytes(&self) -> f64 {
        self.memory_capacity_gb() * 1e9
    }

    pub fn l2_bytes(&self) -> f64 {
        self.l2_mb * 1e6
    }

    pub fn total_cache_mb(&self) -> f64 {
        self.core_count as f64 * self.l1_kb_per_core / 1e3 + self.l2_mb
    }

    pub fn with_bandwidth_gbs(&self, gbs: f64) -> ChipSpec {
        ChipSpec {
            bandwidth_override_gbs: Some(gbs),
            ..self.clone()
        }
    }

    pub fn with_core_count(&self, cores: u64) -> ChipSpec {
        ChipSpec {
            core_count: cores,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterconnectSpec {
    /// Total scale-up (intra-machine) bandwidth per chip, GB/s.
    pub scaleup_gbs_per_chip: f64,
    /// Scale-out (inter-machine) bandwidth per chip, GB/s.
    pub scaleout_gbs_per_chip: f64,
}

impl Default for InterconnectSpec {
    fn default() -> Self {
        InterconnectSpec {
            scaleup_gbs_per_chip: 900.0,
            scaleout_gbs_per_chip: 50.0,
        }
    }
}

impl InterconnectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scaleup_gbs_per_chip > 0.0 && self.scaleout_gbs_per_chip > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("interconnect bandwidths must be positive"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub chip: ChipSpec,
    #[serde(default = "default_chips_per_machine")]
    pub chips_per_machine: u64,
    #[serde(default)]
    pub interconnect: InterconnectSpec,
}

fn default_chips_per_machine() -> u64 {
    8
}

impl MachineSpec {
    pub fn new(chip: ChipSpec) -> Self {
        MachineSpec {
            chip,
            chips_per_machine: default_chips_per_machine(),
            interconnect: InterconnectSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.chip.validate()?;
        self.interconnect.validate()?;
        if self.chips_per_machine == 0 {
            return Err(Error::invalid("chips_per_machine must be >= 1"));
        }
        Ok(())
    }

    pub fn memory_bytes(&self) -> f64 {
        self.chip.memory_capacity_bytes() * self.chips_per_machine as f64
    }
}
