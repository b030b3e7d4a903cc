//! Chip pricing and TDP.
//!
//! Die cost comes from the circular-wafer dies-per-wafer approximation (no
//! flooring, no yield term); memory is priced per GB by protocol. TDP assumes
//! every die shares the reference chip's power density once its memory power
//! and board overhead are removed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::chip::{ChipSpec, MachineSpec};
use crate::error::{Error, Result};
use crate::presets;
use crate::sim::ClusterConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub wafer_cost_usd: f64,
    pub wafer_diameter_mm: f64,
    pub gddr_usd_per_gb: f64,
    pub hbm_usd_per_gb: f64,
    pub ref_chip: ChipSpec,
    pub ref_tdp_w: f64,
    /// Board-level power overhead (VRM loss, peripherals) as a share of TDP.
    pub overhead_frac: f64,
    pub hbm_pkg_power_w: f64,
    pub gddr_pj_per_bit: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            wafer_cost_usd: 20_000.0,
            wafer_diameter_mm: 300.0,
            gddr_usd_per_gb: 3.0,
            hbm_usd_per_gb: 9.0,
            ref_chip: presets::h100(),
            ref_tdp_w: 700.0,
            overhead_frac: 0.10,
            hbm_pkg_power_w: 30.0,
            gddr_pj_per_bit: 4.5,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wafer_cost_usd", self.wafer_cost_usd),
            ("wafer_diameter_mm", self.wafer_diameter_mm),
            ("gddr_usd_per_gb", self.gddr_usd_per_gb),
            ("hbm_usd_per_gb", self.hbm_usd_per_gb),
            ("ref_tdp_w", self.ref_tdp_w),
            ("hbm_pkg_power_w", self.hbm_pkg_power_w),
            ("gddr_pj_per_bit", self.gddr_pj_per_bit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("cost params: {name} must be positive")));
            }
        }
        if !(0.0..0.5).contains(&self.overhead_frac) {
            return Err(Error::invalid("cost params: overhead_frac must be in [0, 0.5)"));
        }
        self.ref_chip.validate()
    }

    fn usd_per_gb(&self, chip: &ChipSpec) -> f64 {
        if chip.mem_protocol.is_hbm() {
            self.hbm_usd_per_gb
        } else {
            self.gddr_usd_per_gb
        }
    }

    /// Watts per mm² of logic die, derived from the reference chip.
    pub fn power_density(&self) -> f64 {
        let ref_mem = if self.ref_chip.mem_protocol.is_hbm() {
            self.hbm_pkg_power_w * self.ref_chip.mem_packages as f64
        } else {
            self.gddr_power_w(&self.ref_chip)
        };
        (self.ref_tdp_w * (1.0 - self.overhead_frac) - ref_mem) / self.ref_chip.die_area_mm2
    }

    fn gddr_power_w(&self, chip: &ChipSpec) -> f64 {
        self.gddr_pj_per_bit * 1e-12 * chip.memory_bandwidth_bytes() * 8.0
    }
}

/// Gross dies per wafer: wafer area over die area minus the edge-loss term.
pub fn dies_per_wafer(area_mm2: f64, diameter_mm: f64) -> Result<f64> {
    let r = diameter_mm / 2.0;
    let wafer_area = PI * r * r;
    if !(area_mm2 > 0.0) || area_mm2 >= wafer_area {
        return Err(Error::Domain(format!(
            "die area {area_mm2} mm² outside (0, {wafer_area:.0}) for a {diameter_mm} mm wafer"
        )));
    }
    let dies = wafer_area / area_mm2 - PI * diameter_mm / (2.0 * area_mm2).sqrt();
    if dies <= 0.0 {
        return Err(Error::Domain(format!("die area {area_mm2} mm² leaves no whole dies")));
    }
    Ok(dies)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipCost {
    pub die_usd: f64,
    pub mem_usd: f64,
    pub total_usd: f64,
}

/// Die plus memory cost. A chip with a fixed price reports it all as die cost.
pub fn chip_cost(chip: &ChipSpec, params: &CostParams) -> Result<ChipCost> {
    if let Some(usd) = chip.cost_usd_override {
        return Ok(ChipCost { die_usd: usd, mem_usd: 0.0, total_usd: usd });
    }
    let die_usd = params.wafer_cost_usd / dies_per_wafer(chip.die_area_mm2, params.wafer_diameter_mm)?;
    let mem_usd = chip.memory_capacity_gb() * params.usd_per_gb(chip);
    Ok(ChipCost { die_usd, mem_usd, total_usd: die_usd + mem_usd })
}

pub fn chip_tdp(chip: &ChipSpec, params: &CostParams) -> f64 {
    if let Some(w) = chip.tdp_w_override {
        return w;
    }
    let mem_power = if chip.mem_protocol.is_hbm() {
        params.hbm_pkg_power_w * chip.mem_packages as f64
    } else {
        params.gddr_power_w(chip)
    };
    (chip.die_area_mm2 * params.power_density() + mem_power) / (1.0 - params.overhead_frac)
}

/// Cost and TDP relative to the reference chip.
pub fn normalized(chip: &ChipSpec, params: &CostParams) -> Result<(f64, f64)> {
    let reference = chip_cost(&params.ref_chip, params)?.total_usd;
    Ok((
        chip_cost(chip, params)?.total_usd / reference,
        chip_tdp(chip, params) / chip_tdp(&params.ref_chip, params),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterCost {
    pub total_usd: f64,
    pub total_tdp_w: f64,
    /// In units of one reference machine (8 reference chips).
    pub total_usd_normalized: f64,
    pub total_tdp_normalized: f64,
}

/// Sums machine costs and normalizes by an 8-chip reference machine.
pub fn machines_cost<'a>(
    machines: impl IntoIterator<Item = (&'a MachineSpec, u64)>,
    params: &CostParams,
) -> Result<ClusterCost> {
    let ref_machine_usd = 8.0 * chip_cost(&params.ref_chip, params)?.total_usd;
    let ref_machine_w = 8.0 * chip_tdp(&params.ref_chip, params);
    let mut c = ClusterCost::default();
    for (m, count) in machines {
        let chips = (m.chips_per_machine * count) as f64;
        c.total_usd += chips * chip_cost(&m.chip, params)?.total_usd;
        c.total_tdp_w += chips * chip_tdp(&m.chip, params);
    }
    c.total_usd_normalized = c.total_usd / ref_machine_usd;
    c.total_tdp_normalized = c.total_tdp_w / ref_machine_w;
    Ok(c)
}

pub fn cluster_cost(cluster: &ClusterConfig, params: &CostParams) -> Result<ClusterCost> {
    machines_cost(cluster.pools.iter().map(|p| (&p.machine, p.count)), params)
}

/// Linear die-area model fit to the three published die areas (H100,
/// prefill chip, decode chip): a fixed uncore term plus per-MAC,
/// per-vector-lane and per-MB-of-SRAM terms. Used only for chips generated
/// by design sweeps.
pub fn estimate_die_area(chip: &ChipSpec) -> f64 {
    const UNCORE_MM2: f64 = 171.663_77;
    const MM2_PER_MAC: f64 = 2.794_812_5e-4;
    const MM2_PER_VECTOR_LANE: f64 = 0.004;
    const MM2_PER_SRAM_MB: f64 = 6.014_438_4;
    let macs = (chip.core_count * chip.lanes_per_core * chip.systolic_area()) as f64;
    let lanes = (chip.core_count * chip.lanes_per_core * chip.vector_width) as f64;
    let sram_mb = chip.core_count as f64 * chip.l1_kb_per_core / 1024.0 + chip.l2_mb;
    UNCORE_MM2 + MM2_PER_MAC * macs + MM2_PER_VECTOR_LANE * lanes + MM2_PER_SRAM_MB * sram_mb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dies_per_wafer_examples() {
        let cases = [(814.0, 63.48, 315.0), (784.0, 66.36, 301.0), (520.0, 106.71, 187.0)];
        for (area, dies, usd) in cases {
            let d = dies_per_wafer(area, 300.0).unwrap();
            assert!((d - dies).abs() < 0.01, "{area}: {d}");
            assert!((20_000.0 / d - usd).abs() < 1.0, "{area}");
        }
        assert!(dies_per_wafer(70_686.0, 300.0).is_err());
        assert!(dies_per_wafer(0.0, 300.0).is_err());
        assert!(dies_per_wafer(60_000.0, 300.0).is_err());
    }

    #[test]
    fn die_cost_increases_with_area() {
        let mut last = 0.0;
        for area in [100.0, 300.0, 520.0, 784.0, 814.0, 1000.0] {
            let usd = 20_000.0 / dies_per_wafer(area, 300.0).unwrap();
            assert!(usd > last);
            last = usd;
        }
    }

    #[test]
    fn chip_costs_match_published_table() {
        let p = CostParams::default();
        let pre = chip_cost(&presets::spad_prefill(), &p).unwrap();
        assert!((pre.die_usd - 301.0).abs() < 1.0);
        assert_eq!(pre.mem_usd, 192.0);
        assert!((pre.total_usd - 493.0).abs() < 1.0);
        let dec = chip_cost(&presets::spad_decode(), &p).unwrap();
        assert!((dec.total_usd - 907.0).abs() < 1.0);
        let h = chip_cost(&presets::h100(), &p).unwrap();
        assert!((h.total_usd - 1035.0).abs() < 1.0);
        let (np, _) = normalized(&presets::spad_prefill(), &p).unwrap();
        let (nd, _) = normalized(&presets::spad_decode(), &p).unwrap();
        assert_eq!((np * 100.0).round() / 100.0, 0.48);
        assert_eq!((nd * 100.0).round() / 100.0, 0.88);
    }

    #[test]
    fn memory_cost_is_linear_in_capacity() {
        let p = CostParams::default();
        let one = chip_cost(&ChipSpec { mem_packages: 1, ..presets::h100() }, &p).unwrap();
        let five = chip_cost(&presets::h100(), &p).unwrap();
        assert_eq!(five.mem_usd, 5.0 * one.mem_usd);
    }

    #[test]
    fn tdp_matches_published_table() {
        let p = CostParams::default();
        assert!((p.power_density() - 480.0 / 814.0).abs() < 1e-12);
        assert!((chip_tdp(&presets::h100(), &p) - 700.0).abs() < 1e-9);
        assert!((chip_tdp(&presets::spad_prefill(), &p) - 596.0).abs() < 1.0);
        assert!((chip_tdp(&presets::spad_decode(), &p) - 507.0).abs() < 1.0);
        assert_eq!(chip_tdp(&presets::chip("h100-pcap-450w").unwrap(), &p), 450.0);
    }

    #[test]
    fn hbm_price_sweep() {
        for (rate, dec, h) in [(6.0, 667.0, 795.0), (9.0, 907.0, 1035.0), (12.0, 1147.0, 1275.0)] {
            let p = CostParams { hbm_usd_per_gb: rate, ..CostParams::default() };
            assert!((chip_cost(&presets::spad_decode(), &p).unwrap().total_usd - dec).abs() < 1.0);
            assert!((chip_cost(&presets::h100(), &p).unwrap().total_usd - h).abs() < 1.0);
        }
    }

    #[test]
    fn cluster_cost_examples() {
        let p = CostParams::default();
        let pre = MachineSpec::new(presets::spad_prefill());
        let dec = MachineSpec::new(presets::spad_decode());
        let spad = machines_cost([(&pre, 18), (&dec, 7)], &p).unwrap();
        assert!((spad.total_usd_normalized - 14.7).abs() < 0.05, "{}", spad.total_usd_normalized);
        assert!((spad.total_tdp_normalized - 20.4).abs() < 0.05, "{}", spad.total_tdp_normalized);
        let h = MachineSpec::new(presets::h100());
        let homo = machines_cost([(&h, 25)], &p).unwrap();
        assert!((homo.total_usd_normalized - 25.0).abs() < 1e-12);
        let empty = machines_cost(std::iter::empty(), &p).unwrap();
        assert_eq!(empty.total_usd_normalized, 0.0);
        let pcap = MachineSpec::new(presets::chip("h100-pcap-450w").unwrap());
        let mix = machines_cost([(&h, 21), (&pcap, 4)], &p).unwrap();
        assert!((mix.total_usd_normalized - 25.0).abs() < 1e-9);
        assert!((mix.total_tdp_normalized - 23.6).abs() < 0.05);
        let a100 = MachineSpec::new(presets::chip("a100").unwrap());
        let hetero = machines_cost([(&h, 21), (&a100, 9)], &p).unwrap();
        assert!((hetero.total_usd_normalized - 25.5).abs() < 0.01);
    }

    #[test]
    fn area_estimator_reproduces_fitted_chips() {
        for name in ["h100", "spad-prefill", "spad-decode"] {
            let c = presets::chip(name).unwrap();
            assert!((estimate_die_area(&c) - c.die_area_mm2).abs() < 1.0, "{name}");
        }
    }

    #[test]
    fn params_validate() {
        assert!(CostParams::default().validate().is_ok());
        assert!(CostParams { overhead_frac: 0.6, ..CostParams::default() }.validate().is_err());
        assert!(CostParams { wafer_cost_usd: 0.0, ..CostParams::default() }.validate().is_err());
    }
}
