//! Chip design sweeps, cluster provisioning and role reallocation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chip::{ChipSpec, InterconnectSpec, MachineSpec};
use crate::econ::{chip_cost, chip_tdp, estimate_die_area, machines_cost, CostParams};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParallelismSpec, Phase, PhaseWork};
use crate::perf::{phase_latency, PerfParams};
use crate::sim::{
    evaluate_slo, reference_baselines, simulate, Baseline, ClusterConfig, Deployment, Pool, Role, SchedulerKind,
    SimOptions, SloVerdict,
};
use crate::workload::{slo_thresholds, SloSpec, SloTier, Trace};

/// Candidate values per chip parameter; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DseGrid {
    pub core_count: Vec<u64>,
    pub vector_width: Vec<u64>,
    pub systolic: Vec<(u64, u64)>,
    pub l1_kb_per_core: Vec<f64>,
    pub l2_mb: Vec<f64>,
    pub bandwidth_gbs: Vec<f64>,
}

impl DseGrid {
    pub fn candidates(&self, base: &ChipSpec) -> Vec<ChipSpec> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &cores in &or(&self.core_count, base.core_count) {
            for &vw in &or(&self.vector_width, base.vector_width) {
                for &(sh, sw) in &or(&self.systolic, (base.systolic_h, base.systolic_w)) {
                    for &l1 in &or(&self.l1_kb_per_core, base.l1_kb_per_core) {
                        for &l2 in &or(&self.l2_mb, base.l2_mb) {
                            for &bw in &or(&self.bandwidth_gbs, base.memory_bandwidth_gbs()) {
                                let mut c = ChipSpec {
                                    core_count: cores,
                                    vector_width: vw,
                                    systolic_h: sh,
                                    systolic_w: sw,
                                    l1_kb_per_core: l1,
                                    l2_mb: l2,
                                    ..base.clone()
                                };
                                if bw != base.memory_bandwidth_gbs() {
                                    c.bandwidth_override_gbs = Some(bw);
                                }
                                c.die_area_mm2 = base.die_area_mm2 + estimate_die_area(&c) - estimate_die_area(base);
                                c.name = format!("{}-c{cores}-v{vw}-s{sh}x{sw}-l1_{l1}-l2_{l2}-bw{bw}", base.name);
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Model, parallelism and the two reference batches a chip is scored on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseSetup {
    pub model: ModelSpec,
    pub par: ParallelismSpec,
    #[serde(default)]
    pub interconnect: InterconnectSpec,
    /// (batch, prompt length)
    pub prefill_point: (u64, u64),
    /// (batch, context length)
    pub decode_point: (u64, u64),
    #[serde(default)]
    pub perf: PerfParams,
    #[serde(default)]
    pub cost: CostParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub chip: ChipSpec,
    pub prefill_latency_s: f64,
    pub decode_latency_s: f64,
    pub die_area_mm2: f64,
    pub cost_usd: f64,
    pub tdp_w: f64,
    /// Not dominated in (latency of the swept phase, cost).
    pub pareto: bool,
}

pub fn dse_chips(base: &ChipSpec, grid: &DseGrid, phase: Phase, setup: &DseSetup) -> Result<Vec<DesignPoint>> {
    let candidates = grid.candidates(base);
    let mut points = candidates
        .into_par_iter()
        .map(|chip| {
            chip.validate()?;
            let (pb, ps) = setup.prefill_point;
            let (db, dc) = setup.decode_point;
            let run = |work: PhaseWork| {
                phase_latency(&setup.model, &chip, &setup.interconnect, &setup.par, &work, &setup.perf).map(|b| b.total)
            };
            let prefill = run(PhaseWork::prefill(&vec![ps; pb as usize]))?;
            let decode = run(PhaseWork::decode(&vec![dc; db as usize]))?;
            Ok(DesignPoint {
                die_area_mm2: chip.die_area_mm2,
                cost_usd: chip_cost(&chip, &setup.cost)?.total_usd,
                tdp_w: chip_tdp(&chip, &setup.cost),
                chip,
                prefill_latency_s: prefill,
                decode_latency_s: decode,
                pareto: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let key = |p: &DesignPoint| match phase {
        Phase::Decode => p.decode_latency_s,
        Phase::Prefill | Phase::Mixed => p.prefill_latency_s,
    };
    let flags: Vec<bool> = points
        .iter()
        .map(|p| {
            !points.iter().any(|q| {
                key(q) <= key(p) && q.cost_usd <= p.cost_usd && (key(q) < key(p) || q.cost_usd < p.cost_usd)
            })
        })
        .collect();
    for (p, f) in points.iter_mut().zip(flags) {
        p.pareto = f;
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProvisionGrid {
    /// Separate prefill and decode pools, swept over both counts.
    Disaggregated {
        prefill: MachineSpec,
        decode: MachineSpec,
        n_prefill: (u64, u64),
        n_decode: (u64, u64),
    },
    /// One pool of machines running both phases, swept over its size.
    Colocated { machine: MachineSpec, n: (u64, u64) },
}

impl ProvisionGrid {
    fn cells(&self) -> Vec<(u64, u64)> {
        match *self {
            ProvisionGrid::Disaggregated { n_prefill: (p0, p1), n_decode: (d0, d1), .. } => {
                (p0..=p1).flat_map(|p| (d0..=d1).map(move |d| (p, d))).collect()
            }
            ProvisionGrid::Colocated { n: (a, b), .. } => (a..=b).map(|n| (n, 0)).collect(),
        }
    }

    fn cluster(&self, cell: (u64, u64), deployment: &Deployment) -> ClusterConfig {
        match self {
            ProvisionGrid::Disaggregated { prefill, decode, .. } => {
                ClusterConfig::disaggregated(prefill.clone(), cell.0, decode.clone(), cell.1, deployment.clone())
            }
            ProvisionGrid::Colocated { machine, .. } => ClusterConfig::mixed(machine.clone(), cell.0, deployment.clone()),
        }
    }

    fn scheduler(&self, disaggregated: &SchedulerKind, colocated: &SchedulerKind) -> SchedulerKind {
        match self {
            ProvisionGrid::Disaggregated { .. } => *disaggregated,
            ProvisionGrid::Colocated { .. } => *colocated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvisionSpec {
    pub grid: ProvisionGrid,
    pub deployment: Deployment,
    /// Trace as recorded, and the rate it was recorded at.
    pub trace: Trace,
    pub base_rate_rps: f64,
    pub target_rate_rps: f64,
    /// Tier that decides feasibility; all tiers are reported.
    pub slo: SloSpec,
    #[serde(default = "SchedulerKind::disaggregated")]
    pub disaggregated: SchedulerKind,
    #[serde(default = "SchedulerKind::colocated")]
    pub colocated: SchedulerKind,
    #[serde(default)]
    pub perf: PerfParams,
    #[serde(default)]
    pub cost: CostParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Prefill machines, or all machines for a colocated grid.
    pub n_prefill: u64,
    pub n_decode: u64,
    pub feasible: bool,
    pub verdict: Option<SloVerdict>,
    pub tiers: Vec<(SloTier, bool)>,
    pub norm_cost: f64,
    pub norm_tdp: f64,
    /// Set when the simulation itself could not complete (e.g. a request
    /// larger than any machine's KV capacity).
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvisionResult {
    /// Sorted by (n_prefill, n_decode).
    pub cells: Vec<GridCell>,
    /// Indices into `cells` of the cheapest feasible cells.
    pub frontier: Vec<usize>,
}

impl ProvisionResult {
    pub fn best(&self) -> &GridCell {
        &self.cells[self.frontier[0]]
    }
}

struct Evaluator<'a> {
    trace: Trace,
    baselines: Vec<Baseline>,
    perf: &'a PerfParams,
}

impl Evaluator<'_> {
    fn run(&self, cluster: &ClusterConfig, sched: &SchedulerKind, slo: &SloSpec) -> Result<(SloVerdict, Vec<(SloTier, bool)>)> {
        let m = simulate(cluster, sched, &self.trace, self.perf, &SimOptions::default())?;
        let verdict = evaluate_slo(&m, &self.baselines, slo)?;
        let tiers = SloTier::ALL
            .iter()
            .map(|&t| Ok((t, evaluate_slo(&m, &self.baselines, &slo_thresholds(t))?.pass)))
            .collect::<Result<_>>()?;
        Ok((verdict, tiers))
    }
}

/// Exhaustive sweep of the grid at the target rate.
pub fn provision(spec: &ProvisionSpec) -> Result<ProvisionResult> {
    if spec.trace.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let trace = spec.trace.at_rate(spec.base_rate_rps, spec.target_rate_rps)?;
    let ev = Evaluator {
        baselines: reference_baselines(&trace, &spec.deployment, &spec.perf)?,
        trace,
        perf: &spec.perf,
    };
    let sched = spec.grid.scheduler(&spec.disaggregated, &spec.colocated);
    let cells = spec
        .grid
        .cells()
        .into_par_iter()
        .map(|cell| {
            let cluster = spec.grid.cluster(cell, &spec.deployment);
            let cost = machines_cost(cluster.pools.iter().map(|p| (&p.machine, p.count)), &spec.cost)?;
            let mut out = GridCell {
                n_prefill: cell.0,
                n_decode: cell.1,
                feasible: false,
                verdict: None,
                tiers: Vec::new(),
                norm_cost: cost.total_usd_normalized,
                norm_tdp: cost.total_tdp_normalized,
                error: None,
            };
            match ev.run(&cluster, &sched, &spec.slo) {
                Ok((v, tiers)) => {
                    out.feasible = v.pass;
                    out.verdict = Some(v);
                    out.tiers = tiers;
                }
                Err(e @ Error::CapacityDeadlock { .. }) => out.error = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let min = cells
        .iter()
        .filter(|c| c.feasible)
        .map(|c| c.norm_cost)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NoFeasiblePoint);
    }
    let frontier = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible && c.norm_cost <= min * (1.0 + 1e-12))
        .map(|(i, _)| i)
        .collect();
    Ok(ProvisionResult { cells, frontier })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InventoryItem {
    pub machine: MachineSpec,
    pub count: u64,
    /// Role the machines currently serve; used only to prefer assignments
    /// that move fewer machines when rates tie.
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReallocateSpec {
    pub inventory: Vec<InventoryItem>,
    pub deployment: Deployment,
    pub trace: Trace,
    pub base_rate_rps: f64,
    pub slo: SloSpec,
    #[serde(default = "SchedulerKind::disaggregated")]
    pub scheduler: SchedulerKind,
    /// Relative width of the final rate bracket.
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub perf: PerfParams,
}

fn default_eps() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Machines of each inventory entry serving prefill; the rest decode.
    pub prefill: Vec<u64>,
    pub decode: Vec<u64>,
    /// Highest rate meeting the SLO, if any rate does.
    pub max_rate_rps: Option<f64>,
    pub moved: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReallocationResult {
    pub best: Assignment,
    /// Every assignment tried, in enumeration order.
    pub candidates: Vec<Assignment>,
}

/// Largest rate at which `feasible` holds, searched geometrically from
/// `start` then bisected to a relative bracket of `eps`. The result is
/// feasible and `result × (1 + eps)` is checked to be infeasible.
pub fn max_feasible_rate(
    start: f64,
    eps: f64,
    mut feasible: impl FnMut(f64) -> Result<bool>,
) -> Result<Option<f64>> {
    const MIN_FACTOR: f64 = 1e-6;
    const MAX_FACTOR: f64 = 1e6;
    if !(start > 0.0 && eps > 0.0) {
        return Err(Error::Domain("rate search needs a positive start and tolerance".into()));
    }
    let (mut lo, mut hi);
    if feasible(start)? {
        lo = start;
        hi = start * 2.0;
        while feasible(hi)? {
            lo = hi;
            hi *= 2.0;
            if hi > start * MAX_FACTOR {
                return Ok(Some(lo));
            }
        }
    } else {
        hi = start;
        lo = start / 2.0;
        while !feasible(lo)? {
            hi = lo;
            lo /= 2.0;
            if lo < start * MIN_FACTOR {
                return Ok(None);
            }
        }
    }
    loop {
        while hi > lo * (1.0 + eps) {
            let mid = (lo * hi).sqrt();
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let probe = lo * (1.0 + eps);
        if !feasible(probe)? {
            return Ok(Some(lo));
        }
        // Feasibility was not monotone here; keep climbing from the probe.
        lo = probe;
        hi = probe * 2.0;
        while feasible(hi)? {
            lo = hi;
            hi *= 2.0;
            if hi > start * MAX_FACTOR {
                return Ok(Some(lo));
            }
        }
    }
}

/// Tries every split of the inventory into prefill and decode roles and
/// returns the one supporting the highest request rate.
pub fn reallocate(spec: &ReallocateSpec) -> Result<ReallocationResult> {
    if spec.inventory.iter().all(|i| i.count == 0) {
        return Err(Error::invalid("inventory is empty"));
    }
    if spec.trace.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    for item in &spec.inventory {
        spec.deployment.kv_capacity(&item.machine)?;
    }
    let baselines = reference_baselines(&spec.trace, &spec.deployment, &spec.perf)?;

    let mut splits: Vec<Vec<u64>> = vec![Vec::new()];
    for item in &spec.inventory {
        splits = splits
            .into_iter()
            .flat_map(|s| {
                (0..=item.count).map(move |k| {
                    let mut s = s.clone();
                    s.push(k);
                    s
                })
            })
            .collect();
    }
    let total: u64 = spec.inventory.iter().map(|i| i.count).sum();
    splits.retain(|s| {
        let p: u64 = s.iter().sum();
        p >= 1 && p < total
    });
    if splits.is_empty() {
        return Err(Error::invalid("inventory needs at least two machines to split into roles"));
    }

    let candidates = splits
        .into_par_iter()
        .map(|prefill| {
            let decode: Vec<u64> = spec.inventory.iter().zip(&prefill).map(|(i, &p)| i.count - p).collect();
            let moved = spec
                .inventory
                .iter()
                .zip(prefill.iter().zip(&decode))
                .map(|(i, (&p, &d))| match i.role {
                    Role::Prefill => d,
                    Role::Decode => p,
                    Role::Mixed => 0,
                })
                .sum();
            let mut pools = Vec::new();
            for (item, (&p, &d)) in spec.inventory.iter().zip(prefill.iter().zip(&decode)) {
                for (role, count) in [(Role::Prefill, p), (Role::Decode, d)] {
                    if count > 0 {
                        pools.push(Pool {
                            role,
                            machine: item.machine.clone(),
                            count,
                            deployment: spec.deployment.clone(),
                        });
                    }
                }
            }
            let cluster = ClusterConfig { pools };
            let max_rate_rps = max_feasible_rate(spec.base_rate_rps, spec.epsilon, |rate| {
                let trace = spec.trace.at_rate(spec.base_rate_rps, rate)?;
                match simulate(&cluster, &spec.scheduler, &trace, &spec.perf, &SimOptions::default()) {
                    Ok(m) => Ok(evaluate_slo(&m, &baselines, &spec.slo)?.pass),
                    Err(Error::CapacityDeadlock { .. }) => Ok(false),
                    Err(e) => Err(e),
                }
            })?;
            Ok(Assignment { prefill, decode, max_rate_rps, moved })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = candidates
        .iter()
        .filter(|a| a.max_rate_rps.is_some())
        .max_by(|a, b| {
            a.max_rate_rps
                .unwrap()
                .total_cmp(&b.max_rate_rps.unwrap())
                .then(b.moved.cmp(&a.moved))
        })
        .cloned()
        .ok_or(Error::NoFeasiblePoint)?;
    Ok(ReallocationResult { best, candidates })
}
