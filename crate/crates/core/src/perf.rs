//! Operator and iteration latency on a chip: a roofline per operator with
//! systolic-array tile quantization, an L2 weight-reuse rule, and ring
//! collectives over the scale-up interconnect.

use serde::{Deserialize, Serialize};

use crate::chip::{ChipSpec, InterconnectSpec};
use crate::error::{Error, Result};
use crate::model::{build_ops, ModelSpec, OpKind, Operator, ParallelismSpec, Phase, PhaseWork, StageOps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Overlap {
    /// Each operator takes max(compute, memory); operators run back to back.
    #[default]
    MaxOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerfParams {
    pub dram_efficiency: f64,
    pub tensor_efficiency: f64,
    pub vector_efficiency: f64,
    /// L2 bandwidth as a multiple of DRAM bandwidth.
    pub l2_gbs_multiplier: f64,
    pub overlap: Overlap,
    pub kernel_launch_us: f64,
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams {
            dram_efficiency: 0.85,
            tensor_efficiency: 0.9,
            vector_efficiency: 0.8,
            l2_gbs_multiplier: 4.0,
            overlap: Overlap::MaxOverlap,
            kernel_launch_us: 2.0,
        }
    }
}

impl PerfParams {
    /// Unit efficiencies and no launch overhead: a bare roofline.
    pub fn ideal() -> Self {
        PerfParams {
            dram_efficiency: 1.0,
            tensor_efficiency: 1.0,
            vector_efficiency: 1.0,
            kernel_launch_us: 0.0,
            ..PerfParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dram_efficiency", self.dram_efficiency),
            ("tensor_efficiency", self.tensor_efficiency),
            ("vector_efficiency", self.vector_efficiency),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.l2_gbs_multiplier >= 1.0) {
            return Err(Error::invalid("l2_gbs_multiplier must be >= 1"));
        }
        if !(self.kernel_launch_us >= 0.0) {
            return Err(Error::invalid("kernel_launch_us must be >= 0"));
        }
        Ok(())
    }

    fn launch_s(&self) -> f64 {
        self.kernel_launch_us * 1e-6
    }
}

/// Seconds per operator category. `total` is the sum of the five parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub gemm: f64,
    pub attention: f64,
    pub softmax_norm_act: f64,
    pub communication: f64,
    pub other: f64,
    pub total: f64,
}

impl LatencyBreakdown {
    fn add(&mut self, kind: &OpKind, secs: f64) {
        match kind {
            OpKind::Gemm { .. } => self.gemm += secs,
            OpKind::AttentionScore { .. } | OpKind::AttentionContext { .. } => self.attention += secs,
            OpKind::Softmax { .. } | OpKind::LayerNorm { .. } | OpKind::Activation { .. } => {
                self.softmax_norm_act += secs
            }
            OpKind::AllReduce { .. } | OpKind::AllToAll { .. } | OpKind::P2P { .. } => self.communication += secs,
            OpKind::MoERoute { .. } => self.other += secs,
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        LatencyBreakdown {
            gemm: self.gemm * factor,
            attention: self.attention * factor,
            softmax_norm_act: self.softmax_norm_act * factor,
            communication: self.communication * factor,
            other: self.other * factor,
            total: 0.0,
        }
        .finished()
    }

    fn finished(mut self) -> Self {
        self.total = self.gemm + self.attention + self.softmax_norm_act + self.communication + self.other;
        self
    }
}

/// Fraction of a `dim`-long axis that fills whole tiles of size `tile`.
pub fn tile_utilization(dim: u64, tile: u64) -> f64 {
    let dim = dim.max(1);
    dim as f64 / (dim.div_ceil(tile) * tile) as f64
}

fn systolic_util(chip: &ChipSpec, rows: u64, cols: u64) -> f64 {
    tile_utilization(rows, chip.systolic_h) * tile_utilization(cols, chip.systolic_w)
}

fn memory_time(chip: &ChipSpec, dram_bytes: f64, l2_bytes: f64, params: &PerfParams) -> f64 {
    let bw = chip.memory_bandwidth_bytes() * params.dram_efficiency;
    dram_bytes / bw + l2_bytes / (bw * params.l2_gbs_multiplier)
}

/// Share of an operator's weights that can stay in L2 next to its activations.
pub fn weight_resident_frac(chip: &ChipSpec, op: &Operator) -> f64 {
    if op.weight_bytes <= 0.0 {
        return 0.0;
    }
    let available = chip.l2_bytes() - op.activation_bytes();
    (available / op.weight_bytes).clamp(0.0, 1.0)
}

fn matmul_time(
    chip: &ChipSpec,
    flops: f64,
    util: f64,
    weight_bytes: f64,
    activation_bytes: f64,
    elem_bytes: u64,
    resident: f64,
    params: &PerfParams,
) -> f64 {
    let compute = flops / (chip.peak_tensor_flops(elem_bytes) * params.tensor_efficiency * util);
    let resident_bytes = weight_bytes * resident;
    let mem = memory_time(chip, weight_bytes - resident_bytes + activation_bytes, resident_bytes, params);
    compute.max(mem) + params.launch_s()
}

/// Latency of an m x k by k x n matrix multiply streaming its weights from DRAM.
pub fn gemm_latency(
    chip: &ChipSpec,
    m: u64,
    n: u64,
    k: u64,
    elem_bytes: u64,
    weight_resident_frac: f64,
    params: &PerfParams,
) -> f64 {
    let (mf, nf, kf, ef) = (m as f64, n as f64, k as f64, elem_bytes as f64);
    matmul_time(
        chip,
        2.0 * mf * nf * kf,
        systolic_util(chip, m, n),
        kf * nf * ef,
        (mf * kf + mf * nf) * ef,
        elem_bytes,
        weight_resident_frac.clamp(0.0, 1.0),
        params,
    )
}

/// Latency of a Softmax, LayerNorm, Activation or routing operator on the vector units.
pub fn vector_op_latency(chip: &ChipSpec, op: &Operator, params: &PerfParams) -> f64 {
    let compute = op.flops / (chip.peak_vector_flops() * params.vector_efficiency);
    let mem = memory_time(chip, op.dram_bytes, 0.0, params);
    compute.max(mem) + params.launch_s()
}

/// Ring all-reduce across `n_chips` over the scale-up links.
pub fn allreduce_latency(bytes: f64, n_chips: u64, interconnect: &InterconnectSpec) -> f64 {
    if n_chips <= 1 {
        return 0.0;
    }
    let n = n_chips as f64;
    2.0 * (n - 1.0) / n * bytes / (interconnect.scaleup_gbs_per_chip * 1e9)
}

pub fn alltoall_latency(bytes: f64, n_chips: u64, interconnect: &InterconnectSpec) -> f64 {
    if n_chips <= 1 {
        return 0.0;
    }
    let n = n_chips as f64;
    (n - 1.0) / n * bytes / (interconnect.scaleup_gbs_per_chip * 1e9)
}

pub fn op_latency(chip: &ChipSpec, interconnect: &InterconnectSpec, op: &Operator, params: &PerfParams) -> f64 {
    match op.kind {
        OpKind::Gemm { m, n, .. } => matmul_time(
            chip,
            op.flops,
            systolic_util(chip, m, n),
            op.weight_bytes,
            op.activation_bytes(),
            op.elem_bytes,
            weight_resident_frac(chip, op),
            params,
        ),
        OpKind::AttentionScore { q_len, kv_len, .. } => matmul_time(
            chip,
            op.flops,
            systolic_util(chip, q_len, kv_len),
            0.0,
            op.dram_bytes,
            op.elem_bytes,
            0.0,
            params,
        ),
        OpKind::AttentionContext { q_len, head_dim, .. } => matmul_time(
            chip,
            op.flops,
            systolic_util(chip, q_len, head_dim),
            0.0,
            op.dram_bytes,
            op.elem_bytes,
            0.0,
            params,
        ),
        OpKind::Softmax { .. } | OpKind::LayerNorm { .. } | OpKind::Activation { .. } | OpKind::MoERoute { .. } => {
            vector_op_latency(chip, op, params)
        }
        OpKind::AllReduce { bytes, group } => allreduce_latency(bytes as f64, group, interconnect),
        OpKind::AllToAll { bytes, group } => alltoall_latency(bytes as f64, group, interconnect),
        OpKind::P2P { bytes } => bytes as f64 / (interconnect.scaleup_gbs_per_chip * 1e9),
    }
}

/// Latency of one chip of one pipeline stage.
pub fn stage_latency(
    chip: &ChipSpec,
    interconnect: &InterconnectSpec,
    stage: &StageOps,
    params: &PerfParams,
) -> LatencyBreakdown {
    let mut b = LatencyBreakdown::default();
    for (repeat, op) in stage.iter() {
        b.add(&op.kind, repeat as f64 * op_latency(chip, interconnect, op, params));
    }
    b.finished()
}

fn microbatches(par: &ParallelismSpec, work: &PhaseWork) -> usize {
    if par.pp == 1 {
        return 1;
    }
    match work.phase {
        Phase::Prefill => work.batch(),
        Phase::Decode | Phase::Mixed => work.batch().min(par.pp as usize),
    }
}

/// Latency of one iteration of `work` on a replica spread over `par`.
///
/// With pipeline parallelism the iteration is split into microbatches and
/// takes `(stages + microbatches - 1)` times the slowest stage.
pub fn phase_latency(
    model: &ModelSpec,
    chip: &ChipSpec,
    interconnect: &InterconnectSpec,
    par: &ParallelismSpec,
    work: &PhaseWork,
    params: &PerfParams,
) -> Result<LatencyBreakdown> {
    if work.seqs.is_empty() {
        return Ok(LatencyBreakdown::default());
    }
    let mb = microbatches(par, work);
    if mb == 1 {
        let stages = build_ops(model, par, work)?;
        if stages.len() == 1 {
            return Ok(stage_latency(chip, interconnect, &stages[0], params));
        }
        let worst = slowest(chip, interconnect, &stages, params);
        return Ok(worst.scaled(stages.len() as f64));
    }
    let mut worst = LatencyBreakdown::default();
    for part in work.split(mb) {
        let stages = build_ops(model, par, &part)?;
        let w = slowest(chip, interconnect, &stages, params);
        if w.total > worst.total {
            worst = w;
        }
    }
    Ok(worst.scaled((par.pp as usize + mb - 1) as f64))
}

fn slowest(
    chip: &ChipSpec,
    interconnect: &InterconnectSpec,
    stages: &[StageOps],
    params: &PerfParams,
) -> LatencyBreakdown {
    stages
        .iter()
        .map(|s| stage_latency(chip, interconnect, s, params))
        .fold(LatencyBreakdown::default(), |a, b| if b.total > a.total { b } else { a })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKnob {
    /// Memory bandwidth in GB/s.
    Bandwidth,
    CoreCount,
}

impl SweepKnob {
    pub fn apply(&self, chip: &ChipSpec, value: f64) -> ChipSpec {
        match self {
            SweepKnob::Bandwidth => chip.with_bandwidth_gbs(value),
            SweepKnob::CoreCount => chip.with_core_count(value.round().max(1.0) as u64),
        }
    }
}

/// Re-derives the chip for each knob value and evaluates `work` on it.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_sweep(
    base: &ChipSpec,
    knob: SweepKnob,
    values: &[f64],
    model: &ModelSpec,
    interconnect: &InterconnectSpec,
    par: &ParallelismSpec,
    work: &PhaseWork,
    params: &PerfParams,
) -> Result<Vec<(f64, LatencyBreakdown)>> {
    if values.is_empty() {
        return Err(Error::invalid("sensitivity sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let chip = knob.apply(base, v);
            phase_latency(model, &chip, interconnect, par, work, params).map(|b| (v, b))
        })
        .collect()
}
