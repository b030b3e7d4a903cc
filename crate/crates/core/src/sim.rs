//! Discrete-event simulation of a serving cluster.
//!
//! Each machine hosts one model replica and runs one iteration at a time.
//! Iteration latencies come from [`crate::perf::phase_latency`]. Events at the
//! same timestamp are all applied before any idle machine starts its next
//! iteration, so simultaneous arrivals batch together.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::chip::MachineSpec;
use crate::error::{Error, Result};
use crate::model::{kv_bytes_per_token, kv_capacity_tokens, ModelSpec, ParallelismSpec, Phase, PhaseWork, SeqWork};
use crate::perf::{phase_latency, PerfParams};
use crate::presets;
use crate::stats::percentile_sorted;
use crate::workload::{Request, SloSpec, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
    Mixed,
}

impl Role {
    pub fn runs_prefill(self) -> bool {
        matches!(self, Role::Prefill | Role::Mixed)
    }

    pub fn runs_decode(self) -> bool {
        matches!(self, Role::Decode | Role::Mixed)
    }
}

fn default_reserve() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub model: ModelSpec,
    pub par: ParallelismSpec,
    #[serde(default = "default_reserve")]
    pub reserve_frac: f64,
}

impl Deployment {
    pub fn new(model: ModelSpec, par: ParallelismSpec) -> Self {
        Deployment { model, par, reserve_frac: default_reserve() }
    }

    pub fn kv_capacity(&self, machine: &MachineSpec) -> Result<u64> {
        kv_capacity_tokens(machine.memory_bytes(), &self.model, &self.par, self.reserve_frac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub role: Role,
    pub machine: MachineSpec,
    pub count: u64,
    pub deployment: Deployment,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub pools: Vec<Pool>,
}

impl ClusterConfig {
    /// Prefill and decode pools sharing one deployment.
    pub fn disaggregated(
        prefill: MachineSpec,
        n_prefill: u64,
        decode: MachineSpec,
        n_decode: u64,
        deployment: Deployment,
    ) -> Self {
        ClusterConfig {
            pools: vec![
                Pool { role: Role::Prefill, machine: prefill, count: n_prefill, deployment: deployment.clone() },
                Pool { role: Role::Decode, machine: decode, count: n_decode, deployment },
            ],
        }
    }

    pub fn mixed(machine: MachineSpec, count: u64, deployment: Deployment) -> Self {
        ClusterConfig { pools: vec![Pool { role: Role::Mixed, machine, count, deployment }] }
    }

    pub fn machine_count(&self) -> u64 {
        self.pools.iter().map(|p| p.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.pools.first() else {
            return Err(Error::invalid("cluster has no pools"));
        };
        for p in &self.pools {
            p.machine.validate()?;
            p.deployment.model.validate()?;
            p.deployment.par.validate(&p.deployment.model)?;
            if p.deployment.par.chips() != p.machine.chips_per_machine {
                return Err(Error::invalid(format!(
                    "tp×pp = {} but the machine has {} chips",
                    p.deployment.par.chips(),
                    p.machine.chips_per_machine
                )));
            }
            if p.deployment.model != first.deployment.model {
                return Err(Error::invalid("all pools must serve the same model"));
            }
            let cap = p.deployment.kv_capacity(&p.machine)?;
            if cap == 0 {
                return Err(Error::infeasible(format!("{} leaves no room for KV cache", p.machine.chip.name)));
            }
        }
        let live = |f: fn(Role) -> bool| self.pools.iter().any(|p| p.count > 0 && f(p.role));
        if !live(Role::runs_prefill) || !live(Role::runs_decode) {
            return Err(Error::invalid("cluster needs at least one prefill-capable and one decode-capable machine"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillPolicy {
    #[default]
    LeastOutstandingTokens,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePolicy {
    #[default]
    MostFreeKv,
}

fn yes() -> bool {
    true
}

fn default_chunk() -> u64 {
    512
}

fn default_max_batch() -> u64 {
    16_384
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Prefill and decode on separate machines with KV transfer in between.
    Disaggregated {
        #[serde(default)]
        prefill_policy: PrefillPolicy,
        #[serde(default)]
        decode_policy: DecodePolicy,
        #[serde(default = "yes")]
        overlap_kv_transfer: bool,
        #[serde(default = "default_max_batch")]
        max_batch_tokens: u64,
    },
    /// Every machine runs chunked prefill piggybacked on decode iterations.
    Colocated {
        #[serde(default = "default_chunk")]
        chunk_tokens: u64,
        #[serde(default = "default_max_batch")]
        max_batch_tokens: u64,
    },
}

impl SchedulerKind {
    pub fn disaggregated() -> Self {
        SchedulerKind::Disaggregated {
            prefill_policy: PrefillPolicy::default(),
            decode_policy: DecodePolicy::default(),
            overlap_kv_transfer: true,
            max_batch_tokens: default_max_batch(),
        }
    }

    pub fn colocated() -> Self {
        SchedulerKind::Colocated { chunk_tokens: default_chunk(), max_batch_tokens: default_max_batch() }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SchedulerKind::Disaggregated { max_batch_tokens, .. } if max_batch_tokens == 0 => {
                Err(Error::invalid("max_batch_tokens must be >= 1"))
            }
            SchedulerKind::Colocated { chunk_tokens, max_batch_tokens } if chunk_tokens == 0 || max_batch_tokens == 0 => {
                Err(Error::invalid("chunk_tokens and max_batch_tokens must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Stop processing events after this time; unfinished requests are
    /// reported as such.
    pub horizon_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_s: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub prefill_machine: Option<usize>,
    pub decode_machine: Option<usize>,
    pub prefill_start_s: Option<f64>,
    pub prefill_end_s: Option<f64>,
    pub first_token_s: Option<f64>,
    pub completion_s: Option<f64>,
    pub ttft_s: Option<f64>,
    pub e2e_s: Option<f64>,
    pub tokens_generated: u64,
    pub tbt_samples_s: Vec<f64>,
}

impl RequestMetrics {
    pub fn completed(&self) -> bool {
        self.completion_s.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub index: usize,
    pub pool: usize,
    pub role: Option<Role>,
    pub chip: String,
    pub kv_capacity_tokens: u64,
    /// Largest KV footprint (tokens) held during any iteration.
    pub peak_kv_tokens: u64,
    pub iterations: u64,
    pub busy_s: f64,
    pub busy_fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Percentiles {
    fn of(mut v: Vec<f64>) -> Option<Self> {
        v.sort_by(f64::total_cmp);
        Some(Percentiles {
            p50: percentile_sorted(&v, 50.0)?,
            p90: percentile_sorted(&v, 90.0)?,
            p99: percentile_sorted(&v, 99.0)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub requests: Vec<RequestMetrics>,
    pub machines: Vec<MachineMetrics>,
    pub completed: u64,
    pub unfinished: u64,
    pub ttft_s: Option<Percentiles>,
    pub tbt_s: Option<Percentiles>,
    pub throughput_rps: f64,
    pub kv_bytes_transferred: f64,
    /// Time of the last processed event.
    pub end_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub ttft0_s: f64,
    pub tbt0_s: f64,
}

/// Unbatched latencies of one request on the reference machine: prefill of
/// the prompt, and one decode step at the midpoint context.
pub fn baseline_latency(
    request: &Request,
    deployment: &Deployment,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<Baseline> {
    deployment.kv_capacity(machine)?;
    let m = &deployment.model;
    let ic = &machine.interconnect;
    let ttft0 = phase_latency(m, &machine.chip, ic, &deployment.par, &PhaseWork::prefill(&[request.input_tokens]), params)?;
    let mid = request.input_tokens + request.output_tokens / 2;
    let tbt0 = phase_latency(m, &machine.chip, ic, &deployment.par, &PhaseWork::decode(&[mid]), params)?;
    Ok(Baseline { ttft0_s: ttft0.total, tbt0_s: tbt0.total })
}

/// Baselines for every request of a trace on an 8-chip H100 machine.
pub fn reference_baselines(trace: &Trace, deployment: &Deployment, params: &PerfParams) -> Result<Vec<Baseline>> {
    let machine = MachineSpec::new(presets::h100());
    let mut cache: HashMap<(u64, u64), Baseline> = HashMap::new();
    trace
        .requests
        .iter()
        .map(|r| {
            let key = (r.input_tokens, r.output_tokens / 2);
            if let Some(b) = cache.get(&key) {
                return Ok(*b);
            }
            let b = baseline_latency(r, deployment, &machine, params)?;
            cache.insert(key, b);
            Ok(b)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SloMargins {
    pub p90_tbt: f64,
    pub p90_ttft: f64,
    pub p99_tbt: f64,
    pub p99_ttft: f64,
}

impl SloMargins {
    pub fn worst(&self) -> f64 {
        self.p90_tbt.max(self.p90_ttft).max(self.p99_tbt).max(self.p99_ttft)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SloVerdict {
    pub pass: bool,
    /// Observed slowdown over the limit; at most 1 when met.
    pub margins: SloMargins,
    pub observed: SloMargins,
}

/// Normalized slowdowns: TTFT per request and the pooled TBT samples.
/// Missing values (unfinished requests) count as infinite.
pub fn normalized_slowdowns(metrics: &SimMetrics, baselines: &[Baseline]) -> Result<(Vec<f64>, Vec<f64>)> {
    if baselines.len() != metrics.requests.len() {
        return Err(Error::Domain(format!(
            "{} baselines for {} requests",
            baselines.len(),
            metrics.requests.len()
        )));
    }
    let mut ttft = Vec::with_capacity(metrics.requests.len());
    let mut tbt = Vec::new();
    for (r, b) in metrics.requests.iter().zip(baselines) {
        ttft.push(r.ttft_s.map_or(f64::INFINITY, |t| t / b.ttft0_s));
        tbt.extend(r.tbt_samples_s.iter().map(|t| t / b.tbt0_s));
        let missing = r.output_tokens.saturating_sub(1) as usize - r.tbt_samples_s.len();
        tbt.extend(std::iter::repeat_n(f64::INFINITY, missing));
    }
    Ok((ttft, tbt))
}

pub fn evaluate_slo(metrics: &SimMetrics, baselines: &[Baseline], slo: &SloSpec) -> Result<SloVerdict> {
    if metrics.requests.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let (mut ttft, mut tbt) = normalized_slowdowns(metrics, baselines)?;
    ttft.sort_by(f64::total_cmp);
    tbt.sort_by(f64::total_cmp);
    let pct = |v: &[f64], p| percentile_sorted(v, p).unwrap_or(0.0);
    let observed = SloMargins {
        p90_tbt: pct(&tbt, 90.0),
        p90_ttft: pct(&ttft, 90.0),
        p99_tbt: pct(&tbt, 99.0),
        p99_ttft: pct(&ttft, 99.0),
    };
    let margins = SloMargins {
        p90_tbt: observed.p90_tbt / slo.p90_tbt,
        p90_ttft: observed.p90_ttft / slo.p90_ttft,
        p99_tbt: observed.p99_tbt / slo.p99_tbt,
        p99_ttft: observed.p99_ttft / slo.p99_ttft,
    };
    Ok(SloVerdict { pass: margins.worst() <= 1.0, margins, observed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    IterationDone,
    KvReady,
    Arrival,
}

#[derive(Clone, Copy, Debug)]
struct Event {
    t: f64,
    kind: EventKind,
    /// Machine index for iteration events, request index otherwise.
    idx: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.kind.cmp(&self.kind))
            .then(other.idx.cmp(&self.idx))
    }
}

enum Running {
    Prefill { batch: Vec<usize>, latency: f64 },
    Decode { batch: Vec<usize> },
    Mixed { decodes: Vec<usize>, chunks: Vec<(usize, u64)> },
}

struct Machine<'a> {
    role: Role,
    spec: &'a MachineSpec,
    deployment: &'a Deployment,
    kv_capacity: u64,
    prefill_queue: VecDeque<usize>,
    waiting: VecDeque<usize>,
    resident: Vec<usize>,
    outstanding: u64,
    reserved_kv: u64,
    /// Prompt KV computed here and still waiting for a decode machine.
    held_kv: u64,
    /// Prompt tokens of the prefill batch in flight.
    batch_kv: u64,
    running: Option<Running>,
    metrics: MachineMetrics,
}

impl Machine<'_> {
    fn free_kv(&self) -> u64 {
        self.kv_capacity.saturating_sub(self.reserved_kv + self.held_kv + self.batch_kv)
    }
}

struct ReqState {
    prefilled: u64,
    generated: u64,
    last_token_s: f64,
}

struct Sim<'a> {
    sched: SchedulerKind,
    params: &'a PerfParams,
    kv_per_token: f64,
    machines: Vec<Machine<'a>>,
    reqs: &'a [Request],
    state: Vec<ReqState>,
    out: Vec<RequestMetrics>,
    decode_queue: VecDeque<usize>,
    events: BinaryHeap<Event>,
    kv_bytes_transferred: f64,
}

pub fn simulate(
    cluster: &ClusterConfig,
    scheduler: &SchedulerKind,
    trace: &Trace,
    params: &PerfParams,
    opts: &SimOptions,
) -> Result<SimMetrics> {
    cluster.validate()?;
    scheduler.validate()?;
    params.validate()?;
    trace.validate()?;

    let mut machines = Vec::new();
    for (pi, pool) in cluster.pools.iter().enumerate() {
        let kv_capacity = pool.deployment.kv_capacity(&pool.machine)?;
        for _ in 0..pool.count {
            let index = machines.len();
            machines.push(Machine {
                role: match scheduler {
                    SchedulerKind::Colocated { .. } => Role::Mixed,
                    SchedulerKind::Disaggregated { .. } => pool.role,
                },
                spec: &pool.machine,
                deployment: &pool.deployment,
                kv_capacity,
                prefill_queue: VecDeque::new(),
                waiting: VecDeque::new(),
                resident: Vec::new(),
                outstanding: 0,
                reserved_kv: 0,
                held_kv: 0,
                batch_kv: 0,
                running: None,
                metrics: MachineMetrics {
                    index,
                    pool: pi,
                    role: Some(pool.role),
                    chip: pool.machine.chip.name.clone(),
                    kv_capacity_tokens: kv_capacity,
                    ..MachineMetrics::default()
                },
            });
        }
    }

    let reqs = &trace.requests[..];
    let mut sim = Sim {
        sched: *scheduler,
        params,
        kv_per_token: kv_bytes_per_token(&cluster.pools[0].deployment.model) as f64,
        machines,
        reqs,
        state: reqs.iter().map(|_| ReqState { prefilled: 0, generated: 0, last_token_s: 0.0 }).collect(),
        out: reqs
            .iter()
            .map(|r| RequestMetrics {
                id: r.id,
                arrival_s: r.arrival_s,
                input_tokens: r.input_tokens,
                output_tokens: r.output_tokens,
                ..RequestMetrics::default()
            })
            .collect(),
        decode_queue: VecDeque::new(),
        events: BinaryHeap::new(),
        kv_bytes_transferred: 0.0,
    };
    sim.check_capacity()?;
    for (i, r) in reqs.iter().enumerate() {
        sim.events.push(Event { t: r.arrival_s, kind: EventKind::Arrival, idx: i });
    }

    let mut now = reqs.first().map_or(0.0, |r| r.arrival_s);
    while let Some(ev) = sim.events.pop() {
        if opts.horizon_s.is_some_and(|h| ev.t > h) {
            break;
        }
        now = ev.t;
        match ev.kind {
            EventKind::Arrival => sim.on_arrival(ev.idx),
            EventKind::KvReady => sim.on_kv_ready(ev.idx, now),
            EventKind::IterationDone => sim.on_iteration_done(ev.idx, now),
        }
        if sim.events.peek().is_none_or(|next| next.t > now) {
            sim.start_idle(now)?;
        }
    }
    Ok(sim.finish(now))
}

impl Sim<'_> {
    fn check_capacity(&self) -> Result<()> {
        let disagg = matches!(self.sched, SchedulerKind::Disaggregated { .. });
        let cap = |f: fn(Role) -> bool, pick: fn(u64, u64) -> u64, init: u64| {
            self.machines.iter().filter(|m| f(m.role)).map(|m| m.kv_capacity).fold(init, pick)
        };
        let prefill_cap = cap(Role::runs_prefill, u64::min, u64::MAX);
        let decode_cap = if disagg { cap(Role::runs_decode, u64::max, 0) } else { prefill_cap };
        for (i, r) in self.reqs.iter().enumerate() {
            let need = r.input_tokens + r.output_tokens;
            let (needed, capacity) = if r.input_tokens > prefill_cap {
                (r.input_tokens, prefill_cap)
            } else if need > decode_cap && (r.output_tokens > 1 || !disagg) {
                (need, decode_cap)
            } else {
                continue;
            };
            return Err(Error::CapacityDeadlock { request: self.reqs[i].id, needed, capacity });
        }
        Ok(())
    }

    fn on_arrival(&mut self, r: usize) {
        let req = self.reqs[r];
        // Least outstanding work; lowest index on ties.
        let m = self
            .machines
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role.runs_prefill())
            .min_by_key(|(i, m)| (m.outstanding, *i))
            .map(|(i, _)| i)
            .expect("validated cluster has a prefill-capable machine");
        let mach = &mut self.machines[m];
        self.out[r].prefill_machine = Some(m);
        match self.sched {
            SchedulerKind::Disaggregated { .. } => {
                mach.outstanding += req.input_tokens;
                mach.prefill_queue.push_back(r);
            }
            SchedulerKind::Colocated { .. } => {
                mach.outstanding += req.input_tokens + req.output_tokens;
                mach.waiting.push_back(r);
            }
        }
    }

    fn on_kv_ready(&mut self, r: usize, now: f64) {
        self.first_token(r, now);
        self.decode_queue.push_back(r);
        self.admit_decodes();
    }

    fn first_token(&mut self, r: usize, now: f64) {
        let o = &mut self.out[r];
        o.first_token_s = Some(now);
        o.ttft_s = Some(now - o.arrival_s);
        o.tokens_generated = 1;
        self.state[r].generated = 1;
        self.state[r].last_token_s = now;
    }

    fn complete(&mut self, r: usize, now: f64) {
        let o = &mut self.out[r];
        o.completion_s = Some(now);
        o.e2e_s = Some(now - o.arrival_s);
    }

    /// FIFO admission to the decode machine with the most free KV. The
    /// prompt's KV stays on its prefill machine until then.
    fn admit_decodes(&mut self) {
        while let Some(&r) = self.decode_queue.front() {
            let need = self.reqs[r].input_tokens + self.reqs[r].output_tokens;
            let best = self
                .machines
                .iter()
                .enumerate()
                .filter(|(_, m)| m.role.runs_decode())
                .max_by(|(i, a), (j, b)| {
                    a.free_kv().cmp(&b.free_kv()).then(j.cmp(i))
                })
                .map(|(i, _)| i)
                .expect("validated cluster has a decode-capable machine");
            let m = &mut self.machines[best];
            if m.free_kv() < need {
                break;
            }
            m.reserved_kv += need;
            m.resident.push(r);
            self.out[r].decode_machine = Some(best);
            self.decode_queue.pop_front();
            let source = self.out[r].prefill_machine.expect("decoding request was prefilled");
            self.machines[source].held_kv -= self.reqs[r].input_tokens;
        }
    }

    fn start_idle(&mut self, now: f64) -> Result<()> {
        for m in 0..self.machines.len() {
            if self.machines[m].running.is_none() {
                match self.sched {
                    SchedulerKind::Disaggregated { max_batch_tokens, .. } => self.start_disaggregated(m, now, max_batch_tokens)?,
                    SchedulerKind::Colocated { chunk_tokens, max_batch_tokens } => {
                        self.start_colocated(m, now, chunk_tokens, max_batch_tokens)?
                    }
                }
            }
        }
        Ok(())
    }

    fn latency(&self, m: usize, work: &PhaseWork) -> Result<f64> {
        let mach = &self.machines[m];
        let d = mach.deployment;
        Ok(phase_latency(&d.model, &mach.spec.chip, &mach.spec.interconnect, &d.par, work, self.params)?.total)
    }

    fn launch(&mut self, m: usize, now: f64, latency: f64, running: Running, kv_tokens: u64) {
        let mach = &mut self.machines[m];
        mach.metrics.iterations += 1;
        mach.metrics.busy_s += latency;
        mach.metrics.peak_kv_tokens = mach.metrics.peak_kv_tokens.max(kv_tokens);
        mach.running = Some(running);
        self.events.push(Event { t: now + latency, kind: EventKind::IterationDone, idx: m });
    }

    fn start_disaggregated(&mut self, m: usize, now: f64, max_batch_tokens: u64) -> Result<()> {
        let mach = &mut self.machines[m];
        if mach.role.runs_prefill() {
            let free = mach.free_kv();
            let mut batch = Vec::new();
            let mut tokens = 0;
            while let Some(&r) = mach.prefill_queue.front() {
                let len = self.reqs[r].input_tokens;
                let fits = tokens + len <= max_batch_tokens || batch.is_empty();
                if !fits || tokens + len > free {
                    break;
                }
                tokens += len;
                batch.push(r);
                mach.prefill_queue.pop_front();
            }
            if !batch.is_empty() {
                let lens: Vec<u64> = batch.iter().map(|&r| self.reqs[r].input_tokens).collect();
                let latency = self.latency(m, &PhaseWork::prefill(&lens))?;
                for &r in &batch {
                    self.out[r].prefill_start_s = Some(now);
                }
                let mach = &mut self.machines[m];
                mach.batch_kv = tokens;
                let kv = mach.reserved_kv + mach.held_kv + tokens;
                self.launch(m, now, latency, Running::Prefill { batch, latency }, kv);
                return Ok(());
            }
        }
        let mach = &self.machines[m];
        if mach.role.runs_decode() && !mach.resident.is_empty() {
            let batch = mach.resident.clone();
            let ctx: Vec<u64> = batch.iter().map(|&r| self.reqs[r].input_tokens + self.state[r].generated).collect();
            let kv = ctx.iter().sum::<u64>() + ctx.len() as u64 + mach.held_kv;
            let latency = self.latency(m, &PhaseWork::decode(&ctx))?;
            self.launch(m, now, latency, Running::Decode { batch }, kv);
        }
        Ok(())
    }

    fn start_colocated(&mut self, m: usize, now: f64, chunk_tokens: u64, max_batch_tokens: u64) -> Result<()> {
        let mach = &mut self.machines[m];
        while let Some(&r) = mach.waiting.front() {
            let need = self.reqs[r].input_tokens + self.reqs[r].output_tokens;
            if mach.reserved_kv + need > mach.kv_capacity {
                break;
            }
            mach.reserved_kv += need;
            mach.resident.push(r);
            mach.waiting.pop_front();
            self.out[r].decode_machine = Some(m);
        }
        let mut decodes = Vec::new();
        let mut seqs = Vec::new();
        let mut kv = 0;
        for &r in &mach.resident {
            let s = &self.state[r];
            if s.generated >= 1 {
                let ctx = self.reqs[r].input_tokens + s.generated;
                decodes.push(r);
                seqs.push(SeqWork { new_tokens: 1, context_len: ctx });
                kv += ctx + 1;
            }
        }
        let mut budget = chunk_tokens.min(max_batch_tokens.saturating_sub(decodes.len() as u64));
        let mut chunks = Vec::new();
        for &r in &mach.resident {
            if budget == 0 {
                break;
            }
            let s = &self.state[r];
            let rem = self.reqs[r].input_tokens - s.prefilled;
            if s.generated == 0 && rem > 0 {
                let c = rem.min(budget);
                budget -= c;
                chunks.push((r, c));
                seqs.push(SeqWork { new_tokens: c, context_len: s.prefilled + c });
                kv += s.prefilled + c;
            }
        }
        if seqs.is_empty() {
            return Ok(());
        }
        let phase = if chunks.is_empty() { Phase::Decode } else { Phase::Mixed };
        let work = PhaseWork { phase, seqs };
        let latency = self.latency(m, &work)?;
        for &(r, _) in &chunks {
            self.out[r].prefill_start_s.get_or_insert(now);
        }
        self.launch(m, now, latency, Running::Mixed { decodes, chunks }, kv);
        Ok(())
    }

    fn on_iteration_done(&mut self, m: usize, now: f64) {
        let running = self.machines[m].running.take().expect("iteration event for an idle machine");
        match running {
            Running::Prefill { batch, latency } => {
                let SchedulerKind::Disaggregated { overlap_kv_transfer, .. } = self.sched else {
                    unreachable!("prefill-only iterations are disaggregated")
                };
                let mach = &mut self.machines[m];
                mach.batch_kv = 0;
                let rate = mach.deployment.par.tp as f64 * mach.spec.interconnect.scaleout_gbs_per_chip * 1e9;
                for r in batch {
                    let req = self.reqs[r];
                    self.machines[m].outstanding -= req.input_tokens;
                    self.out[r].prefill_end_s = Some(now);
                    self.state[r].prefilled = req.input_tokens;
                    if req.output_tokens == 1 {
                        self.first_token(r, now);
                        self.complete(r, now);
                        continue;
                    }
                    self.machines[m].held_kv += req.input_tokens;
                    let bytes = req.input_tokens as f64 * self.kv_per_token;
                    self.kv_bytes_transferred += bytes;
                    let transfer = bytes / rate;
                    let delay = if overlap_kv_transfer { (transfer - latency).max(0.0) } else { transfer };
                    self.events.push(Event { t: now + delay, kind: EventKind::KvReady, idx: r });
                }
            }
            Running::Decode { batch } => {
                for r in batch {
                    self.decode_step(m, r, now);
                }
                self.admit_decodes();
            }
            Running::Mixed { decodes, chunks } => {
                for r in decodes {
                    self.decode_step(m, r, now);
                }
                for (r, c) in chunks {
                    self.machines[m].outstanding -= c;
                    self.state[r].prefilled += c;
                    if self.state[r].prefilled == self.reqs[r].input_tokens {
                        self.out[r].prefill_end_s = Some(now);
                        self.first_token(r, now);
                        self.machines[m].outstanding -= 1;
                        if self.reqs[r].output_tokens == 1 {
                            self.retire(m, r, now);
                        }
                    }
                }
            }
        }
    }

    fn decode_step(&mut self, m: usize, r: usize, now: f64) {
        let s = &mut self.state[r];
        self.out[r].tbt_samples_s.push(now - s.last_token_s);
        s.last_token_s = now;
        s.generated += 1;
        self.out[r].tokens_generated = s.generated;
        if matches!(self.sched, SchedulerKind::Colocated { .. }) {
            self.machines[m].outstanding -= 1;
        }
        if s.generated == self.reqs[r].output_tokens {
            self.retire(m, r, now);
        }
    }

    fn retire(&mut self, m: usize, r: usize, now: f64) {
        self.complete(r, now);
        let mach = &mut self.machines[m];
        mach.reserved_kv -= self.reqs[r].input_tokens + self.reqs[r].output_tokens;
        let pos = mach.resident.iter().position(|&x| x == r).expect("retiring a resident request");
        mach.resident.remove(pos);
    }

    fn finish(self, end: f64) -> SimMetrics {
        let start = self.reqs.first().map_or(0.0, |r| r.arrival_s);
        let span = end - start;
        let machines = self
            .machines
            .into_iter()
            .map(|m| {
                let mut mm = m.metrics;
                mm.busy_fraction = if span > 0.0 { (mm.busy_s / span).min(1.0) } else { 0.0 };
                mm
            })
            .collect();
        let completed = self.out.iter().filter(|r| r.completed()).count() as u64;
        let last_done = self.out.iter().filter_map(|r| r.completion_s).fold(f64::NEG_INFINITY, f64::max);
        let throughput_rps = if completed > 0 && last_done > start { completed as f64 / (last_done - start) } else { 0.0 };
        let ttft = Percentiles::of(self.out.iter().filter_map(|r| r.ttft_s).collect());
        let tbt = Percentiles::of(self.out.iter().flat_map(|r| r.tbt_samples_s.iter().copied()).collect());
        SimMetrics {
            completed,
            unfinished: self.out.len() as u64 - completed,
            requests: self.out,
            machines,
            ttft_s: ttft,
            tbt_s: tbt,
            throughput_rps,
            kv_bytes_transferred: self.kv_bytes_transferred,
            end_s: end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionVariant;
    use crate::workload::{slo_thresholds, SloTier};

    fn toy_model() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            num_layers: 2,
            hidden_dim: 1024,
            num_heads: 8,
            num_kv_heads: 8,
            head_dim: None,
            ffn_intermediate: 4096,
            ffn_gated: false,
            tied_embeddings: true,
            attention_variant: AttentionVariant::MHA,
            moe: None,
            weight_bytes_per_param: 2,
            kv_bytes_per_elem: 2,
            vocab_size: 32_000,
        }
    }

    fn toy_cluster(n_p: u64, n_d: u64) -> ClusterConfig {
        let dep = Deployment::new(toy_model(), ParallelismSpec::tp(8));
        let m = MachineSpec::new(presets::h100());
        ClusterConfig::disaggregated(m.clone(), n_p, m, n_d, dep)
    }

    fn req(id: u64, t: f64, i: u64, o: u64) -> Request {
        Request { id, arrival_s: t, input_tokens: i, output_tokens: o }
    }

    fn run(c: &ClusterConfig, s: SchedulerKind, t: &Trace) -> SimMetrics {
        simulate(c, &s, t, &PerfParams::default(), &SimOptions::default()).unwrap()
    }

    #[test]
    fn empty_trace() {
        let m = run(&toy_cluster(1, 1), SchedulerKind::disaggregated(), &Trace::default());
        assert!(m.requests.is_empty());
        assert_eq!(m.ttft_s, None);
        assert_eq!(m.tbt_s, None);
        assert!(m.machines.iter().all(|x| x.busy_fraction == 0.0));
        assert!(matches!(
            evaluate_slo(&m, &[], &slo_thresholds(SloTier::Normal)),
            Err(Error::EmptyMetrics)
        ));
    }

    #[test]
    fn single_output_token_finishes_at_prefill() {
        let c = toy_cluster(1, 1);
        let t = Trace::new(vec![req(0, 0.5, 100, 1)]);
        let m = run(&c, SchedulerKind::disaggregated(), &t);
        let dep = &c.pools[0].deployment;
        let p = phase_latency(&dep.model, &presets::h100(), &Default::default(), &dep.par, &PhaseWork::prefill(&[100]), &PerfParams::default())
            .unwrap()
            .total;
        let r = &m.requests[0];
        assert_eq!(r.ttft_s, Some(0.5 + p - 0.5));
        assert!(r.tbt_samples_s.is_empty());
        assert_eq!(m.kv_bytes_transferred, 0.0);
        assert_eq!(m.completed, 1);
    }

    #[test]
    fn serialized_transfer_adds_to_ttft() {
        let c = toy_cluster(1, 1);
        let t = Trace::new(vec![req(0, 0.0, 1000, 3)]);
        let on = run(&c, SchedulerKind::disaggregated(), &t);
        let off = run(
            &c,
            SchedulerKind::Disaggregated {
                prefill_policy: Default::default(),
                decode_policy: Default::default(),
                overlap_kv_transfer: false,
                max_batch_tokens: 16_384,
            },
            &t,
        );
        let transfer = 1000.0 * kv_bytes_per_token(&toy_model()) as f64 / (8.0 * 50e9);
        let d = off.requests[0].ttft_s.unwrap() - on.requests[0].ttft_s.unwrap();
        assert!((d - transfer).abs() < 1e-12, "{d} vs {transfer}");
        assert_eq!(on.kv_bytes_transferred, 1000.0 * kv_bytes_per_token(&toy_model()) as f64);
    }

    #[test]
    fn routing_balances_prefill_queues() {
        let c = toy_cluster(2, 1);
        let t = Trace::new(vec![req(0, 0.0, 500, 2), req(0, 0.0, 100, 2), req(0, 0.0, 100, 2)]);
        let m = run(&c, SchedulerKind::disaggregated(), &t);
        let machines: Vec<_> = m.requests.iter().map(|r| r.prefill_machine.unwrap()).collect();
        assert_eq!(machines, vec![0, 1, 1]);
    }

    /// Shrinks the reserved memory of pool `pool` so it holds `tokens` KV tokens.
    fn limit_kv(c: &mut ClusterConfig, pool: usize, tokens: u64) {
        let p = &mut c.pools[pool];
        let need = p.deployment.model.total_weight_bytes() as f64 + (tokens as f64 + 0.5) * kv_bytes_per_token(&p.deployment.model) as f64;
        p.deployment.reserve_frac = need / p.machine.memory_bytes();
        assert_eq!(p.deployment.kv_capacity(&p.machine).unwrap(), tokens);
    }

    #[test]
    fn decode_admission_waits_for_capacity() {
        let mut c = toy_cluster(1, 1);
        limit_kv(&mut c, 1, 300);
        let t = Trace::new(vec![req(0, 0.0, 150, 10), req(0, 0.0, 150, 10)]);
        let m = run(&c, SchedulerKind::disaggregated(), &t);
        assert_eq!(m.completed, 2);
        let (a, b) = (&m.requests[0], &m.requests[1]);
        // The second request is admitted only once the first retires.
        assert_eq!(a.first_token_s, b.first_token_s);
        assert!(b.tbt_samples_s[0] > a.completion_s.unwrap() - b.first_token_s.unwrap());
        assert!(m.machines[1].peak_kv_tokens <= 300);
    }

    #[test]
    fn capacity_deadlock_is_reported() {
        let c = toy_cluster(1, 1);
        let cap = c.pools[1].deployment.kv_capacity(&c.pools[1].machine).unwrap();
        let t = Trace::new(vec![req(0, 0.0, 10, cap)]);
        let e = simulate(&c, &SchedulerKind::disaggregated(), &t, &PerfParams::default(), &SimOptions::default());
        assert!(matches!(e, Err(Error::CapacityDeadlock { .. })));
    }

    #[test]
    fn colocated_chunks_long_prompts() {
        let dep = Deployment::new(toy_model(), ParallelismSpec::tp(8));
        let c = ClusterConfig::mixed(MachineSpec::new(presets::h100()), 1, dep);
        let t = Trace::new(vec![req(0, 0.0, 1200, 3)]);
        let m = run(&c, SchedulerKind::colocated(), &t);
        // 512 + 512 + 176 prompt tokens, then two decode steps.
        assert_eq!(m.machines[0].iterations, 5);
        assert_eq!(m.requests[0].tbt_samples_s.len(), 2);
        assert_eq!(m.kv_bytes_transferred, 0.0);
    }

    #[test]
    fn horizon_leaves_requests_unfinished() {
        let c = toy_cluster(1, 1);
        let t = Trace::new(vec![req(0, 0.0, 100, 50), req(0, 10.0, 100, 50)]);
        let m = simulate(&c, &SchedulerKind::disaggregated(), &t, &PerfParams::default(), &SimOptions { horizon_s: Some(5.0) })
            .unwrap();
        assert_eq!(m.completed, 1);
        assert_eq!(m.unfinished, 1);
        let b = reference_baselines(&t, &c.pools[0].deployment, &PerfParams::default()).unwrap();
        let (ttft, tbt) = normalized_slowdowns(&m, &b).unwrap();
        assert_eq!(ttft[1], f64::INFINITY);
        assert_eq!(tbt.iter().filter(|x| x.is_infinite()).count(), 49);
    }

    #[test]
    fn slo_margins_at_boundary() {
        let metrics = SimMetrics {
            requests: (0..10)
                .map(|i| RequestMetrics {
                    output_tokens: 1,
                    ttft_s: Some(if i == 9 { 10.0 } else if i == 8 { 3.01 } else { 1.0 }),
                    ..RequestMetrics::default()
                })
                .collect(),
            ..SimMetrics::default()
        };
        let base = vec![Baseline { ttft0_s: 1.0, tbt0_s: 1.0 }; 10];
        let v = evaluate_slo(&metrics, &base, &slo_thresholds(SloTier::Normal)).unwrap();
        assert!(!v.pass);
        assert!((v.margins.p90_ttft - 3.01 / 3.0).abs() < 1e-12);
        assert_eq!(v.margins.p90_tbt, 0.0);

        let ones = SimMetrics {
            requests: (0..10)
                .map(|_| RequestMetrics { output_tokens: 3, ttft_s: Some(2.0), tbt_samples_s: vec![0.5, 0.5], ..RequestMetrics::default() })
                .collect(),
            ..SimMetrics::default()
        };
        let base = vec![Baseline { ttft0_s: 2.0, tbt0_s: 0.5 }; 10];
        for tier in SloTier::ALL {
            assert!(evaluate_slo(&ones, &base, &slo_thresholds(tier)).unwrap().pass);
        }
    }

    #[test]
    fn baseline_matches_direct_perf_call() {
        let dep = Deployment::new(presets::bloom_176b(), ParallelismSpec::tp(8));
        let h = MachineSpec::new(presets::h100());
        let p = PerfParams::default();
        let b = baseline_latency(&req(0, 0.0, 1024, 1), &dep, &h, &p).unwrap();
        let direct = phase_latency(&dep.model, &h.chip, &h.interconnect, &dep.par, &PhaseWork::prefill(&[1024]), &p).unwrap();
        assert_eq!(b.ttft0_s, direct.total);
        let d = phase_latency(&dep.model, &h.chip, &h.interconnect, &dep.par, &PhaseWork::decode(&[1024]), &p).unwrap();
        assert_eq!(b.tbt0_s, d.total);
        assert_eq!(PhaseWork::decode(&[1]).phase, Phase::Decode);
    }

    #[test]
    fn invalid_clusters_rejected() {
        let mut c = toy_cluster(1, 0);
        assert!(c.validate().is_err());
        c.pools[1].count = 1;
        c.pools[1].deployment.par = ParallelismSpec::tp(4);
        assert!(c.validate().is_err());
        let mut bloom = toy_cluster(1, 1);
        bloom.pools[0].deployment.model = presets::bloom_176b();
        bloom.pools[1].deployment.model = presets::bloom_176b();
        bloom.pools[0].machine.chips_per_machine = 8;
        bloom.pools[0].machine.chip.mem_packages = 1;
        assert!(matches!(bloom.validate(), Err(Error::InfeasibleDeployment(_))));
    }

    #[test]
    fn event_order_is_time_then_kind_then_index() {
        let mut h = BinaryHeap::new();
        h.push(Event { t: 1.0, kind: EventKind::Arrival, idx: 0 });
        h.push(Event { t: 1.0, kind: EventKind::IterationDone, idx: 3 });
        h.push(Event { t: 1.0, kind: EventKind::IterationDone, idx: 1 });
        h.push(Event { t: 0.5, kind: EventKind::Arrival, idx: 9 });
        let order: Vec<_> = std::iter::from_fn(|| h.pop()).map(|e| (e.t, e.kind, e.idx)).collect();
        assert_eq!(
            order,
            vec![
                (0.5, EventKind::Arrival, 9),
                (1.0, EventKind::IterationDone, 1),
                (1.0, EventKind::IterationDone, 3),
                (1.0, EventKind::Arrival, 0)
            ]
        );
    }
}
