mod config;
mod manifest;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use spadsim::chip::{InterconnectSpec, MachineSpec};
use spadsim::econ::{chip_cost, chip_tdp, normalized, CostParams};
use spadsim::explore::{
    dse_chips, provision, reallocate, DseGrid, DseSetup, InventoryItem, ProvisionGrid, ProvisionSpec, ReallocateSpec,
};
use spadsim::model::{ParallelismSpec, Phase, PhaseWork};
use spadsim::perf::{phase_latency, sensitivity_sweep, LatencyBreakdown, PerfParams, SweepKnob};
use spadsim::sim::{evaluate_slo, reference_baselines, simulate, Role, SchedulerKind, SimMetrics, SimOptions};
use spadsim::workload::{parse_trace, slo_thresholds, synth_trace, Profile, SloSpec, SloTier, Trace};

use config::{deployment, read_json, ChipRef, ClusterFile, ModelRef};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "spadsim", version, about = "Model LLM serving hardware: chips, costs, and cluster schedules")]
struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true, env = "SPADSIM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect chip descriptions.
    #[command(subcommand)]
    Chip(ChipCommand),
    /// Phase latency of one batch, optionally swept over a chip parameter.
    Perf(PerfArgs),
    /// Die, memory and total cost plus TDP per chip, as CSV.
    Cost(CostArgs),
    /// Generate or convert request traces.
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Replay a trace through a cluster and evaluate SLOs.
    Simulate(SimulateArgs),
    /// Sweep cluster sizes for the cheapest one that meets an SLO.
    Provision(ProvisionArgs),
    /// Sweep chip parameters and report latency, area, cost and TDP.
    Dse(DseArgs),
    /// Find the prefill/decode split of a fixed inventory that serves the highest rate.
    Reallocate(ReallocateArgs),
}

#[derive(Debug, Subcommand)]
enum ChipCommand {
    /// Print a chip with its derived peak rates, cost and TDP as JSON.
    Show {
        /// Bundled chip name or path to a chip JSON file.
        #[arg(long)]
        chip: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TraceCommand {
    /// Poisson arrivals with lognormal prompt and output lengths.
    Synth {
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value = "coding")]
        profile: Profile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Prefill => Phase::Prefill,
            PhaseArg::Decode => Phase::Decode,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KnobArg {
    Bandwidth,
    CoreCount,
}

#[derive(Debug, Args)]
struct ParArgs {
    /// Tensor-parallel degree; defaults to every chip of the machine.
    #[arg(long)]
    tp: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pp: u64,
    #[arg(long, default_value_t = 1)]
    ep: u64,
    #[arg(long, default_value_t = 8)]
    chips_per_machine: u64,
}

impl ParArgs {
    fn spec(&self) -> ParallelismSpec {
        let tp = self.tp.unwrap_or(self.chips_per_machine / self.pp.max(1));
        ParallelismSpec::new(tp, self.pp, self.ep)
    }
}

#[derive(Debug, Args)]
struct PerfArgs {
    #[arg(long)]
    chip: String,
    #[arg(long)]
    model: String,
    #[command(flatten)]
    par: ParArgs,
    #[arg(long, value_enum)]
    phase: PhaseArg,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    /// Prompt length for prefill, context length for decode.
    #[arg(long)]
    seq: u64,
    #[arg(long, value_enum, requires = "values")]
    sweep: Option<KnobArg>,
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    values: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Chip names or paths; repeat or comma-separate.
    #[arg(long, required = true, value_delimiter = ',')]
    chip: Vec<String>,
    /// Override the HBM price, USD per GB.
    #[arg(long)]
    hbm_usd_per_gb: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Tier name (loose, normal, tight) or path to a JSON SLO spec.
#[derive(Clone, Debug)]
struct SloArg(String);

impl std::str::FromStr for SloArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(SloArg(s.to_string()))
    }
}

impl SloArg {
    fn load(&self) -> Result<SloSpec> {
        if let Ok(tier) = self.0.parse::<SloTier>() {
            return Ok(slo_thresholds(tier));
        }
        let path = Path::new(&self.0);
        if !path.is_file() {
            bail!(Usage(format!("--slo {:?} is neither a tier (loose, normal, tight) nor a file", self.0)));
        }
        read_json(path)
    }

    fn path(&self) -> Option<&Path> {
        self.0.parse::<SloTier>().is_err().then(|| Path::new(&self.0))
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Cluster description (JSON).
    #[arg(long)]
    cluster: PathBuf,
    /// Scheduler description (JSON); defaults to colocated for mixed pools,
    /// disaggregated otherwise.
    #[arg(long)]
    scheduler: Option<PathBuf>,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "normal")]
    slo: SloArg,
    /// Stop the simulation at this time in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Results JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per request here.
    #[arg(long)]
    per_request: Option<PathBuf>,
}

/// Inclusive range written `lo..hi`, `lo-hi` or a single number.
#[derive(Clone, Copy, Debug, Serialize)]
struct Span(u64, u64);

impl std::str::FromStr for Span {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected N or LO..HI, got {s:?}");
        let (a, b) = s.split_once("..").or_else(|| s.split_once('-')).unwrap_or((s, s));
        let lo: u64 = a.trim().parse().map_err(|_| bad())?;
        let hi: u64 = b.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok(Span(lo, hi))
    }
}

#[derive(Debug, Args)]
struct ProvisionArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    par: ParArgs,
    #[arg(long)]
    trace: PathBuf,
    /// Rate the trace was recorded at; measured from the trace when absent.
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long)]
    target_rate: f64,
    #[arg(long, default_value = "normal")]
    slo: SloArg,
    #[arg(long, requires_all = ["decode_chip", "n_prefill", "n_decode"], conflicts_with = "colocated_chip")]
    prefill_chip: Option<String>,
    #[arg(long, requires = "prefill_chip")]
    decode_chip: Option<String>,
    #[arg(long)]
    n_prefill: Option<Span>,
    #[arg(long)]
    n_decode: Option<Span>,
    /// Sweep one pool of machines running both phases instead.
    #[arg(long, requires = "n")]
    colocated_chip: Option<String>,
    #[arg(long)]
    n: Option<Span>,
    /// Scheduler description (JSON) replacing the default for the grid kind.
    #[arg(long)]
    scheduler: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize)]
struct Dims(u64, u64);

impl std::str::FromStr for Dims {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected AxB, got {s:?}");
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Dims(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Args)]
struct DseArgs {
    /// Base chip the grid perturbs.
    #[arg(long)]
    chip: String,
    #[arg(long)]
    model: String,
    #[command(flatten)]
    par: ParArgs,
    /// Phase whose latency decides Pareto optimality.
    #[arg(long, value_enum)]
    phase: PhaseArg,
    #[arg(long, value_delimiter = ',')]
    cores: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    vector_width: Vec<u64>,
    /// Systolic array shapes such as 16x16,32x32.
    #[arg(long, value_delimiter = ',')]
    systolic: Vec<Dims>,
    #[arg(long, value_delimiter = ',')]
    l1_kb: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    l2_mb: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    bandwidth: Vec<f64>,
    /// Prefill reference point as BATCHxPROMPT.
    #[arg(long, default_value = "2x1024")]
    prefill_point: Dims,
    /// Decode reference point as BATCHxCONTEXT.
    #[arg(long, default_value = "64x1024")]
    decode_point: Dims,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `CHIP:ROLE:COUNT`, with ROLE `prefill` or `decode`.
#[derive(Clone, Debug, Serialize)]
struct InventoryArg {
    chip: String,
    role: Role,
    count: u64,
}

impl std::str::FromStr for InventoryArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected CHIP:ROLE:COUNT, got {s:?}");
        let mut parts = s.rsplitn(3, ':');
        let count = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let role = match parts.next() {
            Some("prefill") => Role::Prefill,
            Some("decode") => Role::Decode,
            _ => return Err(bad()),
        };
        let chip = parts.next().filter(|c| !c.is_empty()).ok_or_else(bad)?.to_string();
        Ok(InventoryArg { chip, role, count })
    }
}

#[derive(Debug, Args)]
struct ReallocateArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    par: ParArgs,
    #[arg(long = "inventory", required = true)]
    inventory: Vec<InventoryArg>,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    base_rate: Option<f64>,
    #[arg(long, default_value = "normal")]
    slo: SloArg,
    /// Relative width of the final rate bracket.
    #[arg(long, default_value_t = 0.02)]
    epsilon: f64,
    #[arg(long)]
    scheduler: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid combinations that only show up after parsing.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// The error chain joined by `: `, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Chip(ChipCommand::Show { chip, out }) => chip_show(&chip, out, seed),
        Command::Perf(a) => perf(a, seed),
        Command::Cost(a) => cost(a, seed),
        Command::Trace(TraceCommand::Synth { rate, requests, profile, out }) => {
            let trace = synth_trace(rate, requests, profile, seed)?;
            let m = RunManifest::new(
                "trace synth",
                seed,
                json!({ "rate": rate, "requests": requests, "profile": profile }),
            );
            emit(out.as_deref(), &(m.csv_comment() + &trace.to_csv_string()))
        }
        Command::Simulate(a) => simulate_cmd(a, seed),
        Command::Provision(a) => provision_cmd(a, seed),
        Command::Dse(a) => dse(a, seed),
        Command::Reallocate(a) => reallocate_cmd(a, seed),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    emit(out, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn csv_text(manifest: &RunManifest, header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    Ok(manifest.csv_comment() + &body)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Records `name` as an input if it names a file rather than a preset.
fn note_input(m: &mut RunManifest, name: &str) -> Result<()> {
    m.input(Path::new(name))
}

fn load_chip(name: &str) -> Result<spadsim::chip::ChipSpec> {
    ChipRef::Named(name.to_string()).load(Path::new(""))
}

fn load_model(name: &str) -> Result<spadsim::model::ModelSpec> {
    ModelRef::Named(name.to_string()).load(Path::new(""))
}

fn load_trace(path: &Path, m: &mut RunManifest) -> Result<Trace> {
    m.input(path)?;
    Ok(parse_trace(path)?)
}

fn load_scheduler(path: Option<&Path>, m: &mut RunManifest) -> Result<Option<SchedulerKind>> {
    let Some(p) = path else { return Ok(None) };
    m.input(p)?;
    let s: SchedulerKind = read_json(p)?;
    s.validate()?;
    Ok(Some(s))
}

fn load_slo(slo: &SloArg, m: &mut RunManifest) -> Result<SloSpec> {
    if let Some(p) = slo.path() {
        m.input(p)?;
    }
    slo.load()
}

fn chip_show(name: &str, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let chip = load_chip(name)?;
    let mut m = RunManifest::new("chip show", seed, json!({ "chip": name }));
    note_input(&mut m, name)?;
    let params = CostParams::default();
    let cost = chip_cost(&chip, &params)?;
    let (norm_cost, norm_tdp) = normalized(&chip, &params)?;
    let value = json!({
        "manifest": m,
        "chip": chip,
        "derived": {
            "peak_tensor_pflops_fp16": chip.peak_tensor_flops(2) / 1e15,
            "peak_tensor_pflops_fp8": chip.peak_tensor_flops(1) / 1e15,
            "peak_vector_tflops": chip.peak_vector_flops() / 1e12,
            "memory_bandwidth_gbs": chip.memory_bandwidth_gbs(),
            "memory_capacity_gb": chip.memory_capacity_gb(),
            "total_cache_mb": chip.total_cache_mb(),
        },
        "cost": cost,
        "tdp_w": chip_tdp(&chip, &params),
        "norm_cost": norm_cost,
        "norm_tdp": norm_tdp,
    });
    emit_json(out.as_deref(), &value)
}

const BREAKDOWN_HEADER: [&str; 6] = ["gemm_s", "attention_s", "softmax_norm_act_s", "communication_s", "other_s", "total_s"];

fn breakdown_cells(b: &LatencyBreakdown) -> Vec<String> {
    [b.gemm, b.attention, b.softmax_norm_act, b.communication, b.other, b.total]
        .iter()
        .map(f64::to_string)
        .collect()
}

fn perf(a: PerfArgs, seed: u64) -> Result<()> {
    let chip = load_chip(&a.chip)?;
    let model = load_model(&a.model)?;
    let par = a.par.spec();
    let mut m = RunManifest::new(
        "perf",
        seed,
        json!({
            "chip": a.chip, "model": a.model, "parallelism": par, "phase": format!("{:?}", a.phase).to_lowercase(),
            "batch": a.batch, "seq": a.seq, "sweep": a.sweep.map(|k| format!("{k:?}")), "values": a.values,
        }),
    );
    note_input(&mut m, &a.chip)?;
    note_input(&mut m, &a.model)?;
    let lens = vec![a.seq; a.batch as usize];
    let work = match a.phase {
        PhaseArg::Prefill => PhaseWork::prefill(&lens),
        PhaseArg::Decode => PhaseWork::decode(&lens),
    };
    let ic = InterconnectSpec::default();
    let params = PerfParams::default();
    let phase = format!("{:?}", a.phase).to_lowercase();
    let row = |knob: &str, value: String, b: &LatencyBreakdown| {
        let mut r = vec![chip.name.clone(), model.name.clone(), phase.clone(), a.batch.to_string(), a.seq.to_string()];
        r.push(knob.to_string());
        r.push(value);
        r.extend(breakdown_cells(b));
        r
    };
    let rows = match a.sweep {
        None => vec![row("", String::new(), &phase_latency(&model, &chip, &ic, &par, &work, &params)?)],
        Some(k) => {
            let (knob, name) = match k {
                KnobArg::Bandwidth => (SweepKnob::Bandwidth, "bandwidth"),
                KnobArg::CoreCount => (SweepKnob::CoreCount, "core_count"),
            };
            sensitivity_sweep(&chip, knob, &a.values, &model, &ic, &par, &work, &params)?
                .iter()
                .map(|(v, b)| row(name, v.to_string(), b))
                .collect()
        }
    };
    let mut header = vec!["chip", "model", "phase", "batch", "seq", "knob", "value"];
    header.extend(BREAKDOWN_HEADER);
    emit(a.out.as_deref(), &csv_text(&m, &header, rows)?)
}

fn cost(a: CostArgs, seed: u64) -> Result<()> {
    let mut params = CostParams::default();
    if let Some(p) = a.hbm_usd_per_gb {
        params.hbm_usd_per_gb = p;
    }
    params.validate()?;
    let mut m = RunManifest::new("cost", seed, json!({ "chips": a.chip, "hbm_usd_per_gb": params.hbm_usd_per_gb }));
    let mut rows = Vec::new();
    for name in &a.chip {
        note_input(&mut m, name)?;
        let chip = load_chip(name)?;
        let c = chip_cost(&chip, &params)?;
        let (nc, nt) = normalized(&chip, &params)?;
        rows.push(vec![
            chip.name.clone(),
            format!("{:.0}", chip.die_area_mm2),
            format!("{:.0}", c.die_usd),
            format!("{:.0}", c.mem_usd),
            format!("{:.0}", c.total_usd),
            format!("{:.0}", chip_tdp(&chip, &params)),
            format!("{nc:.2}"),
            format!("{nt:.2}"),
        ]);
    }
    let header = ["chip", "die_area_mm2", "die_usd", "mem_usd", "total_usd", "tdp_w", "norm_cost", "norm_tdp"];
    emit(a.out.as_deref(), &csv_text(&m, &header, rows)?)
}

fn default_scheduler(cluster: &spadsim::sim::ClusterConfig) -> SchedulerKind {
    if cluster.pools.iter().any(|p| p.role == Role::Mixed) {
        SchedulerKind::colocated()
    } else {
        SchedulerKind::disaggregated()
    }
}

fn simulate_cmd(a: SimulateArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new(
        "simulate",
        seed,
        json!({ "slo": a.slo.0, "horizon_s": a.horizon }),
    );
    m.input(&a.cluster)?;
    let cluster = ClusterFile::load(&a.cluster)?;
    let sched = load_scheduler(a.scheduler.as_deref(), &mut m)?.unwrap_or_else(|| default_scheduler(&cluster));
    let trace = load_trace(&a.trace, &mut m)?;
    let slo = load_slo(&a.slo, &mut m)?;
    let params = PerfParams::default();
    let metrics = simulate(&cluster, &sched, &trace, &params, &SimOptions { horizon_s: a.horizon })?;
    let verdict = if trace.is_empty() {
        None
    } else {
        let baselines = reference_baselines(&trace, &cluster.pools[0].deployment, &params)?;
        Some(evaluate_slo(&metrics, &baselines, &slo)?)
    };
    let value = json!({
        "manifest": m,
        "scheduler": sched,
        "requests": metrics.requests.len(),
        "completed": metrics.completed,
        "unfinished": metrics.unfinished,
        "ttft_s": metrics.ttft_s,
        "tbt_s": metrics.tbt_s,
        "throughput_rps": metrics.throughput_rps,
        "kv_bytes_transferred": metrics.kv_bytes_transferred,
        "end_s": metrics.end_s,
        "machines": metrics.machines,
        "slo": { "spec": slo, "verdict": verdict },
    });
    if let Some(p) = &a.per_request {
        write_per_request(p, &m, &metrics)?;
    }
    emit_json(a.out.as_deref(), &value)
}

fn write_per_request(path: &Path, m: &RunManifest, metrics: &SimMetrics) -> Result<()> {
    let header = [
        "id", "arrival_s", "input_tokens", "output_tokens", "prefill_machine", "decode_machine", "prefill_start_s",
        "prefill_end_s", "first_token_s", "completion_s", "ttft_s", "e2e_s", "tokens_generated", "max_tbt_s",
    ];
    let rows = metrics
        .requests
        .iter()
        .map(|r| {
            let max_tbt = r.tbt_samples_s.iter().copied().reduce(f64::max);
            vec![
                r.id.to_string(),
                r.arrival_s.to_string(),
                r.input_tokens.to_string(),
                r.output_tokens.to_string(),
                opt(r.prefill_machine),
                opt(r.decode_machine),
                opt(r.prefill_start_s),
                opt(r.prefill_end_s),
                opt(r.first_token_s),
                opt(r.completion_s),
                opt(r.ttft_s),
                opt(r.e2e_s),
                r.tokens_generated.to_string(),
                opt(max_tbt),
            ]
        })
        .collect();
    emit(Some(path), &csv_text(m, &header, rows)?)
}

fn base_rate(given: Option<f64>, trace: &Trace) -> Result<f64> {
    match given.or_else(|| trace.rate()) {
        Some(r) => Ok(r),
        None => bail!(Usage("--base-rate is required for traces with fewer than two distinct arrivals".into())),
    }
}

fn provision_cmd(a: ProvisionArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new(
        "provision",
        seed,
        json!({
            "model": a.model, "parallelism": a.par.spec(), "base_rate": a.base_rate, "target_rate": a.target_rate,
            "slo": a.slo.0, "prefill_chip": a.prefill_chip, "decode_chip": a.decode_chip,
            "n_prefill": a.n_prefill, "n_decode": a.n_decode, "colocated_chip": a.colocated_chip, "n": a.n,
        }),
    );
    note_input(&mut m, &a.model)?;
    let model = load_model(&a.model)?;
    let machine = |name: &str, m: &mut RunManifest| -> Result<MachineSpec> {
        note_input(m, name)?;
        Ok(MachineSpec { chips_per_machine: a.par.chips_per_machine, ..MachineSpec::new(load_chip(name)?) })
    };
    let grid = match (&a.prefill_chip, &a.decode_chip, a.n_prefill, a.n_decode, &a.colocated_chip, a.n) {
        (Some(p), Some(d), Some(np), Some(nd), None, _) => ProvisionGrid::Disaggregated {
            prefill: machine(p, &mut m)?,
            decode: machine(d, &mut m)?,
            n_prefill: (np.0, np.1),
            n_decode: (nd.0, nd.1),
        },
        (None, None, _, _, Some(c), Some(n)) => ProvisionGrid::Colocated { machine: machine(c, &mut m)?, n: (n.0, n.1) },
        _ => bail!(Usage(
            "give --prefill-chip, --decode-chip, --n-prefill and --n-decode, or --colocated-chip and --n".into()
        )),
    };
    let trace = load_trace(&a.trace, &mut m)?;
    let slo = load_slo(&a.slo, &mut m)?;
    let sched = load_scheduler(a.scheduler.as_deref(), &mut m)?;
    let dep = deployment(model, Some(a.par.spec()), a.par.chips_per_machine, None);
    let spec = ProvisionSpec {
        base_rate_rps: base_rate(a.base_rate, &trace)?,
        target_rate_rps: a.target_rate,
        disaggregated: sched.filter(|s| matches!(s, SchedulerKind::Disaggregated { .. })).unwrap_or_else(SchedulerKind::disaggregated),
        colocated: sched.filter(|s| matches!(s, SchedulerKind::Colocated { .. })).unwrap_or_else(SchedulerKind::colocated),
        grid,
        deployment: dep,
        trace,
        slo,
        perf: PerfParams::default(),
        cost: CostParams::default(),
    };
    let result = provision(&spec)?;
    let tier = |c: &spadsim::explore::GridCell, t: SloTier| opt(c.tiers.iter().find(|(x, _)| *x == t).map(|(_, ok)| *ok));
    let rows = result
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                c.n_prefill.to_string(),
                c.n_decode.to_string(),
                c.feasible.to_string(),
                tier(c, SloTier::Loose),
                tier(c, SloTier::Normal),
                tier(c, SloTier::Tight),
                opt(c.verdict.map(|v| v.margins.worst())),
                c.norm_cost.to_string(),
                c.norm_tdp.to_string(),
                result.frontier.contains(&i).to_string(),
                c.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let best = result.best();
    eprintln!(
        "cheapest feasible: {} prefill, {} decode machines at normalized cost {:.2}",
        best.n_prefill, best.n_decode, best.norm_cost
    );
    let header = [
        "n_prefill", "n_decode", "feasible", "loose", "normal", "tight", "worst_margin", "norm_cost", "norm_tdp",
        "frontier", "error",
    ];
    emit(a.out.as_deref(), &csv_text(&m, &header, rows)?)
}

fn dse(a: DseArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new(
        "dse",
        seed,
        json!({
            "chip": a.chip, "model": a.model, "parallelism": a.par.spec(), "phase": format!("{:?}", a.phase).to_lowercase(),
            "cores": a.cores, "vector_width": a.vector_width, "systolic": a.systolic, "l1_kb": a.l1_kb,
            "l2_mb": a.l2_mb, "bandwidth": a.bandwidth, "prefill_point": a.prefill_point, "decode_point": a.decode_point,
        }),
    );
    note_input(&mut m, &a.chip)?;
    note_input(&mut m, &a.model)?;
    let base = load_chip(&a.chip)?;
    let grid = DseGrid {
        core_count: a.cores,
        vector_width: a.vector_width,
        systolic: a.systolic.iter().map(|d| (d.0, d.1)).collect(),
        l1_kb_per_core: a.l1_kb,
        l2_mb: a.l2_mb,
        bandwidth_gbs: a.bandwidth,
    };
    let setup = DseSetup {
        model: load_model(&a.model)?,
        par: a.par.spec(),
        interconnect: InterconnectSpec::default(),
        prefill_point: (a.prefill_point.0, a.prefill_point.1),
        decode_point: (a.decode_point.0, a.decode_point.1),
        perf: PerfParams::default(),
        cost: CostParams::default(),
    };
    let points = dse_chips(&base, &grid, a.phase.into(), &setup)?;
    let rows = points
        .iter()
        .map(|p| {
            let c = &p.chip;
            vec![
                c.name.clone(),
                c.core_count.to_string(),
                c.vector_width.to_string(),
                c.systolic_h.to_string(),
                c.systolic_w.to_string(),
                c.l1_kb_per_core.to_string(),
                c.l2_mb.to_string(),
                c.memory_bandwidth_gbs().to_string(),
                p.die_area_mm2.to_string(),
                p.prefill_latency_s.to_string(),
                p.decode_latency_s.to_string(),
                p.cost_usd.to_string(),
                p.tdp_w.to_string(),
                p.pareto.to_string(),
            ]
        })
        .collect();
    let header = [
        "name", "core_count", "vector_width", "systolic_h", "systolic_w", "l1_kb_per_core", "l2_mb", "bandwidth_gbs",
        "die_area_mm2", "prefill_latency_s", "decode_latency_s", "cost_usd", "tdp_w", "pareto",
    ];
    emit(a.out.as_deref(), &csv_text(&m, &header, rows)?)
}

fn reallocate_cmd(a: ReallocateArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new(
        "reallocate",
        seed,
        json!({
            "model": a.model, "parallelism": a.par.spec(), "inventory": a.inventory, "base_rate": a.base_rate,
            "slo": a.slo.0, "epsilon": a.epsilon,
        }),
    );
    note_input(&mut m, &a.model)?;
    let model = load_model(&a.model)?;
    let inventory = a
        .inventory
        .iter()
        .map(|i| {
            note_input(&mut m, &i.chip)?;
            let machine = MachineSpec { chips_per_machine: a.par.chips_per_machine, ..MachineSpec::new(load_chip(&i.chip)?) };
            Ok(InventoryItem { machine, count: i.count, role: i.role })
        })
        .collect::<Result<Vec<_>>>()?;
    let trace = load_trace(&a.trace, &mut m)?;
    let slo = load_slo(&a.slo, &mut m)?;
    let scheduler = load_scheduler(a.scheduler.as_deref(), &mut m)?.unwrap_or_else(SchedulerKind::disaggregated);
    let spec = ReallocateSpec {
        inventory,
        deployment: deployment(model, Some(a.par.spec()), a.par.chips_per_machine, None),
        base_rate_rps: base_rate(a.base_rate, &trace)?,
        trace,
        slo,
        scheduler,
        epsilon: a.epsilon,
        perf: PerfParams::default(),
    };
    let result = reallocate(&spec)?;
    let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let rows = result
        .candidates
        .iter()
        .map(|c| {
            vec![
                join(&c.prefill),
                join(&c.decode),
                c.moved.to_string(),
                opt(c.max_rate_rps),
                (*c == result.best).to_string(),
            ]
        })
        .collect();
    eprintln!(
        "best: prefill [{}] decode [{}] at {} req/s",
        join(&result.best.prefill),
        join(&result.best.decode),
        opt(result.best.max_rate_rps)
    );
    let header = ["prefill", "decode", "moved", "max_rate_rps", "best"];
    emit(a.out.as_deref(), &csv_text(&m, &header, rows)?)
}
