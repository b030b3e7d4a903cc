//! Request traces and SLO tiers.
//!
//! Trace CSV has a header and the columns `arrival_s,input_tokens,output_tokens`.
//! Azure LLM inference trace files (`TIMESTAMP,ContextTokens,GeneratedTokens`)
//! are also accepted; their timestamps become seconds since the first request.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TOKENS: u64 = 16_384;
const LENGTH_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_s: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requests: Vec<Request>,
}

impl Trace {
    /// Stably sorts by arrival and renumbers ids in arrival order.
    pub fn new(mut requests: Vec<Request>) -> Self {
        requests.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
        for (i, r) in requests.iter_mut().enumerate() {
            r.id = i as u64;
        }
        Trace { requests }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn span_s(&self) -> f64 {
        match (self.requests.first(), self.requests.last()) {
            (Some(a), Some(b)) => b.arrival_s - a.arrival_s,
            _ => 0.0,
        }
    }

    /// Observed arrival rate, `(n - 1) / span`. `None` for fewer than two
    /// requests or a zero span.
    pub fn rate(&self) -> Option<f64> {
        let span = self.span_s();
        (self.len() >= 2 && span > 0.0).then(|| (self.len() - 1) as f64 / span)
    }

    /// Multiplies every arrival time by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Trace {
        Trace {
            requests: self
                .requests
                .iter()
                .map(|r| Request { arrival_s: r.arrival_s * factor, ..*r })
                .collect(),
        }
    }

    /// Compresses or stretches arrivals so the trace runs at `target_rps`,
    /// taking `base_rps` as its current rate.
    pub fn at_rate(&self, base_rps: f64, target_rps: f64) -> Result<Trace> {
        if !(base_rps > 0.0 && target_rps > 0.0 && base_rps.is_finite() && target_rps.is_finite()) {
            return Err(Error::Domain(format!("rates must be positive: {base_rps} -> {target_rps}")));
        }
        Ok(self.time_scaled(base_rps / target_rps))
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = f64::NEG_INFINITY;
        for (i, r) in self.requests.iter().enumerate() {
            let line = i as u64 + 2;
            if r.input_tokens == 0 || r.output_tokens == 0 {
                return Err(Error::InvalidRow { line, msg: "token counts must be at least 1".into() });
            }
            if !(r.arrival_s.is_finite() && r.arrival_s >= 0.0) {
                return Err(Error::InvalidRow { line, msg: format!("bad arrival {}", r.arrival_s) });
            }
            if r.arrival_s < last {
                return Err(Error::InvalidRow { line, msg: "arrivals out of order".into() });
            }
            last = r.arrival_s;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Domain(format!("writing trace: {e}"));
        out.write_record(["arrival_s", "input_tokens", "output_tokens"]).map_err(io)?;
        for r in &self.requests {
            out.write_record([
                r.arrival_s.to_string(),
                r.input_tokens.to_string(),
                r.output_tokens.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::Domain(format!("writing trace: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn parse_trace(path: &Path) -> Result<Trace> {
    let f = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    read_trace(f)
}

enum Columns {
    Native { arrival: usize, input: usize, output: usize },
    Azure { timestamp: usize, input: usize, output: usize },
}

pub fn read_trace<R: Read>(r: R) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let cols = match (col("arrival_s"), col("input_tokens"), col("output_tokens")) {
        (Some(arrival), Some(input), Some(output)) => Columns::Native { arrival, input, output },
        _ => match (col("TIMESTAMP"), col("ContextTokens"), col("GeneratedTokens")) {
            (Some(timestamp), Some(input), Some(output)) => Columns::Azure { timestamp, input, output },
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "header must name arrival_s,input_tokens,output_tokens".into(),
                })
            }
        },
    };

    let mut requests = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let fallback_line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_error(e, fallback_line))?;
        let line = rec.position().map_or(fallback_line, |p| p.line());
        let field = |idx: usize| {
            rec.get(idx).ok_or_else(|| Error::Parse { line, msg: format!("missing column {}", idx + 1) })
        };
        let tokens = |idx: usize| -> Result<u64> {
            let s = field(idx)?;
            let v: i64 = s.parse().map_err(|_| Error::Parse { line, msg: format!("bad token count {s:?}") })?;
            if v < 1 {
                return Err(Error::InvalidRow { line, msg: format!("token count {v} must be at least 1") });
            }
            Ok(v as u64)
        };
        let (arrival, input, output) = match cols {
            Columns::Native { arrival, input, output } => {
                let s = field(arrival)?;
                let t: f64 = s.parse().map_err(|_| Error::Parse { line, msg: format!("bad arrival {s:?}") })?;
                if !(t.is_finite() && t >= 0.0) {
                    return Err(Error::InvalidRow { line, msg: format!("arrival {t} must be finite and non-negative") });
                }
                (t, tokens(input)?, tokens(output)?)
            }
            Columns::Azure { timestamp, input, output } => {
                let s = field(timestamp)?;
                let t = parse_timestamp(s).ok_or_else(|| Error::Parse { line, msg: format!("bad timestamp {s:?}") })?;
                (t, tokens(input)?, tokens(output)?)
            }
        };
        requests.push(Request { id: 0, arrival_s: arrival, input_tokens: input, output_tokens: output });
    }

    if matches!(cols, Columns::Azure { .. }) {
        let t0 = requests.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
        for r in &mut requests {
            r.arrival_s -= t0;
        }
    }
    Ok(Trace::new(requests))
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse { line, msg: e.to_string() }
}

/// Epoch seconds, RFC 3339, or `YYYY-MM-DD HH:MM:SS[.fff]` (taken as UTC).
fn parse_timestamp(s: &str) -> Option<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(epoch_seconds(dt.naive_utc()));
    }
    ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(epoch_seconds)
}

fn epoch_seconds(dt: NaiveDateTime) -> f64 {
    let utc = dt.and_utc();
    utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Coding,
    Conversation,
}

impl Profile {
    /// Median (input, output) token lengths.
    pub fn medians(self) -> (f64, f64) {
        match self {
            Profile::Coding => (1500.0, 13.0),
            Profile::Conversation => (1020.0, 129.0),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coding" => Ok(Profile::Coding),
            "conversation" => Ok(Profile::Conversation),
            _ => Err(Error::Domain(format!("unknown profile {s:?} (coding, conversation)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Coding => "coding",
            Profile::Conversation => "conversation",
        })
    }
}

/// Poisson arrivals starting at t = 0 with lognormal token lengths.
pub fn synth_trace(rate_rps: f64, n_requests: usize, profile: Profile, seed: u64) -> Result<Trace> {
    if !(rate_rps > 0.0 && rate_rps.is_finite()) {
        return Err(Error::Domain(format!("rate must be positive, got {rate_rps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate_rps).map_err(|e| Error::Domain(e.to_string()))?;
    let (mi, mo) = profile.medians();
    let input = LogNormal::new(mi.ln(), LENGTH_SIGMA).map_err(|e| Error::Domain(e.to_string()))?;
    let output = LogNormal::new(mo.ln(), LENGTH_SIGMA).map_err(|e| Error::Domain(e.to_string()))?;
    let clamp = |x: f64| (x.round() as u64).clamp(1, MAX_TOKENS);

    let mut t = 0.0;
    let mut requests = Vec::with_capacity(n_requests);
    for id in 0..n_requests as u64 {
        if id > 0 {
            t += gap.sample(&mut rng);
        }
        requests.push(Request {
            id,
            arrival_s: t,
            input_tokens: clamp(input.sample(&mut rng)),
            output_tokens: clamp(output.sample(&mut rng)),
        });
    }
    Ok(Trace { requests })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SloTier {
    Loose,
    Normal,
    Tight,
}

impl SloTier {
    pub const ALL: [SloTier; 3] = [SloTier::Loose, SloTier::Normal, SloTier::Tight];
}

impl FromStr for SloTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loose" => Ok(SloTier::Loose),
            "normal" => Ok(SloTier::Normal),
            "tight" => Ok(SloTier::Tight),
            _ => Err(Error::Domain(format!("unknown SLO tier {s:?} (loose, normal, tight)"))),
        }
    }
}

impl fmt::Display for SloTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SloTier::Loose => "loose",
            SloTier::Normal => "normal",
            SloTier::Tight => "tight",
        })
    }
}

/// Slowdown limits relative to unbatched reference latency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    pub tier: Option<SloTier>,
    pub p90_tbt: f64,
    pub p90_ttft: f64,
    pub p99_tbt: f64,
    pub p99_ttft: f64,
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p90_tbt, self.p90_ttft, self.p99_tbt, self.p99_ttft];
        if all.iter().any(|&m| !(m > 1.0)) {
            return Err(Error::invalid("SLO multipliers must exceed 1"));
        }
        if self.p99_tbt < self.p90_tbt || self.p99_ttft < self.p90_ttft {
            return Err(Error::invalid("P99 SLO multipliers must be at least the P90 ones"));
        }
        Ok(())
    }
}

pub fn slo_thresholds(tier: SloTier) -> SloSpec {
    let (p90_tbt, p90_ttft, p99_tbt, p99_ttft) = match tier {
        SloTier::Loose => (2.5, 4.0, 6.0, 8.0),
        SloTier::Normal => (2.0, 3.0, 5.0, 6.0),
        SloTier::Tight => (1.5, 2.0, 3.0, 4.0),
    };
    SloSpec { tier: Some(tier), p90_tbt, p90_ttft, p99_tbt, p99_ttft }
}
