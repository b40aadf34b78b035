//! Request streams: synthetic Poisson and two-state bursty generators, CSV
//! trace replay with scale multipliers, and output-length sampling.
//!
//! Trace files are CSV with the header `timestamp_s,stream_id,output_tokens`;
//! timestamps are seconds relative to the start of the trace.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Request, StreamId};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

pub const TRACE_HEADER: [&str; 3] = ["timestamp_s", "stream_id", "output_tokens"];
pub const MAX_OUTPUT_TOKENS: u32 = 4096;
/// Seed of the jitter stream used when a trace is replicated.
const TRACE_JITTER_SEED: u64 = 0x5EED_7ACE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub stream_id: StreamId,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Poisson,
    Bursty,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstParams {
    /// Burst-phase rate as a multiple of the quiet-phase rate.
    pub multiplier: f64,
    pub mean_quiet_s: f64,
    pub mean_burst_s: f64,
}

impl Default for BurstParams {
    fn default() -> Self {
        Self {
            multiplier: 4.4,
            mean_quiet_s: 300.0,
            mean_burst_s: 60.0,
        }
    }
}

/// Lognormal output-length distribution, parameterized in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenDist {
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for TokenDist {
    fn default() -> Self {
        // median ~100 tokens
        Self {
            log_mean: 100f64.ln(),
            log_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub stream: StreamId,
    /// Requests per second before scaling (quiet-phase rate for bursty).
    pub base_rate: f64,
    pub burst: BurstParams,
    pub scale: f64,
    pub duration: f64,
    pub tokens: TokenDist,
    /// CSV trace for `kind = "trace"`.
    pub trace_path: Option<PathBuf>,
    /// Upper bound of the uniform jitter applied to replicated trace events.
    pub jitter_s: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Poisson,
            stream: StreamId(0),
            base_rate: 10.0,
            burst: BurstParams::default(),
            scale: 1.0,
            duration: 60.0,
            tokens: TokenDist::default(),
            trace_path: None,
            jitter_s: 1.0,
        }
    }
}

impl WorkloadSpec {
    fn check_rate_and_duration(&self) -> Result<()> {
        if !(self.base_rate > 0.0) || !self.base_rate.is_finite() {
            return Err(Error::Config(format!(
                "workload base_rate must be positive, got {}",
                self.base_rate
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "workload scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(Error::Config(format!(
                "workload duration must be non-negative, got {}",
                self.duration
            )));
        }
        if !self.tokens.log_mean.is_finite()
            || !(self.tokens.log_std >= 0.0)
            || !self.tokens.log_std.is_finite()
        {
            return Err(Error::Config(
                "token distribution parameters must be finite, log_std >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Produce the events described by this spec.
    pub fn generate(&self, seed: u64) -> Result<Vec<TraceEvent>> {
        match self.kind {
            WorkloadKind::Poisson => generate_poisson(self, seed),
            WorkloadKind::Bursty => generate_bursty(self, seed),
            WorkloadKind::Trace => {
                let path = self
                    .trace_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("trace workload requires trace_path".into()))?;
                let load = load_trace_with_jitter(path, self.scale, self.jitter_s)?;
                Ok(load
                    .events
                    .into_iter()
                    .take_while(|e| e.timestamp < self.duration)
                    .collect())
            }
        }
    }
}

/// Draw one output length: lognormal, rounded up, clamped to `[1, 4096]`.
pub fn sample_output_length(dist: &TokenDist, rng: &mut SimRng) -> u32 {
    let x = match LogNormal::new(dist.log_mean, dist.log_std) {
        Ok(d) => d.sample(rng),
        Err(_) => dist.log_mean.exp(),
    };
    // `exp(ln 100)` is 100.00000000000001; don't let that round up to 101.
    let up = (x - 1e-9).ceil();
    if up.is_nan() || up < 1.0 {
        1
    } else if up > MAX_OUTPUT_TOKENS as f64 {
        MAX_OUTPUT_TOKENS
    } else {
        up as u32
    }
}

#[allow(clippy::too_many_arguments)]
fn poisson_segment(
    start: f64,
    end: f64,
    rate: f64,
    stream: StreamId,
    dist: &TokenDist,
    arrivals: &mut SimRng,
    tokens: &mut SimRng,
    out: &mut Vec<TraceEvent>,
) {
    let gap = Exp::new(rate).expect("rate checked positive");
    let mut t = start;
    loop {
        t += gap.sample(arrivals);
        if t >= end {
            break;
        }
        out.push(TraceEvent {
            timestamp: t,
            stream_id: stream,
            output_tokens: sample_output_length(dist, tokens),
        });
    }
}

/// Homogeneous Poisson arrivals at `base_rate * scale` over `[0, duration)`.
pub fn generate_poisson(spec: &WorkloadSpec, seed: u64) -> Result<Vec<TraceEvent>> {
    spec.check_rate_and_duration()?;
    let mut arrivals = rng::stream(seed, rng::label::ARRIVALS);
    let mut tokens = rng::stream(seed, rng::label::TOKENS);
    let mut out = Vec::new();
    if spec.duration > 0.0 {
        let rate = spec.base_rate * spec.scale;
        poisson_segment(
            0.0,
            spec.duration,
            rate,
            spec.stream,
            &spec.tokens,
            &mut arrivals,
            &mut tokens,
            &mut out,
        );
    }
    Ok(out)
}

/// One quiet or burst interval of a bursty workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start: f64,
    pub end: f64,
    pub burst: bool,
}

/// Two-state modulated Poisson process. Starts quiet; phase lengths are
/// exponential with the configured means.
pub fn generate_bursty(spec: &WorkloadSpec, seed: u64) -> Result<Vec<TraceEvent>> {
    generate_bursty_with_phases(spec, seed).map(|(events, _)| events)
}

pub fn generate_bursty_with_phases(
    spec: &WorkloadSpec,
    seed: u64,
) -> Result<(Vec<TraceEvent>, Vec<Phase>)> {
    spec.check_rate_and_duration()?;
    let b = &spec.burst;
    if !(b.multiplier >= 1.0) {
        return Err(Error::Config(format!(
            "burst multiplier must be >= 1, got {}",
            b.multiplier
        )));
    }
    if !(b.mean_quiet_s > 0.0) || !(b.mean_burst_s > 0.0) {
        return Err(Error::Config(
            "mean burst and quiet durations must be positive".into(),
        ));
    }
    let mut arrivals = rng::stream(seed, rng::label::ARRIVALS);
    let mut tokens = rng::stream(seed, rng::label::TOKENS);
    let mut phases_rng = rng::stream(seed, rng::label::PHASES);
    let quiet_len = Exp::new(1.0 / b.mean_quiet_s).expect("positive");
    let burst_len = Exp::new(1.0 / b.mean_burst_s).expect("positive");
    let quiet_rate = spec.base_rate * spec.scale;

    let mut events = Vec::new();
    let mut phases = Vec::new();
    let mut t = 0.0;
    let mut burst = false;
    while t < spec.duration {
        let len = if burst {
            burst_len.sample(&mut phases_rng)
        } else {
            quiet_len.sample(&mut phases_rng)
        };
        let end = (t + len).min(spec.duration);
        let rate = if burst {
            quiet_rate * b.multiplier
        } else {
            quiet_rate
        };
        poisson_segment(
            t,
            end,
            rate,
            spec.stream,
            &spec.tokens,
            &mut arrivals,
            &mut tokens,
            &mut events,
        );
        phases.push(Phase {
            start: t,
            end,
            burst,
        });
        t = end;
        burst = !burst;
    }
    Ok((events, phases))
}

/// Result of reading a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLoad {
    pub events: Vec<TraceEvent>,
    /// The file's rows were not in timestamp order and have been sorted.
    pub unsorted_input: bool,
}

pub fn load_trace(path: impl AsRef<Path>, scale: f64) -> Result<TraceLoad> {
    load_trace_with_jitter(path, scale, 1.0)
}

pub fn load_trace_with_jitter(
    path: impl AsRef<Path>,
    scale: f64,
    jitter_s: f64,
) -> Result<TraceLoad> {
    let mut text = String::new();
    std::fs::File::open(path.as_ref())?.read_to_string(&mut text)?;
    let (events, unsorted_input) = parse_trace(&text)?;
    let events = scale_events(&events, scale, jitter_s)?;
    Ok(TraceLoad {
        events,
        unsorted_input,
    })
}

/// Parse trace CSV text. Returns events in timestamp order plus a flag telling
/// whether sorting was needed.
pub fn parse_trace(text: &str) -> Result<(Vec<TraceEvent>, bool)> {
    if text.trim().is_empty() {
        return Ok((Vec::new(), false));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::TraceParse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::TraceParse {
            line: 1,
            message: format!("expected header `{}`", TRACE_HEADER.join(",")),
        });
    }
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::TraceParse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::TraceParse { line, message };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let timestamp: f64 = record[0]
            .parse()
            .map_err(|_| bad(format!("bad timestamp `{}`", &record[0])))?;
        if !(timestamp >= 0.0) || !timestamp.is_finite() {
            return Err(bad(format!(
                "timestamp must be finite and non-negative, got {timestamp}"
            )));
        }
        let stream: u32 = record[1]
            .parse()
            .map_err(|_| bad(format!("bad stream_id `{}`", &record[1])))?;
        let tokens: u32 = record[2]
            .parse()
            .map_err(|_| bad(format!("bad output_tokens `{}`", &record[2])))?;
        if tokens == 0 {
            return Err(bad("output_tokens must be >= 1".into()));
        }
        events.push(TraceEvent {
            timestamp,
            stream_id: StreamId(stream),
            output_tokens: tokens,
        });
    }
    let unsorted = events.windows(2).any(|w| w[1].timestamp < w[0].timestamp);
    if unsorted {
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok((events, unsorted))
}

/// Replicate (integer part) and thin (fractional part) a sorted event list.
///
/// For `scale = n + f`, every event is kept once, `n - 1` jittered copies are
/// added, and one more jittered copy is added with probability `f`. For
/// `scale < 1` the original itself is kept with probability `scale`.
pub fn scale_events(events: &[TraceEvent], scale: f64, jitter_s: f64) -> Result<Vec<TraceEvent>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!(
            "trace scale must be positive, got {scale}"
        )));
    }
    if !(jitter_s >= 0.0) {
        return Err(Error::Config(format!(
            "jitter must be non-negative, got {jitter_s}"
        )));
    }
    if scale == 1.0 {
        return Ok(events.to_vec());
    }
    let mut rng = rng::stream(TRACE_JITTER_SEED, rng::label::TRACE_JITTER);
    let whole = scale.floor() as usize;
    let frac = scale - scale.floor();
    let mut out = Vec::with_capacity((events.len() as f64 * scale).ceil() as usize + 1);
    let jittered = |e: &TraceEvent, rng: &mut SimRng| TraceEvent {
        timestamp: e.timestamp
            + if jitter_s > 0.0 {
                rng.random::<f64>() * jitter_s
            } else {
                0.0
            },
        ..*e
    };
    for e in events {
        if whole >= 1 {
            out.push(*e);
            for _ in 1..whole {
                out.push(jittered(e, &mut rng));
            }
            if frac > 0.0 && rng.random::<f64>() < frac {
                out.push(jittered(e, &mut rng));
            }
        } else if rng.random::<f64>() < frac {
            out.push(*e);
        }
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

/// Merge several event lists into one timestamp-ordered list. Ties keep
/// source order, so the merge is deterministic.
pub fn merge_traces(sources: Vec<Vec<TraceEvent>>) -> Vec<TraceEvent> {
    let mut tagged: Vec<(usize, TraceEvent)> = sources
        .into_iter()
        .enumerate()
        .flat_map(|(i, v)| v.into_iter().map(move |e| (i, e)))
        .collect();
    tagged.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp).then(a.0.cmp(&b.0)));
    tagged.into_iter().map(|(_, e)| e).collect()
}

/// Turn ordered events into requests, numbering them in order.
pub fn to_requests(
    events: &[TraceEvent],
    slo_of: impl Fn(StreamId) -> Option<f64>,
) -> Result<Vec<Request>> {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let slo = slo_of(e.stream_id).ok_or_else(|| {
                Error::Config(format!("trace references unknown stream {}", e.stream_id.0))
            })?;
            Request::new(i as u64, e.timestamp, slo, e.output_tokens, e.stream_id)
        })
        .collect()
}

pub fn write_trace(path: impl AsRef<Path>, events: &[TraceEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(TRACE_HEADER)
        .map_err(|e| Error::Io(e.into()))?;
    for e in events {
        w.write_record([
            e.timestamp.to_string(),
            e.stream_id.0.to_string(),
            e.output_tokens.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
