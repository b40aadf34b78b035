//! Run ledger, derived metrics and output writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coordinator::RoundDecision;
use crate::dispatcher::{MacroCycleResult, MicroAllocation, Policy};
use crate::domain::{ModelId, ReplicaId, ReplicaState, RequestId, StreamId};
use crate::error::{Error, Result};
use crate::launcher::FLRound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Completed by its deadline.
    Met,
    /// Completed after its deadline.
    Late,
    /// Discarded before dispatch because it could not meet its deadline.
    Dropped,
    /// Still waiting when the horizon was reached.
    Queued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub stream: StreamId,
    pub arrival: f64,
    pub deadline: f64,
    pub output_tokens: u32,
    pub outcome: Outcome,
    pub replica: Option<ReplicaId>,
    pub dispatch_time: Option<f64>,
    pub completion: Option<f64>,
    /// Model loss of the serving replica at dispatch.
    pub loss_at_serve: Option<f64>,
    pub replica_state: Option<ReplicaState>,
    /// Dispatch time for dropped requests is the drop time.
    pub drop_time: Option<f64>,
}

impl RequestRecord {
    /// Per-request quality `1 / loss`.
    pub fn quality(&self) -> Option<f64> {
        self.loss_at_serve.map(|l| 1.0 / l)
    }

    pub fn queue_wait(&self) -> Option<f64> {
        self.dispatch_time.map(|d| d - self.arrival)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilSample {
    pub time: f64,
    pub replica: ReplicaId,
    pub state: ReplicaState,
    pub util: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub time: f64,
    pub replica: ReplicaId,
    pub stream: StreamId,
    pub b_target: u32,
    pub b_actual: u32,
    /// Requests left in the queue the batch was taken from.
    pub queue_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub time: f64,
    pub replica: ReplicaId,
    pub from: ReplicaState,
    pub to: ReplicaState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRecord {
    pub time: f64,
    pub stream: StreamId,
    pub allocations: Vec<MicroAllocation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub index: usize,
    pub model: ModelId,
    pub started_at: f64,
    pub initial_loss: f64,
    pub ended_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorRecord {
    pub time: f64,
    pub process: usize,
    pub decision: RoundDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub config_hash: String,
    pub seed: u64,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub fingerprint: Fingerprint,
    pub duration: f64,
    pub replica_count: usize,
    pub jct_target_loss: f64,
    pub requests: Vec<RequestRecord>,
    pub utilization: Vec<UtilSample>,
    pub dispatch_log: Vec<DispatchRecord>,
    pub macro_log: Vec<MacroCycleResult>,
    pub micro_log: Vec<MicroRecord>,
    pub transitions: Vec<TransitionRecord>,
    pub fl_processes: Vec<ProcessRecord>,
    pub fl_rounds: Vec<FLRound>,
    pub coordinator_log: Vec<CoordinatorRecord>,
    pub warnings: Vec<String>,
}

impl MetricsLedger {
    pub fn new(
        fingerprint: Fingerprint,
        duration: f64,
        replica_count: usize,
        jct_target_loss: f64,
    ) -> Self {
        Self {
            fingerprint,
            duration,
            replica_count,
            jct_target_loss,
            requests: Vec::new(),
            utilization: Vec::new(),
            dispatch_log: Vec::new(),
            macro_log: Vec::new(),
            micro_log: Vec::new(),
            transitions: Vec::new(),
            fl_processes: Vec::new(),
            fl_rounds: Vec::new(),
            coordinator_log: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.requests
            .iter()
            .filter(|r| r.outcome == outcome)
            .count()
    }

    fn met_in(&self, from: f64, to: f64) -> impl Iterator<Item = &RequestRecord> {
        self.requests.iter().filter(move |r| {
            r.outcome == Outcome::Met && r.completion.is_some_and(|c| c >= from && c <= to)
        })
    }

    /// Output tokens per second of requests completed within their SLO in
    /// `[from, to]`.
    pub fn goodput(&self, from: f64, to: f64) -> f64 {
        if !(to > from) {
            return 0.0;
        }
        self.met_in(from, to)
            .map(|r| r.output_tokens as f64)
            .sum::<f64>()
            / (to - from)
    }

    /// Goodput with each request weighted by its serving quality.
    pub fn q_goodput(&self, from: f64, to: f64) -> f64 {
        if !(to > from) {
            return 0.0;
        }
        self.met_in(from, to)
            .map(|r| r.output_tokens as f64 * r.quality().unwrap_or(1.0))
            .sum::<f64>()
            / (to - from)
    }

    /// Fraction of all generated requests that met their deadline.
    pub fn slo_attainment(&self) -> f64 {
        if self.requests.is_empty() {
            return 1.0;
        }
        self.count(Outcome::Met) as f64 / self.requests.len() as f64
    }

    pub fn mean_utilization(&self) -> f64 {
        if self.utilization.is_empty() {
            return 0.0;
        }
        self.utilization.iter().map(|u| u.util).sum::<f64>() / self.utilization.len() as f64
    }

    /// Time from the start of the first fine-tuning process until a round's
    /// mean loss first reaches `target`. Zero when the starting loss already
    /// meets it; `None` when it is never reached.
    pub fn jct(&self, target: f64) -> Option<f64> {
        let first = self.fl_processes.first()?;
        if first.initial_loss <= target {
            return Some(0.0);
        }
        self.fl_rounds
            .iter()
            .filter(|r| !r.participants.is_empty() && r.mean_loss <= target)
            .map(|r| r.end_time)
            .min_by(f64::total_cmp)
            .map(|t| t - first.started_at)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.fl_rounds
            .iter()
            .rev()
            .find(|r| !r.participants.is_empty())
            .map(|r| r.mean_loss)
    }

    pub fn summary(&self) -> Summary {
        let d = self.duration;
        Summary {
            policy: self.fingerprint.policy,
            seed: self.fingerprint.seed,
            config_hash: self.fingerprint.config_hash.clone(),
            duration: d,
            requests: self.requests.len(),
            met: self.count(Outcome::Met),
            late: self.count(Outcome::Late),
            dropped: self.count(Outcome::Dropped),
            queued: self.count(Outcome::Queued),
            goodput: self.goodput(0.0, d),
            q_goodput: self.q_goodput(0.0, d),
            slo_attainment: self.slo_attainment(),
            mean_utilization: self.mean_utilization(),
            fl_processes: self.fl_processes.len(),
            fl_rounds: self.fl_rounds.len(),
            jct_target_loss: self.jct_target_loss,
            jct: self.jct(self.jct_target_loss),
            final_loss: self.final_loss(),
            transitions: self.transitions.len(),
            warnings: self.warnings.len(),
        }
    }

    /// Write every output file into `dir`, creating it if needed.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ledger.json"), serde_json::to_vec(self)?)?;
        let summary = self.summary();
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_vec_pretty(&summary)?,
        )?;
        std::fs::write(dir.join("summary.txt"), summary.to_text())?;

        let mut w = csv_writer(&dir.join("metrics.csv"))?;
        row(&mut w, &["time", "replica", "state", "util"])?;
        for u in &self.utilization {
            row(
                &mut w,
                &[
                    fmt(u.time),
                    u.replica.to_string(),
                    u.state.to_string(),
                    fmt(u.util),
                ],
            )?;
        }
        flush(w)?;

        let mut w = csv_writer(&dir.join("dispatch.csv"))?;
        row(
            &mut w,
            &[
                "time",
                "replica",
                "stream",
                "b_target",
                "b_actual",
                "queue_depth",
            ],
        )?;
        for d in &self.dispatch_log {
            row(
                &mut w,
                &[
                    fmt(d.time),
                    d.replica.to_string(),
                    d.stream.0.to_string(),
                    d.b_target.to_string(),
                    d.b_actual.to_string(),
                    d.queue_depth.to_string(),
                ],
            )?;
        }
        flush(w)?;

        let mut w = csv_writer(&dir.join("requests.csv"))?;
        row(
            &mut w,
            &[
                "id",
                "stream",
                "arrival",
                "deadline",
                "output_tokens",
                "outcome",
                "replica",
                "dispatch_time",
                "completion",
                "loss_at_serve",
            ],
        )?;
        for r in &self.requests {
            let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
            row(
                &mut w,
                &[
                    r.id.to_string(),
                    r.stream.0.to_string(),
                    fmt(r.arrival),
                    fmt(r.deadline),
                    r.output_tokens.to_string(),
                    serde_json::to_value(r.outcome)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string(),
                    r.replica.map(|x| x.to_string()).unwrap_or_default(),
                    opt(r.dispatch_time),
                    opt(r.completion),
                    opt(r.loss_at_serve),
                ],
            )?;
        }
        flush(w)?;

        let mut w = csv_writer(&dir.join("sweeps.csv"))?;
        row(
            &mut w,
            &[
                "process",
                "round",
                "tau_prime",
                "train_batch",
                "infer_batch",
                "goodput",
            ],
        )?;
        for c in &self.coordinator_log {
            for r in crate::coordinator::sweep_csv_rows(c.process, &c.decision) {
                row(&mut w, &r)?;
            }
        }
        flush(w)?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("fl_rounds.jsonl"))?);
        for r in &self.fl_rounds {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))
}

fn row<S: AsRef<[u8]>>(w: &mut csv::Writer<std::fs::File>, rec: &[S]) -> Result<()> {
    w.write_record(rec).map_err(|e| Error::Io(e.into()))
}

fn flush(mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: Policy,
    pub seed: u64,
    pub config_hash: String,
    pub duration: f64,
    pub requests: usize,
    pub met: usize,
    pub late: usize,
    pub dropped: usize,
    pub queued: usize,
    /// Tokens per second within SLO.
    pub goodput: f64,
    pub q_goodput: f64,
    pub slo_attainment: f64,
    pub mean_utilization: f64,
    pub fl_processes: usize,
    pub fl_rounds: usize,
    pub jct_target_loss: f64,
    pub jct: Option<f64>,
    pub final_loss: Option<f64>,
    pub transitions: usize,
    pub warnings: usize,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| {
            v.map(|x| format!("{x:.3}"))
                .unwrap_or_else(|| "not reached".into())
        };
        let _ = writeln!(s, "policy           {}", self.policy);
        let _ = writeln!(s, "seed             {}", self.seed);
        let _ = writeln!(s, "config_hash      {}", self.config_hash);
        let _ = writeln!(s, "duration_s       {:.1}", self.duration);
        let _ = writeln!(
            s,
            "requests         {} (met {}, late {}, dropped {}, queued {})",
            self.requests, self.met, self.late, self.dropped, self.queued
        );
        let _ = writeln!(s, "goodput_tok_s    {:.3}", self.goodput);
        let _ = writeln!(s, "q_goodput        {:.3}", self.q_goodput);
        let _ = writeln!(s, "slo_attainment   {:.4}", self.slo_attainment);
        let _ = writeln!(s, "mean_util        {:.4}", self.mean_utilization);
        let _ = writeln!(s, "fl_processes     {}", self.fl_processes);
        let _ = writeln!(s, "fl_rounds        {}", self.fl_rounds);
        let _ = writeln!(s, "jct_s@{:<10} {}", self.jct_target_loss, opt(self.jct));
        let _ = writeln!(s, "final_loss       {}", opt(self.final_loss));
        let _ = writeln!(s, "transitions      {}", self.transitions);
        let _ = writeln!(s, "warnings         {}", self.warnings);
        s
    }
}

/// Per-run ratios against the first summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub goodput: f64,
    pub q_goodput: f64,
    pub slo_attainment: f64,
    pub mean_utilization: f64,
    pub jct: Option<f64>,
    pub goodput_ratio: f64,
    pub q_goodput_ratio: f64,
    pub utilization_ratio: f64,
    /// Baseline JCT over this run's JCT (above 1 means faster).
    pub jct_speedup: Option<f64>,
}

/// Compare runs against the first. Refuses runs that differ in scenario,
/// seed or horizon.
pub fn compare(summaries: &[Summary]) -> Result<Vec<ComparisonRow>> {
    let Some(base) = summaries.first() else {
        return Err(Error::Config("compare needs at least one run".into()));
    };
    for s in &summaries[1..] {
        if s.config_hash != base.config_hash {
            return Err(Error::Mismatch {
                field: "config_hash".into(),
            });
        }
        if s.seed != base.seed {
            return Err(Error::Mismatch {
                field: "seed".into(),
            });
        }
        if s.duration != base.duration {
            return Err(Error::Mismatch {
                field: "duration".into(),
            });
        }
    }
    let ratio = |a: f64, b: f64| {
        if b > 0.0 {
            a / b
        } else if a > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    };
    Ok(summaries
        .iter()
        .map(|s| ComparisonRow {
            policy: s.policy,
            goodput: s.goodput,
            q_goodput: s.q_goodput,
            slo_attainment: s.slo_attainment,
            mean_utilization: s.mean_utilization,
            jct: s.jct,
            goodput_ratio: ratio(s.goodput, base.goodput),
            q_goodput_ratio: ratio(s.q_goodput, base.q_goodput),
            utilization_ratio: ratio(s.mean_utilization, base.mean_utilization),
            jct_speedup: match (base.jct, s.jct) {
                (Some(b), Some(x)) if x > 0.0 => Some(b / x),
                _ => None,
            },
        })
        .collect())
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>12} {:>8} {:>12} {:>8} {:>8} {:>8} {:>10} {:>8}",
        "policy", "goodput", "ratio", "q_goodput", "ratio", "util", "ratio", "jct_s", "speedup"
    );
    for r in rows {
        let jct = r
            .jct
            .map(|x| format!("{x:.1}"))
            .unwrap_or_else(|| "-".into());
        let sp = r
            .jct_speedup
            .map(|x| format!("{x:.2}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<12} {:>12.2} {:>8.3} {:>12.2} {:>8.3} {:>8.3} {:>8.3} {:>10} {:>8}",
            r.policy.name(),
            r.goodput,
            r.goodput_ratio,
            r.q_goodput,
            r.q_goodput_ratio,
            r.mean_utilization,
            r.utilization_ratio,
            jct,
            sp
        );
    }
    s
}

/// Per-stream tallies, handy for reports.
pub fn outcomes_by_stream(ledger: &MetricsLedger) -> BTreeMap<StreamId, [usize; 4]> {
    let mut m: BTreeMap<StreamId, [usize; 4]> = BTreeMap::new();
    for r in &ledger.requests {
        let e = m.entry(r.stream).or_default();
        e[r.outcome as usize] += 1;
    }
    m
}
