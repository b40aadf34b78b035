//! Request dispatch: paced per-replica subflows over a shared stream queue,
//! the macro cycle (latency refit, batch bound, overload mitigation), the
//! micro cycle (quality-aware reallocation), and baseline policies.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{floor_tol, ReplicaId, Request, StreamId};
use crate::error::{Error, Result};
use crate::fit::{fit_univariate, LatencyModel};
use crate::perf::ReplicaPerfProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Subflow,
    RoundRobin,
    Greedy,
    IdealRef,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Subflow,
        Policy::RoundRobin,
        Policy::Greedy,
        Policy::IdealRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Subflow => "subflow",
            Policy::RoundRobin => "round_robin",
            Policy::Greedy => "greedy",
            Policy::IdealRef => "ideal_ref",
        }
    }

    /// Policies that pull from one shared queue per stream.
    pub fn uses_subflows(self) -> bool {
        matches!(self, Policy::Subflow | Policy::IdealRef)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy `{s}` (expected subflow, round_robin, greedy or ideal_ref)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Clamp to `[max(0.5 b, 1), min(1.5 b, b_max)]`.
    #[default]
    Corrected,
    /// Clamp to `[min(0.5 b, 2), max(1.5 b, b_max)]`, which can exceed `b_max`.
    Literal,
}

/// Which quality figure weights a subflow's micro-cycle priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityQuality {
    /// Response quality `1 / loss` of the replica's current model.
    #[default]
    Response,
    /// The launcher's multiplicative quality score.
    LauncherScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatcherConfig {
    /// Macro-cycle period in seconds.
    pub t_fit: f64,
    /// Micro-cycle period in seconds.
    pub t_adjust: f64,
    pub smoothing: Smoothing,
    /// Mean queue latency assumed, as a fraction of the SLO, when refitting
    /// after an overload.
    pub overload_reset_fraction: f64,
    /// Drop queue heads that would miss their deadline in the next batch.
    pub slo_aware_fetch: bool,
    pub priority_quality: PriorityQuality,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self {
            t_fit: 30.0,
            t_adjust: 5.0,
            smoothing: Smoothing::Corrected,
            overload_reset_fraction: 0.1,
            slo_aware_fetch: true,
            priority_quality: PriorityQuality::Response,
        }
    }
}

impl DispatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_fit > 0.0)
            || !(self.t_adjust > 0.0)
            || !(0.0..1.0).contains(&self.overload_reset_fraction)
        {
            return Err(Error::Config(
                "dispatcher: t_fit > 0, t_adjust > 0, 0 <= overload_reset_fraction < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Predicted execution time `slope * k + intercept` for a batch of `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pace {
    pub slope: f64,
    pub intercept: f64,
}

impl Pace {
    pub fn predict(&self, k: usize) -> f64 {
        self.slope * k as f64 + self.intercept
    }

    /// Pace of an exclusive-inference model.
    pub fn from_univariate(m: &LatencyModel) -> Self {
        Self {
            slope: m.alpha,
            intercept: m.gamma,
        }
    }

    /// Pace of a bivariate inference model with `train_batch` co-running.
    pub fn from_bivariate(m: &LatencyModel, train_batch: u32) -> Self {
        Self {
            slope: m.alpha,
            intercept: m.beta * train_batch as f64 + m.gamma,
        }
    }
}

/// Pending requests of one stream, in arrival order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamQueue {
    pub stream: Option<StreamId>,
    pending: VecDeque<Request>,
}

impl StreamQueue {
    pub fn new(stream: StreamId) -> Self {
        Self {
            stream: Some(stream),
            pending: VecDeque::new(),
        }
    }

    pub fn push(&mut self, r: Request) {
        self.pending.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn front(&self) -> Option<&Request> {
        self.pending.front()
    }

    pub fn pop_front(&mut self) -> Option<Request> {
        self.pending.pop_front()
    }

    pub fn take(&mut self, n: usize) -> Vec<Request> {
        let n = n.min(self.pending.len());
        self.pending.drain(..n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Request> {
        self.pending.iter()
    }

    pub fn drain_all(&mut self) -> Vec<Request> {
        self.pending.drain(..).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub b_target: u32,
    pub b_actual: u32,
}

/// Paced dispatch channel feeding one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubflowState {
    pub replica_id: ReplicaId,
    pub target_batch: u32,
    pub interval: f64,
    pub b_max: u32,
    pub pace: Pace,
    pub history: VecDeque<TickRecord>,
    pub unsaturation: f64,
    pub priority: f64,
    pub active: bool,
}

impl SubflowState {
    pub fn new(replica_id: ReplicaId, b_max: u32, pace: Pace) -> Self {
        Self {
            replica_id,
            target_batch: b_max,
            interval: pace.intercept,
            b_max,
            pace,
            history: VecDeque::new(),
            unsaturation: 0.0,
            priority: 1.0,
            active: true,
        }
    }

    /// Set a new bound and pull the target under it.
    pub fn set_b_max(&mut self, b_max: u32) {
        self.b_max = b_max;
        self.target_batch = self.target_batch.min(b_max);
        if self.target_batch == 0 && b_max > 0 {
            self.target_batch = b_max.min(1);
        }
    }

    fn prune(&mut self, before: f64) {
        while self.history.front().is_some_and(|h| h.time < before) {
            self.history.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    pub dispatched: Vec<Request>,
    /// Heads dropped because they would miss their deadline.
    pub discarded: Vec<Request>,
    pub b_target: u32,
    pub b_actual: u32,
    pub next_interval: f64,
}

/// One sampling step of a subflow: take up to `target_batch` requests FIFO
/// and set the next interval from the predicted execution time.
pub fn subflow_tick(
    flow: &mut SubflowState,
    queue: &mut StreamQueue,
    now: f64,
    slo_aware: bool,
) -> TickOutcome {
    let b_target = flow.target_batch;
    if !flow.active {
        return TickOutcome {
            dispatched: Vec::new(),
            discarded: Vec::new(),
            b_target,
            b_actual: 0,
            next_interval: flow.interval,
        };
    }
    let mut discarded = Vec::new();
    if slo_aware {
        while let Some(head) = queue.front() {
            let k = (b_target as usize).min(queue.len());
            if k >= 1 && head.deadline < now + flow.pace.predict(k) {
                discarded.push(queue.pop_front().expect("non-empty"));
            } else {
                break;
            }
        }
    }
    let dispatched = queue.take(b_target as usize);
    let b_actual = dispatched.len() as u32;
    let next_interval = flow.pace.predict(dispatched.len()).max(1e-6);
    flow.interval = next_interval;
    flow.history.push_back(TickRecord {
        time: now,
        b_target,
        b_actual,
    });
    if flow.history.len() > 100_000 {
        flow.history.pop_front();
    }
    TickOutcome {
        dispatched,
        discarded,
        b_target,
        b_actual,
        next_interval,
    }
}

/// `floor((tau' - intercept) / slope)`, clamped at 0.
pub fn b_max_for(model: &LatencyModel, tau_prime: f64) -> u32 {
    if !(model.alpha > 0.0) {
        return 0;
    }
    let b = floor_tol((tau_prime - model.gamma) / model.alpha);
    if b <= 0.0 {
        0
    } else {
        b.min(u32::MAX as f64) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroCycleResult {
    pub time: f64,
    pub stream: StreamId,
    /// Exclusive-inference model: `alpha` per request, `gamma` intercept.
    pub model: LatencyModel,
    /// The fit was unusable and the previous model was kept.
    pub retained_previous: bool,
    pub tau_prime: f64,
    pub mean_queue_latency: f64,
    pub b_max: u32,
    pub overload: bool,
    pub promoted: Option<ReplicaId>,
    /// Overloaded with nothing to promote.
    pub saturated: bool,
}

/// Refit the exclusive-inference model on `(b, latency)` samples from
/// Serving replicas and derive the batch bound for the remaining budget.
pub fn macro_cycle(
    time: f64,
    stream: StreamId,
    samples: &[(f64, f64)],
    queue_waits: &[f64],
    tau: f64,
    previous: &LatencyModel,
) -> MacroCycleResult {
    let (model, retained_previous) = match fit_univariate(samples) {
        Ok(m) if m.alpha > 0.0 => (m, false),
        _ => (*previous, true),
    };
    let mean_queue_latency = if queue_waits.is_empty() {
        0.0
    } else {
        queue_waits.iter().sum::<f64>() / queue_waits.len() as f64
    };
    let tau_prime = tau - mean_queue_latency;
    MacroCycleResult {
        time,
        stream,
        model,
        retained_previous,
        tau_prime,
        mean_queue_latency,
        b_max: b_max_for(&model, tau_prime),
        overload: mean_queue_latency >= tau - model.gamma,
        promoted: None,
        saturated: false,
    }
}

/// On overload, pick the lowest-id Idle replica to promote and refit the
/// bound with the mean queue latency reset to `reset_fraction * tau`.
pub fn overload_mitigation(
    result: &mut MacroCycleResult,
    idle_pool: &[ReplicaId],
    tau: f64,
    reset_fraction: f64,
) -> Option<ReplicaId> {
    if !result.overload {
        return None;
    }
    result.promoted = idle_pool.iter().min().copied();
    result.saturated = result.promoted.is_none();
    result.mean_queue_latency = reset_fraction * tau;
    result.tau_prime = tau - result.mean_queue_latency;
    result.b_max = b_max_for(&result.model, result.tau_prime);
    result.promoted
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroAllocation {
    pub replica_id: ReplicaId,
    pub unsaturation: f64,
    pub priority: f64,
    /// Share of the pooled bound before smoothing.
    pub raw: f64,
    pub target: u32,
}

/// Mean shortfall `(b - b_actual) / b` over ticks since `since`, skipping
/// ticks with a zero target.
pub fn unsaturation(flow: &SubflowState, since: f64) -> f64 {
    let (sum, n) = flow
        .history
        .iter()
        .filter(|h| h.time >= since && h.b_target > 0)
        .fold((0.0, 0usize), |(s, n), h| {
            (
                s + (h.b_target - h.b_actual.min(h.b_target)) as f64 / h.b_target as f64,
                n + 1,
            )
        });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn smooth(raw: f64, prev: u32, b_max: u32, mode: Smoothing) -> u32 {
    let prev = prev as f64;
    let bm = b_max as f64;
    let (lo, hi) = match mode {
        Smoothing::Corrected => {
            let lo = (0.5 * prev).max(1.0);
            let hi = (1.5 * prev).min(bm);
            (lo.min(hi), hi)
        }
        Smoothing::Literal => ((0.5 * prev).min(2.0), (1.5 * prev).max(bm)),
    };
    let v = raw.clamp(lo, hi).round();
    match mode {
        Smoothing::Corrected => (v as u32).clamp(1, b_max.max(1)),
        Smoothing::Literal => v.max(0.0) as u32,
    }
}

/// Reallocate the pooled bound `sum(b_max)` across active flows in
/// proportion to `Q (1 + u)`, then smooth against the previous targets.
pub fn micro_cycle(
    flows: &mut [SubflowState],
    qualities: &BTreeMap<ReplicaId, f64>,
    now: f64,
    t_adjust: f64,
    smoothing: Smoothing,
) -> Vec<MicroAllocation> {
    let active: Vec<usize> = (0..flows.len())
        .filter(|&i| flows[i].active && flows[i].b_max >= 1)
        .collect();
    if active.is_empty() {
        return Vec::new();
    }
    for &i in &active {
        let f = &mut flows[i];
        f.unsaturation = unsaturation(f, now - t_adjust);
        f.priority = qualities.get(&f.replica_id).copied().unwrap_or(1.0) * (1.0 + f.unsaturation);
        f.prune(now - t_adjust);
    }
    let pool: f64 = active.iter().map(|&i| flows[i].b_max as f64).sum();
    let total: f64 = active.iter().map(|&i| flows[i].priority).sum();
    let mut out = Vec::with_capacity(active.len());
    for &i in &active {
        let f = &mut flows[i];
        let raw = if total > 0.0 {
            pool * f.priority / total
        } else {
            pool / active.len() as f64
        };
        f.target_batch = smooth(raw, f.target_batch, f.b_max, smoothing);
        out.push(MicroAllocation {
            replica_id: f.replica_id,
            unsaturation: f.unsaturation,
            priority: f.priority,
            raw,
            target: f.target_batch,
        });
    }
    out
}

/// Cyclic assignment over whichever replicas are currently eligible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRobin {
    next: ReplicaId,
}

impl RoundRobin {
    /// `eligible` must be sorted ascending.
    pub fn assign(&mut self, eligible: &[ReplicaId]) -> Option<ReplicaId> {
        let pick = eligible
            .iter()
            .find(|&&id| id >= self.next)
            .or_else(|| eligible.first())
            .copied()?;
        self.next = pick + 1;
        Some(pick)
    }
}

/// Replica with the earliest predicted completion for one more request:
/// `max(now, free_at) + pace(queued + 1)`. Ties go to the lowest id.
pub fn greedy_choose(candidates: &[(ReplicaId, f64, usize, Pace)], now: f64) -> Option<ReplicaId> {
    candidates
        .iter()
        .map(|&(id, free_at, queued, pace)| (free_at.max(now) + pace.predict(queued + 1), id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Insert keeping the queue in deadline order (FIFO among equal deadlines).
pub fn edf_insert(queue: &mut VecDeque<Request>, r: Request) {
    let pos = queue.partition_point(|q| q.deadline <= r.deadline);
    queue.insert(pos, r);
}

/// Greedy batch from a deadline-ordered local queue: drop heads that cannot
/// finish even alone, then take the largest batch whose predicted completion
/// meets the head's deadline.
pub fn greedy_batch(
    queue: &mut VecDeque<Request>,
    now: f64,
    pace: Pace,
    b_max: u32,
) -> (Vec<Request>, Vec<Request>) {
    let mut dropped = Vec::new();
    while queue
        .front()
        .is_some_and(|h| h.deadline < now + pace.predict(1))
    {
        dropped.push(queue.pop_front().expect("non-empty"));
    }
    let Some(head) = queue.front() else {
        return (Vec::new(), dropped);
    };
    let mut b = queue.len().min(b_max.max(1) as usize);
    while b > 1 && now + pace.predict(b) > head.deadline {
        b -= 1;
    }
    (queue.drain(..b).collect(), dropped)
}

/// Up to `b_max` requests FIFO, no dropping.
pub fn round_robin_batch(queue: &mut VecDeque<Request>, b_max: u32) -> Vec<Request> {
    let b = queue.len().min(b_max.max(1) as usize);
    queue.drain(..b).collect()
}

/// Largest batch whose noise-free exclusive latency fits the SLO, and the
/// arrival rate `b* / tau` that keeps such batches exactly full.
pub fn ideal_mode_reference(profile: &ReplicaPerfProfile, tau: f64) -> Result<(u32, f64)> {
    let b = floor_tol((tau - profile.gamma_infer) / profile.alpha_infer);
    if !(b >= 1.0) {
        return Err(Error::Config(format!(
            "SLO-infeasible: no batch of at least one request finishes within {tau} s"
        )));
    }
    let b = b as u32;
    Ok((b, b as f64 / tau))
}
