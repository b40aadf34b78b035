//! Exhaustive offline scheduler for tiny instances: the best achievable
//! quality-weighted count of requests served within deadline.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dispatcher::{b_max_for, subflow_tick, Pace, StreamQueue, SubflowState};
use crate::domain::{Request, StreamId};
use crate::error::{Error, Result};
use crate::fit::LatencyModel;
use crate::rng::SimRng;

pub const MAX_REQUESTS: usize = 10;
pub const MAX_REPLICAS: usize = 3;
pub const MAX_SLOTS: usize = 8;
pub const MAX_POWER_SET_REQUESTS: usize = 6;
/// Largest number of candidate schedules the oracle will enumerate.
pub const MAX_SCHEDULES: u64 = 10_000_000;

/// Slack for floating-point comparisons of times.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub id: u64,
    pub arrival: f64,
    pub deadline: f64,
    #[serde(default)]
    pub stream: u32,
}

/// Known batch latency `alpha |B| + beta train_batch + gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReplica {
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub train_batch: u32,
}

impl OracleReplica {
    pub fn latency(&self, size: usize) -> f64 {
        self.alpha * size as f64 + self.beta * self.train_batch as f64 + self.gamma
    }

    fn pace(&self) -> Pace {
        Pace {
            slope: self.alpha,
            intercept: self.beta * self.train_batch as f64 + self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub requests: Vec<OracleRequest>,
    pub replicas: Vec<OracleReplica>,
    /// Batches start only at `k * slot_width` for `k < slots`.
    pub slot_width: f64,
    pub slots: usize,
    /// `qualities[replica][request index]`.
    pub qualities: Vec<Vec<f64>>,
    /// Allow any same-stream subset as a batch instead of FIFO runs only.
    #[serde(default)]
    pub power_set: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub replica: usize,
    pub slot: usize,
    /// Request ids.
    pub requests: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub batches: Vec<ScheduledBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub schedule: Schedule,
    pub q_goodput: f64,
    /// Complete feasible schedules in the search space.
    pub candidates: u64,
    /// Complete schedules actually scored.
    pub leaves_visited: u64,
}

impl OracleInstance {
    pub fn from_json(text: &str) -> Result<Self> {
        let inst: OracleInstance = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("oracle instance: {e}")))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn slot_time(&self, slot: usize) -> f64 {
        slot as f64 * self.slot_width
    }

    pub fn validate(&self) -> Result<()> {
        let size = || {
            format!(
                "{} requests, {} replicas, {} slots (limits {MAX_REQUESTS}, {MAX_REPLICAS}, {MAX_SLOTS})",
                self.requests.len(),
                self.replicas.len(),
                self.slots
            )
        };
        if self.requests.len() > MAX_REQUESTS
            || self.replicas.len() > MAX_REPLICAS
            || self.slots > MAX_SLOTS
        {
            return Err(Error::InstanceTooLarge(size()));
        }
        if self.power_set && self.requests.len() > MAX_POWER_SET_REQUESTS {
            return Err(Error::InstanceTooLarge(format!(
                "power-set enumeration allows at most {MAX_POWER_SET_REQUESTS} requests, got {}",
                self.requests.len()
            )));
        }
        if self.replicas.is_empty() {
            return Err(Error::Config(
                "oracle instance: at least one replica".into(),
            ));
        }
        if !(self.slot_width > 0.0) || !self.slot_width.is_finite() {
            return Err(Error::Config(
                "oracle instance: slot_width must be positive".into(),
            ));
        }
        for (i, r) in self.replicas.iter().enumerate() {
            if !(r.alpha > 0.0) || !(r.gamma >= 0.0) || !(r.beta >= 0.0) {
                return Err(Error::Config(format!(
                    "oracle instance: replicas[{i}] needs alpha > 0, gamma >= 0, beta >= 0"
                )));
            }
        }
        let mut ids: Vec<u64> = self.requests.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "oracle instance: duplicate request id".into(),
            ));
        }
        for r in &self.requests {
            if !r.arrival.is_finite() || !(r.deadline >= r.arrival) {
                return Err(Error::Config(format!(
                    "oracle instance: request {} needs deadline >= arrival",
                    r.id
                )));
            }
        }
        if self.qualities.len() != self.replicas.len()
            || self
                .qualities
                .iter()
                .any(|row| row.len() != self.requests.len())
        {
            return Err(Error::Config(
                "oracle instance: qualities must be [replicas][requests]".into(),
            ));
        }
        if self
            .qualities
            .iter()
            .flatten()
            .any(|q| !q.is_finite() || *q < 0.0)
        {
            return Err(Error::Config(
                "oracle instance: qualities must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.requests.iter().position(|r| r.id == id)
    }
}

/// A batch finishing by its earliest member deadline.
fn meets(inst: &OracleInstance, replica: usize, slot: usize, members: &[usize]) -> bool {
    let end = inst.slot_time(slot) + inst.replicas[replica].latency(members.len());
    let d = members
        .iter()
        .map(|&m| inst.requests[m].deadline)
        .fold(f64::INFINITY, f64::min);
    end <= d + TIME_EPS
}

/// Contribution `|B| * Q_i(B)`, i.e. the sum of member qualities, or 0 when
/// the batch misses its deadline.
fn contribution(inst: &OracleInstance, replica: usize, slot: usize, members: &[usize]) -> f64 {
    if meets(inst, replica, slot, members) {
        members.iter().map(|&m| inst.qualities[replica][m]).sum()
    } else {
        0.0
    }
}

/// Score a schedule, checking dispatch-once (a), no dispatch before arrival
/// (b) and no overlap on a replica (d).
pub fn evaluate_schedule(inst: &OracleInstance, schedule: &Schedule) -> Result<f64> {
    let mut seen = vec![false; inst.requests.len()];
    let mut placed: Vec<(usize, f64, f64)> = Vec::new();
    let mut total = 0.0;
    for (bi, b) in schedule.batches.iter().enumerate() {
        if b.replica >= inst.replicas.len() || b.slot >= inst.slots {
            return Err(Error::Config(format!(
                "batch {bi}: replica or slot out of range"
            )));
        }
        if b.requests.is_empty() {
            return Err(Error::Config(format!("batch {bi} is empty")));
        }
        let t = inst.slot_time(b.slot);
        let mut members = Vec::with_capacity(b.requests.len());
        for &id in &b.requests {
            let m = inst
                .index_of(id)
                .ok_or_else(|| Error::Config(format!("batch {bi}: unknown request {id}")))?;
            if seen[m] {
                return Err(Error::ConstraintViolation {
                    constraint: 'a',
                    detail: format!("request {id} is dispatched more than once"),
                });
            }
            seen[m] = true;
            if inst.requests[m].arrival > t + TIME_EPS {
                return Err(Error::ConstraintViolation {
                    constraint: 'b',
                    detail: format!(
                        "request {id} dispatched at {t} before its arrival {}",
                        inst.requests[m].arrival
                    ),
                });
            }
            members.push(m);
        }
        let stream = inst.requests[members[0]].stream;
        if members.iter().any(|&m| inst.requests[m].stream != stream) {
            return Err(Error::Config(format!("batch {bi} mixes streams")));
        }
        let end = t + inst.replicas[b.replica].latency(members.len());
        if let Some(&(_, s, e)) = placed
            .iter()
            .find(|&&(r, s, e)| r == b.replica && t < e - TIME_EPS && s < end - TIME_EPS)
        {
            return Err(Error::ConstraintViolation {
                constraint: 'd',
                detail: format!("batch {bi} on replica {} overlaps [{s}, {e})", b.replica),
            });
        }
        placed.push((b.replica, t, end));
        total += contribution(inst, b.replica, b.slot, &members);
    }
    Ok(total)
}

#[derive(Clone)]
struct Open {
    replica: usize,
    slot: usize,
    members: Vec<usize>,
}

struct Search<'a> {
    inst: &'a OracleInstance,
    /// Request indices in FIFO order (arrival, then id).
    order: Vec<usize>,
    /// Position of each request within its stream's FIFO list, and that list.
    stream_lists: Vec<Vec<usize>>,
    stream_pos: Vec<(usize, usize)>,
    max_q: Vec<f64>,
    prune: bool,
    limit: u64,
    best: f64,
    best_schedule: Vec<Open>,
    leaves: u64,
    exceeded: bool,
}

impl<'a> Search<'a> {
    fn new(inst: &'a OracleInstance, prune: bool, limit: u64) -> Self {
        let mut order: Vec<usize> = (0..inst.requests.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&inst.requests[a], &inst.requests[b]);
            ra.arrival.total_cmp(&rb.arrival).then(ra.id.cmp(&rb.id))
        });
        let mut streams: Vec<u32> = inst.requests.iter().map(|r| r.stream).collect();
        streams.sort_unstable();
        streams.dedup();
        let stream_lists: Vec<Vec<usize>> = streams
            .iter()
            .map(|&s| {
                order
                    .iter()
                    .copied()
                    .filter(|&i| inst.requests[i].stream == s)
                    .collect()
            })
            .collect();
        let mut stream_pos = vec![(0, 0); inst.requests.len()];
        for (li, list) in stream_lists.iter().enumerate() {
            for (p, &i) in list.iter().enumerate() {
                stream_pos[i] = (li, p);
            }
        }
        let max_q = (0..inst.requests.len())
            .map(|m| {
                let servable = (0..inst.replicas.len()).any(|r| {
                    (0..inst.slots).any(|k| {
                        inst.slot_time(k) + TIME_EPS >= inst.requests[m].arrival
                            && meets(inst, r, k, &[m])
                    })
                });
                if servable {
                    (0..inst.replicas.len())
                        .map(|r| inst.qualities[r][m])
                        .fold(0.0, f64::max)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            inst,
            order,
            stream_lists,
            stream_pos,
            max_q,
            prune,
            limit,
            best: 0.0,
            best_schedule: Vec::new(),
            leaves: 0,
            exceeded: false,
        }
    }

    fn interval(&self, b: &Open) -> (f64, f64) {
        let t = self.inst.slot_time(b.slot);
        (
            t,
            t + self.inst.replicas[b.replica].latency(b.members.len()),
        )
    }

    fn overlaps_any(&self, batches: &[Open], idx: usize) -> bool {
        let (s, e) = self.interval(&batches[idx]);
        batches.iter().enumerate().any(|(j, o)| {
            if j == idx || o.replica != batches[idx].replica {
                return false;
            }
            let (os, oe) = self.interval(o);
            s < oe - TIME_EPS && os < e - TIME_EPS
        })
    }

    fn value(&self, batches: &[Open]) -> f64 {
        batches
            .iter()
            .map(|b| contribution(self.inst, b.replica, b.slot, &b.members))
            .sum()
    }

    fn leaf(&mut self, batches: &[Open]) {
        self.leaves += 1;
        if self.leaves > self.limit {
            self.exceeded = true;
            return;
        }
        let v = self.value(batches);
        if v > self.best {
            self.best = v;
            self.best_schedule = batches.to_vec();
        }
    }

    fn bound(&self, batches: &[Open], pos: usize, covered: u32) -> f64 {
        let rest: f64 = self.order[pos..]
            .iter()
            .filter(|&&m| covered & (1 << m) == 0)
            .map(|&m| self.max_q[m])
            .sum();
        self.value(batches) + rest
    }

    fn pruned(&self, batches: &[Open], pos: usize, covered: u32) -> bool {
        self.prune && self.bound(batches, pos, covered) <= self.best - 1e-9
    }

    fn slot_ok(&self, slot: usize, m: usize) -> bool {
        self.inst.slot_time(slot) + TIME_EPS >= self.inst.requests[m].arrival
    }

    /// FIFO-run batches: the request at `pos` is skipped or starts a run of
    /// consecutive same-stream requests.
    fn dfs_runs(&mut self, pos: usize, covered: u32, batches: &mut Vec<Open>) {
        if self.exceeded {
            return;
        }
        if pos == self.order.len() {
            self.leaf(batches);
            return;
        }
        let m = self.order[pos];
        if covered & (1 << m) != 0 {
            return self.dfs_runs(pos + 1, covered, batches);
        }
        if self.pruned(batches, pos, covered) {
            return;
        }
        self.dfs_runs(pos + 1, covered, batches);
        let (li, p) = self.stream_pos[m];
        let list_len = self.stream_lists[li].len();
        for q in p..list_len {
            let members: Vec<usize> = self.stream_lists[li][p..=q].to_vec();
            let last = *members.last().expect("non-empty");
            let mut mask = covered;
            for &x in &members {
                mask |= 1 << x;
            }
            for r in 0..self.inst.replicas.len() {
                for k in 0..self.inst.slots {
                    if !self.slot_ok(k, last) {
                        continue;
                    }
                    batches.push(Open {
                        replica: r,
                        slot: k,
                        members: members.clone(),
                    });
                    if !self.overlaps_any(batches, batches.len() - 1) {
                        self.dfs_runs(pos + 1, mask, batches);
                    }
                    batches.pop();
                    if self.exceeded {
                        return;
                    }
                }
            }
        }
    }

    /// Arbitrary same-stream batches: the request at `pos` is skipped, joins
    /// an earlier batch, or opens a new one.
    fn dfs_sets(&mut self, pos: usize, covered: u32, batches: &mut Vec<Open>) {
        if self.exceeded {
            return;
        }
        if pos == self.order.len() {
            self.leaf(batches);
            return;
        }
        if self.pruned(batches, pos, covered) {
            return;
        }
        let m = self.order[pos];
        let mask = covered | (1 << m);
        self.dfs_sets(pos + 1, covered, batches);
        for bi in 0..batches.len() {
            let b = &batches[bi];
            if self.inst.requests[b.members[0]].stream != self.inst.requests[m].stream
                || !self.slot_ok(b.slot, m)
            {
                continue;
            }
            batches[bi].members.push(m);
            if !self.overlaps_any(batches, bi) {
                self.dfs_sets(pos + 1, mask, batches);
            }
            batches[bi].members.pop();
            if self.exceeded {
                return;
            }
        }
        for r in 0..self.inst.replicas.len() {
            for k in 0..self.inst.slots {
                if !self.slot_ok(k, m) {
                    continue;
                }
                batches.push(Open {
                    replica: r,
                    slot: k,
                    members: vec![m],
                });
                if !self.overlaps_any(batches, batches.len() - 1) {
                    self.dfs_sets(pos + 1, mask, batches);
                }
                batches.pop();
                if self.exceeded {
                    return;
                }
            }
        }
    }

    fn run(&mut self) {
        let mut batches = Vec::new();
        if self.inst.power_set {
            self.dfs_sets(0, 0, &mut batches);
        } else {
            self.dfs_runs(0, 0, &mut batches);
        }
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            batches: self
                .best_schedule
                .iter()
                .map(|b| ScheduledBatch {
                    replica: b.replica,
                    slot: b.slot,
                    requests: b
                        .members
                        .iter()
                        .map(|&m| self.inst.requests[m].id)
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Number of complete feasible schedules, or a refusal past [`MAX_SCHEDULES`].
pub fn count_schedules(inst: &OracleInstance) -> Result<u64> {
    inst.validate()?;
    let mut s = Search::new(inst, false, MAX_SCHEDULES);
    s.run();
    if s.exceeded {
        return Err(Error::InstanceTooLarge(format!(
            "more than {MAX_SCHEDULES} candidate schedules ({} requests, {} replicas, {} slots{})",
            inst.requests.len(),
            inst.replicas.len(),
            inst.slots,
            if inst.power_set { ", power set" } else { "" }
        )));
    }
    Ok(s.leaves)
}

fn solve(inst: &OracleInstance, prune: bool) -> Result<OracleSolution> {
    let candidates = count_schedules(inst)?;
    let mut s = Search::new(inst, prune, u64::MAX);
    s.run();
    Ok(OracleSolution {
        schedule: s.schedule(),
        q_goodput: s.best,
        candidates,
        leaves_visited: s.leaves,
    })
}

/// Score every candidate schedule; the first best in search order wins.
pub fn enumerate_pure(inst: &OracleInstance) -> Result<OracleSolution> {
    solve(inst, false)
}

/// Same search with subtrees cut when they cannot strictly improve the
/// incumbent. Returns the same schedule and value as [`enumerate_pure`].
pub fn enumerate_optimal(inst: &OracleInstance) -> Result<OracleSolution> {
    solve(inst, true)
}

/// Replay the subflow dispatcher on the slot grid: every free replica ticks
/// at each slot boundary, higher mean quality first, fetching FIFO with the
/// SLO-aware discard and a batch bound from its known latency and the
/// tightest request slack.
pub fn replay_subflow(inst: &OracleInstance) -> Result<Schedule> {
    inst.validate()?;
    let tau = inst
        .requests
        .iter()
        .map(|r| r.deadline - r.arrival)
        .fold(f64::INFINITY, f64::min);
    let mut streams: Vec<u32> = inst.requests.iter().map(|r| r.stream).collect();
    streams.sort_unstable();
    streams.dedup();
    let mut queues: Vec<StreamQueue> = streams
        .iter()
        .map(|&s| StreamQueue::new(StreamId(s)))
        .collect();
    let mut pending: Vec<usize> = (0..inst.requests.len()).collect();
    pending.sort_by(|&a, &b| {
        let (ra, rb) = (&inst.requests[a], &inst.requests[b]);
        ra.arrival.total_cmp(&rb.arrival).then(ra.id.cmp(&rb.id))
    });
    let mut pending = std::collections::VecDeque::from(pending);
    let mut flows: Vec<SubflowState> = inst
        .replicas
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let pace = r.pace();
            let model = LatencyModel::prior(pace.slope, 0.0, pace.intercept);
            SubflowState::new(i, b_max_for(&model, tau).max(1), pace)
        })
        .collect();
    let mut by_quality: Vec<usize> = (0..inst.replicas.len()).collect();
    let mean_q =
        |r: usize| inst.qualities[r].iter().sum::<f64>() / inst.qualities[r].len().max(1) as f64;
    by_quality.sort_by(|&a, &b| mean_q(b).total_cmp(&mean_q(a)).then(a.cmp(&b)));
    let mut free_at = vec![0.0f64; inst.replicas.len()];
    let mut out = Schedule::default();
    for k in 0..inst.slots {
        let t = inst.slot_time(k);
        while pending
            .front()
            .is_some_and(|&m| inst.requests[m].arrival <= t + TIME_EPS)
        {
            let m = pending.pop_front().expect("non-empty");
            let r = &inst.requests[m];
            let qi = streams.binary_search(&r.stream).expect("listed");
            queues[qi].push(Request {
                id: r.id,
                arrival: r.arrival,
                deadline: r.deadline,
                output_tokens: 1,
                stream_id: StreamId(r.stream),
            });
        }
        for &ri in &by_quality {
            if free_at[ri] > t + TIME_EPS {
                continue;
            }
            let Some(queue) = queues.iter_mut().find(|q| !q.is_empty()) else {
                break;
            };
            let tick = subflow_tick(&mut flows[ri], queue, t, true);
            if tick.dispatched.is_empty() {
                continue;
            }
            free_at[ri] = t + inst.replicas[ri].latency(tick.dispatched.len());
            out.batches.push(ScheduledBatch {
                replica: ri,
                slot: k,
                requests: tick.dispatched.iter().map(|r| r.id).collect(),
            });
        }
    }
    Ok(out)
}

/// Random instance for testing: arrivals on the first half of the grid,
/// slack between 2 and 5 slots, per-replica quality levels with jitter.
pub fn random_instance(
    rng: &mut SimRng,
    requests: usize,
    replicas: usize,
    slots: usize,
) -> OracleInstance {
    let slot_width = 0.08;
    let reps: Vec<OracleReplica> = (0..replicas)
        .map(|_| OracleReplica {
            alpha: rng.random_range(0.01..0.04),
            gamma: slot_width,
            beta: 0.0,
            train_batch: 0,
        })
        .collect();
    let horizon = slot_width * (slots as f64 / 2.0).max(1.0);
    let mut reqs: Vec<OracleRequest> = (0..requests)
        .map(|i| {
            let arrival = rng.random_range(0.0..horizon);
            let slack = slot_width * rng.random_range(2.0..5.0);
            OracleRequest {
                id: i as u64,
                arrival,
                deadline: arrival + slack,
                stream: 0,
            }
        })
        .collect();
    reqs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival));
    for (i, r) in reqs.iter_mut().enumerate() {
        r.id = i as u64;
    }
    let qualities = (0..replicas)
        .map(|_| {
            let level = rng.random_range(0.6..1.4);
            (0..requests)
                .map(|_| level * rng.random_range(0.9..1.1))
                .collect()
        })
        .collect();
    OracleInstance {
        requests: reqs,
        replicas: reps,
        slot_width,
        slots,
        qualities,
        power_set: false,
    }
}
