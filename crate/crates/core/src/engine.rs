//! Discrete-event simulation of a replica pool serving request streams while
//! underused replicas fine-tune the shared model.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use crate::config::{Scenario, StreamSpec};
use crate::convergence::TrainState;
use crate::coordinator::{CoordModels, Coordinator};
use crate::dispatcher::{
    b_max_for, edf_insert, greedy_batch, greedy_choose, ideal_mode_reference, macro_cycle,
    micro_cycle, overload_mitigation, round_robin_batch, subflow_tick, Pace, Policy,
    PriorityQuality, RoundRobin, StreamQueue, SubflowState,
};
use crate::domain::{
    BatchConfig, ModelId, QualityScore, ReplicaId, ReplicaState, Request, StreamId,
};
use crate::error::{Error, Result};
use crate::fit::LatencyModel;
use crate::launcher::{scan_and_trigger, AdapterParams, ClientResult, FlProcess, GlobalModel};
use crate::metrics::{
    CoordinatorRecord, DispatchRecord, Fingerprint, MetricsLedger, MicroRecord, Outcome,
    ProcessRecord, RequestRecord, TransitionRecord, UtilSample,
};
use crate::perf::{true_infer_latency, true_train_latency, ReplicaPerfProfile, UtilizationMeter};
use crate::rng::{self, SimRng};
use crate::state_manager::{
    check_idle_transition, compute_thresholds, tick_rollback, IdleCheck, ReplicaStats,
    TransitionMode,
};
use crate::workload::{merge_traces, to_requests};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPhase {
    /// The broadcast has reached the participants; local steps begin.
    Start,
    /// Every active participant has uploaded.
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    RequestArrival,
    BatchComplete { replica: ReplicaId },
    TrainStepComplete { replica: ReplicaId },
    SubflowTick { replica: ReplicaId },
    MacroCycle { stream: StreamId },
    MicroCycle { stream: StreamId },
    RoundBoundary { model: ModelId, phase: RoundPhase },
    StateScan,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Events ordered by `(time, seq)`; `seq` is assigned at scheduling time.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<()> {
        if !(time >= self.now) {
            return Err(Error::Internal(format!(
                "event {kind:?} scheduled at {time} before now {}",
                self.now
            )));
        }
        self.heap.push(Event {
            time,
            seq: self.next_seq,
            kind,
        });
        self.next_seq += 1;
        Ok(())
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pop the next event and advance the clock to it.
    pub fn pop(&mut self) -> Result<Option<Event>> {
        let Some(e) = self.heap.pop() else {
            return Ok(None);
        };
        if e.time < self.now {
            return Err(Error::Internal(format!(
                "time regression: {} after {}",
                e.time, self.now
            )));
        }
        self.now = e.time;
        Ok(Some(e))
    }
}

#[derive(Debug, Clone, Copy)]
struct InferInFlight {
    b: u32,
    big_b: u32,
    start: f64,
    end: f64,
}

#[derive(Debug, Clone, Copy)]
struct TrainInFlight {
    big_b: u32,
    b: u32,
    start: f64,
}

#[derive(Debug, Clone)]
struct ClientWork {
    state: TrainState,
    adapter: AdapterParams,
    start_loss: f64,
    steps_left: u32,
}

struct Replica {
    id: ReplicaId,
    model: ModelId,
    stream: Option<StreamId>,
    profile: ReplicaPerfProfile,
    state: ReplicaState,
    stats: ReplicaStats,
    meter: UtilizationMeter,
    serve_loss: f64,
    cfg: BatchConfig,
    infer: Option<InferInFlight>,
    train: Option<TrainInFlight>,
    client: Option<ClientWork>,
    tick_scheduled: bool,
    tick_pending: bool,
    local: VecDeque<Request>,
    window_batch: (f64, u32),
}

struct ActiveProcess {
    index: usize,
    fl: FlProcess,
    coord: Coordinator,
    results: BTreeMap<ReplicaId, ClientResult>,
    training: BTreeSet<ReplicaId>,
    last_upload: f64,
}

struct Family {
    global: GlobalModel,
    qualities: BTreeMap<ReplicaId, QualityScore>,
    process: Option<ActiveProcess>,
    tau: f64,
}

struct Stream {
    spec: StreamSpec,
    queue: StreamQueue,
    flows: Vec<SubflowState>,
    fit: LatencyModel,
    b_max_serving: u32,
    samples: Vec<(f64, f64)>,
    waits: Vec<f64>,
    rr: RoundRobin,
}

/// Run `scenario` under its configured policy.
pub fn run(scenario: &Scenario, seed: u64) -> Result<MetricsLedger> {
    run_policy(scenario, scenario.policy, seed)
}

/// Run `scenario` under `policy`, overriding the configured one.
pub fn run_policy(scenario: &Scenario, policy: Policy, seed: u64) -> Result<MetricsLedger> {
    scenario.validate()?;
    let mut e = Engine::new(scenario, policy, seed)?;
    e.run()?;
    e.finish()
}

/// Requests of every workload merged in arrival order. Workloads run to the
/// scenario horizon.
pub fn scenario_requests(scenario: &Scenario, seed: u64) -> Result<Vec<Request>> {
    let mut sources = Vec::with_capacity(scenario.workloads.len());
    for (i, w) in scenario.workloads.iter().enumerate() {
        let mut spec = w.clone();
        spec.duration = scenario.duration;
        let events = spec.generate(rng::derive_seed(seed, i as u64))?;
        sources.push(
            events
                .into_iter()
                .filter(|e| e.timestamp < scenario.duration)
                .collect(),
        );
    }
    let merged = merge_traces(sources);
    to_requests(&merged, |s| scenario.stream(s).map(|x| x.slo))
}

struct Engine<'a> {
    sc: &'a Scenario,
    policy: Policy,
    q: EventQueue,
    requests: Vec<Request>,
    next_arrival: usize,
    replicas: Vec<Replica>,
    streams: BTreeMap<StreamId, Stream>,
    families: BTreeMap<ModelId, Family>,
    infer_rng: SimRng,
    train_rng: SimRng,
    conv_rng: SimRng,
    adapter_rng: SimRng,
    ledger: MetricsLedger,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, policy: Policy, seed: u64) -> Result<Self> {
        let requests = scenario_requests(sc, seed)?;
        let fp = Fingerprint {
            config_hash: sc.config_hash(),
            seed,
            policy,
        };
        let mut ledger = MetricsLedger::new(
            fp,
            sc.duration,
            sc.replica_count(),
            sc.report.jct_target_loss,
        );
        ledger.requests = requests
            .iter()
            .map(|r| RequestRecord {
                id: r.id,
                stream: r.stream_id,
                arrival: r.arrival,
                deadline: r.deadline,
                output_tokens: r.output_tokens,
                outcome: Outcome::Queued,
                replica: None,
                dispatch_time: None,
                completion: None,
                loss_at_serve: None,
                replica_state: None,
                drop_time: None,
            })
            .collect();

        let mut replicas = Vec::new();
        for g in &sc.replicas {
            for _ in 0..g.count {
                replicas.push(Replica {
                    id: replicas.len(),
                    model: g.model,
                    stream: sc.stream_of_model(g.model).map(|s| s.id),
                    profile: g.profile.unwrap_or(sc.profile),
                    state: g.initial_state,
                    stats: ReplicaStats::new(sc.state.window, sc.state.decay),
                    meter: UtilizationMeter::new(),
                    serve_loss: sc.convergence.initial_loss,
                    cfg: BatchConfig::new(0, 0),
                    infer: None,
                    train: None,
                    client: None,
                    tick_scheduled: false,
                    tick_pending: false,
                    local: VecDeque::new(),
                    window_batch: (0.0, 0),
                });
            }
        }

        let mut families = BTreeMap::new();
        for r in &replicas {
            families.entry(r.model).or_insert_with(|| Family {
                global: GlobalModel {
                    state: sc.convergence.initial_state(),
                    adapter: AdapterParams::zeros(
                        sc.launcher.adapter_d,
                        sc.launcher.adapter_r,
                        sc.launcher.adapter_l,
                    ),
                },
                qualities: BTreeMap::new(),
                process: None,
                tau: sc.stream_of_model(r.model).map(|s| s.slo).unwrap_or(1.0),
            });
        }

        let mut streams = BTreeMap::new();
        for spec in &sc.streams {
            let first = replicas
                .iter()
                .find(|r| r.model == spec.model)
                .expect("validated");
            let p = first.profile;
            let fit = LatencyModel::prior(p.alpha_infer, 0.0, p.gamma_infer);
            streams.insert(
                spec.id,
                Stream {
                    spec: *spec,
                    queue: StreamQueue::new(spec.id),
                    flows: Vec::new(),
                    fit,
                    b_max_serving: b_max_for(&fit, spec.slo).max(1),
                    samples: Vec::new(),
                    waits: Vec::new(),
                    rr: RoundRobin::default(),
                },
            );
        }

        Ok(Self {
            sc,
            policy,
            q: EventQueue::new(),
            requests,
            next_arrival: 0,
            replicas,
            streams,
            families,
            infer_rng: rng::stream(seed, rng::label::INFER_NOISE),
            train_rng: rng::stream(seed, rng::label::TRAIN_NOISE),
            conv_rng: rng::stream(seed, rng::label::CONVERGENCE),
            adapter_rng: rng::stream(seed, rng::label::ADAPTER),
            ledger,
        })
    }

    fn now(&self) -> f64 {
        self.q.now()
    }

    fn run(&mut self) -> Result<()> {
        if let Some(r) = self.requests.first() {
            self.q.schedule(r.arrival, EventKind::RequestArrival)?;
        }
        self.q
            .schedule(self.sc.state.scan_interval, EventKind::StateScan)?;
        if self.policy.uses_subflows() {
            for r in 0..self.replicas.len() {
                if self.replicas[r].stream.is_some() && self.replicas[r].state.accepts_requests() {
                    self.activate_flow(r)?;
                }
            }
        }
        if self.policy == Policy::Subflow {
            let ids: Vec<StreamId> = self.streams.keys().copied().collect();
            for s in ids {
                self.q.schedule(
                    self.sc.dispatcher.t_fit,
                    EventKind::MacroCycle { stream: s },
                )?;
                self.q.schedule(
                    self.sc.dispatcher.t_adjust,
                    EventKind::MicroCycle { stream: s },
                )?;
            }
        }
        while let Some(t) = self.q.peek_time() {
            if t > self.sc.duration {
                break;
            }
            let ev = self.q.pop()?.expect("peeked");
            match ev.kind {
                EventKind::RequestArrival => self.on_arrival()?,
                EventKind::BatchComplete { replica } => self.on_batch_complete(replica)?,
                EventKind::TrainStepComplete { replica } => self.on_train_step(replica)?,
                EventKind::SubflowTick { replica } => self.on_tick(replica)?,
                EventKind::MacroCycle { stream } => self.on_macro(stream)?,
                EventKind::MicroCycle { stream } => self.on_micro(stream)?,
                EventKind::RoundBoundary {
                    model,
                    phase: RoundPhase::Start,
                } => self.on_round_start(model)?,
                EventKind::RoundBoundary {
                    model,
                    phase: RoundPhase::Aggregate,
                } => self.on_aggregate(model)?,
                EventKind::StateScan => self.on_scan()?,
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<MetricsLedger> {
        for rec in &self.ledger.requests {
            let ok = match rec.outcome {
                Outcome::Met => rec.completion.is_some_and(|c| c <= rec.deadline),
                Outcome::Late => rec.completion.is_some_and(|c| c > rec.deadline),
                Outcome::Dropped => rec.drop_time.is_some() && rec.completion.is_none(),
                Outcome::Queued => rec.dispatch_time.is_none() && rec.drop_time.is_none(),
            };
            if !ok {
                return Err(Error::Internal(format!(
                    "request {} has an inconsistent outcome record",
                    rec.id
                )));
            }
        }
        for f in self.families.values() {
            if let Some(p) = &f.process {
                self.ledger.warnings.push(format!(
                    "fine-tuning process {} was still running at the horizon (round {})",
                    p.index, p.fl.round_index
                ));
            }
        }
        Ok(self.ledger)
    }

    // ---- helpers ----

    fn stream_of(&self, r: ReplicaId) -> Option<StreamId> {
        self.replicas[r].stream
    }

    fn flow_index(&self, s: StreamId, r: ReplicaId) -> Option<usize> {
        self.streams[&s]
            .flows
            .iter()
            .position(|f| f.replica_id == r)
    }

    /// Inference pace the dispatcher assumes for replica `r` right now.
    fn pace_for(&self, r: ReplicaId) -> Pace {
        let rep = &self.replicas[r];
        let p = &rep.profile;
        let combined = rep.state == ReplicaState::Combined;
        match self.policy {
            Policy::Subflow => {
                if combined {
                    let fam = &self.families[&rep.model];
                    let m = fam
                        .process
                        .as_ref()
                        .map(|a| a.coord.models.infer)
                        .unwrap_or(CoordModels::prior(p).infer);
                    Pace::from_bivariate(&m, rep.cfg.train_batch)
                } else {
                    Pace::from_univariate(
                        &self.streams[&rep.stream.expect("serving replica has a stream")].fit,
                    )
                }
            }
            _ => {
                let big_b = if combined { rep.cfg.train_batch } else { 0 };
                Pace {
                    slope: p.alpha_infer,
                    intercept: p.beta_infer * big_b as f64 + p.gamma_infer,
                }
            }
        }
    }

    /// Per-dispatch batch bound for replica `r` under the active policy.
    fn b_max_of(&self, r: ReplicaId) -> u32 {
        let rep = &self.replicas[r];
        if rep.state == ReplicaState::Combined {
            return rep.cfg.infer_batch.max(1);
        }
        let tau = self.families[&rep.model].tau;
        match self.policy {
            Policy::Subflow => self.streams[&rep.stream.expect("stream")]
                .b_max_serving
                .max(1),
            Policy::IdealRef => ideal_mode_reference(&rep.profile, tau)
                .map(|x| x.0)
                .unwrap_or(1),
            Policy::RoundRobin | Policy::Greedy => {
                let m = LatencyModel::prior(rep.profile.alpha_infer, 0.0, rep.profile.gamma_infer);
                b_max_for(&m, tau).max(1)
            }
        }
    }

    fn activate_flow(&mut self, r: ReplicaId) -> Result<()> {
        let Some(s) = self.stream_of(r) else {
            return Ok(());
        };
        let b_max = self.b_max_of(r);
        let pace = self.pace_for(r);
        let flow = SubflowState::new(r, b_max, pace);
        let stream = self.streams.get_mut(&s).expect("stream");
        match stream.flows.iter().position(|f| f.replica_id == r) {
            Some(i) => stream.flows[i] = flow,
            None => {
                stream.flows.push(flow);
                stream.flows.sort_by_key(|f| f.replica_id);
            }
        }
        let rep = &mut self.replicas[r];
        if !rep.tick_scheduled && !rep.tick_pending {
            rep.tick_scheduled = true;
            let now = self.q.now();
            self.q
                .schedule(now, EventKind::SubflowTick { replica: r })?;
        }
        Ok(())
    }

    fn deactivate_flow(&mut self, r: ReplicaId) {
        if let Some(s) = self.stream_of(r) {
            if let Some(i) = self.flow_index(s, r) {
                self.streams.get_mut(&s).expect("stream").flows[i].active = false;
            }
        }
    }

    fn set_state(&mut self, r: ReplicaId, to: ReplicaState, reason: &str) -> Result<()> {
        let from = self.replicas[r].state;
        self.replicas[r].state = from.transition(to)?;
        self.replicas[r].stats.reset();
        self.replicas[r].window_batch = (0.0, 0);
        let now = self.now();
        self.ledger.transitions.push(TransitionRecord {
            time: now,
            replica: r,
            from,
            to,
            reason: reason.into(),
        });
        if self.policy.uses_subflows() {
            if to.accepts_requests() {
                self.activate_flow(r)?;
            } else {
                self.deactivate_flow(r);
            }
        } else if to.accepts_requests() {
            self.drain_orphans(r)?;
        } else {
            let pending: Vec<Request> = self.replicas[r].local.drain(..).collect();
            for req in pending {
                self.route_baseline(req)?;
            }
        }
        Ok(())
    }

    fn eligible(&self, model: ModelId) -> Vec<ReplicaId> {
        self.replicas
            .iter()
            .filter(|x| x.model == model && x.state.accepts_requests())
            .map(|x| x.id)
            .collect()
    }

    // ---- requests ----

    fn on_arrival(&mut self) -> Result<()> {
        let req = self.requests[self.next_arrival].clone();
        self.next_arrival += 1;
        if let Some(next) = self.requests.get(self.next_arrival) {
            self.q.schedule(next.arrival, EventKind::RequestArrival)?;
        }
        if self.policy.uses_subflows() {
            self.streams
                .get_mut(&req.stream_id)
                .expect("validated stream")
                .queue
                .push(req);
            Ok(())
        } else {
            self.route_baseline(req)
        }
    }

    /// Assign a request to a replica's local queue; park it on the stream
    /// queue when no replica accepts requests.
    fn route_baseline(&mut self, req: Request) -> Result<()> {
        let model = self.streams[&req.stream_id].spec.model;
        let eligible = self.eligible(model);
        let pick = match self.policy {
            Policy::RoundRobin => self
                .streams
                .get_mut(&req.stream_id)
                .expect("stream")
                .rr
                .assign(&eligible),
            _ => {
                let now = self.now();
                let cands: Vec<_> = eligible
                    .iter()
                    .map(|&id| {
                        let rep = &self.replicas[id];
                        (
                            id,
                            rep.infer.map(|f| f.end).unwrap_or(now),
                            rep.local.len(),
                            self.pace_for(id),
                        )
                    })
                    .collect();
                greedy_choose(&cands, now)
            }
        };
        match pick {
            Some(r) => {
                match self.policy {
                    Policy::RoundRobin => self.replicas[r].local.push_back(req),
                    _ => edf_insert(&mut self.replicas[r].local, req),
                }
                self.try_start_baseline(r)
            }
            None => {
                self.streams
                    .get_mut(&req.stream_id)
                    .expect("stream")
                    .queue
                    .push(req);
                Ok(())
            }
        }
    }

    fn drain_orphans(&mut self, r: ReplicaId) -> Result<()> {
        let Some(s) = self.stream_of(r) else {
            return Ok(());
        };
        let parked = self.streams.get_mut(&s).expect("stream").queue.drain_all();
        for req in parked {
            self.route_baseline(req)?;
        }
        Ok(())
    }

    fn try_start_baseline(&mut self, r: ReplicaId) -> Result<()> {
        let rep = &self.replicas[r];
        if !rep.state.accepts_requests() || rep.infer.is_some() || rep.local.is_empty() {
            return Ok(());
        }
        let b_max = self.b_max_of(r);
        let pace = self.pace_for(r);
        let now = self.now();
        let (batch, dropped) = match self.policy {
            Policy::Greedy => greedy_batch(&mut self.replicas[r].local, now, pace, b_max),
            _ => (
                round_robin_batch(&mut self.replicas[r].local, b_max),
                Vec::new(),
            ),
        };
        for d in &dropped {
            self.drop_request(d);
        }
        let depth = self.replicas[r].local.len();
        let stream = self.stream_of(r).expect("stream");
        self.ledger.dispatch_log.push(DispatchRecord {
            time: now,
            replica: r,
            stream,
            b_target: b_max,
            b_actual: batch.len() as u32,
            queue_depth: depth,
        });
        let wb = &mut self.replicas[r].window_batch;
        wb.0 += batch.len() as f64;
        wb.1 += 1;
        if batch.is_empty() {
            return Ok(());
        }
        self.start_infer(r, batch)
    }

    fn drop_request(&mut self, req: &Request) {
        let now = self.now();
        let rec = &mut self.ledger.requests[req.id as usize];
        rec.outcome = Outcome::Dropped;
        rec.drop_time = Some(now);
        if let Some(st) = self.streams.get_mut(&req.stream_id) {
            st.waits.push(now - req.arrival);
        }
    }

    fn start_infer(&mut self, r: ReplicaId, batch: Vec<Request>) -> Result<()> {
        let now = self.now();
        let b = batch.len() as u32;
        let rep = &mut self.replicas[r];
        debug_assert!(rep.infer.is_none());
        let big_b = rep.train.map(|t| t.big_b).unwrap_or(0);
        let lat = true_infer_latency(
            &rep.profile,
            BatchConfig::new(big_b, b),
            &mut self.infer_rng,
        );
        let end = now + lat;
        rep.meter.record(now, end, rep.profile.infer_work(b));
        rep.infer = Some(InferInFlight {
            b,
            big_b,
            start: now,
            end,
        });
        let loss = rep.serve_loss;
        let state = rep.state;
        let model = rep.model;
        let mut waits = Vec::with_capacity(batch.len());
        for req in &batch {
            let rec = &mut self.ledger.requests[req.id as usize];
            rec.outcome = if end <= req.deadline {
                Outcome::Met
            } else {
                Outcome::Late
            };
            rec.replica = Some(r);
            rec.dispatch_time = Some(now);
            rec.completion = Some(end);
            rec.loss_at_serve = Some(loss);
            rec.replica_state = Some(state);
            waits.push(now - req.arrival);
        }
        if let Some(s) = self.replicas[r].stream {
            self.streams
                .get_mut(&s)
                .expect("stream")
                .waits
                .extend_from_slice(&waits);
        }
        if state == ReplicaState::Combined {
            if let Some(p) = self
                .families
                .get_mut(&model)
                .and_then(|f| f.process.as_mut())
            {
                for w in waits {
                    p.coord.observe_queue_latency(w);
                }
            }
        }
        self.q
            .schedule(end, EventKind::BatchComplete { replica: r })
    }

    fn on_batch_complete(&mut self, r: ReplicaId) -> Result<()> {
        let now = self.now();
        let f = self.replicas[r]
            .infer
            .take()
            .ok_or_else(|| Error::Internal(format!("replica {r} had no batch")))?;
        let lat = now - f.start;
        let rep = &self.replicas[r];
        let in_process = self.families[&rep.model]
            .process
            .as_ref()
            .is_some_and(|p| p.fl.active.contains(&r));
        if in_process && rep.state == ReplicaState::Combined {
            let p = self
                .families
                .get_mut(&rep.model)
                .and_then(|x| x.process.as_mut())
                .expect("checked");
            p.coord.observe_infer(f.b, f.big_b, lat);
        } else if rep.state == ReplicaState::Serving && f.big_b == 0 {
            if let Some(s) = rep.stream {
                self.streams
                    .get_mut(&s)
                    .expect("stream")
                    .samples
                    .push((f.b as f64, lat));
            }
        }
        if self.policy.uses_subflows() {
            let rep = &mut self.replicas[r];
            if rep.tick_pending {
                rep.tick_pending = false;
                rep.tick_scheduled = true;
                self.q
                    .schedule(now, EventKind::SubflowTick { replica: r })?;
            }
            Ok(())
        } else {
            self.try_start_baseline(r)
        }
    }

    fn on_tick(&mut self, r: ReplicaId) -> Result<()> {
        self.replicas[r].tick_scheduled = false;
        let Some(s) = self.stream_of(r) else {
            return Ok(());
        };
        let Some(fi) = self.flow_index(s, r) else {
            return Ok(());
        };
        if !self.replicas[r].state.accepts_requests() || !self.streams[&s].flows[fi].active {
            return Ok(());
        }
        if self.replicas[r].infer.is_some() {
            self.replicas[r].tick_pending = true;
            return Ok(());
        }
        let now = self.now();
        let slo_aware = self.sc.dispatcher.slo_aware_fetch && self.policy == Policy::Subflow;
        let stream = self.streams.get_mut(&s).expect("stream");
        let out = subflow_tick(&mut stream.flows[fi], &mut stream.queue, now, slo_aware);
        let depth = stream.queue.len();
        for d in &out.discarded {
            self.drop_request(d);
        }
        self.ledger.dispatch_log.push(DispatchRecord {
            time: now,
            replica: r,
            stream: s,
            b_target: out.b_target,
            b_actual: out.b_actual,
            queue_depth: depth,
        });
        let wb = &mut self.replicas[r].window_batch;
        wb.0 += out.b_actual as f64;
        wb.1 += 1;
        if !out.dispatched.is_empty() {
            self.start_infer(r, out.dispatched)?;
        }
        self.replicas[r].tick_scheduled = true;
        self.q.schedule(
            now + out.next_interval,
            EventKind::SubflowTick { replica: r },
        )
    }

    // ---- dispatcher cycles ----

    fn on_macro(&mut self, s: StreamId) -> Result<()> {
        let now = self.now();
        let model = self.streams[&s].spec.model;
        let tau = self.streams[&s].spec.slo;
        let st = &self.streams[&s];
        let mut res = macro_cycle(now, s, &st.samples, &st.waits, tau, &st.fit);
        let idle: Vec<ReplicaId> = self
            .replicas
            .iter()
            .filter(|x| x.model == model && x.state == ReplicaState::Idle)
            .map(|x| x.id)
            .collect();
        let promoted = overload_mitigation(
            &mut res,
            &idle,
            tau,
            self.sc.dispatcher.overload_reset_fraction,
        );
        if res.saturated {
            self.ledger.warnings.push(format!(
                "t={now:.1}: stream {} overloaded with no Idle replica to promote",
                s.0
            ));
        }
        {
            let st = self.streams.get_mut(&s).expect("stream");
            st.fit = res.model;
            st.b_max_serving = res.b_max.max(1);
            st.samples.clear();
            st.waits.clear();
        }
        if let Some(p) = promoted {
            self.set_state(p, ReplicaState::Serving, "overload")?;
        }
        let serving: Vec<ReplicaId> = self
            .replicas
            .iter()
            .filter(|x| x.stream == Some(s) && x.state == ReplicaState::Serving)
            .map(|x| x.id)
            .collect();
        let st = self.streams.get_mut(&s).expect("stream");
        let pace = Pace::from_univariate(&st.fit);
        let b_max = st.b_max_serving;
        for f in st
            .flows
            .iter_mut()
            .filter(|f| serving.contains(&f.replica_id))
        {
            f.set_b_max(b_max);
            f.pace = pace;
        }
        self.ledger.macro_log.push(res);
        self.q.schedule(
            now + self.sc.dispatcher.t_fit,
            EventKind::MacroCycle { stream: s },
        )
    }

    fn on_micro(&mut self, s: StreamId) -> Result<()> {
        let now = self.now();
        let model = self.streams[&s].spec.model;
        let qualities: BTreeMap<ReplicaId, f64> = match self.sc.dispatcher.priority_quality {
            PriorityQuality::Response => self
                .replicas
                .iter()
                .filter(|x| x.model == model)
                .map(|x| (x.id, 1.0 / x.serve_loss))
                .collect(),
            PriorityQuality::LauncherScore => self.families[&model]
                .qualities
                .iter()
                .map(|(k, v)| (*k, v.value()))
                .collect(),
        };
        let st = self.streams.get_mut(&s).expect("stream");
        let allocations = micro_cycle(
            &mut st.flows,
            &qualities,
            now,
            self.sc.dispatcher.t_adjust,
            self.sc.dispatcher.smoothing,
        );
        if !allocations.is_empty() {
            self.ledger.micro_log.push(MicroRecord {
                time: now,
                stream: s,
                allocations,
            });
        }
        self.q.schedule(
            now + self.sc.dispatcher.t_adjust,
            EventKind::MicroCycle { stream: s },
        )
    }

    // ---- state management ----

    fn on_scan(&mut self) -> Result<()> {
        let now = self.now();
        let scan = self.sc.state.scan_interval;
        for rep in &mut self.replicas {
            let util = rep
                .meter
                .utilization_sample(now, scan, rep.profile.capacity);
            rep.meter.forget_before(now - scan);
            self.ledger.utilization.push(UtilSample {
                time: now,
                replica: rep.id,
                state: rep.state,
                util,
            });
            if self.sc.launcher.enabled && rep.state == ReplicaState::Serving {
                let (sum, n) = rep.window_batch;
                let batch = if n == 0 { 0.0 } else { sum / n as f64 };
                let outstanding = rep.local.len() + rep.infer.map(|f| f.b as usize).unwrap_or(0);
                rep.stats.record(now, util, outstanding as f64, batch);
            }
            rep.window_batch = (0.0, 0);
        }
        if self.sc.launcher.enabled {
            let models: Vec<ModelId> = self.families.keys().copied().collect();
            for m in models {
                self.idle_transitions(m)?;
                self.launch_or_rollback(m)?;
            }
        }
        self.q.schedule(now + scan, EventKind::StateScan)
    }

    fn idle_transitions(&mut self, m: ModelId) -> Result<()> {
        let now = self.now();
        let serving: Vec<ReplicaId> = self
            .replicas
            .iter()
            .filter(|x| x.model == m && x.state == ReplicaState::Serving && x.stats.is_warm())
            .map(|x| x.id)
            .collect();
        let population: Vec<_> = serving
            .iter()
            .filter_map(|&r| self.replicas[r].stats.smoothed(now))
            .collect();
        let cfg = &self.sc.state;
        let Some(th) = compute_thresholds(&population, cfg.quantile, cfg.util_floor) else {
            return Ok(());
        };
        let mode = if self.policy.uses_subflows() {
            TransitionMode::Batch
        } else {
            TransitionMode::Queue
        };
        let going: Vec<ReplicaId> = serving
            .into_iter()
            .filter(|&r| {
                check_idle_transition(&self.replicas[r].stats, &th, mode, now)
                    == IdleCheck::Transition
            })
            .collect();
        for r in going {
            self.set_state(r, ReplicaState::Idle, "underutilized")?;
        }
        Ok(())
    }

    fn launch_or_rollback(&mut self, m: ModelId) -> Result<()> {
        let idle: Vec<(ReplicaId, QualityScore)> = self
            .replicas
            .iter()
            .filter(|x| x.model == m && x.state == ReplicaState::Idle)
            .map(|x| {
                (
                    x.id,
                    self.families[&m]
                        .qualities
                        .get(&x.id)
                        .copied()
                        .unwrap_or_default(),
                )
            })
            .collect();
        let plan = if self.families[&m].process.is_none() {
            scan_and_trigger(&idle, m)
        } else {
            None
        };
        match plan {
            Some(plan) => self.start_process(plan.participants.clone(), &plan),
            None => {
                let t_prime = self.sc.state.t_prime;
                for (r, _) in idle {
                    if tick_rollback(&mut self.replicas[r].stats, false, t_prime) {
                        self.set_state(r, ReplicaState::Serving, "rollback")?;
                    }
                }
                Ok(())
            }
        }
    }

    // ---- fine-tuning ----

    fn start_process(
        &mut self,
        participants: Vec<ReplicaId>,
        plan: &crate::launcher::RoundPlan,
    ) -> Result<()> {
        let now = self.now();
        let m = plan.model;
        let index = self.ledger.fl_processes.len();
        let server_profile = self.replicas[plan.server].profile;
        let fam = self.families.get_mut(&m).expect("family");
        let fl = FlProcess::start(plan, &fam.global, now);
        let mut coord = Coordinator::new(self.sc.coordinator, CoordModels::prior(&server_profile));
        let configs = coord.init_round(&participants);
        self.ledger.fl_processes.push(ProcessRecord {
            index,
            model: m,
            started_at: now,
            initial_loss: fam.global.state.loss,
            ended_at: None,
        });
        fam.process = Some(ActiveProcess {
            index,
            fl,
            coord,
            results: BTreeMap::new(),
            training: BTreeSet::new(),
            last_upload: now,
        });
        for &r in &participants {
            self.replicas[r].cfg = configs[&r];
            self.set_state(r, ReplicaState::Combined, "fine-tune")?;
        }
        self.q.schedule(
            now + self.sc.launcher.comm_delay,
            EventKind::RoundBoundary {
                model: m,
                phase: RoundPhase::Start,
            },
        )
    }

    fn on_round_start(&mut self, m: ModelId) -> Result<()> {
        let now = self.now();
        let steps = self.sc.launcher.steps_per_round;
        let fam = self.families.get_mut(&m).expect("family");
        let Some(p) = fam.process.as_mut() else {
            return Ok(());
        };
        let participants = p.fl.begin_round(now);
        p.results.clear();
        p.training = participants.iter().copied().collect();
        p.last_upload = now;
        for &r in &participants {
            self.replicas[r].serve_loss = fam.global.state.loss;
            self.replicas[r].client = Some(ClientWork {
                state: fam.global.state,
                adapter: fam.global.adapter.clone(),
                start_loss: fam.global.state.loss,
                steps_left: steps,
            });
        }
        for r in participants {
            self.start_train_step(r)?;
        }
        Ok(())
    }

    fn start_train_step(&mut self, r: ReplicaId) -> Result<()> {
        let now = self.now();
        let rep = &mut self.replicas[r];
        let big_b = rep.cfg.train_batch.max(1);
        let b = rep.infer.map(|f| f.b).unwrap_or(0);
        let lat = true_train_latency(
            &rep.profile,
            BatchConfig::new(big_b, b),
            &mut self.train_rng,
        );
        rep.meter
            .record(now, now + lat, rep.profile.train_work(big_b));
        rep.train = Some(TrainInFlight {
            big_b,
            b,
            start: now,
        });
        self.q
            .schedule(now + lat, EventKind::TrainStepComplete { replica: r })
    }

    fn on_train_step(&mut self, r: ReplicaId) -> Result<()> {
        let now = self.now();
        let comm = self.sc.launcher.comm_delay;
        let noise = self.sc.launcher.adapter_noise;
        let rep = &mut self.replicas[r];
        let step = rep
            .train
            .take()
            .ok_or_else(|| Error::Internal(format!("replica {r} had no train step")))?;
        let model = rep.model;
        let client = rep
            .client
            .as_mut()
            .ok_or_else(|| Error::Internal(format!("replica {r} is not a client")))?;
        let next = client.state.train_step(step.big_b, &mut self.conv_rng);
        let decrement = client.state.loss - next.loss;
        client.state = next;
        client.steps_left = client.steps_left.saturating_sub(1);
        let more = client.steps_left > 0;
        // Inference shares the weights being trained.
        rep.serve_loss = next.loss;
        let p = self
            .families
            .get_mut(&model)
            .and_then(|f| f.process.as_mut())
            .expect("process");
        p.coord
            .observe_train(step.big_b, step.b, now - step.start, decrement);
        if more {
            return self.start_train_step(r);
        }
        let mut work = self.replicas[r].client.take().expect("client");
        work.adapter.perturb(
            noise * (work.start_loss - work.state.loss),
            &mut self.adapter_rng,
        );
        p.results.insert(
            r,
            ClientResult {
                state: work.state,
                adapter: work.adapter,
            },
        );
        p.training.remove(&r);
        p.last_upload = p.last_upload.max(now + comm);
        if p.training.is_empty() {
            let at = p.last_upload;
            self.q.schedule(
                at,
                EventKind::RoundBoundary {
                    model,
                    phase: RoundPhase::Aggregate,
                },
            )?;
        }
        Ok(())
    }

    fn on_aggregate(&mut self, m: ModelId) -> Result<()> {
        let now = self.now();
        let fam = self.families.get_mut(&m).expect("family");
        let tau = fam.tau;
        let Some(p) = fam.process.as_mut() else {
            return Ok(());
        };
        let outcome =
            p.fl.finish_round(&p.results, &mut fam.global, &mut fam.qualities, now)?;
        p.results.clear();
        let decision = p.coord.end_round(fam.global.state.noise_scale(), tau)?;
        if decision
            .result
            .as_ref()
            .is_some_and(|r| r.inference_starved)
        {
            self.ledger.warnings.push(format!(
                "t={now:.1}: coordinator found no feasible inference batch"
            ));
        }
        self.ledger.coordinator_log.push(CoordinatorRecord {
            time: now,
            process: p.index,
            decision,
        });
        for &r in &outcome.round.participants {
            self.replicas[r].serve_loss = outcome.round.mean_loss;
        }
        for &r in &outcome.released {
            p.coord.remove(r);
        }
        let configs = p.coord.push_configs();
        let index = p.index;
        self.ledger.fl_rounds.push(outcome.round);
        if !outcome.continues {
            self.families.get_mut(&m).expect("family").process = None;
            self.ledger.fl_processes[index].ended_at = Some(now);
        }
        for r in outcome.released {
            self.replicas[r].client = None;
            if self.replicas[r].state == ReplicaState::Combined {
                self.set_state(r, ReplicaState::Serving, "released")?;
            }
        }
        if outcome.continues {
            for (r, cfg) in configs {
                self.replicas[r].cfg = cfg;
                if self.policy.uses_subflows() {
                    let pace = self.pace_for(r);
                    if let Some(s) = self.stream_of(r) {
                        if let Some(i) = self.flow_index(s, r) {
                            let f = &mut self.streams.get_mut(&s).expect("stream").flows[i];
                            f.set_b_max(cfg.infer_batch.max(1));
                            f.pace = pace;
                        }
                    }
                }
            }
            self.q.schedule(
                now + self.sc.launcher.comm_delay,
                EventKind::RoundBoundary {
                    model: m,
                    phase: RoundPhase::Start,
                },
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut q = EventQueue::new();
        q.schedule(2.0, EventKind::StateScan).unwrap();
        q.schedule(1.0, EventKind::BatchComplete { replica: 1 })
            .unwrap();
        q.schedule(1.0, EventKind::BatchComplete { replica: 0 })
            .unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().unwrap())
            .map(|e| (e.time, e.seq))
            .collect();
        assert_eq!(order, vec![(1.0, 1), (1.0, 2), (2.0, 0)]);
    }

    #[test]
    fn scheduling_in_the_past_is_fatal() {
        let mut q = EventQueue::new();
        q.schedule(5.0, EventKind::StateScan).unwrap();
        q.pop().unwrap();
        assert!(matches!(
            q.schedule(4.0, EventKind::StateScan),
            Err(Error::Internal(_))
        ));
        assert!(q.schedule(5.0, EventKind::StateScan).is_ok());
    }
}
