//! Fine-tune task launcher: round triggering, server choice, FedAvg of
//! low-rank adapters, quality scores and per-replica early stopping.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::convergence::TrainState;
use crate::domain::{ModelId, QualityScore, ReplicaId};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Minimum number of Idle replicas of one model that starts a process.
pub const MIN_PARTICIPANTS: usize = 3;
/// Lower bound applied to quality scores.
pub const QUALITY_FLOOR: f64 = 1e-3;
/// Relative loss reduction below which a replica stops fine-tuning.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LauncherConfig {
    pub enabled: bool,
    pub steps_per_round: u32,
    /// Seconds charged for the broadcast and again for the upload.
    pub comm_delay: f64,
    pub adapter_d: usize,
    pub adapter_r: usize,
    pub adapter_l: usize,
    /// Spread of the per-round adapter perturbation per unit of loss drop.
    pub adapter_noise: f64,
}

impl Default for LauncherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            steps_per_round: 50,
            comm_delay: 0.5,
            adapter_d: 64,
            adapter_r: 8,
            adapter_l: 64,
            adapter_noise: 0.1,
        }
    }
}

impl LauncherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_round == 0
            || !(self.comm_delay >= 0.0)
            || self.adapter_d == 0
            || self.adapter_r == 0
            || self.adapter_l == 0
            || !(self.adapter_noise >= 0.0)
        {
            return Err(Error::Config(
                "launcher: steps_per_round >= 1, comm_delay >= 0, adapter dims >= 1, adapter_noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Low-rank adapter pair: `b_mat` is d x r and `a_mat` is r x l, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub d: usize,
    pub r: usize,
    pub l: usize,
    pub b_mat: Vec<f64>,
    pub a_mat: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(d: usize, r: usize, l: usize) -> Self {
        Self {
            d,
            r,
            l,
            b_mat: vec![0.0; d * r],
            a_mat: vec![0.0; r * l],
        }
    }

    pub fn random(d: usize, r: usize, l: usize, scale: f64, rng: &mut SimRng) -> Self {
        let mut a = Self::zeros(d, r, l);
        a.perturb(scale, rng);
        a
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d, self.r, self.l)
    }

    fn is_consistent(&self) -> bool {
        self.b_mat.len() == self.d * self.r && self.a_mat.len() == self.r * self.l
    }

    /// Add independent `N(0, scale)` noise to every entry.
    pub fn perturb(&mut self, scale: f64, rng: &mut SimRng) {
        if scale <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, scale).expect("scale checked");
        for x in self.b_mat.iter_mut().chain(self.a_mat.iter_mut()) {
            *x += n.sample(rng);
        }
    }

    /// Largest absolute entry across both matrices.
    pub fn max_abs(&self) -> f64 {
        self.b_mat
            .iter()
            .chain(&self.a_mat)
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Unweighted element-wise mean of the B matrices and of the A matrices.
pub fn fedavg(clients: &[AdapterParams]) -> Result<AdapterParams> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Config("fedavg needs at least one adapter".into()))?;
    let expected = first.shape();
    for (i, c) in clients.iter().enumerate() {
        if c.shape() != expected || !c.is_consistent() {
            return Err(Error::Aggregation {
                client: i,
                expected,
                found: c.shape(),
            });
        }
    }
    if clients.len() == 1 {
        return Ok(first.clone());
    }
    let k = clients.len() as f64;
    let mut out = AdapterParams::zeros(expected.0, expected.1, expected.2);
    for c in clients {
        for (o, x) in out.b_mat.iter_mut().zip(&c.b_mat) {
            *o += x;
        }
        for (o, x) in out.a_mat.iter_mut().zip(&c.a_mat) {
            *o += x;
        }
    }
    for o in out.b_mat.iter_mut().chain(out.a_mat.iter_mut()) {
        *o /= k;
    }
    Ok(out)
}

/// Multiplicative quality update from the previous and current mean loss,
/// floored at [`QUALITY_FLOOR`].
pub fn update_quality(score: QualityScore, f_prev: f64, f_curr: f64) -> Result<QualityScore> {
    if !(f_prev > 0.0) {
        return Err(Error::Guard(format!(
            "previous loss must be positive, got {f_prev}"
        )));
    }
    let q = score.value() * (f_prev - f_curr) / f_prev;
    Ok(QualityScore(if q.is_nan() {
        QUALITY_FLOOR
    } else {
        q.max(QUALITY_FLOOR)
    }))
}

/// True when the loss failed to drop by more than the relative tolerance.
pub fn early_stop_check(prev_loss: f64, curr_loss: f64) -> bool {
    prev_loss - curr_loss <= EARLY_STOP_TOLERANCE * prev_loss
}

/// Participants and server chosen for a new process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub model: ModelId,
    pub participants: Vec<ReplicaId>,
    pub server: ReplicaId,
}

/// Start a process when at least three Idle replicas serve `model`. The
/// server has the highest quality score, ties going to the lowest id.
pub fn scan_and_trigger(idle: &[(ReplicaId, QualityScore)], model: ModelId) -> Option<RoundPlan> {
    if idle.len() < MIN_PARTICIPANTS {
        return None;
    }
    let mut participants: Vec<ReplicaId> = idle.iter().map(|p| p.0).collect();
    participants.sort_unstable();
    let mut best: Option<(ReplicaId, f64)> = None;
    for &(id, q) in idle {
        best = match best {
            Some((bid, bq)) if bq > q.value() || (bq == q.value() && bid < id) => Some((bid, bq)),
            _ => Some((id, q.value())),
        };
    }
    Some(RoundPlan {
        model,
        participants,
        server: best?.0,
    })
}

/// The shared model of one family: what a client receives on broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub state: TrainState,
    pub adapter: AdapterParams,
}

/// One completed (or in-progress) federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLRound {
    pub model: ModelId,
    pub round_index: u32,
    pub participants: Vec<ReplicaId>,
    pub server: ReplicaId,
    pub start_time: f64,
    pub end_time: f64,
    pub client_losses: BTreeMap<ReplicaId, f64>,
    pub mean_loss: f64,
    pub quality_scores: BTreeMap<ReplicaId, f64>,
    /// Participants removed mid-round.
    pub withdrawn: Vec<ReplicaId>,
    /// Participants leaving after this round because their loss stalled.
    pub early_stopped: Vec<ReplicaId>,
    pub global_adapter_max_abs: f64,
}

/// What a client hands back at the end of its local steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub state: TrainState,
    pub adapter: AdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: FLRound,
    /// Replicas that leave the process and return to Serving.
    pub released: Vec<ReplicaId>,
    /// False when the process is over.
    pub continues: bool,
}

/// A federated fine-tuning process over a fixed set of replicas of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlProcess {
    pub model: ModelId,
    pub server: ReplicaId,
    /// Replicas still training.
    pub active: BTreeSet<ReplicaId>,
    pub round_index: u32,
    pub started_at: f64,
    /// Global mean loss when the process started.
    pub initial_loss: f64,
    /// Global mean loss after the latest round.
    pub last_mean_loss: f64,
    prev_local: BTreeMap<ReplicaId, f64>,
    withdrawn_this_round: Vec<ReplicaId>,
    round_start: f64,
    pub rounds: Vec<FLRound>,
}

impl FlProcess {
    pub fn start(plan: &RoundPlan, global: &GlobalModel, now: f64) -> Self {
        Self {
            model: plan.model,
            server: plan.server,
            active: plan.participants.iter().copied().collect(),
            round_index: 0,
            started_at: now,
            initial_loss: global.state.loss,
            last_mean_loss: global.state.loss,
            prev_local: plan
                .participants
                .iter()
                .map(|&p| (p, global.state.loss))
                .collect(),
            withdrawn_this_round: Vec::new(),
            round_start: now,
            rounds: Vec::new(),
        }
    }

    /// Open the next round; returns its participants.
    pub fn begin_round(&mut self, now: f64) -> Vec<ReplicaId> {
        self.round_index += 1;
        self.round_start = now;
        self.withdrawn_this_round.clear();
        self.active.iter().copied().collect()
    }

    /// Remove a participant mid-round (e.g. promoted to serve load).
    pub fn withdraw(&mut self, replica: ReplicaId) -> bool {
        if self.active.remove(&replica) {
            self.withdrawn_this_round.push(replica);
            self.prev_local.remove(&replica);
            true
        } else {
            false
        }
    }

    /// Aggregate the uploaded client results into `global`, update quality
    /// scores, and decide who keeps training.
    pub fn finish_round(
        &mut self,
        results: &BTreeMap<ReplicaId, ClientResult>,
        global: &mut GlobalModel,
        qualities: &mut BTreeMap<ReplicaId, QualityScore>,
        now: f64,
    ) -> Result<RoundOutcome> {
        let reporting: Vec<ReplicaId> = self
            .active
            .iter()
            .copied()
            .filter(|id| results.contains_key(id))
            .collect();
        if reporting.is_empty() {
            let released: Vec<ReplicaId> = std::mem::take(&mut self.active).into_iter().collect();
            return Ok(RoundOutcome {
                round: self.empty_round(now),
                released,
                continues: false,
            });
        }
        let adapters: Vec<AdapterParams> = reporting
            .iter()
            .map(|id| results[id].adapter.clone())
            .collect();
        let adapter = fedavg(&adapters)?;
        let client_losses: BTreeMap<ReplicaId, f64> = reporting
            .iter()
            .map(|&id| (id, results[&id].state.loss))
            .collect();
        let mean_loss = client_losses.values().sum::<f64>() / client_losses.len() as f64;

        let prev_mean = self.last_mean_loss;
        for &id in &reporting {
            let q = qualities.entry(id).or_default();
            *q = update_quality(*q, prev_mean, mean_loss)?;
        }

        let mut early_stopped = Vec::new();
        for &id in &reporting {
            let prev = self.prev_local.get(&id).copied().unwrap_or(prev_mean);
            if early_stop_check(prev, client_losses[&id]) {
                early_stopped.push(id);
            }
            self.prev_local.insert(id, client_losses[&id]);
        }
        for id in &early_stopped {
            self.active.remove(id);
        }

        global.adapter = adapter;
        // The aggregated model sits at the clients' mean loss.
        let reference = results[&reporting[0]].state;
        global.state = TrainState {
            loss: mean_loss,
            last_decrement: (prev_mean - mean_loss).max(0.0),
            ..reference
        };
        self.last_mean_loss = mean_loss;

        let round = FLRound {
            model: self.model,
            round_index: self.round_index,
            participants: reporting.clone(),
            server: self.server,
            start_time: self.round_start,
            end_time: now,
            client_losses,
            mean_loss,
            quality_scores: reporting
                .iter()
                .map(|id| (*id, qualities[id].value()))
                .collect(),
            withdrawn: self.withdrawn_this_round.clone(),
            early_stopped: early_stopped.clone(),
            global_adapter_max_abs: global.adapter.max_abs(),
        };
        self.rounds.push(round.clone());

        let mut released = early_stopped;
        let continues = self.active.len() >= MIN_PARTICIPANTS;
        if !continues {
            released.extend(std::mem::take(&mut self.active));
            released.sort_unstable();
        }
        Ok(RoundOutcome {
            round,
            released,
            continues,
        })
    }

    fn empty_round(&self, now: f64) -> FLRound {
        FLRound {
            model: self.model,
            round_index: self.round_index,
            participants: Vec::new(),
            server: self.server,
            start_time: self.round_start,
            end_time: now,
            client_losses: BTreeMap::new(),
            mean_loss: self.last_mean_loss,
            quality_scores: BTreeMap::new(),
            withdrawn: self.withdrawn_this_round.clone(),
            early_stopped: Vec::new(),
            global_adapter_max_abs: 0.0,
        }
    }
}

/// Local training of one client for one round, with the adapter nudged in
/// proportion to the loss drop.
pub fn local_train(
    global: &GlobalModel,
    batch: u32,
    steps: u32,
    adapter_noise: f64,
    train_rng: &mut SimRng,
    adapter_rng: &mut SimRng,
) -> ClientResult {
    let mut state = global.state;
    for _ in 0..steps {
        state = state.train_step(batch.max(1), train_rng);
    }
    let mut adapter = global.adapter.clone();
    adapter.perturb(
        adapter_noise * (global.state.loss - state.loss),
        adapter_rng,
    );
    ClientResult { state, adapter }
}

/// Run one whole round synchronously: broadcast, local steps, upload,
/// aggregate. Communication delay is charged twice.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    process: &mut FlProcess,
    global: &mut GlobalModel,
    qualities: &mut BTreeMap<ReplicaId, QualityScore>,
    batches: &BTreeMap<ReplicaId, u32>,
    cfg: &LauncherConfig,
    now: f64,
    step_time: f64,
    train_rng: &mut SimRng,
    adapter_rng: &mut SimRng,
) -> Result<RoundOutcome> {
    let participants = process.begin_round(now);
    let results: BTreeMap<ReplicaId, ClientResult> = participants
        .iter()
        .map(|&id| {
            let b = batches.get(&id).copied().unwrap_or(1);
            (
                id,
                local_train(
                    global,
                    b,
                    cfg.steps_per_round,
                    cfg.adapter_noise,
                    train_rng,
                    adapter_rng,
                ),
            )
        })
        .collect();
    let end = now + 2.0 * cfg.comm_delay + step_time * cfg.steps_per_round as f64;
    process.finish_round(&results, global, qualities, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convergence::ConvergenceParams;
    use crate::rng;
    use proptest::prelude::*;

    fn q(v: f64) -> QualityScore {
        QualityScore(v)
    }

    #[test]
    fn trigger_rules() {
        assert_eq!(
            scan_and_trigger(&[(0, q(1.0)), (1, q(1.0))], ModelId(0)),
            None
        );
        let p = scan_and_trigger(&[(0, q(1.0)), (1, q(1.2)), (2, q(0.9))], ModelId(0)).unwrap();
        assert_eq!(p.server, 1);
        assert_eq!(p.participants, vec![0, 1, 2]);
        let tie = scan_and_trigger(
            &[(5, q(1.0)), (2, q(1.0)), (3, q(0.5)), (7, q(0.2))],
            ModelId(0),
        )
        .unwrap();
        assert_eq!(tie.server, 2);
    }

    fn adapter(b: &[f64], a: &[f64]) -> AdapterParams {
        AdapterParams {
            d: b.len(),
            r: 1,
            l: a.len(),
            b_mat: b.to_vec(),
            a_mat: a.to_vec(),
        }
    }

    #[test]
    fn fedavg_fixtures() {
        let one = adapter(&[1.5, -2.0], &[0.25]);
        assert_eq!(fedavg(std::slice::from_ref(&one)).unwrap(), one);
        let mid = fedavg(&[adapter(&[0.0, 1.0], &[4.0]), adapter(&[2.0, 1.0], &[0.0])]).unwrap();
        assert_eq!(mid.b_mat, vec![1.0, 1.0]);
        assert_eq!(mid.a_mat, vec![2.0]);
        let same = vec![one.clone(); 5];
        let avg = fedavg(&same).unwrap();
        for (x, y) in avg.b_mat.iter().zip(&one.b_mat) {
            assert!((x - y).abs() < 1e-12);
        }
        let bad = fedavg(&[one.clone(), adapter(&[1.0], &[1.0])]);
        assert!(matches!(bad, Err(Error::Aggregation { client: 1, .. })));
        assert!(fedavg(&[]).is_err());
    }

    #[test]
    fn quality_fixtures() {
        assert!((update_quality(q(1.0), 2.0, 1.0).unwrap().value() - 0.5).abs() < 1e-12);
        assert_eq!(
            update_quality(q(1.0), 2.0, 2.0).unwrap().value(),
            QUALITY_FLOOR
        );
        assert!((update_quality(q(0.5), 1.0, 0.9).unwrap().value() - 0.05).abs() < 1e-12);
        assert_eq!(
            update_quality(q(1.0), 1.0, 1.5).unwrap().value(),
            QUALITY_FLOOR
        );
        assert!(matches!(
            update_quality(q(1.0), 0.0, 1.0),
            Err(Error::Guard(_))
        ));
    }

    #[test]
    fn early_stop_fixtures() {
        assert!(early_stop_check(1.0, 1.0));
        assert!(!early_stop_check(1.0, 0.9));
        assert!(early_stop_check(1.0, 0.99995));
    }

    fn global() -> GlobalModel {
        GlobalModel {
            state: ConvergenceParams {
                step_noise: 0.0,
                ..Default::default()
            }
            .initial_state(),
            adapter: AdapterParams::random(8, 2, 8, 0.1, &mut rng::stream(0, 8)),
        }
    }

    #[test]
    fn noise_free_round_lowers_mean_loss() {
        let mut g = global();
        let plan = scan_and_trigger(&[(0, q(1.0)), (1, q(1.0)), (2, q(1.0))], ModelId(0)).unwrap();
        let mut p = FlProcess::start(&plan, &g, 0.0);
        let mut qs = BTreeMap::new();
        let batches: BTreeMap<_, _> = [(0, 4), (1, 8), (2, 16)].into_iter().collect();
        let cfg = LauncherConfig::default();
        let (mut tr, mut ad) = (rng::stream(0, 6), rng::stream(0, 8));
        let before = g.state.loss;
        let out = run_round(
            &mut p, &mut g, &mut qs, &batches, &cfg, 0.0, 0.3, &mut tr, &mut ad,
        )
        .unwrap();
        assert!(out.round.mean_loss < before);
        assert!(out.continues);
        assert_eq!(out.round.client_losses.len(), 3);
        assert!((out.round.end_time - (1.0 + 15.0)).abs() < 1e-12);
        let second = run_round(
            &mut p, &mut g, &mut qs, &batches, &cfg, 20.0, 0.3, &mut tr, &mut ad,
        )
        .unwrap();
        assert!(second.round.mean_loss < out.round.mean_loss);
        // identical losses give that loss as the mean
        assert!((g.state.loss - second.round.mean_loss).abs() < 1e-15);
    }

    #[test]
    fn withdrawal_degrades_aggregation() {
        let mut g = global();
        let plan = RoundPlan {
            model: ModelId(0),
            participants: vec![0, 1, 2],
            server: 0,
        };
        let mut p = FlProcess::start(&plan, &g, 0.0);
        let parts = p.begin_round(0.0);
        let results: BTreeMap<_, _> = parts
            .iter()
            .map(|&id| {
                (
                    id,
                    local_train(
                        &g,
                        8,
                        10,
                        0.1,
                        &mut rng::stream(id as u64, 6),
                        &mut rng::stream(id as u64, 8),
                    ),
                )
            })
            .collect();
        assert!(p.withdraw(1));
        let mut qs = BTreeMap::new();
        let out = p.finish_round(&results, &mut g, &mut qs, 5.0).unwrap();
        assert_eq!(out.round.participants, vec![0, 2]);
        assert_eq!(out.round.withdrawn, vec![1]);
        // two left, below the trigger size: everyone is released
        assert!(!out.continues);
        assert_eq!(out.released, vec![0, 2]);
        assert!(p.active.is_empty());
    }

    #[test]
    fn stopped_replicas_leave_the_process() {
        let mut g = global();
        g.state.loss = g.state.asymptote_loss; // nothing left to learn
        let plan = RoundPlan {
            model: ModelId(0),
            participants: vec![0, 1, 2, 3],
            server: 0,
        };
        let mut p = FlProcess::start(&plan, &g, 0.0);
        let mut qs = BTreeMap::new();
        let cfg = LauncherConfig::default();
        let out = run_round(
            &mut p,
            &mut g,
            &mut qs,
            &BTreeMap::new(),
            &cfg,
            0.0,
            0.2,
            &mut rng::stream(0, 6),
            &mut rng::stream(0, 8),
        )
        .unwrap();
        assert_eq!(out.round.early_stopped, vec![0, 1, 2, 3]);
        assert!(!out.continues);
        assert!(p.active.is_empty());
        assert!(qs.values().all(|v| v.value() == QUALITY_FLOOR));
    }

    fn arb_adapters() -> impl Strategy<Value = Vec<AdapterParams>> {
        (1usize..4, 1usize..3, 1usize..4, 1usize..6).prop_flat_map(|(d, r, l, k)| {
            prop::collection::vec(
                (
                    prop::collection::vec(-10.0f64..10.0, d * r),
                    prop::collection::vec(-10.0f64..10.0, r * l),
                )
                    .prop_map(move |(b, a)| AdapterParams {
                        d,
                        r,
                        l,
                        b_mat: b,
                        a_mat: a,
                    }),
                k,
            )
        })
    }

    proptest! {
        #[test]
        fn fedavg_is_permutation_invariant_and_bounded(set in arb_adapters(), rot in 0usize..6) {
            let avg = fedavg(&set).unwrap();
            let mut rotated = set.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            rotated.reverse();
            let other = fedavg(&rotated).unwrap();
            for (x, y) in avg.b_mat.iter().zip(&other.b_mat).chain(avg.a_mat.iter().zip(&other.a_mat)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let bound = set.iter().map(AdapterParams::max_abs).fold(0.0, f64::max);
            prop_assert!(avg.max_abs() <= bound + 1e-12);
        }
    }
}
