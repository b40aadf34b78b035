//! Inference-training coordinator: fits bivariate latency models from the
//! observations of one fine-tuning process and grid-searches the batch pair
//! `(B, b)` that maximizes training goodput under the inference SLO.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{floor_tol, BatchConfig, ReplicaId};
use crate::error::{Error, Result};
use crate::fit::{fit_bivariate, LatencyModel};
use crate::perf::ReplicaPerfProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorConfig {
    /// Weight `a` of the gradient-noise term in the efficiency model.
    pub scale_a: f64,
    pub initial_train_batch: u32,
    pub initial_infer_batch: u32,
    pub b_cap: u32,
    pub retention_rounds: u32,
    /// Training steps observed before the first optimization.
    pub warmup_steps: u64,
    /// Smoothing factor of the per-step loss-decrement EWMA.
    pub decrement_smoothing: f64,
    /// Pin `(B, b)` instead of optimizing.
    pub fixed: Option<(u32, u32)>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            scale_a: 100.0,
            initial_train_batch: 4,
            initial_infer_batch: 12,
            b_cap: 64,
            retention_rounds: 3,
            warmup_steps: 50,
            decrement_smoothing: 0.1,
            fixed: None,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed_ok = self.fixed.is_none_or(|(b, i)| b >= 1 && i >= 1);
        if !(self.scale_a > 0.0)
            || self.initial_train_batch == 0
            || self.b_cap == 0
            || self.retention_rounds == 0
            || !(self.decrement_smoothing > 0.0 && self.decrement_smoothing <= 1.0)
            || !fixed_ok
        {
            return Err(Error::Config(
                "coordinator: scale_a > 0, initial_train_batch >= 1, b_cap >= 1, retention_rounds >= 1, \
                 0 < decrement_smoothing <= 1, fixed batches >= 1"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Inputs of the statistical-efficiency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyParams {
    pub scale_a: f64,
    pub initial_batch: f64,
    pub grad_noise: f64,
    pub loss_reduction: f64,
}

/// Training samples per second.
pub fn throughput(big_b: u32, t_train: f64) -> Result<f64> {
    if !(t_train > 0.0) {
        return Err(Error::Guard(format!(
            "training iteration time must be positive, got {t_train}"
        )));
    }
    Ok(big_b as f64 / t_train)
}

/// `(a p l + B0) / (a p l + B)`.
pub fn efficiency(p: &EfficiencyParams, big_b: u32) -> f64 {
    let w = p.scale_a * p.grad_noise * p.loss_reduction;
    (w + p.initial_batch) / (w + big_b as f64)
}

/// Fitted training (x1 = B, x2 = b) and inference (x1 = b, x2 = B) models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordModels {
    pub train: LatencyModel,
    pub infer: LatencyModel,
}

impl CoordModels {
    pub fn prior(profile: &ReplicaPerfProfile) -> Self {
        Self {
            train: LatencyModel::prior(
                profile.alpha_train,
                profile.beta_train,
                profile.gamma_train,
            ),
            infer: LatencyModel::prior(
                profile.alpha_infer,
                profile.beta_infer,
                profile.gamma_infer,
            ),
        }
    }
}

/// Training goodput: throughput under the predicted step time, times efficiency.
pub fn goodput(p: &EfficiencyParams, models: &CoordModels, big_b: u32, b: u32) -> Result<f64> {
    if big_b == 0 {
        return Ok(0.0);
    }
    let t = models.train.predict(big_b as f64, b as f64);
    if !(t > 0.0) {
        return Err(Error::Guard(format!(
            "predicted training time {t} is not positive"
        )));
    }
    Ok(throughput(big_b, t)? * efficiency(p, big_b))
}

/// Largest `b` with `alpha b + beta B + gamma <= tau'`, or 0.
pub fn max_feasible_b(infer: &LatencyModel, big_b: u32, tau_prime: f64) -> u32 {
    if !(infer.alpha > 0.0) {
        return 0;
    }
    let b = floor_tol((tau_prime - infer.gamma - infer.beta * big_b as f64) / infer.alpha);
    if b <= 0.0 {
        0
    } else {
        b.min(u32::MAX as f64) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub train_batch: u32,
    pub infer_batch: u32,
    pub goodput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub train_batch: u32,
    pub infer_batch: u32,
    pub goodput: f64,
    /// No `B` leaves room for any inference within the budget.
    pub inference_starved: bool,
    pub sweep: Vec<SweepPoint>,
}

/// Exhaustive sweep of `B` in `1..=b_cap`, pairing each with its largest
/// feasible `b`. Ties go to the smaller `B`.
pub fn optimize(
    p: &EfficiencyParams,
    models: &CoordModels,
    tau_prime: f64,
    b_cap: u32,
) -> Result<OptimizeResult> {
    let mut sweep = Vec::with_capacity(b_cap as usize);
    let mut best: Option<SweepPoint> = None;
    let mut best_ignoring_b: Option<SweepPoint> = None;
    for big_b in 1..=b_cap.max(1) {
        let b = max_feasible_b(&models.infer, big_b, tau_prime);
        let g = goodput(p, models, big_b, b)?;
        let point = SweepPoint {
            train_batch: big_b,
            infer_batch: b,
            goodput: g,
        };
        sweep.push(point);
        if best_ignoring_b.is_none_or(|x| g > x.goodput) {
            best_ignoring_b = Some(point);
        }
        if b >= 1 && best.is_none_or(|x| g > x.goodput) {
            best = Some(point);
        }
    }
    let (chosen, starved) = match best {
        Some(pt) => (pt, false),
        None => (best_ignoring_b.expect("b_cap >= 1"), true),
    };
    Ok(OptimizeResult {
        train_batch: chosen.train_batch,
        infer_batch: chosen.infer_batch,
        goodput: chosen.goodput,
        inference_starved: starved,
        sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Obs {
    round: u32,
    x1: f64,
    x2: f64,
    y: f64,
}

/// Observations of the recent rounds of one process.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    train: VecDeque<Obs>,
    infer: VecDeque<Obs>,
    queue_latency_sum: f64,
    queue_latency_count: u64,
}

impl RoundStats {
    fn evict_before(&mut self, round: u32) {
        self.train.retain(|o| o.round >= round);
        self.infer.retain(|o| o.round >= round);
    }

    pub fn train_samples(&self) -> Vec<(f64, f64, f64)> {
        self.train.iter().map(|o| (o.x1, o.x2, o.y)).collect()
    }

    pub fn infer_samples(&self) -> Vec<(f64, f64, f64)> {
        self.infer.iter().map(|o| (o.x1, o.x2, o.y)).collect()
    }

    pub fn mean_queue_latency(&self) -> f64 {
        if self.queue_latency_count == 0 {
            0.0
        } else {
            self.queue_latency_sum / self.queue_latency_count as f64
        }
    }
}

/// Configuration decision for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDecision {
    pub round: u32,
    pub tau_prime: f64,
    pub params: EfficiencyParams,
    pub models: CoordModels,
    pub result: Option<OptimizeResult>,
    pub configs: BTreeMap<ReplicaId, BatchConfig>,
}

/// One coordinator per fine-tuning process.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinator {
    pub cfg: CoordinatorConfig,
    pub models: CoordModels,
    pub stats: RoundStats,
    pub configs: BTreeMap<ReplicaId, BatchConfig>,
    round: u32,
    steps_observed: u64,
    decrement_ewma: Option<f64>,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig, prior: CoordModels) -> Self {
        Self {
            cfg,
            models: prior,
            stats: RoundStats::default(),
            configs: BTreeMap::new(),
            round: 0,
            steps_observed: 0,
            decrement_ewma: None,
        }
    }

    /// Starting configuration for replicas entering Combined.
    pub fn init_round(&mut self, replicas: &[ReplicaId]) -> BTreeMap<ReplicaId, BatchConfig> {
        let (big_b, b) = self
            .cfg
            .fixed
            .unwrap_or((self.cfg.initial_train_batch, self.cfg.initial_infer_batch));
        for &r in replicas {
            self.configs.insert(
                r,
                BatchConfig {
                    train_batch: big_b,
                    infer_batch: b,
                },
            );
        }
        self.configs.clone()
    }

    pub fn ready_to_optimize(&self) -> bool {
        self.steps_observed >= self.cfg.warmup_steps
    }

    pub fn observe_train(&mut self, big_b: u32, b: u32, t: f64, decrement: f64) {
        self.stats.train.push_back(Obs {
            round: self.round,
            x1: big_b as f64,
            x2: b as f64,
            y: t,
        });
        self.steps_observed += 1;
        let s = self.cfg.decrement_smoothing;
        self.decrement_ewma = Some(match self.decrement_ewma {
            None => decrement,
            Some(prev) => (1.0 - s) * prev + s * decrement,
        });
    }

    pub fn observe_infer(&mut self, b: u32, big_b: u32, t: f64) {
        self.stats.infer.push_back(Obs {
            round: self.round,
            x1: b as f64,
            x2: big_b as f64,
            y: t,
        });
    }

    pub fn observe_queue_latency(&mut self, wait: f64) {
        self.stats.queue_latency_sum += wait;
        self.stats.queue_latency_count += 1;
    }

    pub fn loss_reduction(&self) -> f64 {
        self.decrement_ewma.unwrap_or(0.0).max(0.0)
    }

    /// Refit both models, keeping the previous one when a fit fails or is
    /// implausible. A degraded fit keeps the previous cross term.
    pub fn refit(&mut self) {
        self.models.train = refit_one(&self.stats.train_samples(), self.models.train);
        self.models.infer = refit_one(&self.stats.infer_samples(), self.models.infer);
    }

    /// Close a round: refit, optimize with `tau' = tau - mean queue latency`,
    /// and return the configurations to push.
    pub fn end_round(&mut self, grad_noise: f64, tau: f64) -> Result<RoundDecision> {
        self.refit();
        let tau_prime = tau - self.stats.mean_queue_latency();
        let params = EfficiencyParams {
            scale_a: self.cfg.scale_a,
            initial_batch: self.cfg.initial_train_batch as f64,
            grad_noise: grad_noise.max(0.0),
            loss_reduction: self.loss_reduction(),
        };
        let mut result = None;
        if self.cfg.fixed.is_none() && self.ready_to_optimize() {
            let r = optimize(&params, &self.models, tau_prime, self.cfg.b_cap)?;
            for c in self.configs.values_mut() {
                *c = BatchConfig {
                    train_batch: r.train_batch,
                    infer_batch: r.infer_batch,
                };
            }
            result = Some(r);
        }
        let decision = RoundDecision {
            round: self.round,
            tau_prime,
            params,
            models: self.models,
            result,
            configs: self.configs.clone(),
        };
        self.round += 1;
        self.stats.queue_latency_sum = 0.0;
        self.stats.queue_latency_count = 0;
        let keep_from = self.round.saturating_sub(self.cfg.retention_rounds);
        self.stats.evict_before(keep_from);
        Ok(decision)
    }

    /// Configurations for the replicas still in the process.
    pub fn push_configs(&self) -> Vec<(ReplicaId, BatchConfig)> {
        self.configs.iter().map(|(r, c)| (*r, *c)).collect()
    }

    pub fn remove(&mut self, replica: ReplicaId) {
        self.configs.remove(&replica);
    }
}

fn refit_one(samples: &[(f64, f64, f64)], previous: LatencyModel) -> LatencyModel {
    let Ok(mut m) = fit_bivariate(samples) else {
        return previous;
    };
    if m.degraded {
        // Only x1 varied; keep the known cross term and shift the intercept
        // so predictions at the observed x2 are unchanged.
        let x2 = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
        m.gamma -= previous.beta * x2;
        m.beta = previous.beta;
    }
    let plausible = m.alpha > 0.0 && m.beta >= 0.0 && m.gamma.is_finite() && m.gamma > -m.alpha;
    if plausible {
        m
    } else {
        previous
    }
}

/// Sweep rows for CSV output.
pub fn sweep_csv_rows(process: usize, decision: &RoundDecision) -> Vec<[String; 6]> {
    decision
        .result
        .iter()
        .flat_map(|r| {
            r.sweep.iter().map(move |p| {
                [
                    process.to_string(),
                    decision.round.to_string(),
                    format!("{:.6}", decision.tau_prime),
                    p.train_batch.to_string(),
                    p.infer_batch.to_string(),
                    format!("{:.9}", p.goodput),
                ]
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(p: f64, l: f64) -> EfficiencyParams {
        EfficiencyParams {
            scale_a: 10.0,
            initial_batch: 4.0,
            grad_noise: p,
            loss_reduction: l,
        }
    }

    fn models(at: f64, bt: f64, gt: f64, ai: f64, bi: f64, gi: f64) -> CoordModels {
        CoordModels {
            train: LatencyModel::prior(at, bt, gt),
            infer: LatencyModel::prior(ai, bi, gi),
        }
    }

    #[test]
    fn throughput_and_efficiency_fixtures() {
        assert!((throughput(8, 2.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(throughput(0, 1.0).unwrap(), 0.0);
        assert!(throughput(4, 0.0).is_err());
        assert!((throughput(16, 2.0).unwrap() - 2.0 * throughput(8, 2.0).unwrap()).abs() < 1e-12);
        assert!((efficiency(&params(2.0, 0.1), 8) - 0.6).abs() < 1e-12);
        assert_eq!(efficiency(&params(7.3, 0.02), 4), 1.0);
        assert!(efficiency(&params(2.0, 0.1), 1_000_000) < 1e-4);
    }

    #[test]
    fn goodput_fixtures() {
        let m = models(0.05, 0.01, 0.1, 0.02, 0.004, 0.1);
        let p = params(2.0, 0.1);
        assert_eq!(goodput(&p, &m, 0, 10).unwrap(), 0.0);
        let raw = throughput(4, m.train.predict(4.0, 10.0)).unwrap();
        assert!((goodput(&p, &m, 4, 10).unwrap() - raw).abs() < 1e-12);
        assert!(goodput(&p, &m, 8, 20).unwrap() < goodput(&p, &m, 8, 5).unwrap());
        let broken = models(-1.0, 0.0, 0.1, 0.02, 0.004, 0.1);
        assert!(goodput(&p, &broken, 8, 1).is_err());
    }

    #[test]
    fn feasible_b_fixtures() {
        let m = LatencyModel::prior(0.02, 0.004, 0.1);
        assert_eq!(max_feasible_b(&m, 25, 0.5), 15);
        assert_eq!(max_feasible_b(&m, 0, 0.05), 0);
        assert_eq!(max_feasible_b(&m, 0, 0.5), 20);
    }

    #[test]
    fn starved_inference_is_flagged() {
        let m = models(0.05, 0.01, 0.1, 0.02, 0.004, 0.6);
        let r = optimize(&params(2.0, 0.1), &m, 0.5, 16).unwrap();
        assert!(r.inference_starved);
        assert_eq!(r.infer_batch, 0);
        let single = optimize(
            &params(2.0, 0.1),
            &models(0.05, 0.01, 0.1, 0.02, 0.004, 0.1),
            0.5,
            1,
        )
        .unwrap();
        assert_eq!(single.train_batch, 1);
        assert_eq!(single.sweep.len(), 1);
    }

    #[test]
    fn warmup_defers_optimization() {
        let prior = models(0.05, 0.01, 0.1, 0.02, 0.004, 0.08);
        let mut c = Coordinator::new(CoordinatorConfig::default(), prior);
        let cfgs = c.init_round(&[0, 1, 2]);
        assert!(cfgs.values().all(|c| *c
            == BatchConfig {
                train_batch: 4,
                infer_batch: 12
            }));
        for _ in 0..49 {
            c.observe_train(4, 12, 0.42, 0.01);
        }
        assert!(c.end_round(8.0, 0.5).unwrap().result.is_none());
        c.observe_train(4, 12, 0.42, 0.01);
        assert!(c.end_round(8.0, 0.5).unwrap().result.is_some());
    }

    #[test]
    fn noise_free_fits_replace_the_prior() {
        let truth = ReplicaPerfProfile {
            noise_cv: 0.0,
            ..Default::default()
        };
        let prior = CoordModels::prior(&ReplicaPerfProfile {
            alpha_train: 0.2,
            ..Default::default()
        });
        let mut c = Coordinator::new(CoordinatorConfig::default(), prior);
        for big_b in [2u32, 4, 8, 16] {
            for b in [16u32, 20, 24] {
                let cfg = BatchConfig {
                    train_batch: big_b,
                    infer_batch: b,
                };
                c.observe_train(big_b, b, truth.noise_free_train_latency(cfg), 0.0);
                c.observe_infer(b, big_b, truth.noise_free_infer_latency(cfg));
            }
        }
        c.refit();
        for (big_b, b) in [(3u32, 17u32), (40, 30)] {
            let cfg = BatchConfig {
                train_batch: big_b,
                infer_batch: b,
            };
            assert!(
                (c.models.train.predict(big_b as f64, b as f64)
                    - truth.noise_free_train_latency(cfg))
                .abs()
                    < 1e-6
            );
            assert!(
                (c.models.infer.predict(b as f64, big_b as f64)
                    - truth.noise_free_infer_latency(cfg))
                .abs()
                    < 1e-6
            );
        }
    }

    #[test]
    fn old_rounds_are_evicted() {
        let prior = models(0.05, 0.01, 0.1, 0.02, 0.004, 0.08);
        let mut c = Coordinator::new(
            CoordinatorConfig {
                retention_rounds: 2,
                ..Default::default()
            },
            prior,
        );
        for _ in 0..4 {
            c.observe_train(4, 12, 0.42, 0.01);
            c.end_round(8.0, 0.5).unwrap();
        }
        // rounds 2 and 3 survive
        assert_eq!(c.stats.train_samples().len(), 2);
    }

    proptest! {
        #[test]
        fn optimum_is_unit_invariant(
            at in 0.01f64..0.2, bt in 0.0f64..0.05, gt in 0.01f64..0.5,
            ai in 0.005f64..0.05, bi in 0.0f64..0.01, gi in 0.01f64..0.2,
            p in 0.0f64..40.0, l in 0.0f64..0.05, tau in 0.2f64..1.5, k in -3i32..4,
        ) {
            let c = 2f64.powi(k);
            let m = models(at, bt, gt, ai, bi, gi);
            let scaled = models(at * c, bt * c, gt * c, ai * c, bi * c, gi * c);
            let pr = params(p, l);
            let a = optimize(&pr, &m, tau, 64).unwrap();
            let b = optimize(&pr, &scaled, tau * c, 64).unwrap();
            prop_assert_eq!((a.train_batch, a.infer_batch), (b.train_batch, b.infer_batch));
        }

        #[test]
        fn larger_budget_never_hurts_without_interference(tau in 0.2f64..1.0, extra in 0.0f64..0.5, p in 1.0f64..40.0) {
            // With b pinned to its largest feasible value, a bigger budget
            // raises b and, through the training cross term, can lower
            // goodput. Without that term the feasible B set only grows.
            let m = models(0.05, 0.0, 0.1, 0.02, 0.004, 0.08);
            let pr = params(p, 0.01);
            let a = optimize(&pr, &m, tau, 64).unwrap();
            let b = optimize(&pr, &m, tau + extra, 64).unwrap();
            if !a.inference_starved {
                prop_assert!(b.goodput >= a.goodput - 1e-12);
            }
        }

        #[test]
        fn efficiency_decreases_past_initial_batch(p in 0.0f64..50.0, l in 0.0f64..0.1, big_b in 5u32..200) {
            let pr = params(p, l);
            prop_assert!(efficiency(&pr, big_b) < efficiency(&pr, big_b - 1));
            prop_assert!(efficiency(&pr, big_b) < 1.0);
        }
    }
}
