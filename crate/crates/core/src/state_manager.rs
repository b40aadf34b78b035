//! Per-replica EWMA statistics and the Serving/Idle transition rules.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::ReplicaState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateConfig {
    /// Samples kept per metric (T).
    pub window: usize,
    /// EWMA decay per second.
    pub decay: f64,
    /// Quantile level used for the switch thresholds.
    pub quantile: f64,
    /// Upper cap on the utilization threshold.
    pub util_floor: f64,
    /// Unselected launcher decisions before an Idle replica reverts (T').
    pub t_prime: u32,
    /// Seconds between state scans.
    pub scan_interval: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            window: 30,
            decay: 0.1,
            quantile: 0.25,
            util_floor: 0.25,
            t_prime: 5,
            scan_interval: 1.0,
        }
    }
}

impl StateConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.window == 0
            || !(self.decay >= 0.0)
            || !(0.0..=1.0).contains(&self.quantile)
            || !(0.0..=1.0).contains(&self.util_floor)
            || self.t_prime == 0
            || !(self.scan_interval > 0.0)
        {
            return Err(crate::Error::Config(
                "state: window >= 1, decay >= 0, quantile and util_floor in [0,1], t_prime >= 1, scan_interval > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-capacity ring of timestamped samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ring {
    cap: usize,
    samples: VecDeque<(f64, f64)>,
}

impl Ring {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            samples: VecDeque::with_capacity(cap),
        }
    }

    pub fn push(&mut self, time: f64, value: f64) {
        if self.samples.len() == self.cap {
            self.samples.pop_front();
        }
        self.samples.push_back((time, value));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.cap
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.samples.iter()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }
}

/// Time-decayed weighted mean with weights `exp(-decay (now - t'))`
/// normalized over the ring. `None` when the ring is empty.
///
/// Normalization cancels `now`, so the weights are computed relative to the
/// newest sample instead, which keeps them from underflowing together.
pub fn ewma(ring: &Ring, _now: f64, decay: f64) -> Option<f64> {
    let latest = ring.samples.back()?;
    if decay.is_infinite() {
        return Some(latest.1);
    }
    let t_max = ring
        .samples
        .iter()
        .map(|s| s.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, v) in &ring.samples {
        let w = (-decay * (t_max - t)).exp();
        num += w * v;
        den += w;
    }
    Some(num / den)
}

/// Linear interpolation between order statistics (type 7): position
/// `h = (n - 1) q` in the sorted sample.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStats {
    pub util_history: Ring,
    pub queue_history: Ring,
    pub batch_history: Ring,
    pub window: usize,
    pub decay: f64,
    pub idle_unselected_count: u32,
}

/// Smoothed metrics of one replica at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothed {
    pub util: f64,
    pub queue: f64,
    pub batch: f64,
}

impl ReplicaStats {
    pub fn new(window: usize, decay: f64) -> Self {
        Self {
            util_history: Ring::new(window),
            queue_history: Ring::new(window),
            batch_history: Ring::new(window),
            window,
            decay,
            idle_unselected_count: 0,
        }
    }

    pub fn record(&mut self, time: f64, util: f64, queue: f64, batch: f64) {
        self.util_history.push(time, util);
        self.queue_history.push(time, queue);
        self.batch_history.push(time, batch);
    }

    pub fn is_warm(&self) -> bool {
        self.util_history.is_full()
    }

    /// Forget history, e.g. after a state change.
    pub fn reset(&mut self) {
        self.util_history.clear();
        self.queue_history.clear();
        self.batch_history.clear();
        self.idle_unselected_count = 0;
    }

    pub fn smoothed(&self, now: f64) -> Option<Smoothed> {
        Some(Smoothed {
            util: ewma(&self.util_history, now, self.decay)?,
            queue: ewma(&self.queue_history, now, self.decay)?,
            batch: ewma(&self.batch_history, now, self.decay)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchThresholds {
    pub util_switch: f64,
    pub queue_switch: f64,
    pub batch_switch: f64,
    pub util_floor: f64,
    pub quantile: f64,
}

/// Quantile thresholds over a population of smoothed metrics, with the
/// utilization threshold capped at `util_floor`.
pub fn compute_thresholds(
    population: &[Smoothed],
    q: f64,
    util_floor: f64,
) -> Option<SwitchThresholds> {
    let col = |f: fn(&Smoothed) -> f64| population.iter().map(f).collect::<Vec<_>>();
    Some(SwitchThresholds {
        util_switch: quantile(&col(|s| s.util), q)?.min(util_floor),
        queue_switch: quantile(&col(|s| s.queue), q)?,
        batch_switch: quantile(&col(|s| s.batch), q)?,
        util_floor,
        quantile: q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMode {
    /// Compare the queue-length EWMA.
    Queue,
    /// Compare the dispatched-batch EWMA (subflow dispatch keeps queues near 0).
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdleCheck {
    Transition,
    Stay,
    InsufficientHistory,
}

pub fn check_idle_transition(
    stats: &ReplicaStats,
    thresholds: &SwitchThresholds,
    mode: TransitionMode,
    now: f64,
) -> IdleCheck {
    if !stats.is_warm() {
        return IdleCheck::InsufficientHistory;
    }
    let Some(s) = stats.smoothed(now) else {
        return IdleCheck::InsufficientHistory;
    };
    let second = match mode {
        TransitionMode::Queue => s.queue < thresholds.queue_switch,
        TransitionMode::Batch => s.batch < thresholds.batch_switch,
    };
    if s.util < thresholds.util_switch && second {
        IdleCheck::Transition
    } else {
        IdleCheck::Stay
    }
}

/// Count one launcher decision for an Idle replica. Returns true when the
/// replica should revert to Serving.
pub fn tick_rollback(stats: &mut ReplicaStats, selected_this_decision: bool, t_prime: u32) -> bool {
    if selected_this_decision {
        stats.idle_unselected_count = 0;
        return false;
    }
    stats.idle_unselected_count += 1;
    stats.idle_unselected_count >= t_prime
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Promotion {
    Promoted,
    /// The replica was not Idle; nothing changed.
    Ignored(ReplicaState),
}

/// Move an Idle replica straight back to Serving.
pub fn force_promote(state: &mut ReplicaState, stats: &mut ReplicaStats) -> Promotion {
    if *state != ReplicaState::Idle {
        return Promotion::Ignored(*state);
    }
    *state = ReplicaState::Serving;
    stats.idle_unselected_count = 0;
    Promotion::Promoted
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(vals: &[(f64, f64)]) -> Ring {
        let mut r = Ring::new(vals.len().max(1));
        for &(t, v) in vals {
            r.push(t, v);
        }
        r
    }

    #[test]
    fn ewma_fixtures() {
        let c = ring(&[(0.0, 3.0), (1.0, 3.0), (2.0, 3.0)]);
        for d in [0.0, 0.1, 5.0, f64::INFINITY] {
            assert!((ewma(&c, 2.0, d).unwrap() - 3.0).abs() < 1e-12);
        }
        let r = ring(&[(0.0, 1.0), (1.0, 2.0), (2.0, 6.0)]);
        assert!((ewma(&r, 2.0, 0.0).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(ewma(&r, 2.0, f64::INFINITY), Some(6.0));
        assert!((ewma(&r, 2.0, 1e6).unwrap() - 6.0).abs() < 1e-9);
        assert_eq!(ewma(&Ring::new(3), 0.0, 0.1), None);
        // hand check, decay ln 2: weights 1/4, 1/2, 1 over 7/4
        let h = ewma(&r, 2.0, 2f64.ln()).unwrap();
        assert!((h - (0.25 + 1.0 + 6.0) / 1.75).abs() < 1e-12);
    }

    #[test]
    fn ring_keeps_last_window() {
        let mut r = Ring::new(3);
        for i in 0..5 {
            r.push(i as f64, i as f64);
        }
        assert_eq!(
            r.iter().map(|s| s.1).collect::<Vec<_>>(),
            vec![2.0, 3.0, 4.0]
        );
        assert!(r.is_full());
    }

    #[test]
    fn threshold_fixtures() {
        let same = |u: f64| {
            vec![
                Smoothed {
                    util: u,
                    queue: 0.0,
                    batch: 0.0
                };
                4
            ]
        };
        assert_eq!(
            compute_thresholds(&same(0.5), 0.25, 0.25)
                .unwrap()
                .util_switch,
            0.25
        );
        assert_eq!(
            compute_thresholds(&same(0.1), 0.25, 0.25)
                .unwrap()
                .util_switch,
            0.1
        );
        let qs: Vec<Smoothed> = [0.0, 4.0, 8.0, 12.0]
            .iter()
            .map(|&q| Smoothed {
                util: 0.0,
                queue: q,
                batch: 0.0,
            })
            .collect();
        // type 7: h = 3 * 0.25 = 0.75, so 0 + 0.75 * 4
        assert!((compute_thresholds(&qs, 0.25, 0.25).unwrap().queue_switch - 3.0).abs() < 1e-12);
        assert_eq!(compute_thresholds(&[], 0.25, 0.25), None);
    }

    #[test]
    fn quantile_endpoints() {
        assert_eq!(quantile(&[5.0, 1.0, 3.0], 0.0), Some(1.0));
        assert_eq!(quantile(&[5.0, 1.0, 3.0], 1.0), Some(5.0));
        assert_eq!(quantile(&[5.0, 1.0, 3.0], 0.5), Some(3.0));
        assert_eq!(quantile(&[2.0], 0.3), Some(2.0));
    }

    fn warm(util: f64, queue: f64, batch: f64) -> ReplicaStats {
        let mut s = ReplicaStats::new(30, 0.1);
        for t in 0..30 {
            s.record(t as f64, util, queue, batch);
        }
        s
    }

    fn thresholds(util: f64, queue: f64, batch: f64) -> SwitchThresholds {
        SwitchThresholds {
            util_switch: util,
            queue_switch: queue,
            batch_switch: batch,
            util_floor: 0.25,
            quantile: 0.25,
        }
    }

    #[test]
    fn idle_check_fixtures() {
        let th = thresholds(0.25, 1.0, 1.0);
        assert_eq!(
            check_idle_transition(&warm(0.1, 0.0, 0.0), &th, TransitionMode::Queue, 29.0),
            IdleCheck::Transition
        );
        assert_eq!(
            check_idle_transition(&warm(0.1, 5.0, 0.0), &th, TransitionMode::Queue, 29.0),
            IdleCheck::Stay
        );
        assert_eq!(
            check_idle_transition(&warm(0.25, 0.0, 0.0), &th, TransitionMode::Queue, 29.0),
            IdleCheck::Stay
        );
        // batch mode ignores the queue and looks at dispatched batches
        assert_eq!(
            check_idle_transition(&warm(0.1, 5.0, 0.0), &th, TransitionMode::Batch, 29.0),
            IdleCheck::Transition
        );
        assert_eq!(
            check_idle_transition(&warm(0.1, 0.0, 3.0), &th, TransitionMode::Batch, 29.0),
            IdleCheck::Stay
        );
        let mut cold = ReplicaStats::new(30, 0.1);
        cold.record(0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            check_idle_transition(&cold, &th, TransitionMode::Queue, 0.0),
            IdleCheck::InsufficientHistory
        );
    }

    #[test]
    fn sustained_quiet_eventually_transitions() {
        let th = thresholds(0.25, 0.5, 0.5);
        let mut s = ReplicaStats::new(30, 0.1);
        let mut fired = None;
        for t in 0..100 {
            s.record(t as f64, 0.05, 0.0, 0.0);
            if check_idle_transition(&s, &th, TransitionMode::Queue, t as f64)
                == IdleCheck::Transition
            {
                fired = Some(t);
                break;
            }
        }
        assert_eq!(fired, Some(29));
    }

    #[test]
    fn rollback_counting() {
        let mut s = ReplicaStats::new(3, 0.1);
        assert!(!(0..4).any(|_| tick_rollback(&mut s, false, 5)));
        assert!(tick_rollback(&mut s, false, 5));
        let mut s = ReplicaStats::new(3, 0.1);
        for _ in 0..4 {
            tick_rollback(&mut s, false, 5);
        }
        assert!(!tick_rollback(&mut s, true, 5));
        assert_eq!(s.idle_unselected_count, 0);
        assert!(tick_rollback(&mut ReplicaStats::new(3, 0.1), false, 1));
    }

    #[test]
    fn promotion_guards() {
        let mut st = ReplicaState::Idle;
        let mut stats = ReplicaStats::new(3, 0.1);
        stats.idle_unselected_count = 3;
        assert_eq!(force_promote(&mut st, &mut stats), Promotion::Promoted);
        assert_eq!(st, ReplicaState::Serving);
        assert_eq!(stats.idle_unselected_count, 0);
        let mut c = ReplicaState::Combined;
        assert_eq!(
            force_promote(&mut c, &mut stats),
            Promotion::Ignored(ReplicaState::Combined)
        );
        assert_eq!(c, ReplicaState::Combined);
    }

    proptest! {
        #[test]
        fn decisions_are_time_shift_invariant(
            vals in prop::collection::vec((0.0f64..1.0, 0.0f64..20.0, 0.0f64..20.0), 30),
            shift in -1e4f64..1e4,
            decay in 0.0f64..2.0,
        ) {
            let th = thresholds(0.25, 2.0, 2.0);
            let mut a = ReplicaStats::new(30, decay);
            let mut b = ReplicaStats::new(30, decay);
            for (i, (u, q, bb)) in vals.iter().enumerate() {
                a.record(i as f64, *u, *q, *bb);
                b.record(i as f64 + shift, *u, *q, *bb);
            }
            for mode in [TransitionMode::Queue, TransitionMode::Batch] {
                let sa = a.smoothed(29.0).unwrap();
                let sb = b.smoothed(29.0 + shift).unwrap();
                prop_assert!((sa.util - sb.util).abs() < 1e-9 && (sa.queue - sb.queue).abs() < 1e-9);
                // avoid decisions sitting exactly on a threshold after round-off
                if (sa.util - 0.25).abs() > 1e-9 && (sa.queue - 2.0).abs() > 1e-9 && (sa.batch - 2.0).abs() > 1e-9 {
                    prop_assert_eq!(
                        check_idle_transition(&a, &th, mode, 29.0),
                        check_idle_transition(&b, &th, mode, 29.0 + shift)
                    );
                }
            }
        }

        #[test]
        fn never_idles_with_queue_above_threshold(
            pop in prop::collection::vec((0.0f64..1.0, 0.0f64..20.0), 1..12),
            cand in (0.0f64..1.0, 0.0f64..20.0),
        ) {
            let mut s = ReplicaStats::new(5, 0.1);
            for t in 0..5 {
                s.record(t as f64, cand.0, cand.1, 0.0);
            }
            let mut smoothed: Vec<Smoothed> = pop.iter().map(|&(u, q)| Smoothed { util: u, queue: q, batch: 0.0 }).collect();
            smoothed.push(s.smoothed(4.0).unwrap());
            let th = compute_thresholds(&smoothed, 0.25, 0.25).unwrap();
            if check_idle_transition(&s, &th, TransitionMode::Queue, 4.0) == IdleCheck::Transition {
                prop_assert!(s.smoothed(4.0).unwrap().queue < th.queue_switch);
            }
            if s.smoothed(4.0).unwrap().queue > th.queue_switch {
                prop_assert_ne!(check_idle_transition(&s, &th, TransitionMode::Queue, 4.0), IdleCheck::Transition);
            }
        }
    }
}
