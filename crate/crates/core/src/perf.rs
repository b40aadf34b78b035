//! Ground-truth replica performance: bivariate latency with sub-saturation
//! curvature and multiplicative noise, plus work-unit utilization accounting.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::BatchConfig;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Extra per-request cost factor applied below the saturation batch size.
pub const CURVATURE: f64 = 0.5;

/// Hidden per-replica truth that the fitted latency models estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaPerfProfile {
    /// Seconds per inference request.
    pub alpha_infer: f64,
    /// Seconds per co-located training sample (interference slope).
    pub beta_infer: f64,
    pub gamma_infer: f64,
    /// Seconds per training sample.
    pub alpha_train: f64,
    /// Seconds per co-located inference request.
    pub beta_train: f64,
    pub gamma_train: f64,
    pub saturation_batch: f64,
    pub noise_cv: f64,
    /// Work units per second the replica can deliver.
    pub capacity: f64,
    pub work_per_request: f64,
    pub work_per_sample: f64,
}

impl Default for ReplicaPerfProfile {
    fn default() -> Self {
        Self {
            alpha_infer: 0.02,
            beta_infer: 0.004,
            gamma_infer: 0.08,
            alpha_train: 0.05,
            beta_train: 0.01,
            gamma_train: 0.1,
            saturation_batch: 16.0,
            noise_cv: 0.05,
            capacity: 1.0,
            work_per_request: 0.02,
            work_per_sample: 0.05,
        }
    }
}

impl ReplicaPerfProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_infer", self.alpha_infer),
            ("beta_infer", self.beta_infer),
            ("gamma_infer", self.gamma_infer),
            ("alpha_train", self.alpha_train),
            ("beta_train", self.beta_train),
            ("gamma_train", self.gamma_train),
            ("saturation_batch", self.saturation_batch),
            ("capacity", self.capacity),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "profile.{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=0.3).contains(&self.noise_cv) {
            return Err(Error::Config(format!(
                "profile.noise_cv must lie in [0, 0.3], got {}",
                self.noise_cv
            )));
        }
        if !(self.work_per_request >= 0.0) || !(self.work_per_sample >= 0.0) {
            return Err(Error::Config(
                "profile work units must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Effective per-request inference cost at batch size `b`.
    pub fn effective_alpha(&self, b: u32) -> f64 {
        self.alpha_infer * (1.0 + CURVATURE * (1.0 - b as f64 / self.saturation_batch).max(0.0))
    }

    pub fn noise_free_infer_latency(&self, cfg: BatchConfig) -> f64 {
        let b = cfg.infer_batch as f64;
        self.effective_alpha(cfg.infer_batch) * b
            + self.beta_infer * cfg.train_batch as f64
            + self.gamma_infer
    }

    pub fn noise_free_train_latency(&self, cfg: BatchConfig) -> f64 {
        self.alpha_train * cfg.train_batch as f64
            + self.beta_train * cfg.infer_batch as f64
            + self.gamma_train
    }

    /// Work units delivered by an inference batch of `b` requests.
    pub fn infer_work(&self, b: u32) -> f64 {
        self.work_per_request * b as f64
    }

    pub fn train_work(&self, big_b: u32) -> f64 {
        self.work_per_sample * big_b as f64
    }
}

/// `1 + eps` with `eps ~ N(0, cv)` truncated to `[-3cv, 3cv]`. Draws nothing
/// when `cv == 0`.
pub fn noise_factor(cv: f64, rng: &mut SimRng) -> f64 {
    if cv <= 0.0 {
        return 1.0;
    }
    let eps: f64 = Normal::new(0.0, cv).expect("cv checked").sample(rng);
    1.0 + eps.clamp(-3.0 * cv, 3.0 * cv)
}

/// Realized inference batch latency. `cfg.train_batch` is the training batch
/// co-running on the replica (0 when none).
pub fn true_infer_latency(profile: &ReplicaPerfProfile, cfg: BatchConfig, rng: &mut SimRng) -> f64 {
    debug_assert!(cfg.infer_batch >= 1);
    profile.noise_free_infer_latency(cfg) * noise_factor(profile.noise_cv, rng)
}

/// Realized training step latency. `cfg.infer_batch` is the inference batch
/// co-running on the replica (0 when none).
pub fn true_train_latency(profile: &ReplicaPerfProfile, cfg: BatchConfig, rng: &mut SimRng) -> f64 {
    debug_assert!(cfg.train_batch >= 1);
    profile.noise_free_train_latency(cfg) * noise_factor(profile.noise_cv, rng)
}

/// Work delivered by one replica, recorded as intervals with a constant rate.
#[derive(Debug, Clone, Default)]
pub struct UtilizationMeter {
    spans: Vec<(f64, f64, f64)>,
}

impl UtilizationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record `units` of work spread evenly over `[start, end)`.
    pub fn record(&mut self, start: f64, end: f64, units: f64) {
        if end > start && units > 0.0 {
            self.spans.push((start, end, units));
        }
    }

    /// Drop spans that end before `t`.
    pub fn forget_before(&mut self, t: f64) {
        self.spans.retain(|s| s.1 >= t);
    }

    pub fn delivered(&self, from: f64, to: f64) -> f64 {
        self.spans
            .iter()
            .map(|&(s, e, u)| {
                let overlap = (e.min(to) - s.max(from)).max(0.0);
                u * overlap / (e - s)
            })
            .sum()
    }

    /// Fraction of capacity used over `[now - window, now]`, clamped to [0, 1].
    pub fn utilization_sample(&self, now: f64, window: f64, capacity: f64) -> f64 {
        if !(window > 0.0) {
            return 0.0;
        }
        (self.delivered(now - window, now) / (capacity * window)).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn quiet() -> ReplicaPerfProfile {
        ReplicaPerfProfile {
            noise_cv: 0.0,
            ..Default::default()
        }
    }

    fn cfg(train: u32, infer: u32) -> BatchConfig {
        BatchConfig {
            train_batch: train,
            infer_batch: infer,
        }
    }

    #[test]
    fn saturated_noise_free_inference_is_linear() {
        let p = quiet();
        let mut r = rng::stream(0, 5);
        for b in [16, 20, 40] {
            let want = p.alpha_infer * b as f64 + p.gamma_infer;
            assert!((true_infer_latency(&p, cfg(0, b), &mut r) - want).abs() < 1e-12);
        }
        let one = true_infer_latency(&p, cfg(10, 20), &mut r);
        let two = true_infer_latency(&p, cfg(20, 20), &mut r);
        assert!((two - one - p.beta_infer * 10.0).abs() < 1e-12);
    }

    #[test]
    fn sub_saturation_costs_more_per_request() {
        let p = quiet();
        for b in 1..16 {
            assert!(p.effective_alpha(b) > p.alpha_infer);
        }
        assert_eq!(p.effective_alpha(16), p.alpha_infer);
    }

    #[test]
    fn training_latency_fixtures() {
        let p = quiet();
        let mut r = rng::stream(0, 6);
        assert!((true_train_latency(&p, cfg(8, 0), &mut r) - (0.05 * 8.0 + 0.1)).abs() < 1e-12);
        assert!((true_train_latency(&p, cfg(1, 0), &mut r) - 0.15).abs() < 1e-12);
        let diff =
            true_train_latency(&p, cfg(4, 12), &mut r) - true_train_latency(&p, cfg(4, 0), &mut r);
        assert!((diff - 0.12).abs() < 1e-12);
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let p = ReplicaPerfProfile {
            noise_cv: 0.3,
            ..Default::default()
        };
        let base = p.noise_free_infer_latency(cfg(0, 8));
        let mut r = rng::stream(3, 5);
        for _ in 0..10_000 {
            let l = true_infer_latency(&p, cfg(0, 8), &mut r);
            assert!(l >= base * 0.1 - 1e-12 && l <= base * 1.9 + 1e-12);
        }
        let a = true_infer_latency(&p, cfg(0, 8), &mut rng::stream(1, 5));
        let b = true_infer_latency(&p, cfg(0, 8), &mut rng::stream(1, 5));
        assert_eq!(a, b);
    }

    #[test]
    fn utilization_fixtures() {
        let m = UtilizationMeter::new();
        assert_eq!(m.utilization_sample(10.0, 1.0, 1.0), 0.0);

        // two back-to-back 0.5 s batches, 0.5 units each, fill a 1 s window
        let mut full = UtilizationMeter::new();
        full.record(0.0, 0.5, 0.5);
        full.record(0.5, 1.0, 0.5);
        assert!((full.utilization_sample(1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);

        // Hand example: two inference batches of 8 in a 2 s window, with and
        // without a co-running training step of 4 samples.
        let p = quiet();
        let t_inf = p.noise_free_infer_latency(cfg(0, 8)); // 0.02*1.25*8 + 0.08 = 0.28
        assert!((t_inf - 0.28).abs() < 1e-12);
        let mut infer_only = UtilizationMeter::new();
        infer_only.record(0.0, t_inf, p.infer_work(8));
        infer_only.record(1.0, 1.0 + t_inf, p.infer_work(8));
        let u_inf = infer_only.utilization_sample(2.0, 2.0, 1.0);
        assert!((u_inf - 0.16).abs() < 1e-12); // 2 * 0.16 units / 2 s
        let mut combined = infer_only.clone();
        let t_tr = p.noise_free_train_latency(cfg(4, 8)); // 0.2 + 0.08 + 0.1 = 0.38
        combined.record(0.0, t_tr, p.train_work(4));
        let u_comb = combined.utilization_sample(2.0, 2.0, 1.0);
        assert!((u_comb - 0.26).abs() < 1e-12);
        assert!(u_comb > u_inf);
    }

    #[test]
    fn partial_overlap_is_prorated() {
        let mut m = UtilizationMeter::new();
        m.record(0.5, 1.5, 1.0);
        assert!((m.delivered(0.0, 1.0) - 0.5).abs() < 1e-12);
        m.forget_before(2.0);
        assert_eq!(m.delivered(0.0, 10.0), 0.0);
    }

    #[test]
    fn profile_validation() {
        assert!(ReplicaPerfProfile::default().validate().is_ok());
        assert!(ReplicaPerfProfile {
            noise_cv: 0.31,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ReplicaPerfProfile {
            alpha_infer: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
