//! Simulated fine-tuning convergence with a gradient-noise scale.
//!
//! The expected per-step decrement is `k (L - A) B / (B + n(L))` where
//! `n(L) = n0 L0 / max(L, A + 1e-6)` grows as the loss falls, so large
//! batches pay off more later in training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

/// Guard keeping the noise-scale denominator away from the asymptote.
pub const ASYMPTOTE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceParams {
    pub initial_loss: f64,
    pub asymptote_loss: f64,
    /// Gradient-noise scale at the initial loss, in samples.
    pub noise_scale0: f64,
    /// Per-step progress constant `k`.
    pub lr_progress: f64,
    /// Half-width of the uniform multiplicative noise on each decrement.
    pub step_noise: f64,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            initial_loss: 2.0,
            asymptote_loss: 0.8,
            noise_scale0: 8.0,
            lr_progress: 0.02,
            step_noise: 0.2,
        }
    }
}

impl ConvergenceParams {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.asymptote_loss > 0.0
            && self.initial_loss > self.asymptote_loss
            && self.noise_scale0 > 0.0
            && self.lr_progress > 0.0
            && self.lr_progress < 1.0
            && (0.0..1.0).contains(&self.step_noise);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(
                "convergence needs 0 < asymptote < initial loss, noise_scale0 > 0, 0 < lr_progress < 1, 0 <= step_noise < 1"
                    .into(),
            ))
        }
    }

    pub fn initial_state(&self) -> TrainState {
        TrainState {
            loss: self.initial_loss,
            initial_loss: self.initial_loss,
            asymptote_loss: self.asymptote_loss,
            steps: 0,
            noise_scale0: self.noise_scale0,
            lr_progress: self.lr_progress,
            step_noise: self.step_noise,
            last_decrement: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub loss: f64,
    pub initial_loss: f64,
    pub asymptote_loss: f64,
    pub steps: u64,
    pub noise_scale0: f64,
    pub lr_progress: f64,
    pub step_noise: f64,
    /// Realized decrement of the most recent step.
    pub last_decrement: f64,
}

impl TrainState {
    /// Current gradient-noise scale in samples.
    pub fn noise_scale(&self) -> f64 {
        self.noise_scale0 * self.initial_loss / self.loss.max(self.asymptote_loss + ASYMPTOTE_GUARD)
    }

    pub fn expected_decrement(&self, big_b: u32) -> f64 {
        let b = big_b as f64;
        self.lr_progress * (self.loss - self.asymptote_loss).max(0.0) * b / (b + self.noise_scale())
    }

    /// One optimizer step at batch size `big_b`.
    pub fn train_step(&self, big_b: u32, rng: &mut SimRng) -> TrainState {
        debug_assert!(big_b >= 1);
        let mut delta = self.expected_decrement(big_b);
        if self.step_noise > 0.0 {
            delta *= 1.0 + rng.random_range(-self.step_noise..=self.step_noise);
        }
        let loss = (self.loss - delta).max(self.asymptote_loss);
        TrainState {
            loss,
            steps: self.steps + 1,
            last_decrement: self.loss - loss,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn quiet() -> TrainState {
        ConvergenceParams {
            step_noise: 0.0,
            ..Default::default()
        }
        .initial_state()
    }

    #[test]
    fn converged_state_is_fixed_point() {
        let s = TrainState {
            loss: 0.8,
            ..quiet()
        };
        assert_eq!(s.expected_decrement(32), 0.0);
        let next = s.train_step(32, &mut rng::stream(0, 7));
        assert_eq!(next.loss, 0.8);
        assert_eq!(next.steps, 1);
    }

    #[test]
    fn decrement_saturates_in_batch_size() {
        let s = quiet();
        let limit = s.lr_progress * (s.loss - s.asymptote_loss);
        let huge = s.expected_decrement(u32::MAX);
        assert!((huge - limit).abs() < 1e-8 * limit);
        // at the initial loss the noise scale is exactly noise_scale0 = 8
        assert!((s.noise_scale() - 8.0).abs() < 1e-12);
        assert!((s.expected_decrement(8) - limit / 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_scale_grows_as_loss_falls() {
        let s = quiet();
        let later = TrainState { loss: 1.0, ..s };
        assert!(later.noise_scale() > s.noise_scale());
        let at_floor = TrainState { loss: 0.8, ..s };
        assert!(at_floor.noise_scale().is_finite());
    }

    #[test]
    fn noisy_steps_stay_above_asymptote() {
        let mut s = ConvergenceParams {
            step_noise: 0.9,
            lr_progress: 0.5,
            ..Default::default()
        }
        .initial_state();
        let mut r = rng::stream(2, 7);
        for _ in 0..2000 {
            s = s.train_step(64, &mut r);
            assert!(s.loss >= s.asymptote_loss);
            assert!(s.last_decrement >= 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn noise_free_loss_is_non_increasing(bs in proptest::collection::vec(1u32..128, 1..200)) {
            let mut s = quiet();
            let mut r = rng::stream(0, 7);
            for b in bs {
                let next = s.train_step(b, &mut r);
                proptest::prop_assert!(next.loss <= s.loss);
                s = next;
            }
        }
    }
}
