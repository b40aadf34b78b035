//! Shared vocabulary: requests, batches, batch configurations, replica
//! states and quality scores.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of an original request stream (one model plus one SLO class).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

/// Identifier of a model family. Replicas of one family share a base model
/// and adapter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub u32);

pub type ReplicaId = usize;
pub type RequestId = u64;

/// One inference query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    /// Arrival time in seconds.
    pub arrival: f64,
    /// Absolute deadline in seconds (`arrival + slo`).
    pub deadline: f64,
    pub output_tokens: u32,
    pub stream_id: StreamId,
}

impl Request {
    pub fn new(
        id: RequestId,
        arrival: f64,
        slo: f64,
        output_tokens: u32,
        stream_id: StreamId,
    ) -> Result<Self> {
        if !(slo > 0.0) {
            return Err(Error::Config(format!(
                "request {id}: SLO must be positive, got {slo}"
            )));
        }
        if output_tokens == 0 {
            return Err(Error::Config(format!(
                "request {id}: output_tokens must be >= 1"
            )));
        }
        Ok(Self {
            id,
            arrival,
            deadline: arrival + slo,
            output_tokens,
            stream_id,
        })
    }

    pub fn slo(&self) -> f64 {
        self.deadline - self.arrival
    }
}

/// A non-empty group of same-stream requests dispatched together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    requests: Vec<Request>,
    pub replica_id: ReplicaId,
    pub dispatch_time: f64,
}

impl Batch {
    pub fn new(requests: Vec<Request>, replica_id: ReplicaId, dispatch_time: f64) -> Result<Self> {
        let Some(first) = requests.first() else {
            return Err(Error::Config(
                "batch must contain at least one request".into(),
            ));
        };
        let stream = first.stream_id;
        if let Some(r) = requests.iter().find(|r| r.stream_id != stream) {
            return Err(Error::Config(format!(
                "request {} belongs to stream {:?}, batch stream is {:?}",
                r.id, r.stream_id, stream
            )));
        }
        if let Some(r) = requests.iter().find(|r| r.arrival > dispatch_time) {
            return Err(Error::ConstraintViolation {
                constraint: 'b',
                detail: format!(
                    "request {} arrives at {} after dispatch at {}",
                    r.id, r.arrival, dispatch_time
                ),
            });
        }
        Ok(Self {
            requests,
            replica_id,
            dispatch_time,
        })
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stream_id(&self) -> StreamId {
        self.requests[0].stream_id
    }
}

/// Arrival time of the most recent member.
pub fn batch_arrival(batch: &Batch) -> f64 {
    batch
        .requests
        .iter()
        .map(|r| r.arrival)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Earliest member deadline.
pub fn batch_deadline(batch: &Batch) -> f64 {
    batch
        .requests
        .iter()
        .map(|r| r.deadline)
        .fold(f64::INFINITY, f64::min)
}

/// Mean of the members' quality scores on the serving replica.
pub fn batch_quality(batch: &Batch, per_request_quality: &HashMap<RequestId, f64>) -> Result<f64> {
    let mut sum = 0.0;
    for r in &batch.requests {
        let q = per_request_quality
            .get(&r.id)
            .ok_or_else(|| Error::Config(format!("no quality entry for request {}", r.id)))?;
        sum += q;
    }
    Ok(sum / batch.len() as f64)
}

/// Training and inference batch sizes configured on one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchConfig {
    pub train_batch: u32,
    pub infer_batch: u32,
}

impl BatchConfig {
    pub fn new(train_batch: u32, infer_batch: u32) -> Self {
        Self {
            train_batch,
            infer_batch,
        }
    }

    /// `train_batch == 0` is only meaningful outside the Combined state.
    pub fn is_valid_for(&self, state: ReplicaState) -> bool {
        self.train_batch > 0 || state != ReplicaState::Combined
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaState {
    /// Inference only.
    Serving,
    /// Sustained low load; candidate for fine-tuning. Receives no new requests.
    Idle,
    /// Concurrent fine-tuning and inference on the shared model.
    Combined,
}

impl ReplicaState {
    /// Whether `self -> to` is one of the permitted state edges.
    pub fn can_transition_to(self, to: ReplicaState) -> bool {
        use ReplicaState::*;
        matches!(
            (self, to),
            (Serving, Idle) | (Idle, Serving) | (Idle, Combined) | (Combined, Serving)
        )
    }

    pub fn transition(self, to: ReplicaState) -> Result<ReplicaState> {
        if self.can_transition_to(to) {
            Ok(to)
        } else {
            Err(Error::Internal(format!(
                "illegal replica transition {self} -> {to}"
            )))
        }
    }

    /// Whether the dispatcher may send requests to a replica in this state.
    pub fn accepts_requests(self) -> bool {
        matches!(self, ReplicaState::Serving | ReplicaState::Combined)
    }
}

impl fmt::Display for ReplicaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReplicaState::Serving => "serving",
            ReplicaState::Idle => "idle",
            ReplicaState::Combined => "combined",
        };
        f.write_str(s)
    }
}

/// Internal model quality score, starts at 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QualityScore(pub f64);

impl Default for QualityScore {
    fn default() -> Self {
        QualityScore(1.0)
    }
}

impl QualityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `floor(x)` that tolerates round-off just below an integer, so that
/// `0.4 / 0.02` floors to 20 rather than 19.
pub fn floor_tol(x: f64) -> f64 {
    (x + 1e-9).floor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(id: u64, arrival: f64, slo: f64) -> Request {
        Request::new(id, arrival, slo, 10, StreamId(0)).unwrap()
    }

    fn batch_of(reqs: Vec<Request>) -> Batch {
        let t = reqs.iter().map(|r| r.arrival).fold(0.0, f64::max);
        Batch::new(reqs, 0, t).unwrap()
    }

    #[test]
    fn arrival_is_latest_member() {
        let b = batch_of(vec![req(0, 1.0, 5.0), req(1, 2.5, 5.0), req(2, 2.0, 5.0)]);
        assert_eq!(batch_arrival(&b), 2.5);
        assert_eq!(batch_arrival(&batch_of(vec![req(0, 7.0, 1.0)])), 7.0);
        assert_eq!(
            batch_arrival(&batch_of(vec![req(0, 0.0, 1.0), req(1, 0.0, 1.0)])),
            0.0
        );
    }

    #[test]
    fn deadline_is_earliest_member() {
        let b = batch_of(vec![req(0, 0.0, 3.0), req(1, 0.0, 2.5)]);
        assert_eq!(batch_deadline(&b), 2.5);
        assert_eq!(batch_deadline(&batch_of(vec![req(0, 0.0, 5.0)])), 5.0);
        let b = batch_of(vec![req(0, 0.0, 1.0), req(1, 0.0, 1.0), req(2, 0.0, 1.0)]);
        assert_eq!(batch_deadline(&b), 1.0);
    }

    #[test]
    fn quality_is_member_mean() {
        let b = batch_of(vec![req(0, 0.0, 1.0), req(1, 0.0, 1.0)]);
        let q = |pairs: &[(u64, f64)]| pairs.iter().copied().collect::<HashMap<_, _>>();
        assert_eq!(batch_quality(&b, &q(&[(0, 1.0), (1, 1.0)])).unwrap(), 1.0);
        assert_eq!(batch_quality(&b, &q(&[(0, 0.5), (1, 1.5)])).unwrap(), 1.0);
        let single = batch_of(vec![req(3, 0.0, 1.0)]);
        assert_eq!(batch_quality(&single, &q(&[(3, 2.0)])).unwrap(), 2.0);
        assert!(matches!(
            batch_quality(&b, &q(&[(0, 1.0)])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_construction_guards() {
        assert!(Batch::new(vec![], 0, 0.0).is_err());
        let mixed = vec![
            req(0, 0.0, 1.0),
            Request::new(1, 0.0, 1.0, 1, StreamId(1)).unwrap(),
        ];
        assert!(Batch::new(mixed, 0, 0.0).is_err());
        let early = Batch::new(vec![req(0, 2.0, 1.0)], 0, 1.0);
        assert!(matches!(
            early,
            Err(Error::ConstraintViolation {
                constraint: 'b',
                ..
            })
        ));
        assert!(Request::new(0, 0.0, 0.0, 1, StreamId(0)).is_err());
        assert!(Request::new(0, 0.0, 1.0, 0, StreamId(0)).is_err());
    }

    #[test]
    fn state_edges() {
        use ReplicaState::*;
        let all = [Serving, Idle, Combined];
        let allowed = [
            (Serving, Idle),
            (Idle, Serving),
            (Idle, Combined),
            (Combined, Serving),
        ];
        for from in all {
            for to in all {
                assert_eq!(
                    from.can_transition_to(to),
                    allowed.contains(&(from, to)),
                    "{from}->{to}"
                );
            }
        }
        assert!(Serving.transition(Combined).is_err());
        assert!(!BatchConfig::new(0, 4).is_valid_for(Combined));
        assert!(BatchConfig::new(0, 4).is_valid_for(Serving));
        assert_eq!(QualityScore::default().value(), 1.0);
    }

    #[test]
    fn floor_tolerates_round_off() {
        assert_eq!(floor_tol(0.4 / 0.02), 20.0);
        assert_eq!(floor_tol(0.3 / 0.02), 15.0);
        assert_eq!(floor_tol(14.5), 14.0);
    }

    proptest! {
        #[test]
        fn quality_is_permutation_invariant(qs in prop::collection::vec(0.01f64..10.0, 1..12), seed in 0u64..1000) {
            let reqs: Vec<Request> = (0..qs.len() as u64).map(|i| req(i, 0.0, 1.0)).collect();
            let map: HashMap<u64, f64> = qs.iter().enumerate().map(|(i, q)| (i as u64, *q)).collect();
            let mut shuffled = reqs.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % n;
                shuffled.swap(i, j);
            }
            let a = batch_quality(&batch_of(reqs), &map).unwrap();
            let b = batch_quality(&batch_of(shuffled), &map).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn earliest_arrival_precedes_deadline_by_min_slo(arrivals in prop::collection::vec(0.0f64..100.0, 1..10), slos in prop::collection::vec(0.1f64..5.0, 10)) {
            let reqs: Vec<Request> = arrivals.iter().enumerate().map(|(i, a)| req(i as u64, *a, slos[i])).collect();
            let tau_min = reqs.iter().map(|r| r.slo()).fold(f64::INFINITY, f64::min);
            let first = reqs.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
            let b = batch_of(reqs);
            prop_assert!(first <= batch_deadline(&b) - tau_min + 1e-9);
        }
    }
}
