use coserve::config::Scenario;
use coserve::dispatcher::Policy;
use coserve::domain::ReplicaState;
use coserve::engine::{run, run_policy, scenario_requests};
use coserve::metrics::Outcome;
use coserve::workload::{WorkloadKind, WorkloadSpec};

fn short(duration: f64) -> Scenario {
    Scenario {
        duration,
        ..Scenario::default()
    }
}

#[test]
fn empty_workload_yields_empty_ledger() {
    let sc = Scenario {
        workloads: vec![],
        ..short(60.0)
    };
    for p in Policy::ALL {
        let l = run_policy(&sc, p, 1).unwrap();
        assert!(l.requests.is_empty());
        assert_eq!(l.goodput(0.0, 60.0), 0.0);
        assert_eq!(l.q_goodput(0.0, 60.0), 0.0);
    }
}

#[test]
fn single_request_is_met() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("one.csv");
    std::fs::write(&trace, "timestamp_s,stream_id,output_tokens\n1.0,0,40\n").unwrap();
    let sc = Scenario {
        workloads: vec![WorkloadSpec {
            kind: WorkloadKind::Trace,
            trace_path: Some(trace),
            jitter_s: 0.0,
            ..WorkloadSpec::default()
        }],
        ..short(30.0)
    };
    for p in Policy::ALL {
        let l = run_policy(&sc, p, 1).unwrap();
        assert_eq!(l.requests.len(), 1, "{p}");
        let r = &l.requests[0];
        assert_eq!(r.outcome, Outcome::Met, "{p}");
        assert!(r.completion.unwrap() <= r.deadline);
        assert!((l.goodput(0.0, 30.0) - 40.0 / 30.0).abs() < 1e-12);
    }
}

#[test]
fn runs_are_deterministic() {
    let sc = short(300.0);
    for p in Policy::ALL {
        let a = serde_json::to_vec(&run_policy(&sc, p, 5).unwrap()).unwrap();
        let b = serde_json::to_vec(&run_policy(&sc, p, 5).unwrap()).unwrap();
        assert!(a == b, "{p} differs between runs");
    }
    let a = run(&sc, 5).unwrap();
    let b = run(&sc, 6).unwrap();
    assert_ne!(a.requests.len(), 0);
    assert_ne!(
        serde_json::to_vec(&a).unwrap(),
        serde_json::to_vec(&b).unwrap()
    );
}

#[test]
fn requests_are_conserved() {
    let sc = Scenario::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../scenarios/bursty_desk.toml"
    ))
    .unwrap();
    let sc = Scenario {
        duration: 900.0,
        ..sc
    };
    let generated = scenario_requests(&sc, 2).unwrap();
    for p in Policy::ALL {
        let l = run_policy(&sc, p, 2).unwrap();
        assert_eq!(l.requests.len(), generated.len(), "{p}");
        let mut ids: Vec<_> = l.requests.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), generated.len());
        let total: usize = [
            Outcome::Met,
            Outcome::Late,
            Outcome::Dropped,
            Outcome::Queued,
        ]
        .into_iter()
        .map(|o| l.count(o))
        .sum();
        assert_eq!(total, generated.len());
        for r in &l.requests {
            match r.outcome {
                Outcome::Met => assert!(r.completion.unwrap() <= r.deadline),
                Outcome::Late => assert!(r.completion.unwrap() > r.deadline),
                Outcome::Dropped => assert!(r.completion.is_none() && r.drop_time.is_some()),
                Outcome::Queued => assert!(r.completion.is_none()),
            }
            if let (Some(d), Some(c)) = (r.dispatch_time, r.completion) {
                assert!(r.arrival <= d && d < c);
            }
        }
        let s = l.summary();
        assert_eq!(s.goodput, l.goodput(0.0, sc.duration));
        assert!(s.q_goodput >= 0.0);
    }
}

#[test]
fn ideal_mode_batches_finish_within_slo() {
    let mut sc = short(600.0);
    sc.profile.noise_cv = 0.0;
    let l = run_policy(&sc, Policy::IdealRef, 3).unwrap();
    let slo = sc.streams[0].slo;
    let mut served = 0;
    for r in &l.requests {
        if let (Some(d), Some(c)) = (r.dispatch_time, r.completion) {
            assert!(c - d <= slo + 1e-9, "exec {} exceeds {slo}", c - d);
            served += 1;
        }
    }
    assert!(served > 0);
}

#[test]
fn overload_promotes_an_idle_replica_in_the_same_macro_cycle() {
    // One slow-to-drain Serving replica, two Idle spares that never roll back.
    let mut sc = short(300.0);
    sc.replicas[0].count = 1;
    sc.replicas.push(coserve::config::ReplicaGroup {
        initial_state: ReplicaState::Idle,
        count: 2,
        ..sc.replicas[0]
    });
    sc.state.t_prime = 1000;
    sc = sc.with_scale(10.0);
    let l = run(&sc, 1).unwrap();
    let mut promotions = 0;
    for m in l.macro_log.iter().filter(|m| m.overload) {
        if let Some(r) = m.promoted {
            promotions += 1;
            assert!(l.transitions.iter().any(|t| t.time == m.time
                && t.replica == r
                && t.from == ReplicaState::Idle
                && t.to == ReplicaState::Serving));
        }
    }
    assert!(promotions > 0, "no overload promotion observed");
}

#[test]
fn noise_free_quality_never_drops_on_combined_replicas() {
    let mut sc = short(1200.0);
    sc.convergence.step_noise = 0.0;
    let l = run(&sc, 4).unwrap();
    let mut by_replica: std::collections::BTreeMap<_, Vec<(f64, f64)>> = Default::default();
    for r in &l.requests {
        if r.replica_state == Some(ReplicaState::Combined) {
            by_replica
                .entry(r.replica.unwrap())
                .or_default()
                .push((r.dispatch_time.unwrap(), r.quality().unwrap()));
        }
    }
    assert!(
        !by_replica.is_empty(),
        "no requests served on combined replicas"
    );
    for (rep, mut v) in by_replica {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in v.windows(2) {
            assert!(
                w[1].1 >= w[0].1 - 1e-12,
                "replica {rep}: {:?} then {:?}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn transitions_follow_legal_edges() {
    let sc = Scenario::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../scenarios/bursty_desk.toml"
    ))
    .unwrap();
    for p in Policy::ALL {
        let l = run_policy(&sc, p, 3).unwrap();
        for t in &l.transitions {
            assert!(
                t.from.can_transition_to(t.to),
                "{p}: {:?} -> {:?}",
                t.from,
                t.to
            );
        }
    }
}
