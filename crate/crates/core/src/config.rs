//! Scenario configuration (TOML). Every field has a default, so a file only
//! needs to state what differs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convergence::ConvergenceParams;
use crate::coordinator::CoordinatorConfig;
use crate::dispatcher::{DispatcherConfig, Policy};
use crate::domain::{ModelId, ReplicaState, StreamId};
use crate::error::{Error, Result};
use crate::launcher::LauncherConfig;
use crate::perf::ReplicaPerfProfile;
use crate::state_manager::StateConfig;
use crate::workload::{WorkloadKind, WorkloadSpec};

/// An original request stream: one model and one SLO class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub id: StreamId,
    pub model: ModelId,
    /// Latency SLO in seconds.
    pub slo: f64,
}

/// `count` identical replicas serving `model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaGroup {
    pub model: ModelId,
    pub count: usize,
    /// Overrides the scenario-wide profile.
    #[serde(default)]
    pub profile: Option<ReplicaPerfProfile>,
    #[serde(default = "serving")]
    pub initial_state: ReplicaState,
}

fn serving() -> ReplicaState {
    ReplicaState::Serving
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Mean loss that defines the joint completion time.
    pub jct_target_loss: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            jct_target_loss: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Simulated horizon in seconds.
    pub duration: f64,
    pub policy: Policy,
    pub streams: Vec<StreamSpec>,
    pub workloads: Vec<WorkloadSpec>,
    pub replicas: Vec<ReplicaGroup>,
    /// Default performance profile for every replica group.
    pub profile: ReplicaPerfProfile,
    pub convergence: ConvergenceParams,
    pub state: StateConfig,
    pub launcher: LauncherConfig,
    pub coordinator: CoordinatorConfig,
    pub dispatcher: DispatcherConfig,
    pub report: ReportConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            duration: 600.0,
            policy: Policy::Subflow,
            streams: vec![StreamSpec {
                id: StreamId(0),
                model: ModelId(0),
                slo: 0.5,
            }],
            workloads: vec![WorkloadSpec::default()],
            replicas: vec![ReplicaGroup {
                model: ModelId(0),
                count: 4,
                profile: None,
                initial_state: ReplicaState::Serving,
            }],
            profile: ReplicaPerfProfile::default(),
            convergence: ConvergenceParams::default(),
            state: StateConfig::default(),
            launcher: LauncherConfig::default(),
            coordinator: CoordinatorConfig::default(),
            dispatcher: DispatcherConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Parse and validate a file. Relative trace paths resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for w in &mut s.workloads {
            if let Some(p) = &w.trace_path {
                if p.is_relative() {
                    w.trace_path = Some(base.join(p));
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn stream(&self, id: StreamId) -> Option<&StreamSpec> {
        self.streams.iter().find(|s| s.id == id)
    }

    pub fn stream_of_model(&self, model: ModelId) -> Option<&StreamSpec> {
        self.streams.iter().find(|s| s.model == model)
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.iter().map(|g| g.count).sum()
    }

    /// Set the scale of every workload.
    pub fn with_scale(mut self, scale: f64) -> Self {
        for w in &mut self.workloads {
            w.scale = scale;
        }
        self
    }

    /// SHA-256 over the canonical JSON form with the policy field blanked, so
    /// runs of different policies on one scenario share a hash.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.policy = Policy::default();
        let bytes = serde_json::to_vec(&canonical).expect("scenario serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(Error::Config(format!(
                "duration must be finite and non-negative, got {}",
                self.duration
            )));
        }
        let mut ids = BTreeSet::new();
        let mut models = BTreeMap::new();
        for s in &self.streams {
            if !ids.insert(s.id) {
                return Err(Error::Config(format!("streams: duplicate id {}", s.id.0)));
            }
            if let Some(prev) = models.insert(s.model, s.id) {
                return Err(Error::Config(format!(
                    "streams: model {} is served by streams {} and {}; one stream per model is supported",
                    s.model.0, prev.0, s.id.0
                )));
            }
            if !(s.slo > 0.0) || !s.slo.is_finite() {
                return Err(Error::Config(format!(
                    "streams[{}].slo must be positive",
                    s.id.0
                )));
            }
            if !self
                .replicas
                .iter()
                .any(|g| g.model == s.model && g.count > 0)
            {
                return Err(Error::Config(format!(
                    "streams[{}]: no replica serves model {}",
                    s.id.0, s.model.0
                )));
            }
        }
        for (i, w) in self.workloads.iter().enumerate() {
            if !ids.contains(&w.stream) {
                return Err(Error::Config(format!(
                    "workloads[{i}].stream {} is not declared",
                    w.stream.0
                )));
            }
            if w.kind == WorkloadKind::Trace && w.trace_path.is_none() {
                return Err(Error::Config(format!(
                    "workloads[{i}]: kind = \"trace\" requires trace_path"
                )));
            }
            if w.kind != WorkloadKind::Trace && !(w.base_rate > 0.0) {
                return Err(Error::Config(format!(
                    "workloads[{i}].base_rate must be positive"
                )));
            }
            if !(w.scale > 0.0) || !w.scale.is_finite() {
                return Err(Error::Config(format!(
                    "workloads[{i}].scale must be positive"
                )));
            }
            if !(w.duration >= 0.0) {
                return Err(Error::Config(format!(
                    "workloads[{i}].duration must be non-negative"
                )));
            }
        }
        if self.replica_count() == 0 {
            return Err(Error::Config(
                "replicas: at least one replica is required".into(),
            ));
        }
        self.profile.validate().map_err(|e| prefix("profile", e))?;
        for (i, g) in self.replicas.iter().enumerate() {
            if let Some(p) = &g.profile {
                p.validate()
                    .map_err(|e| prefix(&format!("replicas[{i}].profile"), e))?;
            }
            if g.initial_state == ReplicaState::Combined {
                return Err(Error::Config(format!(
                    "replicas[{i}].initial_state cannot be combined"
                )));
            }
        }
        self.convergence
            .validate()
            .map_err(|e| prefix("convergence", e))?;
        self.state.validate().map_err(|e| prefix("state", e))?;
        self.launcher
            .validate()
            .map_err(|e| prefix("launcher", e))?;
        self.coordinator
            .validate()
            .map_err(|e| prefix("coordinator", e))?;
        self.dispatcher
            .validate()
            .map_err(|e| prefix("dispatcher", e))?;
        if !(self.report.jct_target_loss > 0.0) {
            return Err(Error::Config(
                "report.jct_target_loss must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("[{section}] {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let s = Scenario::default();
        s.validate().unwrap();
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml_str(&text).unwrap(), s);
        assert_eq!(Scenario::from_toml_str("").unwrap(), s);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let s = Scenario::from_toml_str(
            r#"
            duration = 120.0
            policy = "greedy"
            [dispatcher]
            smoothing = "literal"
            [coordinator]
            fixed = [8, 12]
            "#,
        )
        .unwrap();
        assert_eq!(s.duration, 120.0);
        assert_eq!(s.policy, Policy::Greedy);
        assert_eq!(s.coordinator.fixed, Some((8, 12)));
        assert_eq!(s.state.window, 30);
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = |t: &str| Scenario::from_toml_str(t).unwrap_err().to_string();
        assert!(err("policy = \"fastest\"").contains("policy"));
        assert!(err("[profile]\nnoise_cv = 0.5").contains("noise_cv"));
        assert!(err("bogus = 1").contains("bogus"));
        assert!(err(
            "[[streams]]\nid = 0\nmodel = 0\nslo = 0.5\n[[streams]]\nid = 1\nmodel = 0\nslo = 0.4"
        )
        .contains("one stream per model"));
        assert!(err("[[workloads]]\nstream = 9").contains("workloads[0].stream"));
    }

    #[test]
    fn hash_ignores_policy_only() {
        let a = Scenario::default();
        let b = Scenario {
            policy: Policy::RoundRobin,
            ..a.clone()
        };
        let c = Scenario {
            duration: 61.0,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
