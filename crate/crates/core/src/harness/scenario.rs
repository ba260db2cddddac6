use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::testbed::{Deployment, ServiceSpec, Testbed};
use super::HarnessError;
use crate::cache::{CacheStats, StubCache};
use crate::reconfig::{ContextMonitor, EventReport, Phase, PolicyEngine, ReconfigurationManager};

/// The bundled two-user room scenario. Its `policy_file` resolves against
/// the bundled policies when run through [`run_scenario_str`] with no base directory.
pub const ROOM1_SCENARIO: &str = include_str!("../../scenarios/room1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub users: Vec<String>,
    /// Inline policy document, same schema as a policy file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<Value>,
    /// Policy file path, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_file: Option<String>,
    #[serde(default)]
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directive {
    Stop,
    Start,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectiveStep {
    pub t_ms: u64,
    pub directive: Directive,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventStep {
    pub t_ms: u64,
    pub event_type: String,
    pub user: String,
    pub location: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceStep {
    Directive(DirectiveStep),
    Event(EventStep),
}

impl TraceStep {
    pub fn t_ms(&self) -> u64 {
        match self {
            TraceStep::Directive(d) => d.t_ms,
            TraceStep::Event(e) => e.t_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub events: Vec<EventReport>,
    pub directives: Vec<DirectiveStep>,
    /// Device state per service key after the trace; `null` for stopped services.
    pub device_states: BTreeMap<String, Value>,
    pub cache_stats: CacheStats,
    pub failovers: u64,
    pub cache: Value,
    /// Number of failed actions over all events.
    pub errors: usize,
}

impl ScenarioReport {
    /// `(policy, action, outcome)` triples in execution order, without timings.
    pub fn trace(&self) -> Vec<(String, String, &'static str)> {
        self.events.iter().flat_map(EventReport::trace).collect()
    }
}

impl Scenario {
    pub fn parse(json: &str) -> Result<Scenario, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            HarnessError::Parse(format!(
                "scenario at {} (line {}, column {}): {inner}",
                e.path(),
                inner.line(),
                inner.column()
            ))
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.policies.is_some() && self.policy_file.is_some() {
            return Err(HarnessError::Parse("give either policies or policy_file, not both".into()));
        }
        let keys: BTreeSet<&str> = self.services.iter().map(|s| s.key.as_str()).collect();
        let users: BTreeSet<&str> = self.users.iter().map(String::as_str).collect();
        let mut last = 0;
        for (i, step) in self.trace.iter().enumerate() {
            if step.t_ms() < last {
                return Err(HarnessError::Parse(format!("trace[{i}]: t_ms goes backwards")));
            }
            last = step.t_ms();
            match step {
                TraceStep::Directive(d) if !keys.contains(d.key.as_str()) => {
                    return Err(HarnessError::Parse(format!("trace[{i}]: unknown service {}", d.key)));
                }
                TraceStep::Event(e) if !users.is_empty() && !users.contains(e.user.as_str()) => {
                    return Err(HarnessError::Parse(format!("trace[{i}]: undeclared user {}", e.user)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn policy_document(&self, base_dir: Option<&Path>) -> Result<Option<String>, HarnessError> {
        if let Some(v) = &self.policies {
            return Ok(Some(v.to_string()));
        }
        let Some(file) = &self.policy_file else {
            return Ok(None);
        };
        match base_dir {
            Some(dir) => std::fs::read_to_string(dir.join(file))
                .map(Some)
                .map_err(|e| HarnessError::Setup(format!("policy file {file}: {e}"))),
            None if file == "room1_policies.json" => Ok(Some(crate::reconfig::ROOM1_POLICIES.to_string())),
            None => Err(HarnessError::Setup(format!("policy file {file} needs a base directory"))),
        }
    }
}

/// Loads and replays the scenario file at `path`.
pub fn run_scenario(path: &Path) -> Result<ScenarioReport, HarnessError> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Setup(format!("scenario file {}: {e}", path.display())))?;
    run_scenario_str(&json, path.parent())
}

/// Replays a scenario in-process, honoring `t_ms` offsets from the first step.
pub fn run_scenario_str(json: &str, base_dir: Option<&Path>) -> Result<ScenarioReport, HarnessError> {
    let scenario = Scenario::parse(json)?;
    let policies = scenario.policy_document(base_dir)?;
    let mut bed = Testbed::start(Deployment::InProcess, &scenario.services)?;

    let cache = StubCache::new(bed.client());
    let mut manager = ReconfigurationManager::new(cache.clone());
    for u in &scenario.users {
        manager.add_user(u);
    }
    let mut engine = PolicyEngine::new(manager);
    if let Some(doc) = policies {
        engine
            .load_policies(&doc)
            .map_err(|e| HarnessError::Parse(format!("policies: {e}")))?;
    }

    let monitor = ContextMonitor::new();
    let mut events = Vec::new();
    let mut directives = Vec::new();
    let start = Instant::now();
    for step in &scenario.trace {
        let due = start + Duration::from_millis(step.t_ms());
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        match step {
            TraceStep::Directive(d) => {
                log::info!("t={}ms {:?} {}", d.t_ms, d.directive, d.key);
                match d.directive {
                    Directive::Stop => bed.stop_service(&d.key)?,
                    Directive::Start => bed.start_service(&d.key)?,
                    Directive::Restart => bed.restart_service(&d.key)?,
                }
                directives.push(d.clone());
            }
            TraceStep::Event(e) => {
                let event = monitor.emit(&e.event_type, &e.user, &e.location, e.phase);
                let report = engine.submit_event(&event);
                log::info!(
                    "t={}ms {} {} {}: {} actions, {} failed",
                    e.t_ms,
                    e.user,
                    e.phase.as_str(),
                    e.location,
                    report.actions.len(),
                    report.error_count()
                );
                events.push(report);
            }
        }
    }

    let errors = events.iter().map(EventReport::error_count).sum();
    Ok(ScenarioReport {
        device_states: bed.device_states()?,
        cache_stats: cache.stats(),
        failovers: cache.total_failovers(),
        cache: cache.dump(),
        events,
        directives,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenario_parses() {
        let s = Scenario::parse(ROOM1_SCENARIO).unwrap();
        assert_eq!(s.services.len(), 2);
        assert_eq!(s.trace.len(), 3);
        assert!(matches!(&s.trace[1], TraceStep::Event(e) if e.phase == Phase::Leave));
    }

    #[test]
    fn directive_step_parses() {
        let s: TraceStep = serde_json::from_str(r#"{"t_ms":5,"directive":"restart","key":"/a/light"}"#).unwrap();
        assert_eq!(
            s,
            TraceStep::Directive(DirectiveStep {
                t_ms: 5,
                directive: Directive::Restart,
                key: "/a/light".into()
            })
        );
    }

    #[test]
    fn bad_scenarios_rejected() {
        let cases = [
            r#"{"services":[],"trace":[{"t_ms":0,"event_type":"x","user":"u","location":"/r","phase":"sideways"}]}"#,
            r#"{"services":[],"trace":[{"t_ms":0,"directive":"restart","key":"/nope"}]}"#,
            r#"{"services":[],"users":["a"],"trace":[{"t_ms":0,"event_type":"x","user":"b","location":"/r","phase":"enter"}]}"#,
            r#"{"services":[],"trace":[
                {"t_ms":9,"event_type":"x","user":"u","location":"/r","phase":"enter"},
                {"t_ms":1,"event_type":"x","user":"u","location":"/r","phase":"leave"}]}"#,
            r#"{"services":[],"policies":{"policies":[]},"policy_file":"p.json"}"#,
            r#"{"services":[], "bogus": 1}"#,
        ];
        for c in cases {
            assert!(matches!(Scenario::parse(c), Err(HarnessError::Parse(_))), "{c}");
        }
    }

    #[test]
    fn empty_trace_leaves_initial_state() {
        let json = r#"{"services":[{"key":"/r/light","type":"light"}],"trace":[]}"#;
        let r = run_scenario_str(json, None).unwrap();
        assert!(r.events.is_empty());
        assert_eq!(r.errors, 0);
        assert_eq!(r.device_states["/r/light"]["status"], "off");
        assert_eq!(r.cache_stats, CacheStats::default());
    }
}
