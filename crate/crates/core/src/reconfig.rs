//! Users, bindings and the obligation-policy engine.
//!
//! A [`ContextMonitor`] stamps [`ContextEvent`]s. The [`PolicyEngine`] matches
//! each event against its policies in registration order and runs the actions
//! of every policy whose pattern and condition hold. Bind actions obtain a stub
//! from the [`StubCache`] and hand it to the user's [`UserComponent`].
//!
//! Policy documents are JSON:
//!
//! ```json
//! {"policies": [{
//!   "id": "room1-enter",
//!   "on": {"event": "user_presence", "phase": "enter"},
//!   "if": [{"field": "location", "equals": "/room1"}],
//!   "do": [{"bind": "{location}/light"},
//!          {"invoke": {"key": "{location}/light", "method": "turnOn", "args": {}}},
//!          {"unbind": "{location}/light"}]
//! }]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cache::StubCache;
use crate::clock;
use crate::registry::{self, RegistryError, ServiceDescription};
use crate::vstub::{StubError, VirtualStub};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReconfigError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("user {user:?} has no binding for {key}")]
    NotBound { user: String, key: String },
    #[error(transparent)]
    Stub(#[from] StubError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Enter,
    Leave,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Enter => "enter",
            Phase::Leave => "leave",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub event_type: String,
    pub user_id: String,
    pub location: String,
    pub phase: Phase,
    /// Monotonic nanoseconds (see [`clock::monotonic_ns`]).
    pub emitted_at: u64,
}

/// Emits context events with strictly increasing timestamps.
#[derive(Debug, Default)]
pub struct ContextMonitor {
    last: AtomicU64,
}

impl ContextMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&self, event_type: &str, user_id: &str, location: &str, phase: Phase) -> ContextEvent {
        let mut now = clock::monotonic_ns();
        let mut last = self.last.load(Ordering::SeqCst);
        loop {
            now = now.max(last + 1);
            match self
                .last
                .compare_exchange(last, now, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => break,
                Err(seen) => last = seen,
            }
        }
        ContextEvent {
            event_type: event_type.to_string(),
            user_id: user_id.to_string(),
            location: location.to_string(),
            phase,
            emitted_at: now,
        }
    }
}

/// A user of the environment and the services bound to them.
#[derive(Debug, Clone, Default)]
pub struct UserComponent {
    pub user_id: String,
    bindings: BTreeMap<String, Arc<VirtualStub>>,
}

impl UserComponent {
    pub fn new(user_id: impl Into<String>) -> Self {
        UserComponent {
            user_id: user_id.into(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn binding(&self, key: &str) -> Option<&Arc<VirtualStub>> {
        self.bindings.get(key)
    }

    pub fn is_bound(&self, key: &str) -> bool {
        self.bindings.contains_key(key)
    }

    pub fn bound_keys(&self) -> impl Iterator<Item = &str> {
        self.bindings.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindOutcome {
    Hit,
    Miss,
    Error,
}

/// Timing of one bind: from event emission to the stub being held by the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BindingReport {
    pub user_id: String,
    pub service_key: String,
    pub outcome: BindOutcome,
    pub event_emitted_at: u64,
    pub binding_established_at: u64,
    pub latency_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Binds, unbinds and invokes on behalf of users.
#[derive(Debug)]
pub struct ReconfigurationManager {
    cache: Arc<StubCache>,
    users: BTreeMap<String, UserComponent>,
}

impl ReconfigurationManager {
    pub fn new(cache: Arc<StubCache>) -> Self {
        ReconfigurationManager {
            cache,
            users: BTreeMap::new(),
        }
    }

    pub fn cache(&self) -> &Arc<StubCache> {
        &self.cache
    }

    pub fn user(&self, user_id: &str) -> Option<&UserComponent> {
        self.users.get(user_id)
    }

    pub fn add_user(&mut self, user_id: &str) -> &mut UserComponent {
        self.users
            .entry(user_id.to_string())
            .or_insert_with(|| UserComponent::new(user_id))
    }

    pub fn remove_user(&mut self, user_id: &str) -> Option<UserComponent> {
        self.users.remove(user_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserComponent> {
        self.users.values()
    }

    /// Binds `description` to the user, timing from now.
    pub fn bind(&mut self, user_id: &str, description: &ServiceDescription) -> BindingReport {
        self.bind_since(user_id, description, clock::monotonic_ns())
    }

    /// Binds `description` to the user, timing from `started_at`.
    ///
    /// On error the user's bindings are left as they were.
    pub fn bind_since(&mut self, user_id: &str, description: &ServiceDescription, started_at: u64) -> BindingReport {
        let (outcome, error) = match self.cache.get(description) {
            Ok((stub, how)) => {
                self.add_user(user_id)
                    .bindings
                    .insert(description.key.clone(), stub);
                let outcome = if how.is_hit() { BindOutcome::Hit } else { BindOutcome::Miss };
                (outcome, None)
            }
            Err(e) => (BindOutcome::Error, Some(e.to_string())),
        };
        let established = clock::monotonic_ns().max(started_at);
        BindingReport {
            user_id: user_id.to_string(),
            service_key: description.key.clone(),
            outcome,
            event_emitted_at: started_at,
            binding_established_at: established,
            latency_ns: established - started_at,
            error,
        }
    }

    /// Removes a binding. The cached stub is kept.
    pub fn unbind(&mut self, user_id: &str, key: &str) -> bool {
        self.users
            .get_mut(user_id)
            .map(|u| u.bindings.remove(key).is_some())
            .unwrap_or(false)
    }

    pub fn invoke_bound(&self, user_id: &str, key: &str, method: &str, args: &Value) -> Result<Value, ReconfigError> {
        let stub = self
            .users
            .get(user_id)
            .and_then(|u| u.binding(key))
            .ok_or_else(|| ReconfigError::NotBound {
                user: user_id.to_string(),
                key: key.to_string(),
            })?;
        Ok(stub.invoke(method, args)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionField {
    #[serde(rename = "user_id", alias = "user")]
    UserId,
    #[serde(rename = "location")]
    Location,
    #[serde(rename = "event_type", alias = "event")]
    EventType,
    #[serde(rename = "phase")]
    Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub field: ConditionField,
    pub equals: String,
}

impl Predicate {
    pub fn holds(&self, event: &ContextEvent) -> bool {
        let actual = match self.field {
            ConditionField::UserId => event.user_id.as_str(),
            ConditionField::Location => event.location.as_str(),
            ConditionField::EventType => event.event_type.as_str(),
            ConditionField::Phase => event.phase.as_str(),
        };
        actual == self.equals
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPattern {
    #[serde(rename = "event")]
    pub event_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl EventPattern {
    pub fn matches(&self, event: &ContextEvent) -> bool {
        self.event_type == event.event_type && self.phase.is_none_or(|p| p == event.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvokeAction {
    pub key: String,
    pub method: String,
    #[serde(default = "empty_args")]
    pub args: Value,
}

fn empty_args() -> Value {
    Value::Object(Default::default())
}

/// One step of a policy. Keys are templates; `{location}` and `{user}` are
/// replaced with the triggering event's fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Bind(String),
    Unbind(String),
    Invoke(InvokeAction),
}

impl Action {
    pub fn key_template(&self) -> &str {
        match self {
            Action::Bind(k) | Action::Unbind(k) => k,
            Action::Invoke(i) => &i.key,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Action::Bind(_) => "bind",
            Action::Unbind(_) => "unbind",
            Action::Invoke(_) => "invoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObligationPolicy {
    pub id: String,
    pub on: EventPattern,
    #[serde(rename = "if", default)]
    pub condition: Vec<Predicate>,
    #[serde(rename = "do")]
    pub actions: Vec<Action>,
}

impl ObligationPolicy {
    pub fn applies_to(&self, event: &ContextEvent) -> bool {
        self.on.matches(event) && self.condition.iter().all(|p| p.holds(event))
    }

    fn validate(&self, index: usize) -> Result<(), PolicyError> {
        let at = |field: &str| format!("policies[{index}].{field}");
        if self.id.is_empty() {
            return Err(PolicyError::Invalid {
                field: at("id"),
                message: "must not be empty".into(),
            });
        }
        if self.on.event_type.is_empty() {
            return Err(PolicyError::Invalid {
                field: at("on.event"),
                message: "must not be empty".into(),
            });
        }
        if self.actions.is_empty() {
            return Err(PolicyError::Invalid {
                field: at("do"),
                message: "a policy needs at least one action".into(),
            });
        }
        for (i, action) in self.actions.iter().enumerate() {
            let field = match action {
                Action::Invoke(_) => at(&format!("do[{i}].invoke.key")),
                other => at(&format!("do[{i}].{}", other.kind())),
            };
            check_template(action.key_template()).map_err(|message| PolicyError::Invalid {
                field: field.clone(),
                message,
            })?;
            if let Action::Invoke(inv) = action {
                if !inv.args.is_object() {
                    return Err(PolicyError::Invalid {
                        field: at(&format!("do[{i}].invoke.args")),
                        message: "must be a JSON object".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

const PLACEHOLDERS: [&str; 2] = ["{location}", "{user}"];

fn check_template(template: &str) -> Result<(), String> {
    let mut rest = template.to_string();
    for p in PLACEHOLDERS {
        rest = rest.replace(p, "x");
    }
    if rest.contains('{') || rest.contains('}') {
        return Err(format!(
            "template {template:?} uses a placeholder other than {{location}} and {{user}}"
        ));
    }
    if rest.is_empty() {
        return Err("empty service key".into());
    }
    Ok(())
}

/// Substitutes the event's fields into a key template.
pub fn expand_template(template: &str, event: &ContextEvent) -> String {
    template
        .replace("{location}", event.location.trim_end_matches('/'))
        .replace("{user}", &event.user_id)
}

/// Service description used for a bind to `key`: the type is the last path segment.
pub fn description_for_key(key: &str) -> ServiceDescription {
    let service_type = key.rsplit('/').next().unwrap_or_default();
    ServiceDescription::new(key, service_type)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy parse error at {path} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid policy field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("duplicate policy id {0:?}")]
    DuplicatePolicyId(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    #[serde(default)]
    policies: Vec<ObligationPolicy>,
}

/// Parses and validates a policy document. Blank input yields no policies.
pub fn parse_policies(document: &str) -> Result<Vec<ObligationPolicy>, PolicyError> {
    if document.trim().is_empty() {
        return Ok(Vec::new());
    }
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: PolicyDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        PolicyError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    let mut seen = HashSet::new();
    for (i, p) in doc.policies.iter().enumerate() {
        p.validate(i)?;
        if !seen.insert(p.id.clone()) {
            return Err(PolicyError::DuplicatePolicyId(p.id.clone()));
        }
    }
    Ok(doc.policies)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ActionOutcome {
    Bound { cache: BindOutcome },
    Unbound { removed: bool },
    Invoked { value: Value },
    Failed { error: String },
}

impl ActionOutcome {
    /// Short label without timing or payload: hit, miss, removed, absent, ok, error.
    pub fn label(&self) -> &'static str {
        match self {
            ActionOutcome::Bound { cache: BindOutcome::Hit } => "hit",
            ActionOutcome::Bound { cache: BindOutcome::Miss } => "miss",
            ActionOutcome::Bound { cache: BindOutcome::Error } => "error",
            ActionOutcome::Unbound { removed: true } => "removed",
            ActionOutcome::Unbound { removed: false } => "absent",
            ActionOutcome::Invoked { .. } => "ok",
            ActionOutcome::Failed { .. } => "error",
        }
    }

    pub fn is_error(&self) -> bool {
        self.label() == "error"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionRecord {
    pub policy_id: String,
    /// e.g. `bind /room1/light` or `invoke /room1/light turnOn`.
    pub action: String,
    pub outcome: ActionOutcome,
}

/// What happened in response to one event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventReport {
    pub event: ContextEvent,
    pub bindings: Vec<BindingReport>,
    pub actions: Vec<ActionRecord>,
}

impl EventReport {
    pub fn error_count(&self) -> usize {
        self.actions.iter().filter(|a| a.outcome.is_error()).count()
    }

    /// (policy, action, outcome label) triples.
    pub fn trace(&self) -> Vec<(String, String, &'static str)> {
        self.actions
            .iter()
            .map(|a| (a.policy_id.clone(), a.action.clone(), a.outcome.label()))
            .collect()
    }
}

/// Evaluates obligation policies against context events, one event at a time.
#[derive(Debug)]
pub struct PolicyEngine {
    policies: Vec<ObligationPolicy>,
    manager: ReconfigurationManager,
}

impl PolicyEngine {
    pub fn new(manager: ReconfigurationManager) -> Self {
        PolicyEngine {
            policies: Vec::new(),
            manager,
        }
    }

    pub fn manager(&self) -> &ReconfigurationManager {
        &self.manager
    }

    pub fn manager_mut(&mut self) -> &mut ReconfigurationManager {
        &mut self.manager
    }

    pub fn policies(&self) -> &[ObligationPolicy] {
        &self.policies
    }

    /// Parses `document` and appends its policies in document order.
    /// Nothing is registered if any policy is rejected.
    pub fn load_policies(&mut self, document: &str) -> Result<usize, PolicyError> {
        let parsed = parse_policies(document)?;
        if let Some(dup) = parsed
            .iter()
            .find(|p| self.policies.iter().any(|q| q.id == p.id))
        {
            return Err(PolicyError::DuplicatePolicyId(dup.id.clone()));
        }
        let n = parsed.len();
        self.policies.extend(parsed);
        Ok(n)
    }

    pub fn add_policy(&mut self, policy: ObligationPolicy) -> Result<(), PolicyError> {
        policy.validate(self.policies.len())?;
        if self.policies.iter().any(|q| q.id == policy.id) {
            return Err(PolicyError::DuplicatePolicyId(policy.id));
        }
        self.policies.push(policy);
        Ok(())
    }

    /// Runs every applicable policy. A failing action stops the rest of its
    /// policy; other policies still run.
    pub fn submit_event(&mut self, event: &ContextEvent) -> EventReport {
        let mut report = EventReport {
            event: event.clone(),
            bindings: Vec::new(),
            actions: Vec::new(),
        };
        let manager = &mut self.manager;
        for policy in self.policies.iter().filter(|p| p.applies_to(event)) {
            for action in &policy.actions {
                let key = expand_template(action.key_template(), event);
                let (label, outcome) = run_action(manager, action, &key, event, &mut report.bindings);
                let failed = outcome.is_error();
                if failed {
                    log::warn!("policy {}: {label} failed: {outcome:?}", policy.id);
                }
                report.actions.push(ActionRecord {
                    policy_id: policy.id.clone(),
                    action: label,
                    outcome,
                });
                if failed {
                    break;
                }
            }
        }
        report
    }
}

fn run_action(
    manager: &mut ReconfigurationManager,
    action: &Action,
    key: &str,
    event: &ContextEvent,
    bindings: &mut Vec<BindingReport>,
) -> (String, ActionOutcome) {
    let user = event.user_id.as_str();
    match action {
        Action::Bind(_) => {
            let label = format!("bind {key}");
            if let Err(e) = registry::validate_key(key) {
                bindings.push(BindingReport {
                    user_id: user.to_string(),
                    service_key: key.to_string(),
                    outcome: BindOutcome::Error,
                    event_emitted_at: event.emitted_at,
                    binding_established_at: event.emitted_at,
                    latency_ns: 0,
                    error: Some(e.to_string()),
                });
                return (label, ActionOutcome::Failed { error: e.to_string() });
            }
            let r = manager.bind_since(user, &description_for_key(key), event.emitted_at);
            let outcome = match &r.error {
                Some(e) => ActionOutcome::Failed { error: e.clone() },
                None => ActionOutcome::Bound { cache: r.outcome },
            };
            bindings.push(r);
            (label, outcome)
        }
        Action::Unbind(_) => (
            format!("unbind {key}"),
            ActionOutcome::Unbound {
                removed: manager.unbind(user, key),
            },
        ),
        Action::Invoke(inv) => {
            let label = format!("invoke {key} {}", inv.method);
            let outcome = match manager.invoke_bound(user, key, &inv.method, &inv.args) {
                Ok(value) => ActionOutcome::Invoked { value },
                Err(e) => ActionOutcome::Failed { error: e.to_string() },
            };
            (label, outcome)
        }
    }
}

impl fmt::Display for ContextEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.event_type,
            self.user_id,
            self.phase.as_str(),
            self.location
        )
    }
}

/// The bundled room1 policy set: bind and switch on light and AC on entry,
/// switch off and unbind on leave.
pub const ROOM1_POLICIES: &str = include_str!("../scenarios/room1_policies.json");

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn event(user: &str, location: &str, phase: Phase) -> ContextEvent {
        ContextEvent {
            event_type: "user_presence".into(),
            user_id: user.into(),
            location: location.into(),
            phase,
            emitted_at: 0,
        }
    }

    #[test]
    fn bundled_policies_load() {
        let p = parse_policies(ROOM1_POLICIES).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].on.phase, Some(Phase::Enter));
        assert_eq!(p[1].on.phase, Some(Phase::Leave));
    }

    #[test]
    fn empty_documents() {
        assert!(parse_policies("").unwrap().is_empty());
        assert!(parse_policies("  \n").unwrap().is_empty());
        assert!(parse_policies(r#"{"policies": []}"#).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = r#"{"policies": [
            {"id": "p", "on": {"event": "e"}, "do": [{"bind": "/a"}]},
            {"id": "p", "on": {"event": "e"}, "do": [{"bind": "/b"}]}
        ]}"#;
        assert_eq!(parse_policies(doc), Err(PolicyError::DuplicatePolicyId("p".into())));
    }

    #[test]
    fn parse_errors_carry_location() {
        let doc = "{\"policies\": [\n  {\"id\": \"p\", \"on\": {\"event\": \"e\"}, \"do\": [{\"teleport\": \"/a\"}]}\n]}";
        match parse_policies(doc).unwrap_err() {
            PolicyError::Parse { path, line, .. } => {
                assert!(path.starts_with("policies[0].do[0]"), "{path}");
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_validation() {
        let no_actions = r#"{"policies": [{"id": "p", "on": {"event": "e"}, "do": []}]}"#;
        assert!(matches!(
            parse_policies(no_actions),
            Err(PolicyError::Invalid { field, .. }) if field == "policies[0].do"
        ));
        let no_event = r#"{"policies": [{"id": "p", "on": {"event": ""}, "do": [{"bind": "/a"}]}]}"#;
        assert!(matches!(parse_policies(no_event), Err(PolicyError::Invalid { .. })));
        let bad_tpl = r#"{"policies": [{"id": "p", "on": {"event": "e"}, "do": [{"bind": "{room}/a"}]}]}"#;
        assert!(matches!(
            parse_policies(bad_tpl),
            Err(PolicyError::Invalid { field, .. }) if field == "policies[0].do[0].bind"
        ));
        let bad_args = r#"{"policies": [{"id": "p", "on": {"event": "e"},
            "do": [{"invoke": {"key": "/a", "method": "m", "args": 3}}]}]}"#;
        assert!(matches!(parse_policies(bad_args), Err(PolicyError::Invalid { .. })));
    }

    #[test]
    fn patterns_and_conditions() {
        let p = &parse_policies(ROOM1_POLICIES).unwrap()[0];
        assert!(p.applies_to(&event("a", "/room1", Phase::Enter)));
        assert!(!p.applies_to(&event("a", "/room1", Phase::Leave)));
        assert!(!p.applies_to(&event("a", "/room2", Phase::Enter)));
        let mut other = event("a", "/room1", Phase::Enter);
        other.event_type = "temperature".into();
        assert!(!p.applies_to(&other));

        let any_phase = EventPattern {
            event_type: "user_presence".into(),
            phase: None,
        };
        assert!(any_phase.matches(&event("a", "/x", Phase::Leave)));
        let who = Predicate {
            field: ConditionField::UserId,
            equals: "bob".into(),
        };
        assert!(who.holds(&event("bob", "/x", Phase::Enter)));
        assert!(!who.holds(&event("alice", "/x", Phase::Enter)));
    }

    #[test]
    fn template_expansion() {
        let e = event("bob", "/room1", Phase::Enter);
        assert_eq!(expand_template("{location}/light", &e), "/room1/light");
        assert_eq!(expand_template("/desk/{user}", &e), "/desk/bob");
        let trailing = event("bob", "/room1/", Phase::Enter);
        assert_eq!(expand_template("{location}/ac", &trailing), "/room1/ac");
    }

    #[test]
    fn description_type_from_key() {
        let d = description_for_key("/room1/ac");
        assert_eq!((d.key.as_str(), d.service_type.as_str()), ("/room1/ac", "ac"));
    }

    #[test]
    fn monitor_timestamps_strictly_increase() {
        let m = ContextMonitor::new();
        let mut last = 0;
        for _ in 0..1000 {
            let e = m.emit("user_presence", "u", "/room1", Phase::Enter);
            assert!(e.emitted_at > last);
            last = e.emitted_at;
        }
    }

    #[test]
    fn action_json_shapes() {
        let a: Action = serde_json::from_value(json!({"invoke": {"key": "/a", "method": "m"}})).unwrap();
        assert_eq!(a, Action::Invoke(InvokeAction { key: "/a".into(), method: "m".into(), args: json!({}) }));
        let b: Action = serde_json::from_value(json!({"unbind": "{location}/ac"})).unwrap();
        assert_eq!(b.kind(), "unbind");
    }
}
