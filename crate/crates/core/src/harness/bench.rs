use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{summarize, Summary};
use super::testbed::{Deployment, ServiceSpec, Testbed};
use super::HarnessError;
use crate::cache::{CacheMode, StubCache};
use crate::reconfig::{
    Action, BindOutcome, ConditionField, ContextMonitor, EventPattern, ObligationPolicy, Phase, PolicyEngine,
    Predicate, ReconfigurationManager,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchMode {
    /// Warm cache; timed triggers take the hit path.
    #[serde(rename = "cached")]
    Cached,
    /// Cache bypassed; every bind looks the service up.
    #[serde(rename = "uncached")]
    Uncached,
    /// Cache cleared before every trial.
    #[serde(rename = "cold-clear")]
    ColdClear,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Cached => "cached",
            BenchMode::Uncached => "uncached",
            BenchMode::ColdClear => "cold-clear",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cached" => Ok(BenchMode::Cached),
            "uncached" => Ok(BenchMode::Uncached),
            "cold-clear" => Ok(BenchMode::ColdClear),
            other => Err(HarnessError::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialOutcome {
    Hit,
    Miss,
    Bypass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    #[serde(rename = "trial")]
    pub trial_index: usize,
    pub mode: BenchMode,
    pub latency_ns: u64,
    #[serde(rename = "registry_lookups")]
    pub registry_lookups_delta: u64,
    pub cache_outcome: TrialOutcome,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub trials: usize,
    /// Untimed triggers before measuring; cached mode only.
    pub warmup_trials: usize,
    pub bindings_per_trigger: usize,
    pub deployment: Deployment,
    pub seed: u64,
    pub location: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Cached,
            trials: 20,
            warmup_trials: 1,
            bindings_per_trigger: 1,
            deployment: Deployment::InProcess,
            seed: 0,
            location: "/room1".into(),
        }
    }
}

impl BenchConfig {
    pub fn new(mode: BenchMode) -> Self {
        BenchConfig {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trials < 2 {
            return Err(HarnessError::InvalidConfig(format!(
                "trials must be at least 2 (got {})",
                self.trials
            )));
        }
        if self.bindings_per_trigger < 1 {
            return Err(HarnessError::InvalidConfig("bindings_per_trigger must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub records: Vec<TrialRecord>,
    pub summary: Summary,
}

const BENCH_TYPES: [&str; 2] = ["light", "ac"];

/// Service names bound by the benchmark policy: light, ac, light2, ac2, light3, ...
fn bench_service_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            let base = BENCH_TYPES[i % 2];
            match i / 2 {
                0 => base.to_string(),
                n => format!("{base}{}", n + 1),
            }
        })
        .collect()
}

/// The services a benchmark with `k` bindings per trigger needs at `location`.
pub fn bench_services(location: &str, k: usize) -> Vec<ServiceSpec> {
    bench_service_names(k)
        .into_iter()
        .enumerate()
        .map(|(i, name)| ServiceSpec::new(&format!("{location}/{name}"), BENCH_TYPES[i % 2]))
        .collect()
}

/// A presence policy whose only actions bind `k` services at the event's location.
pub fn bench_policy(location: &str, k: usize) -> ObligationPolicy {
    ObligationPolicy {
        id: "bench-bind".into(),
        on: EventPattern {
            event_type: "user_presence".into(),
            phase: Some(Phase::Enter),
        },
        condition: vec![Predicate {
            field: ConditionField::Location,
            equals: location.into(),
        }],
        actions: bench_service_names(k)
            .into_iter()
            .map(|name| Action::Bind(format!("{{location}}/{name}")))
            .collect(),
    }
}

/// Starts a testbed, runs the benchmark on it and tears it down.
pub fn run_bench(config: &BenchConfig) -> Result<BenchRun, HarnessError> {
    config.validate()?;
    let bed = Testbed::start(
        config.deployment.clone(),
        &bench_services(&config.location, config.bindings_per_trigger),
    )?;
    run_bench_on(&bed, config)
}

/// Runs the benchmark against an existing testbed, with a fresh cache.
pub fn run_bench_on(bed: &Testbed, config: &BenchConfig) -> Result<BenchRun, HarnessError> {
    config.validate()?;
    for spec in bench_services(&config.location, config.bindings_per_trigger) {
        if !bed.service_keys().any(|k| k == spec.key) {
            return Err(HarnessError::Setup(format!("testbed lacks service {}", spec.key)));
        }
    }
    let registry = bed.client();
    let cache = StubCache::new(registry.clone());
    if config.mode == BenchMode::Uncached {
        cache.set_mode(CacheMode::Bypass);
    }
    let mut engine = PolicyEngine::new(ReconfigurationManager::new(cache.clone()));
    engine
        .add_policy(bench_policy(&config.location, config.bindings_per_trigger))
        .map_err(|e| HarnessError::Setup(e.to_string()))?;
    let monitor = ContextMonitor::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lookups = || {
        registry
            .stats()
            .map(|s| s.lookup_count)
            .map_err(|e| HarnessError::Setup(format!("registry stats: {e}")))
    };

    if config.mode == BenchMode::Cached {
        for w in 0..config.warmup_trials {
            let user = format!("warmup-{w}");
            let event = monitor.emit("user_presence", &user, &config.location, Phase::Enter);
            let report = engine.submit_event(&event);
            if let Some(err) = report.bindings.iter().find_map(|b| b.error.clone()) {
                return Err(HarnessError::Setup(format!("warm-up trigger failed: {err}")));
            }
            engine.manager_mut().remove_user(&user);
        }
    }

    let mut records = Vec::with_capacity(config.trials);
    for index in 0..config.trials {
        if config.mode == BenchMode::ColdClear {
            cache.clear();
        }
        let user = format!("user-{:016x}", rng.random::<u64>());
        let before = lookups()?;

        // Timed interval: from the event stamp to the last binding in the report.
        let event = monitor.emit("user_presence", &user, &config.location, Phase::Enter);
        let report = engine.submit_event(&event);

        let after = lookups()?;
        engine.manager_mut().remove_user(&user);

        if let Some(err) = report.bindings.iter().find_map(|b| b.error.clone()) {
            return Err(HarnessError::Trial {
                index,
                message: err,
                partial: records,
            });
        }
        if report.bindings.len() != config.bindings_per_trigger {
            return Err(HarnessError::Trial {
                index,
                message: format!(
                    "expected {} bindings, policy produced {}",
                    config.bindings_per_trigger,
                    report.bindings.len()
                ),
                partial: records,
            });
        }
        let latency_ns = report
            .bindings
            .iter()
            .map(|b| b.latency_ns)
            .max()
            .unwrap_or(0);
        let cache_outcome = match config.mode {
            BenchMode::Uncached => TrialOutcome::Bypass,
            _ if report.bindings.iter().all(|b| b.outcome == BindOutcome::Hit) => TrialOutcome::Hit,
            _ => TrialOutcome::Miss,
        };
        records.push(TrialRecord {
            trial_index: index,
            mode: config.mode,
            latency_ns,
            registry_lookups_delta: after - before,
            cache_outcome,
        });
    }
    let summary = summarize(&records)?;
    Ok(BenchRun { records, summary })
}
