//! Virtual stubs: client-side wrappers around a proxy descriptor.
//!
//! A stub forwards every call to the service incarnation it currently points
//! at. When that incarnation is gone (transport failure) or has been replaced
//! (stale epoch), the stub looks the key up again, swaps in the new
//! descriptor, tells its cache about the change and retries the call. Logical
//! errors from the service are passed through untouched.
//!
//! Retries are at-least-once: if the failed attempt reached the service before
//! the connection died, the retry can execute the method a second time.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, Weak};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock;
use crate::registry::{ProxyDescriptor, RegistryClient, RegistryError, ServiceDescription};
use crate::service_host::{self, BindingFault, InvokeError};
use crate::wire;

/// Default number of failover cycles per call.
pub const DEFAULT_RETRY_BUDGET: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StubError {
    #[error("proxy key {proxy:?} does not match service key {service:?}")]
    KeyMismatch { service: String, proxy: String },
    #[error("binding to {key} could not be re-established: {reason}")]
    UnresolvableBinding { key: String, reason: String },
    #[error("no such method {0:?}")]
    NoSuchMethod(String),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("internal service error: {0}")]
    Internal(String),
    #[error("registry unavailable during failover: {0}")]
    RegistryUnavailable(String),
    #[error("registry error during failover: {0}")]
    Registry(RegistryError),
}

/// Receives copies of stubs that swapped their proxy.
pub trait StubListener: Send + Sync {
    fn stub_updated(&self, snapshot: StubSnapshot);
}

/// An immutable copy of a stub's binding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StubSnapshot {
    pub description: ServiceDescription,
    pub proxy: ProxyDescriptor,
    pub captured_at: u64,
}

impl StubSnapshot {
    pub fn key(&self) -> &str {
        &self.description.key
    }

    /// `{"key", "host", "port", "service_id", "epoch"}`.
    pub fn canonical_json(&self) -> Value {
        json!({
            "key": self.proxy.key,
            "host": self.proxy.host,
            "port": self.proxy.port,
            "service_id": self.proxy.service_id,
            "epoch": self.proxy.epoch,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StubCounters {
    pub calls_total: u64,
    pub failovers: u64,
    pub retries: u64,
    pub attempts: u64,
    pub lookups: u64,
}

pub struct VirtualStub {
    description: ServiceDescription,
    proxy: RwLock<ProxyDescriptor>,
    registry: Arc<RegistryClient>,
    notifier: Option<Weak<dyn StubListener>>,
    retry_budget: u32,
    call_timeout: Duration,
    calls_total: AtomicU64,
    failovers: AtomicU64,
    retries: AtomicU64,
    attempts: AtomicU64,
    lookups: AtomicU64,
}

impl std::fmt::Debug for VirtualStub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirtualStub")
            .field("key", &self.description.key)
            .field("proxy", &*self.proxy.read().unwrap())
            .field("counters", &self.counters())
            .finish()
    }
}

impl VirtualStub {
    pub fn new(
        description: ServiceDescription,
        proxy: ProxyDescriptor,
        registry: Arc<RegistryClient>,
        notifier: Option<Weak<dyn StubListener>>,
    ) -> Result<VirtualStub, StubError> {
        if proxy.key != description.key {
            return Err(StubError::KeyMismatch {
                service: description.key,
                proxy: proxy.key,
            });
        }
        Ok(VirtualStub {
            description,
            proxy: RwLock::new(proxy),
            registry,
            notifier,
            retry_budget: DEFAULT_RETRY_BUDGET,
            call_timeout: wire::DEFAULT_IO_TIMEOUT,
            calls_total: AtomicU64::new(0),
            failovers: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            lookups: AtomicU64::new(0),
        })
    }

    pub fn with_retry_budget(mut self, budget: u32) -> Self {
        self.retry_budget = budget;
        self
    }

    pub fn with_call_timeout(mut self, timeout: Duration) -> Self {
        self.call_timeout = timeout;
        self
    }

    pub fn description(&self) -> &ServiceDescription {
        &self.description
    }

    pub fn key(&self) -> &str {
        &self.description.key
    }

    pub fn registry_addr(&self) -> SocketAddr {
        self.registry.addr()
    }

    pub fn proxy(&self) -> ProxyDescriptor {
        self.proxy.read().unwrap().clone()
    }

    pub fn epoch(&self) -> u64 {
        self.proxy.read().unwrap().epoch
    }

    pub fn counters(&self) -> StubCounters {
        StubCounters {
            calls_total: self.calls_total.load(Ordering::SeqCst),
            failovers: self.failovers.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            attempts: self.attempts.load(Ordering::SeqCst),
            lookups: self.lookups.load(Ordering::SeqCst),
        }
    }

    pub fn snapshot(&self) -> StubSnapshot {
        StubSnapshot {
            description: self.description.clone(),
            proxy: self.proxy(),
            captured_at: clock::monotonic_ns(),
        }
    }

    /// Swaps in `proxy` if it names the same key with a strictly newer epoch.
    pub fn install_proxy(&self, proxy: ProxyDescriptor) -> bool {
        if proxy.key != self.description.key {
            return false;
        }
        let mut current = self.proxy.write().unwrap();
        if proxy.epoch > current.epoch {
            *current = proxy;
            true
        } else {
            false
        }
    }

    fn attempt(&self, proxy: &ProxyDescriptor, method: &str, args: &Value) -> Result<Value, InvokeError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        service_host::invoke_with_timeout(proxy, method, args, self.call_timeout)
    }

    /// Forwards a call, failing over to a freshly looked-up incarnation if the
    /// current binding is invalid.
    pub fn invoke(&self, method: &str, args: &Value) -> Result<Value, StubError> {
        self.calls_total.fetch_add(1, Ordering::SeqCst);
        let mut fault = match self.attempt(&self.proxy(), method, args) {
            Ok(v) => return Ok(v),
            Err(InvokeError::InvalidBinding(f)) => f,
            Err(e) => return Err(logical(e)),
        };

        for _ in 0..self.retry_budget {
            log::debug!("{}: invalid binding ({fault}), looking up again", self.key());
            self.lookups.fetch_add(1, Ordering::SeqCst);
            let found = match self.registry.lookup(self.key()) {
                Ok(p) => p,
                Err(RegistryError::ServiceNotFound(_)) => {
                    return Err(StubError::UnresolvableBinding {
                        key: self.key().to_string(),
                        reason: format!("{fault}; service no longer registered"),
                    })
                }
                Err(RegistryError::Unavailable(m)) => return Err(StubError::RegistryUnavailable(m)),
                Err(e) => return Err(StubError::Registry(e)),
            };
            if self.install_proxy(found) {
                self.failovers.fetch_add(1, Ordering::SeqCst);
                self.notify();
            }
            self.retries.fetch_add(1, Ordering::SeqCst);
            fault = match self.attempt(&self.proxy(), method, args) {
                Ok(v) => return Ok(v),
                Err(InvokeError::InvalidBinding(f)) => f,
                Err(e) => return Err(logical(e)),
            };
        }
        Err(StubError::UnresolvableBinding {
            key: self.key().to_string(),
            reason: fault_reason(&fault),
        })
    }

    fn notify(&self) {
        let Some(notifier) = &self.notifier else {
            return;
        };
        match notifier.upgrade() {
            Some(listener) => listener.stub_updated(self.snapshot()),
            None => log::warn!("{}: cache is gone, update not delivered", self.key()),
        }
    }
}

fn fault_reason(fault: &BindingFault) -> String {
    format!("retry failed: {fault}")
}

fn logical(e: InvokeError) -> StubError {
    match e {
        InvokeError::NoSuchMethod(m) => StubError::NoSuchMethod(m),
        InvokeError::BadArgs(m) => StubError::BadArgs(m),
        InvokeError::Internal(m) => StubError::Internal(m),
        InvokeError::InvalidBinding(_) => unreachable!("binding faults trigger failover"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn desc() -> ServiceDescription {
        ServiceDescription::new("/room1/light", "light")
    }

    fn proxy(key: &str, epoch: u64) -> ProxyDescriptor {
        ProxyDescriptor {
            key: key.into(),
            host: "127.0.0.1".into(),
            port: 1,
            service_id: 9,
            epoch,
        }
    }

    fn registry() -> Arc<RegistryClient> {
        Arc::new(RegistryClient::new("127.0.0.1:1".parse().unwrap()))
    }

    #[test]
    fn key_mismatch_rejected() {
        let err = VirtualStub::new(desc(), proxy("/room1/ac", 1), registry(), None).unwrap_err();
        assert!(matches!(err, StubError::KeyMismatch { .. }));
    }

    #[test]
    fn fresh_stub_has_zero_counters() {
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 3), registry(), None).unwrap();
        assert_eq!(stub.counters(), StubCounters::default());
        assert_eq!(stub.epoch(), 3);
    }

    #[test]
    fn install_is_epoch_guarded() {
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 2), registry(), None).unwrap();
        assert!(!stub.install_proxy(proxy("/room1/light", 1)));
        assert!(!stub.install_proxy(proxy("/room1/light", 2)));
        assert!(!stub.install_proxy(proxy("/room1/ac", 9)));
        assert!(stub.install_proxy(proxy("/room1/light", 3)));
        assert_eq!(stub.epoch(), 3);
    }

    #[test]
    fn snapshots_are_stable() {
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 1), registry(), None).unwrap();
        let (a, b) = (stub.snapshot(), stub.snapshot());
        assert_eq!((a.description, a.proxy), (b.description, b.proxy));
    }

    #[test]
    fn canonical_snapshot_json() {
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 4), registry(), None).unwrap();
        assert_eq!(
            stub.snapshot().canonical_json(),
            json!({"key": "/room1/light", "host": "127.0.0.1", "port": 1, "service_id": 9, "epoch": 4})
        );
    }

    #[test]
    fn registry_down_during_failover() {
        // Both the service port and the registry port are closed.
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 1), registry(), None).unwrap();
        let err = stub.invoke("turnOn", &json!({})).unwrap_err();
        assert!(matches!(err, StubError::RegistryUnavailable(_)), "{err:?}");
        let c = stub.counters();
        assert_eq!((c.calls_total, c.attempts, c.lookups, c.failovers), (1, 1, 1, 0));
    }

    struct Recorder(Mutex<Vec<StubSnapshot>>);

    impl StubListener for Recorder {
        fn stub_updated(&self, snapshot: StubSnapshot) {
            self.0.lock().unwrap().push(snapshot);
        }
    }

    #[test]
    fn dropped_listener_is_tolerated() {
        let rec: Arc<dyn StubListener> = Arc::new(Recorder(Mutex::new(Vec::new())));
        let weak = Arc::downgrade(&rec);
        drop(rec);
        let stub = VirtualStub::new(desc(), proxy("/room1/light", 1), registry(), Some(weak)).unwrap();
        stub.notify();
    }
}
