//! The virtual stub cache manager.
//!
//! `get_virtual_stub` returns the cached stub for a service key if there is
//! one; otherwise it looks the key up in the registry, wraps the descriptor in
//! a new stub and caches it. Concurrent misses for the same key share a
//! single lookup. Stubs report proxy swaps back to the cache through
//! [`StubListener`], and the cache keeps the newest epoch per key.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use crate::clock;
use crate::registry::{ProxyDescriptor, RegistryClient, RegistryError, ServiceDescription};
use crate::vstub::{StubListener, StubSnapshot, VirtualStub, DEFAULT_RETRY_BUDGET};
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits from the table.
    Normal,
    /// Every get performs a registry lookup and nothing is stored.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GetOutcome {
    Hit,
    /// Waited on another caller's in-flight lookup for the same key.
    Coalesced,
    Miss,
    Bypass,
}

impl GetOutcome {
    /// Whether the caller got its stub without a lookup of its own.
    pub fn is_hit(self) -> bool {
        matches!(self, GetOutcome::Hit | GetOutcome::Coalesced)
    }
}

/// Cache counters. `hits` includes `coalesced` gets; `misses` includes
/// failed and bypassed gets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub remote_lookups: u64,
    pub failed_lookups: u64,
    pub coalesced: u64,
    pub updates: u64,
    pub evictions: u64,
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    remote_lookups: AtomicU64,
    failed_lookups: AtomicU64,
    coalesced: AtomicU64,
    updates: AtomicU64,
    evictions: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            remote_lookups: self.remote_lookups.load(Ordering::SeqCst),
            failed_lookups: self.failed_lookups.load(Ordering::SeqCst),
            coalesced: self.coalesced.load(Ordering::SeqCst),
            updates: self.updates.load(Ordering::SeqCst),
            evictions: self.evictions.load(Ordering::SeqCst),
        }
    }

    fn reset(&self) {
        for c in [
            &self.hits,
            &self.misses,
            &self.remote_lookups,
            &self.failed_lookups,
            &self.coalesced,
            &self.updates,
            &self.evictions,
        ] {
            c.store(0, Ordering::SeqCst);
        }
    }
}

struct CacheEntry {
    stub: Arc<VirtualStub>,
    inserted_at: u64,
    last_access: u64,
    source_epoch: u64,
}

/// Read-only view of one cache entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheEntryInfo {
    pub key: String,
    pub proxy: ProxyDescriptor,
    pub source_epoch: u64,
    pub inserted_at: u64,
    pub last_access: u64,
}

type FlightResult = Result<Arc<VirtualStub>, RegistryError>;

#[derive(Default)]
struct Flight {
    result: Mutex<Option<FlightResult>>,
    done: Condvar,
}

impl Flight {
    fn complete(&self, result: FlightResult) {
        *self.result.lock().unwrap() = Some(result);
        self.done.notify_all();
    }

    fn wait(&self) -> FlightResult {
        let mut slot = self.result.lock().unwrap();
        loop {
            if let Some(r) = slot.as_ref() {
                return r.clone();
            }
            slot = self.done.wait(slot).unwrap();
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheOptions {
    /// Maximum number of entries; least recently used entries are evicted. `None` is unbounded.
    pub capacity: Option<usize>,
    pub retry_budget: u32,
    pub call_timeout: Duration,
}

impl Default for CacheOptions {
    fn default() -> Self {
        CacheOptions {
            capacity: None,
            retry_budget: DEFAULT_RETRY_BUDGET,
            call_timeout: wire::DEFAULT_IO_TIMEOUT,
        }
    }
}

pub struct StubCache {
    registry: Arc<RegistryClient>,
    options: CacheOptions,
    bypass: AtomicBool,
    // Lock order: flights, then table.
    flights: Mutex<HashMap<String, Arc<Flight>>>,
    table: Mutex<HashMap<String, CacheEntry>>,
    stats: Counters,
    this: Weak<StubCache>,
}

impl std::fmt::Debug for StubCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubCache")
            .field("registry", &self.registry.addr())
            .field("len", &self.len())
            .field("stats", &self.stats())
            .finish()
    }
}

impl StubCache {
    pub fn new(registry: Arc<RegistryClient>) -> Arc<StubCache> {
        Self::with_options(registry, CacheOptions::default())
    }

    pub fn with_options(registry: Arc<RegistryClient>, options: CacheOptions) -> Arc<StubCache> {
        Arc::new_cyclic(|this| StubCache {
            registry,
            options,
            bypass: AtomicBool::new(false),
            flights: Mutex::new(HashMap::new()),
            table: Mutex::new(HashMap::new()),
            stats: Counters::default(),
            this: this.clone(),
        })
    }

    pub fn registry(&self) -> &Arc<RegistryClient> {
        &self.registry
    }

    pub fn mode(&self) -> CacheMode {
        if self.bypass.load(Ordering::SeqCst) {
            CacheMode::Bypass
        } else {
            CacheMode::Normal
        }
    }

    pub fn set_mode(&self, mode: CacheMode) {
        self.bypass.store(mode == CacheMode::Bypass, Ordering::SeqCst);
    }

    pub fn capacity(&self) -> Option<usize> {
        self.options.capacity
    }

    /// Returns the stub for `description`, looking it up on a miss.
    pub fn get_virtual_stub(&self, description: &ServiceDescription) -> Result<Arc<VirtualStub>, RegistryError> {
        self.get(description).map(|(stub, _)| stub)
    }

    /// Like [`get_virtual_stub`](Self::get_virtual_stub) but also reports how the stub was obtained.
    pub fn get(&self, description: &ServiceDescription) -> Result<(Arc<VirtualStub>, GetOutcome), RegistryError> {
        let key = description.key.as_str();

        if self.bypass.load(Ordering::SeqCst) {
            let res = self.do_lookup(description);
            self.account_miss(&res);
            return res.map(|s| (s, GetOutcome::Bypass));
        }

        if let Some(stub) = self.try_hit(key) {
            return Ok((stub, GetOutcome::Hit));
        }

        let (flight, leader) = {
            let mut flights = self.flights.lock().unwrap();
            // Re-check: a leader may have finished between the fast path and here.
            if let Some(stub) = self.try_hit(key) {
                return Ok((stub, GetOutcome::Hit));
            }
            match flights.get(key) {
                Some(f) => (Arc::clone(f), false),
                None => {
                    let f = Arc::new(Flight::default());
                    flights.insert(key.to_string(), Arc::clone(&f));
                    (f, true)
                }
            }
        };

        if !leader {
            let res = flight.wait();
            match &res {
                Ok(_) => {
                    self.stats.hits.fetch_add(1, Ordering::SeqCst);
                    self.stats.coalesced.fetch_add(1, Ordering::SeqCst);
                }
                Err(_) => {
                    self.stats.misses.fetch_add(1, Ordering::SeqCst);
                }
            }
            return res.map(|s| (s, GetOutcome::Coalesced));
        }

        let res = self.do_lookup(description);
        {
            let mut flights = self.flights.lock().unwrap();
            if let Ok(stub) = &res {
                self.insert(Arc::clone(stub));
            }
            flights.remove(key);
        }
        self.account_miss(&res);
        flight.complete(res.clone());
        res.map(|s| (s, GetOutcome::Miss))
    }

    fn account_miss(&self, res: &FlightResult) {
        self.stats.misses.fetch_add(1, Ordering::SeqCst);
        match res {
            Ok(_) => self.stats.remote_lookups.fetch_add(1, Ordering::SeqCst),
            Err(_) => self.stats.failed_lookups.fetch_add(1, Ordering::SeqCst),
        };
    }

    fn try_hit(&self, key: &str) -> Option<Arc<VirtualStub>> {
        let mut table = self.table.lock().unwrap();
        let entry = table.get_mut(key)?;
        entry.last_access = clock::monotonic_ns();
        self.stats.hits.fetch_add(1, Ordering::SeqCst);
        Some(Arc::clone(&entry.stub))
    }

    /// Queries the registry and wraps the result in a new stub wired to this
    /// cache. Does not touch the table.
    pub fn do_lookup(&self, description: &ServiceDescription) -> Result<Arc<VirtualStub>, RegistryError> {
        let proxy = self.registry.lookup(&description.key)?;
        self.make_stub(description.clone(), proxy)
    }

    fn make_stub(
        &self,
        description: ServiceDescription,
        proxy: ProxyDescriptor,
    ) -> Result<Arc<VirtualStub>, RegistryError> {
        let this: Weak<StubCache> = self.this.clone();
        let notifier: Weak<dyn StubListener> = this;
        let stub = VirtualStub::new(description, proxy, Arc::clone(&self.registry), Some(notifier))
            .map_err(|e| RegistryError::Protocol(e.to_string()))?
            .with_retry_budget(self.options.retry_budget)
            .with_call_timeout(self.options.call_timeout);
        Ok(Arc::new(stub))
    }

    fn insert(&self, stub: Arc<VirtualStub>) {
        let mut table = self.table.lock().unwrap();
        self.insert_locked(&mut table, stub);
    }

    fn insert_locked(&self, table: &mut HashMap<String, CacheEntry>, stub: Arc<VirtualStub>) {
        let key = stub.key().to_string();
        if let Some(cap) = self.options.capacity {
            while !table.contains_key(&key) && table.len() >= cap.max(1) {
                let Some(victim) = table
                    .iter()
                    .min_by_key(|(_, e)| e.last_access)
                    .map(|(k, _)| k.clone())
                else {
                    break;
                };
                table.remove(&victim);
                self.stats.evictions.fetch_add(1, Ordering::SeqCst);
            }
        }
        let now = clock::monotonic_ns();
        let source_epoch = stub.epoch();
        table.insert(
            key,
            CacheEntry {
                stub,
                inserted_at: now,
                last_access: now,
                source_epoch,
            },
        );
    }

    /// Applies a stub's self-update. Newer epochs replace the cached proxy,
    /// older or equal ones are ignored, and unknown keys are inserted.
    pub fn update_entry(&self, snapshot: StubSnapshot) {
        let mut table = self.table.lock().unwrap();
        match table.get_mut(snapshot.key()) {
            Some(entry) => {
                if snapshot.proxy.epoch > entry.source_epoch {
                    entry.stub.install_proxy(snapshot.proxy.clone());
                    entry.source_epoch = snapshot.proxy.epoch;
                    self.stats.updates.fetch_add(1, Ordering::SeqCst);
                } else {
                    log::debug!(
                        "{}: ignoring update to epoch {} (cached {})",
                        snapshot.key(),
                        snapshot.proxy.epoch,
                        entry.source_epoch
                    );
                }
            }
            None => match self.make_stub(snapshot.description, snapshot.proxy) {
                Ok(stub) => {
                    self.insert_locked(&mut table, stub);
                    self.stats.updates.fetch_add(1, Ordering::SeqCst);
                }
                Err(e) => log::warn!("dropping cache update: {e}"),
            },
        }
    }

    pub fn invalidate(&self, key: &str) -> bool {
        self.table.lock().unwrap().remove(key).is_some()
    }

    /// Removes every entry and returns how many there were.
    pub fn clear(&self) -> usize {
        let mut table = self.table.lock().unwrap();
        let n = table.len();
        table.clear();
        n
    }

    pub fn stats(&self) -> CacheStats {
        self.stats.snapshot()
    }

    pub fn reset_stats(&self) {
        self.stats.reset();
    }

    pub fn len(&self) -> usize {
        self.table.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.lock().unwrap().contains_key(key)
    }

    /// The cached stub for `key`, without touching stats or recency.
    pub fn peek(&self, key: &str) -> Option<Arc<VirtualStub>> {
        self.table.lock().unwrap().get(key).map(|e| Arc::clone(&e.stub))
    }

    pub fn entry(&self, key: &str) -> Option<CacheEntryInfo> {
        self.table.lock().unwrap().get(key).map(|e| info(key, e))
    }

    /// All entries, sorted by key.
    pub fn entries(&self) -> Vec<CacheEntryInfo> {
        let table = self.table.lock().unwrap();
        let mut out: Vec<_> = table.iter().map(|(k, e)| info(k, e)).collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    /// Sum of failovers over all cached stubs.
    pub fn total_failovers(&self) -> u64 {
        self.table
            .lock()
            .unwrap()
            .values()
            .map(|e| e.stub.counters().failovers)
            .sum()
    }

    /// Diagnostic dump: key → {host, port, service_id, epoch, inserted_at, last_access}.
    pub fn dump(&self) -> Value {
        let map: BTreeMap<String, Value> = self
            .entries()
            .into_iter()
            .map(|e| {
                (
                    e.key,
                    json!({
                        "host": e.proxy.host,
                        "port": e.proxy.port,
                        "service_id": e.proxy.service_id,
                        "epoch": e.proxy.epoch,
                        "inserted_at": e.inserted_at,
                        "last_access": e.last_access,
                    }),
                )
            })
            .collect();
        json!(map)
    }
}

fn info(key: &str, e: &CacheEntry) -> CacheEntryInfo {
    CacheEntryInfo {
        key: key.to_string(),
        proxy: e.stub.proxy(),
        source_epoch: e.source_epoch,
        inserted_at: e.inserted_at,
        last_access: e.last_access,
    }
}

impl StubListener for StubCache {
    fn stub_updated(&self, snapshot: StubSnapshot) {
        self.update_entry(snapshot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // These tests never reach the network: the registry address is closed and
    // entries are seeded through update_entry.
    fn cache(capacity: Option<usize>) -> Arc<StubCache> {
        let registry = Arc::new(RegistryClient::new("127.0.0.1:1".parse().unwrap()));
        StubCache::with_options(
            registry,
            CacheOptions {
                capacity,
                ..CacheOptions::default()
            },
        )
    }

    fn snap(key: &str, epoch: u64) -> StubSnapshot {
        StubSnapshot {
            description: ServiceDescription::new(key, "light"),
            proxy: ProxyDescriptor {
                key: key.into(),
                host: "127.0.0.1".into(),
                port: 1,
                service_id: epoch,
                epoch,
            },
            captured_at: 0,
        }
    }

    #[test]
    fn fresh_cache_is_empty() {
        let c = cache(None);
        assert_eq!(c.stats(), CacheStats::default());
        assert!(c.is_empty());
        assert_eq!(c.dump(), json!({}));
    }

    #[test]
    fn upsert_then_guarded_updates() {
        let c = cache(None);
        c.update_entry(snap("/room1/light", 1));
        assert_eq!(c.entry("/room1/light").unwrap().source_epoch, 1);
        assert_eq!(c.stats().updates, 1);

        c.update_entry(snap("/room1/light", 2));
        assert_eq!(c.entry("/room1/light").unwrap().source_epoch, 2);
        assert_eq!(c.peek("/room1/light").unwrap().epoch(), 2);
        assert_eq!(c.stats().updates, 2);

        c.update_entry(snap("/room1/light", 1));
        assert_eq!(c.entry("/room1/light").unwrap().source_epoch, 2);
        assert_eq!(c.stats().updates, 2);
    }

    #[test]
    fn hit_returns_same_stub() {
        let c = cache(None);
        c.update_entry(snap("/room1/light", 1));
        let desc = ServiceDescription::new("/room1/light", "light");
        let (a, oa) = c.get(&desc).unwrap();
        let (b, ob) = c.get(&desc).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!((oa, ob), (GetOutcome::Hit, GetOutcome::Hit));
        assert_eq!(c.stats().hits, 2);
    }

    #[test]
    fn miss_against_dead_registry_leaves_cache_unchanged() {
        let c = cache(None);
        let err = c.get(&ServiceDescription::new("/room1/ac", "ac")).unwrap_err();
        assert!(matches!(err, RegistryError::Unavailable(_)));
        assert!(c.is_empty());
        let s = c.stats();
        assert_eq!((s.misses, s.remote_lookups, s.failed_lookups), (1, 0, 1));
    }

    #[test]
    fn invalidate_and_clear() {
        let c = cache(None);
        for k in ["/a", "/b", "/c"] {
            c.update_entry(snap(k, 1));
        }
        assert!(c.invalidate("/a"));
        assert!(!c.invalidate("/a"));
        assert_eq!(c.clear(), 2);
        assert!(c.is_empty());
        assert_eq!(c.stats().updates, 3);
    }

    #[test]
    fn lru_eviction_respects_capacity() {
        let c = cache(Some(2));
        c.update_entry(snap("/a", 1));
        c.update_entry(snap("/b", 1));
        // Touch /a so /b is least recently used.
        c.get(&ServiceDescription::new("/a", "light")).unwrap();
        c.update_entry(snap("/c", 1));
        assert_eq!(c.len(), 2);
        assert!(c.contains("/a") && c.contains("/c") && !c.contains("/b"));
        assert_eq!(c.stats().evictions, 1);
    }

    #[test]
    fn dump_format() {
        let c = cache(None);
        c.update_entry(snap("/room1/light", 3));
        let d = c.dump();
        let e = &d["/room1/light"];
        assert_eq!(e["epoch"], 3);
        assert_eq!(e["port"], 1);
        for field in ["host", "service_id", "inserted_at", "last_access"] {
            assert!(e.get(field).is_some(), "{field}");
        }
    }
}
