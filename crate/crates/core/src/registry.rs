//! Service registry: endpoint records under hierarchical keys.
//!
//! [`RegistryTable`] holds the state and rules, [`RegistryServer`] exposes it
//! over the framed protocol and [`RegistryClient`] talks to a server.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::server::FrameServer;
use crate::wire::{self, Connection, Envelope, MsgType, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("invalid service key {0:?}")]
    InvalidKey(String),
    #[error("service {0:?} not found")]
    ServiceNotFound(String),
    #[error("registry unavailable: {0}")]
    Unavailable(String),
    #[error("registry protocol error: {0}")]
    Protocol(String),
}

impl From<WireError> for RegistryError {
    fn from(e: WireError) -> Self {
        if e.is_transport() {
            RegistryError::Unavailable(e.to_string())
        } else {
            RegistryError::Protocol(e.to_string())
        }
    }
}

/// Checks that `key` starts with `/` and has no empty segments.
pub fn validate_key(key: &str) -> Result<(), RegistryError> {
    let ok = key.len() > 1
        && key.starts_with('/')
        && key[1..].split('/').all(|seg| !seg.is_empty());
    if ok {
        Ok(())
    } else {
        Err(RegistryError::InvalidKey(key.to_string()))
    }
}

/// True if `key` is `prefix` or lies underneath it in the path hierarchy.
pub fn key_has_prefix(key: &str, prefix: &str) -> bool {
    let prefix = prefix.trim_end_matches('/');
    if prefix.is_empty() {
        return true;
    }
    match key.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescription {
    pub key: String,
    pub service_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl ServiceDescription {
    pub fn new(key: impl Into<String>, service_type: impl Into<String>) -> Self {
        ServiceDescription {
            key: key.into(),
            service_type: service_type.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }
}

/// Address and incarnation of one live service registration (the "real proxy").
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProxyDescriptor {
    pub key: String,
    pub host: String,
    pub port: u16,
    pub service_id: u64,
    pub epoch: u64,
}

impl ProxyDescriptor {
    pub fn socket_addr(&self) -> std::io::Result<SocketAddr> {
        wire::resolve_addr(&format!("{}:{}", self.host, self.port))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryStats {
    pub lookup_count: u64,
    pub register_count: u64,
    pub entry_count: u64,
}

/// In-memory registry state.
#[derive(Debug, Default)]
pub struct RegistryTable {
    entries: BTreeMap<String, (ServiceDescription, ProxyDescriptor)>,
    last_epoch: HashMap<String, u64>,
    lookups: u64,
    registers: u64,
}

impl RegistryTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Issues the next epoch for the key and replaces any live descriptor.
    pub fn register(
        &mut self,
        desc: ServiceDescription,
        host: &str,
        port: u16,
        service_id: u64,
    ) -> Result<ProxyDescriptor, RegistryError> {
        validate_key(&desc.key)?;
        let epoch = self.last_epoch.entry(desc.key.clone()).or_insert(0);
        *epoch += 1;
        let proxy = ProxyDescriptor {
            key: desc.key.clone(),
            host: host.to_string(),
            port,
            service_id,
            epoch: *epoch,
        };
        self.entries.insert(desc.key.clone(), (desc, proxy.clone()));
        self.registers += 1;
        Ok(proxy)
    }

    pub fn lookup(&mut self, key: &str) -> Result<ProxyDescriptor, RegistryError> {
        self.lookups += 1;
        self.entries
            .get(key)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| RegistryError::ServiceNotFound(key.to_string()))
    }

    /// Removes the entry only if its epoch matches. Returns whether it was removed.
    pub fn unregister(&mut self, key: &str, epoch: u64) -> bool {
        match self.entries.get(key) {
            Some((_, p)) if p.epoch == epoch => {
                self.entries.remove(key);
                true
            }
            _ => false,
        }
    }

    /// Descriptions under `prefix`, sorted by key.
    pub fn list(&self, prefix: &str) -> Vec<ServiceDescription> {
        self.entries
            .iter()
            .filter(|(k, _)| key_has_prefix(k, prefix))
            .map(|(_, (d, _))| d.clone())
            .collect()
    }

    pub fn latest_epoch(&self, key: &str) -> Option<u64> {
        self.last_epoch.get(key).copied()
    }

    pub fn stats(&self) -> RegistryStats {
        RegistryStats {
            lookup_count: self.lookups,
            register_count: self.registers,
            entry_count: self.entries.len() as u64,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegisterBody {
    key: String,
    service_type: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    host: String,
    port: u16,
    service_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyBody {
    key: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnregisterBody {
    key: String,
    epoch: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ListBody {
    prefix: String,
}

fn err_body(code: &str, message: impl std::fmt::Display) -> Value {
    json!({"code": code, "message": message.to_string()})
}

fn handle_request(table: &Mutex<RegistryTable>, req: &Envelope) -> Envelope {
    let mut table = table.lock().unwrap();
    let result: Result<Envelope, RegistryError> = (|| match req.msg_type {
        MsgType::Register => {
            let b: RegisterBody = req.parse_body().map_err(|e| RegistryError::Protocol(e.to_string()))?;
            let desc = ServiceDescription {
                key: b.key,
                service_type: b.service_type,
                attributes: b.attributes,
            };
            let proxy = table.register(desc, &b.host, b.port, b.service_id)?;
            Ok(req.reply(MsgType::RegisterOk, json!({"epoch": proxy.epoch})))
        }
        MsgType::Lookup => {
            let b: KeyBody = req.parse_body().map_err(|e| RegistryError::Protocol(e.to_string()))?;
            match table.lookup(&b.key) {
                Ok(p) => Ok(req.reply(MsgType::LookupOk, json!({"descriptor": p}))),
                Err(RegistryError::ServiceNotFound(k)) => {
                    Ok(req.reply(MsgType::NotFound, json!({"key": k})))
                }
                Err(e) => Err(e),
            }
        }
        MsgType::Unregister => {
            let b: UnregisterBody =
                req.parse_body().map_err(|e| RegistryError::Protocol(e.to_string()))?;
            table.unregister(&b.key, b.epoch);
            Ok(req.reply(MsgType::RegisterOk, json!({"epoch": 0})))
        }
        MsgType::List => {
            let b: ListBody = req.parse_body().map_err(|e| RegistryError::Protocol(e.to_string()))?;
            Ok(req.reply(MsgType::ListOk, json!({"descriptions": table.list(&b.prefix)})))
        }
        MsgType::Stats => Ok(req.reply(MsgType::ListOk, json!({"counters": table.stats()}))),
        other => Err(RegistryError::Protocol(format!("unexpected {other} request"))),
    })();
    match result {
        Ok(resp) => resp,
        Err(RegistryError::InvalidKey(k)) => {
            req.reply(MsgType::Err, err_body("INVALID_KEY", format!("invalid key {k:?}")))
        }
        Err(e) => req.reply(MsgType::Err, err_body("BAD_REQUEST", e)),
    }
}

/// A running registry server.
pub struct RegistryServer {
    table: Arc<Mutex<RegistryTable>>,
    server: FrameServer,
}

impl RegistryServer {
    /// Binds `listen` (e.g. `127.0.0.1:0`) and starts serving.
    pub fn start(listen: &str) -> std::io::Result<RegistryServer> {
        let table = Arc::new(Mutex::new(RegistryTable::new()));
        let handler_table = Arc::clone(&table);
        let server = FrameServer::bind(
            listen,
            Arc::new(move |req: &Envelope| handle_request(&handler_table, req)),
        )?;
        log::info!("registry listening on {}", server.local_addr());
        Ok(RegistryServer { table, server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    /// Counters read directly from the table, bypassing the network.
    pub fn stats(&self) -> RegistryStats {
        self.table.lock().unwrap().stats()
    }

    pub fn latest_epoch(&self, key: &str) -> Option<u64> {
        self.table.lock().unwrap().latest_epoch(key)
    }

    pub fn stop(&mut self) {
        self.server.stop();
    }
}

/// Client for a registry server.
///
/// Idle connections are kept in a small pool; a request checks one out, so
/// concurrent callers never wait on each other's network I/O.
#[derive(Debug)]
pub struct RegistryClient {
    addr: SocketAddr,
    timeout: Duration,
    idle: Mutex<Vec<Connection>>,
    next_request: AtomicU64,
}

impl RegistryClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self::with_timeout(addr, wire::DEFAULT_IO_TIMEOUT)
    }

    pub fn with_timeout(addr: SocketAddr, timeout: Duration) -> Self {
        RegistryClient {
            addr,
            timeout,
            idle: Mutex::new(Vec::new()),
            next_request: AtomicU64::new(1),
        }
    }

    pub fn connect(addr: &str) -> Result<Self, RegistryError> {
        let addr = wire::resolve_addr(addr).map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        Ok(Self::new(addr))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn call(&self, msg_type: MsgType, body: Value) -> Result<Envelope, RegistryError> {
        let req = Envelope::new(
            msg_type,
            self.next_request.fetch_add(1, Ordering::Relaxed),
            body,
        );
        let pooled = self.idle.lock().unwrap().pop();
        if let Some(mut conn) = pooled {
            match conn.request(&req) {
                Ok(resp) => {
                    self.idle.lock().unwrap().push(conn);
                    return Ok(resp);
                }
                // The server may have closed an idle connection; retry once on a fresh one.
                Err(e) if e.is_transport() => log::debug!("pooled registry connection failed: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        let mut conn = Connection::connect(self.addr, self.timeout)
            .map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        let resp = conn.request(&req)?;
        self.idle.lock().unwrap().push(conn);
        Ok(resp)
    }

    fn expect_ok(resp: Envelope, want: MsgType) -> Result<Envelope, RegistryError> {
        if resp.msg_type == want {
            return Ok(resp);
        }
        if resp.msg_type == MsgType::Err {
            let code = resp.body.get("code").and_then(Value::as_str).unwrap_or("");
            let message = resp
                .body
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            if code == "INVALID_KEY" {
                return Err(RegistryError::InvalidKey(message));
            }
            return Err(RegistryError::Protocol(message));
        }
        Err(RegistryError::Protocol(format!(
            "expected {want}, got {}",
            resp.msg_type
        )))
    }

    pub fn register(
        &self,
        desc: &ServiceDescription,
        host: &str,
        port: u16,
        service_id: u64,
    ) -> Result<ProxyDescriptor, RegistryError> {
        validate_key(&desc.key)?;
        let body = serde_json::to_value(RegisterBody {
            key: desc.key.clone(),
            service_type: desc.service_type.clone(),
            attributes: desc.attributes.clone(),
            host: host.to_string(),
            port,
            service_id,
        })
        .expect("register body serializes");
        let resp = Self::expect_ok(self.call(MsgType::Register, body)?, MsgType::RegisterOk)?;
        let epoch = resp
            .body
            .get("epoch")
            .and_then(Value::as_u64)
            .ok_or_else(|| RegistryError::Protocol("REGISTER_OK without epoch".into()))?;
        Ok(ProxyDescriptor {
            key: desc.key.clone(),
            host: host.to_string(),
            port,
            service_id,
            epoch,
        })
    }

    pub fn lookup(&self, key: &str) -> Result<ProxyDescriptor, RegistryError> {
        let resp = self.call(MsgType::Lookup, json!({ "key": key }))?;
        if resp.msg_type == MsgType::NotFound {
            return Err(RegistryError::ServiceNotFound(key.to_string()));
        }
        let resp = Self::expect_ok(resp, MsgType::LookupOk)?;
        serde_json::from_value(resp.body.get("descriptor").cloned().unwrap_or(Value::Null))
            .map_err(|e| RegistryError::Protocol(format!("bad descriptor: {e}")))
    }

    pub fn unregister(&self, key: &str, epoch: u64) -> Result<(), RegistryError> {
        let resp = self.call(MsgType::Unregister, json!({ "key": key, "epoch": epoch }))?;
        Self::expect_ok(resp, MsgType::RegisterOk).map(|_| ())
    }

    pub fn list(&self, prefix: &str) -> Result<Vec<ServiceDescription>, RegistryError> {
        let resp = Self::expect_ok(
            self.call(MsgType::List, json!({ "prefix": prefix }))?,
            MsgType::ListOk,
        )?;
        serde_json::from_value(resp.body.get("descriptions").cloned().unwrap_or(Value::Null))
            .map_err(|e| RegistryError::Protocol(format!("bad LIST_OK: {e}")))
    }

    pub fn stats(&self) -> Result<RegistryStats, RegistryError> {
        let resp = Self::expect_ok(self.call(MsgType::Stats, json!({}))?, MsgType::ListOk)?;
        serde_json::from_value(resp.body.get("counters").cloned().unwrap_or(Value::Null))
            .map_err(|e| RegistryError::Protocol(format!("bad counters: {e}")))
    }
}
