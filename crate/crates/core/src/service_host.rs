//! Hosting of remote device services and the client side of INVOKE.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::registry::{ProxyDescriptor, RegistryClient, RegistryError, ServiceDescription};
use crate::server::FrameServer;
use crate::wire::{self, Connection, Envelope, MsgType};

/// A logical failure raised by a service method.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceFault {
    #[error("no such method {0:?}")]
    NoSuchMethod(String),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type MethodHandler = Arc<dyn Fn(&mut Value, &Value) -> Result<Value, ServiceFault> + Send + Sync>;

/// A service implementation: a description, named methods and local state.
#[derive(Clone)]
pub struct ServiceImpl {
    description: ServiceDescription,
    methods: BTreeMap<String, MethodHandler>,
    state: Value,
}

impl fmt::Debug for ServiceImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceImpl")
            .field("description", &self.description)
            .field("methods", &self.methods.keys().collect::<Vec<_>>())
            .field("state", &self.state)
            .finish()
    }
}

impl ServiceImpl {
    pub fn new(description: ServiceDescription, initial_state: Value) -> Self {
        ServiceImpl {
            description,
            methods: BTreeMap::new(),
            state: initial_state,
        }
    }

    /// Adds a method. Panics if the name is already taken.
    pub fn with_method<F>(mut self, name: &str, handler: F) -> Self
    where
        F: Fn(&mut Value, &Value) -> Result<Value, ServiceFault> + Send + Sync + 'static,
    {
        let prev = self.methods.insert(name.to_string(), Arc::new(handler));
        assert!(prev.is_none(), "duplicate method {name:?}");
        self
    }

    pub fn description(&self) -> &ServiceDescription {
        &self.description
    }

    pub fn method_names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    pub fn state(&self) -> &Value {
        &self.state
    }

    /// Runs a method against the local state.
    pub fn call(&mut self, method: &str, args: &Value) -> Result<Value, ServiceFault> {
        let handler = self
            .methods
            .get(method)
            .cloned()
            .ok_or_else(|| ServiceFault::NoSuchMethod(method.to_string()))?;
        if !args.is_object() {
            return Err(ServiceFault::BadArgs("args must be a JSON object".into()));
        }
        // Mutate a copy so a failing handler leaves state untouched.
        let mut next = self.state.clone();
        let out = handler(&mut next, args)?;
        self.state = next;
        Ok(out)
    }
}

/// The bundled device services: a light and an air conditioner.
///
/// Both expose `turnOn`, `turnOff`, `setLevel {"level": 0..=100}` and `getState`.
pub mod catalog {
    use super::*;

    pub const LIGHT: &str = "light";
    pub const AIR_CONDITIONER: &str = "ac";

    pub const LIGHT_INITIAL_LEVEL: u64 = 100;
    pub const AC_INITIAL_LEVEL: u64 = 24;

    pub fn light(key: &str) -> ServiceImpl {
        device(ServiceDescription::new(key, LIGHT), LIGHT_INITIAL_LEVEL)
    }

    pub fn air_conditioner(key: &str) -> ServiceImpl {
        device(ServiceDescription::new(key, AIR_CONDITIONER), AC_INITIAL_LEVEL)
    }

    /// Builds a bundled service by type tag.
    pub fn for_type(service_type: &str, key: &str) -> Option<ServiceImpl> {
        match service_type {
            LIGHT => Some(light(key)),
            AIR_CONDITIONER => Some(air_conditioner(key)),
            _ => None,
        }
    }

    fn device(description: ServiceDescription, level: u64) -> ServiceImpl {
        ServiceImpl::new(description, json!({"status": "off", "level": level}))
            .with_method("turnOn", |s, _| {
                s["status"] = json!("on");
                Ok(json!({"status": "on"}))
            })
            .with_method("turnOff", |s, _| {
                s["status"] = json!("off");
                Ok(json!({"status": "off"}))
            })
            .with_method("setLevel", |s, args| {
                let level = args
                    .get("level")
                    .and_then(Value::as_u64)
                    .filter(|l| *l <= 100)
                    .ok_or_else(|| ServiceFault::BadArgs("level must be an integer in 0..=100".into()))?;
                s["level"] = json!(level);
                Ok(s.clone())
            })
            .with_method("getState", |s, _| Ok(s.clone()))
    }
}

/// Why a binding could not serve a call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingFault {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("stale epoch")]
    StaleEpoch,
}

/// Client-side result classification for an invocation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("invalid binding: {0}")]
    InvalidBinding(BindingFault),
    #[error("no such method {0:?}")]
    NoSuchMethod(String),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("internal service error: {0}")]
    Internal(String),
}

impl InvokeError {
    pub fn is_invalid_binding(&self) -> bool {
        matches!(self, InvokeError::InvalidBinding(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InvokeBody {
    service_id: u64,
    epoch: u64,
    method: String,
    #[serde(default)]
    args: Value,
}

const STALE_EPOCH: &str = "STALE_EPOCH";
const NO_SUCH_METHOD: &str = "NO_SUCH_METHOD";
const BAD_ARGS: &str = "BAD_ARGS";
const INTERNAL: &str = "INTERNAL";

#[derive(Debug, Error)]
pub enum HostError {
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("cannot listen on {addr}: {reason}")]
    PortInUse { addr: String, reason: String },
    #[error("registration rejected: {0}")]
    Registration(RegistryError),
}

struct HostShared {
    service_id: u64,
    epoch: AtomicU64,
    service: Mutex<ServiceImpl>,
    received: AtomicU64,
    executed: AtomicU64,
}

impl HostShared {
    fn handle(&self, req: &Envelope) -> Envelope {
        if req.msg_type != MsgType::Invoke {
            return req.reply(
                MsgType::Err,
                json!({"code": "BAD_REQUEST", "message": format!("unexpected {}", req.msg_type)}),
            );
        }
        self.received.fetch_add(1, Ordering::SeqCst);
        let body: InvokeBody = match req.parse_body() {
            Ok(b) => b,
            Err(e) => return invoke_err(req, BAD_ARGS, e),
        };
        let mut service = self.service.lock().unwrap();
        // Checked under the service lock so a call never races a restart of this host.
        if body.service_id != self.service_id || body.epoch != self.epoch.load(Ordering::SeqCst) {
            return invoke_err(req, STALE_EPOCH, "descriptor does not name the current incarnation");
        }
        let args = if body.args.is_null() { json!({}) } else { body.args };
        match service.call(&body.method, &args) {
            Ok(value) => {
                self.executed.fetch_add(1, Ordering::SeqCst);
                req.reply(MsgType::InvokeOk, json!({ "value": value }))
            }
            Err(ServiceFault::NoSuchMethod(m)) => invoke_err(req, NO_SUCH_METHOD, m),
            Err(ServiceFault::BadArgs(m)) => invoke_err(req, BAD_ARGS, m),
            Err(ServiceFault::Internal(m)) => invoke_err(req, INTERNAL, m),
        }
    }
}

fn invoke_err(req: &Envelope, code: &str, message: impl fmt::Display) -> Envelope {
    req.reply(
        MsgType::InvokeErr,
        json!({"code": code, "message": message.to_string()}),
    )
}

/// A running service incarnation.
pub struct ServiceHandle {
    shared: Arc<HostShared>,
    server: FrameServer,
    descriptor: ProxyDescriptor,
}

impl fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceHandle")
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

/// Starts listening on `listen`, then registers with the registry at `registry_addr`.
pub fn start_service(
    service: ServiceImpl,
    registry_addr: &str,
    listen: &str,
) -> Result<ServiceHandle, HostError> {
    let registry =
        RegistryClient::connect(registry_addr).map_err(|e| HostError::RegistryUnavailable(e.to_string()))?;
    start_service_with(service, &registry, listen)
}

pub fn start_service_with(
    service: ServiceImpl,
    registry: &RegistryClient,
    listen: &str,
) -> Result<ServiceHandle, HostError> {
    let port_err = |reason: String| HostError::PortInUse {
        addr: listen.to_string(),
        reason,
    };
    let addr = wire::resolve_addr(listen).map_err(|e| port_err(e.to_string()))?;
    let listener = TcpListener::bind(addr).map_err(|e| port_err(e.to_string()))?;

    let description = service.description().clone();
    let shared = Arc::new(HostShared {
        service_id: rand::random(),
        epoch: AtomicU64::new(0),
        service: Mutex::new(service),
        received: AtomicU64::new(0),
        executed: AtomicU64::new(0),
    });
    let handler_shared = Arc::clone(&shared);
    let mut server = FrameServer::serve(listener, Arc::new(move |req: &Envelope| handler_shared.handle(req)))
        .map_err(|e| port_err(e.to_string()))?;

    let local = server.local_addr();
    let host = advertised_host(local);
    let descriptor = match registry.register(&description, &host, local.port(), shared.service_id) {
        Ok(d) => d,
        Err(e) => {
            server.stop();
            return Err(match e {
                RegistryError::Unavailable(m) => HostError::RegistryUnavailable(m),
                other => HostError::Registration(other),
            });
        }
    };
    shared.epoch.store(descriptor.epoch, Ordering::SeqCst);
    log::info!(
        "service {} listening on {local} (epoch {})",
        description.key,
        descriptor.epoch
    );
    Ok(ServiceHandle {
        shared,
        server,
        descriptor,
    })
}

fn advertised_host(local: SocketAddr) -> String {
    if local.ip().is_unspecified() {
        IpAddr::V4(Ipv4Addr::LOCALHOST).to_string()
    } else {
        local.ip().to_string()
    }
}

impl ServiceHandle {
    pub fn descriptor(&self) -> &ProxyDescriptor {
        &self.descriptor
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    /// INVOKE requests received, including rejected ones.
    pub fn invocations_received(&self) -> u64 {
        self.shared.received.load(Ordering::SeqCst)
    }

    /// Handler executions that completed successfully.
    pub fn invocations_executed(&self) -> u64 {
        self.shared.executed.load(Ordering::SeqCst)
    }

    pub fn state(&self) -> Value {
        self.shared.service.lock().unwrap().state().clone()
    }

    /// Closes the listener and open connections. The registry entry is left in place.
    pub fn stop(&mut self) {
        self.server.stop();
    }
}

/// Invokes `method` on the incarnation named by `descriptor`, one connection per call.
pub fn invoke(descriptor: &ProxyDescriptor, method: &str, args: &Value) -> Result<Value, InvokeError> {
    invoke_with_timeout(descriptor, method, args, wire::DEFAULT_IO_TIMEOUT)
}

pub fn invoke_with_timeout(
    descriptor: &ProxyDescriptor,
    method: &str,
    args: &Value,
    timeout: Duration,
) -> Result<Value, InvokeError> {
    let transport = |e: &dyn fmt::Display| InvokeError::InvalidBinding(BindingFault::Transport(e.to_string()));
    let addr = descriptor.socket_addr().map_err(|e| transport(&e))?;
    let mut conn = Connection::connect(addr, timeout).map_err(|e| transport(&e))?;
    let body = serde_json::to_value(InvokeBody {
        service_id: descriptor.service_id,
        epoch: descriptor.epoch,
        method: method.to_string(),
        args: args.clone(),
    })
    .expect("invoke body serializes");
    let resp = conn
        .request(&Envelope::new(MsgType::Invoke, 1, body))
        .map_err(|e| {
            if e.is_transport() {
                transport(&e)
            } else {
                InvokeError::Internal(e.to_string())
            }
        })?;
    match resp.msg_type {
        MsgType::InvokeOk => Ok(resp.body.get("value").cloned().unwrap_or(Value::Null)),
        MsgType::InvokeErr => {
            let code = resp.body.get("code").and_then(Value::as_str).unwrap_or("");
            let message = resp
                .body
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            Err(match code {
                STALE_EPOCH => InvokeError::InvalidBinding(BindingFault::StaleEpoch),
                NO_SUCH_METHOD => InvokeError::NoSuchMethod(message),
                BAD_ARGS => InvokeError::BadArgs(message),
                _ => InvokeError::Internal(message),
            })
        }
        other => Err(InvokeError::Internal(format!("unexpected {other} response"))),
    }
}

#[cfg(test)]
mod tests {
    use super::catalog;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_method_set() {
        for svc in [catalog::light("/r/l"), catalog::air_conditioner("/r/a")] {
            let names: Vec<_> = svc.method_names().collect();
            assert_eq!(names, ["getState", "setLevel", "turnOff", "turnOn"]);
        }
        assert!(catalog::for_type("toaster", "/r/t").is_none());
    }

    #[test]
    fn light_semantics() {
        let mut l = catalog::light("/room1/light");
        assert_eq!(l.call("turnOn", &json!({})).unwrap(), json!({"status": "on"}));
        assert_eq!(
            l.call("setLevel", &json!({"level": 40})).unwrap(),
            json!({"status": "on", "level": 40})
        );
        assert_eq!(l.call("getState", &json!({})).unwrap(), json!({"status": "on", "level": 40}));
        assert_eq!(l.call("turnOff", &json!({})).unwrap(), json!({"status": "off"}));
    }

    #[test]
    fn failing_call_leaves_state() {
        let mut l = catalog::light("/room1/light");
        let before = l.state().clone();
        assert!(matches!(l.call("setLevel", &json!({"level": 101})), Err(ServiceFault::BadArgs(_))));
        assert!(matches!(l.call("setLevel", &json!({})), Err(ServiceFault::BadArgs(_))));
        assert!(matches!(l.call("dim", &json!({})), Err(ServiceFault::NoSuchMethod(_))));
        assert!(matches!(l.call("turnOn", &json!(3)), Err(ServiceFault::BadArgs(_))));
        assert_eq!(l.state(), &before);
    }

    #[test]
    #[should_panic(expected = "duplicate method")]
    fn duplicate_method_names_panic() {
        let _ = ServiceImpl::new(ServiceDescription::new("/x", "x"), json!({}))
            .with_method("a", |_, _| Ok(json!(null)))
            .with_method("a", |_, _| Ok(json!(null)));
    }

    #[derive(Debug, Clone)]
    enum DeviceOp {
        On,
        Off,
        Level(u64),
        Get,
    }

    proptest! {
        // getState reflects the last successful mutation.
        #[test]
        fn device_matches_state_machine(ops in prop::collection::vec(
            prop_oneof![
                Just(DeviceOp::On),
                Just(DeviceOp::Off),
                (0u64..150).prop_map(DeviceOp::Level),
                Just(DeviceOp::Get),
            ], 0..40)
        ) {
            let mut dev = catalog::air_conditioner("/room1/ac");
            let (mut on, mut level) = (false, catalog::AC_INITIAL_LEVEL);
            for op in ops {
                match op {
                    DeviceOp::On => { dev.call("turnOn", &json!({})).unwrap(); on = true; }
                    DeviceOp::Off => { dev.call("turnOff", &json!({})).unwrap(); on = false; }
                    DeviceOp::Level(l) => {
                        let r = dev.call("setLevel", &json!({"level": l}));
                        prop_assert_eq!(r.is_ok(), l <= 100);
                        if l <= 100 { level = l; }
                    }
                    DeviceOp::Get => {}
                }
                let expect = json!({"status": if on {"on"} else {"off"}, "level": level});
                prop_assert_eq!(dev.call("getState", &json!({})).unwrap(), expect);
            }
        }
    }
}
