use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::HarnessError;
use crate::registry::{RegistryClient, RegistryServer};
use crate::service_host::{self, catalog, ServiceHandle};
use crate::wire;

/// A service to run: key, bundled type (`light` or `ac`) and listen port (0 for any).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub key: String,
    #[serde(rename = "type")]
    pub service_type: String,
    #[serde(default)]
    pub port: u16,
}

impl ServiceSpec {
    pub fn new(key: &str, service_type: &str) -> Self {
        ServiceSpec {
            key: key.to_string(),
            service_type: service_type.to_string(),
            port: 0,
        }
    }
}

/// Where the registry and services run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Deployment {
    /// Threads inside this process, on loopback.
    #[default]
    InProcess,
    /// Child processes of the given `vstub-mw` executable, on loopback.
    Subprocess { exe: PathBuf },
}

/// Kills the child on drop. Keeps stdout open so the child never sees EPIPE.
struct ChildGuard {
    child: Child,
    _stdout: BufReader<ChildStdout>,
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Spawns `exe args...` and waits for its `LISTENING <addr> ...` line.
fn spawn_announcing(exe: &PathBuf, args: &[String]) -> Result<(ChildGuard, Vec<String>), HarnessError> {
    let mut child = Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| HarnessError::Setup(format!("spawn {}: {e}", exe.display())))?;
    let mut stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
    let mut line = String::new();
    let read = stdout.read_line(&mut line);
    let guard = ChildGuard { child, _stdout: stdout };
    match read {
        Ok(n) if n > 0 && line.starts_with("LISTENING ") => {
            Ok((guard, line.split_whitespace().skip(1).map(str::to_string).collect()))
        }
        Ok(_) => Err(HarnessError::Setup(format!(
            "{} {} exited without announcing its address",
            exe.display(),
            args.join(" ")
        ))),
        Err(e) => Err(HarnessError::Setup(format!("reading child stdout: {e}"))),
    }
}

enum RegistryNode {
    Local(RegistryServer),
    Child(#[allow(dead_code)] ChildGuard),
}

enum Running {
    Local(ServiceHandle),
    Child(#[allow(dead_code)] ChildGuard),
    Stopped,
}

struct ServiceNode {
    spec: ServiceSpec,
    port: u16,
    running: Running,
}

/// A registry plus a set of bundled device services on loopback.
pub struct Testbed {
    deployment: Deployment,
    registry: RegistryNode,
    registry_addr: SocketAddr,
    client: Arc<RegistryClient>,
    services: BTreeMap<String, ServiceNode>,
}

impl std::fmt::Debug for Testbed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Testbed")
            .field("deployment", &self.deployment)
            .field("registry_addr", &self.registry_addr)
            .field("services", &self.services.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Testbed {
    pub fn start(deployment: Deployment, services: &[ServiceSpec]) -> Result<Testbed, HarnessError> {
        for s in services {
            if catalog::for_type(&s.service_type, &s.key).is_none() {
                return Err(HarnessError::Setup(format!(
                    "unknown service type {:?} for {}",
                    s.service_type, s.key
                )));
            }
        }
        let (registry, registry_addr) = match &deployment {
            Deployment::InProcess => {
                let server = RegistryServer::start("127.0.0.1:0")
                    .map_err(|e| HarnessError::Setup(format!("registry: {e}")))?;
                let addr = server.local_addr();
                (RegistryNode::Local(server), addr)
            }
            Deployment::Subprocess { exe } => {
                let args = vec!["registry".into(), "--listen".into(), "127.0.0.1:0".into()];
                let (guard, words) = spawn_announcing(exe, &args)?;
                let addr = words
                    .first()
                    .and_then(|a| a.parse().ok())
                    .ok_or_else(|| HarnessError::Setup(format!("bad registry announcement {words:?}")))?;
                (RegistryNode::Child(guard), addr)
            }
        };
        let mut bed = Testbed {
            deployment,
            registry,
            registry_addr,
            client: Arc::new(RegistryClient::new(registry_addr)),
            services: BTreeMap::new(),
        };
        for spec in services {
            if bed.services.contains_key(&spec.key) {
                return Err(HarnessError::Setup(format!("duplicate service key {}", spec.key)));
            }
            bed.services.insert(
                spec.key.clone(),
                ServiceNode {
                    spec: spec.clone(),
                    port: spec.port,
                    running: Running::Stopped,
                },
            );
            bed.start_service(&spec.key)?;
        }
        Ok(bed)
    }

    pub fn registry_addr(&self) -> SocketAddr {
        self.registry_addr
    }

    /// A shared client for the testbed's registry.
    pub fn client(&self) -> Arc<RegistryClient> {
        Arc::clone(&self.client)
    }

    /// The in-process registry server, if there is one.
    pub fn registry_server(&self) -> Option<&RegistryServer> {
        match &self.registry {
            RegistryNode::Local(s) => Some(s),
            RegistryNode::Child(_) => None,
        }
    }

    pub fn service_keys(&self) -> impl Iterator<Item = &str> {
        self.services.keys().map(String::as_str)
    }

    /// The in-process handle for a running service.
    pub fn service(&self, key: &str) -> Option<&ServiceHandle> {
        match &self.services.get(key)?.running {
            Running::Local(h) => Some(h),
            _ => None,
        }
    }

    /// Starts a stopped service on the port it last used; it registers under a new epoch.
    pub fn start_service(&mut self, key: &str) -> Result<(), HarnessError> {
        let registry_addr = self.registry_addr.to_string();
        let client = Arc::clone(&self.client);
        let deployment = self.deployment.clone();
        let node = self
            .services
            .get_mut(key)
            .ok_or_else(|| HarnessError::Setup(format!("no service {key}")))?;
        if !matches!(node.running, Running::Stopped) {
            return Ok(());
        }
        let listen = format!("127.0.0.1:{}", node.port);
        match deployment {
            Deployment::InProcess => {
                let svc = catalog::for_type(&node.spec.service_type, key).expect("type checked at start");
                let handle = service_host::start_service_with(svc, &client, &listen)
                    .map_err(|e| HarnessError::Setup(format!("{key}: {e}")))?;
                node.port = handle.local_addr().port();
                node.running = Running::Local(handle);
            }
            Deployment::Subprocess { exe } => {
                let args = vec![
                    "service".to_string(),
                    "--registry".into(),
                    registry_addr,
                    "--key".into(),
                    key.to_string(),
                    "--type".into(),
                    node.spec.service_type.clone(),
                    "--listen".into(),
                    listen,
                ];
                let (guard, words) = spawn_announcing(&exe, &args)?;
                let addr: SocketAddr = words
                    .first()
                    .and_then(|a| a.parse().ok())
                    .ok_or_else(|| HarnessError::Setup(format!("bad service announcement {words:?}")))?;
                node.port = addr.port();
                node.running = Running::Child(guard);
            }
        }
        Ok(())
    }

    /// Stops a service, leaving its registry entry in place. No-op if already stopped.
    pub fn stop_service(&mut self, key: &str) -> Result<(), HarnessError> {
        let node = self
            .services
            .get_mut(key)
            .ok_or_else(|| HarnessError::Setup(format!("no service {key}")))?;
        if let Running::Local(h) = &mut node.running {
            h.stop();
        }
        node.running = Running::Stopped;
        Ok(())
    }

    pub fn restart_service(&mut self, key: &str) -> Result<(), HarnessError> {
        self.stop_service(key)?;
        self.start_service(key)
    }

    /// Current device state; `null` if the service is stopped.
    pub fn device_state(&self, key: &str) -> Result<Value, HarnessError> {
        let node = self
            .services
            .get(key)
            .ok_or_else(|| HarnessError::Setup(format!("no service {key}")))?;
        match &node.running {
            Running::Local(h) => Ok(h.state()),
            Running::Stopped => Ok(Value::Null),
            Running::Child(_) => {
                let d = self
                    .client
                    .lookup(key)
                    .map_err(|e| HarnessError::Setup(e.to_string()))?;
                service_host::invoke_with_timeout(&d, "getState", &json!({}), wire::DEFAULT_IO_TIMEOUT)
                    .map_err(|e| HarnessError::Setup(e.to_string()))
            }
        }
    }

    pub fn device_states(&self) -> Result<BTreeMap<String, Value>, HarnessError> {
        self.services
            .keys()
            .map(|k| Ok((k.clone(), self.device_state(k)?)))
            .collect()
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        for node in self.services.values_mut() {
            if let Running::Local(h) = &mut node.running {
                h.stop();
            }
            node.running = Running::Stopped;
        }
        if let RegistryNode::Local(s) = &mut self.registry {
            s.stop();
        }
    }
}
