//! Python bindings: registry, device services, stub cache, policy engine and
//! the benchmark/scenario drivers. JSON-shaped values cross the boundary as
//! plain Python dicts, lists and scalars.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde_json::Value;

use vstub_core::harness::{self, BenchConfig, BenchMode, HarnessError};
use vstub_core::reconfig::{self, ContextMonitor, Phase, ReconfigurationManager};
use vstub_core::service_host::{self, catalog};
use vstub_core::wire::{self, Envelope, MsgType, WireError};
use vstub_core::{CacheMode, RegistryClient, RegistryError, ServiceDescription, StubError};

create_exception!(vstub_mw, VstubError, PyException, "Base class for vstub_mw errors.");
create_exception!(vstub_mw, ProtocolError, VstubError, "Malformed, truncated or oversized frame.");
create_exception!(vstub_mw, RegistryUnavailable, VstubError, "Registry could not be reached.");
create_exception!(vstub_mw, ServiceNotFound, VstubError, "No service registered under the key.");
create_exception!(vstub_mw, UnresolvableBinding, VstubError, "Binding could not be re-established.");
create_exception!(vstub_mw, InvocationError, VstubError, "The service rejected the call.");
create_exception!(vstub_mw, HarnessFailure, VstubError, "Benchmark or scenario failure.");

fn wire_err(e: WireError) -> PyErr {
    ProtocolError::new_err(e.to_string())
}

fn registry_err(e: RegistryError) -> PyErr {
    match e {
        RegistryError::ServiceNotFound(k) => ServiceNotFound::new_err(k),
        RegistryError::Unavailable(m) => RegistryUnavailable::new_err(m),
        RegistryError::InvalidKey(m) => PyValueError::new_err(m),
        other => VstubError::new_err(other.to_string()),
    }
}

fn stub_err(e: StubError) -> PyErr {
    match e {
        StubError::UnresolvableBinding { .. } => UnresolvableBinding::new_err(e.to_string()),
        StubError::RegistryUnavailable(_) => RegistryUnavailable::new_err(e.to_string()),
        StubError::NoSuchMethod(_) | StubError::BadArgs(_) | StubError::Internal(_) => {
            InvocationError::new_err(e.to_string())
        }
        other => VstubError::new_err(other.to_string()),
    }
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::InvalidConfig(_) | HarnessError::InsufficientSamples(_) => PyValueError::new_err(e.to_string()),
        other => HarnessFailure::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, value: &Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_py_ser<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn args_or_empty(args: Option<&Bound<'_, PyAny>>) -> PyResult<Value> {
    match args {
        Some(a) if !a.is_none() => from_py(a),
        _ => Ok(Value::Object(Default::default())),
    }
}

/// A service registry listening on loopback.
#[pyclass(module = "vstub_mw")]
struct RegistryServer {
    inner: Mutex<vstub_core::RegistryServer>,
    addr: String,
}

#[pymethods]
impl RegistryServer {
    #[new]
    #[pyo3(signature = (listen = "127.0.0.1:0"))]
    fn new(listen: &str) -> PyResult<Self> {
        let inner = vstub_core::RegistryServer::start(listen).map_err(|e| RegistryUnavailable::new_err(e.to_string()))?;
        let addr = inner.local_addr().to_string();
        Ok(RegistryServer {
            inner: Mutex::new(inner),
            addr,
        })
    }

    #[getter]
    fn addr(&self) -> &str {
        &self.addr
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_ser(py, &self.inner.lock().unwrap().stats())
    }

    fn latest_epoch(&self, key: &str) -> Option<u64> {
        self.inner.lock().unwrap().latest_epoch(key)
    }

    fn stop(&self) {
        self.inner.lock().unwrap().stop();
    }
}

/// Client for a registry at `addr`.
#[pyclass(module = "vstub_mw", frozen)]
struct Registry {
    inner: Arc<RegistryClient>,
}

#[pymethods]
impl Registry {
    #[new]
    fn new(addr: &str) -> PyResult<Self> {
        Ok(Registry {
            inner: Arc::new(RegistryClient::connect(addr).map_err(registry_err)?),
        })
    }

    fn lookup(&self, py: Python<'_>, key: &str) -> PyResult<Py<PyAny>> {
        let d = py.detach(|| self.inner.lookup(key)).map_err(registry_err)?;
        to_py_ser(py, &d)
    }

    /// Keys registered at or below `prefix`, sorted.
    fn list(&self, py: Python<'_>, prefix: &str) -> PyResult<Vec<String>> {
        let found = py.detach(|| self.inner.list(prefix)).map_err(registry_err)?;
        Ok(found.into_iter().map(|d| d.key).collect())
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| self.inner.stats()).map_err(registry_err)?;
        to_py_ser(py, &s)
    }
}

/// A bundled device service (`light` or `ac`) registered with a registry.
#[pyclass(module = "vstub_mw")]
struct Service {
    inner: Mutex<vstub_core::ServiceHandle>,
}

#[pymethods]
impl Service {
    #[new]
    #[pyo3(signature = (registry, key, service_type, listen = "127.0.0.1:0"))]
    fn new(py: Python<'_>, registry: &str, key: &str, service_type: &str, listen: &str) -> PyResult<Self> {
        let svc = catalog::for_type(service_type, key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown service type {service_type:?}")))?;
        let handle = py
            .detach(|| service_host::start_service(svc, registry, listen))
            .map_err(|e| VstubError::new_err(e.to_string()))?;
        Ok(Service {
            inner: Mutex::new(handle),
        })
    }

    #[getter]
    fn addr(&self) -> String {
        self.inner.lock().unwrap().local_addr().to_string()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.lock().unwrap().descriptor().epoch
    }

    fn state(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.lock().unwrap().state())
    }

    fn invocations(&self) -> (u64, u64) {
        let h = self.inner.lock().unwrap();
        (h.invocations_received(), h.invocations_executed())
    }

    /// Stops serving. The registry entry is left in place.
    fn stop(&self) {
        self.inner.lock().unwrap().stop();
    }
}

/// A self-healing handle to one remote service.
#[pyclass(module = "vstub_mw", frozen)]
struct VirtualStub {
    inner: Arc<vstub_core::VirtualStub>,
}

#[pymethods]
impl VirtualStub {
    #[getter]
    fn key(&self) -> &str {
        self.inner.key()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch()
    }

    #[pyo3(signature = (method, args = None))]
    fn invoke(&self, py: Python<'_>, method: &str, args: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
        let args = args_or_empty(args)?;
        let v = py.detach(|| self.inner.invoke(method, &args)).map_err(stub_err)?;
        to_py(py, &v)
    }

    fn counters(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_ser(py, &self.inner.counters())
    }

    fn same_as(&self, other: &VirtualStub) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn __repr__(&self) -> String {
        format!("VirtualStub({:?}, epoch={})", self.inner.key(), self.inner.epoch())
    }
}

/// Client-side cache of virtual stubs, keyed by service key.
#[pyclass(module = "vstub_mw", frozen)]
struct StubCache {
    inner: Arc<vstub_core::StubCache>,
}

#[pymethods]
impl StubCache {
    #[new]
    fn new(registry: &str) -> PyResult<Self> {
        let client = RegistryClient::connect(registry).map_err(registry_err)?;
        Ok(StubCache {
            inner: vstub_core::StubCache::new(Arc::new(client)),
        })
    }

    /// Returns `(stub, outcome)` where outcome is hit, coalesced, miss or bypass.
    #[pyo3(signature = (key, service_type = None))]
    fn get(&self, py: Python<'_>, key: &str, service_type: Option<&str>) -> PyResult<(VirtualStub, String)> {
        let desc = match service_type {
            Some(t) => ServiceDescription::new(key, t),
            None => reconfig::description_for_key(key),
        };
        let (stub, how) = py.detach(|| self.inner.get(&desc)).map_err(registry_err)?;
        let label = serde_json::to_value(how)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Ok((VirtualStub { inner: stub }, label))
    }

    #[getter]
    fn bypass(&self) -> bool {
        self.inner.mode() == CacheMode::Bypass
    }

    #[setter]
    fn set_bypass(&self, on: bool) {
        self.inner.set_mode(if on { CacheMode::Bypass } else { CacheMode::Normal });
    }

    fn invalidate(&self, key: &str) -> bool {
        self.inner.invalidate(key)
    }

    fn clear(&self) -> usize {
        self.inner.clear()
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_ser(py, &self.inner.stats())
    }

    fn dump(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.dump())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, key: &str) -> bool {
        self.inner.contains(key)
    }
}

/// Obligation-policy engine bound to a stub cache.
#[pyclass(module = "vstub_mw")]
struct PolicyEngine {
    inner: Mutex<vstub_core::reconfig::PolicyEngine>,
    monitor: ContextMonitor,
}

#[pymethods]
impl PolicyEngine {
    #[new]
    fn new(cache: &StubCache) -> Self {
        PolicyEngine {
            inner: Mutex::new(vstub_core::reconfig::PolicyEngine::new(ReconfigurationManager::new(
                Arc::clone(&cache.inner),
            ))),
            monitor: ContextMonitor::new(),
        }
    }

    /// Loads a policy document (JSON text); returns the number of policies added.
    fn load_policies(&self, document: &str) -> PyResult<usize> {
        self.inner
            .lock()
            .unwrap()
            .load_policies(document)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Emits a context event and runs the matching policies. Returns the event report.
    fn submit_event(
        &self,
        py: Python<'_>,
        event_type: &str,
        user: &str,
        location: &str,
        phase: &str,
    ) -> PyResult<Py<PyAny>> {
        let phase = match phase {
            "enter" => Phase::Enter,
            "leave" => Phase::Leave,
            other => return Err(PyValueError::new_err(format!("phase must be enter or leave, not {other:?}"))),
        };
        let report = py.detach(|| {
            let event = self.monitor.emit(event_type, user, location, phase);
            self.inner.lock().unwrap().submit_event(&event)
        });
        to_py_ser(py, &report)
    }

    fn bound_keys(&self, user: &str) -> Vec<String> {
        let engine = self.inner.lock().unwrap();
        engine
            .manager()
            .user(user)
            .map(|u| u.bound_keys().map(str::to_string).collect())
            .unwrap_or_default()
    }
}

#[pyfunction]
fn encode_frame<'py>(
    py: Python<'py>,
    msg_type: &str,
    request_id: u64,
    body: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyBytes>> {
    let t: MsgType = msg_type.parse().map_err(wire_err)?;
    let bytes = wire::encode_frame(&Envelope::new(t, request_id, from_py(body)?)).map_err(wire_err)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Decodes one frame; returns `(msg_type, request_id, body)`.
#[pyfunction]
fn decode_frame(py: Python<'_>, data: &[u8]) -> PyResult<(String, u64, Py<PyAny>)> {
    let env = wire::decode_frame(&mut std::io::Cursor::new(data)).map_err(wire_err)?;
    Ok((env.msg_type.as_str().to_string(), env.request_id, to_py(py, &env.body)?))
}

/// Mean, sample stddev, min and max of latencies in nanoseconds.
#[pyfunction]
#[pyo3(signature = (latencies, mode = "cached"))]
fn summarize(py: Python<'_>, latencies: Vec<u64>, mode: &str) -> PyResult<Py<PyAny>> {
    let mode: BenchMode = mode.parse().map_err(harness_err)?;
    let s = harness::summarize_latencies(mode, &latencies).map_err(harness_err)?;
    to_py_ser(py, &s)
}

/// Runs an in-process benchmark; returns `(records, summary)`.
#[pyfunction]
#[pyo3(signature = (mode, trials = 20, bindings = 1, seed = 0, warmup = 1))]
fn run_bench(
    py: Python<'_>,
    mode: &str,
    trials: usize,
    bindings: usize,
    seed: u64,
    warmup: usize,
) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let cfg = BenchConfig {
        mode: mode.parse().map_err(harness_err)?,
        trials,
        bindings_per_trigger: bindings,
        seed,
        warmup_trials: warmup,
        ..BenchConfig::default()
    };
    let run = py.detach(|| harness::run_bench(&cfg)).map_err(harness_err)?;
    Ok((to_py_ser(py, &run.records)?, to_py_ser(py, &run.summary)?))
}

/// Replays a scenario file in-process and returns its report.
#[pyfunction]
fn run_scenario(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let report = py.detach(|| harness::run_scenario(&path)).map_err(harness_err)?;
    to_py_ser(py, &report)
}

#[pymodule]
fn vstub_mw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("VstubError", py.get_type::<VstubError>())?;
    m.add("ProtocolError", py.get_type::<ProtocolError>())?;
    m.add("RegistryUnavailable", py.get_type::<RegistryUnavailable>())?;
    m.add("ServiceNotFound", py.get_type::<ServiceNotFound>())?;
    m.add("UnresolvableBinding", py.get_type::<UnresolvableBinding>())?;
    m.add("InvocationError", py.get_type::<InvocationError>())?;
    m.add("HarnessFailure", py.get_type::<HarnessFailure>())?;
    m.add("MAX_FRAME_LEN", wire::MAX_FRAME_LEN)?;
    m.add_class::<RegistryServer>()?;
    m.add_class::<Registry>()?;
    m.add_class::<Service>()?;
    m.add_class::<VirtualStub>()?;
    m.add_class::<StubCache>()?;
    m.add_class::<PolicyEngine>()?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
