use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use vstub_core::harness::{Deployment, ServiceSpec, Testbed};
use vstub_core::service_host::{self, catalog, BindingFault, InvokeError};
use vstub_core::{RegistryClient, RegistryServer, ServiceDescription, StubCache, StubError, VirtualStub};

fn room1() -> Testbed {
    Testbed::start(
        Deployment::InProcess,
        &[ServiceSpec::new("/room1/light", "light"), ServiceSpec::new("/room1/ac", "ac")],
    )
    .unwrap()
}

#[test]
fn restart_registers_next_epoch_on_same_port() {
    let mut bed = room1();
    let first = bed.service("/room1/light").unwrap().descriptor().clone();
    bed.restart_service("/room1/light").unwrap();
    let second = bed.service("/room1/light").unwrap().descriptor().clone();
    assert_eq!(second.epoch, first.epoch + 1);
    assert_eq!(second.port, first.port);
    assert_ne!(second.service_id, first.service_id);
    assert_eq!(bed.client().lookup("/room1/light").unwrap(), second);
}

#[test]
fn old_descriptor_is_stale_after_restart() {
    let mut bed = room1();
    let old = bed.client().lookup("/room1/light").unwrap();
    bed.restart_service("/room1/light").unwrap();
    let err = service_host::invoke(&old, "turnOn", &json!({})).unwrap_err();
    assert!(matches!(err, InvokeError::InvalidBinding(BindingFault::StaleEpoch)), "{err:?}");
    assert_eq!(bed.service("/room1/light").unwrap().invocations_executed(), 0);
}

#[test]
fn stopped_service_is_a_transport_fault_and_stays_registered() {
    let mut bed = room1();
    let d = bed.client().lookup("/room1/ac").unwrap();
    bed.stop_service("/room1/ac").unwrap();
    let err = service_host::invoke_with_timeout(&d, "getState", &json!({}), Duration::from_secs(1)).unwrap_err();
    assert!(matches!(err, InvokeError::InvalidBinding(BindingFault::Transport(_))), "{err:?}");
    assert_eq!(bed.client().lookup("/room1/ac").unwrap(), d);
    assert_eq!(bed.device_state("/room1/ac").unwrap(), serde_json::Value::Null);
}

#[test]
fn logical_errors_are_not_binding_faults() {
    let bed = room1();
    let d = bed.client().lookup("/room1/light").unwrap();
    let err = service_host::invoke(&d, "setLevel", &json!({"level": 500})).unwrap_err();
    assert!(matches!(err, InvokeError::BadArgs(_)), "{err:?}");
    let err = service_host::invoke(&d, "explode", &json!({})).unwrap_err();
    assert!(matches!(err, InvokeError::NoSuchMethod(_)), "{err:?}");
    let h = bed.service("/room1/light").unwrap();
    assert_eq!((h.invocations_received(), h.invocations_executed()), (2, 0));
}

#[test]
fn stub_fails_over_after_restart() {
    let mut bed = room1();
    let client = bed.client();
    let cache = StubCache::new(client.clone());
    let stub = cache.get_virtual_stub(&ServiceDescription::new("/room1/light", "light")).unwrap();
    stub.invoke("turnOn", &json!({})).unwrap();
    let before = client.stats().unwrap().lookup_count;

    bed.restart_service("/room1/light").unwrap();
    assert_eq!(stub.invoke("getState", &json!({})).unwrap()["status"], "off");

    let c = stub.counters();
    assert_eq!((c.calls_total, c.attempts, c.lookups, c.failovers, c.retries), (2, 3, 1, 1, 1));
    assert_eq!(client.stats().unwrap().lookup_count - before, 1);
    let latest = bed.registry_server().unwrap().latest_epoch("/room1/light").unwrap();
    assert_eq!(stub.epoch(), latest);
    let entry = cache.entry("/room1/light").unwrap();
    assert_eq!((entry.source_epoch, entry.proxy.epoch), (latest, latest));
    assert_eq!(cache.stats().updates, 1);
    assert_eq!(cache.total_failovers(), 1);
}

#[test]
fn stub_gives_up_when_service_stays_down() {
    let mut bed = room1();
    let client = bed.client();
    let cache = StubCache::new(client.clone());
    let stub = cache.get_virtual_stub(&ServiceDescription::new("/room1/ac", "ac")).unwrap();
    let epoch = stub.epoch();
    bed.stop_service("/room1/ac").unwrap();

    let err = stub.invoke("turnOn", &json!({})).unwrap_err();
    assert!(matches!(err, StubError::UnresolvableBinding { .. }), "{err:?}");
    let c = stub.counters();
    assert_eq!((c.attempts, c.lookups, c.failovers), (2, 1, 0));
    assert_eq!(cache.entry("/room1/ac").unwrap().source_epoch, epoch);
    assert_eq!(cache.stats().updates, 0);
}

#[test]
fn unregistered_service_is_unresolvable_without_retry() {
    let server = RegistryServer::start("127.0.0.1:0").unwrap();
    let client = Arc::new(RegistryClient::new(server.local_addr()));
    let mut handle =
        service_host::start_service_with(catalog::light("/r/light"), &client, "127.0.0.1:0").unwrap();
    let d = handle.descriptor().clone();
    let stub = VirtualStub::new(ServiceDescription::new("/r/light", "light"), d.clone(), client.clone(), None).unwrap();
    handle.stop();
    client.unregister("/r/light", d.epoch).unwrap();
    assert!(matches!(
        stub.invoke("turnOn", &json!({})),
        Err(StubError::UnresolvableBinding { .. })
    ));
    let c = stub.counters();
    assert_eq!((c.attempts, c.lookups, c.retries), (1, 1, 0));
}

#[test]
fn zero_retry_budget_never_looks_up() {
    let mut bed = room1();
    let client = bed.client();
    let d = client.lookup("/room1/light").unwrap();
    let stub = VirtualStub::new(ServiceDescription::new("/room1/light", "light"), d, client, None)
        .unwrap()
        .with_retry_budget(0);
    bed.restart_service("/room1/light").unwrap();
    assert!(matches!(
        stub.invoke("turnOn", &json!({})),
        Err(StubError::UnresolvableBinding { .. })
    ));
    assert_eq!(stub.counters().lookups, 0);
}

#[test]
fn logical_error_passes_through_stub() {
    let bed = room1();
    let cache = StubCache::new(bed.client());
    let stub = cache.get_virtual_stub(&ServiceDescription::new("/room1/light", "light")).unwrap();
    assert!(matches!(stub.invoke("setLevel", &json!({"level": -1})), Err(StubError::BadArgs(_))));
    assert_eq!(stub.counters().lookups, 0);
}

#[test]
fn stub_follows_service_to_new_port() {
    let server = RegistryServer::start("127.0.0.1:0").unwrap();
    let client = Arc::new(RegistryClient::new(server.local_addr()));
    let mut first = service_host::start_service_with(catalog::light("/r/light"), &client, "127.0.0.1:0").unwrap();
    let cache = StubCache::new(client.clone());
    let stub = cache.get_virtual_stub(&ServiceDescription::new("/r/light", "light")).unwrap();
    first.stop();
    let second = service_host::start_service_with(catalog::light("/r/light"), &client, "127.0.0.1:0").unwrap();

    stub.invoke("turnOn", &json!({})).unwrap();
    assert_eq!(second.state()["status"], "on");
    assert_eq!(stub.proxy(), *second.descriptor());
    let c = stub.counters();
    assert_eq!((c.attempts, c.lookups, c.failovers), (2, 1, 1));
    assert_eq!(cache.entry("/r/light").unwrap().proxy.port, second.local_addr().port());
}
