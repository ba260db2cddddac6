#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::{Arc, Barrier};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstub_core::{GetOutcome, RegistryClient, RegistryServer, ServiceDescription, StubCache};

/// A registry with `n` light descriptors `/bench/k0` .. registered against an unused port.
pub fn seeded_registry(n: usize) -> (RegistryServer, Arc<RegistryClient>, Vec<ServiceDescription>) {
    let server = RegistryServer::start("127.0.0.1:0").unwrap();
    let client = Arc::new(RegistryClient::new(server.local_addr()));
    let descs: Vec<_> = (0..n)
        .map(|i| ServiceDescription::new(format!("/bench/k{i}"), "light"))
        .collect();
    for (i, d) in descs.iter().enumerate() {
        client.register(d, "127.0.0.1", 1, i as u64).unwrap();
    }
    (server, client, descs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Get(usize),
    Invalidate(usize),
}

pub fn random_ops(seed: u64, n: usize, keys: usize) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..keys);
            if rng.random_bool(0.7) {
                Op::Get(k)
            } else {
                Op::Invalidate(k)
            }
        })
        .collect()
}

/// Reference model: a plain set of cached keys. `true` means hit.
pub fn model_outcomes(ops: &[Op]) -> Vec<bool> {
    let mut cached = HashSet::new();
    ops.iter()
        .filter_map(|op| match *op {
            Op::Get(k) => Some(!cached.insert(k)),
            Op::Invalidate(k) => {
                cached.remove(&k);
                None
            }
        })
        .collect()
}

pub fn cache_outcomes(cache: &StubCache, descs: &[ServiceDescription], ops: &[Op]) -> Vec<bool> {
    ops.iter()
        .filter_map(|op| match *op {
            Op::Get(k) => {
                let (_, how) = cache.get(&descs[k]).unwrap();
                assert_ne!(how, GetOutcome::Coalesced, "single-threaded get coalesced");
                Some(how == GetOutcome::Hit)
            }
            Op::Invalidate(k) => {
                cache.invalidate(&descs[k].key);
                None
            }
        })
        .collect()
}

/// `threads` concurrent cold gets of one key. Returns (registry lookups used, all handles identical).
pub fn cold_burst(cache: &Arc<StubCache>, client: &RegistryClient, desc: &ServiceDescription, threads: usize) -> (u64, bool) {
    cache.invalidate(&desc.key);
    let before = client.stats().unwrap().lookup_count;
    let barrier = Arc::new(Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let (cache, barrier, desc) = (Arc::clone(cache), Arc::clone(&barrier), desc.clone());
            thread::spawn(move || {
                barrier.wait();
                cache.get_virtual_stub(&desc).unwrap()
            })
        })
        .collect();
    let stubs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let lookups = client.stats().unwrap().lookup_count - before;
    (lookups, stubs.iter().all(|s| Arc::ptr_eq(s, &stubs[0])))
}

pub fn median(xs: &mut [u64]) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] as f64 + xs[n / 2] as f64) / 2.0
    }
}

pub mod gen {
    use proptest::prelude::*;
    use serde_json::{Map, Number, Value};
    use vstub_core::wire::{Envelope, MsgType};

    fn scalar() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::from),
            any::<u64>().prop_map(Value::from),
            any::<f64>()
                .prop_filter("finite", |f| f.is_finite())
                .prop_map(|f| Value::Number(Number::from_f64(f).unwrap())),
            ".{0,24}".prop_map(Value::String),
        ]
    }

    pub fn json() -> impl Strategy<Value = Value> {
        scalar().prop_recursive(4, 48, 6, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
                prop::collection::btree_map(".{0,10}", inner, 0..6)
                    .prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>())),
            ]
        })
    }

    pub fn envelope() -> impl Strategy<Value = Envelope> {
        (prop::sample::select(MsgType::ALL.to_vec()), any::<u64>(), json())
            .prop_map(|(t, id, body)| Envelope::new(t, id, body))
    }
}
