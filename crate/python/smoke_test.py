"""Smoke test for the vstub_mw extension. Run python/build_ext.sh first."""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import vstub_mw as vm

HERE = os.path.dirname(os.path.abspath(__file__))
SCENARIOS = os.path.join(HERE, "..", "crates", "core", "scenarios")


def check_wire():
    frame = vm.encode_frame("LOOKUP", 7, {"key": "/room1/light"})
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert vm.decode_frame(frame) == ("LOOKUP", 7, {"key": "/room1/light"})
    for bad in (frame[:3], frame[:-1], (2**31).to_bytes(4, "big")):
        try:
            vm.decode_frame(bad)
        except vm.ProtocolError:
            pass
        else:
            raise AssertionError("accepted a bad frame")


def check_failover():
    registry = vm.RegistryServer()
    light = vm.Service(registry.addr, "/room1/light", "light")
    cache = vm.StubCache(registry.addr)

    stub, how = cache.get("/room1/light")
    assert how == "miss" and stub.epoch == 1
    again, how = cache.get("/room1/light")
    assert how == "hit" and again.same_as(stub)
    assert stub.invoke("turnOn") == {"status": "on"}

    port = light.addr.rsplit(":", 1)[1]
    light.stop()
    light = vm.Service(registry.addr, "/room1/light", "light", listen="127.0.0.1:" + port)
    assert light.epoch == 2
    assert stub.invoke("getState")["status"] == "off"
    c = stub.counters()
    assert (c["lookups"], c["failovers"]) == (1, 1), c
    assert cache.dump()["/room1/light"]["epoch"] == 2

    light.stop()
    try:
        stub.invoke("turnOn")
    except vm.UnresolvableBinding:
        pass
    else:
        raise AssertionError("dead service answered")
    registry.stop()


def check_policies():
    registry = vm.RegistryServer()
    services = [vm.Service(registry.addr, "/room1/" + t, t) for t in ("light", "ac")]
    engine = vm.PolicyEngine(vm.StubCache(registry.addr))
    with open(os.path.join(SCENARIOS, "room1_policies.json")) as f:
        assert engine.load_policies(f.read()) == 2
    report = engine.submit_event("user_presence", "alice", "/room1", "enter")
    assert [b["outcome"] for b in report["bindings"]] == ["miss", "miss"]
    assert all(s.state()["status"] == "on" for s in services)
    assert engine.bound_keys("alice") == ["/room1/ac", "/room1/light"]
    engine.submit_event("user_presence", "alice", "/room1", "leave")
    assert engine.bound_keys("alice") == []


def check_harness():
    s = vm.summarize([10, 20])
    assert s["mean_ns"] == 15.0
    assert math.isclose(s["stddev_ns"], math.sqrt(50), rel_tol=1e-9)
    records, summary = vm.run_bench("uncached", trials=5, bindings=2, seed=1)
    assert len(records) == 5 and all(r["registry_lookups"] == 2 for r in records)
    assert summary["n"] == 5
    report = vm.run_scenario(os.path.join(SCENARIOS, "room1.json"))
    assert (report["cache_stats"]["misses"], report["cache_stats"]["hits"]) == (2, 2)
    assert report["device_states"]["/room1/light"]["status"] == "on"


if __name__ == "__main__":
    for check in (check_wire, check_failover, check_policies, check_harness):
        check()
        print("ok", check.__name__)
    print(json.dumps({"smoke": "passed"}))
