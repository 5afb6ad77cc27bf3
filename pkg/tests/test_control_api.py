import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from gcsim.control_api import serve_experiment
from gcsim.harness import Experiment, ExperimentSpec, run_experiment

SPEC = """
seed = 7
duration = 60.0
stall_grace = 10.0
smr.process.0 = node0:2000:3000
smr.process.1 = node1:2001:3001
smr.process.2 = node2:2002:3002
smr.process.3 = node3:2003:3003
system_placeholder = ignored
workload.arrival_rate = 40
workload.clients = 2
""".replace("system_placeholder = ignored\n", "")

TOKENS = {"observer_token": "obs", "operator_token": "op",
          "ttp_token": "ttp"}


@pytest.fixture()
def served():
    spec = ExperimentSpec.from_text(
        SPEC + "smr.system.initial.view = 0,1,2\n")
    exp = Experiment(spec)
    bridge, server = serve_experiment(exp, tokens=TOKENS, port=0,
                                      realtime=True, speed=50.0)
    host, port = server.server_address[:2]
    base = f"http://{host}:{port}"
    yield exp, bridge, base
    bridge.stop_requested = True
    server.shutdown()


def http(method, url, token=None, body=None, timeout=10.0):
    req = urllib.request.Request(url, method=method)
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    data = None
    if body is not None:
        data = json.dumps(body).encode()
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, data=data, timeout=timeout) as rsp:
            return rsp.status, json.loads(rsp.read().decode())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read().decode())


def test_parameters_listing_and_auth(served):
    exp, bridge, base = served
    status, body = http("GET", f"{base}/v1/parameters", token="obs")
    assert status == 200
    paths = {row["path"] for row in body["parameters"]}
    assert "smr.batch_size" in paths
    assert "layer.tcp.max_bundle_size" in paths

    status, body = http("GET", f"{base}/v1/parameters?category="
                               "BATCHING_BUNDLING", token="obs")
    assert status == 200
    rows = body["parameters"]
    assert all(r["category"] == "BATCHING_BUNDLING" for r in rows)
    assert any(r["path"] == "smr.batch_size" for r in rows)

    status, body = http("GET", f"{base}/v1/parameters", token="wrong")
    assert status == 401
    assert body["error"] == "UNAUTHENTICATED"


def test_post_parameter_roles_and_outcomes(served):
    exp, bridge, base = served
    status, body = http("POST", f"{base}/v1/parameters/smr.max_batch_delay",
                        token="obs", body={"value": 50})
    assert status == 403 and body["error"] == "FORBIDDEN"

    status, body = http("POST", f"{base}/v1/parameters/smr.max_batch_delay",
                        token="op", body={"value": 50})
    assert status == 200
    assert body["outcome"] == "APPLIED"
    assert body["applied_at"] is not None

    status, body = http("POST", f"{base}/v1/parameters/smr.crash_model",
                        token="op", body={"value": "CrashStop"})
    assert status == 200
    assert body["outcome"] == "REJECTED"
    assert body["reason"] == "RESTART_ONLY"

    status, body = http("POST", f"{base}/v1/parameters/smr.window_size",
                        token="op", body={"value": "many"})
    assert status == 200
    assert body["reason"] == "TYPE_MISMATCH"


def test_metrics_and_topology(served):
    exp, bridge, base = served
    time.sleep(0.3)
    status, body = http("GET", f"{base}/v1/metrics", token="obs")
    assert status == 200
    assert "0" in body and "cluster" in body
    status, body = http("GET", f"{base}/v1/topology", token="obs")
    assert status == 200
    assert body["leader"] in (0, 1, 2)
    assert set(body["nodes"]) == {"0", "1", "2", "3"}


def test_view_change_requires_ttp(served):
    exp, bridge, base = served
    time.sleep(0.5)
    status, body = http("POST", f"{base}/v1/view", token="op",
                        body={"action": "ADD", "node": 3})
    assert status == 403

    status, body = http("POST", f"{base}/v1/view", token="ttp",
                        body={"action": "ADD", "node": 3})
    assert status == 200
    assert body["status"] == "SCHEDULED"

    deadline = time.monotonic() + 10.0
    members = None
    while time.monotonic() < deadline:
        status, topo = http("GET", f"{base}/v1/topology", token="obs")
        members = topo["members"]
        if members == [0, 1, 2, 3]:
            break
        time.sleep(0.2)
    assert members == [0, 1, 2, 3]


def test_fault_injection_via_api(served):
    exp, bridge, base = served
    time.sleep(0.3)
    status, body = http("POST", f"{base}/v1/faults", token="op",
                        body={"node": 2, "action": "CRASH"})
    assert status == 200
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:
        status, topo = http("GET", f"{base}/v1/topology", token="obs")
        if not topo["nodes"]["2"]["alive"]:
            break
        time.sleep(0.1)
    assert not topo["nodes"]["2"]["alive"]


def test_stream_delivers_metrics_and_events(served):
    exp, bridge, base = served
    time.sleep(0.2)
    req = urllib.request.Request(
        f"{base}/v1/stream?interval_ms=100&token=obs")
    frames = {"metrics": [], "event": []}
    with urllib.request.urlopen(req, timeout=10.0) as rsp:
        http("POST", f"{base}/v1/faults", token="op",
             body={"node": 3, "action": "CRASH"})
        current_event = None
        deadline = time.monotonic() + 8.0
        while time.monotonic() < deadline:
            line = rsp.readline().decode().strip()
            if line.startswith("event:"):
                current_event = line.split(":", 1)[1].strip()
            elif line.startswith("data:") and current_event:
                frames[current_event].append(
                    json.loads(line.split(":", 1)[1]))
                if any(f["body"].get("kind") == "FAULT"
                       for f in frames["event"]) and \
                        len(frames["metrics"]) >= 4:
                    break
    assert len(frames["metrics"]) >= 4
    fault_frames = [f for f in frames["event"]
                    if f["body"].get("kind") == "FAULT"]
    assert len(fault_frames) == 1
    nodes_seen = {f.get("node") for f in frames["metrics"]}
    assert "cluster" in nodes_seen and "0" in nodes_seen


def test_api_is_pure_adapter():
    # the identical spec run through the bridge with a bound, untouched
    # API yields the byte-identical report of a plain run
    spec_text = SPEC + "duration = 3.0\n"
    plain = run_experiment(ExperimentSpec.from_text(spec_text))

    exp = Experiment(ExperimentSpec.from_text(spec_text))
    bridge, server = serve_experiment(exp, tokens=TOKENS, port=0,
                                      realtime=False)
    bridge.join(30.0)
    server.shutdown()
    assert bridge.report is not None
    assert bridge.report.to_json() == plain.to_json()


def test_throttled_consumer_gets_all_events_fewer_metrics(served):
    exp, bridge, base = served
    time.sleep(0.3)
    req = urllib.request.Request(
        f"{base}/v1/stream?interval_ms=100&token=obs")
    fault_count = 0
    metrics_count = 0
    window_s = 6.0
    with urllib.request.urlopen(req, timeout=15.0) as rsp:
        for node in (1, 2, 3):
            http("POST", f"{base}/v1/faults", token="op",
                 body={"node": node, "action": "CRASH"})
        started = time.monotonic()
        current_event = None
        while time.monotonic() - started < window_s:
            line = rsp.readline().decode().strip()
            if line.startswith("event:"):
                current_event = line.split(":", 1)[1].strip()
            elif line.startswith("data:"):
                payload = json.loads(line.split(":", 1)[1])
                if current_event == "metrics":
                    metrics_count += 1
                elif current_event == "event" and \
                        payload["body"].get("kind") == "FAULT":
                    fault_count += 1
            time.sleep(0.1)  # consumer slower than the frame interval
    # every fault event arrived despite the throttling; the metrics rate
    # was coalesced far below the nominal per-node-per-interval count
    assert fault_count == 3
    nominal = 5 * (window_s / 0.1)  # nodes+cluster frames at full rate
    assert 0 < metrics_count < nominal / 4
