import random
import zlib

import pytest

from gcsim.cluster import GcsCluster
from gcsim.core import Message
from gcsim.layers.transport import (
    BundlerState,
    bundle_enqueue,
    bundle_timeout_flush,
    fragment_payload,
)
from gcsim.simnet import DisconnectInterval, NetworkProfile
from gcsim.stack import LayerSpec, StackConfig


def cfg(*names, **overrides):
    return StackConfig([LayerSpec(n, dict(overrides.get(n, {})))
                        for n in names])


def msg(size):
    return Message(0, 1, bytes(size))


# -- bundling -------------------------------------------------------------------

def test_bundle_worked_example():
    st = BundlerState(max_bundle_size=1000, max_bundle_timeout_ms=10)
    sizes = [100, 300, 400]
    for s in sizes:
        assert bundle_enqueue(st, msg(s), s, now_ms=0.0) == []
    flushed = bundle_enqueue(st, msg(300), 300, now_ms=1.0)
    assert len(flushed) == 1
    assert [len(m.payload) for m in flushed[0]] == [100, 300, 400]
    assert st.pending_bytes == 300


def test_bundle_oversized_message_sent_alone():
    st = BundlerState(max_bundle_size=1000, max_bundle_timeout_ms=10)
    bundle_enqueue(st, msg(500), 500, now_ms=0.0)
    flushed = bundle_enqueue(st, msg(5000), 5000, now_ms=0.0)
    assert [len(b) for b in flushed] == [1, 1]
    assert [len(m.payload) for m in flushed[0]] == [500]
    assert [len(m.payload) for m in flushed[1]] == [5000]


def test_bundle_disabled_flushes_each_message():
    st = BundlerState(max_bundle_size=1000, max_bundle_timeout_ms=10,
                      enabled=False)
    assert bundle_enqueue(st, msg(10), 10, 0.0) == [[msg(10)]]


def test_bundle_timeout_flush():
    st = BundlerState(max_bundle_size=1000, max_bundle_timeout_ms=10)
    bundle_enqueue(st, msg(50), 50, now_ms=5.0)
    assert bundle_timeout_flush(st, now_ms=14.9) is None
    out = bundle_timeout_flush(st, now_ms=15.0)
    assert [len(m.payload) for m in out] == [50]


def test_bundle_timer_fires_in_cluster():
    overrides = {"udp": {"max_bundle_timeout": 10}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    cluster.nodes[0].multicast(b"x" * 50)
    cluster.run_until(1.0095)
    assert cluster.delivery_log(1) == []
    cluster.run_until(1.2)
    assert cluster.delivery_log(1) == [(0, b"x" * 50)]


# -- fragmentation ----------------------------------------------------------------

def test_fragment_sizes():
    chunks = fragment_payload(bytes(2500), 1000)
    assert [len(c) for c in chunks] == [1000, 1000, 500]


def test_fragment_boundary_pass_through():
    assert fragment_payload(bytes(1000), 1000) == [bytes(1000)]


def test_fragment_reassembly_round_trip_property():
    rng = random.Random(11)
    frag_size = 256
    overrides = {"udp": {"enable_bundling": False},
                 "frag": {"frag_size": frag_size}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "frag", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    payloads = [rng.randbytes(rng.randrange(0, 4 * frag_size + 1))
                for _ in range(40)]
    for p in payloads:
        cluster.nodes[0].multicast(p)
    cluster.run_until(5.0)
    assert [p for _, p in cluster.delivery_log(1)] == payloads


# -- compression -------------------------------------------------------------------

def test_compress_below_min_size_unchanged():
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "compress"))
    cluster.start()
    cluster.run_until(1.0)
    payload = bytes(400)
    cluster.nodes[0].multicast(payload)
    cluster.run_until(2.0)
    assert cluster.delivery_log(1) == [(0, payload)]


def test_compress_level_zero_round_trips():
    overrides = {"compress": {"compression_level": 0, "min_size": 10}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "compress", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    payload = bytes(range(200)) + bytes(200)
    cluster.nodes[0].multicast(payload)
    cluster.run_until(2.0)
    assert cluster.delivery_log(1) == [(0, payload)]


def test_compress_shrinks_repetitive_payload():
    payload = b"\x41" * 10_000
    compressed = zlib.compress(payload, 9)
    assert len(compressed) < len(payload)  # compressibility oracle
    overrides = {"udp": {"enable_bundling": False},
                 "compress": {"compression_level": 9}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "compress", **overrides))
    # raise the mtu so the single compressed datagram is not dropped
    cluster.profile.mtu = 64000
    cluster.start()
    cluster.run_until(1.0)
    before = cluster.network.counters.get("sent_bytes", 0)
    cluster.nodes[0].multicast(payload)
    cluster.run_until(2.0)
    wire_bytes = cluster.network.counters["sent_bytes"] - before
    assert wire_bytes < len(payload)
    assert cluster.delivery_log(1) == [(0, payload)]


# -- transports ----------------------------------------------------------------------

def test_udp_ip_mcast_single_transmission():
    overrides = {"udp": {"enable_bundling": False}}
    cluster = GcsCluster(4, stack_cfg=cfg("udp", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    before = cluster.network.counters.get("transmissions", 0)
    cluster.nodes[0].multicast(b"m")
    cluster.run_until(2.0)
    assert cluster.network.counters["transmissions"] - before == 1
    for n in (1, 2, 3):
        assert cluster.delivery_log(n) == [(0, b"m")]


def test_udp_without_ip_mcast_sends_n_datagrams():
    overrides = {"udp": {"enable_bundling": False, "ip_mcast": False}}
    cluster = GcsCluster(4, stack_cfg=cfg("udp", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    before = cluster.network.counters.get("transmissions", 0)
    cluster.nodes[0].multicast(b"m")
    cluster.run_until(2.0)
    assert cluster.network.counters["transmissions"] - before == 3


def test_tcp_multicast_costs_n_transmissions():
    overrides = {"tcp": {"enable_bundling": False}}
    cluster = GcsCluster(4, stack_cfg=cfg("tcp", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    before = cluster.network.counters.get("transmissions", 0)
    cluster.nodes[0].multicast(b"m")
    cluster.run_until(2.0)
    assert cluster.network.counters["transmissions"] - before == 3
    for n in (1, 2, 3):
        assert cluster.delivery_log(n) == [(0, b"m")]


def test_udp_drops_frames_over_mtu():
    overrides = {"udp": {"enable_bundling": False}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    cluster.nodes[0].multicast(bytes(5000))  # over the 1492-byte default mtu
    cluster.run_until(2.0)
    assert cluster.delivery_log(1) == []
    assert cluster.nodes[0].metrics.counters["app.oversize_dropped"] == 1


def test_tcp_reconnects_after_link_down():
    profile = NetworkProfile()
    profile.disconnect_schedule.append(DisconnectInterval(0.0, 3.0, 0, 1))
    overrides = {"tcp": {"enable_bundling": False, "reconnect_timeout": 500}}
    cluster = GcsCluster(2, stack_cfg=cfg("tcp", **overrides),
                         profile=profile)
    cluster.start()
    cluster.run_until(1.0)
    cluster.nodes[0].unicast(1, b"queued while down")
    cluster.run_until(2.0)
    assert cluster.delivery_log(1) == []
    cluster.run_until(5.0)
    assert cluster.delivery_log(1) == [(0, b"queued while down")]
