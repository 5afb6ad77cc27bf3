import random

import pytest

from gcsim.cluster import GcsCluster
from gcsim.core import Message
from gcsim.layers.reliable import (
    FlowControlState,
    NakackState,
    StabilityState,
    fc_acquire,
    nakack_on_nack,
    nakack_on_receive,
    stability_round,
    StaleViewError,
)
from gcsim.simnet import NetworkProfile
from gcsim.stack import LayerSpec, StackConfig


def cfg(*names, **overrides):
    return StackConfig([LayerSpec(n, dict(overrides.get(n, {})))
                        for n in names])


def dmsg(i):
    return Message(5, None, bytes([i % 251]))


# -- NAKACK state machine ------------------------------------------------------

def test_nakack_worked_example():
    st = NakackState()
    # process already delivered seqno 1 from sender q
    nakack_on_receive(st, "q", 1, dmsg(1))
    deliveries, missing, dup = nakack_on_receive(st, "q", 4, dmsg(4))
    assert deliveries == [] and not dup
    assert missing == [2, 3]
    deliveries, missing, dup = nakack_on_receive(st, "q", 3, dmsg(3))
    assert deliveries == [] and missing == [2]
    deliveries, missing, dup = nakack_on_receive(st, "q", 2, dmsg(2))
    assert [s for s, _ in deliveries] == [2, 3, 4]
    assert missing is None


def test_nakack_duplicate_is_idempotent():
    st = NakackState()
    nakack_on_receive(st, "q", 1, dmsg(1))
    deliveries, missing, dup = nakack_on_receive(st, "q", 1, dmsg(1))
    assert dup and deliveries == []


def test_nakack_max_xmit_req_size_caps_nack():
    st = NakackState()
    deliveries, missing, dup = nakack_on_receive(st, "q", 9, dmsg(9),
                                                 max_xmit_req_size=3)
    assert missing == [1, 2, 3]


def test_nakack_on_nack_retransmits_available():
    st = NakackState()
    for s in range(1, 6):
        st.retransmit_buffer[s] = dmsg(s)
    retransmissions, purged = nakack_on_nack(st, {2})
    assert [s for s, _ in retransmissions] == [2]
    assert purged == []


def test_nakack_on_nack_reports_purged():
    st = NakackState()
    st.own_purge_point = 3
    for s in range(4, 6):
        st.retransmit_buffer[s] = dmsg(s)
    retransmissions, purged = nakack_on_nack(st, {2})
    assert retransmissions == [] and purged == [2]


# -- stability ---------------------------------------------------------------------

def test_stability_round_takes_minimum():
    st = StabilityState()
    digests = {0: {"0": 5}, 1: {"0": 7}, 2: {"0": 6}}
    purge = stability_round(st, digests, [0, 1, 2])
    assert purge == {"0": 5}


def test_stability_round_stale_view():
    st = StabilityState()
    with pytest.raises(StaleViewError):
        stability_round(st, {0: {"0": 5}}, [0, 1])


# -- flow control --------------------------------------------------------------------

def test_fc_grant_decrements():
    st = FlowControlState(1000)
    assert fc_acquire(st, 1, 400, 0.0, 5000) == ("GRANTED",)
    assert st.credits[1] == 600


def test_fc_blocks_until_replenished():
    st = FlowControlState(100)
    outcome = fc_acquire(st, 1, 400, 10.0, 5000)
    assert outcome == ("BLOCKED_UNTIL", 5010.0)
    st.credits[1] += 1000
    assert fc_acquire(st, 1, 400, 20.0, 5000) == ("GRANTED",)


def test_fc_timeout_sends_anyway_in_cluster():
    overrides = {"fc": {"initial_credits": 100, "max_block_time": 5000},
                 "udp": {"enable_bundling": False}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "fc", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    cluster.nodes[0].multicast(bytes(400))
    cluster.run_until(2.0)
    assert cluster.delivery_log(1) == []           # blocked on credits
    cluster.run_until(7.0)                         # 5 s block expires
    assert cluster.delivery_log(1) == [(0, bytes(400))]
    assert cluster.nodes[0].metrics.counters["app.fc_timeout"] == 1


def test_fc_replenish_unblocks():
    overrides = {"fc": {"initial_credits": 1000, "max_block_time": 60000},
                 "udp": {"enable_bundling": False}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "fc", **overrides))
    cluster.start()
    cluster.run_until(1.0)
    # two 400-byte sends fit, the third blocks until receiver replenishes
    for _ in range(3):
        cluster.nodes[0].multicast(bytes(400))
    cluster.run_until(10.0)
    assert len(cluster.delivery_log(1)) == 3


# -- end-to-end reliability ------------------------------------------------------------

def lossy_cluster(n, loss, seed, extra=None, duplication=0.0, reorder=0.0):
    # nakack is always deployed with stability: its recurring digest
    # gossip is what reveals gaps at the very tail of a burst
    profile = NetworkProfile(loss_rate=loss, duplication_rate=duplication,
                             reorder_rate=reorder)
    overrides = {"udp": {"enable_bundling": False},
                 "nakack": {"xmit_interval": 50},
                 "stable": {"desired_avg_gossip": 400}}
    overrides.update(extra or {})
    cluster = GcsCluster(n, stack_cfg=cfg("udp", "nakack", "stable",
                                          **overrides),
                         profile=profile, seed=seed)
    cluster.start()
    return cluster


def test_gap_free_delivery_under_loss():
    cluster = lossy_cluster(3, loss=0.2, seed=31)
    cluster.run_until(0.5)
    payloads = [bytes([i]) for i in range(40)]
    for i, p in enumerate(payloads):
        cluster.clock.schedule_at(0.5 + i * 0.01,
                                  lambda p=p: cluster.nodes[0].multicast(p))
    cluster.run_until(30.0)
    for node in (0, 1, 2):
        got = [p for src, p in cluster.delivery_log(node) if src == 0]
        assert got == payloads


def test_duplicates_are_discarded_by_nakack():
    cluster = lossy_cluster(2, loss=0.0, seed=3, duplication=1.0)
    cluster.run_until(0.5)
    cluster.nodes[0].multicast(b"once")
    cluster.run_until(2.0)
    got = [p for _, p in cluster.delivery_log(1)]
    assert got == [b"once"]
    assert cluster.nodes[1].metrics.counters["app.duplicates_discarded"] >= 1


def test_single_nack_round_trips_batch_of_missing():
    # drop a burst, then let one retransmit request repair all of it
    cluster = lossy_cluster(2, loss=0.0, seed=7)
    cluster.run_until(0.5)
    cluster.nodes[0].multicast(bytes([1]))
    cluster.run_until(1.0)
    cluster.profile.loss_rate = 1.0
    for i in (2, 3, 4):
        cluster.nodes[0].multicast(bytes([i]))
    cluster.run_until(1.5)
    cluster.profile.loss_rate = 0.0
    cluster.nodes[0].multicast(bytes([5]))
    cluster.run_until(10.0)
    got = [p for _, p in cluster.delivery_log(1)]
    assert got == [bytes([i]) for i in (1, 2, 3, 4, 5)]


def test_stability_purges_to_min_delivered_under_loss():
    profile = NetworkProfile(loss_rate=0.1)
    overrides = {"udp": {"enable_bundling": False},
                 "nakack": {"xmit_interval": 50},
                 "stable": {"desired_avg_gossip": 300}}
    cluster = GcsCluster(3, stack_cfg=cfg("udp", "nakack", "stable",
                                          **overrides),
                         profile=profile, seed=13)
    cluster.start()
    cluster.run_until(0.5)
    for i in range(30):
        cluster.clock.schedule_at(0.5 + i * 0.02,
                                  lambda i=i: cluster.nodes[0].multicast(
                                      bytes([i])))
    cluster.run_until(30.0)
    for node in cluster.nodes.values():
        nak = node.stack.layer("nakack")
        w = nak.state.window(0)
        assert w.highest_delivered == 30
    sender_nak = cluster.nodes[0].stack.layer("nakack")
    # every message delivered everywhere: the sender's buffer is purged
    assert sender_nak.state.own_purge_point == 30
    assert sender_nak.state.retransmit_buffer == {}


def test_stability_never_purges_undelivered():
    # one receiver partitioned: no stability round can complete, nothing purged
    profile = NetworkProfile()
    overrides = {"udp": {"enable_bundling": False},
                 "stable": {"desired_avg_gossip": 200}}
    cluster = GcsCluster(3, stack_cfg=cfg("udp", "nakack", "stable",
                                          **overrides),
                         profile=profile, seed=17)
    cluster.network.partition([{0, 1}, {2}], 0.0, 100.0)
    cluster.start()
    cluster.run_until(0.5)
    for i in range(5):
        cluster.nodes[0].multicast(bytes([i]))
    cluster.run_until(20.0)
    sender_nak = cluster.nodes[0].stack.layer("nakack")
    assert sender_nak.state.own_purge_point == 0
    assert len(sender_nak.state.retransmit_buffer) == 5


# -- unicast ------------------------------------------------------------------------------

def test_unicast_exactly_once_under_loss():
    profile = NetworkProfile(loss_rate=0.25)
    overrides = {"udp": {"enable_bundling": False},
                 "unicast": {"xmit_interval": 50}}
    cluster = GcsCluster(2, stack_cfg=cfg("udp", "unicast", **overrides),
                         profile=profile, seed=23)
    cluster.start()
    cluster.run_until(0.5)
    payloads = [bytes([i]) for i in range(30)]
    for i, p in enumerate(payloads):
        cluster.clock.schedule_at(0.5 + i * 0.01,
                                  lambda p=p: cluster.nodes[0].unicast(1, p))
    cluster.run_until(30.0)
    assert [p for _, p in cluster.delivery_log(1)] == payloads
