import pytest

from gcsim.cluster import GcsCluster, default_gcs_config
from gcsim.core import EventKind, View, ViewId
from gcsim.layers.group import (
    FdRingState,
    Merge3State,
    fd_ring_tick,
    merge_detect,
    next_in_ring,
)
from gcsim.simnet import NetworkProfile
from gcsim.stack import LayerSpec, StackConfig


def full_cfg(**overrides):
    base = {
        "udp": {"enable_bundling": False},
        "discovery": {"timeout": 300},
        "merge3": {"min_interval": 400, "max_interval": 1200,
                   "check_interval": 400},
        "fd_all": {"interval": 300, "timeout": 1200,
                   "timeout_check_interval": 300},
        "verify_suspect": {"timeout": 600},
        "nakack": {"xmit_interval": 50},
        "stable": {"desired_avg_gossip": 500},
        "gms": {"join_timeout": 500, "view_ack_collection_timeout": 400},
    }
    for layer, params in overrides.items():
        base.setdefault(layer, {}).update(params)
    names = ("udp", "discovery", "merge3", "fd_all", "verify_suspect",
             "nakack", "unicast", "stable", "gms", "frag", "sequencer")
    return StackConfig([LayerSpec(n, dict(base.get(n, {}))) for n in names])


def formed_cluster(n, seed=0, profile=None, **overrides):
    cluster = GcsCluster(n, stack_cfg=full_cfg(**overrides),
                         profile=profile, seed=seed)
    cluster.start()
    deadline = 2.0 + n * 1.5
    cluster.run_until(deadline)
    view = cluster.converged_view()
    assert view is not None and len(view.members) == n, \
        f"cluster failed to form: {view}"
    return cluster


# -- fd ring pure function ------------------------------------------------------

def test_fd_ring_suspects_after_tries_exhausted():
    st = FdRingState(ring=[0, 1, 2], monitored=1, timeout_ms=1000,
                     max_tries=2, tries_left=2, last_heard_ms=0.0)
    actions = []
    for t in (1000, 2000, 3000, 4000):
        actions.append(fd_ring_tick(st, t)[0])
    assert actions == ["SEND_ARE_YOU_ALIVE", "SEND_ARE_YOU_ALIVE",
                       "SUSPECT", "SUSPECT"]


def test_fd_ring_quiet_when_heartbeats_flow():
    st = FdRingState(ring=[0, 1], monitored=1, timeout_ms=1000,
                     max_tries=2, tries_left=2, last_heard_ms=0.0)
    for t in range(500, 10_000, 500):
        st.last_heard_ms = t - 400  # refreshed 400 ms ago
        assert fd_ring_tick(st, t) == ("NONE",)
        assert st.tries_left == 2


def test_next_in_ring_skips_suspected():
    assert next_in_ring([0, 1, 2], 0, set()) == 1
    assert next_in_ring([0, 1, 2], 0, {1}) == 2
    assert next_in_ring([0, 1, 2], 2, set()) == 0
    assert next_in_ring([0], 0, set()) is None


# -- merge detection pure function -------------------------------------------------

def test_merge_detect_two_views():
    st = Merge3State()
    st.cache = {
        0: {"counter": 3, "coord": 0, "members": [0, 1], "at": 100.0},
        2: {"counter": 4, "coord": 2, "members": [2, 3], "at": 100.0},
    }
    subviews = merge_detect(st, now_ms=200.0, expiry_ms=10_000)
    assert subviews is not None
    assert [s["coord"] for s in subviews] == [0, 2]


def test_merge_detect_single_view_is_none():
    st = Merge3State()
    st.cache = {
        0: {"counter": 3, "coord": 0, "members": [0, 1], "at": 100.0},
        1: {"counter": 3, "coord": 0, "members": [0, 1], "at": 100.0},
    }
    assert merge_detect(st, 200.0, 10_000) is None


def test_merge_detect_expires_stale_infos():
    st = Merge3State()
    st.cache = {
        0: {"counter": 3, "coord": 0, "members": [0, 1], "at": 0.0},
        2: {"counter": 4, "coord": 2, "members": [2], "at": 99_000.0},
    }
    assert merge_detect(st, now_ms=100_000.0, expiry_ms=5000) is None


# -- cluster formation and join ------------------------------------------------------

def test_three_nodes_form_one_view():
    cluster = formed_cluster(3)
    view = cluster.converged_view()
    assert view.coordinator == 0
    assert sorted(view.members) == [0, 1, 2]


def test_view_counters_strictly_increase():
    cluster = formed_cluster(3)
    for node in cluster.nodes.values():
        counters = [v.id.counter for _, v in node.views]
        assert counters == sorted(counters)
        assert len(set(counters)) == len(counters)


def test_join_timeout_singleton_when_nobody_answers():
    # a single node with peers configured but absent gives up and goes solo
    cluster = GcsCluster(3, stack_cfg=full_cfg(
        gms={"max_join_attempts": 2, "join_timeout": 300}))
    node1 = cluster.nodes[1]
    cluster.clock.schedule(0.0, node1.start)  # only node 1 starts
    cluster.clock.run_until(5.0)
    view = node1.current_view()
    assert view is not None
    assert view.members == (1,)


def test_crashed_member_is_excluded():
    cluster = formed_cluster(3)
    cluster.crash(2)
    cluster.run_until(cluster.clock.now + 8.0)
    view = cluster.converged_view()
    assert view is not None
    assert sorted(view.members) == [0, 1]


def test_crashed_coordinator_replaced_by_next_member():
    cluster = formed_cluster(3)
    cluster.crash(0)
    cluster.run_until(cluster.clock.now + 8.0)
    view = cluster.converged_view()
    assert view is not None
    assert view.coordinator == 1
    assert 0 not in view.members


def test_excluded_event_when_view_omits_self():
    cluster = formed_cluster(2)
    node1 = cluster.nodes[1]
    gms = node1.stack.layer("gms")
    view = View(ViewId(99, 0), (0,))
    gms._install(view)
    kinds = [evt.kind for _, evt in node1.events]
    assert EventKind.EXCLUDED in kinds
    assert node1.current_view().id.counter != 99


# -- partition and merge ---------------------------------------------------------------

def test_partition_then_merge_reunites_cluster():
    cluster = formed_cluster(4)
    t0 = cluster.clock.now
    cluster.network.partition([{0, 1}, {2, 3}], t0, t0 + 8.0)
    cluster.run_until(t0 + 8.0)
    # both sides installed subviews
    sides = {tuple(sorted(cluster.nodes[i].current_view().members))
             for i in range(4)}
    assert (0, 1) in sides and (2, 3) in sides
    cluster.run_until(t0 + 25.0)
    view = cluster.converged_view()
    assert view is not None
    assert sorted(view.members) == [0, 1, 2, 3]
    assert view.coordinator == 0  # smallest id among subview coordinators


# -- verify_suspect ----------------------------------------------------------------------

def test_verification_refutes_live_node():
    # drop fd_all timeout low enough that a live node gets suspected under
    # loss; verification then refutes it
    profile = NetworkProfile(loss_rate=0.35)
    cluster = formed_cluster(3, seed=5, profile=profile,
                             fd_all={"interval": 400, "timeout": 900,
                                     "timeout_check_interval": 200},
                             verify_suspect={"num_msgs": 3, "timeout": 900})
    cluster.run_until(cluster.clock.now + 30.0)
    refuted = sum(n.metrics.counters.get("app.suspicions_refuted", 0)
                  for n in cluster.nodes.values())
    assert refuted > 0
    # nobody was excluded: all nodes still share a 3-member view
    view = cluster.converged_view()
    assert view is not None and len(view.members) == 3


def test_verification_reduces_false_exclusions():
    def surfaced_suspects(with_verify: bool) -> int:
        names = ["udp", "discovery", "merge3", "fd_all"]
        if with_verify:
            names.append("verify_suspect")
        names += ["nakack", "unicast", "stable", "gms", "frag", "sequencer"]
        base = full_cfg(fd_all={"interval": 400, "timeout": 900,
                                "timeout_check_interval": 200},
                        verify_suspect={"num_msgs": 3, "timeout": 900})
        by_name = {spec.layer_name: spec for spec in base.layers}
        cfg = StackConfig([by_name[n] for n in names])
        profile = NetworkProfile(loss_rate=0.35)
        cluster = GcsCluster(3, stack_cfg=cfg, profile=profile, seed=5)
        cluster.start()
        cluster.run_until(30.0)
        return sum(1 for n in cluster.nodes.values()
                   for _, evt in n.events if evt.kind == EventKind.SUSPECT)

    without = surfaced_suspects(False)
    with_verify = surfaced_suspects(True)
    assert without > 0
    assert with_verify < without


def test_crashed_node_confirmed_by_verification():
    cluster = formed_cluster(3)
    t0 = cluster.clock.now
    cluster.crash(2)
    cluster.run_until(t0 + 8.0)
    confirmed = sum(n.metrics.counters.get("app.suspicions_confirmed", 0)
                    for n in cluster.alive_nodes())
    assert confirmed >= 1


# -- sequencer total order ------------------------------------------------------------------

def identical_logs(cluster, nodes):
    logs = [cluster.delivery_log(n) for n in nodes]
    return all(log == logs[0] for log in logs)


def test_concurrent_broadcasts_share_one_order():
    cluster = formed_cluster(3)
    t0 = cluster.clock.now
    for i in range(10):
        cluster.clock.schedule_at(
            t0 + 0.001 * i,
            lambda i=i: cluster.nodes[1].multicast(b"a%d" % i))
        cluster.clock.schedule_at(
            t0 + 0.001 * i,
            lambda i=i: cluster.nodes[2].multicast(b"b%d" % i))
    cluster.run_until(t0 + 10.0)
    logs = [cluster.delivery_log(n) for n in (0, 1, 2)]
    assert len(logs[0]) == 20
    assert logs[0] == logs[1] == logs[2]


def test_total_order_under_loss():
    profile = NetworkProfile(loss_rate=0.1)
    cluster = formed_cluster(3, seed=9, profile=profile)
    t0 = cluster.clock.now
    for i in range(100):
        sender = (i % 2) + 1
        cluster.clock.schedule_at(
            t0 + 0.02 * i,
            lambda s=sender, i=i: cluster.nodes[s].multicast(b"m%03d" % i))
    cluster.run_until(t0 + 60.0)
    logs = [cluster.delivery_log(n) for n in (0, 1, 2)]
    assert len(logs[0]) == 100
    assert logs[0] == logs[1] == logs[2]


def test_coordinator_crash_preserves_order_and_delivery():
    cluster = formed_cluster(3, seed=21)
    t0 = cluster.clock.now
    for i in range(30):
        sender = (i % 2) + 1
        cluster.clock.schedule_at(
            t0 + 0.05 * i,
            lambda s=sender, i=i: cluster.nodes[s].multicast(b"x%03d" % i))
    cluster.clock.schedule_at(t0 + 0.7, lambda: cluster.crash(0))
    cluster.run_until(t0 + 30.0)
    log1 = cluster.delivery_log(1)
    log2 = cluster.delivery_log(2)
    assert log1 == log2
    sent = {b"x%03d" % i for i in range(30)}
    delivered = [p for _, p in log1]
    assert len(delivered) == len(set(delivered))  # no duplicates
    assert sent <= set(delivered)                 # nothing from 1/2 lost


def test_fd_ring_data_counts_as_heartbeat_end_to_end():
    # only data flows; with the flag set the monitored node is never probed
    cfg_list = [LayerSpec("udp", {"enable_bundling": False}),
                LayerSpec("fd", {"timeout": 500, "max_tries": 2,
                                 "msg_counts_as_heartbeat": True})]
    cluster = GcsCluster(2, stack_cfg=StackConfig(cfg_list))
    cluster.start()
    cluster.run_until(0.2)
    for i in range(40):
        cluster.clock.schedule_at(0.2 + i * 0.2,
                                  lambda: cluster.nodes[1].multicast(b"d"))
    cluster.run_until(8.0)
    assert cluster.nodes[0].metrics.counters.get("app.suspicions", 0) == 0
    # a crashed neighbor stops answering probes and gets suspected
    dead = GcsCluster(2, stack_cfg=StackConfig(cfg_list))
    dead.start()
    dead.run_until(0.5)
    dead.crash(1)
    dead.run_until(8.0)
    assert dead.nodes[0].metrics.counters.get("app.suspicions", 0) >= 1


def test_minimal_membership_stack_without_discovery():
    # transport, reliable multicast, stability, membership, total order:
    # the classic five-layer composition must validate and form a view
    overrides = {"udp": {"enable_bundling": False},
                 "nakack": {"xmit_interval": 50},
                 "stable": {"desired_avg_gossip": 500},
                 "gms": {"join_timeout": 500,
                         "view_ack_collection_timeout": 400}}
    cluster = GcsCluster(3, stack_cfg=StackConfig(
        [LayerSpec(n, dict(overrides.get(n, {})))
         for n in ("udp", "nakack", "stable", "gms", "sequencer")]))
    cluster.start()
    cluster.run_until(6.0)
    view = cluster.converged_view()
    assert view is not None and sorted(view.members) == [0, 1, 2]
    cluster.nodes[1].multicast(b"ordered")
    cluster.run_until(8.0)
    for n in (0, 1, 2):
        assert cluster.delivery_log(n) == [(1, b"ordered")]


def test_graceful_leave_shrinks_view_without_suspicion():
    cluster = formed_cluster(3)
    gms2 = cluster.nodes[2].stack.layer("gms")
    gms2.leave()
    cluster.run_until(cluster.clock.now + 5.0)
    for n in (0, 1):
        view = cluster.nodes[n].current_view()
        assert sorted(view.members) == [0, 1]
    suspicions = sum(cluster.nodes[n].metrics.counters.get(
        "app.suspicions_confirmed", 0) for n in (0, 1))
    assert suspicions == 0
