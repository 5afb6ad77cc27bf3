import json

import pytest

from gcsim.simnet import NetworkProfile
from gcsim.smr import (
    CrashModel,
    HashChainService,
    ReconfigError,
    Request,
    UnsupportedCrashModelError,
    batcher_add,
    catch_up_decision,
    leader_monitor,
    parse_replica_config,
    snapshot_policy,
    window_admit,
)
from gcsim.smr.cluster import ModelForbidsRecoveryError, SimClient, SmrCluster
from gcsim.smr.replica import WRITE, batcher_flush


def req(size, client=1, seqno=1):
    return Request(client, seqno, WRITE, bytes(size))


# -- batcher ---------------------------------------------------------------------

def test_batcher_worked_example():
    pending = []
    sizes = [100, 300, 400]
    for i, s in enumerate(sizes):
        out = batcher_add(1000, pending, req(s, seqno=i + 1), now_ms=0.0,
                          max_batch_delay_ms=10)
        assert out is None
    batch = batcher_add(1000, pending, req(300, seqno=4), now_ms=1.0,
                        max_batch_delay_ms=10)
    assert batch is not None
    assert [r.size() for r in batch.requests] == [100, 300, 400]
    assert batch.total_bytes == 800
    assert [r.size() for _, r in pending] == [300]


def test_batcher_singleton_oversized():
    pending = []
    batch = batcher_add(1000, pending, req(2000), now_ms=0.0,
                        max_batch_delay_ms=10)
    assert batch is not None
    assert [r.size() for r in batch.requests] == [2000]
    assert pending == []


def test_batcher_flush_on_age():
    pending = []
    assert batcher_add(1000, pending, req(50), 0.0, 10.0) is None
    assert batcher_flush(pending, 9.9, 10.0) is None
    batch = batcher_flush(pending, 10.0, 10.0)
    assert batch is not None and batch.total_bytes == 50


# -- window ----------------------------------------------------------------------

def test_window_ten_all_proposable():
    assert window_admit({}, 10) == set(range(1, 11))


def test_window_blocked_by_undecided_first_instance():
    instances = {1: "PROPOSED", 2: "DECIDED"}
    assert window_admit(instances, 2) == set()


def test_window_slides_after_execution():
    instances = {1: "EXECUTED", 2: "DECIDED"}
    assert window_admit(instances, 2) == {3}


# -- snapshot policy ----------------------------------------------------------------

POLICY = dict(min_log_size=100 * 1024, ask_ratio=1.0, force_ratio=2.0,
              min_sampling=50)


def test_snapshot_below_min_log_size():
    assert snapshot_policy(50 * 1024, 100 * 1024, 100, **POLICY) == "NONE"


def test_snapshot_force_at_ratio():
    assert snapshot_policy(300 * 1024, 100 * 1024, 100, **POLICY) == "FORCE"


def test_snapshot_ask_between_ratios():
    assert snapshot_policy(150 * 1024, 100 * 1024, 100, **POLICY) == "ASK"


def test_snapshot_sampling_gate():
    assert snapshot_policy(300 * 1024, 100 * 1024, 10, **POLICY) == "NONE"


# -- catch-up --------------------------------------------------------------------------

def test_catch_up_small_gap_nack_range():
    assert catch_up_decision(5, 10000) == "NACK_RANGE"


def test_catch_up_large_gap_state_transfer():
    assert catch_up_decision(10001, 10000) == "STATE_TRANSFER"


def test_catch_up_revival_threshold():
    assert catch_up_decision(11, 10000, exec_point=0,
                             revival_high_mark=10) == "STATE_TRANSFER"
    assert catch_up_decision(11, 10000, exec_point=5,
                             revival_high_mark=10) == "NACK_RANGE"


def test_leader_monitor():
    assert leader_monitor(0.0, 999.0, 1000.0) == "NONE"
    assert leader_monitor(0.0, 1001.0, 1000.0) == "ADVANCE_BALLOT"


# -- config ----------------------------------------------------------------------------

def entries_for(n, **extra):
    entries = {f"process.{i}": f"node{i}:2000:3000" for i in range(n)}
    entries.update(extra)
    return entries


def test_parse_process_lines():
    cfg = parse_replica_config(entries_for(3, WindowSize="5",
                                           BatchSize="4096",
                                           CrashModel="CrashStop"))
    assert cfg.members() == [0, 1, 2]
    assert cfg.window_size == 5
    assert cfg.batch_size == 4096
    assert cfg.crash_model == CrashModel.CRASH_STOP


def test_unsupported_crash_models_fail_fast():
    with pytest.raises(UnsupportedCrashModelError):
        parse_replica_config(entries_for(3, CrashModel="ViewSS"))
    with pytest.raises(UnsupportedCrashModelError):
        parse_replica_config(entries_for(3, CrashModel="EpochSS"))


def test_bft_mode_rejected():
    with pytest.raises(Exception):
        parse_replica_config(entries_for(3, **{"system.bft": "true"}))


# -- end-to-end -----------------------------------------------------------------------

def make_cluster(n=3, seed=0, profile=None, tmp_path=None,
                 stack_overrides=None, **extra):
    cfg = parse_replica_config(entries_for(n, **extra))
    log_dir = str(tmp_path) if tmp_path else None
    cluster = SmrCluster(cfg, profile=profile, seed=seed, log_dir=log_dir,
                         stack_overrides=stack_overrides)
    cluster.start()
    return cluster


def drive(cluster, n_requests, n_clients=2, start=0.5, spacing=0.02):
    clients = [SimClient(cluster, client_id=c, node_id=1000 + c)
               for c in range(n_clients)]
    for i in range(n_requests):
        c = clients[i % n_clients]
        cluster.clock.schedule_at(
            start + i * spacing,
            lambda c=c, i=i: c.submit(b"req-%04d" % i))
    return clients


def total_completed(clients):
    return sum(len(c.completed) for c in clients)


def test_three_replicas_execute_identically():
    cluster = make_cluster(3)
    clients = drive(cluster, 20)
    cluster.run_until(15.0)
    assert total_completed(clients) == 20
    assert cluster.executed_sequences_consistent()
    points = {r.exec_point for r in cluster.replicas.values()}
    assert len(points) == 1
    states = {r.service.state for r in cluster.replicas.values()}
    assert len(states) == 1


def test_decided_out_of_order_executes_in_order():
    cluster = make_cluster(3)
    clients = drive(cluster, 10)
    cluster.run_until(15.0)
    for r in cluster.replicas.values():
        ids = [i for i, _ in r.executed_log if isinstance(i, int)]
        assert ids == sorted(ids)
        assert ids == list(range(1, len(ids) + 1))


def test_duplicate_request_executes_once():
    cluster = make_cluster(3)
    client = SimClient(cluster, client_id=9, node_id=1009,
                       retry_timeout_ms=400)
    # retry timeout far below batch+consensus turnaround forces resends
    cluster.clock.schedule_at(0.5, lambda: client.submit(b"only-once"))
    cluster.run_until(10.0)
    assert len(client.completed) == 1
    writes = {r.service.writes for r in cluster.replicas.values()}
    assert writes == {1}


def test_leader_crash_elects_new_leader_and_continues():
    cluster = make_cluster(3, seed=4)
    clients = drive(cluster, 40, spacing=0.05)
    cluster.clock.schedule_at(1.0, lambda: cluster.crash(0))
    cluster.run_until(30.0)
    assert total_completed(clients) == 40
    leader = cluster.leader()
    assert leader is not None and leader.id != 0
    assert cluster.executed_sequences_consistent()


def test_five_replicas_tolerate_two_crashes():
    cluster = make_cluster(5, seed=6)
    clients = drive(cluster, 40, spacing=0.05)
    cluster.clock.schedule_at(0.8, lambda: cluster.crash(1))
    cluster.clock.schedule_at(1.3, lambda: cluster.crash(0))
    cluster.run_until(40.0)
    assert total_completed(clients) == 40
    assert cluster.executed_sequences_consistent()


def test_crash_recovery_rejoins_with_same_prefix(tmp_path):
    cluster = make_cluster(3, seed=8, tmp_path=tmp_path)
    clients = drive(cluster, 30, spacing=0.05)
    cluster.clock.schedule_at(0.9, lambda: cluster.crash(1))
    cluster.clock.schedule_at(2.5, lambda: cluster.recover(1))
    cluster.run_until(30.0)
    assert total_completed(clients) == 30
    assert cluster.executed_sequences_consistent()
    r1 = cluster.replicas[1]
    assert r1.node.alive
    assert r1.exec_point == cluster.replicas[0].exec_point
    assert r1.service.state == cluster.replicas[0].service.state


def test_crash_stop_forbids_recovery():
    cluster = make_cluster(3, CrashModel="CrashStop")
    cluster.run_until(1.0)
    cluster.crash(2)
    with pytest.raises(ModelForbidsRecoveryError):
        cluster.recover(2)


def test_recovered_replica_never_contradicts_itself(tmp_path):
    cluster = make_cluster(3, seed=11, tmp_path=tmp_path)
    clients = drive(cluster, 20, spacing=0.05)
    cluster.clock.schedule_at(0.7, lambda: cluster.crash(0))  # the leader
    cluster.clock.schedule_at(3.0, lambda: cluster.recover(0))
    cluster.run_until(30.0)
    assert total_completed(clients) == 20
    assert cluster.agreement_violations() == []
    r0 = cluster.replicas[0]
    assert r0.exec_point == cluster.replicas[1].exec_point


def test_snapshots_taken_under_load():
    cluster = make_cluster(3, SnapshotMinLogSize="500",
                           MinSnapshotSampling="5")
    clients = drive(cluster, 60, spacing=0.01)
    cluster.run_until(20.0)
    assert total_completed(clients) == 60
    snaps = sum(r.node.metrics.counters.get("app.snapshots_force", 0) +
                r.node.metrics.counters.get("app.snapshots_ask", 0)
                for r in cluster.replicas.values())
    assert snaps > 0
    assert cluster.executed_sequences_consistent()


def test_lagging_replica_catches_up_via_state_transfer():
    # a replica cut off long enough falls beyond the high mark analog;
    # its own failure detector is slowed so it cannot rescue itself by
    # winning the next ballot's prepare round
    profile = NetworkProfile()
    cluster = make_cluster(3, seed=13, profile=profile,
                           stack_overrides={"tcp": {"send_queue_size": 4}},
                           **{"system.totalordermulticast.highMark": "5"})
    clients = drive(cluster, 50, spacing=0.02)
    cluster.replicas[2].node.registry.put("smr.fd_suspect_to", 60000)
    cluster.network.partition([{0, 1, 1000, 1001}, {2}], 0.4, 2.5)
    cluster.run_until(30.0)
    assert total_completed(clients) == 50
    r2 = cluster.replicas[2]
    assert r2.exec_point == cluster.replicas[0].exec_point
    assert r2.node.metrics.counters.get("app.state_transfers", 0) >= 1
    assert r2.service.state == cluster.replicas[0].service.state
    assert cluster.agreement_violations() == []


def test_reconfigure_requires_ttp_credential():
    cluster = make_cluster(3)
    cluster.run_until(1.0)
    leader = cluster.leader()
    with pytest.raises(ReconfigError, match="UNAUTHORIZED"):
        leader.reconfigure_view(1234, "REMOVE", 2)


def test_reconfigure_remove_and_add():
    cfg_entries = entries_for(4, **{"system.initial.view": "0,1,2"})
    cfg = parse_replica_config(cfg_entries)
    cluster = SmrCluster(cfg, seed=3)
    cluster.start()
    clients = drive(cluster, 10)
    cluster.run_until(3.0)
    leader = cluster.leader()
    out = leader.reconfigure_view(7002, "ADD", 3)
    assert out["status"] == "SCHEDULED"
    cluster.run_until(10.0)
    for rid in (0, 1, 2, 3):
        assert cluster.replicas[rid].membership == [0, 1, 2, 3]
    # the added replica caught up through a state transfer
    assert cluster.replicas[3].exec_point == leader.exec_point

    cluster.run_until(12.0)
    leader = cluster.leader()
    out = leader.reconfigure_view(7002, "REMOVE", 2)
    cluster.run_until(20.0)
    assert cluster.replicas[0].membership == [0, 1, 3]
    assert not cluster.replicas[2].active
    assert total_completed(clients) == 10
    assert cluster.agreement_violations() == []


def test_reconfigure_unknown_node():
    cluster = make_cluster(3)
    cluster.run_until(1.0)
    leader = cluster.leader()
    with pytest.raises(ReconfigError, match="UNKNOWN_NODE"):
        leader.reconfigure_view(7002, "REMOVE", 99)
    with pytest.raises(ReconfigError, match="UNKNOWN_NODE"):
        leader.reconfigure_view(7002, "ADD", 1)


def test_read_only_answered_without_ordering():
    cluster = make_cluster(3)
    client = SimClient(cluster, client_id=5, node_id=1005)
    cluster.clock.schedule_at(0.5, lambda: client.submit(b"w1"))
    cluster.clock.schedule_at(1.5, lambda: client.submit(b"", kind="R"))
    cluster.run_until(10.0)
    assert len(client.completed) == 2
    instances = max(r.exec_point for r in cluster.replicas.values())
    assert instances == 1  # the read went around consensus


def test_indirect_consensus_executes_identically():
    profile = NetworkProfile(loss_rate=0.1)
    cluster = make_cluster(3, seed=17, profile=profile,
                           IndirectConsensus="true")
    assert cluster.cfg.indirect_consensus
    clients = drive(cluster, 25, spacing=0.04)
    cluster.run_until(30.0)
    assert total_completed(clients) == 25
    assert cluster.executed_sequences_consistent()
    states = {r.service.state for r in cluster.replicas.values()}
    assert len(states) == 1


def test_generic_network_transport():
    cluster = make_cluster(3, seed=19, Network="Generic",
                           MaxUDPPacketSize="600")
    clients = drive(cluster, 15)
    cluster.run_until(15.0)
    assert total_completed(clients) == 15
    assert cluster.executed_sequences_consistent()
    for replica in cluster.replicas.values():
        assert replica.node.stack.has_layer("generic")


def test_udp_network_transport():
    cluster = make_cluster(3, seed=23, Network="UDP")
    clients = drive(cluster, 15)
    cluster.run_until(15.0)
    assert total_completed(clients) == 15
    for replica in cluster.replicas.values():
        assert replica.node.stack.has_layer("udp")


def test_leader_failover_within_suspicion_plus_prepare_bound():
    cluster = make_cluster(3, seed=29)
    cluster.run_until(1.0)
    crash_at = cluster.clock.now
    cluster.crash(0)
    fd_suspect = cluster.cfg.fd_suspect_to / 1000.0
    deadline = crash_at + fd_suspect + 1.5  # suspicion + prepare round
    t = crash_at
    elected_at = None
    while t < crash_at + 10.0:
        t += 0.1
        cluster.run_until(t)
        leader = cluster.leader()
        if leader is not None and leader.id != 0:
            elected_at = cluster.clock.now
            break
    assert elected_at is not None
    assert elected_at <= deadline


def test_net_trace_file_emitted(tmp_path):
    import json as _json
    from gcsim.harness import ExperimentSpec, run_experiment
    trace = tmp_path / "trace.jsonl"
    spec = ExperimentSpec.from_text(f"""
seed = 2
duration = 2.0
smr.process.0 = n:1:2
smr.process.1 = n:1:2
smr.process.2 = n:1:2
workload.arrival_rate = 10
net.trace_file = {trace}
""")
    run_experiment(spec)
    lines = trace.read_text().strip().splitlines()
    assert len(lines) > 10
    record = _json.loads(lines[0])
    assert {"t", "kind", "src", "dst", "bytes"} <= set(record)


def test_stable_log_persisted_under_replica_subdirectory(tmp_path):
    import os
    cluster = make_cluster(3, tmp_path=tmp_path,
                           **{"system.totalordermulticast.log_to_disk":
                              "true"})
    clients = drive(cluster, 10)
    cluster.run_until(10.0)
    assert total_completed(clients) == 10
    for rid in (0, 1, 2):
        log_file = tmp_path / str(rid) / "log.jsonl"
        assert log_file.exists()
        assert len(log_file.read_text().strip().splitlines()) > 0


def test_reconfigure_remove_current_leader():
    cluster = make_cluster(3)
    clients = drive(cluster, 10)
    cluster.run_until(3.0)
    leader = cluster.leader()
    assert leader is not None
    leader.reconfigure_view(7002, "REMOVE", leader.id)
    cluster.run_until(25.0)
    new_leader = cluster.leader()
    assert new_leader is not None
    assert new_leader.id != leader.id
    assert not leader.active
    assert total_completed(clients) == 10
    members = {tuple(r.membership) for r in cluster.replicas.values()}
    assert len(members) == 1
    assert leader.id not in next(iter(members))


def test_repeated_crash_recover_cycles(tmp_path):
    cluster = make_cluster(3, seed=31, tmp_path=tmp_path)
    clients = drive(cluster, 40, spacing=0.1)
    for cycle in range(3):
        base = 0.8 + cycle * 1.5
        cluster.clock.schedule_at(base, lambda: cluster.crash(1))
        cluster.clock.schedule_at(base + 0.7, lambda: cluster.recover(1))
    cluster.run_until(40.0)
    assert total_completed(clients) == 40
    assert cluster.executed_sequences_consistent()
    r1 = cluster.replicas[1]
    assert r1.node.alive
    assert r1.exec_point == cluster.replicas[0].exec_point
    assert r1.node.metrics.counters.get("app.recoveries", 0) >= 1
