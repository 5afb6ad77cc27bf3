import json
import os

import pytest

from gcsim.harness import (
    ConfigInvalidError,
    Distribution,
    Experiment,
    ExperimentSpec,
    run_experiment,
    spec_from_entries,
    sweep,
)
from gcsim.smr.cluster import ModelForbidsRecoveryError

BASE_SPEC = """
seed = 42
duration = 8.0
stall_grace = 4.0
smr.process.0 = node0:2000:3000
smr.process.1 = node1:2001:3001
smr.process.2 = node2:2002:3002
workload.arrival_rate = 20
workload.clients = 2
workload.size = constant:100
"""


def spec_with(extra: str = "") -> ExperimentSpec:
    return ExperimentSpec.from_text(BASE_SPEC + extra)


def test_zero_arrival_workload_empty_report():
    spec = spec_with("workload.arrival_rate = 0\n")
    report = run_experiment(spec)
    assert report.status == "COMPLETED"
    assert report.latency["count"] == 0
    assert report.throughput["rps"] == 0.0


def test_run_completes_and_accounts_every_request():
    spec = spec_with()
    report = run_experiment(spec)
    assert report.status == "COMPLETED"
    assert report.throughput["completed"] == report.throughput["submitted"]
    assert report.latency["count"] == report.throughput["completed"]
    assert report.latency["count"] > 0
    # latency accounting: bytes sum matches throughput * denominator
    total = sum(r["bytes"] for r in report.latencies)
    assert total == pytest.approx(report.throughput["bytes_per_s"] *
                                  report.elapsed)


def test_identical_spec_and_seed_identical_reports():
    a = run_experiment(spec_with())
    b = run_experiment(spec_with())
    assert a.to_json() == b.to_json()


def test_different_seed_changes_schedule():
    a = run_experiment(spec_with())
    b = run_experiment(ExperimentSpec.from_text(
        BASE_SPEC.replace("seed = 42", "seed = 43")))
    assert a.to_json() != b.to_json()


def test_majority_crash_stalls():
    spec = ExperimentSpec.from_text("""
seed = 1
duration = 20.0
stall_grace = 5.0
smr.process.0 = n:1:2
smr.process.1 = n:1:2
smr.process.2 = n:1:2
smr.process.3 = n:1:2
smr.process.4 = n:1:2
workload.arrival_rate = 20
workload.clients = 2
faults.schedule = 2.0:0:CRASH, 2.1:1:CRASH, 2.2:2:CRASH
""")
    report = run_experiment(spec)
    assert report.status == "STALLED"
    assert report.stalled_at is not None


def test_minority_crash_completes():
    spec = ExperimentSpec.from_text("""
seed = 1
duration = 20.0
stall_grace = 5.0
smr.process.0 = n:1:2
smr.process.1 = n:1:2
smr.process.2 = n:1:2
smr.process.3 = n:1:2
smr.process.4 = n:1:2
workload.arrival_rate = 20
workload.clients = 2
faults.schedule = 2.0:1:CRASH, 2.1:2:CRASH
""")
    report = run_experiment(spec)
    assert report.status == "COMPLETED"
    assert report.throughput["completed"] == report.throughput["submitted"]


def test_crash_then_recover_logged_with_recovery_time():
    spec = spec_with("faults.schedule = 1.0:1:CRASH, 3.0:1:RECOVER\n")
    report = run_experiment(spec)
    assert report.status == "COMPLETED"
    actions = [(e["action"], e["node"]) for e in report.fault_log]
    assert ("CRASH", 1) in actions and ("RECOVER", 1) in actions
    recover = [e for e in report.fault_log if e["action"] == "RECOVER"][0]
    assert recover["recovered_after"] == pytest.approx(2.0)


def test_recover_under_crash_stop_rejected():
    spec = spec_with("smr.CrashModel = CrashStop\n"
                     "faults.model = BENIGN_CRASH_STOP\n")
    exp = Experiment(spec)
    with pytest.raises(ModelForbidsRecoveryError):
        exp.inject_fault(1, "RECOVER", at=1.0)


def test_fault_schedule_recover_under_crash_stop_is_config_error():
    with pytest.raises(ConfigInvalidError):
        ExperimentSpec.from_text(
            BASE_SPEC + "faults.model = BENIGN_CRASH_STOP\n"
                        "faults.schedule = 1.0:1:CRASH, 2.0:1:RECOVER\n")


def test_unknown_key_is_config_invalid_with_path():
    with pytest.raises(ConfigInvalidError, match="bogus.key"):
        ExperimentSpec.from_text(BASE_SPEC + "bogus.key = 1\n")


def test_bad_distribution_is_config_invalid():
    with pytest.raises(ConfigInvalidError, match="workload.size"):
        ExperimentSpec.from_text(BASE_SPEC + "workload.size = wat:1\n")


def test_distribution_draws():
    import random
    rng = random.Random(1)
    assert Distribution.parse("constant:5").draw(rng) == 5.0
    u = Distribution.parse("uniform:1:2").draw(rng)
    assert 1.0 <= u <= 2.0
    e = Distribution.parse("empirical:10,20").draw(rng)
    assert e in (10.0, 20.0)


def test_report_files_and_figures_emitted(tmp_path):
    out = tmp_path / "out"
    spec = spec_with(f"report.dir = {out}\n")
    report = run_experiment(spec)
    assert (out / "report.json").exists()
    assert (out / "report.txt").exists()
    assert (out / "latencies.csv").exists()
    assert (out / "events.jsonl").exists()
    assert (out / "figures" / "latency_hist.png").exists()
    assert (out / "figures" / "throughput.png").exists()
    parsed = json.loads((out / "report.json").read_text())
    assert parsed["status"] == "COMPLETED"
    csv = (out / "latencies.csv").read_text().strip().splitlines()
    assert len(csv) == report.latency["count"] + 1


def test_mutation_mid_run_applies_and_audits():
    spec = spec_with()
    exp = Experiment(spec)
    exp.cluster.clock.schedule_at(
        2.0, lambda: exp.apply_mutation("smr.max_batch_delay", 50))
    report = exp.run()
    assert report.status == "COMPLETED"
    assert report.throughput["completed"] == report.throughput["submitted"]
    assert len(report.reconfig_log) == 1
    entry = report.reconfig_log[0]
    assert entry["outcome"] == "APPLIED"
    assert entry["applied_at"] >= 2.0


def test_sweep_produces_one_report_per_value():
    results = sweep(BASE_SPEC, "smr.batch_size", [1024, 65507])
    assert len(results) == 2
    for value, report in results:
        assert report.status == "COMPLETED"


def test_sweep_rejects_unknown_axis_and_empty_values():
    with pytest.raises(ConfigInvalidError):
        sweep(BASE_SPEC, "smr.not_a_param", [1])
    with pytest.raises(ConfigInvalidError):
        sweep(BASE_SPEC, "smr.batch_size", [])


def test_sweep_loss_rate_latency_monotone_with_slack():
    results = sweep(BASE_SPEC, "net.loss_rate", [0.0, 0.2])
    lat = [r.latency["p99"] for _, r in results]
    assert all(v is not None for v in lat)
    assert lat[1] >= lat[0]


def test_partition_spec_applies():
    spec = spec_with("net.partition.0 = 2.0:3.0:0,1,1000,1001/2\n")
    report = run_experiment(spec)
    assert report.status == "COMPLETED"


def test_trace_workload():
    spec = spec_with("workload.trace = 0.5:64:W, 1.0:64:W, 1.5:0:R\n"
                     "workload.arrival_rate = 0\n")
    report = run_experiment(spec)
    assert report.throughput["submitted"] == 3
    assert report.throughput["completed"] == 3


def test_queue_capacity_spec_key():
    spec = spec_with("net.queue_capacity = 8\n")
    assert spec.profile.queue_capacity == 8
    unbounded = spec_with("net.queue_capacity = 0\n")
    assert unbounded.profile.queue_capacity is None
