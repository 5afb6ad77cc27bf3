"""Experiment runner: builds a replicated cluster from a spec file,
drives an open-loop workload, injects faults, and measures latency and
throughput. A run is a pure function of its spec: same seed, same report.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .core import GcsimError
from .manifest import NET_DESCRIPTORS, build_full_registry
from .params import ControlMutation, MutationEngine
from .simnet import DisconnectInterval, NetworkProfile
from .smr.cluster import ModelForbidsRecoveryError, SimClient, SmrCluster
from .smr.config import CrashModel, ReplicaConfig, parse_replica_config
from .smr.replica import READ_ONLY, WRITE
from .stack import StackConfig


class ConfigInvalidError(GcsimError):
    """Raised with the offending key path."""


def parse_keyvalues(text: str) -> dict:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if "=" not in line:
            raise ConfigInvalidError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


@dataclass
class Distribution:
    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0
    values: list = field(default_factory=list)

    @staticmethod
    def parse(text: str, key: str = "") -> "Distribution":
        parts = text.split(":")
        kind = parts[0].strip().lower()
        try:
            if kind == "constant":
                return Distribution("constant", float(parts[1]))
            if kind == "uniform":
                return Distribution("uniform", float(parts[1]),
                                    float(parts[2]))
            if kind == "empirical":
                vals = [float(x) for x in parts[1].split(",") if x.strip()]
                if not vals:
                    raise ValueError("empty empirical list")
                return Distribution("empirical", values=vals)
        except (IndexError, ValueError) as exc:
            raise ConfigInvalidError(f"{key}: bad distribution "
                                     f"{text!r} ({exc})") from exc
        raise ConfigInvalidError(f"{key}: unknown distribution kind {kind!r}")

    def draw(self, rng: random.Random) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b)
        return rng.choice(self.values)


@dataclass
class WorkloadSpec:
    arrival_rate: float = 0.0          # requests / second, cluster-wide
    clients: int = 1
    size: Distribution = field(default_factory=lambda: Distribution(
        "constant", 100))
    read_ratio: float = 0.0
    complexity: Distribution = field(default_factory=Distribution)
    trace: list = field(default_factory=list)   # (time, size, kind)

    def validate(self):
        if self.arrival_rate < 0:
            raise ConfigInvalidError("workload.arrival_rate: must be >= 0")
        if not 0.0 <= self.read_ratio <= 1.0:
            raise ConfigInvalidError("workload.read_ratio: must be in [0,1]")
        if self.clients < 1:
            raise ConfigInvalidError("workload.clients: must be >= 1")


@dataclass
class FaultSpec:
    model: str = "BENIGN_CRASH_RECOVERY"
    frequency: float = 0.0             # faults per simulated hour
    recovery_time: Distribution = field(default_factory=lambda: Distribution(
        "constant", 1.0))
    targets: Optional[list] = None     # None = ANY
    schedule: list = field(default_factory=list)   # (time, node, action)

    def validate(self):
        if self.model not in ("BENIGN_CRASH_STOP", "BENIGN_CRASH_RECOVERY"):
            raise ConfigInvalidError(f"faults.model: unknown {self.model!r}")
        for t, node, action in self.schedule:
            if action == "RECOVER" and self.model == "BENIGN_CRASH_STOP":
                raise ConfigInvalidError(
                    "faults.schedule: RECOVER entries are invalid under "
                    "BENIGN_CRASH_STOP")


@dataclass
class ExperimentSpec:
    seed: int = 0
    duration: float = 10.0
    stall_grace: float = 10.0
    profile: NetworkProfile = field(default_factory=NetworkProfile)
    partitions: list = field(default_factory=list)  # (start, end, groups)
    replica_cfg: ReplicaConfig = field(default_factory=ReplicaConfig)
    stack_cfg: Optional[StackConfig] = None
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    faults: FaultSpec = field(default_factory=FaultSpec)
    report_dir: Optional[str] = None
    trace_file: Optional[str] = None
    param_overrides: dict = field(default_factory=dict)
    env_overrides: dict = field(default_factory=dict)
    api: dict = field(default_factory=dict)

    @staticmethod
    def from_text(text: str) -> "ExperimentSpec":
        return spec_from_entries(parse_keyvalues(text))

    @staticmethod
    def from_file(path: str) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as fh:
            return ExperimentSpec.from_text(fh.read())


_PROFILE_FLOATS = {"data_rate", "propagation_distance", "propagation_speed",
                   "processing_delay", "loss_rate", "corruption_rate",
                   "duplication_rate", "reorder_rate"}


def spec_from_entries(entries: dict) -> ExperimentSpec:
    spec = ExperimentSpec()
    smr_entries = {}
    layer_entries = {}
    for key, value in entries.items():
        try:
            low = key.lower()
            if low == "seed":
                spec.seed = int(value)
            elif low == "duration":
                spec.duration = float(value)
            elif low == "stall_grace":
                spec.stall_grace = float(value)
            elif low.startswith("net.partition"):
                spec.partitions.append(_parse_partition(value))
            elif low.startswith("net.disconnect"):
                spec.profile.disconnect_schedule.append(
                    _parse_disconnect(value))
            elif low.startswith("net."):
                fname = low.split(".", 1)[1]
                if fname == "mtu":
                    spec.profile.mtu = int(float(value))
                elif fname == "queue_capacity":
                    cap = int(float(value))
                    spec.profile.queue_capacity = cap if cap > 0 else None
                elif fname == "trace_file":
                    spec.trace_file = value
                elif fname in _PROFILE_FLOATS:
                    setattr(spec.profile, fname, float(value))
                else:
                    raise ConfigInvalidError(f"{key}: unknown network key")
            elif low.startswith("smr."):
                smr_entries[key.split(".", 1)[1]] = value
            elif low.startswith("layer."):
                layer_entries[key] = value
            elif low.startswith("workload."):
                _apply_workload(spec.workload, low.split(".", 1)[1], value)
            elif low.startswith("faults."):
                _apply_faults(spec.faults, low.split(".", 1)[1], value)
            elif low == "report.dir":
                spec.report_dir = value
            elif low.startswith("api."):
                spec.api[low.split(".", 1)[1]] = value
            elif low.startswith("env."):
                spec.env_overrides[low] = float(value)
            elif low.startswith("override."):
                spec.param_overrides[key.split(".", 1)[1]] = value
            else:
                raise ConfigInvalidError(f"{key}: unknown key")
        except ConfigInvalidError:
            raise
        except (ValueError, IndexError) as exc:
            raise ConfigInvalidError(f"{key}: {exc}") from exc
    if smr_entries:
        spec.replica_cfg = parse_replica_config(smr_entries)
    if layer_entries:
        spec.stack_cfg = StackConfig.from_keyvalues(layer_entries)
    spec.workload.validate()
    spec.faults.validate()
    try:
        spec.profile.validate()
    except ValueError as exc:
        raise ConfigInvalidError(f"net: {exc}") from exc
    return spec


def _parse_partition(value: str):
    # start:end:ids/ids (e.g. "2.0:4.0:0,1/2,3,4")
    start_s, end_s, groups_s = value.split(":", 2)
    groups = [{int(x) for x in g.split(",") if x.strip()}
              for g in groups_s.split("/")]
    return float(start_s), float(end_s), groups


def _parse_disconnect(value: str) -> DisconnectInterval:
    start_s, end_s, src_s, dst_s = value.split(":")
    src = None if src_s.strip() == "*" else int(src_s)
    dst = None if dst_s.strip() == "*" else int(dst_s)
    return DisconnectInterval(float(start_s), float(end_s), src, dst)


def _apply_workload(w: WorkloadSpec, key: str, value: str):
    if key == "arrival_rate":
        w.arrival_rate = float(value)
    elif key == "clients":
        w.clients = int(value)
    elif key == "size":
        w.size = Distribution.parse(value, "workload.size")
    elif key == "read_ratio":
        w.read_ratio = float(value)
    elif key == "complexity":
        w.complexity = Distribution.parse(value, "workload.complexity")
    elif key == "trace":
        for item in value.split(","):
            t, size, kind = item.strip().split(":")
            w.trace.append((float(t), int(size), kind))
    else:
        raise ConfigInvalidError(f"workload.{key}: unknown key")


def _apply_faults(f: FaultSpec, key: str, value: str):
    if key == "model":
        f.model = value.strip()
    elif key == "frequency":
        f.frequency = float(value)
    elif key == "recovery_time":
        f.recovery_time = Distribution.parse(value, "faults.recovery_time")
    elif key == "targets":
        f.targets = None if value.strip().upper() == "ANY" else \
            [int(x) for x in value.split(",") if x.strip()]
    elif key == "schedule":
        for item in value.split(","):
            t, node, action = item.strip().split(":")
            action = action.strip().upper()
            if action not in ("CRASH", "RECOVER"):
                raise ConfigInvalidError(
                    f"faults.schedule: unknown action {action!r}")
            f.schedule.append((float(t), int(node), action))
    else:
        raise ConfigInvalidError(f"faults.{key}: unknown key")


class Experiment:
    """One configured run: cluster, workload, faults and bookkeeping."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        if not spec.replica_cfg.processes:
            # a default three-replica group keeps tiny specs runnable
            spec.replica_cfg = parse_replica_config({
                f"process.{i}": f"node{i}:2000:3000" for i in range(3)},
            )
        self.cluster = SmrCluster(
            spec.replica_cfg, profile=spec.profile, seed=spec.seed,
            stack_overrides=None)
        if spec.stack_cfg is not None:
            for rid in self.cluster.replicas:
                self.cluster.replicas[rid].node.stack_cfg = spec.stack_cfg
        self.engine = MutationEngine(lambda: self.cluster.clock.now)
        self.clients = []
        self.fault_log = []
        self.events = []            # bus for the control API
        self.status = "COMPLETED"
        self.stalled_at: Optional[float] = None
        self._rng_workload = random.Random(f"{spec.seed}|workload")
        self._rng_faults = random.Random(f"{spec.seed}|faults")
        self._progress_mark = (0, 0.0)
        self._trace_fh = None
        if spec.trace_file:
            self._trace_fh = open(spec.trace_file, "w", encoding="utf-8")
            self.cluster.network.trace = self._write_trace
        self._applied_env()
        self._applied_overrides()
        for replica in self.cluster.replicas.values():
            replica.observer = self._on_replica_event

    def _write_trace(self, record: dict) -> None:
        import json as _json
        self._trace_fh.write(_json.dumps(record, sort_keys=True) + "\n")

    def _on_replica_event(self, event: dict) -> None:
        event["t"] = self.cluster.clock.now
        self.events.append(event)

    def _applied_env(self):
        for path, value in self.spec.env_overrides.items():
            for replica in self.cluster.replicas.values():
                replica.node.registry.put(path, value)

    def _applied_overrides(self):
        registry = build_full_registry()
        for path, value in self.spec.param_overrides.items():
            if not registry.has(path):
                raise ConfigInvalidError(f"override.{path}: unknown parameter")
            if path.startswith("net."):
                fname = path.split(".", 1)[1]
                typed = registry.descriptor(path).coerce(value)
                if fname == "queue_capacity":
                    self.spec.profile.queue_capacity = typed or None
                else:
                    setattr(self.spec.profile, fname, typed)
                continue
            for replica in self.cluster.replicas.values():
                if replica.node.registry.has(path):
                    replica.node.registry.put(path, value)

    # -- setup ----------------------------------------------------------------

    def setup(self) -> None:
        self.cluster.start()
        for start, end, groups in self.spec.partitions:
            self.cluster.network.partition(groups, start, end)
        self._schedule_workload()
        self._schedule_faults()

    def _schedule_workload(self) -> None:
        w = self.spec.workload
        clock = self.cluster.clock
        self.clients = [
            SimClient(self.cluster, client_id=c, node_id=1000 + c,
                      retry_timeout_ms=self.spec.replica_cfg
                      .client_retry_timeout)
            for c in range(w.clients)]
        arrivals = []
        if w.trace:
            arrivals = [(t, int(size), kind) for t, size, kind in w.trace]
        elif w.arrival_rate > 0:
            t = 0.0
            while True:
                t += self._rng_workload.expovariate(w.arrival_rate)
                if t >= self.spec.duration:
                    break
                size = int(w.size.draw(self._rng_workload))
                kind = READ_ONLY if self._rng_workload.random() < \
                    w.read_ratio else WRITE
                arrivals.append((t, size, kind))
        for i, (t, size, kind) in enumerate(arrivals):
            client = self.clients[i % len(self.clients)]
            complexity = w.complexity.draw(self._rng_workload)
            clock.schedule_at(t, client.submit, bytes(size), kind,
                              complexity)

    def _schedule_faults(self) -> None:
        f = self.spec.faults
        entries = list(f.schedule)
        if f.frequency > 0:
            rate = f.frequency / 3600.0
            targets = f.targets or self.spec.replica_cfg.members()
            t = 0.0
            while True:
                t += self._rng_faults.expovariate(rate)
                if t >= self.spec.duration:
                    break
                node = self._rng_faults.choice(sorted(targets))
                entries.append((t, node, "CRASH"))
                if f.model == "BENIGN_CRASH_RECOVERY":
                    dt = f.recovery_time.draw(self._rng_faults)
                    entries.append((t + dt, node, "RECOVER"))
        for t, node, action in sorted(entries):
            self.inject_fault(node, action, at=t)

    # -- operations -------------------------------------------------------------

    def inject_fault(self, node: int, action: str, at: float) -> None:
        if node not in self.cluster.replicas:
            raise ConfigInvalidError(f"faults: unknown node {node}")
        if action == "RECOVER" and (
                self.spec.faults.model == "BENIGN_CRASH_STOP" or
                self.spec.replica_cfg.crash_model == CrashModel.CRASH_STOP):
            raise ModelForbidsRecoveryError(
                "MODEL_FORBIDS_RECOVERY: recovery not allowed here")

        def apply():
            entry = {"t": self.cluster.clock.now, "kind": "FAULT",
                     "node": node, "action": action}
            if action == "CRASH":
                self.cluster.crash(node)
            else:
                if self.cluster.replicas[node].node.alive:
                    return
                crashed_at = self.cluster.replicas[node].node.crashed_at
                self.cluster.recover(node)
                entry["recovered_after"] = round(
                    self.cluster.clock.now - crashed_at
                    if crashed_at is not None else 0.0, 9)
            self.fault_log.append(entry)
            self.events.append(entry)
        self.cluster.clock.schedule_at(at, apply)

    def apply_mutation(self, path: str, value, node: Optional[int] = None):
        mutation = ControlMutation(path, value, node=node)
        if node is None:
            appliers = [r.node for r in self.cluster.alive()]
        else:
            appliers = [r.node for r in self.cluster.alive()
                        if r.id == node]
        self.engine.apply(mutation, appliers)
        self.events.append({"t": self.cluster.clock.now,
                            "kind": "RECONFIGURATION", "path": path,
                            "value": str(value), "node": node})
        return mutation

    def reconfigure_view(self, credential, action: str, node: int):
        leader = self.cluster.leader()
        if leader is None:
            raise GcsimError("NO_LEADER")
        out = leader.reconfigure_view(credential, action, node)
        self.events.append({"t": self.cluster.clock.now,
                            "kind": "VIEW_RECONFIG", "action": action,
                            "node": node})
        return out

    # -- progress / stall ----------------------------------------------------------

    def _total_executed(self) -> int:
        return sum(r.exec_point for r in self.cluster.replicas.values())

    def _outstanding(self) -> int:
        submitted = sum(c.submitted for c in self.clients)
        completed = sum(len(c.completed) for c in self.clients)
        return submitted - completed

    def _check_stall(self) -> None:
        if self.stalled_at is not None:
            return
        completed = sum(len(c.completed) for c in self.clients)
        progress = self._total_executed() + completed
        mark_progress, mark_t = self._progress_mark
        now = self.cluster.clock.now
        if progress > mark_progress:
            self._progress_mark = (progress, now)
            return
        if self._outstanding() > 0 and \
                now - mark_t >= self.spec.stall_grace:
            self.status = "STALLED"
            self.stalled_at = now
            self.events.append({"t": now, "kind": "STALLED"})

    # -- run -------------------------------------------------------------------------

    def run(self, between_events=None) -> "MetricsReport":
        from .report import build_report
        self.setup()
        clock = self.cluster.clock
        grace_step = max(self.spec.stall_grace / 4.0, 1e-3)
        t = 0.0
        while t < self.spec.duration:
            t = min(t + grace_step, self.spec.duration)
            clock.run_until(t, between_events=between_events)
            self._check_stall()
            if self.stalled_at is not None:
                break
        # arrivals stop at the configured duration; in-flight requests get
        # to finish (or the stall detector calls the run off)
        while self.stalled_at is None and self._outstanding() > 0:
            t += grace_step
            clock.run_until(t, between_events=between_events)
            self._check_stall()
        self.elapsed = clock.now
        report = build_report(self)
        if self.spec.report_dir:
            from .report import emit_report
            emit_report(report, self.spec.report_dir)
        if self._trace_fh is not None:
            self._trace_fh.close()
            self._trace_fh = None
        return report


def run_experiment(spec: ExperimentSpec):
    """Run one deterministic experiment and return its report."""
    return Experiment(spec).run()


def sweep(base_text: str, axis: str, values: list):
    """One run per axis value over a shared seed; returns (value, report)."""
    if not values:
        raise ConfigInvalidError("sweep: empty values list")
    registry = build_full_registry()
    if not registry.has(axis):
        raise ConfigInvalidError(f"sweep: unknown parameter {axis!r}")
    results = []
    for value in values:
        entries = parse_keyvalues(base_text)
        entries[f"override.{axis}"] = str(value)
        entries.pop("report.dir", None)
        spec = spec_from_entries(entries)
        results.append((value, run_experiment(spec)))
    return results
