"""Parameter registry: monitoring metrics and typed control parameters.

Control parameters carry a category from the internal/external taxonomy
and a mutability policy. Runtime-safe mutations are applied at a safe
point of the owning node's event loop; restart-only parameters are always
rejected at runtime. Every mutation is recorded in an audit log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .core import GcsimError

_INTERNAL = [
    "WORKER", "BATCHING_BUNDLING", "COMPRESSION", "INTERVALS", "TIMEOUTS",
    "REPETITIONS", "CACHES", "ENVIRONMENT_EXPLOITATION", "MEMBERS_REPLICAS",
    "SECURITY", "SUBSTITUTABLE_COMPONENTS",
]
_EXTERNAL = [
    "CPU_FREQUENCY", "CPU_CORES", "RAM_SIZE", "STORAGE_SIZE",
    "STORAGE_PERFORMANCE",
]

ControlCategory = Enum("ControlCategory", _INTERNAL + _EXTERNAL)


def is_external(category: ControlCategory) -> bool:
    return category.name in _EXTERNAL


class MetricCategory(Enum):
    HOST = "host"
    NETWORK = "network"
    APPLICATION = "application"
    OPTIMIZATION = "optimization"


class Mutability(Enum):
    RUNTIME_SAFE_POINT = "RUNTIME_SAFE_POINT"
    RESTART_ONLY = "RESTART_ONLY"


class ValueType(Enum):
    INTEGER = "integer"
    FLOAT = "float"
    BOOLEAN = "boolean"
    ENUM = "enum"
    DURATION = "duration"   # numeric, unit says ms or s
    BYTES = "bytes"


class UnknownParameterError(GcsimError):
    pass


class TypeMismatchError(GcsimError):
    pass


class OutOfRangeError(GcsimError):
    pass


_NUMERIC = {ValueType.INTEGER, ValueType.FLOAT, ValueType.DURATION,
            ValueType.BYTES}


@dataclass
class ParameterDescriptor:
    path: str
    value_type: ValueType
    default: Any
    category: ControlCategory
    mutability: Mutability = Mutability.RUNTIME_SAFE_POINT
    unit: str = ""
    lo: Optional[float] = None
    hi: Optional[float] = None
    choices: Optional[tuple] = None
    origin: str = "invented"
    supported: bool = True
    assigned: bool = False          # category placement is our judgment
    alt: Any = None                 # known-safe alternate value for tests

    def coerce(self, value: Any) -> Any:
        """Validate and convert a candidate value; raises on mismatch."""
        vt = self.value_type
        if vt == ValueType.BOOLEAN:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise TypeMismatchError(f"{self.path}: expected boolean, got {value!r}")
        if vt == ValueType.ENUM:
            if self.choices and value in self.choices:
                return value
            raise TypeMismatchError(
                f"{self.path}: expected one of {self.choices}, got {value!r}")
        if vt in _NUMERIC:
            if isinstance(value, bool):
                raise TypeMismatchError(f"{self.path}: expected number, got bool")
            if isinstance(value, str):
                try:
                    value = float(value) if vt == ValueType.FLOAT else int(float(value))
                except ValueError:
                    raise TypeMismatchError(
                        f"{self.path}: expected number, got {value!r}") from None
            if not isinstance(value, (int, float)):
                raise TypeMismatchError(
                    f"{self.path}: expected number, got {value!r}")
            if vt != ValueType.FLOAT:
                if isinstance(value, float) and not value.is_integer():
                    raise TypeMismatchError(
                        f"{self.path}: expected integer, got {value!r}")
                value = int(value)
            if self.lo is not None and value < self.lo:
                raise OutOfRangeError(f"{self.path}: {value} < {self.lo}")
            if self.hi is not None and value > self.hi:
                raise OutOfRangeError(f"{self.path}: {value} > {self.hi}")
            return value
        raise TypeMismatchError(f"{self.path}: unhandled type {vt}")

    def sample_mutation(self) -> Any:
        """A valid value different from the default, safe to apply mid-run."""
        if self.alt is not None:
            return self.alt
        if self.value_type == ValueType.BOOLEAN:
            return not self.default
        if self.value_type == ValueType.ENUM:
            for c in self.choices or ():
                if c != self.default:
                    return c
            return self.default
        doubled = self.default * 2 if self.default else 1
        if self.hi is not None and doubled > self.hi:
            doubled = self.hi
        if doubled == self.default:
            doubled = max(self.lo or 0, self.default - 1)
        return self.coerce(doubled)


@dataclass(frozen=True)
class MonitoringMetric:
    path: str
    kind: str                      # counter | gauge | histogram
    category: MetricCategory
    unit: str = ""


MONITORING_METRICS = [
    MonitoringMetric("host.cpu_utilization", "gauge", MetricCategory.HOST, "ratio"),
    MonitoringMetric("host.ram_utilization", "gauge", MetricCategory.HOST, "ratio"),
    MonitoringMetric("host.stable_storage_bytes", "gauge", MetricCategory.HOST, "bytes"),
    MonitoringMetric("host.stable_storage_write_latency", "gauge", MetricCategory.HOST, "s"),
    MonitoringMetric("host.stage_utilization", "gauge", MetricCategory.HOST, "ratio"),
    MonitoringMetric("net.packets_sent", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packets_delivered", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packets_lost", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packets_corrupted", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packets_duplicated", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packets_reordered", "counter", MetricCategory.NETWORK),
    MonitoringMetric("net.packet_loss_rate", "gauge", MetricCategory.NETWORK, "ratio"),
    MonitoringMetric("net.packet_corruption_rate", "gauge", MetricCategory.NETWORK, "ratio"),
    MonitoringMetric("net.packet_duplication_rate", "gauge", MetricCategory.NETWORK, "ratio"),
    MonitoringMetric("net.packet_reorder_rate", "gauge", MetricCategory.NETWORK, "ratio"),
    MonitoringMetric("net.mean_delay", "gauge", MetricCategory.NETWORK, "s"),
    MonitoringMetric("net.delay_variance", "gauge", MetricCategory.NETWORK, "s^2"),
    MonitoringMetric("net.link_down_events", "counter", MetricCategory.NETWORK),
    MonitoringMetric("app.requests_received", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.requests_executed", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.queue_depth", "gauge", MetricCategory.APPLICATION),
    MonitoringMetric("app.batch_fill", "gauge", MetricCategory.APPLICATION, "bytes"),
    MonitoringMetric("app.reply_cache_size", "gauge", MetricCategory.APPLICATION),
    MonitoringMetric("app.retransmissions", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.nacks_sent", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.duplicates_discarded", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.corrupt_frames", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.suspicions", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.view_changes", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.faults", "counter", MetricCategory.APPLICATION),
    MonitoringMetric("app.recovery_time", "histogram", MetricCategory.APPLICATION, "s"),
    MonitoringMetric("opt.latency_mean", "gauge", MetricCategory.OPTIMIZATION, "s"),
    MonitoringMetric("opt.latency_p50", "gauge", MetricCategory.OPTIMIZATION, "s"),
    MonitoringMetric("opt.latency_p90", "gauge", MetricCategory.OPTIMIZATION, "s"),
    MonitoringMetric("opt.latency_p99", "gauge", MetricCategory.OPTIMIZATION, "s"),
    MonitoringMetric("opt.latency_samples", "histogram", MetricCategory.OPTIMIZATION, "s"),
    MonitoringMetric("opt.throughput_rps", "gauge", MetricCategory.OPTIMIZATION, "req/s"),
    MonitoringMetric("opt.throughput_bps", "gauge", MetricCategory.OPTIMIZATION, "bytes/s"),
]

_METRICS_BY_PATH = {m.path: m for m in MONITORING_METRICS}


class Metrics:
    """Per-node runtime metric store."""

    def __init__(self):
        self.counters = {}
        self.gauges = {}
        self.histograms = {}

    def incr(self, path: str, n: float = 1) -> None:
        self.counters[path] = self.counters.get(path, 0) + n

    def gauge(self, path: str, value: float) -> None:
        self.gauges[path] = value

    def observe(self, path: str, value: float) -> None:
        self.histograms.setdefault(path, []).append(value)

    def get(self, path: str, default: float = 0) -> float:
        if path in self.counters:
            return self.counters[path]
        if path in self.gauges:
            return self.gauges[path]
        return default

    def flat(self) -> dict:
        out = dict(self.counters)
        out.update(self.gauges)
        for path, values in self.histograms.items():
            out[f"{path}.count"] = len(values)
        return out


@dataclass
class MonitoringSnapshot:
    node: int
    timestamp: float
    metrics: dict


@dataclass
class ControlMutation:
    path: str
    value: Any
    node: Optional[int] = None      # None applies cluster-wide
    requested_at: float = 0.0
    applied_at: Optional[float] = None
    outcome: Optional[str] = None   # APPLIED | REJECTED
    reason: str = ""

    def resolved(self) -> bool:
        return self.outcome is not None


class ParameterRegistry:
    """Descriptor table plus current values for one node (or the cluster)."""

    def __init__(self):
        self._descriptors = {}
        self._values = {}

    def register(self, desc: ParameterDescriptor,
                 value: Any = None) -> ParameterDescriptor:
        if desc.path in self._descriptors:
            raise ValueError(f"parameter registered twice: {desc.path}")
        self._descriptors[desc.path] = desc
        self._values[desc.path] = desc.default if value is None else \
            desc.coerce(value)
        return desc

    def descriptor(self, path: str) -> ParameterDescriptor:
        try:
            return self._descriptors[path]
        except KeyError:
            raise UnknownParameterError(path) from None

    def has(self, path: str) -> bool:
        return path in self._descriptors

    def get(self, path: str) -> Any:
        self.descriptor(path)
        return self._values[path]

    def put(self, path: str, value: Any) -> Any:
        """Direct value swap; callers go through the safe-point engine."""
        desc = self.descriptor(path)
        self._values[path] = desc.coerce(value)
        return self._values[path]

    def paths(self):
        return sorted(self._descriptors)

    def descriptors(self):
        return [self._descriptors[p] for p in self.paths()]

    def slice(self, category: Optional[ControlCategory] = None):
        out = []
        for p in self.paths():
            d = self._descriptors[p]
            if category is None or d.category == category:
                out.append((d, self._values[p]))
        return out


def classify(path: str, registry: Optional[ParameterRegistry] = None):
    """Locate a path in the taxonomy: ('monitoring'|'control', category)."""
    if path in _METRICS_BY_PATH:
        return "monitoring", _METRICS_BY_PATH[path].category
    if registry is not None and registry.has(path):
        return "control", registry.descriptor(path).category
    raise UnknownParameterError(path)


class MutationEngine:
    """Applies control mutations at node safe points and keeps the audit log.

    ``targets`` maps a mutation to the node appliers it affects; each
    applier exposes ``registry`` and ``schedule_safe_point(fn)`` which runs
    fn at the next quiescent moment of that node's event loop.
    """

    def __init__(self, now_fn: Callable[[], float]):
        self._now = now_fn
        self.audit_log = []

    def apply(self, mutation: ControlMutation, appliers) -> ControlMutation:
        mutation.requested_at = self._now()
        self.audit_log.append(mutation)
        appliers = list(appliers)
        if not appliers:
            mutation.outcome = "REJECTED"
            mutation.reason = "UNKNOWN_NODE"
            return mutation
        try:
            descs = [a.registry.descriptor(mutation.path) for a in appliers]
        except UnknownParameterError:
            mutation.outcome = "REJECTED"
            mutation.reason = "UNKNOWN_PARAMETER"
            return mutation
        desc = descs[0]
        if desc.mutability == Mutability.RESTART_ONLY:
            mutation.outcome = "REJECTED"
            mutation.reason = "RESTART_ONLY"
            return mutation
        if not desc.supported:
            mutation.outcome = "REJECTED"
            mutation.reason = "UNSUPPORTED"
            return mutation
        try:
            value = desc.coerce(mutation.value)
        except TypeMismatchError:
            mutation.outcome = "REJECTED"
            mutation.reason = "TYPE_MISMATCH"
            return mutation
        except OutOfRangeError:
            mutation.outcome = "REJECTED"
            mutation.reason = "OUT_OF_RANGE"
            return mutation

        remaining = {id(a) for a in appliers}

        def apply_one(applier):
            applier.registry.put(mutation.path, value)
            applier.on_param_applied(mutation.path, value)
            remaining.discard(id(applier))
            if not remaining:
                mutation.applied_at = self._now()
                mutation.outcome = "APPLIED"

        for a in appliers:
            a.schedule_safe_point(lambda a=a: apply_one(a))
        return mutation


# External control parameters: environment knobs, fixed between experiments.
ENV_DESCRIPTORS = (
    ParameterDescriptor(
        "env.cpu_frequency", ValueType.FLOAT, 1.0,
        ControlCategory.CPU_FREQUENCY, Mutability.RESTART_ONLY,
        unit="multiplier", lo=0.01, origin="invented"),
    ParameterDescriptor(
        "env.cpu_cores", ValueType.INTEGER, 1, ControlCategory.CPU_CORES,
        Mutability.RESTART_ONLY, lo=1, origin="invented"),
    ParameterDescriptor(
        "env.ram_size", ValueType.BYTES, 1 << 30, ControlCategory.RAM_SIZE,
        Mutability.RESTART_ONLY, unit="bytes", lo=1, origin="invented"),
    ParameterDescriptor(
        "env.storage_size", ValueType.BYTES, 1 << 30,
        ControlCategory.STORAGE_SIZE, Mutability.RESTART_ONLY, unit="bytes",
        lo=1, origin="invented"),
    ParameterDescriptor(
        "env.storage_performance", ValueType.FLOAT, 0.0,
        ControlCategory.STORAGE_PERFORMANCE, Mutability.RESTART_ONLY,
        unit="s/write", lo=0.0, origin="invented"),
)


# -- manifest -----------------------------------------------------------------

MANIFEST_COLUMNS = "path|category|mutability|default|origin|status"


def manifest_lines(descriptors) -> list:
    lines = [f"# {MANIFEST_COLUMNS}"]
    for d in sorted(descriptors, key=lambda d: d.path):
        cat = d.category.name + ("(assigned)" if d.assigned else "")
        status = "implemented" if d.supported else "UNSUPPORTED"
        lines.append("|".join([
            d.path, cat, d.mutability.value, repr(d.default), d.origin, status,
        ]))
    return lines


def write_manifest(descriptors, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines(descriptors)) + "\n")


def load_manifest(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("|")
            rows.append({
                "path": fields[0], "category": fields[1],
                "mutability": fields[2], "default": fields[3],
                "origin": fields[4], "status": fields[5],
            })
    return rows
