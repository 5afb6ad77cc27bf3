"""Nodes and clusters: each node owns one stack confined to the shared
simulation event loop, plus its parameter registry and metric store."""

from __future__ import annotations

from typing import Callable, Optional

from .core import EventKind, GcsimError, Message, StackEvent, View, ViewId
from .params import ENV_DESCRIPTORS, Metrics, MonitoringSnapshot, \
    ParameterRegistry


class NodeDownError(GcsimError):
    pass
from .simnet import Network, NetworkProfile, SimClock
from .stack import LayerSpec, StackConfig, build_stack
from . import layers  # noqa: F401  (populates the layer registry)

DEFAULT_GCS_LAYERS = ("udp", "discovery", "merge3", "fd_all",
                      "verify_suspect", "nakack", "unicast", "stable", "gms",
                      "frag", "sequencer")


def default_gcs_config(overrides: Optional[dict] = None) -> StackConfig:
    overrides = overrides or {}
    return StackConfig([LayerSpec(name, dict(overrides.get(name, {})))
                        for name in DEFAULT_GCS_LAYERS])


class Node:
    """One process: a stack plus registries, confined to the event loop."""

    def __init__(self, node_id: int, clock: SimClock, network: Network,
                 seed: int, initial_members, stack_cfg: StackConfig,
                 is_initial_coordinator: bool = False,
                 starts_server: bool = True,
                 env_overrides: Optional[dict] = None):
        self.node_id = node_id
        self.clock = clock
        self.network = network
        self.seed = seed
        self.initial_members = list(initial_members)
        self.stack_cfg = stack_cfg
        self.is_initial_coordinator = is_initial_coordinator
        self.starts_server = starts_server
        self.registry = ParameterRegistry()
        for desc in ENV_DESCRIPTORS:
            self.registry.register(desc,
                                   value=(env_overrides or {}).get(desc.path))
        self.metrics = Metrics()
        self.stack = None
        self.alive = False
        self.crashed_at: Optional[float] = None
        self.deliveries = []     # (time, src, payload)
        self.views = []
        self.events = []
        self.app = None          # optional object with handle_event(evt)

    @property
    def cpu_multiplier(self) -> float:
        return self.registry.get("env.cpu_frequency")

    def start(self) -> None:
        self.alive = True
        self.crashed_at = None
        if self.stack is None:
            self.stack = build_stack(self.stack_cfg, self)
        self.stack.app_handler = self._on_app_event
        self.stack.start()
        if not self.stack.has_layer("gms"):
            # no membership layer: the configured member list is the view
            view = View(ViewId(1, self.initial_members[0]),
                        tuple(self.initial_members))
            self.stack.send_down(StackEvent.view_change(view))

    def crash(self) -> None:
        if not self.alive:
            return
        self.alive = False
        self.crashed_at = self.clock.now
        self.metrics.incr("app.faults")
        if self.stack is not None:
            self.stack.close()
        self.stack = None

    def _on_app_event(self, evt: StackEvent) -> None:
        if evt.kind == EventKind.MSG_UP:
            self.deliveries.append((self.clock.now, evt.body.src,
                                    evt.body.payload))
        elif evt.kind == EventKind.VIEW_CHANGE:
            self.views.append((self.clock.now, evt.body))
        else:
            self.events.append((self.clock.now, evt))
        if self.app is not None:
            self.app.handle_event(evt)

    # -- application sends ----------------------------------------------------

    def multicast(self, payload: bytes, flags=frozenset()) -> None:
        m = Message(self.node_id, None, payload, {}, flags)
        self.stack.send_down(StackEvent.msg_down(m))

    def unicast(self, dest: int, payload: bytes, flags=frozenset()) -> None:
        m = Message(self.node_id, dest, payload, {}, flags)
        self.stack.send_down(StackEvent.msg_down(m))

    # -- safe-point hooks used by the mutation engine ---------------------------

    def schedule_safe_point(self, fn: Callable) -> None:
        def at_safe_point():
            if self.alive:
                fn()
        self.clock.schedule(0.0, at_safe_point)

    def on_param_applied(self, path: str, value) -> None:
        if self.stack is not None:
            self.stack.config_changed(path, value)

    def current_view(self):
        if self.stack is not None and self.stack.has_layer("gms"):
            return self.stack.layer("gms").current
        return None

    def sample(self) -> MonitoringSnapshot:
        """Current monitoring snapshot; raises when the node is down."""
        if not self.alive:
            raise NodeDownError(f"node {self.node_id} is down")
        now = self.clock.now
        out = {}
        net = self.network.node_stats(self.node_id)
        sent = net.get("sent", 0)
        out["net.packets_sent"] = sent
        out["net.packets_delivered"] = net.get("delivered", 0)
        out["net.packets_lost"] = net.get("lost", 0)
        out["net.packets_corrupted"] = net.get("corrupted", 0)
        out["net.packets_duplicated"] = net.get("duplicated", 0)
        out["net.packets_reordered"] = net.get("reordered", 0)
        out["net.packet_loss_rate"] = net.get("lost", 0) / sent if sent else 0.0
        out["net.packet_corruption_rate"] = \
            net.get("corrupted", 0) / sent if sent else 0.0
        out["net.packet_duplication_rate"] = \
            net.get("duplicated", 0) / sent if sent else 0.0
        out["net.packet_reorder_rate"] = \
            net.get("reordered", 0) / sent if sent else 0.0
        out["net.link_down_events"] = net.get("link_down", 0)
        samples = self.network.delay_samples.get(self.node_id)
        if samples:
            from .simnet import jitter_stats
            mean, var = jitter_stats(samples)
            out["net.mean_delay"] = mean
            out["net.delay_variance"] = var
        out["host.cpu_utilization"] = (
            self.metrics.counters.get("host.busy_s", 0.0) / now
            if now > 0 else 0.0)
        out["host.stable_storage_bytes"] = \
            self.metrics.gauges.get("host.stable_storage_bytes", 0)
        out["host.stable_storage_write_latency"] = \
            self.registry.get("env.storage_performance")
        for path, value in self.metrics.flat().items():
            out.setdefault(path, value)
        executed = self.metrics.counters.get("app.requests_executed", 0)
        out["opt.throughput_rps"] = executed / now if now > 0 else 0.0
        out["opt.throughput_bps"] = (
            self.metrics.counters.get("app.executed_bytes", 0) / now
            if now > 0 else 0.0)
        lat = self.metrics.histograms.get("opt.latency_samples")
        if lat:
            ordered = sorted(lat)
            out["opt.latency_mean"] = sum(ordered) / len(ordered)
            out["opt.latency_p50"] = percentile(ordered, 0.50)
            out["opt.latency_p90"] = percentile(ordered, 0.90)
            out["opt.latency_p99"] = percentile(ordered, 0.99)
        return MonitoringSnapshot(self.node_id, now, out)


def percentile(ordered: list, q: float) -> float:
    """Nearest-rank percentile over a pre-sorted sample."""
    if not ordered:
        return 0.0
    idx = max(0, min(len(ordered) - 1, int(round(q * (len(ordered) - 1)))))
    return ordered[idx]


class GcsCluster:
    """A set of group-communication nodes over one simulated network."""

    def __init__(self, n: int, stack_cfg: Optional[StackConfig] = None,
                 profile: Optional[NetworkProfile] = None, seed: int = 0,
                 stagger_s: float = 0.1):
        self.clock = SimClock()
        self.profile = profile or NetworkProfile()
        self.network = Network(self.clock, self.profile, seed=seed)
        self.seed = seed
        self.stagger_s = stagger_s
        members = list(range(n))
        self.nodes = {}
        for i in members:
            cfg = stack_cfg or default_gcs_config()
            # without a membership layer every node is a server from the start
            has_gms = any(spec.layer_name == "gms" for spec in cfg.layers)
            self.nodes[i] = Node(
                i, self.clock, self.network, seed, members, cfg,
                is_initial_coordinator=(i == 0),
                starts_server=(i == 0 or not has_gms))

    def start(self) -> None:
        for i, node in sorted(self.nodes.items()):
            self.clock.schedule(i * self.stagger_s, node.start)

    def run_until(self, t: float) -> None:
        self.clock.run_until(t)

    def crash(self, node_id: int) -> None:
        self.nodes[node_id].crash()

    def alive_nodes(self):
        return [n for n in self.nodes.values() if n.alive]

    def delivery_log(self, node_id: int):
        return [(src, payload) for _, src, payload
                in self.nodes[node_id].deliveries]

    def converged_view(self):
        """The common current view of all live nodes, or None."""
        views = [n.current_view() for n in self.alive_nodes()]
        if not views or any(v is None for v in views):
            return None
        first = views[0]
        if all(v.id == first.id and v.members == first.members
               for v in views):
            return first
        return None
