"""Replica groups over the simulated network, plus workload clients."""

from __future__ import annotations

import json
from typing import Optional

from ..cluster import Node
from ..core import CorruptFrameError, GcsimError, Message, decode_message, \
    encode_message
from ..layers.util import b64, unb64
from ..simnet import LinkDownError, Network, NetworkProfile, SimClock
from ..stack import LayerSpec, StackConfig
from .config import CrashModel, ReplicaConfig, SMR_DESCRIPTORS
from .log import StableStore
from .replica import READ_ONLY, WRITE, Replica, Request


class ModelForbidsRecoveryError(GcsimError):
    pass


_TRANSPORT_FOR_NETWORK = {"TCP": "tcp", "UDP": "udp", "Generic": "generic"}


def smr_stack_config(cfg: ReplicaConfig,
                     overrides: Optional[dict] = None) -> StackConfig:
    transport = _TRANSPORT_FOR_NETWORK.get(cfg.network, "tcp")
    params = {"enable_bundling": False}
    if transport == "generic":
        params["max_udp_packet_size"] = cfg.max_udp_packet_size
    if transport == "tcp" or transport == "generic":
        params["reconnect_timeout"] = 1000
    params.update((overrides or {}).get(transport, {}))
    return StackConfig([LayerSpec(transport, params)])


def _smr_registry_values(cfg: ReplicaConfig) -> dict:
    members = cfg.members()
    values = {
        "smr.num_replicas": max(len(cfg.processes), 1),
        "smr.max_faulty": max((len(members) - 1) // 2, 0) if members else 0,
        "smr.crash_model": cfg.crash_model.value,
        "smr.log": cfg.log_enabled,
        "smr.initial_view": "all" if cfg.initial_view is None else "subset",
    }
    for desc in SMR_DESCRIPTORS:
        field = desc.path.split(".", 1)[1]
        if desc.path not in values and hasattr(cfg, field):
            values[desc.path] = getattr(cfg, field)
    return values


class SmrCluster:
    """All replicas of one replicated service over one simulated network."""

    def __init__(self, cfg: ReplicaConfig,
                 profile: Optional[NetworkProfile] = None, seed: int = 0,
                 stack_overrides: Optional[dict] = None,
                 service_factory=None, log_dir: Optional[str] = None):
        self.cfg = cfg
        self.clock = SimClock()
        self.profile = profile or NetworkProfile()
        self.network = Network(self.clock, self.profile, seed=seed)
        self.seed = seed
        self.stack_overrides = stack_overrides
        self.service_factory = service_factory
        self.store = StableStore(base_dir=log_dir or cfg.log_path,
                                 to_disk=cfg.log_to_disk)
        self.replicas = {}
        self.clients = {}
        for proc in cfg.processes:
            self._build_replica(proc.node)

    def _build_replica(self, rid: int) -> Replica:
        rcfg = ReplicaConfig(**{**self.cfg.__dict__, "id": rid,
                                "processes": self.cfg.processes})
        node = Node(rid, self.clock, self.network, self.seed,
                    initial_members=self.cfg.members(),
                    stack_cfg=smr_stack_config(self.cfg,
                                               self.stack_overrides))
        for desc in SMR_DESCRIPTORS:
            node.registry.register(
                desc, value=_smr_registry_values(rcfg).get(desc.path))
        service = self.service_factory() if self.service_factory else None
        replica = Replica(rcfg, node, self.store, service=service)
        self.replicas[rid] = replica
        return replica

    def start(self) -> None:
        for rid in sorted(self.replicas):
            self.clock.schedule(0.0, self._start_one, rid)

    def _start_one(self, rid: int) -> None:
        replica = self.replicas[rid]
        replica.node.start()
        replica.start()

    def run_until(self, t: float) -> None:
        self.clock.run_until(t)

    # -- faults -------------------------------------------------------------------

    def crash(self, rid: int) -> None:
        self.replicas[rid].node.crash()

    def recover(self, rid: int) -> Replica:
        if self.cfg.crash_model == CrashModel.CRASH_STOP:
            raise ModelForbidsRecoveryError(
                "MODEL_FORBIDS_RECOVERY under CrashStop")
        old = self.replicas[rid]
        if old.node.alive:
            return old
        replica = self._build_replica(rid)
        self._start_one(rid)
        return replica

    def alive(self):
        return [r for r in self.replicas.values() if r.node.alive]

    def leader(self) -> Optional[Replica]:
        for r in self.alive():
            if r.is_leader:
                return r
        return None

    # -- invariant checks ------------------------------------------------------------

    def agreement_violations(self) -> list:
        """Instances executed with different batches at different replicas."""
        by_instance = {}
        for rid, r in self.replicas.items():
            for inst, digest in r.instance_digests.items():
                by_instance.setdefault(inst, {})[rid] = digest
        bad = []
        for inst, per_replica in sorted(by_instance.items()):
            if len(set(per_replica.values())) > 1:
                bad.append((inst, per_replica))
        return bad

    def prefix_violations(self) -> list:
        """Replicas whose executed instances are not a contiguous run."""
        bad = []
        for rid, r in self.replicas.items():
            ids = sorted(r.instance_digests)
            start = r.snap_last
            expected = [i for i in range(start + 1, r.exec_point + 1)]
            executed_tail = [i for i in ids if i > start]
            if executed_tail != expected:
                bad.append((rid, executed_tail, expected))
        return bad

    def executed_sequences_consistent(self) -> bool:
        if self.agreement_violations() or self.prefix_violations():
            return False
        return True


class SimClient:
    """Closed-loop simulated client with retry and replica rotation."""

    def __init__(self, cluster: SmrCluster, client_id: int, node_id: int,
                 retry_timeout_ms: Optional[float] = None):
        self.cluster = cluster
        self.client_id = client_id
        self.node_id = node_id
        self.retry_ms = retry_timeout_ms or cluster.cfg.client_retry_timeout
        self.targets = list(cluster.cfg.members())
        self.target_idx = client_id % len(self.targets)
        self.next_seqno = 1
        self.queue = []
        self.inflight = None
        self.completed = []       # dicts: seqno, submit, reply_at, bytes
        self.submitted = 0
        cluster.network.attach(node_id, "client", self._on_frame)
        cluster.clients[client_id] = self

    def submit(self, payload: bytes, kind: str = WRITE,
               complexity: float = 0.0) -> int:
        seqno = self.next_seqno
        self.next_seqno += 1
        self.submitted += 1
        self.queue.append({"seqno": seqno, "kind": kind, "payload": payload,
                           "complexity": complexity,
                           "submit": self.cluster.clock.now})
        self._pump()
        return seqno

    def _pump(self) -> None:
        if self.inflight is not None or not self.queue:
            return
        self.inflight = self.queue.pop(0)
        self.inflight["attempts"] = 0
        self._send_current()

    def _send_current(self) -> None:
        entry = self.inflight
        if entry is None:
            return
        entry["attempts"] += 1
        target = self.targets[self.target_idx % len(self.targets)]
        r = Request(self.client_id, entry["seqno"], entry["kind"],
                    entry["payload"], entry["complexity"], self.node_id)
        payload = json.dumps({"t": "req", "r": r.to_wire()},
                             sort_keys=True).encode()
        frame = encode_message(Message(self.node_id, target, payload))
        try:
            self.cluster.network.send((self.node_id, "client"),
                                      (target, "client"), frame)
        except LinkDownError:
            pass
        seqno = entry["seqno"]
        self.cluster.clock.schedule(self.retry_ms / 1000.0,
                                    self._retry_check, seqno)

    def _retry_check(self, seqno: int) -> None:
        entry = self.inflight
        if entry is None or entry["seqno"] != seqno:
            return
        self.target_idx += 1
        self._send_current()

    def _on_frame(self, src_ep, dst_ep, frame: bytes) -> None:
        try:
            m = decode_message(frame)
            obj = json.loads(m.payload.decode())
        except (CorruptFrameError, ValueError, UnicodeDecodeError):
            return
        entry = self.inflight
        if obj.get("t") != "reply" or entry is None:
            return
        if obj["c"] != self.client_id or obj["s"] != entry["seqno"]:
            return
        self.completed.append({
            "seqno": entry["seqno"], "submit": entry["submit"],
            "reply_at": self.cluster.clock.now,
            "bytes": len(entry["payload"]),
            "latency": self.cluster.clock.now - entry["submit"],
            "reply": obj["v"],
        })
        self.inflight = None
        self._pump()
