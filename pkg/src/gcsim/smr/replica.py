"""The replication engine: MultiPaxos with a stable-leader fast path.

One Replica rides on one Node's stack. The leader batches client
requests, proposes them into numbered consensus instances bounded by the
window, and declares a value decided on a majority of accepts. Followers
execute decided instances strictly in order; lagging replicas repair
small gaps with value requests and fall back to a snapshot transfer when
the gap exceeds the high mark. Under the crash-recovery model every
promise and accept is durable before the matching message leaves.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

from ..core import (
    CorruptFrameError,
    EventKind,
    GcsimError,
    Message,
    StackEvent,
    View,
    ViewId,
    decode_message,
    encode_message,
)
from ..layers.util import b64, unb64
from ..simnet import LinkDownError
from .config import CrashModel, ReplicaConfig
from .log import Snapshot, StableLog, StableStore


class ReconfigError(GcsimError):
    pass


WRITE = "W"
READ_ONLY = "R"
RECONFIG = "C"


@dataclass
class Request:
    client: int
    seqno: int
    kind: str = WRITE
    payload: bytes = b""
    complexity: float = 0.0
    client_node: int = -1

    def size(self) -> int:
        return len(self.payload)

    def to_wire(self) -> dict:
        return {"c": self.client, "s": self.seqno, "k": self.kind,
                "p": b64(self.payload), "x": self.complexity,
                "n": self.client_node}

    @staticmethod
    def from_wire(d: dict) -> "Request":
        return Request(d["c"], d["s"], d["k"], unb64(d["p"]), d["x"], d["n"])


@dataclass
class Batch:
    instance_hint: int
    requests: list
    total_bytes: int

    def to_wire(self) -> dict:
        return {"h": self.instance_hint,
                "r": [r.to_wire() for r in self.requests],
                "b": self.total_bytes}

    @staticmethod
    def from_wire(d: dict) -> "Batch":
        return Batch(d["h"], [Request.from_wire(r) for r in d["r"]], d["b"])

    def digest(self) -> str:
        blob = json.dumps(self.to_wire(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:24]


def make_batch(requests) -> Batch:
    return Batch(0, list(requests), sum(r.size() for r in requests))


# -- pure decision procedures --------------------------------------------------

def batcher_add(batch_size: int, pending: list, r: Request, now_ms: float,
                max_batch_delay_ms: float,
                max_requests: Optional[int] = None) -> Optional[Batch]:
    """Queue a request; returns the batch this addition closed, if any."""
    size = r.size()
    pending_bytes = sum(req.size() for _, req in pending)
    if pending and (pending_bytes + size > batch_size or
                    (max_requests and len(pending) >= max_requests)):
        batch = make_batch([req for _, req in pending])
        pending.clear()
        pending.append((now_ms, r))
        return batch
    pending.append((now_ms, r))
    if size > batch_size:
        batch = make_batch([req for _, req in pending])
        pending.clear()
        return batch
    if now_ms - pending[0][0] >= max_batch_delay_ms:
        batch = make_batch([req for _, req in pending])
        pending.clear()
        return batch
    return None


def batcher_flush(pending: list, now_ms: float,
                  max_batch_delay_ms: float) -> Optional[Batch]:
    if pending and now_ms - pending[0][0] >= max_batch_delay_ms:
        batch = make_batch([req for _, req in pending])
        pending.clear()
        return batch
    return None


def window_admit(instances: dict, window_size: int) -> set:
    """Instance ids currently open for proposals.

    ``instances`` maps id -> EMPTY | PROPOSED | DECIDED | EXECUTED.
    """
    lowest_unexecuted = 1
    while instances.get(lowest_unexecuted) == "EXECUTED":
        lowest_unexecuted += 1
    hi = lowest_unexecuted + window_size - 1
    return {i for i in range(lowest_unexecuted, hi + 1)
            if instances.get(i, "EMPTY") == "EMPTY"}


def snapshot_policy(log_size: int, snapshot_size: int, instances_since: int,
                    *, min_log_size: int, ask_ratio: float,
                    force_ratio: float, min_sampling: int) -> str:
    if log_size < min_log_size or instances_since < min_sampling:
        return "NONE"
    ratio = log_size / max(snapshot_size, 1)
    if ratio >= force_ratio:
        return "FORCE"
    if ratio >= ask_ratio:
        return "ASK"
    return "NONE"


def catch_up_decision(gap: int, high_mark: int, exec_point: int = -1,
                      revival_high_mark: Optional[int] = None) -> str:
    if revival_high_mark is not None and exec_point == 0 and \
            gap > revival_high_mark:
        return "STATE_TRANSFER"
    return "STATE_TRANSFER" if gap > high_mark else "NACK_RANGE"


def leader_monitor(last_heard_ms: float, now_ms: float,
                   fd_suspect_to_ms: float) -> str:
    return "ADVANCE_BALLOT" if now_ms - last_heard_ms > fd_suspect_to_ms \
        else "NONE"


class HashChainService:
    """Deterministic toy service: state is a rolling hash of writes."""

    def __init__(self):
        self.state = b"\x00" * 32
        self.writes = 0

    def execute(self, kind: str, payload: bytes) -> bytes:
        if kind == WRITE:
            self.state = hashlib.sha256(self.state + payload).digest()
            self.writes += 1
        return self.state[:8]

    def snapshot(self) -> bytes:
        return self.state + struct.pack("<Q", self.writes)

    def restore(self, blob: bytes) -> None:
        self.state = blob[:32]
        (self.writes,) = struct.unpack("<Q", blob[32:40])


class Replica:
    """One replica process: consensus, execution, snapshots, recovery."""

    def __init__(self, cfg: ReplicaConfig, node, store: StableStore,
                 service=None):
        self.cfg = cfg
        self.node = node
        self.store = store
        self.service = service or HashChainService()
        self.id = cfg.id
        self.membership = list(cfg.members())
        self.view_number = 0
        self.active = self.id in self.membership

        self.ballot = 0
        self.promised = 0
        self.prepared = False
        self.prepare_state = None          # {"b", "promises", "low"}
        self.accepted = {}                 # i -> {"b", "v"}
        self.decided = {}                  # i -> batch wire dict
        self.proposed = {}                 # i -> {"b", "v", "acks"}
        self.batch_store = {}              # digest -> batch wire (indirect)
        self.exec_point = 0
        self.executed_log = []             # (instance, digest)
        self.instance_digests = {}         # instance -> digest (executed here)
        self.reply_cache = {}              # client -> [seqno, reply_b64]
        self.snap_last = 0
        self.snapshot_size = 0

        self.pending = []                  # batcher: (arrival_ms, Request)
        self.batch_queue = []              # emitted batches awaiting a slot
        self.forward_queue = []            # follower: (arrival_ms, Request)
        self.forwarded = {}                # (client, seqno) -> ms
        self.pending_reconfig = []

        self.last_leader_heard_ms = 0.0
        self.known_top = 0
        self.catchup_outstanding = None    # {"need", "at_ms", "peer"}
        self.progress_time = 0.0
        self.recovered = False
        self._batch_fetch_at = {}          # digest -> last fetch request ms
        self.observer = None               # harness event tap

    def _notify(self, event: dict) -> None:
        if self.observer is not None:
            event.setdefault("replica", self.id)
            self.observer(event)

    # -- registry-backed parameters -------------------------------------------

    def p(self, name: str):
        path = f"smr.{name}"
        if self.node.registry.has(path):
            return self.node.registry.get(path)
        return getattr(self.cfg, name)

    @property
    def clock(self):
        return self.node.clock

    def now_ms(self) -> float:
        return self.clock.now * 1000.0

    def majority(self) -> int:
        return len(self.membership) // 2 + 1

    def leader_of(self, ballot: int) -> int:
        return sorted(self.membership)[ballot % len(self.membership)]

    @property
    def is_leader(self) -> bool:
        return self.active and self.prepared and \
            self.leader_of(self.ballot) == self.id

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        self.node.app = self
        self.node.network.attach(self.id, "client", self._on_client_frame)
        if self.cfg.crash_model == CrashModel.FULL_STABLE_STORAGE:
            self._recover_from_store()
        if not self.recovered and self.ballot == 0 and \
                self.leader_of(0) == self.id:
            self.prepared = True   # fresh cluster: ballot 0 needs no prepare
        elif self.recovered and self.leader_of(self.ballot) == self.id:
            # never resume leadership silently after a crash
            self._advance_ballot()
        self.last_leader_heard_ms = self.now_ms()
        self.progress_time = self.clock.now
        self._arm_heartbeat()
        self._arm_monitor()
        self._arm_retransmit()

    def stable_log(self) -> StableLog:
        return self.store.log_for(self.id)

    def _recover_from_store(self) -> None:
        log = self.stable_log()
        if not log.records and log.snapshot is None:
            return
        self.recovered = True
        self.node.metrics.incr("app.recoveries")
        replayed = log.replay()
        self.promised = replayed["promised"]
        self.ballot = self.promised
        self.accepted = replayed["accepted"]
        self.decided = dict(replayed["decided"])
        if log.snapshot is not None:
            self._install_snapshot(log.snapshot, {}, from_recovery=True)
        self._execute_ready()

    # -- durable writes --------------------------------------------------------------

    def _durable(self, record: dict) -> float:
        """Append to stable storage; returns the write latency to charge."""
        if self.cfg.crash_model != CrashModel.FULL_STABLE_STORAGE and \
                not self.cfg.sync_log:
            return 0.0
        log = self.stable_log()
        log.append(record)
        self.store.persist_record(self.id, record)
        latency = self.node.registry.get("env.storage_performance")
        self.node.metrics.gauge("host.stable_storage_bytes",
                                log.size_bytes())
        if latency > 0:
            self.node.metrics.gauge("host.stable_storage_write_latency",
                                    latency)
        return latency if (self.cfg.crash_model ==
                           CrashModel.FULL_STABLE_STORAGE or
                           self.cfg.sync_log) else 0.0

    def _log_size(self) -> int:
        if self.cfg.crash_model == CrashModel.FULL_STABLE_STORAGE or \
                self.cfg.sync_log:
            return self.stable_log().size_bytes()
        return self._volatile_log_bytes

    _volatile_log_bytes = 0

    # -- messaging ---------------------------------------------------------------------

    def _auth_cost(self) -> float:
        cost = 0.0
        if self.cfg.use_macs:
            cost += 2e-5
        if self.cfg.use_signatures:
            cost += 2e-4
        return cost / max(self.node.cpu_multiplier, 1e-9)

    def _send(self, dest: Optional[int], obj: dict,
              extra_delay: float = 0.0) -> None:
        if not self.node.alive:
            return
        payload = json.dumps(obj, sort_keys=True).encode()
        m = Message(self.id, dest, payload)
        delay = extra_delay + self._auth_cost()
        if delay > 0:
            self.clock.schedule(delay, self._stack_send, m)
        else:
            self._stack_send(m)

    def _stack_send(self, m: Message) -> None:
        if self.node.alive and self.node.stack is not None and \
                not self.node.stack.closed:
            self.node.stack.send_down(StackEvent.msg_down(m))

    def _bcast(self, obj: dict, extra_delay: float = 0.0) -> None:
        self._send(None, obj, extra_delay)

    # -- inbound ------------------------------------------------------------------------

    def handle_event(self, evt: StackEvent) -> None:
        if evt.kind != EventKind.MSG_UP:
            return
        try:
            obj = json.loads(evt.body.payload.decode())
        except (ValueError, UnicodeDecodeError):
            self.node.metrics.incr("app.corrupt_frames")
            return
        self._dispatch(evt.body.src, obj)

    def _dispatch(self, src: int, obj: dict) -> None:
        if not self.active and obj.get("t") not in ("snap_rsp", "reconfig_welcome"):
            # standby replicas only wake up through a state transfer
            if obj.get("t") == "hb":
                self._note_top(src, obj.get("top", 0))
            return
        kind = obj["t"]
        if kind == "hb":
            self._on_heartbeat(src, obj)
        elif kind == "prepare":
            self._on_prepare(src, obj)
        elif kind == "promise":
            self._on_promise(src, obj)
        elif kind == "reject":
            self._on_reject(src, obj)
        elif kind == "accept":
            self._on_accept(src, obj)
        elif kind == "accepted":
            self._on_accepted(src, obj)
        elif kind == "decided":
            self._on_decided(src, obj["i"], obj["v"])
        elif kind == "batch_data":
            self.batch_store[obj["d"]] = obj["v"]
            self._execute_ready()
        elif kind == "batch_req":
            value = self.batch_store.get(obj["d"])
            if value is not None:
                self._send(src, {"t": "batch_data", "d": obj["d"],
                                 "v": value})
        elif kind == "fwd_batch":
            for rw in obj["reqs"]:
                self._admit_request(Request.from_wire(rw))
        elif kind == "catchup_req":
            self._on_catchup_req(src, obj)
        elif kind == "catchup_rsp":
            self._on_catchup_rsp(src, obj)
        elif kind == "snap_req":
            self._on_snap_req(src)
        elif kind == "snap_rsp":
            self._on_snap_rsp(src, obj)

    # -- client port ------------------------------------------------------------------------

    def _on_client_frame(self, src_ep, dst_ep, frame: bytes) -> None:
        try:
            m = decode_message(frame)
            obj = json.loads(m.payload.decode())
        except (CorruptFrameError, ValueError, UnicodeDecodeError):
            self.node.metrics.incr("app.corrupt_frames")
            return
        if obj.get("t") != "req":
            return
        if len(frame) > self.p("client_request_buffer_size"):
            self.node.metrics.incr("app.client_buffer_overflows")
        r = Request.from_wire(obj["r"])
        self.node.metrics.incr("app.requests_received")
        self._admit_request(r)

    def _reply_client(self, r: Request, reply_b64: str) -> None:
        if not self.node.alive:
            return
        obj = {"t": "reply", "c": r.client, "s": r.seqno, "v": reply_b64,
               "leader": self.leader_of(self.ballot)}
        payload = json.dumps(obj, sort_keys=True).encode()
        frame = encode_message(Message(self.id, r.client_node, payload))
        try:
            self.node.network.send((self.id, "client"),
                                   (r.client_node, "client"), frame)
        except LinkDownError:
            pass

    # -- request admission ---------------------------------------------------------------------

    def _admit_request(self, r: Request) -> None:
        if not self.active:
            return
        cached = self.reply_cache.get(r.client)
        if cached is not None and cached[0] >= r.seqno:
            if cached[0] == r.seqno:
                self._reply_client(r, cached[1])
            return
        if r.kind == READ_ONLY:
            if self.is_leader:
                reply = self.service.execute(READ_ONLY, r.payload)
                self._reply_client(r, b64(reply))
            else:
                self._forward(r)
            return
        if self.is_leader:
            batch = batcher_add(self.p("batch_size"), self.pending, r,
                                self.now_ms(), self.p("max_batch_delay"),
                                self.p("max_batch_requests"))
            self.node.metrics.gauge("app.queue_depth", len(self.pending))
            if batch is not None:
                self.batch_queue.append(batch)
                self._try_propose()
            self._arm_batch_timer()
        else:
            self._forward(r)

    def _forward(self, r: Request) -> None:
        if len(self.forward_queue) >= self.p("out_queue_size"):
            self.node.metrics.incr("app.forward_dropped")
            return
        self.forward_queue.append((self.now_ms(), r))
        self.forwarded[(r.client, r.seqno)] = self.now_ms()
        if sum(req.size() for _, req in self.forward_queue) >= \
                self.p("forward_max_batch_size"):
            self._flush_forward()
        else:
            self.node.stack.set_timer(
                self.p("forward_max_batch_delay") / 1000.0,
                self._flush_forward)

    def _flush_forward(self) -> None:
        if not self.forward_queue or self.is_leader:
            queued, self.forward_queue = self.forward_queue, []
            for _, r in queued:
                self._admit_request(r)
            return
        leader = self.leader_of(self.ballot)
        reqs = [r.to_wire() for _, r in self.forward_queue]
        self.forward_queue = []
        self._send(leader, {"t": "fwd_batch", "reqs": reqs})

    _batch_timer_armed = False

    def _arm_batch_timer(self) -> None:
        if not self.pending or self._batch_timer_armed:
            return
        self._batch_timer_armed = True

        def fire():
            self._batch_timer_armed = False
            if not self.is_leader:
                return
            batch = batcher_flush(self.pending, self.now_ms(),
                                  self.p("max_batch_delay"))
            if batch is not None:
                self.batch_queue.append(batch)
                self._try_propose()
            self._arm_batch_timer()
        self.node.stack.set_timer(self.p("max_batch_delay") / 1000.0, fire)

    # -- proposing ------------------------------------------------------------------------------

    def _instance_states(self) -> dict:
        states = {}
        top = max([self.exec_point, self.known_top] +
                  list(self.proposed) + list(self.decided) +
                  list(self.accepted) or [0])
        for i in range(1, top + 1):
            if i <= self.exec_point:
                states[i] = "EXECUTED"
            elif i in self.decided:
                states[i] = "DECIDED"
            elif i in self.proposed or i in self.accepted:
                states[i] = "PROPOSED"
        return states

    def _try_propose(self) -> None:
        if not self.is_leader:
            return
        while True:
            if self.pending_reconfig:
                # membership changes go in alone at a window boundary
                in_flight = bool(self.proposed) or any(
                    i > self.exec_point for i in self.decided)
                if in_flight:
                    return
                batch = make_batch([self.pending_reconfig[0]])
            elif self.batch_queue:
                batch = None
            else:
                return
            admissible = window_admit(self._instance_states(),
                                      self.p("window_size"))
            if not admissible:
                return
            inst = min(admissible)
            if batch is None:
                batch = self.batch_queue.pop(0)
            else:
                self.pending_reconfig.pop(0)
            batch.instance_hint = inst
            self._propose(inst, batch)

    def _propose(self, inst: int, batch: Batch) -> None:
        wire = batch.to_wire()
        self.proposed[inst] = {"b": self.ballot, "v": wire,
                               "acks": {self.id}, "at": self.now_ms()}
        self.accepted[inst] = {"b": self.ballot, "v": wire}
        delay = self._durable({"t": "accept", "b": self.ballot, "i": inst,
                               "v": wire})
        self.node.metrics.gauge("app.batch_fill", batch.total_bytes)
        if self.p("indirect_consensus"):
            digest = batch.digest()
            self.batch_store[digest] = wire
            self._bcast({"t": "batch_data", "d": digest, "v": wire},
                        extra_delay=delay)
            self._bcast({"t": "accept", "b": self.ballot, "i": inst,
                         "v": {"digest": digest}}, extra_delay=delay)
        else:
            self._bcast({"t": "accept", "b": self.ballot, "i": inst,
                         "v": wire}, extra_delay=delay)
        self._maybe_decide(inst)

    # -- acceptor side ----------------------------------------------------------------------------

    def _on_accept(self, src: int, obj: dict) -> None:
        b, inst = obj["b"], obj["i"]
        if b < self.promised:
            self._send(src, {"t": "reject", "b": self.promised})
            return
        if b > self.ballot:
            self._follow(b)
        self.promised = b
        self.last_leader_heard_ms = self.now_ms()
        value = obj["v"]
        self.accepted[inst] = {"b": b, "v": value}
        delay = self._durable({"t": "accept", "b": b, "i": inst, "v": value})
        self._send(src, {"t": "accepted", "b": b, "i": inst},
                   extra_delay=delay)

    def _on_accepted(self, src: int, obj: dict) -> None:
        inst = obj["i"]
        entry = self.proposed.get(inst)
        if entry is None or entry["b"] != obj["b"]:
            return
        entry["acks"].add(src)
        self._maybe_decide(inst)

    def _maybe_decide(self, inst: int) -> None:
        entry = self.proposed.get(inst)
        if entry is None or inst in self.decided:
            return
        if len(entry["acks"]) >= self.majority():
            value = entry["v"]
            del self.proposed[inst]
            self._decide(inst, value, broadcast=True)

    def _decide(self, inst: int, value, broadcast: bool) -> None:
        if inst in self.decided:
            return
        self.decided[inst] = value
        self._volatile_log_bytes += len(json.dumps(value, sort_keys=True))
        delay = self._durable({"t": "decide", "i": inst, "v": value})
        if broadcast:
            self._bcast({"t": "decided", "i": inst, "v": value},
                        extra_delay=delay)
        self._execute_ready()

    def _on_decided(self, src: int, inst: int, value) -> None:
        self._note_top(src, inst)
        if inst <= self.exec_point or inst in self.decided:
            return
        ahead = [i for i in self.decided if i > self.exec_point]
        if len(ahead) >= self.p("in_queue_size"):
            self.node.metrics.incr("app.out_of_context_dropped")
            return
        self._decide(inst, value, broadcast=False)
        self._maybe_catch_up(src)

    # -- execution -----------------------------------------------------------------------------------

    def _resolve_value(self, value):
        if isinstance(value, dict) and "digest" in value:
            return self.batch_store.get(value["digest"])
        return value

    def _execute_ready(self) -> None:
        while True:
            value = self.decided.get(self.exec_point + 1)
            if value is None:
                break
            resolved = self._resolve_value(value)
            if resolved is None:
                self._fetch_batch_data(value["digest"])
                break
            inst = self.exec_point + 1
            batch = Batch.from_wire(resolved)
            for r in batch.requests:
                self._execute_request(r)
            self.exec_point = inst
            self.progress_time = self.clock.now
            self.executed_log.append((inst, batch.digest()))
            self.instance_digests[inst] = batch.digest()
            self.node.metrics.incr("app.instances_executed")
            self._snapshot_checks()
        self.node.metrics.gauge("app.reply_cache_size",
                                len(self.reply_cache))
        if self.is_leader:
            self._try_propose()

    def _execute_request(self, r: Request) -> None:
        if r.kind == RECONFIG:
            self._apply_reconfig(r)
            return
        self.forwarded.pop((r.client, r.seqno), None)
        cached = self.reply_cache.get(r.client)
        if cached is not None and cached[0] >= r.seqno:
            if cached[0] == r.seqno and self.is_leader:
                self._reply_client(r, cached[1])
            return
        reply = self.service.execute(r.kind, r.payload)
        self.reply_cache[r.client] = [r.seqno, b64(reply)]
        self.node.metrics.incr("app.requests_executed")
        self.node.metrics.incr("app.executed_bytes", r.size())
        self.node.metrics.incr("host.busy_s", r.complexity)
        exec_delay = r.complexity / max(self.node.cpu_multiplier, 1e-9)
        if r.client_node >= 0:
            if exec_delay > 0:
                self.clock.schedule(exec_delay, self._reply_client, r,
                                    b64(reply))
            else:
                self._reply_client(r, b64(reply))

    # -- snapshots --------------------------------------------------------------------------------------

    def _snapshot_checks(self) -> None:
        instances_since = self.exec_point - self.snap_last
        forced_period = (self.exec_point % self.p("checkpoint_period") == 0
                         or self.exec_point %
                         self.p("global_checkpoint_period") == 0)
        decision = snapshot_policy(
            self._log_size(), self.snapshot_size or 1, instances_since,
            min_log_size=self.p("snapshot_min_log_size"),
            ask_ratio=self.p("snapshot_ask_ratio"),
            force_ratio=self.p("snapshot_force_ratio"),
            min_sampling=self.p("min_snapshot_sampling"))
        if forced_period and instances_since > 0:
            decision = "FORCE"
        if decision == "NONE":
            return
        self.node.metrics.incr("app.snapshots_" + decision.lower())
        self._take_snapshot()

    def _take_snapshot(self) -> Snapshot:
        state = self.service.snapshot()
        snap = Snapshot(self.exec_point, b64(state),
                        {c: list(v) for c, v in self.reply_cache.items()})
        snap.size = len(state) + sum(len(v[1]) + 12
                                     for v in self.reply_cache.values())
        self.snap_last = self.exec_point
        self.snapshot_size = snap.size
        self.stable_log().install_snapshot(snap)
        self._volatile_log_bytes = 0
        if self.cfg.checkpoint_to_disk:
            self.store.persist_snapshot(self.id, snap)
        for i in [i for i in self.decided if i <= snap.last_executed_instance]:
            del self.decided[i]
        for i in [i for i in self.accepted
                  if i <= snap.last_executed_instance]:
            del self.accepted[i]
        return snap

    def _install_snapshot(self, snap: Snapshot, tail: dict,
                          from_recovery: bool = False) -> None:
        if snap.last_executed_instance <= self.exec_point and \
                not from_recovery:
            return
        self.service.restore(unb64(snap.state_b64))
        self.reply_cache = {c: list(v) for c, v in snap.reply_cache.items()}
        self.exec_point = snap.last_executed_instance
        self.snap_last = snap.last_executed_instance
        self.snapshot_size = snap.size or 1
        self.progress_time = self.clock.now
        self.executed_log.append(("snapshot", snap.last_executed_instance))
        for i_s, value in tail.items():
            i = int(i_s)
            if i > self.exec_point:
                self.decided.setdefault(i, value)
        if not from_recovery:
            self.stable_log().install_snapshot(snap)
            self.node.metrics.incr("app.state_transfers")
        self._execute_ready()

    # -- catch-up ------------------------------------------------------------------------------------------

    def _note_top(self, src: int, top: int) -> None:
        if top > self.known_top:
            self.known_top = top

    def _maybe_catch_up(self, peer: int) -> None:
        top = max(self.known_top, max(self.decided, default=0))
        gap = top - self.exec_point
        if gap <= 0:
            return
        need = [i for i in range(self.exec_point + 1, top + 1)
                if i not in self.decided][:200]
        if not need:
            return
        decision = catch_up_decision(
            gap, self.p("high_mark"), exec_point=self.exec_point,
            revival_high_mark=(self.p("revival_high_mark")
                               if self.recovered else None))
        outstanding = self.catchup_outstanding
        if outstanding is not None and \
                self.now_ms() - outstanding["at_ms"] < \
                self.p("max_batch_fetch_time"):
            return
        if decision == "STATE_TRANSFER" and self.p("state_transfer"):
            for i in [i for i in self.decided if i > self.exec_point]:
                del self.decided[i]   # discard the out-of-context queue
            self.catchup_outstanding = {"need": ["snapshot"],
                                        "at_ms": self.now_ms(), "peer": peer}
            self.node.metrics.incr("app.catchup_state_transfer")
            self._send(peer, {"t": "snap_req"})
        else:
            self.catchup_outstanding = {"need": need,
                                        "at_ms": self.now_ms(), "peer": peer}
            self.node.metrics.incr("app.catchup_nack_range")
            self._send(peer, {"t": "catchup_req", "need": need})

    def _on_catchup_req(self, src: int, obj: dict) -> None:
        have = {}
        below_snapshot = False
        for i in obj["need"]:
            if i in self.decided:
                have[str(i)] = self.decided[i]
            elif i <= self.snap_last:
                below_snapshot = True
        if below_snapshot and self.p("state_transfer"):
            self._send_snapshot(src)
        if have:
            self._send(src, {"t": "catchup_rsp", "decided": have})

    def _on_catchup_rsp(self, src: int, obj: dict) -> None:
        self.catchup_outstanding = None
        for i_s, value in obj["decided"].items():
            i = int(i_s)
            if i > self.exec_point and i not in self.decided:
                self._decide(i, value, broadcast=False)
        self._maybe_catch_up(src)

    def _send_snapshot(self, dst: int) -> None:
        snap = self.stable_log().snapshot
        if snap is None or snap.last_executed_instance < self.exec_point:
            snap = self._take_snapshot()
        # the tail is bounded by the transfer buffer; the rest is re-fetched
        budget = self.p("state_transfer_buffer_size")
        tail = {}
        used = 0
        for i in sorted(i for i in self.decided
                        if i > snap.last_executed_instance):
            blob = json.dumps(self.decided[i], sort_keys=True)
            if used + len(blob) > budget and tail:
                break
            used += len(blob)
            tail[str(i)] = self.decided[i]
        self._send(dst, {"t": "snap_rsp", "snapshot": snap.to_wire(),
                         "tail": tail, "top": self.exec_point,
                         "membership": self.membership,
                         "view_number": self.view_number,
                         "ballot": self.ballot})

    def _on_snap_req(self, src: int) -> None:
        self._send_snapshot(src)

    def _on_snap_rsp(self, src: int, obj: dict) -> None:
        self.catchup_outstanding = None
        if obj.get("membership"):
            self._adopt_membership(obj["membership"], obj["view_number"])
        if obj.get("ballot", 0) > self.ballot:
            self._follow(obj["ballot"])
        self._install_snapshot(Snapshot.from_wire(obj["snapshot"]),
                               obj.get("tail", {}))
        if not self.active and self.id in self.membership:
            self.active = True
        self.last_leader_heard_ms = self.now_ms()

    # -- leader election -----------------------------------------------------------------------------------

    def _follow(self, ballot: int) -> None:
        self.ballot = ballot
        self.prepared = False
        self.prepare_state = None

    def _on_heartbeat(self, src: int, obj: dict) -> None:
        b = obj["b"]
        if b < self.ballot:
            return
        if b > self.ballot:
            self._follow(b)
        self.promised = max(self.promised, b)
        self.last_leader_heard_ms = self.now_ms()
        self._note_top(src, obj.get("top", 0))
        if obj.get("top", 0) > self.exec_point:
            self._maybe_catch_up(src)

    def _advance_ballot(self) -> None:
        suspected = self.leader_of(self.ballot)
        if suspected != self.id:
            self._notify({"kind": "SUSPECT", "node": suspected})
        b = self.ballot + 1
        members = sorted(self.membership)
        while members[b % len(members)] != self.id:
            b += 1
        self.ballot = b
        self.promised = b
        self.prepared = False
        low = self.exec_point + 1
        self.prepare_state = {"b": b, "low": low, "promises": {}}
        delay = self._durable({"t": "promise", "b": b})
        self.node.metrics.incr("app.ballot_advances")
        own = self._promise_payload(low)
        self.prepare_state["promises"][self.id] = own
        self._bcast({"t": "prepare", "b": b, "low": low}, extra_delay=delay)
        self.last_leader_heard_ms = self.now_ms()
        self._check_prepared()

    def _promise_payload(self, low: int) -> dict:
        accepted = {str(i): e for i, e in self.accepted.items() if i >= low}
        decided = {str(i): v for i, v in self.decided.items() if i >= low}
        return {"accepted": accepted, "decided": decided,
                "exec": self.exec_point}

    def _on_prepare(self, src: int, obj: dict) -> None:
        b = obj["b"]
        if b <= self.promised and not (b == self.promised and
                                       self.leader_of(b) == src):
            self._send(src, {"t": "reject", "b": self.promised})
            return
        self.promised = b
        if b > self.ballot:
            self._follow(b)
        self.last_leader_heard_ms = self.now_ms()
        delay = self._durable({"t": "promise", "b": b})
        payload = self._promise_payload(obj["low"])
        payload.update({"t": "promise", "b": b})
        self._send(src, payload, extra_delay=delay)

    def _on_promise(self, src: int, obj: dict) -> None:
        st = self.prepare_state
        if st is None or obj["b"] != st["b"]:
            return
        st["promises"][src] = obj
        self._check_prepared()

    def _on_reject(self, src: int, obj: dict) -> None:
        if obj["b"] > self.ballot:
            self._follow(obj["b"])
            self.promised = max(self.promised, obj["b"])
            self.last_leader_heard_ms = self.now_ms()

    def _check_prepared(self) -> None:
        st = self.prepare_state
        if st is None or len(st["promises"]) < self.majority():
            return
        b, low = st["b"], st["low"]
        self.prepare_state = None
        self.prepared = True
        self._notify({"kind": "LEADER_CHANGE", "leader": self.id,
                      "ballot": b})
        # adopt decided values and the highest-ballot accepted values
        merged_decided = {}
        best_accepted = {}
        for payload in st["promises"].values():
            for i_s, v in payload["decided"].items():
                merged_decided[int(i_s)] = v
            for i_s, e in payload["accepted"].items():
                i = int(i_s)
                cur = best_accepted.get(i)
                if cur is None or e["b"] > cur["b"]:
                    best_accepted[i] = e
        for i, v in sorted(merged_decided.items()):
            if i not in self.decided:
                self._decide(i, v, broadcast=True)
        top = max([low - 1] + list(best_accepted) + list(merged_decided))
        for i in range(low, top + 1):
            if i in self.decided:
                continue
            entry = best_accepted.get(i)
            value = entry["v"] if entry is not None else \
                make_batch([]).to_wire()
            self.proposed[i] = {"b": b, "v": value, "acks": {self.id},
                                "at": self.now_ms()}
            self.accepted[i] = {"b": b, "v": value}
            delay = self._durable({"t": "accept", "b": b, "i": i,
                                   "v": value})
            self._bcast({"t": "accept", "b": b, "i": i, "v": value},
                        extra_delay=delay)
        self._send_heartbeat()
        self._execute_ready()
        self._try_propose()

    # -- timers ----------------------------------------------------------------------------------------------

    def _arm_heartbeat(self) -> None:
        def beat():
            if self.is_leader:
                self._send_heartbeat()
            self.node.stack.set_timer(self.p("fd_send_to") / 1000.0, beat)
        self.node.stack.set_timer(self.p("fd_send_to") / 1000.0, beat)

    def _send_heartbeat(self) -> None:
        self._bcast({"t": "hb", "b": self.ballot,
                     "top": max([self.exec_point] + list(self.decided)),
                     "exec": self.exec_point})

    def _arm_monitor(self) -> None:
        def check():
            if self.active and not self.is_leader and \
                    self.leader_of(self.ballot) != self.id:
                action = leader_monitor(self.last_leader_heard_ms,
                                        self.now_ms(),
                                        self.p("fd_suspect_to"))
                stuck = any(self.now_ms() - t > self.p("propose_timeout")
                            for t in self.forwarded.values())
                if action == "ADVANCE_BALLOT" or stuck:
                    self.forwarded.clear()
                    self._advance_ballot()
            elif self.active and self.leader_of(self.ballot) == self.id \
                    and not self.prepared and self.prepare_state is None:
                self._advance_ballot()
            self.node.stack.set_timer(self.p("fd_suspect_to") / 2000.0,
                                      check)
        self.node.stack.set_timer(self.p("fd_suspect_to") / 2000.0, check)

    def _arm_retransmit(self) -> None:
        def tick():
            now = self.now_ms()
            if self.is_leader:
                for i, entry in sorted(self.proposed.items()):
                    if now - entry["at"] >= self.p("retransmit_timeout"):
                        entry["at"] = now
                        self.node.metrics.incr("app.retransmissions")
                        self._bcast({"t": "accept", "b": entry["b"], "i": i,
                                     "v": entry["v"]})
            elif self.prepare_state is not None:
                st = self.prepare_state
                self._bcast({"t": "prepare", "b": st["b"], "low": st["low"]})
            out = self.catchup_outstanding
            if out is not None and now - out["at_ms"] >= \
                    self.p("max_batch_fetch_time"):
                self.catchup_outstanding = None
                peers = [m for m in self.membership if m != self.id]
                if peers:
                    nxt = peers[(peers.index(out["peer"]) + 1) % len(peers)] \
                        if out["peer"] in peers else peers[0]
                    self._maybe_catch_up(nxt)
            if self.forward_queue and not self.is_leader:
                oldest = self.forward_queue[0][0]
                if now - oldest >= self.p("forward_max_batch_delay"):
                    self._flush_forward()
            self._execute_ready()  # re-drives a pending batch-data fetch
            self.node.stack.set_timer(self.p("retransmit_timeout") / 1000.0,
                                      tick)
        self.node.stack.set_timer(self.p("retransmit_timeout") / 1000.0,
                                  tick)

    def _fetch_batch_data(self, digest: str) -> None:
        now = self.now_ms()
        last = self._batch_fetch_at.get(digest, -1e18)
        if now - last < self.p("max_batch_fetch_time"):
            return
        self._batch_fetch_at[digest] = now
        leader = self.leader_of(self.ballot)
        if leader != self.id:
            self._send(leader, {"t": "batch_req", "d": digest})

    # -- reconfiguration ----------------------------------------------------------------------------------------

    def reconfigure_view(self, credential, action: str, node: int) -> dict:
        """Privileged membership change; only the TTP credential may call."""
        if credential != self.p("ttp_id"):
            raise ReconfigError("UNAUTHORIZED")
        if action == "REMOVE" and node not in self.membership:
            raise ReconfigError("UNKNOWN_NODE")
        if action == "ADD" and node not in self.cfg.all_process_ids():
            raise ReconfigError("UNKNOWN_NODE")
        if action == "ADD" and node in self.membership:
            raise ReconfigError("UNKNOWN_NODE")
        if not self.is_leader:
            raise ReconfigError("NOT_LEADER")
        marker = Request(client=-1, seqno=self.view_number + 1,
                         kind=RECONFIG,
                         payload=json.dumps(
                             {"action": action, "node": node},
                             sort_keys=True).encode())
        self.pending_reconfig.append(marker)
        self._try_propose()
        return {"status": "SCHEDULED", "view_number": self.view_number + 1}

    def _apply_reconfig(self, r: Request) -> None:
        change = json.loads(r.payload.decode())
        members = list(self.membership)
        if change["action"] == "ADD" and change["node"] not in members:
            members.append(change["node"])
        elif change["action"] == "REMOVE" and change["node"] in members:
            members.remove(change["node"])
        self._adopt_membership(sorted(members), self.view_number + 1)
        self.node.metrics.incr("app.view_changes")
        if change["action"] == "ADD" and self.is_leader:
            self._send_snapshot(change["node"])
        if change["action"] == "REMOVE" and change["node"] == self.id:
            self.active = False

    def _adopt_membership(self, members: list, view_number: int) -> None:
        if view_number <= self.view_number and \
                members == self.membership:
            return
        self.membership = list(members)
        self.view_number = view_number
        if self.id in members and not self.active:
            self.active = True
            self.last_leader_heard_ms = self.now_ms()
        if self.node.stack is not None and members:
            view = View(ViewId(view_number + 1, sorted(members)[0]),
                        tuple(sorted(members)))
            self.node.stack.send_down(StackEvent.view_change(view))

    # -- introspection -------------------------------------------------------------------------------------------

    def executed_digest(self) -> str:
        blob = json.dumps(self.executed_log, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
