"""Deterministic discrete-event network simulator.

A single :class:`SimClock` drives everything. The :class:`Network` applies
the four-component nodal delay to every packet and injects loss,
corruption, duplication, reordering, partitions and scheduled disconnects.
Each (link, impairment) pair draws from its own seeded substream, so
enabling one impairment never perturbs another's draws.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import GcsimError, NodeId


class LinkDownError(GcsimError):
    """Send attempted while the link is disconnected or partitioned."""


class OverlappingGroupsError(GcsimError):
    """Partition groups must be disjoint."""


class EmptySampleError(GcsimError):
    """jitter_stats needs at least one sample."""


@dataclass
class DisconnectInterval:
    """Link outage window [start, end). None endpoints match any node."""

    start: float
    end: float
    src: Optional[NodeId] = None
    dst: Optional[NodeId] = None

    def covers(self, t: float, src: NodeId, dst: NodeId) -> bool:
        if not (self.start <= t < self.end):
            return False
        return (self.src is None or self.src == src) and \
               (self.dst is None or self.dst == dst)


@dataclass
class NetworkProfile:
    data_rate: float = 10e6              # bits / second
    propagation_distance: float = 0.0    # meters
    propagation_speed: float = 2e8       # meters / second
    processing_delay: float = 0.0        # seconds
    queue_capacity: Optional[int] = None  # packets; None = unbounded
    loss_rate: float = 0.0
    corruption_rate: float = 0.0
    duplication_rate: float = 0.0
    reorder_rate: float = 0.0
    mtu: int = 1492                      # bytes
    disconnect_schedule: list = field(default_factory=list)

    def validate(self) -> None:
        for name in ("loss_rate", "corruption_rate", "duplication_rate",
                     "reorder_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.data_rate <= 0:
            raise ValueError("data_rate must be > 0")
        if self.propagation_speed <= 0:
            raise ValueError("propagation_speed must be > 0")
        if self.mtu < 64:
            raise ValueError("mtu must be >= 64 bytes")


def nodal_delay(profile: NetworkProfile, packet_size_bits: float,
                queue_length: int) -> float:
    """Processing + queuing + transmission + propagation delay in seconds.

    transmission = size / rate
    queuing      = transmission * queue_length
    propagation  = distance / speed
    """
    transmission = packet_size_bits / profile.data_rate
    queuing = transmission * queue_length
    propagation = profile.propagation_distance / profile.propagation_speed
    return profile.processing_delay + queuing + transmission + propagation


def jitter_stats(deliveries) -> tuple:
    """Mean and population variance of (receive - send) over samples."""
    samples = [recv - send for send, recv in deliveries]
    if not samples:
        raise EmptySampleError("no delivery samples")
    mean = sum(samples) / len(samples)
    var = sum((x - mean) ** 2 for x in samples) / len(samples)
    return mean, var


class TimerHandle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimClock:
    """Virtual clock with a deterministic event queue.

    Ties at the same timestamp fire in insertion order.
    """

    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = 0

    def schedule(self, delay: float, fn: Callable, *args) -> TimerHandle:
        return self.schedule_at(self.now + delay, fn, *args)

    def schedule_at(self, t: float, fn: Callable, *args) -> TimerHandle:
        if t < self.now:
            t = self.now
        handle = TimerHandle()
        heapq.heappush(self._heap, (t, self._seq, handle, fn, args))
        self._seq += 1
        return handle

    def pending(self) -> int:
        return sum(1 for (_, _, h, _, _) in self._heap if not h.cancelled)

    def step(self) -> bool:
        """Run the next event. Returns False when the queue is empty."""
        while self._heap:
            t, _, handle, fn, args = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now = t
            fn(*args)
            return True
        return False

    def run_until(self, t: float, between_events: Optional[Callable] = None):
        """Run all events scheduled up to and including time t."""
        while self._heap:
            if between_events is not None:
                between_events()
            head = self._peek()
            if head is None or head > t:
                break
            self.step()
        if self.now < t:
            self.now = t

    def run(self):
        while self.step():
            pass

    def _peek(self) -> Optional[float]:
        while self._heap:
            t, _, handle, _, _ = self._heap[0]
            if handle.cancelled:
                heapq.heappop(self._heap)
                continue
            return t
        return None


@dataclass
class PartitionWindow:
    start: float
    end: float
    groups: list  # list of frozensets

    def side(self, node: NodeId):
        for i, g in enumerate(self.groups):
            if node in g:
                return i
        return -1  # implicit rest-group


class Counters(dict):
    """String-keyed numeric counters with default 0."""

    def incr(self, key: str, n: float = 1) -> None:
        self[key] = self.get(key, 0) + n


_REST = -1


class Network:
    """Full mesh of simulated links between node endpoints.

    Endpoints are (node, role) pairs; a node may expose several roles
    (e.g. a replica listens for peer and for client traffic separately).
    """

    def __init__(self, clock: SimClock, profile: NetworkProfile,
                 seed: int = 0, trace: Optional[Callable] = None):
        profile.validate()
        self.clock = clock
        self.profile = profile
        self.seed = seed
        self.trace = trace
        self._handlers = {}          # (node, role) -> callable(src_ep, dst_ep, frame)
        self._links = {}             # (src, dst) -> link state dict
        self._rngs = {}
        self._partitions = []
        self.counters = Counters()
        self.node_counters = {}      # node -> Counters
        self.delay_samples = {}      # dst node -> [(send_t, recv_t)], capped

    # -- wiring -----------------------------------------------------------

    def attach(self, node: NodeId, role: str, handler: Callable) -> None:
        self._handlers[(node, role)] = handler
        self.node_counters.setdefault(node, Counters())

    def detach(self, node: NodeId) -> None:
        for key in [k for k in self._handlers if k[0] == node]:
            del self._handlers[key]

    def node_stats(self, node: NodeId) -> Counters:
        return self.node_counters.setdefault(node, Counters())

    # -- topology control --------------------------------------------------

    def partition(self, groups: Iterable, start: float, end: float) -> None:
        sets = [frozenset(g) for g in groups]
        seen = set()
        for g in sets:
            if g & seen:
                raise OverlappingGroupsError("partition groups overlap")
            seen |= g
        if start >= end:
            raise ValueError("partition start must precede end")
        self._partitions.append(PartitionWindow(start, end, sets))

    def link_up(self, src: NodeId, dst: NodeId, t: Optional[float] = None) -> bool:
        t = self.clock.now if t is None else t
        for iv in self.profile.disconnect_schedule:
            if iv.covers(t, src, dst):
                return False
        for pw in self._partitions:
            if pw.start <= t < pw.end and pw.side(src) != pw.side(dst):
                return False
        return True

    # -- transmission ------------------------------------------------------

    def send(self, src_ep, dst_ep, frame: bytes) -> None:
        """Transmit one frame; raises LinkDownError when the link is cut."""
        src, dst = src_ep[0], dst_ep[0]
        if not self.link_up(src, dst):
            self.counters.incr("link_down")
            self.node_stats(src).incr("link_down")
            self._trace("LINK_DOWN", src, dst, len(frame))
            raise LinkDownError(f"{src}->{dst} down at {self.clock.now}")
        self.counters.incr("transmissions")
        self.node_stats(src).incr("transmissions")
        self._transmit(src_ep, dst_ep, frame)

    def send_multicast(self, src_ep, dst_nodes, frame: bytes,
                       dst_role: str = "gcs") -> None:
        """One transmission fanned out by the medium (IP-multicast analog).

        Unreachable destinations are counted, not raised.
        """
        src = src_ep[0]
        self.counters.incr("transmissions")
        self.node_stats(src).incr("transmissions")
        for dst in dst_nodes:
            if dst == src:
                continue
            if not self.link_up(src, dst):
                self.counters.incr("link_down")
                self.node_stats(src).incr("link_down")
                self._trace("LINK_DOWN", src, dst, len(frame))
                continue
            self._transmit(src_ep, (dst, dst_role), frame)

    def _transmit(self, src_ep, dst_ep, frame: bytes) -> None:
        src, dst = src_ep[0], dst_ep[0]
        now = self.clock.now
        stats = self.node_stats(src)
        self.counters.incr("sent")
        stats.incr("sent")
        self.counters.incr("sent_bytes", len(frame))

        nfrags = max(1, math.ceil(len(frame) / self.profile.mtu))
        loss_rng = self._rng(src, dst, "loss")
        lost = any(loss_rng.random() < self.profile.loss_rate
                   for _ in range(nfrags))
        if lost:
            self.counters.incr("lost")
            stats.incr("lost")
            self._trace("DROP", src, dst, len(frame))
            return

        corr_rng = self._rng(src, dst, "corrupt")
        corrupted = corr_rng.random() < self.profile.corruption_rate
        if corrupted and frame:
            idx = corr_rng.randrange(len(frame))
            frame = frame[:idx] + bytes([frame[idx] ^ 0xFF]) + frame[idx + 1:]
            self.counters.incr("corrupted")
            stats.incr("corrupted")

        duplicated = self._rng(src, dst, "dup").random() < self.profile.duplication_rate
        reordered = self._rng(src, dst, "reorder").random() < self.profile.reorder_rate

        link = self._links.setdefault((src, dst), {
            "departures": [], "swap_waiting": None, "last_delivery": 0.0,
        })
        departures = link["departures"]
        departures[:] = [d for d in departures if d > now]
        qlen = len(departures)
        if self.profile.queue_capacity is not None and \
                qlen >= self.profile.queue_capacity:
            self.counters.incr("queue_dropped")
            stats.incr("queue_dropped")
            self._trace("QUEUE_DROP", src, dst, len(frame))
            return
        delay = nodal_delay(self.profile, len(frame) * 8, qlen)
        propagation = (self.profile.propagation_distance /
                       self.profile.propagation_speed)
        departures.append(now + delay - propagation)
        # the queuing formula approximates waiting with this packet's own
        # transmission time; clamp to keep per-link delivery FIFO
        delivery_t = max(now + delay, link["last_delivery"])
        link["last_delivery"] = delivery_t

        handle = self.clock.schedule_at(delivery_t, self._deliver,
                                        src_ep, dst_ep, frame, now)
        if link["swap_waiting"] is not None:
            prev_handle, prev_t, prev_args = link["swap_waiting"]
            link["swap_waiting"] = None
            if not prev_handle.cancelled:
                prev_handle.cancel()
                handle.cancel()
                self.clock.schedule_at(delivery_t, self._deliver, *prev_args)
                self.clock.schedule_at(prev_t, self._deliver,
                                       src_ep, dst_ep, frame, now)
                self.counters.incr("reordered")
                stats.incr("reordered")
        elif reordered:
            link["swap_waiting"] = (handle, delivery_t,
                                    (src_ep, dst_ep, frame, now))

        if duplicated:
            self.counters.incr("duplicated")
            stats.incr("duplicated")
            self.clock.schedule_at(delivery_t, self._deliver,
                                   src_ep, dst_ep, frame, now)

    def _deliver(self, src_ep, dst_ep, frame: bytes,
                 sent_at: Optional[float] = None) -> None:
        handler = self._handlers.get(dst_ep)
        if handler is None:
            self.counters.incr("dead_letter")
            self._trace("DEAD", src_ep[0], dst_ep[0], len(frame))
            return
        self.counters.incr("delivered")
        self.node_stats(dst_ep[0]).incr("delivered")
        if sent_at is not None:
            samples = self.delay_samples.setdefault(dst_ep[0], [])
            samples.append((sent_at, self.clock.now))
            if len(samples) > 1000:
                samples.pop(0)
        self._trace("DELIVER", src_ep[0], dst_ep[0], len(frame))
        handler(src_ep, dst_ep, frame)

    # -- internals ----------------------------------------------------------

    def _rng(self, src: NodeId, dst: NodeId, kind: str) -> random.Random:
        key = (src, dst, kind)
        rng = self._rngs.get(key)
        if rng is None:
            rng = random.Random(f"{self.seed}|{src}>{dst}|{kind}")
            self._rngs[key] = rng
        return rng

    def _trace(self, kind: str, src: NodeId, dst: NodeId, nbytes: int) -> None:
        if self.trace is not None:
            self.trace({"t": self.clock.now, "kind": kind,
                        "src": src, "dst": dst, "bytes": nbytes})

    def loss_ratio(self) -> float:
        sent = self.counters.get("sent", 0)
        return self.counters.get("lost", 0) / sent if sent else 0.0
