"""Transport-family layers: datagram and connection transports with message
bundling, plus fragmentation and compression.

Transports sit at the bottom of the stack: they encode messages into wire
frames, bundle small ones, resolve multicast destinations against the
current view and hand frames to the simulated network. Multicast messages
are looped back up the local stack so the sender delivers its own traffic
like everyone else.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

from ..core import (
    CorruptFrameError,
    EventKind,
    GcsimError,
    Message,
    MessageFlag,
    StackEvent,
    decode_message,
    encode_message,
)
from ..params import ControlCategory as C
from ..params import ParameterDescriptor as P
from ..params import ValueType as V
from ..simnet import LinkDownError
from ..stack import Layer, register_layer

MCAST_KEY = "mcast"


# -- bundling ----------------------------------------------------------------

@dataclass
class BundlerState:
    max_bundle_size: int
    max_bundle_timeout_ms: float
    enabled: bool = True
    pending: list = field(default_factory=list)      # (message, size)
    pending_bytes: int = 0
    deadline_ms: Optional[float] = None


def _drain(st: BundlerState) -> list:
    bundle = [m for m, _ in st.pending]
    st.pending = []
    st.pending_bytes = 0
    st.deadline_ms = None
    return bundle


def bundle_enqueue(st: BundlerState, m: Message, size: int,
                   now_ms: float) -> list:
    """Queue a message; returns the list of bundles flushed by this call.

    A message larger than max_bundle_size bypasses bundling and is flushed
    alone, after any pending bundle.
    """
    if not st.enabled:
        return [[m]]
    flushed = []
    if size > st.max_bundle_size:
        if st.pending:
            flushed.append(_drain(st))
        flushed.append([m])
        return flushed
    if st.pending and st.pending_bytes + size > st.max_bundle_size:
        flushed.append(_drain(st))
    st.pending.append((m, size))
    st.pending_bytes += size
    if st.deadline_ms is None:
        st.deadline_ms = now_ms + st.max_bundle_timeout_ms
    return flushed


def bundle_timeout_flush(st: BundlerState, now_ms: float) -> Optional[list]:
    if st.deadline_ms is not None and now_ms >= st.deadline_ms and st.pending:
        return _drain(st)
    return None


def encode_bundle(frames: list) -> bytes:
    parts = [struct.pack("<H", len(frames))]
    for f in frames:
        parts.append(struct.pack("<I", len(f)))
        parts.append(f)
    return b"".join(parts)


def decode_bundle(b: bytes) -> list:
    try:
        (count,) = struct.unpack_from("<H", b, 0)
        off = 2
        frames = []
        for _ in range(count):
            (flen,) = struct.unpack_from("<I", b, off)
            off += 4
            if off + flen > len(b):
                raise CorruptFrameError("bundle truncated")
            frames.append(b[off:off + flen])
            off += flen
        if off != len(b):
            raise CorruptFrameError("trailing bundle bytes")
        return frames
    except struct.error as exc:
        raise CorruptFrameError(str(exc)) from exc


class _Stage:
    """Service-rate stage: bounded in-flight work with a per-message cost.

    Thread-pool parameters are modeled as the pool's observable effect:
    added processing latency and a cap on concurrently serviced messages.
    """

    def __init__(self, clock, max_inflight, service_time_s):
        self.clock = clock
        self.max_inflight = max_inflight
        self.service_time_s = service_time_s
        self.inflight = 0
        self.queue = []
        self.busy_time = 0.0

    def submit(self, fn) -> None:
        if self.service_time_s <= 0:
            fn()
            return
        if self.inflight < self.max_inflight:
            self._admit(fn)
        else:
            self.queue.append(fn)

    def _admit(self, fn) -> None:
        self.inflight += 1
        self.busy_time += self.service_time_s
        self.clock.schedule(self.service_time_s, self._complete, fn)

    def _complete(self, fn) -> None:
        self.inflight -= 1
        fn()
        if self.queue and self.inflight < self.max_inflight:
            self._admit(self.queue.pop(0))


class TransportBase(Layer):
    """Common behavior of both transports: bundling, framing, loopback."""

    is_transport = True
    role = "gcs"

    def __init__(self):
        super().__init__()
        self.members = []
        self._bundlers = {}
        self._bundle_timers = {}
        self._stages = {}

    def start(self):
        self.members = list(self.host.initial_members)
        self.host.network.attach(self.node_id, self.role, self._on_frame)
        clock = self.host.clock
        service = self.param("processing_time_ms") / 1000.0
        cpu = getattr(self.host, "cpu_multiplier", 1.0)
        service = service / cpu if cpu > 0 else service
        self._stages = {
            "regular": _Stage(clock, 1024, service),
            "oob": _Stage(clock, max(1, self.param("oob_thread_pool_max_threads")),
                          service),
            "internal": _Stage(clock, max(1, self.param("internal_thread_pool_max_threads")),
                               service),
        }

    def stop(self):
        self.host.network.detach(self.node_id)

    def on_view(self, view):
        self.members = list(view.members)

    # -- down path ---------------------------------------------------------

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
            return  # absorbed: the view updates the multicast target set
        if evt.kind != EventKind.MSG_DOWN:
            return  # other control events are absorbed at the bottom
        m = evt.body
        if m.dest == self.node_id:
            self._loopback(m)
            return
        if m.is_multicast():
            self._loopback(m)
        if MessageFlag.OOB in m.flags or not self.param("enable_bundling"):
            self._transmit_bundle(self._dest_key(m), [m])
            return
        key = self._dest_key(m)
        st = self._bundlers.get(key)
        if st is None:
            st = BundlerState(self.param("max_bundle_size"),
                              self.param("max_bundle_timeout"))
            self._bundlers[key] = st
        st.max_bundle_size = self.param("max_bundle_size")
        st.max_bundle_timeout_ms = self.param("max_bundle_timeout")
        frame_size = len(encode_message(m))
        for bundle in bundle_enqueue(st, m, frame_size, self.now_ms()):
            self._transmit_bundle(key, bundle)
        self._arm_bundle_timer(key, st)

    def _arm_bundle_timer(self, key, st: BundlerState):
        if st.deadline_ms is None or key in self._bundle_timers:
            return

        def fire():
            self._bundle_timers.pop(key, None)
            bundle = bundle_timeout_flush(st, self.now_ms())
            if bundle:
                self._transmit_bundle(key, bundle)
            self._arm_bundle_timer(key, st)

        delay_s = max(0.0, (st.deadline_ms - self.now_ms()) / 1000.0)
        self._bundle_timers[key] = self.set_timer(delay_s, fire)

    def _dest_key(self, m: Message):
        return MCAST_KEY if m.is_multicast() else m.dest

    def _loopback(self, m: Message):
        copy = m.copy()
        self.set_timer(0.0, lambda: self.up(StackEvent.msg_up(copy)))

    def _transmit_bundle(self, key, msgs: list) -> None:
        frame = encode_bundle([encode_message(m) for m in msgs])
        if key == MCAST_KEY:
            peers = [p for p in self.members if p != self.node_id]
            self._send_multicast(peers, frame)
        else:
            self._send_unicast(key, frame)

    # -- up path -------------------------------------------------------------

    def _on_frame(self, src_ep, dst_ep, frame: bytes) -> None:
        try:
            inner = decode_bundle(frame)
        except CorruptFrameError:
            self.metric("app.corrupt_frames")
            return
        for raw in inner:
            try:
                m = decode_message(raw)
            except CorruptFrameError:
                self.metric("app.corrupt_frames")
                continue
            if m.dest is not None and m.dest != self.node_id:
                continue
            stage = "regular"
            if MessageFlag.OOB in m.flags:
                stage = "oob"
            elif MessageFlag.INTERNAL in m.flags:
                stage = "internal"
            self._stages[stage].submit(
                lambda m=m: self.up(StackEvent.msg_up(m)))

    # subclasses implement the actual link sends
    def _send_unicast(self, dst, frame: bytes) -> None:
        raise NotImplementedError

    def _send_multicast(self, peers, frame: bytes) -> None:
        raise NotImplementedError


_TP_COMMON = (
    P("enable_batching", V.BOOLEAN, True, C.BATCHING_BUNDLING,
      origin="jgroups:TP.enable_batching"),
    P("enable_bundling", V.BOOLEAN, True, C.BATCHING_BUNDLING,
      origin="jgroups:TP.enable_bundling"),
    P("max_bundle_size", V.BYTES, 1300, C.BATCHING_BUNDLING, unit="bytes",
      lo=64, origin="jgroups:TP.max_bundle_size"),
    P("max_bundle_timeout", V.DURATION, 20, C.BATCHING_BUNDLING, unit="ms",
      lo=0, origin="jgroups:TP.max_bundle_timeout"),
    P("time_service_interval", V.DURATION, 1000, C.INTERVALS, unit="ms",
      lo=0, origin="jgroups:TP.time_service_interval"),
    P("internal_thread_pool_enabled", V.BOOLEAN, True, C.WORKER,
      origin="jgroups:TP.internal_thread_pool_enabled"),
    P("oob_thread_pool_enabled", V.BOOLEAN, True, C.WORKER,
      origin="jgroups:TP.oob_thread_pool_enabled"),
    P("internal_thread_pool_min_threads", V.INTEGER, 2, C.WORKER, lo=1,
      origin="jgroups:TP.internal_thread_pool_min_threads"),
    P("internal_thread_pool_max_threads", V.INTEGER, 4, C.WORKER, lo=1,
      origin="jgroups:TP.internal_thread_pool_max_threads"),
    P("oob_thread_pool_min_threads", V.INTEGER, 2, C.WORKER, lo=1,
      origin="jgroups:TP.oob_thread_pool_min_threads"),
    P("oob_thread_pool_max_threads", V.INTEGER, 4, C.WORKER, lo=1,
      origin="jgroups:TP.oob_thread_pool_max_threads"),
    P("timer_thread_pool_min_threads", V.INTEGER, 2, C.WORKER, lo=1,
      origin="jgroups:TP.timer_thread_pool_min_threads"),
    P("timer_thread_pool_max_threads", V.INTEGER, 4, C.WORKER, lo=1,
      origin="jgroups:TP.timer_thread_pool_max_threads"),
    P("processing_time_ms", V.DURATION, 0, C.WORKER, unit="ms", lo=0),
)


@register_layer
class DatagramTransport(TransportBase):
    """UDP-style transport: IP multicast when enabled, frames over the MTU
    are dropped rather than fragmented."""

    name = "udp"
    DESCRIPTORS = _TP_COMMON + (
        P("ip_mcast", V.BOOLEAN, True, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:UDP.ip_mcast"),
        P("ttl", V.INTEGER, 8, C.ENVIRONMENT_EXPLOITATION, lo=1, hi=255,
          origin="jgroups:UDP.ip_ttl"),
        P("tos", V.INTEGER, 8, C.ENVIRONMENT_EXPLOITATION, lo=0, hi=255,
          origin="jgroups:UDP.tos"),
        P("mcast_recv_buf_size", V.BYTES, 500000, C.CACHES, unit="bytes",
          lo=1, origin="jgroups:UDP.mcast_recv_buf_size"),
        P("mcast_send_buf_size", V.BYTES, 100000, C.CACHES, unit="bytes",
          lo=1, origin="jgroups:UDP.mcast_send_buf_size"),
        P("ucast_recv_buf_size", V.BYTES, 64000, C.CACHES, unit="bytes",
          lo=1, origin="jgroups:UDP.ucast_recv_buf_size"),
        P("ucast_send_buf_size", V.BYTES, 100000, C.CACHES, unit="bytes",
          lo=1, origin="jgroups:UDP.ucast_send_buf_size"),
    )

    def _check_mtu(self, frame: bytes) -> bool:
        if len(frame) > self.host.network.profile.mtu:
            self.metric("app.oversize_dropped")
            return False
        return True

    def _send_unicast(self, dst, frame):
        if not self._check_mtu(frame):
            return
        try:
            self.host.network.send((self.node_id, self.role),
                                   (dst, self.role), frame)
        except LinkDownError:
            pass  # datagrams into a dead link are silently lost

    def _send_multicast(self, peers, frame):
        if not peers or not self._check_mtu(frame):
            return
        if self.param("ip_mcast"):
            self.host.network.send_multicast((self.node_id, self.role),
                                             peers, frame, dst_role=self.role)
        else:
            for dst in peers:
                self._send_unicast(dst, frame)


@register_layer
class ConnTransport(TransportBase):
    """TCP-style transport: per-peer connections with reconnect-on-failure
    and idle reaping. Multicast costs one transmission per peer."""

    name = "tcp"
    DESCRIPTORS = _TP_COMMON + (
        P("conn_expire_time", V.DURATION, 60000, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:TCP.conn_expire_time"),
        P("reaper_interval", V.DURATION, 0, C.INTERVALS, unit="ms", lo=0,
          origin="jgroups:TCP.reaper_interval"),
        P("recv_buf_size", V.BYTES, 150000, C.CACHES, unit="bytes", lo=1,
          origin="jgroups:TCP.recv_buf_size"),
        P("send_buf_size", V.BYTES, 150000, C.CACHES, unit="bytes", lo=1,
          origin="jgroups:TCP.send_buf_size"),
        P("send_queue_size", V.INTEGER, 128, C.CACHES, lo=1,
          origin="jgroups:TCP.send_queue_size"),
        P("sock_conn_timeout", V.DURATION, 2000, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:TCP.sock_conn_timeout"),
        P("tcp_nodelay", V.BOOLEAN, True, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:TCP.tcp_nodelay"),
        P("use_send_queues", V.BOOLEAN, True, C.CACHES,
          origin="jgroups:TCP.use_send_queues"),
        P("max_read_batch_size", V.INTEGER, 10, C.BATCHING_BUNDLING, lo=1,
          origin="jgroups:TCP_NIO2.max_read_batch_size"),
        P("max_send_buffers", V.INTEGER, 5, C.CACHES, lo=1,
          origin="jgroups:TCP_NIO2.max_send_buffers"),
        P("reconnect_timeout", V.DURATION, 1000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jpaxos:TCP_RECONNECT_TIMEOUT"),
    )

    def __init__(self):
        super().__init__()
        self._conns = {}

    def start(self):
        super().start()
        interval = self.param("reaper_interval")
        if interval > 0:
            self._schedule_reaper(interval)

    def _schedule_reaper(self, interval_ms):
        def reap():
            expire = self.param("conn_expire_time")
            for peer, conn in list(self._conns.items()):
                if expire > 0 and self.now_ms() - conn["last_used"] >= expire:
                    del self._conns[peer]
                    self.metric("app.connections_reaped")
            self._schedule_reaper(self.param("reaper_interval"))
        self.set_timer(interval_ms / 1000.0, reap)

    def _conn(self, peer):
        conn = self._conns.get(peer)
        if conn is None:
            conn = {"state": "up", "queue": [], "last_used": self.now_ms()}
            self._conns[peer] = conn
        return conn

    def _send_unicast(self, dst, frame):
        conn = self._conn(dst)
        conn["last_used"] = self.now_ms()
        if conn["state"] == "down":
            self._queue_frame(conn, dst, frame)
            return
        try:
            self.host.network.send((self.node_id, self.role),
                                   (dst, self.role), frame)
        except LinkDownError:
            conn["state"] = "down"
            self.metric("app.disconnects")
            self._queue_frame(conn, dst, frame)
            self._schedule_reconnect(dst)

    def _queue_frame(self, conn, dst, frame):
        if len(conn["queue"]) >= self.param("send_queue_size"):
            self.metric("app.send_queue_dropped")
            return
        conn["queue"].append(frame)

    def _schedule_reconnect(self, dst):
        def attempt():
            conn = self._conns.get(dst)
            if conn is None or conn["state"] != "down":
                return
            if self.host.network.link_up(self.node_id, dst):
                conn["state"] = "up"
                queued, conn["queue"] = conn["queue"], []
                for f in queued:
                    self._send_unicast(dst, f)
            else:
                self._schedule_reconnect(dst)
        self.set_timer(self.param("reconnect_timeout") / 1000.0, attempt)

    def _send_multicast(self, peers, frame):
        for dst in peers:
            self._send_unicast(dst, frame)


@register_layer
class GenericTransport(ConnTransport):
    """Datagrams for small frames, connections for everything larger."""

    name = "generic"
    DESCRIPTORS = ConnTransport.DESCRIPTORS + (
        P("max_udp_packet_size", V.BYTES, 8192, C.CACHES, unit="bytes",
          lo=64, origin="jpaxos:MAX_UDP_PACKET_SIZE"),
        P("ip_mcast", V.BOOLEAN, True, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:UDP.ip_mcast"),
    )

    def _send_unicast(self, dst, frame):
        if len(frame) <= self.param("max_udp_packet_size"):
            try:
                self.host.network.send((self.node_id, self.role),
                                       (dst, self.role), frame)
            except LinkDownError:
                pass
        else:
            super()._send_unicast(dst, frame)

    def _send_multicast(self, peers, frame):
        if len(frame) <= self.param("max_udp_packet_size") and \
                self.param("ip_mcast"):
            if peers:
                self.host.network.send_multicast(
                    (self.node_id, self.role), peers, frame,
                    dst_role=self.role)
        else:
            for dst in peers:
                self._send_unicast(dst, frame)


# -- fragmentation -------------------------------------------------------------

def fragment_payload(payload: bytes, frag_size: int) -> list:
    if len(payload) <= frag_size:
        return [payload]
    return [payload[i:i + frag_size]
            for i in range(0, len(payload), frag_size)]


@register_layer
class FragLayer(Layer):
    """Splits payloads above frag_size and reassembles at the receiver."""

    name = "frag"
    DESCRIPTORS = (
        P("frag_size", V.BYTES, 1200, C.CACHES, unit="bytes", lo=16,
          origin="jgroups:FRAG.frag_size", assigned=True),
    )

    def __init__(self):
        super().__init__()
        self._next_id = 0
        self._reassembly = {}

    def down(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_DOWN:
            super().down(evt)
            return
        m = evt.body
        frag_size = self.param("frag_size")
        if len(m.payload) <= frag_size:
            self.pass_down(evt)
            return
        chunks = fragment_payload(m.payload, frag_size)
        self._next_id += 1
        frag_id = self._next_id
        total = len(chunks)
        for idx, chunk in enumerate(chunks):
            fm = m.copy()
            fm.payload = chunk
            fm.headers = dict(m.headers)
            fm.headers["frag"] = struct.pack("<IHH", frag_id, idx, total)
            self.pass_down(StackEvent.msg_down(fm))

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or "frag" not in evt.body.headers:
            super().up(evt)
            return
        m = evt.body
        frag_id, idx, total = struct.unpack("<IHH", m.headers["frag"])
        key = (m.src, frag_id)
        entry = self._reassembly.setdefault(key, {})
        entry[idx] = m
        if len(entry) < total:
            return
        del self._reassembly[key]
        whole = entry[0].copy()
        whole.payload = b"".join(entry[i].payload for i in range(total))
        whole.headers.pop("frag", None)
        self.pass_up(StackEvent.msg_up(whole))


# -- compression -----------------------------------------------------------------

@register_layer
class CompressLayer(Layer):
    """Deflate payloads at or above min_size; inverse on the up path."""

    name = "compress"
    DESCRIPTORS = (
        P("compression_level", V.INTEGER, 9, C.COMPRESSION, lo=0, hi=9,
          origin="jgroups:COMPRESS.compression_level"),
        P("min_size", V.BYTES, 500, C.COMPRESSION, unit="bytes", lo=0,
          origin="jgroups:COMPRESS.min_size"),
        P("pool_size", V.INTEGER, 2, C.WORKER, lo=1,
          origin="jgroups:COMPRESS.pool_size"),
    )

    def down(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_DOWN:
            super().down(evt)
            return
        m = evt.body
        if len(m.payload) < self.param("min_size"):
            self.pass_down(evt)
            return
        cm = m.copy()
        cm.headers["compress"] = struct.pack("<I", len(m.payload))
        cm.payload = zlib.compress(m.payload, self.param("compression_level"))
        self.pass_down(StackEvent.msg_down(cm))

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or "compress" not in evt.body.headers:
            super().up(evt)
            return
        m = evt.body.copy()
        (orig_len,) = struct.unpack("<I", m.headers.pop("compress"))
        m.payload = zlib.decompress(m.payload)
        if len(m.payload) != orig_len:
            raise GcsimError("decompressed length mismatch")
        self.pass_up(StackEvent.msg_up(m))


def expected_fragments(payload_len: int, frag_size: int) -> int:
    return max(1, math.ceil(payload_len / frag_size))
