"""Reliability layers: negative-ack reliable multicast, positive-ack
unicast, stability-based garbage collection and credit flow control.

The multicast layer numbers every outgoing multicast per sender and
repairs gaps with NACKs; senders keep their messages in a retransmit
buffer until a stability round proves every view member delivered them.
When a view change excludes a sender, the survivors run a gap-closing
round so they all settle on the same delivered prefix for the dead
sender before moving on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..core import (
    EventKind,
    GcsimError,
    Message,
    MessageFlag,
    StackEvent,
    View,
    decode_message,
    encode_message,
)
from ..params import ControlCategory as C
from ..params import ParameterDescriptor as P
from ..params import ValueType as V
from ..stack import Layer, register_layer
from .util import b64, pack_obj, unb64, unpack_obj

INTERNAL = frozenset({MessageFlag.INTERNAL})
INTERNAL_OOB = frozenset({MessageFlag.INTERNAL, MessageFlag.OOB})


class StaleViewError(GcsimError):
    pass


# -- NAKACK pure state machinery -------------------------------------------------

@dataclass
class SenderWindow:
    highest_delivered: int = 0
    received: dict = field(default_factory=dict)   # seqno -> Message
    tombstones: set = field(default_factory=set)   # seqnos agreed unavailable
    purge_point: int = 0
    last_nack_ms: float = -1e18


@dataclass
class NakackState:
    own_seqno: int = 0
    retransmit_buffer: dict = field(default_factory=dict)
    windows: dict = field(default_factory=dict)    # sender -> SenderWindow
    own_purge_point: int = 0

    def window(self, sender) -> SenderWindow:
        w = self.windows.get(sender)
        if w is None:
            w = SenderWindow()
            self.windows[sender] = w
        return w


def _drain_window(w: SenderWindow) -> list:
    deliveries = []
    nxt = w.highest_delivered + 1
    while True:
        if nxt in w.received:
            deliveries.append((nxt, w.received[nxt]))
            w.highest_delivered = nxt
        elif nxt in w.tombstones:
            w.highest_delivered = nxt
        else:
            break
        nxt += 1
    return deliveries


def nakack_on_receive(st: NakackState, sender, seqno: int, m: Message,
                      max_xmit_req_size: int = 0):
    """Store a numbered multicast; returns (deliveries, missing, duplicate).

    Deliveries are the in-order messages released by this receipt; missing
    is the NACK set when a gap remains (capped), or None.
    """
    w = st.window(sender)
    if seqno <= w.highest_delivered or seqno in w.received or \
            seqno in w.tombstones:
        return [], None, True
    w.received[seqno] = m
    deliveries = _drain_window(w)
    missing = None
    top = max(w.received)
    if top > w.highest_delivered:
        gaps = [s for s in range(w.highest_delivered + 1, top)
                if s not in w.received and s not in w.tombstones]
        if gaps:
            if max_xmit_req_size > 0:
                gaps = gaps[:max_xmit_req_size]
            missing = gaps
    return deliveries, missing, False


def nakack_on_nack(st: NakackState, missing):
    """Look up requested own seqnos: (retransmissions, already_purged)."""
    retransmissions, purged = [], []
    for seqno in sorted(missing):
        if seqno in st.retransmit_buffer:
            retransmissions.append((seqno, st.retransmit_buffer[seqno]))
        elif seqno <= st.own_purge_point:
            purged.append(seqno)
    return retransmissions, purged


# -- stability -------------------------------------------------------------------

@dataclass
class StabilityState:
    digests: dict = field(default_factory=dict)    # member -> {sender: hd}
    bytes_since_stable: int = 0
    view_counter: int = -1


def stability_round(st: StabilityState, digests: dict, view_members) -> dict:
    """Per-sender purge point = min over all members' delivered digests."""
    if set(digests) != set(view_members):
        raise StaleViewError(
            f"digests {sorted(digests)} != view {sorted(view_members)}")
    senders = set()
    for d in digests.values():
        senders.update(d)
    return {s: min(d.get(s, 0) for d in digests.values()) for s in senders}


# -- flow control -----------------------------------------------------------------

@dataclass
class FlowControlState:
    initial_credits: int
    credits: dict = field(default_factory=dict)

    def available(self, peer) -> int:
        return self.credits.setdefault(peer, self.initial_credits)


def fc_acquire(st: FlowControlState, dest, size: int, now_ms: float,
               max_block_time_ms: float):
    """GRANTED deducts credits; otherwise BLOCKED_UNTIL(now + max block)."""
    if st.available(dest) >= size:
        st.credits[dest] -= size
        return ("GRANTED",)
    return ("BLOCKED_UNTIL", now_ms + max_block_time_ms)


# -- the layers --------------------------------------------------------------------

@register_layer
class NakackLayer(Layer):
    """Reliable ordered multicast via per-sender seqnos and NACK repair."""

    name = "nakack"
    DESCRIPTORS = (
        P("become_server_queue_size", V.INTEGER, 50, C.CACHES, lo=1,
          origin="jgroups:NAKACK.become_server_queue_size"),
        P("discard_delivered_msgs", V.BOOLEAN, False, C.CACHES,
          origin="jgroups:NAKACK.discard_delivered_msgs"),
        P("max_rebroadcast_timeout", V.DURATION, 2000, C.TIMEOUTS, unit="ms",
          lo=1, origin="jgroups:NAKACK.max_rebroadcast_timeout"),
        P("max_xmit_req_size", V.INTEGER, 0, C.BATCHING_BUNDLING, lo=0,
          origin="jgroups:NAKACK.max_xmit_req_size"),
        P("resend_last_seqno", V.BOOLEAN, True, C.REPETITIONS,
          origin="jgroups:NAKACK.resend_last_seqno"),
        P("resend_last_seqno_max_times", V.INTEGER, 1, C.REPETITIONS, lo=1,
          origin="jgroups:NAKACK.resend_last_seqno_max_times"),
        P("use_mcast_xmit", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:NAKACK.use_mcast_xmit"),
        P("use_mcast_xmit_req", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:NAKACK.use_mcast_xmit_req"),
        P("xmit_interval", V.DURATION, 100, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:NAKACK.xmit_interval"),
    )

    def __init__(self):
        super().__init__()
        self.state = NakackState()
        self.is_server = True
        self.become_server_queue = []
        self.view: Optional[View] = None
        self._close_round = None       # coordinator-side gap closing
        self._resend_quiet = 0
        self._sent_since_resend = False
        self._awaiting_baseline = {}   # sender -> deadline_ms
        self._member_floor = {}        # member -> proven delivered seqno
        #                                (of our own messages, per stability)

    def start(self):
        self.is_server = getattr(self.host, "starts_server", True)
        self._schedule_xmit()

    # -- down ---------------------------------------------------------------

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
            self.pass_down(evt)
            return
        if evt.kind != EventKind.MSG_DOWN:
            self.pass_down(evt)
            return
        m = evt.body
        if (m.is_multicast() and MessageFlag.INTERNAL not in m.flags
                and "nakack" not in m.headers):
            self.state.own_seqno += 1
            seqno = self.state.own_seqno
            m = m.copy()
            m.headers["nakack"] = pack_obj({"t": "d", "s": seqno})
            self.state.retransmit_buffer[seqno] = m.copy()
            self._sent_since_resend = True
            self.pass_down(StackEvent.msg_down(m))
            return
        self.pass_down(evt)

    # -- up -----------------------------------------------------------------

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or "nakack" not in evt.body.headers:
            self.pass_up(evt)
            return
        m = evt.body
        hdr = unpack_obj(m.headers["nakack"])
        kind = hdr["t"]
        if kind == "d":
            self._on_data(m, hdr)
        elif kind == "nack":
            self._on_nack(m.src, hdr["missing"])
        elif kind == "high":
            self._on_highest(m.src, hdr["s"])
        elif kind == "baseline":
            self._on_baseline(m.src, hdr["s"], hdr.get("merge", False))
        elif kind == "breq":
            self._ctl(m.src, pack_obj({"t": "baseline",
                                       "s": self.state.own_purge_point,
                                       "merge": True}))
        elif kind == "cdigest":
            self._on_close_digest(m.src, hdr)
        elif kind == "cdecision":
            self._on_close_decision(hdr)
        elif kind == "cfetch":
            self._on_close_fetch(m.src, hdr)
        elif kind == "cdata":
            inner = decode_message(unb64(hdr["m"]))
            self.up(StackEvent.msg_up(inner))

    def _on_data(self, m: Message, hdr):
        if not self.is_server:
            q = self.become_server_queue
            q.append(m)
            while len(q) > self.param("become_server_queue_size"):
                q.pop(0)
                self.metric("app.become_server_dropped")
            return
        seqno = hdr["s"]
        clean = m.copy()
        del clean.headers["nakack"]
        deliveries, missing, dup = nakack_on_receive(
            self.state, m.src, seqno, clean, self.param("max_xmit_req_size"))
        if dup:
            self.metric("app.duplicates_discarded")
            return
        if self.param("discard_delivered_msgs"):
            w = self.state.window(m.src)
            for s, _ in deliveries:
                w.received.pop(s, None)
        for _, dm in deliveries:
            self.pass_up(StackEvent.msg_up(dm))
        if missing:
            self._maybe_nack(m.src, missing)

    def _maybe_nack(self, sender, missing):
        if not self.is_server:
            return  # still joining: never chase pre-join traffic
        now = self.now_ms()
        deadline = self._awaiting_baseline.get(sender)
        if deadline is not None:
            if now < deadline:
                return  # the sender's rebase floor has not arrived yet
            # the floor got lost: ask for it rather than chase history
            self._awaiting_baseline[sender] = \
                now + self.param("max_rebroadcast_timeout")
            self._ctl(sender, pack_obj({"t": "breq"}))
            return
        w = self.state.window(sender)
        if now - w.last_nack_ms < self.param("xmit_interval"):
            return
        w.last_nack_ms = now
        self.metric("app.nacks_sent")
        body = pack_obj({"t": "nack", "missing": list(missing)})
        if self.param("use_mcast_xmit_req"):
            self._ctl(None, body)
        else:
            self._ctl(sender, body)

    def _on_nack(self, requester, missing):
        retransmissions, purged = nakack_on_nack(self.state, missing)
        for seqno, stored in retransmissions:
            self.metric("app.retransmissions")
            out = stored.copy()
            if not self.param("use_mcast_xmit"):
                out.dest = requester
            self.pass_down(StackEvent.msg_down(out))
        if purged:
            # a request below the requester's own proven stability digest
            # is stale traffic delayed in the network, not a safety issue
            floor = self._member_floor.get(requester, 0)
            genuine = [s for s in purged if s > floor]
            self.metric("app.already_purged", len(purged))
            if not genuine:
                self.metric("app.stale_nacks", len(purged))
                return
            if self.view is not None and requester in self.view.members:
                self.metric("app.already_purged_live", len(genuine))
            # purged means stable: every round member delivered it, so the
            # requester was outside the view; hand it the floor to rebase
            self._ctl(requester, pack_obj({
                "t": "baseline", "s": self.state.own_purge_point,
                "merge": True}))
            self.pass_up(StackEvent(EventKind.STATE_TRANSFER, {
                "reason": "ALREADY_PURGED", "requester": requester,
                "seqnos": genuine}))

    def _on_highest(self, sender, seqno):
        if sender == self.node_id:
            return
        w = self.state.window(sender)
        if seqno > w.highest_delivered and seqno not in w.received:
            gaps = [s for s in range(w.highest_delivered + 1, seqno + 1)
                    if s not in w.received and s not in w.tombstones]
            if gaps:
                cap = self.param("max_xmit_req_size")
                self._maybe_nack(sender, gaps[:cap] if cap else gaps)

    # stability digests double as gap hints: a peer's higher delivered
    # point for some sender reveals messages we never saw
    hint_highest = _on_highest

    def _on_baseline(self, sender, seqno, merge: bool):
        """Install a seqno floor for a sender: history below it is skipped.

        Joiners accept floors only for senders they have no state for;
        after a merge every member rebases unconditionally (the divergent
        partition-era history is the application's to reconcile).
        """
        if sender == self.node_id:
            return
        w = self.state.window(sender)
        virgin = (w.highest_delivered == 0 and not w.received
                  and not w.tombstones)
        if not (merge or virgin or seqno <= w.highest_delivered):
            return  # floor not applicable yet; keep holding gap requests
        self._awaiting_baseline.pop(sender, None)
        if seqno > w.highest_delivered:
            for s in range(w.highest_delivered + 1, seqno + 1):
                if s not in w.received:
                    w.tombstones.add(s)
            for _, dm in _drain_window(w):
                self.pass_up(StackEvent.msg_up(dm))

    def _broadcast_baseline(self, times: int, merge: bool,
                            floor: Optional[int] = None):
        value = self.state.own_seqno if floor is None else floor
        if times <= 0 or (value <= 0 and not merge):
            return
        self._ctl(None, pack_obj({"t": "baseline", "s": value,
                                  "merge": merge}))
        if times > 1:
            self.set_timer(self.param("xmit_interval") / 1000.0,
                           lambda: self._broadcast_baseline(times - 1, merge,
                                                            floor))

    def merge_rebase(self):
        """Called by the membership layer right after a merge view installs.

        The floor is the purge point: everything above it is still in the
        retransmit buffer and repairable across the healed partition,
        everything below was stability-purged inside the old subview. Gap
        requests pause until every member's floor has landed.
        """
        self._broadcast_baseline(3, merge=True,
                                 floor=self.state.own_purge_point)
        if self.view is not None:
            hold = self.now_ms() + self.param("max_rebroadcast_timeout")
            for member in self.view.members:
                if member != self.node_id:
                    self._awaiting_baseline.setdefault(member, hold)

    # -- periodic retransmission ----------------------------------------------

    def _schedule_xmit(self):
        def tick():
            self._xmit_tick()
            self._schedule_xmit()
        self.set_timer(self.param("xmit_interval") / 1000.0, tick)

    def _xmit_tick(self):
        cap = self.param("max_xmit_req_size")
        for sender, w in self.state.windows.items():
            if sender == self.node_id or not w.received:
                continue
            top = max(w.received)
            gaps = [s for s in range(w.highest_delivered + 1, top)
                    if s not in w.received and s not in w.tombstones]
            if gaps:
                w.last_nack_ms = -1e18  # periodic task may always ask
                self._maybe_nack(sender, gaps[:cap] if cap else gaps)
        if self.param("resend_last_seqno") and self.state.own_seqno > 0:
            if self._sent_since_resend:
                self._sent_since_resend = False
                self._resend_quiet = 0
            elif self._resend_quiet < self.param("resend_last_seqno_max_times"):
                self._resend_quiet += 1
                self._ctl(None, pack_obj(
                    {"t": "high", "s": self.state.own_seqno}))

    # -- stability hook ---------------------------------------------------------

    def digest(self) -> dict:
        d = {str(s): w.highest_delivered
             for s, w in self.state.windows.items()}
        d[str(self.node_id)] = max(
            d.get(str(self.node_id), 0),
            self.state.window(self.node_id).highest_delivered)
        return d

    def apply_purge(self, purge: dict, digests: Optional[dict] = None):
        if digests:
            own = str(self.node_id)
            for member, digest in digests.items():
                proven = digest.get(own, 0)
                member = int(member)
                if proven > self._member_floor.get(member, 0):
                    self._member_floor[member] = proven
        for sender_s, point in purge.items():
            sender = int(sender_s)
            if sender == self.node_id:
                self.state.own_purge_point = max(self.state.own_purge_point,
                                                 point)
                for s in [s for s in self.state.retransmit_buffer
                          if s <= point]:
                    del self.state.retransmit_buffer[s]
            w = self.state.window(sender)
            w.purge_point = max(w.purge_point, point)
            for s in [s for s in w.received if s <= point]:
                del w.received[s]

    # -- view change and gap closing ----------------------------------------------

    def on_view(self, view: View):
        prev = self.view
        self.view = view
        if self.node_id in view.members and not self.is_server:
            self.is_server = True
            queued, self.become_server_queue = self.become_server_queue, []
            for m in queued:
                self.up(StackEvent.msg_up(m))
        if prev is None:
            # joining: hold gap requests until each member's history floor
            # arrives, so pre-join traffic is never chased
            hold = self.now_ms() + self.param("max_rebroadcast_timeout")
            for member in view.members:
                if member != self.node_id:
                    self._awaiting_baseline[member] = hold
            return
        if self.node_id not in view.members:
            return
        gained = [m for m in view.members if m not in prev.members]
        if gained:
            # give newcomers a floor so they do not replay our history,
            # and hold our own gap requests toward them until theirs lands
            self._broadcast_baseline(3, merge=False)
            hold = self.now_ms() + self.param("max_rebroadcast_timeout")
            for member in gained:
                if member != self.node_id:
                    self._awaiting_baseline[member] = hold
        excluded = [m for m in prev.members if m not in view.members]
        if not excluded:
            return
        self._send_close_digest(view, excluded)
        if view.coordinator == self.node_id:
            self._close_round = {"view": view, "excluded": excluded,
                                 "digests": {}, "done": False}
            self._arm_close_retry()

    def _send_close_digest(self, view: View, excluded):
        entry = {}
        for s in excluded:
            w = self.state.window(s)
            entry[str(s)] = {"hd": w.highest_delivered,
                             "held": sorted(w.received)}
        self._ctl(view.coordinator,
                  pack_obj({"t": "cdigest", "v": view.id.counter, "d": entry}))

    def _arm_close_retry(self):
        def retry():
            rnd = self._close_round
            if rnd is None or rnd["done"]:
                return
            missing = [m for m in rnd["view"].members
                       if m not in rnd["digests"]]
            if missing and self.view is not None and \
                    self.view.id == rnd["view"].id:
                self._send_close_digest(rnd["view"], rnd["excluded"])
                self._arm_close_retry()
        self.set_timer(self.param("max_rebroadcast_timeout") / 1000.0, retry)

    def _on_close_digest(self, member, hdr):
        rnd = self._close_round
        if rnd is None or rnd["done"] or hdr["v"] != rnd["view"].id.counter:
            return
        rnd["digests"][member] = hdr["d"]
        if set(rnd["digests"]) >= set(rnd["view"].members):
            decision = {}
            for s in rnd["excluded"]:
                have = set()
                for d in rnd["digests"].values():
                    entry = d.get(str(s), {"hd": 0, "held": []})
                    have.update(entry["held"])
                    have.update(range(1, entry["hd"] + 1))
                holders = {}
                for seq in sorted(have):
                    for member_id in sorted(rnd["digests"]):
                        entry = rnd["digests"][member_id].get(str(s))
                        if entry and (seq in entry["held"] or
                                      seq <= entry["hd"]):
                            holders[str(seq)] = member_id
                            break
                decision[str(s)] = {"have": sorted(have), "holders": holders}
            rnd["done"] = True
            self._ctl(None, pack_obj({"t": "cdecision",
                                      "v": rnd["view"].id.counter,
                                      "d": decision}))
            self._on_close_decision({"v": rnd["view"].id.counter,
                                     "d": decision})

    def _on_close_decision(self, hdr):
        if self.view is None or hdr["v"] != self.view.id.counter:
            return
        for sender_s, info in hdr["d"].items():
            sender = int(sender_s)
            w = self.state.window(sender)
            have = set(info["have"])
            cutoff = max(have) if have else w.highest_delivered
            fetch = []
            for s in range(w.highest_delivered + 1, cutoff + 1):
                if s in w.received or s in w.tombstones:
                    continue
                if s in have:
                    fetch.append(s)
                else:
                    w.tombstones.add(s)
            for _, dm in _drain_window(w):
                self.pass_up(StackEvent.msg_up(dm))
            by_holder = {}
            for s in fetch:
                holder = info["holders"].get(str(s))
                if holder is not None and holder != self.node_id:
                    by_holder.setdefault(holder, []).append(s)
            for holder, seqs in sorted(by_holder.items()):
                self._ctl(holder, pack_obj({"t": "cfetch",
                                            "sender": sender, "s": seqs}))

    def _on_close_fetch(self, requester, hdr):
        w = self.state.window(hdr["sender"])
        for s in hdr["s"]:
            stored = w.received.get(s)
            if stored is None:
                continue
            out = stored.copy()
            out.headers["nakack"] = pack_obj({"t": "d", "s": s})
            self._ctl(requester, pack_obj(
                {"t": "cdata", "m": b64(encode_message(out))}))

    # -- helpers -------------------------------------------------------------------

    def _ctl(self, dest, body: bytes):
        m = Message(self.node_id, dest, b"", {"nakack": body}, INTERNAL)
        self.pass_down(StackEvent.msg_down(m))


@register_layer
class UnicastLayer(Layer):
    """Positive-ack reliable FIFO unicast between peers."""

    name = "unicast"
    DESCRIPTORS = (
        P("ack_batches_immediately", V.BOOLEAN, True, C.BATCHING_BUNDLING,
          origin="jgroups:UNICAST.ack_batches_immediately"),
        P("ack_threshold", V.INTEGER, 5, C.BATCHING_BUNDLING, lo=1,
          origin="jgroups:UNICAST.ack_threshold"),
        P("conn_close_timeout", V.DURATION, 10000, C.TIMEOUTS, unit="ms",
          lo=0, origin="jgroups:UNICAST.conn_close_timeout"),
        P("conn_expiry_timeout", V.DURATION, 0, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:UNICAST.conn_expiry_timeout"),
        P("max_retransmit_time", V.DURATION, 0, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:UNICAST.max_retransmit_time"),
        P("max_xmit_req_size", V.INTEGER, 0, C.BATCHING_BUNDLING, lo=0,
          origin="jgroups:UNICAST.max_xmit_req_size"),
        P("xmit_interval", V.DURATION, 100, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:UNICAST.xmit_interval"),
    )

    def __init__(self):
        super().__init__()
        self._send = {}   # peer -> {next, window {seq: [msg, first_ms]}}
        self._recv = {}   # peer -> {expected, buffer, pending_acks}

    def start(self):
        self._schedule_xmit()

    def on_view(self, view: View):
        # peers outside the view will never ack: stop retransmitting to them
        for peer in [p for p in self._send if p not in view.members]:
            del self._send[peer]
        for peer in [p for p in self._recv if p not in view.members]:
            del self._recv[peer]

    def _sender(self, peer):
        return self._send.setdefault(peer, {"next": 1, "window": {},
                                            "last_used": self.now_ms()})

    def _receiver(self, peer):
        return self._recv.setdefault(peer, {"expected": 1, "buffer": {},
                                            "pending": 0})

    def down(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_DOWN:
            super().down(evt)
            return
        m = evt.body
        if (m.is_multicast() or MessageFlag.INTERNAL in m.flags
                or "unicast" in m.headers):
            self.pass_down(evt)
            return
        st = self._sender(m.dest)
        st["last_used"] = self.now_ms()
        seq = st["next"]
        st["next"] += 1
        out = m.copy()
        out.headers["unicast"] = pack_obj({"t": "d", "s": seq})
        st["window"][seq] = [out.copy(), self.now_ms()]
        self.pass_down(StackEvent.msg_down(out))

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or "unicast" not in evt.body.headers:
            self.pass_up(evt)
            return
        m = evt.body
        hdr = unpack_obj(m.headers["unicast"])
        if hdr["t"] == "ack":
            st = self._sender(m.src)
            for seq in [s for s in st["window"] if s <= hdr["h"]]:
                del st["window"][seq]
            return
        st = self._receiver(m.src)
        seq = hdr["s"]
        clean = m.copy()
        del clean.headers["unicast"]
        if seq < st["expected"] or seq in st["buffer"]:
            self.metric("app.duplicates_discarded")
            self._send_ack(m.src, st["expected"] - 1)
            return
        st["buffer"][seq] = clean
        while st["expected"] in st["buffer"]:
            self.pass_up(StackEvent.msg_up(st["buffer"].pop(st["expected"])))
            st["expected"] += 1
        st["pending"] += 1
        if self.param("ack_batches_immediately") or \
                st["pending"] >= self.param("ack_threshold"):
            st["pending"] = 0
            self._send_ack(m.src, st["expected"] - 1)

    def _send_ack(self, peer, highest):
        m = Message(self.node_id, peer, b"",
                    {"unicast": pack_obj({"t": "ack", "h": highest})},
                    INTERNAL_OOB)
        self.pass_down(StackEvent.msg_down(m))

    def _schedule_xmit(self):
        def tick():
            now = self.now_ms()
            give_up = self.param("max_retransmit_time")
            for peer, st in self._send.items():
                dead = False
                for seq in sorted(st["window"]):
                    msg, first = st["window"][seq]
                    if give_up > 0 and now - first > give_up:
                        dead = True
                        break
                    self.metric("app.retransmissions")
                    self.pass_down(StackEvent.msg_down(msg.copy()))
                if dead:
                    st["window"].clear()
                    st["next"] = 1
                    self.metric("app.unicast_conn_dropped")
            self._schedule_xmit()
        self.set_timer(self.param("xmit_interval") / 1000.0, tick)


@register_layer
class StableLayer(Layer):
    """Agrees on the lowest delivered seqno per sender and purges buffers."""

    name = "stable"
    requires_below = ("nakack",)
    DESCRIPTORS = (
        P("desired_avg_gossip", V.DURATION, 2000, C.INTERVALS, unit="ms",
          lo=1, origin="jgroups:STABLE.desired_avg_gossip"),
        P("max_bytes", V.BYTES, 200000, C.CACHES, unit="bytes", lo=0,
          origin="jgroups:STABLE.max_bytes"),
        P("send_stable_msgs_to_coord_only", V.BOOLEAN, False,
          C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:STABLE.send_stable_msgs_to_coord_only"),
        P("stability_delay", V.DURATION, 0, C.INTERVALS, unit="ms", lo=0,
          origin="jgroups:STABLE.stability_delay"),
    )

    def __init__(self):
        super().__init__()
        self.state = StabilityState()
        self.view: Optional[View] = None

    def start(self):
        self._schedule_gossip()

    def on_view(self, view: View):
        self.view = view
        self.state = StabilityState(view_counter=view.id.counter)

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
        self.pass_down(evt)

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.MSG_UP and "stable" in evt.body.headers:
            self._on_ctl(evt.body)
            return
        if evt.kind == EventKind.MSG_UP and evt.body.is_multicast():
            self.state.bytes_since_stable += len(evt.body.payload)
            if 0 < self.param("max_bytes") <= self.state.bytes_since_stable:
                self.state.bytes_since_stable = 0
                self._send_digest()
        self.pass_up(evt)

    def _schedule_gossip(self):
        avg = self.param("desired_avg_gossip") / 1000.0
        delay = self.rng("gossip").uniform(0.5 * avg, 1.5 * avg)

        def fire():
            self._send_digest()
            self._schedule_gossip()
        self.set_timer(delay, fire)

    def _send_digest(self):
        if self.view is None:
            return
        nakack = self.stack.layer("nakack")
        body = pack_obj({"t": "digest", "v": self.view.id.counter,
                         "m": self.node_id, "d": nakack.digest()})
        delay_ms = self.param("stability_delay")
        delay = self.rng("delay").uniform(0, delay_ms / 1000.0) if delay_ms \
            else 0.0
        if self.param("send_stable_msgs_to_coord_only"):
            dest = self.view.coordinator
            self.set_timer(delay, lambda: self._ctl(dest, body))
        else:
            self.set_timer(delay, lambda: self._ctl(None, body))

    def _on_ctl(self, m: Message):
        hdr = unpack_obj(m.headers["stable"])
        if self.view is None or hdr["v"] != self.view.id.counter:
            return  # stale view: round discarded
        if hdr["t"] == "digest":
            self.state.digests[hdr["m"]] = hdr["d"]
            nakack = self.stack.layer("nakack")
            for sender_s, hd in hdr["d"].items():
                nakack.hint_highest(int(sender_s), hd)
            if set(self.state.digests) >= set(self.view.members):
                digests = self.state.digests
                try:
                    purge = stability_round(self.state, digests,
                                            self.view.members)
                except StaleViewError:
                    self.state.digests = {}
                    return
                self.state.digests = {}
                if self.param("send_stable_msgs_to_coord_only"):
                    self._ctl(None, pack_obj({"t": "stability",
                                              "v": self.view.id.counter,
                                              "p": purge, "d": digests}))
                self._apply(purge, digests)
        elif hdr["t"] == "stability":
            self._apply(hdr["p"], hdr.get("d"))

    def _apply(self, purge: dict, digests=None):
        self.stack.layer("nakack").apply_purge(purge, digests)
        self.metric("app.stability_rounds")

    def _ctl(self, dest, body: bytes):
        if self.stack.closed:
            return
        m = Message(self.node_id, dest, b"", {"stable": body}, INTERNAL)
        self.pass_down(StackEvent.msg_down(m))


@register_layer
class FlowControlLayer(Layer):
    """Credit-based flow control for application traffic."""

    name = "fc"
    DESCRIPTORS = (
        P("ignore_synchronous_response", V.BOOLEAN, False, C.CACHES,
          assigned=True, origin="jgroups:FC.ignore_synchronous_response"),
        P("max_block_time", V.DURATION, 5000, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:FC.max_block_time"),
        P("initial_credits", V.BYTES, 2_000_000, C.CACHES, unit="bytes",
          lo=1, origin="invented"),
    )

    def __init__(self):
        super().__init__()
        self.state: Optional[FlowControlState] = None
        self._blocked = []      # [msg event, targets, deadline_ms]
        self._delivered_from = {}
        self.view: Optional[View] = None

    def start(self):
        self.state = FlowControlState(self.param("initial_credits"))

    def on_view(self, view: View):
        self.view = view

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
            self.pass_down(evt)
            return
        if evt.kind != EventKind.MSG_DOWN:
            self.pass_down(evt)
            return
        m = evt.body
        if MessageFlag.INTERNAL in m.flags or MessageFlag.OOB in m.flags:
            self.pass_down(evt)
            return
        if self.param("ignore_synchronous_response") and \
                getattr(self.stack, "in_up", 0) > 0:
            self.pass_down(evt)
            return
        targets = self._targets(m)
        size = len(m.payload)
        if all(self.state.available(t) >= size for t in targets):
            for t in targets:
                self.state.credits[t] -= size
            self.pass_down(evt)
            return
        deadline = self.now_ms() + self.param("max_block_time")
        self._blocked.append([evt, targets, size, deadline])
        self.metric("app.fc_blocked")
        self.set_timer(self.param("max_block_time") / 1000.0,
                       self._timeout_check)

    def _targets(self, m: Message):
        if not m.is_multicast():
            return [m.dest]
        members = self.view.members if self.view is not None else \
            self.host.initial_members
        return [p for p in members if p != self.node_id]

    def _timeout_check(self):
        now = self.now_ms()
        still = []
        for entry in self._blocked:
            evt, targets, size, deadline = entry
            if now >= deadline:
                self.metric("app.fc_timeout")
                for t in targets:
                    self.state.credits[t] = self.state.available(t) - size
                self.pass_down(evt)
            else:
                still.append(entry)
        self._blocked = still

    def _retry_blocked(self):
        still = []
        for entry in self._blocked:
            evt, targets, size, deadline = entry
            if all(self.state.available(t) >= size for t in targets):
                for t in targets:
                    self.state.credits[t] -= size
                self.pass_down(evt)
            else:
                still.append(entry)
        self._blocked = still

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.MSG_UP and "fc" in evt.body.headers:
            hdr = unpack_obj(evt.body.headers["fc"])
            if hdr["t"] == "replenish":
                peer = evt.body.src
                self.state.credits[peer] = \
                    self.state.available(peer) + hdr["bytes"]
                self._retry_blocked()
            return
        if evt.kind == EventKind.MSG_UP and \
                MessageFlag.INTERNAL not in evt.body.flags and \
                evt.body.src != self.node_id:
            sender = evt.body.src
            n = self._delivered_from.get(sender, 0) + len(evt.body.payload)
            if n >= self.param("initial_credits") // 2:
                self._replenish(sender, n)
                n = 0
            self._delivered_from[sender] = n
        self.pass_up(evt)

    def _replenish(self, peer, nbytes):
        m = Message(self.node_id, peer, b"",
                    {"fc": pack_obj({"t": "replenish", "bytes": nbytes})},
                    INTERNAL_OOB)
        self.pass_down(StackEvent.msg_down(m))
