"""Membership-plane layers: discovery, heartbeat failure detectors,
suspicion verification, group membership, partition merging and
sequencer-based total order.

Views are numbered and installed in order; the coordinator is always the
first member. Suspicions climb the stack (detector, verifier, membership)
and confirmed ones shrink the view. After a partition heals, periodic
INFO exchange spots diverging views and the lowest-id coordinator merges
them back together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..core import (
    EventKind,
    Message,
    MessageFlag,
    StackEvent,
    View,
    ViewId,
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


@register_layer
class DiscoveryLayer(Layer):
    """Static-list discovery: ask every configured node, collect responses."""

    name = "discovery"
    DESCRIPTORS = (
        P("num_initial_members", V.INTEGER, 1, C.MEMBERS_REPLICAS, lo=1,
          origin="jgroups:Discovery.num_initial_members"),
        P("timeout", V.DURATION, 1000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:Discovery.timeout"),
        P("stagger_timeout", V.DURATION, 0, C.TIMEOUTS, unit="ms", lo=0,
          origin="jgroups:Discovery.stagger_timeout"),
    )

    def __init__(self):
        super().__init__()
        self._round = None

    def find_coordinator(self, callback):
        """Query all static members; callback(coord or None) once done."""
        self._round = {"responses": [], "callback": callback, "done": False}
        for peer in self.host.initial_members:
            if peer == self.node_id:
                continue
            self._ctl(peer, pack_obj({"t": "req"}))
        self.set_timer(self.param("timeout") / 1000.0, self._finish)

    def _finish(self):
        rnd = self._round
        if rnd is None or rnd["done"]:
            return
        rnd["done"] = True
        best = None
        for rsp in rnd["responses"]:
            if best is None or rsp["v"] > best["v"]:
                best = rsp
        rnd["callback"](best["coord"] if best else None)

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or "discovery" not in evt.body.headers:
            self.pass_up(evt)
            return
        m = evt.body
        hdr = unpack_obj(m.headers["discovery"])
        if hdr["t"] == "req":
            view = self._current_view()
            if view is None:
                return
            rsp = pack_obj({"t": "rsp", "coord": view.coordinator,
                            "v": view.id.counter})
            stagger = self.param("stagger_timeout")
            delay = self.rng("stagger").uniform(0, stagger / 1000.0) \
                if stagger else 0.0
            self.set_timer(delay, lambda: self._ctl(m.src, rsp))
        elif hdr["t"] == "rsp":
            rnd = self._round
            if rnd is None or rnd["done"]:
                return
            rnd["responses"].append(hdr)
            if len(rnd["responses"]) >= self.param("num_initial_members"):
                self._finish()

    def _current_view(self) -> Optional[View]:
        if self.stack.has_layer("gms"):
            return self.stack.layer("gms").current
        return None

    def _ctl(self, dest, body: bytes):
        m = Message(self.node_id, dest, b"", {"discovery": body},
                    INTERNAL_OOB)
        self.pass_down(StackEvent.msg_down(m))


# -- ring failure detector ---------------------------------------------------------

@dataclass
class FdRingState:
    ring: list = field(default_factory=list)
    monitored: Optional[int] = None
    timeout_ms: float = 3000
    max_tries: int = 2
    tries_left: int = 2
    last_heard_ms: float = 0.0


def fd_ring_tick(st: FdRingState, now_ms: float):
    """One monitoring step: probe when silent, suspect when tries run out."""
    if st.monitored is None:
        return ("NONE",)
    if now_ms - st.last_heard_ms < st.timeout_ms:
        st.tries_left = st.max_tries
        return ("NONE",)
    if st.tries_left > 0:
        st.tries_left -= 1
        return ("SEND_ARE_YOU_ALIVE", st.monitored)
    return ("SUSPECT", st.monitored)


def next_in_ring(ring, me, suspected) -> Optional[int]:
    if me not in ring or len(ring) < 2:
        return None
    idx = ring.index(me)
    for step in range(1, len(ring)):
        candidate = ring[(idx + step) % len(ring)]
        if candidate not in suspected:
            return candidate
    return None


@register_layer
class FdRingLayer(Layer):
    """FD-style detector: each member probes its ring successor."""

    name = "fd"
    DESCRIPTORS = (
        P("timeout", V.DURATION, 3000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:FD.timeout"),
        P("max_tries", V.INTEGER, 2, C.REPETITIONS, lo=0,
          origin="jgroups:FD.max_tries"),
        P("msg_counts_as_heartbeat", V.BOOLEAN, False,
          C.ENVIRONMENT_EXPLOITATION, assigned=True,
          origin="jgroups:FD.msg_counts_as_heartbeat"),
    )

    def __init__(self):
        super().__init__()
        self.state = FdRingState()
        self.suspected = set()

    def start(self):
        self.state.timeout_ms = self.param("timeout")
        self.state.max_tries = self.param("max_tries")
        self.state.tries_left = self.state.max_tries
        self._schedule_tick()

    def on_view(self, view: View):
        self.state.ring = list(view.members)
        self.suspected &= set(view.members)
        self._retarget()

    def _retarget(self):
        st = self.state
        st.monitored = next_in_ring(st.ring, self.node_id, self.suspected)
        st.last_heard_ms = self.now_ms()
        st.tries_left = st.max_tries

    def _schedule_tick(self):
        def tick():
            st = self.state
            st.timeout_ms = self.param("timeout")
            st.max_tries = self.param("max_tries")
            action = fd_ring_tick(st, self.now_ms())
            if action[0] == "SEND_ARE_YOU_ALIVE":
                self._ctl(action[1], pack_obj({"t": "ping"}))
            elif action[0] == "SUSPECT":
                node = action[1]
                self.suspected.add(node)
                self.metric("app.suspicions")
                self.pass_up(StackEvent(EventKind.SUSPECT, node))
                self._retarget()
            self._schedule_tick()
        self.set_timer(self.param("timeout") / 1000.0, tick)

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.UNSUSPECT:
            self._unsuspect(evt.body)
        super().down(evt)

    def _unsuspect(self, node):
        if node in self.suspected:
            self.suspected.discard(node)
            self._retarget()

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.MSG_UP:
            m = evt.body
            if "fd" in m.headers:
                hdr = unpack_obj(m.headers["fd"])
                if hdr["t"] == "ping":
                    self._ctl(m.src, pack_obj({"t": "alive"}))
                elif hdr["t"] == "alive":
                    self._heard(m.src)
                return
            if self.param("msg_counts_as_heartbeat"):
                self._heard(m.src)
        self.pass_up(evt)

    def _heard(self, src):
        if src == self.state.monitored:
            self.state.last_heard_ms = self.now_ms()
            self.state.tries_left = self.state.max_tries
        if src in self.suspected:
            self.suspected.discard(src)
            self.pass_up(StackEvent(EventKind.UNSUSPECT, src))
            self._retarget()

    def _ctl(self, dest, body: bytes):
        m = Message(self.node_id, dest, b"", {"fd": body}, INTERNAL_OOB)
        self.pass_down(StackEvent.msg_down(m))


@register_layer
class FdAllLayer(Layer):
    """All-to-all heartbeats with a periodic timeout check."""

    name = "fd_all"
    DESCRIPTORS = (
        P("interval", V.DURATION, 1000, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:FD_ALL.interval"),
        P("timeout", V.DURATION, 4000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:FD_ALL.timeout"),
        P("timeout_check_interval", V.DURATION, 1000, C.INTERVALS, unit="ms",
          lo=1, origin="jgroups:FD_ALL.timeout_check_interval"),
    )

    def __init__(self):
        super().__init__()
        self.last_heard = {}
        self.suspected = set()
        self.view: Optional[View] = None

    def start(self):
        self._schedule_heartbeat()
        self._schedule_check()

    def on_view(self, view: View):
        self.view = view
        now = self.now_ms()
        self.last_heard = {m: now for m in view.members if m != self.node_id}
        self.suspected &= set(view.members)

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.UNSUSPECT:
            self.suspected.discard(evt.body)
            self.last_heard[evt.body] = self.now_ms()
        super().down(evt)

    def _schedule_heartbeat(self):
        def beat():
            if self.view is not None:
                m = Message(self.node_id, None, b"",
                            {"fd_all": pack_obj({"t": "hb"})}, INTERNAL_OOB)
                self.pass_down(StackEvent.msg_down(m))
            self._schedule_heartbeat()
        self.set_timer(self.param("interval") / 1000.0, beat)

    def _schedule_check(self):
        def check():
            now = self.now_ms()
            timeout = self.param("timeout")
            for member, heard in sorted(self.last_heard.items()):
                if member in self.suspected:
                    continue
                if now - heard > timeout:
                    self.suspected.add(member)
                    self.metric("app.suspicions")
                    self.pass_up(StackEvent(EventKind.SUSPECT, member))
            self._schedule_check()
        self.set_timer(self.param("timeout_check_interval") / 1000.0, check)

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.MSG_UP:
            m = evt.body
            self._heard(m.src)
            if "fd_all" in m.headers:
                return
        self.pass_up(evt)

    def _heard(self, src):
        if src == self.node_id:
            return
        if self.view is not None and src not in self.view.members:
            return  # former members are not monitored
        self.last_heard[src] = self.now_ms()
        if src in self.suspected:
            self.suspected.discard(src)
            self.pass_up(StackEvent(EventKind.UNSUSPECT, src))


@register_layer
class VerifySuspectLayer(Layer):
    """Last check before exclusion: challenge the suspect directly."""

    name = "verify_suspect"
    requires_below = (("fd", "fd_all"),)
    DESCRIPTORS = (
        P("num_msgs", V.INTEGER, 1, C.REPETITIONS, lo=1,
          origin="jgroups:VERIFY_SUSPECT.num_msgs"),
        P("timeout", V.DURATION, 2000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:VERIFY_SUSPECT.timeout"),
        P("use_mcast_rsps", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:VERIFY_SUSPECT.use_mcast_rsps"),
    )

    def __init__(self):
        super().__init__()
        self._verifying = {}

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.SUSPECT:
            self._start_verification(evt.body)
            return
        if evt.kind == EventKind.MSG_UP and "verify" in evt.body.headers:
            m = evt.body
            hdr = unpack_obj(m.headers["verify"])
            if hdr["t"] == "req":
                flags = INTERNAL_OOB
                rsp = Message(self.node_id,
                              None if self.param("use_mcast_rsps") else m.src,
                              b"", {"verify": pack_obj({"t": "not_dead"})},
                              flags)
                self.pass_down(StackEvent.msg_down(rsp))
            elif hdr["t"] == "not_dead":
                self._refuted(m.src)
            return
        self.pass_up(evt)

    def _start_verification(self, node):
        if node in self._verifying:
            return
        self._verifying[node] = True
        for _ in range(self.param("num_msgs")):
            m = Message(self.node_id, node, b"",
                        {"verify": pack_obj({"t": "req"})}, INTERNAL_OOB)
            self.pass_down(StackEvent.msg_down(m))

        def decide():
            if self._verifying.pop(node, None) is None:
                return
            self.metric("app.suspicions_confirmed")
            self.pass_up(StackEvent(EventKind.SUSPECT, node))
        self.set_timer(self.param("timeout") / 1000.0, decide)

    def _refuted(self, node):
        if self._verifying.pop(node, None) is not None:
            self.metric("app.suspicions_refuted")
            self.pass_down(StackEvent(EventKind.UNSUSPECT, node))
            self.pass_up(StackEvent(EventKind.UNSUSPECT, node))


@register_layer
class FdSockLayer(Layer):
    """Socket-state detector analog: watches the link to the ring neighbor.

    The real protocol holds a TCP connection open to its neighbor and
    suspects on abrupt close; here the link state itself is observed.
    """

    name = "fd_sock"
    DESCRIPTORS = (
        P("keep_alive", V.BOOLEAN, True, C.ENVIRONMENT_EXPLOITATION,
          origin="jgroups:FD_SOCK.keep_alive"),
        P("suspect_msg_interval", V.DURATION, 5000, C.INTERVALS, unit="ms",
          lo=1, origin="jgroups:FD_SOCK.suspect_msg_interval"),
    )

    def __init__(self):
        super().__init__()
        self.view: Optional[View] = None
        self.suspected = set()

    def start(self):
        self._schedule_check()

    def on_view(self, view: View):
        self.view = view
        self.suspected &= set(view.members)

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.UNSUSPECT:
            self.suspected.discard(evt.body)
        super().down(evt)

    def _neighbor(self) -> Optional[int]:
        if self.view is None:
            return None
        return next_in_ring(list(self.view.members), self.node_id,
                            self.suspected)

    def _schedule_check(self):
        def check():
            neighbor = self._neighbor()
            if neighbor is not None and neighbor not in self.suspected:
                if not self.host.network.link_up(self.node_id, neighbor):
                    self.suspected.add(neighbor)
                    self.metric("app.suspicions")
                    self.pass_up(StackEvent(EventKind.SUSPECT, neighbor))
            self._schedule_check()
        self.set_timer(self.param("suspect_msg_interval") / 1000.0, check)


# -- merge detection ------------------------------------------------------------------

@dataclass
class Merge3State:
    min_interval_ms: float = 1000
    max_interval_ms: float = 10000
    check_interval_ms: float = 3000
    cache: dict = field(default_factory=dict)  # node -> info dict


def merge_detect(st: Merge3State, now_ms: float, expiry_ms: float):
    """Group cached INFO by view id; >= 2 distinct views means a merge."""
    fresh = {n: info for n, info in st.cache.items()
             if now_ms - info["at"] <= expiry_ms}
    st.cache = fresh
    by_view = {}
    for info in fresh.values():
        key = (info["counter"], info["coord"])
        by_view.setdefault(key, {"coord": info["coord"],
                                 "counter": info["counter"],
                                 "members": tuple(info["members"])})
    if len(by_view) < 2:
        return None
    return sorted(by_view.values(), key=lambda s: (s["counter"], s["coord"]))


@register_layer
class Merge3Layer(Layer):
    """Periodic INFO exchange that detects diverging views after a heal."""

    name = "merge3"
    requires_below = ("discovery",)
    DESCRIPTORS = (
        P("min_interval", V.DURATION, 1000, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:MERGE3.min_interval"),
        P("max_interval", V.DURATION, 10000, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:MERGE3.max_interval"),
        P("check_interval", V.DURATION, 3000, C.INTERVALS, unit="ms", lo=1,
          origin="jgroups:MERGE3.check_interval"),
    )

    def __init__(self):
        super().__init__()
        self.state = Merge3State()
        self.view: Optional[View] = None
        self._last_merge_ms = -1e18

    def start(self):
        self._schedule_info()
        self._schedule_check()

    def on_view(self, view: View):
        self.view = view
        self.state.cache = {}

    def _schedule_info(self):
        lo = self.param("min_interval") / 1000.0
        hi = self.param("max_interval") / 1000.0
        delay = self.rng("info").uniform(lo, max(lo, hi))

        def fire():
            if self.view is not None:
                body = pack_obj({"t": "info", "counter": self.view.id.counter,
                                 "coord": self.view.coordinator,
                                 "members": list(self.view.members)})
                for peer in self.host.initial_members:
                    if peer != self.node_id:
                        m = Message(self.node_id, peer, b"",
                                    {"merge3": body}, INTERNAL)
                        self.pass_down(StackEvent.msg_down(m))
            self._schedule_info()
        self.set_timer(delay, fire)

    def _schedule_check(self):
        def check():
            if self.view is not None:
                self._record_own_info()
                expiry = self.param("max_interval") * 2 + \
                    self.param("check_interval")
                subviews = merge_detect(self.state, self.now_ms(), expiry)
                cooldown = self.param("check_interval") * 2
                if subviews is not None and \
                        self.now_ms() - self._last_merge_ms >= cooldown:
                    self._last_merge_ms = self.now_ms()
                    self.pass_up(StackEvent(EventKind.MERGE, subviews))
            self._schedule_check()
        self.set_timer(self.param("check_interval") / 1000.0, check)

    def _record_own_info(self):
        self.state.cache[self.node_id] = {
            "counter": self.view.id.counter, "coord": self.view.coordinator,
            "members": list(self.view.members), "at": self.now_ms()}

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.MSG_UP and "merge3" in evt.body.headers:
            hdr = unpack_obj(evt.body.headers["merge3"])
            hdr["at"] = self.now_ms()
            self.state.cache[evt.body.src] = hdr
            return
        self.pass_up(evt)


# -- group membership -------------------------------------------------------------------

@register_layer
class GmsLayer(Layer):
    """View formation and administration: join, leave, exclusion, merge."""

    name = "gms"
    requires_below = ("nakack",)
    DESCRIPTORS = (
        P("join_timeout", V.DURATION, 3000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:GMS.join_timeout"),
        P("leave_timeout", V.DURATION, 3000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:GMS.leave_timeout"),
        P("merge_timeout", V.DURATION, 5000, C.TIMEOUTS, unit="ms", lo=1,
          origin="jgroups:GMS.merge_timeout"),
        P("max_join_attempts", V.INTEGER, 10, C.REPETITIONS, lo=0,
          origin="jgroups:GMS.max_join_attempts"),
        P("view_ack_collection_timeout", V.DURATION, 2000, C.TIMEOUTS,
          unit="ms", lo=1,
          origin="jgroups:GMS.view_ack_collection_timeout"),
    )

    def __init__(self):
        super().__init__()
        self.current: Optional[View] = None
        self.joined = False
        self.leaving = False
        self.suspected = set()
        self._join_attempts = 0
        self._pending_view = None        # {"view", "acks", "merge", "done"}
        self._pending_changes = []       # queued membership ops

    def start(self):
        if getattr(self.host, "is_initial_coordinator", False):
            self._install(View(ViewId(1, self.node_id), (self.node_id,)))
            self.joined = True
        else:
            self.set_timer(0.0, self._try_join)

    # -- joining ---------------------------------------------------------------

    def _try_join(self):
        if self.joined:
            return
        self._join_attempts += 1
        if self.stack.has_layer("discovery"):
            self.stack.layer("discovery").find_coordinator(self._join_with)
        else:
            # no discovery layer: ask the first configured member
            candidates = [m for m in self.host.initial_members
                          if m != self.node_id]
            self._join_with(candidates[0] if candidates else None)

    def _join_with(self, coord):
        if self.joined:
            return
        if coord is not None and coord != self.node_id:
            self._ctl(coord, pack_obj({"t": "join_req", "node": self.node_id}))

        def check():
            if self.joined:
                return
            max_attempts = self.param("max_join_attempts")
            if max_attempts and self._join_attempts >= max_attempts:
                self.metric("app.join_gave_up")
                self._install(View(ViewId(1, self.node_id), (self.node_id,)))
                self.joined = True
            else:
                self._try_join()
        self.set_timer(self.param("join_timeout") / 1000.0, check)

    # -- view proposal (coordinator side) ----------------------------------------

    def _propose(self, change):
        self._pending_changes.append(change)
        self._next_change()

    def _next_change(self):
        if self._pending_view is not None or not self._pending_changes:
            return
        change = self._pending_changes.pop(0)
        members = list(self.current.members)
        kind = change["op"]
        node = change.get("node")
        if kind == "join":
            if node in members:
                self._ctl(node, self._view_body("join_rsp", self.current))
                self._next_change()
                return
            members = members + [node]
        elif kind == "leave":
            if node not in members:
                self._next_change()
                return
            members = [m for m in members if m != node]
        elif kind == "exclude_set":
            gone = set(change["nodes"]) & set(members)
            if not gone:
                self._next_change()
                return
            members = [m for m in members if m not in gone]
        elif kind == "merge":
            members = change["members"]
        if not members:
            return
        counter = change.get("counter", self.current.id.counter + 1)
        view = View(ViewId(counter, members[0]), tuple(members))
        self._pending_view = {"view": view, "acks": {self.node_id},
                              "done": False, "merge": kind == "merge"}
        if kind == "merge":
            for m in members:
                if m != self.node_id:
                    self._ctl(m, self._view_body("merge_view", view))
        else:
            bcast = Message(self.node_id, None, b"",
                            {"gms": self._view_body("view", view)},
                            frozenset())
            self.pass_down(StackEvent.msg_down(bcast))
            if kind == "join":
                self._ctl(node, self._view_body("join_rsp", view))

        def ack_timeout():
            pending = self._pending_view
            if pending is not None and pending["view"].id == view.id and \
                    not pending["done"]:
                self._complete_pending()
        self.set_timer(self.param("view_ack_collection_timeout") / 1000.0,
                       ack_timeout)

    def _complete_pending(self):
        pending = self._pending_view
        pending["done"] = True
        self._pending_view = None
        self._install(pending["view"], merge=pending.get("merge", False))
        self._next_change()

    def _view_body(self, kind, view: View) -> bytes:
        return pack_obj({"t": kind, "counter": view.id.counter,
                         "members": list(view.members)})

    # -- event handling -------------------------------------------------------------

    def up(self, evt: StackEvent):
        if evt.kind == EventKind.SUSPECT:
            self._on_confirmed_suspect(evt.body)
            self.pass_up(evt)
            return
        if evt.kind == EventKind.UNSUSPECT:
            self.suspected.discard(evt.body)
            self.pass_up(evt)
            return
        if evt.kind == EventKind.MERGE:
            self._on_merge(evt.body)
            self.pass_up(evt)
            return
        if evt.kind == EventKind.MSG_UP and "gms" in evt.body.headers:
            self._on_ctl(evt.body)
            return
        self.pass_up(evt)

    def _on_ctl(self, m: Message):
        hdr = unpack_obj(m.headers["gms"])
        kind = hdr["t"]
        if kind == "join_req":
            if self.current is None:
                return
            if self.current.coordinator == self.node_id:
                self._propose({"op": "join", "node": hdr["node"]})
            else:
                self._ctl(self.current.coordinator, m.headers["gms"])
        elif kind == "leave_req":
            if self.current is not None and \
                    self.current.coordinator == self.node_id:
                self._propose({"op": "leave", "node": hdr["node"]})
        elif kind in ("view", "join_rsp", "merge_view"):
            view = View(ViewId(hdr["counter"], hdr["members"][0]),
                        tuple(hdr["members"]))
            if kind == "join_rsp":
                self.joined = True
            self._ctl(view.coordinator,
                      pack_obj({"t": "view_ack", "counter": hdr["counter"]}))
            if view.coordinator == self.node_id:
                return  # own ack is recorded; installation follows acks
            self._install(view, merge=(kind == "merge_view"))
        elif kind == "view_ack":
            pending = self._pending_view
            if pending is not None and \
                    hdr["counter"] == pending["view"].id.counter:
                pending["acks"].add(m.src)
                if pending["acks"] >= set(pending["view"].members) and \
                        not pending["done"]:
                    self._complete_pending()

    def _on_confirmed_suspect(self, node):
        if self.current is None or node not in self.current.members:
            return
        self.suspected.add(node)
        self._maybe_exclude()

    def _maybe_exclude(self):
        """The first unsuspected member proposes a view without suspects."""
        if self.current is None:
            return
        targets = [m for m in self.current.members if m in self.suspected]
        survivors = [m for m in self.current.members
                     if m not in self.suspected]
        if not targets or not survivors:
            return
        if survivors[0] == self.node_id:
            self._propose({"op": "exclude_set", "nodes": targets})

    def _on_merge(self, subviews):
        if self.current is None:
            return
        coords = [s["coord"] for s in subviews]
        leader = min(coords)
        if self.node_id != leader:
            return
        union = sorted({m for s in subviews for m in s["members"]})
        counter = max(s["counter"] for s in subviews) + 1
        self._propose({"op": "merge", "members": union, "counter": counter})

    # -- installation ------------------------------------------------------------------

    def _install(self, view: View, merge: bool = False):
        if self.current is not None and view.id <= self.current.id:
            return
        if self.node_id not in view.members:
            self.pass_up(StackEvent(EventKind.EXCLUDED, view))
            if self.leaving:
                self.set_timer(0.0, self.stack.close)
            return
        self.current = view
        self.joined = True
        self.suspected &= set(view.members)
        self.metric("app.view_changes")
        evt = StackEvent.view_change(view)
        self.pass_down(evt)
        self.pass_up(evt)
        if merge:
            self.stack.layer("nakack").merge_rebase()
        if self.suspected:
            self._maybe_exclude()

    def leave(self):
        """Graceful exit: ask for a view without us, close either way."""
        if self.current is None or self.leaving:
            return
        self.leaving = True
        if self.current.coordinator == self.node_id:
            self._propose({"op": "leave", "node": self.node_id})
        else:
            self._ctl(self.current.coordinator,
                      pack_obj({"t": "leave_req", "node": self.node_id}))

        def finish():
            if not self.stack.closed:
                self.stack.close()
        self.set_timer(self.param("leave_timeout") / 1000.0, finish)

    def _ctl(self, dest, body: bytes):
        m = Message(self.node_id, dest, b"", {"gms": body}, INTERNAL)
        self.pass_down(StackEvent.msg_down(m))


# -- sequencer -----------------------------------------------------------------------------

@dataclass
class SequencerState:
    coordinator: Optional[int] = None
    next_global_seqno: int = 1
    next_local_id: int = 1
    pending: dict = field(default_factory=dict)   # local id -> Message
    seen: set = field(default_factory=set)        # (origin, local id)


@register_layer
class SequencerLayer(Layer):
    """Coordinator-assigned total order for application multicasts."""

    name = "sequencer"
    requires_below = ("nakack", "gms")
    DESCRIPTORS = ()

    def __init__(self):
        super().__init__()
        self.state = SequencerState()

    def on_view(self, view: View):
        st = self.state
        was = st.coordinator
        st.coordinator = view.coordinator
        if st.coordinator == self.node_id and was != self.node_id:
            st.next_global_seqno = 1
        if st.pending and st.coordinator is not None:
            for local_id in sorted(st.pending):
                self._forward(local_id, st.pending[local_id])

    def down(self, evt: StackEvent):
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
            self.pass_down(evt)
            return
        if evt.kind != EventKind.MSG_DOWN:
            self.pass_down(evt)
            return
        m = evt.body
        if not m.is_multicast() or MessageFlag.INTERNAL in m.flags:
            self.pass_down(evt)
            return
        st = self.state
        local_id = st.next_local_id
        st.next_local_id += 1
        st.pending[local_id] = m.copy()
        if st.coordinator == self.node_id:
            self._sequence(self.node_id, local_id, m)
        elif st.coordinator is not None:
            self._forward(local_id, m)

    def _forward(self, local_id, m: Message):
        body = pack_obj({"t": "fwd", "o": self.node_id, "i": local_id,
                         "m": b64(encode_message(m))})
        # not INTERNAL: the reliable unicast layer below must carry forwards
        fwd = Message(self.node_id, self.state.coordinator, b"",
                      {"sequencer": body}, frozenset())
        self.pass_down(StackEvent.msg_down(fwd))

    def _sequence(self, origin, local_id, m: Message):
        st = self.state
        if (origin, local_id) in st.seen:
            return
        body = pack_obj({"t": "seq", "g": st.next_global_seqno, "o": origin,
                         "i": local_id, "m": b64(encode_message(m))})
        st.next_global_seqno += 1
        out = Message(self.node_id, None, b"", {"sequencer": body},
                      frozenset())
        self.pass_down(StackEvent.msg_down(out))

    def up(self, evt: StackEvent):
        if evt.kind != EventKind.MSG_UP or \
                "sequencer" not in evt.body.headers:
            super().up(evt)
            return
        m = evt.body
        hdr = unpack_obj(m.headers["sequencer"])
        st = self.state
        if hdr["t"] == "fwd":
            if st.coordinator == self.node_id:
                inner = decode_message(unb64(hdr["m"]))
                self._sequence(hdr["o"], hdr["i"], inner)
            return
        if hdr["t"] == "seq":
            key = (hdr["o"], hdr["i"])
            if key in st.seen:
                self.metric("app.duplicates_discarded")
                return
            st.seen.add(key)
            if hdr["o"] == self.node_id:
                st.pending.pop(hdr["i"], None)
            inner = decode_message(unb64(hdr["m"]))
            self.pass_up(StackEvent.msg_up(inner))
