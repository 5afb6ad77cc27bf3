"""Runtime control surface: JSON over HTTP plus a server-sent event stream.

Handlers never touch simulation state directly: every read and write is
marshalled onto the simulation loop through a command queue, preserving
the single-writer discipline. With no inbound requests the API is inert
and a run's report is byte-identical with the API on or off.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .cluster import NodeDownError
from .params import ControlCategory, Mutability, UnknownParameterError

ROLE_OBSERVER = "OBSERVER"
ROLE_OPERATOR = "OPERATOR"
ROLE_TTP = "TTP"

_ROLE_RANK = {ROLE_OBSERVER: 0, ROLE_OPERATOR: 1, ROLE_TTP: 2}


class SimBridge:
    """Runs the experiment on its own thread and brokers API commands."""

    def __init__(self, experiment, realtime: bool = False,
                 speed: float = 1.0):
        self.experiment = experiment
        self.realtime = realtime
        self.speed = speed
        self.commands: "queue.Queue" = queue.Queue()
        self.report = None
        self.stop_requested = False
        self._thread: Optional[threading.Thread] = None

    # -- called from the simulation thread ------------------------------------

    def drain(self) -> None:
        while True:
            try:
                fn, done, holder = self.commands.get_nowait()
            except queue.Empty:
                return
            try:
                holder["result"] = fn()
            except Exception as exc:  # surfaced to the API caller
                holder["error"] = exc
            done.set()

    def run(self) -> None:
        if self.realtime:
            self._run_realtime()
        else:
            self.report = self.experiment.run(between_events=self.drain)

    def _run_realtime(self) -> None:
        exp = self.experiment
        exp.setup()
        clock = exp.cluster.clock
        start = time.monotonic()
        duration = exp.spec.duration
        while not self.stop_requested:
            self.drain()
            target = (time.monotonic() - start) * self.speed
            target = min(target, duration)
            clock.run_until(target, between_events=self.drain)
            exp._check_stall()
            if target >= duration:
                break
            time.sleep(0.002)
        exp.elapsed = clock.now
        from .report import build_report
        self.report = build_report(exp)

    def start_thread(self) -> None:
        self._thread = threading.Thread(target=self.run, daemon=True)
        self._thread.start()

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)

    # -- called from HTTP handler threads ----------------------------------------

    def call(self, fn, timeout: float = 5.0):
        done = threading.Event()
        holder = {}
        self.commands.put((fn, done, holder))
        if not done.wait(timeout):
            raise TimeoutError("simulation loop did not answer in time")
        if "error" in holder:
            raise holder["error"]
        return holder.get("result")


class ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str = ""):
        super().__init__(code)
        self.status = status
        self.code = code
        self.detail = detail


class ControlApi:
    """Route table and business logic, independent of the HTTP plumbing."""

    def __init__(self, bridge: SimBridge, tokens: Optional[dict] = None):
        self.bridge = bridge
        tokens = tokens or {}
        self.tokens = {
            tokens.get("observer_token", "observer"): ROLE_OBSERVER,
            tokens.get("operator_token", "operator"): ROLE_OPERATOR,
            tokens.get("ttp_token", "ttp"): ROLE_TTP,
        }

    # -- auth ------------------------------------------------------------------

    def role_for(self, token: Optional[str]) -> str:
        if token is None or token not in self.tokens:
            raise ApiError(401, "UNAUTHENTICATED", "unknown token")
        return self.tokens[token]

    def require(self, token: Optional[str], minimum: str) -> str:
        role = self.role_for(token)
        if _ROLE_RANK[role] < _ROLE_RANK[minimum]:
            raise ApiError(403, "FORBIDDEN",
                           f"{role} may not perform this action")
        return role

    # -- reads ------------------------------------------------------------------

    def get_parameters(self, token, category: Optional[str] = None) -> dict:
        self.role_for(token)
        if category is not None:
            try:
                category_enum = ControlCategory[category]
            except KeyError:
                raise ApiError(400, "UNKNOWN_CATEGORY", category) from None
        else:
            category_enum = None

        def read():
            exp = self.bridge.experiment
            alive = exp.cluster.alive()
            registry = alive[0].node.registry if alive else None
            rows = []
            if registry is None:
                return rows
            for desc, value in registry.slice(category_enum):
                rows.append({
                    "path": desc.path,
                    "category": desc.category.name,
                    "mutability": desc.mutability.value,
                    "value_type": desc.value_type.value,
                    "default": desc.default,
                    "value": value,
                    "unit": desc.unit,
                    "supported": desc.supported,
                })
            return rows
        return {"parameters": self.bridge.call(read)}

    def get_metrics(self, token) -> dict:
        self.role_for(token)

        def read():
            exp = self.bridge.experiment
            out = {}
            for rid, replica in sorted(exp.cluster.replicas.items()):
                try:
                    snap = replica.node.sample()
                    out[str(rid)] = {"timestamp": snap.timestamp,
                                     "metrics": snap.metrics}
                except NodeDownError:
                    out[str(rid)] = {"down": True}
            out["cluster"] = cluster_rollup(exp)
            return out
        return self.bridge.call(read)

    def get_topology(self, token) -> dict:
        self.role_for(token)

        def read():
            exp = self.bridge.experiment
            leader = exp.cluster.leader()
            return {
                "time": exp.cluster.clock.now,
                "members": exp.cluster.replicas and
                sorted(next(iter(exp.cluster.replicas.values()))
                       .membership),
                "leader": leader.id if leader else None,
                "nodes": {str(rid): {
                    "alive": r.node.alive,
                    "active": r.active,
                    "exec_point": r.exec_point,
                    "ballot": r.ballot,
                } for rid, r in sorted(exp.cluster.replicas.items())},
            }
        return self.bridge.call(read)

    # -- writes ------------------------------------------------------------------

    def post_parameter(self, token, path: str, value,
                       node: Optional[int] = None) -> dict:
        self.require(token, ROLE_OPERATOR)

        def apply():
            return self.bridge.experiment.apply_mutation(path, value,
                                                         node=node)
        mutation = self.bridge.call(apply)
        deadline = time.monotonic() + 3.0
        while not mutation.resolved() and time.monotonic() < deadline:
            self.bridge.call(lambda: None)
            time.sleep(0.005)
        return {
            "path": mutation.path, "value": str(mutation.value),
            "node": mutation.node,
            "requested_at": mutation.requested_at,
            "applied_at": mutation.applied_at,
            "outcome": mutation.outcome or "PENDING",
            "reason": mutation.reason,
        }

    def post_view_change(self, token, action: str, node: int) -> dict:
        self.require(token, ROLE_TTP)
        from .smr.replica import ReconfigError

        def apply():
            exp = self.bridge.experiment
            credential = exp.cluster.cfg.ttp_id
            return exp.reconfigure_view(credential, action, node)
        try:
            return self.bridge.call(apply)
        except ReconfigError as exc:
            raise ApiError(400, str(exc)) from exc

    def post_fault(self, token, node: int, action: str) -> dict:
        self.require(token, ROLE_OPERATOR)

        def apply():
            exp = self.bridge.experiment
            exp.inject_fault(node, action, at=exp.cluster.clock.now)
            return {"node": node, "action": action,
                    "at": exp.cluster.clock.now}
        return self.bridge.call(apply)

    # -- streaming ------------------------------------------------------------------

    def stream_frames(self, token, interval_ms: float, stop_event):
        """Generator of (event_name, payload) SSE frames."""
        self.role_for(token)
        cursor = 0
        interval = max(interval_ms, 50) / 1000.0
        while not stop_event.is_set():
            def read(cursor=cursor):
                exp = self.bridge.experiment
                events = exp.events[cursor:]
                nodes = {}
                for rid, replica in sorted(exp.cluster.replicas.items()):
                    try:
                        snap = replica.node.sample()
                        nodes[str(rid)] = snap.metrics
                    except NodeDownError:
                        nodes[str(rid)] = {"down": True}
                return (exp.cluster.clock.now, events, nodes,
                        cluster_rollup(exp))
            try:
                now, events, nodes, rollup = self.bridge.call(read)
            except TimeoutError:
                return
            for event in events:
                yield "event", {"ts": event.get("t"), "kind": "EVENT",
                                "body": event}
            cursor += len(events)
            for rid, metrics in nodes.items():
                yield "metrics", {"ts": now, "kind": "METRICS", "node": rid,
                                  "body": metrics}
            yield "metrics", {"ts": now, "kind": "METRICS",
                              "node": "cluster", "body": rollup}
            if stop_event.wait(interval):
                return


def cluster_rollup(exp) -> dict:
    latencies = [e["latency"] for c in exp.clients for e in c.completed]
    completed = sum(len(c.completed) for c in exp.clients)
    submitted = sum(c.submitted for c in exp.clients)
    now = exp.cluster.clock.now
    recent = [e["latency"] for c in exp.clients for e in c.completed
              if now - e["reply_at"] <= 5.0]
    out = {
        "completed": completed,
        "submitted": submitted,
        "outstanding": submitted - completed,
        "throughput_rps": completed / now if now > 0 else 0.0,
        "sim_time": now,
        "status": exp.status,
    }
    if latencies:
        ordered = sorted(recent or latencies)
        from .cluster import percentile
        out["latency_p50"] = percentile(ordered, 0.5)
        out["latency_p90"] = percentile(ordered, 0.9)
        out["latency_p99"] = percentile(ordered, 0.99)
        out["latency_mean"] = sum(ordered) / len(ordered)
    return out


def _token_from(handler) -> Optional[str]:
    auth = handler.headers.get("Authorization", "")
    if auth.startswith("Bearer "):
        return auth[len("Bearer "):].strip()
    qs = parse_qs(urlparse(handler.path).query)
    values = qs.get("token")
    return values[0] if values else None


def make_http_server(api: ControlApi, host: str = "127.0.0.1",
                     port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _json(self, status: int, payload) -> None:
            blob = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(blob)

        def _error(self, exc: ApiError) -> None:
            self._json(exc.status, {"error": exc.code,
                                    "detail": exc.detail})

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers",
                             "Authorization, Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            token = _token_from(self)
            parsed = urlparse(self.path)
            qs = parse_qs(parsed.query)
            try:
                if parsed.path == "/v1/parameters":
                    category = qs.get("category", [None])[0]
                    self._json(200, api.get_parameters(token, category))
                elif parsed.path == "/v1/metrics":
                    self._json(200, api.get_metrics(token))
                elif parsed.path == "/v1/topology":
                    self._json(200, api.get_topology(token))
                elif parsed.path == "/v1/stream":
                    self._stream(token, qs)
                else:
                    self._json(404, {"error": "NOT_FOUND"})
            except ApiError as exc:
                self._error(exc)
            except (BrokenPipeError, ConnectionResetError):
                pass

        def _stream(self, token, qs):
            interval = float(qs.get("interval_ms", ["1000"])[0])
            api.role_for(token)  # fail before committing to the stream
            import socket as _socket
            self.connection.setsockopt(_socket.SOL_SOCKET,
                                       _socket.SO_SNDBUF, 16384)
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            stop = threading.Event()
            # outbound queue with backpressure handling: a slow consumer
            # gets its pending METRICS frame per node replaced by the
            # freshest one, while EVENT frames are never dropped
            pending = []
            cond = threading.Condition()

            def produce():
                try:
                    for name, payload in api.stream_frames(token, interval,
                                                           stop):
                        with cond:
                            if name == "metrics":
                                node = payload.get("node")
                                pending[:] = [
                                    (n, p) for n, p in pending
                                    if not (n == "metrics" and
                                            p.get("node") == node)]
                            pending.append((name, payload))
                            cond.notify()
                finally:
                    stop.set()
                    with cond:
                        cond.notify()

            producer = threading.Thread(target=produce, daemon=True)
            producer.start()
            try:
                while True:
                    with cond:
                        while not pending and not stop.is_set():
                            cond.wait(timeout=1.0)
                        if not pending and stop.is_set():
                            return
                        name, payload = pending.pop(0)
                    blob = json.dumps(payload, sort_keys=True)
                    self.wfile.write(
                        f"event: {name}\ndata: {blob}\n\n".encode())
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                stop.set()

        def do_POST(self):
            token = _token_from(self)
            parsed = urlparse(self.path)
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode() or "{}")
            except ValueError:
                self._json(400, {"error": "BAD_JSON"})
                return
            try:
                if parsed.path.startswith("/v1/parameters/"):
                    path = parsed.path[len("/v1/parameters/"):]
                    out = api.post_parameter(token, path,
                                             body.get("value"),
                                             body.get("node"))
                    self._json(200, out)
                elif parsed.path == "/v1/view":
                    out = api.post_view_change(token, body.get("action"),
                                               int(body.get("node")))
                    self._json(200, out)
                elif parsed.path == "/v1/faults":
                    out = api.post_fault(token, int(body.get("node")),
                                         body.get("action"))
                    self._json(200, out)
                else:
                    self._json(404, {"error": "NOT_FOUND"})
            except ApiError as exc:
                self._error(exc)
            except UnknownParameterError as exc:
                self._json(404, {"error": "UNKNOWN_PARAMETER",
                                 "detail": str(exc)})
            except Exception as exc:
                self._json(400, {"error": type(exc).__name__,
                                 "detail": str(exc)})

    server = ThreadingHTTPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def serve_experiment(experiment, tokens: Optional[dict] = None,
                     host: str = "127.0.0.1", port: int = 0,
                     realtime: bool = True, speed: float = 1.0):
    """Start the bridge thread and HTTP server; returns (bridge, server)."""
    bridge = SimBridge(experiment, realtime=realtime, speed=speed)
    api = ControlApi(bridge, tokens)
    server = make_http_server(api, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    bridge.start_thread()
    return bridge, server
