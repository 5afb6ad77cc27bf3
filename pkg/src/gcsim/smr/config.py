"""Replica configuration: the property-file keys and their registry entries.

The config file uses the upstream key names (WindowSize, BatchSize,
CrashModel, process.<id> = host:replica_port:client_port, system.ttp.id,
...). ViewSS and EpochSS are recognized names that fail fast: only
CrashStop and FullStableStorage are implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional

from ..core import GcsimError
from ..params import ControlCategory as C
from ..params import Mutability as M
from ..params import ParameterDescriptor as P
from ..params import ValueType as V


class UnsupportedCrashModelError(GcsimError):
    pass


class CrashModel(Enum):
    CRASH_STOP = "CrashStop"
    FULL_STABLE_STORAGE = "FullStableStorage"


_KNOWN_UNSUPPORTED_MODELS = ("ViewSS", "EpochSS")


@dataclass
class ProcessEntry:
    node: int
    host: str
    replica_port: int
    client_port: int


@dataclass
class ReplicaConfig:
    id: int = 0
    processes: list = field(default_factory=list)   # ProcessEntry
    initial_view: Optional[list] = None             # defaults to all processes
    window_size: int = 2
    batch_size: int = 65507
    max_batch_delay: float = 10.0          # ms
    max_batch_fetch_time: float = 2500.0   # ms
    indirect_consensus: bool = False
    network: str = "TCP"                   # TCP | UDP | Generic
    max_udp_packet_size: int = 8192
    crash_model: CrashModel = CrashModel.FULL_STABLE_STORAGE
    log_path: str = "jpaxosLogs"
    retransmit_timeout: float = 1000.0     # ms
    fd_suspect_to: float = 1000.0          # ms
    fd_send_to: float = 1000.0             # ms
    snapshot_min_log_size: int = 100 * 1024
    snapshot_ask_ratio: float = 1.0
    snapshot_force_ratio: float = 2.0
    min_snapshot_sampling: int = 50
    forward_max_batch_size: int = 1450     # bytes
    forward_max_batch_delay: float = 50.0  # ms
    client_request_buffer_size: int = 8212 * 1024  # as documented upstream
    selector_threads: int = -1             # auto; no further semantics
    high_mark: int = 10000
    revival_high_mark: int = 10
    checkpoint_period: int = 1000
    global_checkpoint_period: int = 12000
    in_queue_size: int = 100000
    out_queue_size: int = 100000
    state_transfer: bool = True
    log_enabled: bool = True
    log_to_disk: bool = False
    sync_log: bool = False
    checkpoint_to_disk: bool = False
    sync_ckp: bool = False
    use_sender_thread: bool = True
    use_macs: bool = False
    use_signatures: bool = False
    hmac_algorithm: str = "HmacMD5"
    ttp_id: int = 7002
    client_retry_timeout: float = 3000.0   # ms

    def members(self) -> list:
        if self.initial_view is not None:
            return list(self.initial_view)
        return [p.node for p in self.processes]

    def all_process_ids(self) -> list:
        return [p.node for p in self.processes]


_KEY_MAP = {
    "windowsize": "window_size",
    "window_size": "window_size",
    "batchsize": "batch_size",
    "batch_size": "batch_size",
    "maxbatchdelay": "max_batch_delay",
    "max_batch_delay": "max_batch_delay",
    "maxbatchfetchingtimems": "max_batch_fetch_time",
    "max_batch_fetching_time_ms": "max_batch_fetch_time",
    "indirectconsensus": "indirect_consensus",
    "indirect_consensus": "indirect_consensus",
    "network": "network",
    "maxudppacketsize": "max_udp_packet_size",
    "max_udp_packet_size": "max_udp_packet_size",
    "logpath": "log_path",
    "log_path": "log_path",
    "retransmittimeout": "retransmit_timeout",
    "retransmit_timeout": "retransmit_timeout",
    "fdsuspectto": "fd_suspect_to",
    "fd_suspect_to": "fd_suspect_to",
    "fdsendto": "fd_send_to",
    "fd_send_to": "fd_send_to",
    "snapshotminlogsize": "snapshot_min_log_size",
    "snapshot_min_log_size": "snapshot_min_log_size",
    "snapshotaskratio": "snapshot_ask_ratio",
    "snapshot_ask_ratio": "snapshot_ask_ratio",
    "snapshotforceratio": "snapshot_force_ratio",
    "snapshot_force_ratio": "snapshot_force_ratio",
    "minsnapshotsampling": "min_snapshot_sampling",
    "min_snapshot_sampling": "min_snapshot_sampling",
    "forwardmaxbatchsize": "forward_max_batch_size",
    "forward_max_batch_size": "forward_max_batch_size",
    "forwardmaxbatchdelay": "forward_max_batch_delay",
    "forward_max_batch_delay": "forward_max_batch_delay",
    "clientrequestbuffersize": "client_request_buffer_size",
    "client_request_buffer_size": "client_request_buffer_size",
    "selectorthreads": "selector_threads",
    "selector_threads": "selector_threads",
    "clientretrytimeout": "client_retry_timeout",
    # BFT-SMaRt-style dotted keys
    "system.totalordermulticast.highmark": "high_mark",
    "system.totalordermulticast.revival_highmark": "revival_high_mark",
    "system.totalordermulticast.checkpoint_period": "checkpoint_period",
    "system.totalordermulticast.global_checkpoint_period":
        "global_checkpoint_period",
    "system.totalordermulticast.state_transfer": "state_transfer",
    "system.totalordermulticast.log": "log_enabled",
    "system.totalordermulticast.log_to_disk": "log_to_disk",
    "system.totalordermulticast.sync_log": "sync_log",
    "system.totalordermulticast.checkpoint_to_disk": "checkpoint_to_disk",
    "system.totalordermulticast.sync_ckp": "sync_ckp",
    "system.communication.inqueuesize": "in_queue_size",
    "system.communication.outqueuesize": "out_queue_size",
    "system.communicatin.usesenderthread": "use_sender_thread",
    "system.communication.usemacs": "use_macs",
    "system.communication.usesignatures": "use_signatures",
    "system.authentication.hmacalgorithm": "hmac_algorithm",
    "system.ttp.id": "ttp_id",
}

_BOOL_FIELDS = {"indirect_consensus", "state_transfer", "log_enabled",
                "log_to_disk", "sync_log", "checkpoint_to_disk", "sync_ckp",
                "use_sender_thread", "use_macs", "use_signatures"}
_FLOAT_FIELDS = {"max_batch_delay", "max_batch_fetch_time",
                 "retransmit_timeout", "fd_suspect_to", "fd_send_to",
                 "snapshot_ask_ratio", "snapshot_force_ratio",
                 "forward_max_batch_delay", "client_retry_timeout"}
_STR_FIELDS = {"network", "log_path", "hmac_algorithm"}


def _coerce(field_name: str, raw: str):
    raw = raw.strip()
    if field_name in _BOOL_FIELDS:
        return raw.lower() in ("true", "1", "yes")
    if field_name in _STR_FIELDS:
        return raw
    if field_name in _FLOAT_FIELDS:
        return float(raw)
    return int(float(raw))


def parse_replica_config(entries: dict, replica_id: int = 0) -> ReplicaConfig:
    """Build a ReplicaConfig from key=value entries (string values)."""
    cfg = ReplicaConfig(id=replica_id)
    for key, raw in entries.items():
        key_l = key.strip().lower()
        if key_l.startswith("process."):
            node = int(key_l.split(".", 1)[1])
            host, rport, cport = raw.strip().split(":")
            cfg.processes.append(ProcessEntry(node, host, int(rport),
                                              int(cport)))
            continue
        if key_l == "crashmodel" or key_l == "crash_model":
            name = raw.strip()
            if name in _KNOWN_UNSUPPORTED_MODELS:
                raise UnsupportedCrashModelError(
                    f"UNSUPPORTED_CRASH_MODEL: {name}")
            try:
                cfg.crash_model = CrashModel(name)
            except ValueError:
                raise UnsupportedCrashModelError(
                    f"UNSUPPORTED_CRASH_MODEL: {name}") from None
            continue
        if key_l == "system.initial.view":
            cfg.initial_view = [int(x) for x in raw.split(",") if x.strip()]
            continue
        if key_l == "system.bft":
            if raw.strip().lower() in ("true", "1", "yes"):
                raise GcsimError("UNSUPPORTED: system.bft=true "
                                 "(crash-only mode is implemented)")
            continue
        if key_l in ("system.servers.num", "system.servers.f",
                     "system.total.ordermulticast.nonces",
                     "system.totalordermulticast.log_parallel",
                     "system.totalordermulticast.maxbatchsize",
                     "system.totalordermulticast.timeout"):
            # derived, unsupported, or mapped onto the JPaxos-analog knobs
            continue
        field_name = _KEY_MAP.get(key_l)
        if field_name is not None:
            setattr(cfg, field_name, _coerce(field_name, str(raw)))
    cfg.processes.sort(key=lambda p: p.node)
    return cfg


def config_from_descriptor_values(registry_get) -> dict:
    """Current smr.* registry values as a field->value dict."""
    out = {}
    for f in fields(ReplicaConfig):
        path = f"smr.{f.name}"
        try:
            out[f.name] = registry_get(path)
        except Exception:
            continue
    return out


SMR_DESCRIPTORS = (
    P("smr.process", V.ENUM, "static", C.MEMBERS_REPLICAS, M.RESTART_ONLY,
      choices=("static",), origin="jpaxos:PROCESS"),
    P("smr.num_replicas", V.INTEGER, 3, C.MEMBERS_REPLICAS, M.RESTART_ONLY,
      lo=1, origin="bftsmart:system.servers.num"),
    P("smr.max_faulty", V.INTEGER, 1, C.MEMBERS_REPLICAS, M.RESTART_ONLY,
      lo=0, origin="bftsmart:system.servers.f"),
    P("smr.initial_view", V.ENUM, "all", C.MEMBERS_REPLICAS, M.RESTART_ONLY,
      choices=("all", "subset"), origin="bftsmart:system.initial.view"),
    P("smr.ttp_id", V.INTEGER, 7002, C.MEMBERS_REPLICAS, M.RESTART_ONLY,
      origin="bftsmart:system.ttp.id"),
    P("smr.bft", V.BOOLEAN, False, C.SECURITY, M.RESTART_ONLY,
      supported=False, origin="bftsmart:system.bft"),
    P("smr.crash_model", V.ENUM, "FullStableStorage",
      C.SUBSTITUTABLE_COMPONENTS, M.RESTART_ONLY,
      choices=("CrashStop", "FullStableStorage"),
      origin="jpaxos:CRASH_MODEL"),
    P("smr.log_path", V.ENUM, "jpaxosLogs", C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, choices=("jpaxosLogs",), assigned=True,
      origin="jpaxos:LOG_PATH"),
    P("smr.window_size", V.INTEGER, 2, C.BATCHING_BUNDLING, lo=1,
      assigned=True, origin="jpaxos:WINDOW_SIZE"),
    P("smr.batch_size", V.BYTES, 65507, C.BATCHING_BUNDLING, unit="bytes",
      lo=1, origin="jpaxos:BATCH_SIZE"),
    P("smr.max_batch_delay", V.DURATION, 10, C.BATCHING_BUNDLING, unit="ms",
      lo=0, origin="jpaxos:MAX_BATCH_DELAY"),
    P("smr.max_batch_fetch_time", V.DURATION, 2500, C.TIMEOUTS, unit="ms",
      lo=1, origin="jpaxos:MAX_BATCH_FETCHING_TIME_MS"),
    P("smr.indirect_consensus", V.BOOLEAN, False, C.SUBSTITUTABLE_COMPONENTS,
      M.RESTART_ONLY, origin="jpaxos:INDIRECT_CONSENSUS"),
    P("smr.network", V.ENUM, "TCP", C.SUBSTITUTABLE_COMPONENTS,
      M.RESTART_ONLY, choices=("TCP", "UDP", "Generic"),
      origin="jpaxos:NETWORK"),
    P("smr.max_udp_packet_size", V.BYTES, 8192, C.CACHES, M.RESTART_ONLY,
      unit="bytes", lo=64, origin="jpaxos:MAX_UDP_PACKET_SIZE"),
    P("smr.retransmit_timeout", V.DURATION, 1000, C.TIMEOUTS, unit="ms",
      lo=1, origin="jpaxos:RETRANSMIT_TIMEOUT"),
    P("smr.fd_suspect_to", V.DURATION, 1000, C.TIMEOUTS, unit="ms", lo=1,
      origin="jpaxos:FD_SUSPECT_TO"),
    P("smr.fd_send_to", V.DURATION, 1000, C.INTERVALS, unit="ms", lo=1,
      origin="jpaxos:FD_SEND_TO"),
    P("smr.snapshot_min_log_size", V.BYTES, 100 * 1024, C.INTERVALS,
      unit="bytes", lo=1, assigned=True,
      origin="jpaxos:SNAPSHOT_MIN_LOG_SIZE"),
    P("smr.snapshot_ask_ratio", V.FLOAT, 1.0, C.INTERVALS, lo=0.0,
      assigned=True, origin="jpaxos:SNAPSHOT_ASK_RATIO"),
    P("smr.snapshot_force_ratio", V.FLOAT, 2.0, C.INTERVALS, lo=0.0,
      assigned=True, origin="jpaxos:SNAPSHOT_FORCE_RATIO"),
    P("smr.min_snapshot_sampling", V.INTEGER, 50, C.INTERVALS, lo=0,
      assigned=True, origin="jpaxos:MIN_SNAPSHOT_SAMPLING"),
    P("smr.forward_max_batch_size", V.BYTES, 1450, C.BATCHING_BUNDLING,
      unit="bytes", lo=1, origin="jpaxos:FORWARD_MAX_BATCH_SIZE"),
    P("smr.forward_max_batch_delay", V.DURATION, 50, C.BATCHING_BUNDLING,
      unit="ms", lo=0, origin="jpaxos:FORWARD_MAX_BATCH_DELAY"),
    P("smr.client_request_buffer_size", V.BYTES, 8212 * 1024, C.CACHES,
      M.RESTART_ONLY, unit="bytes", lo=1,
      origin="jpaxos:CLIENT_REQUEST_BUFFER_SIZE"),
    P("smr.selector_threads", V.INTEGER, -1, C.WORKER, M.RESTART_ONLY,
      origin="jpaxos:SELECTOR_THREADS"),
    P("smr.high_mark", V.INTEGER, 10000, C.CACHES, lo=1, assigned=True,
      origin="bftsmart:system.totalordermulticast.highMark"),
    P("smr.revival_high_mark", V.INTEGER, 10, C.CACHES, lo=0, assigned=True,
      origin="bftsmart:system.totalordermulticast.revival_highMark"),
    P("smr.propose_timeout", V.DURATION, 10000, C.TIMEOUTS, unit="ms", lo=1,
      origin="bftsmart:system.totalordermulticast.timeout"),
    P("smr.max_batch_requests", V.INTEGER, 400, C.BATCHING_BUNDLING, lo=1,
      origin="bftsmart:system.totalordermulticast.maxbatchsize"),
    P("smr.nonces", V.INTEGER, 0, C.SECURITY, M.RESTART_ONLY,
      supported=False, origin="bftsmart:system.total.ordermulticast.nonces"),
    P("smr.checkpoint_period", V.INTEGER, 1000, C.INTERVALS, lo=1,
      assigned=True,
      origin="bftsmart:system.totalordermulticast.checkpoint_period"),
    P("smr.global_checkpoint_period", V.INTEGER, 12000, C.INTERVALS, lo=1,
      assigned=True,
      origin="bftsmart:system.totalordermulticast.global_checkpoint_period"),
    P("smr.state_transfer", V.BOOLEAN, True, C.SUBSTITUTABLE_COMPONENTS,
      M.RESTART_ONLY,
      origin="bftsmart:system.totalordermulticast.state_transfer"),
    P("smr.log", V.BOOLEAN, True, C.CACHES, M.RESTART_ONLY,
      origin="bftsmart:system.totalordermulticast.log"),
    P("smr.log_parallel", V.BOOLEAN, False, C.WORKER, M.RESTART_ONLY,
      supported=False,
      origin="bftsmart:system.totalordermulticast.log_parallel"),
    P("smr.log_to_disk", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, assigned=True,
      origin="bftsmart:system.totalordermulticast.log_to_disk"),
    P("smr.sync_log", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, assigned=True,
      origin="bftsmart:system.totalordermulticast.sync_log"),
    P("smr.checkpoint_to_disk", V.BOOLEAN, False,
      C.ENVIRONMENT_EXPLOITATION, M.RESTART_ONLY, assigned=True,
      origin="bftsmart:system.totalordermulticast.checkpoint_to_disk"),
    P("smr.sync_ckp", V.BOOLEAN, False, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, assigned=True,
      origin="bftsmart:system.totalordermulticast.sync_ckp"),
    P("smr.in_queue_size", V.INTEGER, 100000, C.CACHES, lo=1,
      origin="bftsmart:system.communication.inQueueSize"),
    P("smr.out_queue_size", V.INTEGER, 100000, C.CACHES, lo=1,
      origin="bftsmart:system.communication.outQueueSize"),
    P("smr.use_sender_thread", V.BOOLEAN, True, C.WORKER, M.RESTART_ONLY,
      origin="bftsmart:system.communicatin.useSenderThread"),
    P("smr.use_macs", V.BOOLEAN, False, C.SECURITY, M.RESTART_ONLY,
      origin="bftsmart:system.communication.useMACs"),
    P("smr.use_signatures", V.BOOLEAN, False, C.SECURITY, M.RESTART_ONLY,
      origin="bftsmart:system.communication.useSignatures"),
    P("smr.hmac_algorithm", V.ENUM, "HmacMD5", C.SECURITY, M.RESTART_ONLY,
      choices=("HmacMD5", "HmacSHA1", "HmacSHA256"),
      origin="bftsmart:system.authentication.hmacAlgorithm"),
    P("smr.client_retry_timeout", V.DURATION, 3000, C.TIMEOUTS, unit="ms",
      lo=1, origin="invented"),
    P("smr.state_transfer_buffer_size", V.BYTES, 65536, C.CACHES,
      unit="bytes", lo=1024, assigned=True,
      origin="jgroups:StateTransfer.buffer_size"),
    P("smr.state_transfer_max_pool", V.INTEGER, 1, C.WORKER,
      M.RESTART_ONLY, lo=1, supported=False,
      origin="jgroups:StateTransfer.max_pool"),
)
