"""MultiPaxos-style state machine replication over the simulated stack."""

from .config import (  # noqa: F401
    CrashModel,
    ReplicaConfig,
    SMR_DESCRIPTORS,
    UnsupportedCrashModelError,
    parse_replica_config,
)
from .log import Snapshot, StableLog, StableStore  # noqa: F401
from .replica import (  # noqa: F401
    Batch,
    HashChainService,
    ReconfigError,
    Replica,
    Request,
    batcher_add,
    catch_up_decision,
    leader_monitor,
    snapshot_policy,
    window_admit,
)
