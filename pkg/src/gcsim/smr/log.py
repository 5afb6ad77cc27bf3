"""Stable storage: the replica log and snapshots.

The simulation separates the "disk" from the replica process: a
StableStore outlives crashes, so a recovering replica re-reads exactly
what it managed to write. Synchronous writes charge the configured
storage latency before dependent messages may leave the node.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional


@dataclass
class Snapshot:
    last_executed_instance: int
    state_b64: str
    reply_cache: dict          # client -> [seqno, reply_b64]
    size: int = 0

    def to_wire(self) -> dict:
        return {"last": self.last_executed_instance, "state": self.state_b64,
                "rc": {str(k): v for k, v in self.reply_cache.items()},
                "size": self.size}

    @staticmethod
    def from_wire(d: dict) -> "Snapshot":
        return Snapshot(d["last"], d["state"],
                        {int(k): v for k, v in d["rc"].items()}, d["size"])


@dataclass
class StableLog:
    """Append-only record list for one replica."""

    records: list = field(default_factory=list)
    snapshot: Optional[Snapshot] = None
    bytes_since_snapshot: int = 0

    def append(self, record: dict) -> int:
        self.records.append(record)
        size = len(json.dumps(record, sort_keys=True))
        self.bytes_since_snapshot += size
        return size

    def install_snapshot(self, snap: Snapshot) -> None:
        self.snapshot = snap
        # decided values at or below the snapshot point are re-derivable
        self.records = [r for r in self.records
                        if not (r.get("t") in ("decide", "accept")
                                and r.get("i", 0) <=
                                snap.last_executed_instance)]
        self.bytes_since_snapshot = 0

    def size_bytes(self) -> int:
        return self.bytes_since_snapshot

    def replay(self) -> dict:
        """Reduce the records to (promised, accepted, decided)."""
        promised = 0
        accepted = {}
        decided = {}
        for r in self.records:
            kind = r["t"]
            if kind == "promise":
                promised = max(promised, r["b"])
            elif kind == "accept":
                promised = max(promised, r["b"])
                cur = accepted.get(r["i"])
                if cur is None or r["b"] >= cur["b"]:
                    accepted[r["i"]] = {"b": r["b"], "v": r["v"]}
            elif kind == "decide":
                decided[r["i"]] = r["v"]
        return {"promised": promised, "accepted": accepted,
                "decided": decided}


class StableStore:
    """Per-replica stable storage that survives simulated crashes."""

    def __init__(self, base_dir: Optional[str] = None,
                 to_disk: bool = False):
        self.base_dir = base_dir
        self.to_disk = to_disk
        self._logs = {}

    def log_for(self, replica_id: int) -> StableLog:
        log = self._logs.get(replica_id)
        if log is None:
            log = StableLog()
            self._logs[replica_id] = log
        return log

    def wipe(self, replica_id: int) -> None:
        self._logs[replica_id] = StableLog()

    def persist_record(self, replica_id: int, record: dict) -> None:
        if not (self.to_disk and self.base_dir):
            return
        path = os.path.join(self.base_dir, str(replica_id))
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "log.jsonl"), "a",
                  encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def persist_snapshot(self, replica_id: int, snap: Snapshot) -> None:
        if not (self.to_disk and self.base_dir):
            return
        path = os.path.join(self.base_dir, str(replica_id))
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "snapshot.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(snap.to_wire(), fh, sort_keys=True)
