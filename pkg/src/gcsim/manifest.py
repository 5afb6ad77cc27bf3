"""Canonical framework-wide parameter registry and the checked-in manifest.

Every control parameter the framework knows about, whether carried by a
protocol layer, the replication engine, the simulated network or the
execution environment, is assembled here. `parameters.manifest` at the
repository root is generated from this registry and a test keeps the two
in sync.
"""

from __future__ import annotations

from .params import (
    ControlCategory as C,
    ENV_DESCRIPTORS,
    Mutability as M,
    ParameterDescriptor as P,
    ParameterRegistry,
    ValueType as V,
    manifest_lines,
    write_manifest,
)
from .smr.config import SMR_DESCRIPTORS
from .stack import LAYER_REGISTRY
from . import layers  # noqa: F401  (fills LAYER_REGISTRY)
import dataclasses

# Simulated network conditions are configured per experiment.
NET_DESCRIPTORS = (
    P("net.mtu", V.BYTES, 1492, C.ENVIRONMENT_EXPLOITATION, M.RESTART_ONLY,
      unit="bytes", lo=64, assigned=True, origin="jpaxos:MTU"),
    P("net.data_rate", V.FLOAT, 10e6, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, unit="bit/s", lo=1.0, assigned=True),
    P("net.propagation_distance", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, unit="m", lo=0.0, assigned=True),
    P("net.propagation_speed", V.FLOAT, 2e8, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, unit="m/s", lo=1.0, assigned=True),
    P("net.processing_delay", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, unit="s", lo=0.0, assigned=True),
    P("net.loss_rate", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, lo=0.0, hi=1.0, assigned=True),
    P("net.corruption_rate", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, lo=0.0, hi=1.0, assigned=True),
    P("net.duplication_rate", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, lo=0.0, hi=1.0, assigned=True),
    P("net.reorder_rate", V.FLOAT, 0.0, C.ENVIRONMENT_EXPLOITATION,
      M.RESTART_ONLY, lo=0.0, hi=1.0, assigned=True),
    P("net.queue_capacity", V.INTEGER, 0, C.CACHES, M.RESTART_ONLY,
      unit="packets (0=unbounded)", lo=0, assigned=True),
)

# Confidentiality/authentication protocols are out of scope: the names are
# registered so the registry provably covers the catalog.
UNSUPPORTED_SECURITY_DESCRIPTORS = (
    P("layer.encrypt.asymAlgorithm", V.ENUM, "RSA", C.SECURITY,
      M.RESTART_ONLY, choices=("RSA",), supported=False,
      origin="jgroups:ENCRYPT.asymAlgorithm"),
    P("layer.encrypt.asymInit", V.INTEGER, 512, C.SECURITY, M.RESTART_ONLY,
      supported=False, origin="jgroups:ENCRYPT.asymInit"),
    P("layer.encrypt.changeKeysOnViewChange", V.BOOLEAN, False, C.SECURITY,
      M.RESTART_ONLY, supported=False,
      origin="jgroups:ENCRYPT.changeKeysOnViewChange"),
    P("layer.encrypt.symAlgorithm", V.ENUM, "AES", C.SECURITY,
      M.RESTART_ONLY, choices=("AES",), supported=False,
      origin="jgroups:ENCRYPT.symAlgorithm"),
    P("layer.encrypt.symInit", V.INTEGER, 128, C.SECURITY, M.RESTART_ONLY,
      supported=False, origin="jgroups:ENCRYPT.symInit"),
)


def all_descriptors() -> list:
    """Every control parameter in the framework, with full paths."""
    out = []
    for name in sorted(LAYER_REGISTRY):
        cls = LAYER_REGISTRY[name]
        for desc in cls.DESCRIPTORS:
            out.append(dataclasses.replace(
                desc, path=f"layer.{name}.{desc.path}"))
    out.extend(SMR_DESCRIPTORS)
    out.extend(NET_DESCRIPTORS)
    out.extend(ENV_DESCRIPTORS)
    out.extend(UNSUPPORTED_SECURITY_DESCRIPTORS)
    return out


def build_full_registry() -> ParameterRegistry:
    registry = ParameterRegistry()
    for desc in all_descriptors():
        registry.register(desc)
    return registry


def generate_manifest(path: str) -> int:
    descs = all_descriptors()
    write_manifest(descs, path)
    return len(descs)


def manifest_text() -> str:
    return "\n".join(manifest_lines(all_descriptors())) + "\n"
