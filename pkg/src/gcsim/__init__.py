"""Reconfigurable group communication and state machine replication over a
deterministic simulated network.

Subpackages:
    core        shared domain types and the wire frame codec
    simnet      discrete-event network simulator (delay, loss, partitions)
    stack       layered protocol-stack engine
    layers      protocol layer implementations (transport, reliable, group)
    smr         MultiPaxos-style replication engine
    params      parameter registry, taxonomy and safe-point reconfiguration
    harness     experiment runner, workload and fault injection, reports
    control_api runtime HTTP/SSE control surface
"""

__version__ = "0.1.0"
