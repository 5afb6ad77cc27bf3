"""Protocol layer implementations.

Importing this package populates the stack's layer registry.
"""

from . import transport, reliable, group  # noqa: F401

from .transport import (  # noqa: F401
    BundlerState,
    bundle_enqueue,
    bundle_timeout_flush,
    fragment_payload,
)
from .reliable import (  # noqa: F401
    FlowControlState,
    NakackState,
    StabilityState,
    fc_acquire,
    nakack_on_nack,
    nakack_on_receive,
    stability_round,
)
from .group import (  # noqa: F401
    FdRingState,
    Merge3State,
    SequencerState,
    fd_ring_tick,
    merge_detect,
)
