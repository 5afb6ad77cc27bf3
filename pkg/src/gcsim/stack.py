"""Layered protocol-stack engine.

A stack is an ordered list of layers, transport at the bottom. Events
flow down (toward the network) and up (toward the application); each
layer may transform, consume or emit events. Composition is validated
eagerly at build time against each layer's declared dependencies, and
every layer's parameters are registered with the owning node's registry
under ``layer.<name>.<param>``.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import EventKind, GcsimError, Message, StackEvent, View
from .params import ParameterDescriptor, UnknownParameterError


class UnknownLayerError(GcsimError):
    pass


class MissingDependencyError(GcsimError):
    pass


class DuplicateTransportError(GcsimError):
    pass


class StackClosedError(GcsimError):
    pass


@dataclass
class LayerSpec:
    layer_name: str
    params: dict = field(default_factory=dict)


@dataclass
class StackConfig:
    layers: list = field(default_factory=list)   # bottom (transport) to top

    @staticmethod
    def from_keyvalues(entries: dict) -> "StackConfig":
        """Parse ``layer.N.name = x`` / ``layer.N.param = v`` keys."""
        by_index = {}
        for key, value in entries.items():
            parts = key.split(".")
            if len(parts) != 3 or parts[0] != "layer":
                continue
            try:
                idx = int(parts[1])
            except ValueError:
                raise UnknownLayerError(f"bad layer index in {key!r}") from None
            by_index.setdefault(idx, {})[parts[2]] = value
        layers = []
        for idx in sorted(by_index):
            entry = dict(by_index[idx])
            name = entry.pop("name", None)
            if name is None:
                raise UnknownLayerError(f"layer.{idx} has no name")
            layers.append(LayerSpec(name, entry))
        return StackConfig(layers)


LAYER_REGISTRY = {}


def register_layer(cls):
    """Class decorator adding a layer to the static registry."""
    LAYER_REGISTRY[cls.name] = cls
    return cls


class Layer:
    """Base protocol layer. Subclasses override down/up and start/stop.

    A layer only touches its own header entry on messages passing
    through; parameter reads always go through the registry, so a value
    swapped at a safe point is observed whole.
    """

    name = "layer"
    requires_below = ()      # names, or tuples of alternatives
    is_transport = False
    DESCRIPTORS = ()         # ParameterDescriptor list with relative paths

    def __init__(self):
        self.stack: Optional[Stack] = None
        self.below: Optional[Layer] = None
        self.above: Optional[Layer] = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        pass

    def stop(self) -> None:
        pass

    # -- event routing -----------------------------------------------------

    def down(self, evt: StackEvent) -> None:
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
        self.pass_down(evt)

    def up(self, evt: StackEvent) -> None:
        # layers above the membership layer see views on the up path
        if evt.kind == EventKind.VIEW_CHANGE:
            self.on_view(evt.body)
        self.pass_up(evt)

    def pass_down(self, evt: StackEvent) -> None:
        if self.below is not None:
            self.below.down(evt)

    def pass_up(self, evt: StackEvent) -> None:
        if self.above is not None:
            self.above.up(evt)
        else:
            self.stack.surface(evt)

    def on_view(self, view: View) -> None:
        pass

    def on_param_changed(self, pname: str, value) -> None:
        pass

    # -- services ----------------------------------------------------------

    @property
    def host(self):
        return self.stack.host

    @property
    def node_id(self) -> int:
        return self.stack.host.node_id

    def param(self, pname: str):
        return self.stack.host.registry.get(f"layer.{self.name}.{pname}")

    def metric(self, path: str, n: float = 1) -> None:
        self.stack.host.metrics.incr(path, n)

    def set_timer(self, delay_s: float, fn: Callable):
        return self.stack.set_timer(delay_s, fn)

    def now(self) -> float:
        return self.stack.host.clock.now

    def now_ms(self) -> float:
        return self.stack.host.clock.now * 1000.0

    def rng(self, tag: str = "") -> random.Random:
        return self.stack.rng(f"{self.name}:{tag}")


class Stack:
    def __init__(self, host, layers):
        self.host = host
        self.layers = layers              # bottom to top
        self.closed = False
        self.app_handler: Callable = lambda evt: self.inbox.append(evt)
        self.inbox = []
        self._collector = None
        self._rngs = {}
        for layer in layers:
            layer.stack = self
        for low, high in zip(layers, layers[1:]):
            low.above = high
            high.below = low

    @property
    def top(self) -> Layer:
        return self.layers[-1]

    @property
    def bottom(self) -> Layer:
        return self.layers[0]

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise UnknownLayerError(name)

    def has_layer(self, name: str) -> bool:
        return any(layer.name == name for layer in self.layers)

    def start(self) -> None:
        for layer in self.layers:
            layer.start()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for layer in reversed(self.layers):
            layer.stop()

    def send_down(self, evt: StackEvent) -> None:
        if self.closed:
            raise StackClosedError("stack is closed")
        self.top.down(evt)

    def deliver_up(self, evt: StackEvent) -> list:
        """Inject an event at the bottom; returns the surfaced events."""
        if self.closed:
            raise StackClosedError("stack is closed")
        outer = self._collector
        self._collector = []
        try:
            self.bottom.up(evt)
            return self._collector
        finally:
            self._collector = outer

    def surface(self, evt: StackEvent) -> None:
        if self._collector is not None:
            self._collector.append(evt)
        else:
            self.app_handler(evt)

    def set_timer(self, delay_s: float, fn: Callable):
        def guarded():
            if not self.closed:
                fn()
        return self.host.clock.schedule(delay_s, guarded)

    def rng(self, tag: str) -> random.Random:
        rng = self._rngs.get(tag)
        if rng is None:
            rng = random.Random(f"{self.host.seed}|node{self.host.node_id}|{tag}")
            self._rngs[tag] = rng
        return rng

    def config_changed(self, path: str, value) -> None:
        """Notify the owning layer and surface a CONFIG_CHANGED event."""
        parts = path.split(".")
        if len(parts) == 3 and parts[0] == "layer":
            for layer in self.layers:
                if layer.name == parts[1]:
                    layer.on_param_changed(parts[2], value)
        self.surface(StackEvent(EventKind.CONFIG_CHANGED, (path, value)))


def _dependency_met(requirement, below_names) -> bool:
    alternatives = requirement if isinstance(requirement, tuple) else (requirement,)
    return any(alt in below_names for alt in alternatives)


def build_stack(cfg: StackConfig, host) -> Stack:
    """Instantiate, validate and wire a stack; registers all parameters."""
    classes = []
    for spec in cfg.layers:
        cls = LAYER_REGISTRY.get(spec.layer_name)
        if cls is None:
            raise UnknownLayerError(spec.layer_name)
        classes.append(cls)

    names = [cls.name for cls in classes]
    if len(set(names)) != len(names):
        raise UnknownLayerError(f"duplicate layer in stack: {names}")
    transports = [cls for cls in classes if cls.is_transport]
    if len(transports) > 1:
        raise DuplicateTransportError([c.name for c in transports])
    if not transports:
        raise MissingDependencyError("stack needs a transport at the bottom")
    if not classes[0].is_transport:
        raise MissingDependencyError("transport must be the bottom layer")

    for i, cls in enumerate(classes):
        below_names = set(names[:i])
        for req in cls.requires_below:
            if not _dependency_met(req, below_names):
                raise MissingDependencyError(f"{cls.name} requires {req} below it")

    layers = []
    for cls, spec in zip(classes, cfg.layers):
        layer = cls()
        for desc in cls.DESCRIPTORS:
            full = dataclasses.replace(desc, path=f"layer.{cls.name}.{desc.path}")
            override = spec.params.get(desc.path)
            if not host.registry.has(full.path):
                host.registry.register(full, value=override)
            elif override is not None:
                host.registry.put(full.path, override)
        for pname in spec.params:
            if not host.registry.has(f"layer.{cls.name}.{pname}"):
                raise UnknownParameterError(f"layer.{cls.name}.{pname}")
        layers.append(layer)
    return Stack(host, layers)
