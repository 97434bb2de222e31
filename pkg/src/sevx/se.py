"""Squeeze-and-excitation units and their full ablation space.

A unit squeezes each channel's (freq, time) map to a statistic, runs the
pooled vector through a small FC stack ending in a sigmoid, and rescales
every channel by its gate. The ablation axes are the squeeze statistic
(max / mean / std / mean_std), the reduction factor r, the FC depth h, the
placement relative to the residual block (standard / pre / post / identity),
and the set of stages that carry units at all.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .nn import STATS_EPS, BasicBlock, Linear, rng_for
from .tensor import ShapeError, Tensor, cat

POOLINGS = ("max", "mean", "std", "mean_std")
INTEGRATIONS = ("standard", "pre", "post", "identity")


@dataclass(frozen=True)
class SEConfig:
    """One point of the SE ablation grid.

    ``stages`` empty means SE is disabled everywhere. ``hidden_layers``
    counts total FC layers: h=1 is a single d->C layer, h>=2 keeps every
    interior layer at the bottleneck width C/r (floored, minimum 1). The
    mean_std pooling doubles only the first layer's input dimension, so
    excitation capacity is comparable across pooling variants.
    """

    pooling: str = "mean_std"
    reduction_factor: int = 4
    hidden_layers: int = 2
    integration: str = "standard"
    stages: frozenset[int] = field(default_factory=lambda: frozenset({1, 2}))

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown SE pooling {self.pooling!r}, expected one of {POOLINGS}")
        if self.integration not in INTEGRATIONS:
            raise ValueError(
                f"unknown SE integration {self.integration!r}, expected one of {INTEGRATIONS}")
        if self.reduction_factor < 1:
            raise ValueError("reduction factor must be >= 1")
        if self.hidden_layers < 1:
            raise ValueError("hidden layer count must be >= 1")
        stages = frozenset(int(s) for s in self.stages)
        if not stages <= {1, 2, 3, 4}:
            raise ValueError(f"SE stages must be a subset of {{1,2,3,4}}, got {sorted(stages)}")
        object.__setattr__(self, "stages", stages)

    @property
    def enabled(self) -> bool:
        return bool(self.stages)

    def input_dim(self, channels: int) -> int:
        return 2 * channels if self.pooling == "mean_std" else channels

    def hidden_dim(self, channels: int) -> int:
        return max(1, channels // self.reduction_factor)

    def layer_dims(self, channels: int) -> list[tuple[int, int]]:
        """(in, out) of each FC layer for a unit on ``channels`` channels."""
        d = self.input_dim(channels)
        if self.hidden_layers == 1:
            return [(d, channels)]
        hid = self.hidden_dim(channels)
        dims = [(d, hid)]
        dims += [(hid, hid)] * (self.hidden_layers - 2)
        dims.append((hid, channels))
        return dims

    def unit_parameter_count(self, channels: int) -> int:
        return sum(i * o + o for i, o in self.layer_dims(channels))

    def to_metadata(self) -> dict[str, str]:
        return {
            "se.pooling": self.pooling,
            "se.reduction": str(self.reduction_factor),
            "se.hidden_layers": str(self.hidden_layers),
            "se.integration": self.integration,
            "se.stages": ",".join(str(s) for s in sorted(self.stages)),
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "SEConfig":
        stages_text = meta.get("se.stages", "")
        stages = frozenset(int(s) for s in stages_text.split(",") if s.strip())
        return cls(
            pooling=meta.get("se.pooling", "mean_std"),
            reduction_factor=int(meta.get("se.reduction", "4")),
            hidden_layers=int(meta.get("se.hidden_layers", "2")),
            integration=meta.get("se.integration", "standard"),
            stages=stages,
        )


def squeeze(x: Tensor, pooling: str) -> Tensor:
    """Aggregate each channel's (freq, time) positions into one statistic.

    mean_std concatenates all channel means before all channel stds, so the
    output dim is 2c. Std is population std with epsilon inside the sqrt.
    """
    if x.ndim != 4:
        raise ShapeError(f"squeeze expects (b, c, f, t), got {x.shape}")
    b, c, f, t = x.shape
    if f * t < 1:
        raise ShapeError("squeeze: empty spatial extent")
    if pooling == "max":
        return x.max(axis=(2, 3))
    if pooling == "mean":
        return x.mean(axis=(2, 3))
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3))
    std = (var + STATS_EPS) ** 0.5
    if pooling == "std":
        return std
    if pooling == "mean_std":
        return cat([mu.reshape(b, c), std], axis=1)
    raise ValueError(f"unknown SE pooling {pooling!r}")


class SEUnit:
    """The excitation network: FC stack mapping pooled stats to channel gates.

    ReLU between layers, sigmoid at the end, so gates live strictly in (0,1).
    """

    def __init__(self, channels: int, config: SEConfig,
                 rng: np.random.Generator | None = None,
                 name: str = "se", seed: int = 0, dtype=np.float32):
        self.channels = channels
        self.config = config
        self.name = name
        self.fc_layers: list[Linear] = []
        for k, (din, dout) in enumerate(config.layer_dims(channels)):
            layer_rng = rng if rng is not None else rng_for(seed, f"{name}.fc{k}")
            self.fc_layers.append(Linear(din, dout, rng=layer_rng, dtype=dtype))

    @property
    def input_dim(self) -> int:
        return self.fc_layers[0].in_features

    def excite(self, z: Tensor) -> Tensor:
        """Map pooled statistics (b, d) to channel gates (b, c) in (0, 1)."""
        if z.ndim != 2 or z.shape[1] != self.input_dim:
            raise ShapeError(
                f"excite expects (b, {self.input_dim}), got {z.shape}")
        h = z
        for layer in self.fc_layers[:-1]:
            h = layer.forward(h).relu()
        return self.fc_layers[-1].forward(h).sigmoid()

    def gates(self, x: Tensor) -> Tensor:
        return self.excite(squeeze(x, self.config.pooling))

    def named_parameters(self, prefix: str):
        for k, layer in enumerate(self.fc_layers):
            yield from layer.named_parameters(f"{prefix}.fc{k}")

    def set_parameter_arrays(self, tensors) -> None:
        """Swap in external parameter tensors, in named_parameters order."""
        it = iter(tensors)
        for layer in self.fc_layers:
            layer.weight = next(it)
            layer.bias = next(it)


def se_apply(x: Tensor, unit: SEUnit) -> Tensor:
    """Re-weight each channel of x by its excitation gate. Shape-preserving."""
    b, c, f, t = x.shape
    if c != unit.channels:
        raise ShapeError(f"se_apply: unit built for {unit.channels} channels, input has {c}")
    s = unit.gates(x)
    _record_gates(unit.name, s)
    return x * s.reshape(b, c, 1, 1)


# --- excitation capture ----------------------------------------------------
# A recorder observes gate values without touching the computation, so
# captured and uncaptured forward passes are bit-identical.

_ACTIVE_RECORDER: list | None = None


def _record_gates(name: str, gates: Tensor) -> None:
    if _ACTIVE_RECORDER is not None:
        _ACTIVE_RECORDER.append((name, gates.data.copy()))


@contextlib.contextmanager
def record_excitations(sink: list):
    """Collect (unit_name, gates ndarray) pairs from every se_apply call."""
    global _ACTIVE_RECORDER
    prev, _ACTIVE_RECORDER = _ACTIVE_RECORDER, sink
    try:
        yield sink
    finally:
        _ACTIVE_RECORDER = prev


class SEWiredBlock:
    """A residual basic block with an SE unit wired per the chosen strategy.

    standard: gate the residual branch output before the summation.
    pre:      gate the block input; the skip still sees the ungated input.
    post:     gate after the summation and the final ReLU.
    identity: gate the skip path only; the residual branch is untouched.
    """

    def __init__(self, block: BasicBlock, unit: SEUnit, integration: str):
        if integration not in INTEGRATIONS:
            raise ValueError(f"unknown SE integration {integration!r}")
        self.block = block
        self.unit = unit
        self.integration = integration
        self.name = block.name

    def forward(self, x: Tensor, train: bool) -> Tensor:
        mode = self.integration
        r_in = se_apply(x, self.unit) if mode == "pre" else x
        r = self.block.residual(r_in, train)
        if mode == "standard":
            r = se_apply(r, self.unit)
        s = self.block.shortcut(x, train)
        if mode == "identity":
            s = se_apply(s, self.unit)
        out = (r + s).relu()
        if mode == "post":
            out = se_apply(out, self.unit)
        return out

    def named_parameters(self, prefix: str):
        yield from self.block.named_parameters(prefix)
        yield from self.unit.named_parameters(f"{prefix}.se")

    def named_buffers(self, prefix: str):
        yield from self.block.named_buffers(prefix)


def integrate_se(block: BasicBlock, config: SEConfig, seed: int, dtype=np.float32) -> SEWiredBlock:
    """Wrap a basic block with a fresh SE unit per the config's strategy.

    PRE gates the block input, so its unit is sized to the input width; every
    other strategy gates a tensor at the block's output width.
    """
    if config.integration == "pre":
        channels = block.conv1.in_channels
    else:
        channels = block.conv2.out_channels
    unit = SEUnit(channels, config, name=f"{block.name}.se", seed=seed, dtype=dtype)
    return SEWiredBlock(block, unit, config.integration)
