"""Partial rotary position embedding: rounding, angle tables, cache accounting.

Only the leading ``rotary_dims`` channels of each attention head get
rotated; everything past that slice passes through untouched.  Inside the
rotary slice, channel ``j`` pairs with channel ``j + rotary_dims/2`` to
form one two-dimensional rotation plane (the half-split layout), and plane
``j`` turns at ``base ** (-2j / rotary_dims)`` radians per position.

Because only the rotated channels need sine/cosine tables, the position
cache shrinks linearly with the rotary fraction; ``bytes_nominal`` on the
cache records that footprint at a declared storage precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError, RangeError, ShapeError
from .tensor import Tensor, add, concat, mul, narrow, sub

# Channel pairing convention used throughout; an interleaved layout would
# pair (2j, 2j + 1) instead and produce a permuted but equivalent rotation.
PAIRING = "half-split"


def round_rotary_dims(head_dim: int, fraction: float) -> int:
    """Even number of rotary channels closest to ``fraction * head_dim``.

    Rounding happens on the pair count, half up, so the result is always
    even and never exceeds ``head_dim``.
    """
    if head_dim <= 0 or head_dim % 2 != 0:
        raise ParameterError(f"head_dim must be a positive even integer, got {head_dim}")
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"rotary fraction must lie in [0, 1], got {fraction}")
    pairs = math.floor(fraction * head_dim / 2.0 + 0.5)
    return 2 * pairs


@dataclass(frozen=True)
class RopeConfig:
    """Shape and geometry of the rotary embedding for one head size.

    ``rotary_dims`` is derived from ``rotary_fraction`` at construction; a
    nonzero fraction that would round down to zero pairs is rejected rather
    than silently degrading to no positional signal.
    """

    head_dim: int
    rotary_fraction: float
    max_positions: int
    base: float = 10000.0
    rotary_dims: int = field(init=False)

    def __post_init__(self):
        dims = round_rotary_dims(self.head_dim, self.rotary_fraction)
        if self.rotary_fraction > 0.0 and dims == 0:
            raise ParameterError(
                f"rotary fraction {self.rotary_fraction} rounds to zero pairs at "
                f"head_dim {self.head_dim}; pass 0.0 to disable rotation explicitly")
        if self.max_positions <= 0:
            raise ParameterError(f"max_positions must be positive, got {self.max_positions}")
        if self.base <= 0.0:
            raise ParameterError(f"rotary base must be positive, got {self.base}")
        object.__setattr__(self, "rotary_dims", dims)


def angles(position: int, config: RopeConfig) -> np.ndarray:
    """Rotation angle of each pair plane at one position."""
    if config.rotary_dims == 0:
        raise ParameterError("angles are undefined when no channels rotate")
    if not 0 <= position < config.max_positions:
        raise RangeError(
            f"position {position} outside [0, {config.max_positions})")
    j = np.arange(config.rotary_dims // 2, dtype=np.float64)
    return position * config.base ** (-2.0 * j / config.rotary_dims)


@dataclass
class RopeCache:
    """Precomputed sine/cosine tables for positions [0, max_positions).

    Tables are kept in float64 for exact reuse by the math; the
    ``precision_bytes`` field is the per-entry storage width the cache is
    *accounted* at, and ``bytes_nominal`` is the resulting footprint,
    counting the sine and cosine tables jointly:

        bytes_nominal = max_positions * rotary_dims * precision_bytes

    (each table has ``rotary_dims / 2`` columns, and there are two).
    """

    config: RopeConfig
    sin: np.ndarray
    cos: np.ndarray
    precision_bytes: int
    bytes_nominal: int


def build_cache(config: RopeConfig, precision_bytes: int = 4) -> RopeCache:
    """Materialize the sin/cos tables for a rotary configuration."""
    if precision_bytes not in (2, 4, 8):
        raise ParameterError(f"precision_bytes must be 2, 4, or 8, got {precision_bytes}")
    half = config.rotary_dims // 2
    positions = np.arange(config.max_positions, dtype=np.float64)
    j = np.arange(half, dtype=np.float64)
    freqs = config.base ** (-2.0 * j / config.rotary_dims) if half else np.zeros(0)
    theta = np.outer(positions, freqs)
    sin = np.sin(theta)
    cos = np.cos(theta)
    sin.flags.writeable = False
    cos.flags.writeable = False
    return RopeCache(
        config=config,
        sin=sin,
        cos=cos,
        precision_bytes=precision_bytes,
        bytes_nominal=config.max_positions * config.rotary_dims * precision_bytes,
    )


def apply_partial_rope(x: Tensor, cache: RopeCache, position_offset: int = 0) -> Tensor:
    """Rotate the leading rotary slice of ``x`` by per-position angles.

    ``x`` has shape [..., seq, head_dim]; row ``s`` is rotated with the
    tables for position ``position_offset + s``.  With zero rotary channels
    this returns ``x`` itself (bitwise identity), and the channels past the
    rotary slice are carried over bit-for-bit in every case.  Built from
    differentiable primitives, so gradients flow through.
    """
    config = cache.config
    if x.ndim < 2:
        raise ShapeError(f"apply_partial_rope: need [..., seq, head_dim], got {x.shape}")
    if x.shape[-1] != config.head_dim:
        raise ShapeError(
            f"apply_partial_rope: trailing dim {x.shape[-1]} != head_dim {config.head_dim}")
    seq = x.shape[-2]
    if position_offset < 0 or position_offset + seq > config.max_positions:
        raise RangeError(
            f"apply_partial_rope: positions [{position_offset}, {position_offset + seq}) "
            f"exceed max_positions {config.max_positions}")
    rd = config.rotary_dims
    if rd == 0:
        return x
    half = rd // 2
    cos = Tensor(cache.cos[position_offset:position_offset + seq])
    sin = Tensor(cache.sin[position_offset:position_offset + seq])
    x1 = narrow(x, -1, 0, half)
    x2 = narrow(x, -1, half, half)
    rotated = [
        sub(mul(x1, cos), mul(x2, sin)),
        add(mul(x1, sin), mul(x2, cos)),
    ]
    if rd < config.head_dim:
        rotated.append(narrow(x, -1, rd, config.head_dim - rd))
    return concat(rotated, axis=-1)
