"""Position-cache memory planner.

Answers one question: how many bytes of sine/cosine tables does a context
window cost, as a function of window length, head width, storage
precision, rotary fraction, and multi-device placement.  The core identity
per device group is

    bytes = max_positions * rotary_dims * precision_bytes * sincos_factor

where ``rotary_dims`` comes from the same rounding rule the model uses, so
planner numbers and built caches always agree.  ``sincos_factor`` is 1
when the sine and cosine tables are counted jointly inside ``rotary_dims``
(each table has ``rotary_dims / 2`` columns); set it to 2 to account a
full-width copy of both tables instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

from .exceptions import ParameterError
from .rope import round_rotary_dims

PRECISION_BYTES = {"fp16": 2, "fp32": 4}
PLACEMENTS = ("replicate", "shard")


@dataclass(frozen=True)
class PlanQuery:
    """One what-if point for the planner."""

    max_positions: int
    head_dim: int
    rotary_fraction: float
    precision_bytes: int = 4
    devices: int = 1
    placement: str = "replicate"
    sincos_factor: int = 1

    def __post_init__(self):
        if self.max_positions < 1:
            raise ParameterError(f"max_positions must be >= 1, got {self.max_positions}")
        if self.precision_bytes not in (2, 4):
            raise ParameterError(
                f"precision_bytes must be 2 (fp16) or 4 (fp32), got {self.precision_bytes}")
        if self.devices < 1:
            raise ParameterError(f"devices must be >= 1, got {self.devices}")
        if self.placement not in PLACEMENTS:
            raise ParameterError(f"placement must be one of {PLACEMENTS}, "
                                 f"got {self.placement!r}")
        if self.sincos_factor not in (1, 2):
            raise ParameterError(f"sincos_factor must be 1 or 2, got {self.sincos_factor}")
        # head_dim and rotary_fraction are validated by the rounding rule.
        round_rotary_dims(self.head_dim, self.rotary_fraction)


@dataclass(frozen=True)
class PlanResult:
    rotary_dims: int
    bytes_per_device: int
    bytes_total: int


def cache_bytes(query: PlanQuery) -> PlanResult:
    """Exact integer byte footprint for one query.

    Replicated placement stores the full table on every device; sharded
    placement splits one copy evenly (ceiling division per device).
    """
    rd = round_rotary_dims(query.head_dim, query.rotary_fraction)
    base = query.max_positions * rd * query.precision_bytes * query.sincos_factor
    if query.placement == "replicate":
        return PlanResult(rotary_dims=rd, bytes_per_device=base,
                          bytes_total=base * query.devices)
    per = math.ceil(base / query.devices) if base else 0
    return PlanResult(rotary_dims=rd, bytes_per_device=per, bytes_total=base)


def emit_curve(template: PlanQuery, seq_lens: list, fractions: list) -> list:
    """Footprint rows over a grid: (seq_len, fraction, bytes_per_device)."""
    if not seq_lens or not fractions:
        raise ParameterError("emit_curve needs at least one seq_len and one fraction")
    rows = []
    for fraction in fractions:
        for seq_len in seq_lens:
            q = replace(template, max_positions=int(seq_len), rotary_fraction=fraction)
            rows.append((int(seq_len), fraction, cache_bytes(q).bytes_per_device))
    return rows


def write_curve_csv(rows: list, path) -> None:
    lines = ["seq_len,fraction,bytes"]
    for seq_len, fraction, nbytes in rows:
        lines.append(f"{seq_len},{fraction:g},{nbytes}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_bytes(n: int) -> str:
    """Human-readable byte count (binary units)."""
    value = float(n)
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if value < 1024.0 or unit == "TiB":
            return f"{value:.2f} {unit}" if unit != "B" else f"{int(value)} B"
        value /= 1024.0
    return f"{value:.2f} TiB"
