"""Multiply-accumulate metering.

Every contraction-like primitive in the package reports its nominal MAC
count here (nominal: padded zero positions in a convolution count, so
measured totals match the closed-form cost expressions exactly).
Meters nest; each active meter sees everything run inside its block.
"""

from __future__ import annotations

import threading

__all__ = ["FlopMeter", "flop_meter", "add_macs"]


class FlopMeter:
    """Accumulated MAC count; ``flops_2x`` is the 2-flops-per-MAC view."""

    def __init__(self) -> None:
        self.macs = 0

    @property
    def flops_2x(self) -> int:
        return 2 * self.macs

    def reset(self) -> None:
        self.macs = 0

    def __repr__(self) -> str:
        return f"FlopMeter(macs={self.macs})"


class _MeterState(threading.local):
    def __init__(self) -> None:
        self.stack: list[FlopMeter] = []


_STATE = _MeterState()


class flop_meter:
    """Context manager that meters all primitive MACs inside its block."""

    def __enter__(self) -> FlopMeter:
        meter = FlopMeter()
        _STATE.stack.append(meter)
        return meter

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.stack.pop()


def add_macs(count: int) -> None:
    """Credit ``count`` MACs to every active meter."""
    if _STATE.stack:
        for meter in _STATE.stack:
            meter.macs += count
