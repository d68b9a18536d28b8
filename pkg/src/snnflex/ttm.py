"""Temporal transformation between stages running at different step counts.

Downsampling sums runs of adjacent frames; upsampling replicates each frame
over a run. Both use the same near-even contiguous grouping.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx

__all__ = [
    "DEFAULT_EPSILON",
    "GroupingPlan",
    "group_boundaries",
    "mixing_matrix",
    "ttm_downsample",
    "ttm_upsample",
    "ttm_apply",
]

DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class GroupingPlan:
    l: int
    k: int
    epsilon: float
    boundaries: tuple[int, ...]  # 1-based index of each group's first frame

    @property
    def sizes(self) -> tuple[int, ...]:
        ends = self.boundaries[1:] + (self.l + 1,)
        return tuple(e - b for b, e in zip(self.boundaries, ends))

    def groups(self) -> list[range]:
        """0-based frame ranges, one per group."""
        ends = self.boundaries[1:] + (self.l + 1,)
        return [range(b - 1, e - 1) for b, e in zip(self.boundaries, ends)]

    def group_of_frame(self) -> np.ndarray:
        """``out[i]`` is the 0-based group holding 0-based frame ``i``."""
        return np.repeat(np.arange(self.k), self.sizes)


def group_boundaries(l: int, k: int, epsilon: float = DEFAULT_EPSILON) -> GroupingPlan:
    """Split ``l`` frames into ``k`` contiguous groups as evenly as possible.

    Group ``i`` starts at frame ``round((i - 1) * l / k - epsilon) + 1``; the
    epsilon shift sends exact halves to the lower integer.
    """
    if k < 1 or k > l:
        raise ValueError(f"need 1 <= k <= l, got l={l}, k={k}")
    bounds = tuple(int(np.rint((i - 1) * l / k - epsilon)) + 1 for i in range(1, k + 1))
    return GroupingPlan(l, k, epsilon, bounds)


@lru_cache(maxsize=None)
def _mixing_matrix(t_in: int, t_out: int, epsilon: float) -> np.ndarray:
    if t_out == t_in:
        return np.eye(t_in)
    if t_out < t_in:
        plan = group_boundaries(t_in, t_out, epsilon)
        mix = np.zeros((t_out, t_in))
        mix[plan.group_of_frame(), np.arange(t_in)] = 1.0
        return mix
    return _mixing_matrix(t_out, t_in, epsilon).T.copy()


def mixing_matrix(t_in: int, t_out: int, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """``(t_out, t_in)`` 0/1 matrix realising the transformation as a linear map over time."""
    if t_in < 1 or t_out < 1:
        raise ValueError("step counts must be positive")
    mix = _mixing_matrix(int(t_in), int(t_out), float(epsilon))
    mix.flags.writeable = False
    return mix


def ttm_downsample(x, t_out: int, epsilon: float = DEFAULT_EPSILON):
    t_in = len(x)
    if t_out > t_in:
        raise ValueError(f"downsampling needs t_out <= t_in, got {t_out} > {t_in}")
    return nx.time_mix(x, mixing_matrix(t_in, t_out, epsilon))


def ttm_upsample(x, t_out: int, epsilon: float = DEFAULT_EPSILON):
    t_in = len(x)
    if t_out < t_in:
        raise ValueError(f"upsampling needs t_out >= t_in, got {t_out} < {t_in}")
    return nx.time_mix(x, mixing_matrix(t_in, t_out, epsilon))


def ttm_apply(x, t_out: int, epsilon: float = DEFAULT_EPSILON):
    if t_out < 1:
        raise ValueError("t_out must be positive")
    t_in = len(x)
    if t_out == t_in:
        return x
    if t_out < t_in:
        return ttm_downsample(x, t_out, epsilon)
    return ttm_upsample(x, t_out, epsilon)
