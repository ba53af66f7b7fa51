"""Patch masks, counterpart pairing, and per-patch case labels.

Patch (i, j) is paired with its point-symmetric counterpart
(n-1-i, n-1-j) about the grid center.  Each patch falls into exactly one
case: 1 when it and its counterpart are both masked, 2 when it is masked
but its counterpart is visible, and 3 when it is visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .rng import STREAM_RATIO, substream

CASE_BOTH_MASKED = 1
CASE_COUNTERPART_VISIBLE = 2
CASE_VISIBLE = 3


@dataclass(frozen=True)
class MaskPlan:
    """One sampled mask together with its case labels."""

    n: int
    masked: np.ndarray
    case_of: np.ndarray
    ratio: float

    def __post_init__(self):
        if self.masked.shape != (self.n, self.n) or self.case_of.shape != (self.n, self.n):
            raise ValueError("masked/case_of shapes do not match n")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must lie in [0, 1), got {self.ratio}")


@dataclass(frozen=True)
class RatioSchedule:
    """Mask-ratio levels drawn uniformly per batch from a seeded stream."""

    levels: tuple[float, ...] = (0.3, 0.15, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not self.levels:
            raise ValueError("schedule needs at least one level")
        for r in self.levels:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"every level must lie in [0, 1), got {r}")


def counterpart(i: int, j: int, n: int) -> tuple[int, int]:
    """Point-symmetric counterpart of patch (i, j) on an n x n grid."""
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"patch index ({i}, {j}) out of range for n={n}")
    return n - 1 - i, n - 1 - j


def classify_cases(masked: np.ndarray) -> np.ndarray:
    """Label every patch 1/2/3 from the mask and its point reflection."""
    counterpart_masked = masked[::-1, ::-1]
    case_of = np.full(masked.shape, CASE_VISIBLE, dtype=np.uint8)
    case_of[masked & counterpart_masked] = CASE_BOTH_MASKED
    case_of[masked & ~counterpart_masked] = CASE_COUNTERPART_VISIBLE
    return case_of


def sample_mask(
    n: int, r: float, rng: np.random.Generator, *, fixed_count: bool = False
) -> MaskPlan:
    """Sample a mask with per-patch probability ``r``.

    Patches are masked i.i.d. Bernoulli(r) by default, which is what the
    case-probability model assumes.  ``fixed_count=True`` instead masks
    exactly ``round(r * n**2)`` uniformly chosen patches (classic
    masked-autoencoder style) for comparison runs.
    """
    if n <= 0 or n % 2 != 0:
        raise ValueError(f"patches-per-side must be positive and even, got n={n}")
    if not 0.0 <= r < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got r={r}")

    if fixed_count:
        masked = np.zeros(n * n, dtype=bool)
        count = int(round(r * n * n))
        if count:
            masked[rng.choice(n * n, size=count, replace=False)] = True
        masked = masked.reshape(n, n)
    else:
        masked = rng.random((n, n)) < r
    return MaskPlan(n=n, masked=masked, case_of=classify_cases(masked), ratio=r)


def full_visible_plan(n: int) -> MaskPlan:
    """The ratio-0 plan: nothing masked, every patch case 3."""
    masked = np.zeros((n, n), dtype=bool)
    return MaskPlan(n=n, masked=masked, case_of=classify_cases(masked), ratio=0.0)


def next_ratio(schedule: RatioSchedule, batch_index: int) -> float:
    """Level used for batch ``batch_index``; constant within the batch."""
    rng = substream(schedule.seed, STREAM_RATIO, batch_index)
    return float(schedule.levels[rng.integers(len(schedule.levels))])


def case_counts(plan: MaskPlan) -> tuple[int, int, int]:
    """Number of patches (not pairs) in cases 1, 2, 3; sums to n**2."""
    c = plan.case_of
    return (
        int((c == CASE_BOTH_MASKED).sum()),
        int((c == CASE_COUNTERPART_VISIBLE).sum()),
        int((c == CASE_VISIBLE).sum()),
    )


def pair_state_counts(plan: MaskPlan) -> tuple[int, int, int]:
    """Counterpart pairs with (both, exactly one, neither) masked.

    Sums to n**2 / 2.  These pair states are what the case-probability
    model (r^2, 2r(1-r), (1-r)^2) describes; per-patch case frequencies
    differ for cases 2 and 3 because only the masked member of a
    one-masked pair is a case-2 patch.
    """
    m = plan.masked
    cm = m[::-1, ::-1]
    upper = _pair_leaders(plan.n)
    both = int((m & cm)[upper].sum())
    one = int((m ^ cm)[upper].sum())
    none = int((~m & ~cm)[upper].sum())
    return both, one, none


def _pair_leaders(n: int) -> np.ndarray:
    """Boolean mask selecting one representative patch per counterpart pair."""
    flat = np.arange(n * n)
    partner = (n * n - 1) - flat
    return (flat < partner).reshape(n, n)


def write_mask_png(plan: MaskPlan, path, cell: int = 16) -> None:
    """Write the mask as a PNG, white = masked, black = visible."""
    img = np.where(plan.masked, 255, 0).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path, format="PNG")
