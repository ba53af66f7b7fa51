"""Case-balanced focal reconstruction loss with expectation scaling.

The block loss between an original and a reconstructed patch grid is the
sum (or mean) of squared differences over each w x w tile.  For a masked
batch the training loss focal-weights each block by its masking case:

    loss = -(1/N^2) * sum_ij alpha_t * core(Lhat_ij)

with ``Lhat`` the clamped mean-normalized block loss and ``alpha_t`` the
inverse-frequency case weight.  Two focal cores are provided:

* ``paper``:       core(L) = (1 - L)^gamma * log(L)
* ``complement``:  core(L) = L^gamma * log(1 - L)

Taken literally the ``paper`` core is minimized as L -> 1, i.e. it
rewards large block errors; the ``complement`` core is the same focal
shape with its minimum at perfect reconstruction and is the default for
actual training.  Both are kept selectable.

For an unmasked batch (ratio 0) the loss is the plain mean of block
losses.  Per-ratio losses are divided by their expected value under the
noncentral chi-squared block-loss model (the scaling table) so gradient
magnitudes are comparable across mask ratios.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .masking import CASE_BOTH_MASKED, CASE_COUNTERPART_VISIBLE, MaskPlan
from .spectra import PatchGrid

if TYPE_CHECKING:
    from .specstats import ScalingTable

VARIANTS = ("paper", "complement")
COEFFICIENT_MODES = ("paper", "derived")
BLOCK_NORMS = ("sum", "mean")

TRACE_COLUMNS = ("batch", "ratio", "case1_loss", "case2_loss", "case3_loss", "total", "scaled_total")


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the focal loss and its scaling chain."""

    gamma: float = 2.0
    clamp_eps: float = 1e-6
    variant: str = "complement"
    coefficient_mode: str = "derived"
    block_norm: str = "mean"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.coefficient_mode not in COEFFICIENT_MODES:
            raise ValueError(f"coefficient_mode must be one of {COEFFICIENT_MODES}")
        if self.block_norm not in BLOCK_NORMS:
            raise ValueError(f"block_norm must be one of {BLOCK_NORMS}")


@dataclass(frozen=True)
class CaseWeights:
    """Case probabilities P_t and normalized inverse-frequency weights alpha_t."""

    alpha: tuple[float, float, float]
    p: tuple[float, float, float]
    r: float


def case_probabilities(r: float) -> tuple[float, float, float]:
    """(P1, P2, P3) = (r^2, 2r(1-r), (1-r)^2) under i.i.d. Bernoulli masking."""
    return (r * r, 2.0 * r * (1.0 - r), (1.0 - r) * (1.0 - r))


def case_weights(r: float) -> CaseWeights:
    """Inverse-probability weights alpha_t = (1/P_t) / sum_k (1/P_k)."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"case weights need r in (0, 1), got r={r}")
    p = case_probabilities(r)
    inv = tuple(1.0 / pt for pt in p)
    total = sum(inv)
    alpha = tuple(x / total for x in inv)
    return CaseWeights(alpha=alpha, p=p, r=r)


def _check_pair(x: PatchGrid, x_rec: PatchGrid) -> None:
    if x.blocks.shape != x_rec.blocks.shape:
        raise ValueError(
            f"patch grids differ in shape: {x.blocks.shape} vs {x_rec.blocks.shape}"
        )


def block_losses(x: PatchGrid, x_rec: PatchGrid, norm: str = "sum") -> np.ndarray:
    """n x n array of per-block squared-difference losses."""
    _check_pair(x, x_rec)
    if norm not in BLOCK_NORMS:
        raise ValueError(f"norm must be one of {BLOCK_NORMS}")
    sums = np.sum((x.blocks - x_rec.blocks) ** 2, axis=(2, 3))
    if norm == "mean":
        return sums / (x.w * x.w)
    return sums


def block_loss(x: PatchGrid, x_rec: PatchGrid, i: int, j: int, norm: str = "sum") -> float:
    """Squared-difference loss of the (i, j) block."""
    if not (0 <= i < x.n and 0 <= j < x.n):
        raise IndexError(f"block index ({i}, {j}) out of range for n={x.n}")
    return float(block_losses(x, x_rec, norm=norm)[i, j])


def focal_term(lhat: float, alpha: float, gamma: float, variant: str) -> float:
    """Single-block contribution -alpha * core(lhat) before the 1/N^2 average."""
    if variant == "paper":
        return -alpha * (1.0 - lhat) ** gamma * np.log(lhat)
    if variant == "complement":
        return -alpha * lhat**gamma * np.log(1.0 - lhat)
    raise ValueError(f"variant must be one of {VARIANTS}")


def _clamped_lhat(x: PatchGrid, x_rec: PatchGrid, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean-normalized block losses clamped into (eps, 1-eps), plus clamp mask."""
    raw = block_losses(x, x_rec, norm="mean")
    clamped = np.clip(raw, eps, 1.0 - eps)
    at_boundary = (raw <= eps) | (raw >= 1.0 - eps)
    return clamped, at_boundary


def _alpha_grid(plan: MaskPlan) -> np.ndarray:
    w = case_weights(plan.ratio)
    alpha = np.full(plan.case_of.shape, w.alpha[2])
    alpha[plan.case_of == CASE_BOTH_MASKED] = w.alpha[0]
    alpha[plan.case_of == CASE_COUNTERPART_VISIBLE] = w.alpha[1]
    return alpha


def focal_loss(x: PatchGrid, x_rec: PatchGrid, plan: MaskPlan, cfg: LossConfig) -> float:
    """Case-balanced focal loss over all N^2 blocks (masked-batch form)."""
    _check_pair(x, x_rec)
    if plan.ratio <= 0.0:
        raise ValueError("focal loss is undefined at ratio 0; use mean_loss")
    if plan.case_of.shape != (x.n, x.n):
        raise ValueError("mask plan does not match patch-grid geometry")
    lhat, _ = _clamped_lhat(x, x_rec, cfg.clamp_eps)
    alpha = _alpha_grid(plan)
    if cfg.variant == "paper":
        terms = -alpha * (1.0 - lhat) ** cfg.gamma * np.log(lhat)
    else:
        terms = -alpha * lhat**cfg.gamma * np.log(1.0 - lhat)
    return float(np.mean(terms))


def mean_loss(x: PatchGrid, x_rec: PatchGrid, cfg: LossConfig) -> float:
    """Plain mean of block losses (unmasked-batch form)."""
    return float(np.mean(block_losses(x, x_rec, norm=cfg.block_norm)))


def case_mixture_coefficient(r: float, mode: str = "derived") -> float:
    """sum_t P_t * alpha_t, the case-mixture factor in the expected loss.

    Algebraically the sum equals 6 r^2 (1-r)^2 / (3 r^2 - 3 r + 2)
    (``derived``); ``paper`` returns the half-size variant
    3 r^2 (1-r)^2 / (3 r^2 - 3 r + 2).
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"coefficient needs r in (0, 1), got r={r}")
    if mode not in COEFFICIENT_MODES:
        raise ValueError(f"mode must be one of {COEFFICIENT_MODES}")
    value = 6.0 * r**2 * (1.0 - r) ** 2 / (3.0 * r**2 - 3.0 * r + 2.0)
    return value / 2.0 if mode == "paper" else value


def scaled_batch_loss(
    x: PatchGrid, x_rec: PatchGrid, plan: MaskPlan, cfg: LossConfig, table: "ScalingTable"
) -> float:
    """Raw per-ratio loss divided by its expected value from the table."""
    raw = focal_loss(x, x_rec, plan, cfg) if plan.ratio > 0.0 else mean_loss(x, x_rec, cfg)
    scaled = raw / table.lookup(plan.ratio)
    if not np.isfinite(scaled):
        raise ArithmeticError(f"scaled loss is non-finite at ratio {plan.ratio}")
    return scaled


def focal_loss_grad(
    x: PatchGrid, x_rec: PatchGrid, plan: MaskPlan, cfg: LossConfig
) -> tuple[np.ndarray, int]:
    """d focal_loss / d x_rec, shaped like ``blocks``.

    Blocks whose mean loss sits at a clamp boundary get zero gradient;
    the count of such blocks is returned alongside.
    """
    _check_pair(x, x_rec)
    if plan.ratio <= 0.0:
        raise ValueError("focal loss is undefined at ratio 0; use mean_loss_grad")
    lhat, at_boundary = _clamped_lhat(x, x_rec, cfg.clamp_eps)
    alpha = _alpha_grid(plan)
    g = cfg.gamma
    if cfg.variant == "paper":
        dcore = -g * (1.0 - lhat) ** (g - 1.0) * np.log(lhat) + (1.0 - lhat) ** g / lhat
    else:
        dcore = g * lhat ** (g - 1.0) * np.log(1.0 - lhat) - lhat**g / (1.0 - lhat)
    dloss_dlhat = -alpha * dcore / (x.n * x.n)
    dloss_dlhat[at_boundary] = 0.0
    dlhat_dblocks = 2.0 * (x_rec.blocks - x.blocks) / (x.w * x.w)
    return dloss_dlhat[:, :, None, None] * dlhat_dblocks, int(at_boundary.sum())


def mean_loss_grad(x: PatchGrid, x_rec: PatchGrid, cfg: LossConfig) -> np.ndarray:
    """d mean_loss / d x_rec, shaped like ``blocks``."""
    _check_pair(x, x_rec)
    scale = 2.0 / (x.n * x.n)
    if cfg.block_norm == "mean":
        scale /= x.w * x.w
    return scale * (x_rec.blocks - x.blocks)


def write_loss_trace(path, rows) -> None:
    """Write per-batch loss rows as CSV; ``None`` fields are left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
