"""Desk-scale trainable masked spectrum autoencoder.

A linear token mixer stands in for a transformer branch: each patch is
flattened, embedded, mixed across the n^2 token positions, and decoded
back to pixels.  Masked patches enter as a learned mask token.  Because
every map is linear, the gradients of the scaled training loss are
available in closed form, which is enough to exercise every branch of
the loss machinery (case weighting, dynamic ratios, expectation
scaling) and to reproduce the counterpart-copying behavior that
motivates it.  A gated fusion unit used for combining two feature
branches lives here as a standalone operation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import freqloss
from .freqloss import LossConfig
from .masking import MaskPlan, RatioSchedule, full_visible_plan, next_ratio, sample_mask
from .rng import STREAM_DATA, STREAM_MASK, STREAM_TRIAL, substream
from .spectra import MagnitudeGrid, PatchGrid, magnitude_spectrum, normalize_grid, patchify
from .specstats import ScalingTable

CHECKPOINT_MAGIC = b"FFiT"
CHECKPOINT_VERSION = 1

OBJECTIVES = ("scaled", "masked_mae")


@dataclass
class ToyModel:
    """Linear embed -> token-mix -> decode model with a learned mask token."""

    n: int
    w: int
    d: int
    embed: np.ndarray      # d x w^2
    mix: np.ndarray        # n^2 x n^2
    dec: np.ndarray        # w^2 x d
    mask_token: np.ndarray  # w^2

    def __post_init__(self):
        n2, w2 = self.n * self.n, self.w * self.w
        shapes = {
            "embed": (self.embed.shape, (self.d, w2)),
            "mix": (self.mix.shape, (n2, n2)),
            "dec": (self.dec.shape, (w2, self.d)),
            "mask_token": (self.mask_token.shape, (w2,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        for name in ("embed", "mix", "dec", "mask_token"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    def copy(self) -> "ToyModel":
        return ToyModel(self.n, self.w, self.d, self.embed.copy(), self.mix.copy(),
                        self.dec.copy(), self.mask_token.copy())


@dataclass
class ModelGrads:
    """Gradients of the training loss, shaped like the model fields."""

    embed: np.ndarray
    mix: np.ndarray
    dec: np.ndarray
    mask_token: np.ndarray
    clamped_blocks: int = 0


@dataclass
class TrainState:
    model: ToyModel
    lr: float
    seed: int
    schedule: RatioSchedule
    cfg: LossConfig
    table: ScalingTable | None
    step: int = 0
    objective: str = "scaled"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.objective == "scaled" and self.table is None:
            raise ValueError("the scaled objective needs a scaling table")


def init_model(n: int, w: int, d: int, rng: np.random.Generator) -> ToyModel:
    """Random unit-gain init: each stage preserves token magnitude."""
    w2, n2 = w * w, n * n
    return ToyModel(
        n=n, w=w, d=d,
        embed=rng.normal(scale=1.0 / np.sqrt(w2), size=(d, w2)),
        mix=rng.normal(scale=1.0 / np.sqrt(n2), size=(n2, n2)),
        dec=rng.normal(scale=1.0 / np.sqrt(d), size=(w2, d)),
        mask_token=np.zeros(w2),
    )


def _tokens(model: ToyModel, patches: PatchGrid, plan: MaskPlan) -> np.ndarray:
    """w^2 x n^2 token matrix with masked patches replaced by the mask token."""
    t = patches.blocks.reshape(patches.n * patches.n, patches.w * patches.w).T.copy()
    t[:, plan.masked.reshape(-1)] = model.mask_token[:, None]
    return t


def forward(model: ToyModel, patches: PatchGrid, plan: MaskPlan) -> PatchGrid:
    """Reconstruct all patches from the masked token sequence."""
    if (patches.n, patches.w) != (model.n, model.w):
        raise ValueError(
            f"patch grid ({patches.n}, {patches.w}) does not match model ({model.n}, {model.w})"
        )
    if plan.n != model.n:
        raise ValueError("mask plan does not match model geometry")
    tokens = _tokens(model, patches, plan)
    mixed = (model.embed @ tokens) @ model.mix.T
    recon = model.dec @ mixed
    blocks = recon.T.reshape(model.n, model.n, model.w, model.w)
    return PatchGrid(n=model.n, w=model.w, blocks=blocks)


def _loss_and_grad_blocks(
    patches: PatchGrid,
    recon: PatchGrid,
    plan: MaskPlan,
    cfg: LossConfig,
    table: ScalingTable | None,
    objective: str,
) -> tuple[float, float, np.ndarray, int]:
    """(raw loss, scaled loss, d scaled loss / d recon blocks, clamped count)."""
    if objective == "masked_mae":
        masked = plan.masked
        n_masked = int(masked.sum())
        per_block = freqloss.block_losses(patches, recon, norm="mean")
        if n_masked == 0:
            return 0.0, 0.0, np.zeros_like(recon.blocks), 0
        raw = float(per_block[masked].mean())
        grad = np.zeros_like(recon.blocks)
        grad[masked] = 2.0 * (recon.blocks[masked] - patches.blocks[masked]) / (
            patches.w * patches.w * n_masked
        )
        return raw, raw, grad, 0

    if plan.ratio > 0.0:
        raw = freqloss.focal_loss(patches, recon, plan, cfg)
        grad, clamped = freqloss.focal_loss_grad(patches, recon, plan, cfg)
    else:
        raw = freqloss.mean_loss(patches, recon, cfg)
        grad = freqloss.mean_loss_grad(patches, recon, cfg)
        clamped = 0
    divisor = table.lookup(plan.ratio)
    return raw, raw / divisor, grad / divisor, clamped


def backward(
    model: ToyModel,
    patches: PatchGrid,
    plan: MaskPlan,
    cfg: LossConfig,
    table: ScalingTable | None,
    objective: str = "scaled",
) -> ModelGrads:
    """Closed-form gradients of the (scaled) batch loss for all parameters."""
    tokens = _tokens(model, patches, plan)
    embedded = model.embed @ tokens
    mixed = embedded @ model.mix.T
    recon_mat = model.dec @ mixed
    recon = PatchGrid(n=model.n, w=model.w,
                      blocks=recon_mat.T.reshape(model.n, model.n, model.w, model.w))

    _raw, _scaled, grad_blocks, clamped = _loss_and_grad_blocks(
        patches, recon, plan, cfg, table, objective
    )
    g = grad_blocks.reshape(model.n * model.n, model.w * model.w).T

    d_dec = g @ mixed.T
    d_mixed = model.dec.T @ g
    d_mix = d_mixed.T @ embedded
    d_embedded = d_mixed @ model.mix
    d_embed = d_embedded @ tokens.T
    d_tokens = model.embed.T @ d_embedded
    d_mask_token = d_tokens[:, plan.masked.reshape(-1)].sum(axis=1)
    return ModelGrads(embed=d_embed, mix=d_mix, dec=d_dec, mask_token=d_mask_token,
                      clamped_blocks=clamped)


def _case_mean_losses(per_block: np.ndarray, plan: MaskPlan) -> tuple[float | None, ...]:
    out = []
    for case in (1, 2, 3):
        sel = plan.case_of == case
        out.append(float(per_block[sel].mean()) if sel.any() else None)
    return tuple(out)


def train(
    state: TrainState, dataset: list[MagnitudeGrid], epochs: int
) -> tuple[TrainState, list[tuple]]:
    """Plain SGD over the dataset, one grid per batch.

    Each batch draws its mask ratio from the schedule, samples a fresh
    mask, and applies one gradient step on the scaled loss (or on the
    masked-blocks-only baseline).  Returns the advanced state and the
    per-batch trace rows (batch, ratio, per-case block losses, raw
    total, scaled total).  Deterministic given (seed, config, data).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    patch_sets = [patchify(normalize_grid(g), state.model.w) for g in dataset]
    model = state.model.copy()
    trace: list[tuple] = []
    step = state.step
    for _ in range(epochs):
        for patches in patch_sets:
            ratio = next_ratio(state.schedule, step)
            if ratio > 0.0:
                plan = sample_mask(model.n, ratio, substream(state.seed, STREAM_MASK, step))
            else:
                plan = full_visible_plan(model.n)

            recon = forward(model, patches, plan)
            raw, scaled, _grad_blocks, _clamped = _loss_and_grad_blocks(
                patches, recon, plan, state.cfg, state.table, state.objective
            )
            if not np.isfinite(scaled):
                raise ArithmeticError(
                    f"non-finite loss at step {step} (ratio {ratio}): raw={raw}"
                )
            grads = backward(model, patches, plan, state.cfg, state.table, state.objective)
            model.embed -= state.lr * grads.embed
            model.mix -= state.lr * grads.mix
            model.dec -= state.lr * grads.dec
            model.mask_token -= state.lr * grads.mask_token

            per_block = freqloss.block_losses(patches, recon, norm="mean")
            c1, c2, c3 = _case_mean_losses(per_block, plan)
            trace.append((step, ratio, c1, c2, c3, raw, scaled))
            step += 1
    return replace(state, model=model, step=step), trace


@dataclass(frozen=True)
class CaseErrorReport:
    """Mean block errors grouped by masking case, plus the unmasked error."""

    e1: float | None
    e2: float | None
    e3: float | None
    e_global: float


def case_error_report(
    model: ToyModel,
    dataset: list[MagnitudeGrid],
    ratio: float,
    trials: int,
    seed: int = 0,
) -> CaseErrorReport:
    """Average block errors per case over fresh masks, plus the ratio-0 error."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    patch_sets = [patchify(normalize_grid(g), model.w) for g in dataset]
    sums = {1: 0.0, 2: 0.0, 3: 0.0}
    counts = {1: 0, 2: 0, 3: 0}
    if ratio > 0.0:
        for trial in range(trials):
            plan = sample_mask(model.n, ratio, substream(seed, STREAM_TRIAL, trial))
            for patches in patch_sets:
                per_block = freqloss.block_losses(patches, forward(model, patches, plan),
                                                  norm="mean")
                for case in (1, 2, 3):
                    sel = plan.case_of == case
                    sums[case] += float(per_block[sel].sum())
                    counts[case] += int(sel.sum())
    plan0 = full_visible_plan(model.n)
    g_sum, g_count = 0.0, 0
    for patches in patch_sets:
        per_block = freqloss.block_losses(patches, forward(model, patches, plan0), norm="mean")
        g_sum += float(per_block.sum())
        g_count += per_block.size
    return CaseErrorReport(
        e1=sums[1] / counts[1] if counts[1] else None,
        e2=sums[2] / counts[2] if counts[2] else None,
        e3=sums[3] / counts[3] if counts[3] else None,
        e_global=g_sum / g_count,
    )


# --------------------------------------------------------------------------
# Synthetic centrosymmetric spectra
# --------------------------------------------------------------------------


def _random_real_image(side: int, rng: np.random.Generator,
                       low: float = 2.0, high: float = 150.0,
                       p_high: float = 0.15) -> np.ndarray:
    """Random real image with an informative two-level magnitude spectrum.

    A sparse random subset of bins gets a high amplitude (with
    multiplicative jitter), the rest a low floor, all with random
    phases; Hermitian symmetry makes the inverse transform real, so the
    resulting image's magnitude spectrum is exactly centrosymmetric and
    varies strongly from sample to sample (each patch carries real
    information that only its counterpart shares).
    """
    levels = np.where(rng.random((side, side)) < p_high, high, low)
    levels = levels * np.exp(rng.normal(scale=0.15, size=(side, side)))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(side, side))
    f = levels * np.exp(1j * phases)
    # Hermitian symmetrization: F[u, v] = conj(F[-u, -v]).
    idx = (-np.arange(side)) % side
    f = 0.5 * (f + np.conj(f[idx][:, idx]))
    image = np.fft.ifft2(f).real
    return image


def synthetic_spectra(count: int, side: int, seed: int = 0) -> list[MagnitudeGrid]:
    """Normalized spectra of random real-valued images.

    Real inputs guarantee exact pixel-level centrosymmetry of the
    magnitude; this is asserted per sample.
    """
    rng = substream(seed, STREAM_DATA)
    idx = None
    grids = []
    for _ in range(count):
        image = _random_real_image(side, rng)
        grid = magnitude_spectrum(image, side=side)
        pre_shift = np.fft.ifftshift(grid.values)
        if idx is None:
            idx = (-np.arange(side)) % side
        mirrored = pre_shift[idx][:, idx]
        if not np.allclose(pre_shift, mirrored, rtol=1e-9, atol=1e-9):
            raise AssertionError("synthetic spectrum lost centrosymmetry")
        grids.append(normalize_grid(grid))
    return grids


# --------------------------------------------------------------------------
# Gated fusion of two feature vectors
# --------------------------------------------------------------------------


@dataclass
class GmuParams:
    """Gate and projection weights; biases default to zero."""

    w1: np.ndarray
    w2: np.ndarray
    wz: np.ndarray
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None
    bz: np.ndarray | None = None

    def __post_init__(self):
        h = self.w1.shape[0]
        if self.w2.shape[0] != h or self.wz.shape[0] != h:
            raise ValueError("all projection matrices must share the output dimension")
        if self.wz.shape[1] != self.w1.shape[1] + self.w2.shape[1]:
            raise ValueError("gate matrix must act on the concatenated inputs")
        if self.b1 is None:
            self.b1 = np.zeros(h)
        if self.b2 is None:
            self.b2 = np.zeros(h)
        if self.bz is None:
            self.bz = np.zeros(h)


@dataclass
class GmuGrads:
    w1: np.ndarray
    w2: np.ndarray
    wz: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    bz: np.ndarray
    x1: np.ndarray
    x2: np.ndarray


def init_gmu(d1: int, d2: int, h: int, rng: np.random.Generator) -> GmuParams:
    return GmuParams(
        w1=rng.normal(scale=1.0 / np.sqrt(d1), size=(h, d1)),
        w2=rng.normal(scale=1.0 / np.sqrt(d2), size=(h, d2)),
        wz=rng.normal(scale=1.0 / np.sqrt(d1 + d2), size=(h, d1 + d2)),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gmu_fuse(x1: np.ndarray, x2: np.ndarray, params: GmuParams) -> np.ndarray:
    """h = z * tanh(W1 x1) + (1 - z) * tanh(W2 x2), z = sigmoid(Wz [x1; x2])."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (params.w1.shape[1],) or x2.shape != (params.w2.shape[1],):
        raise ValueError("input dimensions do not match the fusion parameters")
    z = _sigmoid(params.wz @ np.concatenate([x1, x2]) + params.bz)
    a1 = np.tanh(params.w1 @ x1 + params.b1)
    a2 = np.tanh(params.w2 @ x2 + params.b2)
    return z * a1 + (1.0 - z) * a2


def gmu_backward(x1: np.ndarray, x2: np.ndarray, params: GmuParams, dh: np.ndarray) -> GmuGrads:
    """Gradients of ``dh . gmu_fuse(x1, x2)`` for all parameters and inputs."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    xc = np.concatenate([x1, x2])
    s = params.wz @ xc + params.bz
    z = _sigmoid(s)
    a1 = np.tanh(params.w1 @ x1 + params.b1)
    a2 = np.tanh(params.w2 @ x2 + params.b2)

    dz = dh * (a1 - a2)
    ds = dz * z * (1.0 - z)
    dt1 = dh * z * (1.0 - a1 * a1)
    dt2 = dh * (1.0 - z) * (1.0 - a2 * a2)
    dxc = params.wz.T @ ds
    d1 = len(x1)
    return GmuGrads(
        w1=np.outer(dt1, x1),
        w2=np.outer(dt2, x2),
        wz=np.outer(ds, xc),
        b1=dt1,
        b2=dt2,
        bz=ds,
        x1=params.w1.T @ dt1 + dxc[:d1],
        x2=params.w2.T @ dt2 + dxc[d1:],
    )


# --------------------------------------------------------------------------
# Checkpoint format
# --------------------------------------------------------------------------


def save_checkpoint(model: ToyModel, path) -> None:
    """Write magic + version + geometry + f32 LE parameter arrays."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, model.n, model.w, model.d))
        for arr in (model.embed, model.mix, model.dec, model.mask_token):
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic/length in checkpoint {path}")
    version, n, w, d = struct.unpack("<IIII", raw[4:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n2, w2 = n * n, w * w
    sizes = [d * w2, n2 * n2, w2 * d, w2]
    expected = 20 + 4 * sum(sizes)
    if len(raw) != expected:
        raise ValueError(f"bad magic/length in checkpoint {path}: "
                         f"expected {expected} bytes, got {len(raw)}")
    offset = 20
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(raw[offset : offset + 4 * size], dtype="<f4").astype(np.float64))
        offset += 4 * size
    return ToyModel(
        n=n, w=w, d=d,
        embed=arrays[0].reshape(d, w2),
        mix=arrays[1].reshape(n2, n2),
        dec=arrays[2].reshape(w2, d),
        mask_token=arrays[3],
    )
