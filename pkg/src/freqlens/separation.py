"""Real/fake separation analysis on extracted feature sets.

Fits a separating direction robustly: per-fake-sample slack variables
absorb sparse outliers under an l1 penalty, the worst-slack rows are
dropped, and the direction is refit by least squares on the kept rows.
Distances to the resulting hyperplane feed a scalar separation index:
the largest gap between fake-cluster mean distances, relative to the
combined real and fake mean distances.  A small index means the fake
clusters sit tightly together compared to the real/fake gap, which is
the signature of a detector that generalizes across fake sources.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numopt import PowellConfig, lasso_cd, lasso_objective, pinv, powell_minimize

REAL_TAG = "real"
UNSEEN_TAG = "unseen"
SOLVERS = ("cd", "powell")


@dataclass
class FeatureSet:
    """n x d features with 0/1 labels and per-row cluster tags."""

    features: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.clusters = np.asarray(self.clusters, dtype=object)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise ValueError("features must be a non-empty n x d matrix")
        if self.labels.shape != (n,) or self.clusters.shape != (n,):
            raise ValueError("labels/clusters must align with feature rows")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (real) or 1 (fake)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def fake_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def real_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    def training_cluster_tags(self) -> list[str]:
        tags = {str(self.clusters[i]) for i in self.fake_rows} - {UNSEEN_TAG}
        return sorted(tags)

    def restrict(self, rows: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.features[rows], self.labels[rows], self.clusters[rows])


@dataclass
class RobustFit:
    """Fitted direction, per-fake slacks, and the fit configuration."""

    u_star: np.ndarray
    theta_star: np.ndarray
    lam: float
    kept_fraction: float = 0.8
    t0: float = 0.5
    solver: str = "cd"
    kept_rows: np.ndarray | None = None
    theta_init: str = "zero"

    def __post_init__(self):
        if float(np.linalg.norm(self.u_star)) == 0.0:
            raise ValueError("hyperplane undefined: zero-norm direction")
        if not 0.0 < self.kept_fraction <= 1.0:
            raise ValueError("kept_fraction must lie in (0, 1]")


@dataclass
class RhoReport:
    """Separation index with its per-cluster breakdown."""

    rho: float
    per_cluster_mean_distance: dict[str, float]
    real_mean_distance: float
    fake_mean_distance: float
    fit: RobustFit
    numerator_mode: str = "cluster_mean"

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "per_cluster_mean_distance": self.per_cluster_mean_distance,
            "real_mean_distance": self.real_mean_distance,
            "fake_mean_distance": self.fake_mean_distance,
            "numerator_mode": self.numerator_mode,
            "fit": {
                "u_star": self.fit.u_star.tolist(),
                "theta_star": self.fit.theta_star.tolist(),
                "lam": self.fit.lam,
                "kept_fraction": self.fit.kept_fraction,
                "t0": self.fit.t0,
                "solver": self.fit.solver,
                "theta_init": self.fit.theta_init,
                "kept_rows": None if self.fit.kept_rows is None else self.fit.kept_rows.tolist(),
            },
        }


def residual_projector(features: np.ndarray) -> np.ndarray:
    """P = I - F (F^T F)^+ F^T, the projector onto the complement of col(F)."""
    f = np.asarray(features, dtype=np.float64)
    return np.eye(f.shape[0]) - f @ pinv(f.T @ f) @ f.T


def residualize(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    """Lasso design and target for the slack fit.

    The slack vector is supported on fake rows only, so the effective
    design is the fake-row columns of the projector; the target is the
    projected label vector.  An all-zero feature matrix degenerates to
    the identity projector (empty column space).
    """
    proj = residual_projector(fs.features)
    l_tilde = proj @ fs.labels.astype(np.float64)
    return proj[:, fs.fake_rows], l_tilde


def fit_theta(fs: FeatureSet, lam: float, solver: str = "cd") -> np.ndarray:
    """Per-fake-sample slacks minimizing the penalized projected residual."""
    if lam < 0:
        raise ValueError("penalty must be >= 0")
    if solver not in SOLVERS:
        raise ValueError(f"solver must be one of {SOLVERS}")
    design, l_tilde = residualize(fs)
    if solver == "powell" and design.shape[1] > 200:
        import warnings

        warnings.warn(
            f"powell is the reference solver and scales poorly past a few hundred "
            f"slack variables (got {design.shape[1]}); coordinate descent ('cd') "
            f"solves the same problem"
        )
    if solver == "cd":
        return lasso_cd(design, l_tilde, lam, tol=1e-12)
    objective = lambda u: lasso_objective(design, l_tilde, u, lam)
    theta, value, _iters = powell_minimize(
        objective, np.zeros(design.shape[1]), PowellConfig(max_iters=400)
    )
    if not math.isfinite(value):
        raise ArithmeticError("slack solver produced a non-finite objective")
    return theta


def auto_lambda(fs: FeatureSet, kept_fraction: float = 0.8, iters: int = 40) -> float:
    """Penalty chosen so roughly (1 - kept_fraction) of fakes carry slack.

    Bisection on the nonzero-slack count, mirroring the retention rule
    of the hyperplane refit.
    """
    design, l_tilde = residualize(fs)
    n_fake = design.shape[1]
    target = int(round((1.0 - kept_fraction) * n_fake))
    lam_hi = float(np.abs(design.T @ l_tilde).max())
    if target <= 0 or lam_hi == 0.0:
        return lam_hi if lam_hi > 0.0 else 1.0
    lam_lo = 0.0
    lam = lam_hi
    for _ in range(iters):
        lam = 0.5 * (lam_lo + lam_hi)
        count = int(np.count_nonzero(np.abs(lasso_cd(design, l_tilde, lam, tol=1e-10)) > 1e-12))
        if count > target:
            lam_lo = lam
        elif count < target:
            lam_hi = lam
        else:
            break
    return lam


def fit_hyperplane(
    fs: FeatureSet,
    theta_star: np.ndarray,
    kept_fraction: float = 0.8,
    *,
    t0: float = 0.5,
    lam: float = float("nan"),
    solver: str = "cd",
) -> RobustFit:
    """Least-squares direction on the rows with the smallest slacks.

    Rows are ranked by |z_i theta_i| ascending (real rows score 0, ties
    broken by row order); the lowest ``kept_fraction`` are kept.  Rows
    with exactly zero slack are never dropped, so with all-zero slacks
    this reduces to ordinary least squares on the full data.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    fake_rows = fs.fake_rows
    if theta_star.shape != (len(fake_rows),):
        raise ValueError("theta_star must align with the fake rows")
    scores = np.zeros(fs.n)
    scores[fake_rows] = np.abs(theta_star)

    n_keep = int(math.ceil(kept_fraction * fs.n))
    order = np.argsort(scores, kind="stable")
    drop = [row for row in order[n_keep:] if scores[row] > 0.0]
    kept = np.setdiff1d(np.arange(fs.n), np.asarray(drop, dtype=int))

    labels_kept = fs.labels[kept]
    if len(kept) == 0 or labels_kept.min() == labels_kept.max():
        raise ValueError("hyperplane undefined: kept set is empty or single-class")
    f_low = fs.features[kept]
    l_low = fs.labels[kept].astype(np.float64)
    u_star = pinv(f_low.T @ f_low) @ f_low.T @ l_low
    return RobustFit(
        u_star=u_star,
        theta_star=theta_star,
        lam=lam,
        kept_fraction=kept_fraction,
        t0=t0,
        solver=solver,
        kept_rows=kept,
    )


def fit_robust(
    fs: FeatureSet,
    lam: float | None = None,
    solver: str = "cd",
    kept_fraction: float = 0.8,
    t0: float = 0.5,
) -> RobustFit:
    """Full pipeline: choose the penalty, fit slacks, refit the direction."""
    if len(fs.real_rows) == 0 or len(fs.fake_rows) == 0:
        raise ValueError("fitting needs at least one real and one fake row")
    if lam is None:
        lam = auto_lambda(fs, kept_fraction)
    theta = fit_theta(fs, lam, solver)
    return fit_hyperplane(fs, theta, kept_fraction, t0=t0, lam=lam, solver=solver)


def distance(fit: RobustFit, x: np.ndarray) -> float:
    """Distance of one point to the hyperplane u . x = t0."""
    u = fit.u_star
    return abs(float(u @ np.asarray(x, dtype=np.float64)) - fit.t0) / float(np.linalg.norm(u))


def distances(fit: RobustFit, features: np.ndarray) -> np.ndarray:
    u = fit.u_star
    return np.abs(features @ u - fit.t0) / float(np.linalg.norm(u))


def rho_index(fs: FeatureSet, fit: RobustFit) -> RhoReport:
    """Largest fake-cluster mean-distance gap over the real+fake mean distances.

    Cluster means (not sums) enter the numerator so the index is
    invariant to cluster sizes; unseen-tagged fakes count toward the
    fake mean in the denominator but not toward the numerator.
    """
    training_tags = fs.training_cluster_tags()
    if len(training_tags) < 2:
        raise ValueError("separation index needs at least 2 fake training clusters")
    if len(fs.real_rows) == 0:
        raise ValueError("separation index needs at least 1 real row")

    dist = distances(fit, fs.features)
    per_cluster: dict[str, float] = {}
    for tag in sorted({str(c) for c in fs.clusters}):
        rows = np.flatnonzero(np.array([str(c) == tag for c in fs.clusters]))
        per_cluster[tag] = float(dist[rows].mean())

    training_means = [per_cluster[tag] for tag in training_tags]
    numerator = max(training_means) - min(training_means)
    real_mean = float(dist[fs.real_rows].mean())
    fake_mean = float(dist[fs.fake_rows].mean())
    denominator = real_mean + fake_mean
    if denominator == 0.0:
        raise ZeroDivisionError("separation index undefined: zero mean distances")
    return RhoReport(
        rho=numerator / denominator,
        per_cluster_mean_distance=per_cluster,
        real_mean_distance=real_mean,
        fake_mean_distance=fake_mean,
        fit=fit,
    )


def pca_project(fs: FeatureSet, dims: int = 2) -> np.ndarray:
    """Centered PCA projection onto the top principal axes.

    Deterministic up to sign, which is fixed by making the
    largest-magnitude loading of each axis positive.  A degenerate
    (constant) feature set projects to zeros.
    """
    if fs.n < 3:
        raise ValueError("projection needs at least 3 rows")
    centered = fs.features - fs.features.mean(axis=0)
    if not np.any(np.abs(centered) > 0):
        import warnings

        warnings.warn("degenerate covariance: zero projection")
        return np.zeros((fs.n, dims))
    _u, _s, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:dims]
    for i in range(axes.shape[0]):
        lead = np.argmax(np.abs(axes[i]))
        if axes[i, lead] < 0:
            axes[i] = -axes[i]
    return centered @ axes.T


# --------------------------------------------------------------------------
# Feature CSV format
# --------------------------------------------------------------------------


def load_feature_csv(paths) -> FeatureSet:
    """Read and merge feature CSVs (header: id,label,cluster,f0,...,f{d-1})."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    all_features: list[list[float]] = []
    all_labels: list[int] = []
    all_clusters: list[str] = []
    dim: int | None = None
    dim_source = None
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:3] != ["id", "label", "cluster"]:
                raise ValueError(f"{path}: expected header id,label,cluster,f0,...")
            d = len(header) - 3
            expected = [f"f{i}" for i in range(d)]
            if header[3:] != expected:
                raise ValueError(f"{path}: feature columns must be f0..f{d - 1}")
            if dim is None:
                dim, dim_source = d, path
            elif d != dim:
                raise ValueError(
                    f"feature dimension mismatch: {dim_source} has d={dim}, {path} has d={d}"
                )
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3 + d:
                    raise ValueError(f"{path}:{line}: expected {3 + d} fields, got {len(row)}")
                label = int(row[1])
                if label not in (0, 1):
                    raise ValueError(f"{path}:{line}: label must be 0 or 1")
                all_labels.append(label)
                all_clusters.append(row[2])
                all_features.append([float(v) for v in row[3:]])
    if not all_features:
        raise ValueError("no feature rows found")
    return FeatureSet(
        features=np.asarray(all_features),
        labels=np.asarray(all_labels),
        clusters=np.asarray(all_clusters, dtype=object),
    )


def save_feature_csv(fs: FeatureSet, path, ids=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "cluster"] + [f"f{i}" for i in range(fs.d)])
        for i in range(fs.n):
            row_id = ids[i] if ids is not None else i
            writer.writerow(
                [row_id, int(fs.labels[i]), str(fs.clusters[i])] + list(fs.features[i])
            )


def save_rho_report(report: RhoReport, path, meta: dict | None = None) -> None:
    payload = report.to_dict()
    if meta is not None:
        payload["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
