"""Optimization and linear-algebra kernels.

Self-contained implementations sized for small dense problems: a
Moore-Penrose pseudoinverse via one-sided Jacobi SVD, Powell's
direction-set minimizer with Brent line searches, and cyclic coordinate
descent with soft thresholding for the lasso.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PowellConfig:
    """Termination knobs for the direction-set minimizer."""

    max_iters: int = 200
    xtol: float = 1e-8
    ftol: float = 1e-10
    line_search_tol: float = 1e-10

    def __post_init__(self):
        if min(self.max_iters, 1) < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.xtol, self.ftol, self.line_search_tol) <= 0:
            raise ValueError("all tolerances must be > 0")


# --------------------------------------------------------------------------
# One-sided Jacobi SVD and the pseudoinverse
# --------------------------------------------------------------------------


def jacobi_svd(a: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD of an m x n matrix (m >= n) by one-sided Jacobi rotations.

    Returns (u, s, vt) with ``a ~= u @ diag(s) @ vt``; singular values are
    sorted descending.  Columns belonging to zero singular values are left
    as zero columns of ``u``.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        raise ValueError("jacobi_svd expects m >= n; transpose first")
    u = a.copy()
    v = np.eye(n)
    eps = np.finfo(np.float64).eps
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = u[:, i] @ u[:, i]
                beta = u[:, j] @ u[:, j]
                g = u[:, i] @ u[:, j]
                if alpha * beta == 0.0 or abs(g) <= 10.0 * eps * math.sqrt(alpha * beta):
                    continue
                off = max(off, abs(g) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * g)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ui, uj = u[:, i].copy(), u[:, j].copy()
                u[:, i] = c * ui - s * uj
                u[:, j] = s * ui + c * uj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if off == 0.0:
            break
    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(sigma)[::-1]
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    nonzero = sigma > 0
    u[:, nonzero] = u[:, nonzero] / sigma[nonzero]
    return u, sigma, v.T


def pinv(a: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse via the Jacobi SVD.

    Singular values below ``max(m, n) * sigma_max * 1e-12`` are treated
    as zero, so rank-deficient inputs are handled.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("pinv expects a 2-D matrix")
    if not np.isfinite(a).all():
        raise ValueError("pinv requires finite entries")
    m, n = a.shape
    if m < n:
        return pinv(a.T).T
    u, sigma, vt = jacobi_svd(a)
    if sigma.size == 0 or sigma[0] == 0.0:
        return np.zeros((n, m))
    cutoff = max(m, n) * sigma[0] * 1e-12
    keep = sigma > cutoff
    inv = np.zeros_like(sigma)
    inv[keep] = 1.0 / sigma[keep]
    return (vt.T * inv) @ u.T


# --------------------------------------------------------------------------
# Brent line minimization (bracket + parabolic/golden steps)
# --------------------------------------------------------------------------

_GOLD = 1.618034
_CGOLD = 0.3819660


def _bracket(f, xa: float = 0.0, xb: float = 1.0, grow_limit: float = 110.0, max_iter: int = 1000):
    """Expand downhill from (xa, xb) until f(xa) > f(xb) < f(xc)."""
    fa, fb = f(xa), f(xb)
    if fa < fb:
        xa, xb = xb, xa
        fa, fb = fb, fa
    xc = xb + _GOLD * (xb - xa)
    fc = f(xc)
    it = 0
    while fc < fb:
        tmp1 = (xb - xa) * (fb - fc)
        tmp2 = (xb - xc) * (fb - fa)
        val = tmp2 - tmp1
        denom = 2.0 * math.copysign(max(abs(val), 1e-21), val if val != 0 else 1.0)
        w = xb - ((xb - xc) * tmp2 - (xb - xa) * tmp1) / denom
        wlim = xb + grow_limit * (xc - xb)
        if it > max_iter:
            raise RuntimeError("bracketing failed: too many iterations")
        it += 1
        if (w - xc) * (xb - w) > 0.0:
            fw = f(w)
            if fw < fc:
                return xb, w, xc, fb, fw, fc
            if fw > fb:
                return xa, xb, w, fa, fb, fw
            w = xc + _GOLD * (xc - xb)
            fw = f(w)
        elif (w - wlim) * (wlim - xc) >= 0.0:
            w = wlim
            fw = f(w)
        elif (w - wlim) * (xc - w) > 0.0:
            fw = f(w)
            if fw < fc:
                xb, xc, w = xc, w, w + _GOLD * (w - xc)
                fb, fc, fw = fc, fw, f(w)
        else:
            w = xc + _GOLD * (xc - xb)
            fw = f(w)
        xa, xb, xc = xb, xc, w
        fa, fb, fc = fb, fc, fw
    return xa, xb, xc, fa, fb, fc


def brent_minimize(f, tol: float = 1e-10, max_iter: int = 200) -> tuple[float, float]:
    """1-D minimum of ``f`` near 0 using bracketing plus Brent's method."""
    xa, xb, xc, _fa, fb, _fc = _bracket(f)
    a, b = (xa, xc) if xa < xc else (xc, xa)
    x = w = v = xb
    fx = fw = fv = fb
    deltax = 0.0
    rat = 0.0
    for _ in range(max_iter):
        tol1 = tol * abs(x) + 1e-13
        tol2 = 2.0 * tol1
        xmid = 0.5 * (a + b)
        if abs(x - xmid) < tol2 - 0.5 * (b - a):
            break
        if abs(deltax) <= tol1:
            deltax = (a if x >= xmid else b) - x
            rat = _CGOLD * deltax
        else:
            tmp1 = (x - w) * (fx - fv)
            tmp2 = (x - v) * (fx - fw)
            p = (x - v) * tmp2 - (x - w) * tmp1
            tmp2 = 2.0 * (tmp2 - tmp1)
            if tmp2 > 0.0:
                p = -p
            tmp2 = abs(tmp2)
            dx_temp = deltax
            deltax = rat
            if p > tmp2 * (a - x) and p < tmp2 * (b - x) and abs(p) < abs(0.5 * tmp2 * dx_temp):
                rat = p / tmp2
                u = x + rat
                if (u - a) < tol2 or (b - u) < tol2:
                    rat = math.copysign(tol1, xmid - x)
            else:
                deltax = (a if x >= xmid else b) - x
                rat = _CGOLD * deltax
        u = x + rat if abs(rat) >= tol1 else x + math.copysign(tol1, rat)
        fu = f(u)
        if fu > fx:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w, fv, fw = w, u, fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
        else:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
    return x, fx


# --------------------------------------------------------------------------
# Powell's direction-set method
# --------------------------------------------------------------------------


def _line_minimize(f, point: np.ndarray, direction: np.ndarray, tol: float):
    def goal(alpha: float) -> float:
        value = f(point + alpha * direction)
        if not np.isfinite(value):
            raise ArithmeticError("objective returned a non-finite value during line search")
        return value

    alpha, fmin = brent_minimize(goal, tol=tol)
    return point + alpha * direction, fmin, alpha * direction


def powell_minimize(f, x0, cfg: PowellConfig = PowellConfig()) -> tuple[np.ndarray, float, int]:
    """Minimize ``f`` from ``x0`` by Powell's classic direction-set method.

    Each outer iteration line-minimizes along every direction, then
    replaces the direction of largest decrease with the overall step when
    the standard extrapolation test favors it.  Returns (x*, f(x*), outer
    iterations); the objective never increases between outer iterations.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    fval = f(x)
    if not np.isfinite(fval):
        raise ArithmeticError("objective is non-finite at the starting point")
    ndim = len(x)
    directions = np.eye(ndim)
    x_prev_outer = x.copy()
    iters = 0
    while iters < cfg.max_iters:
        f_start = fval
        biggest_drop = 0.0
        biggest_index = 0
        for i in range(ndim):
            f_before = fval
            x, fval, _step = _line_minimize(f, x, directions[i], cfg.line_search_tol)
            if f_before - fval > biggest_drop:
                biggest_drop = f_before - fval
                biggest_index = i
        iters += 1
        if 2.0 * (f_start - fval) <= cfg.ftol * (abs(f_start) + abs(fval)) + 1e-20:
            break
        if float(np.max(np.abs(x - x_prev_outer))) < cfg.xtol:
            break
        new_direction = x - x_prev_outer
        extrapolated = 2.0 * x - x_prev_outer
        x_prev_outer = x.copy()
        f_extrapolated = f(extrapolated)
        if f_start > f_extrapolated:
            t = 2.0 * (f_start + f_extrapolated - 2.0 * fval)
            t *= (f_start - fval - biggest_drop) ** 2
            t -= biggest_drop * (f_start - f_extrapolated) ** 2
            if t < 0.0:
                x, fval, step = _line_minimize(f, x, new_direction, cfg.line_search_tol)
                if np.linalg.norm(step) > 0.0:
                    directions[biggest_index] = directions[-1]
                    directions[-1] = step / np.linalg.norm(step)
    return x, float(fval), iters


# --------------------------------------------------------------------------
# Lasso via cyclic coordinate descent
# --------------------------------------------------------------------------


def soft_threshold(value: float, threshold: float) -> float:
    return math.copysign(max(abs(value) - threshold, 0.0), value)


def lasso_cd(
    design: np.ndarray,
    target: np.ndarray,
    lam: float,
    tol: float = 1e-10,
    max_sweeps: int = 10000,
) -> np.ndarray:
    """Minimize 0.5 * ||target - design @ u||^2 + lam * ||u||_1.

    Cyclic coordinate descent with soft thresholding, converged when the
    largest coordinate change in a sweep falls below ``tol``.  Zero-norm
    design columns are skipped (their coefficient stays 0) with a warning
    when they correlate with the target.
    """
    x = np.asarray(design, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes: design {x.shape}, target {y.shape}")
    if lam < 0:
        raise ValueError("lasso penalty must be >= 0")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("lasso_cd requires finite inputs")

    n_features = x.shape[1]
    col_sq = np.sum(x * x, axis=0)
    dead = col_sq == 0.0
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} zero-norm design column(s): coordinates skipped, kept at 0"
        )

    u = np.zeros(n_features)
    residual = y.copy()
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(n_features):
            if dead[j]:
                continue
            old = u[j]
            rho = x[:, j] @ residual + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                residual += (old - new) * x[:, j]
                u[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            break
    return u


def lasso_objective(design: np.ndarray, target: np.ndarray, u: np.ndarray, lam: float) -> float:
    r = target - design @ u
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(u)))
