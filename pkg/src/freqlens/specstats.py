"""Special functions and statistics for the loss-scaling chain.

From-scratch numerics: modified Bessel I_nu (power series, large-order
Debye expansion, large-argument expansion), the noncentral chi-squared
density and sampler, adaptive Gauss-Kronrod quadrature, the focal-loss
expectation integral, an unbiased MMD^2 estimator, and Pearson r with a
continued-fraction incomplete-beta p-value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .freqloss import LossConfig, case_mixture_coefficient

# --------------------------------------------------------------------------
# Modified Bessel function of the first kind
# --------------------------------------------------------------------------

_SERIES_MAX_X = 12.0
_UNIFORM_MIN_NU = 50.0
_DEBYE_ORDER = 10


def _debye_polynomials(order: int) -> list[np.ndarray]:
    """Coefficient arrays of the Debye polynomials u_k(t) (DLMF 10.41.10).

    Generated exactly from u_0 = 1 and
    u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds.
    Entry [k][j] is the coefficient of t^j in u_k.
    """
    polys = [{0: Fraction(1)}]
    for _ in range(order):
        u = polys[-1]
        nxt: dict[int, Fraction] = {}
        for power, coeff in u.items():
            if power > 0:
                d = coeff * power
                nxt[power + 1] = nxt.get(power + 1, Fraction(0)) + d / 2
                nxt[power + 3] = nxt.get(power + 3, Fraction(0)) - d / 2
            nxt[power + 1] = nxt.get(power + 1, Fraction(0)) + coeff / (8 * (power + 1))
            nxt[power + 3] = nxt.get(power + 3, Fraction(0)) - 5 * coeff / (8 * (power + 3))
        polys.append(nxt)
    out = []
    for poly in polys:
        arr = np.zeros(max(poly) + 1)
        for power, coeff in poly.items():
            arr[power] = float(coeff)
        out.append(arr)
    return out


_DEBYE = _debye_polynomials(_DEBYE_ORDER)


def _log_bessel_series(nu: float, x: float) -> float:
    """log I_nu(x) by the ascending series; exact for any x (all terms positive)."""
    half = 0.5 * x
    log_t0 = nu * math.log(half) - math.lgamma(nu + 1.0)
    s = 1.0
    t = 1.0
    shift = 0.0
    m = 0
    q = half * half
    while m < 100000:
        t *= q / ((m + 1.0) * (m + 1.0 + nu))
        s += t
        m += 1
        if t < s * 1e-18:
            break
        if s > 1e250:
            s *= 1e-250
            t *= 1e-250
            shift += 250.0 * math.log(10.0)
    return log_t0 + shift + math.log(s)


def _log_bessel_uniform(nu: float, x: float) -> float:
    """log I_nu(x) by the uniform large-order (Debye) expansion."""
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    eta = root + math.log(z / (1.0 + root))
    t = 1.0 / root
    powers = np.power(t, np.arange(max(len(p) for p in _DEBYE)))
    series = 0.0
    for k, poly in enumerate(_DEBYE):
        series += float(powers[: len(poly)] @ poly) / nu**k
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.5 * math.log(root) + math.log(series)


def _log_bessel_large_arg(nu: float, x: float) -> float:
    """log I_nu(x) by the large-argument expansion, truncated at the smallest term."""
    mu = 4.0 * nu * nu
    s = 1.0
    term = 1.0
    prev = math.inf
    k = 1
    while k < 60:
        factor = -(mu - (2.0 * k - 1.0) ** 2) / (8.0 * k * x)
        term *= factor
        if abs(term) >= prev:
            break
        s += term
        prev = abs(term)
        if prev < 1e-18:
            break
        k += 1
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(s)


def log_bessel_i(nu: float, x: float) -> float:
    """Natural log of I_nu(x); -inf where I_nu(x) == 0."""
    if x < 0:
        raise ValueError("bessel_i requires x >= 0")
    if nu < 0:
        raise ValueError("bessel_i requires nu >= 0")
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    if x <= _SERIES_MAX_X:
        return _log_bessel_series(nu, x)
    if nu >= _UNIFORM_MIN_NU:
        return _log_bessel_uniform(nu, x)
    if x >= _SERIES_MAX_X + 1.2 * nu * nu:
        return _log_bessel_large_arg(nu, x)
    return _log_bessel_series(nu, x)


def bessel_i(nu: float, x: float) -> float:
    """Modified Bessel function of the first kind I_nu(x), nu >= 0, x >= 0."""
    lg = log_bessel_i(nu, x)
    if lg == -math.inf:
        return 0.0
    if lg > 709.0:
        return math.inf
    return math.exp(lg)


# --------------------------------------------------------------------------
# Noncentral chi-squared distribution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Chi2Spec:
    """Degrees of freedom and noncentrality of the block-loss model."""

    k: float
    lambda_nc: float

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("degrees of freedom k must be > 0")
        if self.lambda_nc < 0:
            raise ValueError("noncentrality must be >= 0")

    @property
    def mean(self) -> float:
        return self.k + self.lambda_nc

    @property
    def variance(self) -> float:
        return 2.0 * (self.k + 2.0 * self.lambda_nc)


def nc_chi2_logpdf(spec: Chi2Spec, x: float) -> float:
    k, lam = spec.k, spec.lambda_nc
    if x < 0:
        raise ValueError("chi-squared support is x >= 0")
    if lam > 0.0 and k < 2.0:
        raise ValueError("the noncentral density form needs k >= 2 (Bessel order k/2 - 1 >= 0)")
    if x == 0.0:
        if k == 2.0:
            return math.log(0.5) - lam / 2.0
        return -math.inf if k > 2.0 else math.inf
    if lam == 0.0:
        h = 0.5 * k
        return (h - 1.0) * math.log(x) - 0.5 * x - math.lgamma(h) - h * math.log(2.0)
    return (
        -math.log(2.0)
        - 0.5 * (x + lam)
        + (0.25 * k - 0.5) * math.log(x / lam)
        + log_bessel_i(0.5 * k - 1.0, math.sqrt(lam * x))
    )


def nc_chi2_pdf(spec: Chi2Spec, x: float) -> float:
    """Density f(x; k, lambda); the central form is used when lambda == 0."""
    lg = nc_chi2_logpdf(spec, x)
    if lg == -math.inf:
        return 0.0
    return math.exp(lg)


def nc_chi2_sample(spec: Chi2Spec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws via the Poisson mixture of central chi-squared variables."""
    j = rng.poisson(spec.lambda_nc / 2.0, size=size)
    return rng.gamma(shape=spec.k / 2.0 + j, scale=2.0, size=size)


# --------------------------------------------------------------------------
# Adaptive Gauss-Kronrod quadrature
# --------------------------------------------------------------------------

_KRONROD_NODES = np.array([
    0.0,
    0.2077849550078985,
    0.4058451513773972,
    0.5860872354676911,
    0.7415311855993944,
    0.8648644233597691,
    0.9491079123427585,
    0.9914553711208126,
])
_KRONROD_WEIGHTS = np.array([
    0.2094821410847278,
    0.2044329400752989,
    0.1903505780647854,
    0.1690047266392679,
    0.1406532597155259,
    0.1047900103222502,
    0.06309209262997855,
    0.02293532201052922,
])
_GAUSS_WEIGHTS = {  # weights of the embedded 7-point Gauss rule, by node index
    0: 0.4179591836734694,
    2: 0.3818300505051189,
    4: 0.2797053914892767,
    6: 0.1294849661688697,
}


def _gk15(f, a: float, b: float) -> tuple[float, float]:
    """15-point Kronrod estimate and |K15 - G7| error estimate on [a, b]."""
    center = 0.5 * (a + b)
    half = 0.5 * (b - a)
    kronrod = 0.0
    gauss = 0.0
    for idx in range(8):
        node = _KRONROD_NODES[idx]
        if idx == 0:
            fsum = f(center)
        else:
            fsum = f(center - half * node) + f(center + half * node)
        kronrod += _KRONROD_WEIGHTS[idx] * fsum
        if idx in _GAUSS_WEIGHTS:
            gauss += _GAUSS_WEIGHTS[idx] * fsum
    kronrod *= half
    gauss *= half
    return kronrod, abs(kronrod - gauss)


def adaptive_quad(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 48) -> float:
    """Integrate ``f`` over [a, b] by bisection-refined Gauss-Kronrod.

    Intervals are split until the local error estimate drops below the
    tolerance share of the interval; a stalled split (depth exhausted) is
    accepted with its last estimate.
    """
    if b <= a:
        return 0.0
    total_width = b - a

    def recurse(lo: float, hi: float, depth: int) -> float:
        est, err = _gk15(f, lo, hi)
        local_tol = max(tol * (hi - lo) / total_width, 1e-16 * abs(est))
        if err <= local_tol or depth >= max_depth:
            return est
        mid = 0.5 * (lo + hi)
        return recurse(lo, mid, depth + 1) + recurse(mid, hi, depth + 1)

    return recurse(a, b, 0)


# --------------------------------------------------------------------------
# Focal expectation and the scaling table
# --------------------------------------------------------------------------


def loss_scale(spec: Chi2Spec) -> float:
    """Divisor mapping block losses into (0, 1): mean + 6 standard deviations."""
    return spec.mean + 6.0 * math.sqrt(spec.variance)


def _upper_cutoff(spec: Chi2Spec, tail: float = 1e-10) -> float:
    """Upper integration limit: the (1 - tail) quantile, found by bisection
    on the survival function (survival evaluated by quadrature)."""
    pdf = lambda x: nc_chi2_pdf(spec, x)
    far = spec.mean + 10.0 * math.sqrt(spec.variance) + 10.0
    while nc_chi2_logpdf(spec, far) > math.log(1e-30) and far < 1e9:
        far *= 1.5
    total = adaptive_quad(pdf, 0.0, far)
    lo, hi = spec.mean, far
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if adaptive_quad(pdf, mid, far) > tail * total:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9 * (1.0 + hi):
            break
    return hi


def focal_expectation(
    spec: Chi2Spec,
    gamma: float,
    variant: str = "complement",
    clamp_eps: float = 1e-6,
    loss_map=None,
) -> float:
    """E[core(Lhat)] where Lhat = clamp(x / loss_scale, eps, 1-eps).

    ``core`` is the focal core of the chosen variant; ``loss_map`` may
    override the default block-loss mapping (mainly for tests).  The
    integrand is integrated piecewise between the clamp kinks with the
    tail truncated at the 1 - 1e-10 quantile.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if variant not in ("paper", "complement"):
        raise ValueError("variant must be 'paper' or 'complement'")

    scale = loss_scale(spec)
    if loss_map is None:
        loss_map = lambda x: min(max(x / scale, clamp_eps), 1.0 - clamp_eps)

    if variant == "paper":
        core = lambda lh: (1.0 - lh) ** gamma * math.log(lh)
    else:
        core = lambda lh: lh**gamma * math.log(1.0 - lh)

    def integrand(x: float) -> float:
        p = nc_chi2_pdf(spec, x)
        return core(loss_map(x)) * p if p > 0.0 else 0.0

    cut = _upper_cutoff(spec)
    breakpoints = sorted({0.0, clamp_eps * scale, (1.0 - clamp_eps) * scale, cut})
    breakpoints = [b for b in breakpoints if 0.0 <= b <= cut]
    if breakpoints[-1] < cut:
        breakpoints.append(cut)

    value = 0.0
    for lo, hi in zip(breakpoints[:-1], breakpoints[1:]):
        value += adaptive_quad(integrand, lo, hi)
    if not math.isfinite(value):
        raise ArithmeticError("focal expectation integral did not converge to a finite value")
    return value


@dataclass
class ScalingTable:
    """Per-ratio expected-loss divisors for the scaled training loss."""

    entries: dict[float, float]
    chi2: Chi2Spec
    gamma: float
    coefficient_mode: str

    def lookup(self, ratio: float) -> float:
        if ratio in self.entries:
            return self.entries[ratio]
        for level, value in self.entries.items():
            if abs(level - ratio) < 1e-12:
                return value
        raise KeyError(f"ratio {ratio} has no scaling-table entry (levels: {sorted(self.entries)})")

    def to_json(self) -> str:
        payload = {
            "gamma": self.gamma,
            "k": self.chi2.k,
            "lambda": self.chi2.lambda_nc,
            "coefficient_mode": self.coefficient_mode,
            "entries": {str(level): value for level, value in self.entries.items()},
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalingTable":
        payload = json.loads(text)
        return cls(
            entries={float(level): float(v) for level, v in payload["entries"].items()},
            chi2=Chi2Spec(k=float(payload["k"]), lambda_nc=float(payload["lambda"])),
            gamma=float(payload["gamma"]),
            coefficient_mode=str(payload["coefficient_mode"]),
        )


def build_scaling_table(levels, spec: Chi2Spec, gamma: float, cfg: LossConfig) -> ScalingTable:
    """Expected loss per ratio level under the chi-squared block-loss model.

    Nonzero ratios get |coefficient(r) * E[core(Lhat)]|; ratio 0 gets
    E[Lhat].  Entries are stored as positive magnitudes since they are
    used as divisors.
    """
    entries: dict[float, float] = {}
    expectation = None
    for r in levels:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"ratio level must lie in [0, 1), got {r}")
        if r == 0.0:
            value = _expected_lhat(spec, cfg.clamp_eps)
        else:
            if expectation is None:
                expectation = focal_expectation(spec, gamma, cfg.variant, cfg.clamp_eps)
            value = abs(case_mixture_coefficient(r, cfg.coefficient_mode) * expectation)
        if not (math.isfinite(value) and value > 0.0):
            raise ArithmeticError(f"scaling entry for ratio {r} underflowed to {value}")
        entries[float(r)] = value
    return ScalingTable(entries=entries, chi2=spec, gamma=gamma, coefficient_mode=cfg.coefficient_mode)


def _expected_lhat(spec: Chi2Spec, clamp_eps: float) -> float:
    """E[clamp(x / loss_scale, eps, 1-eps)] by quadrature."""
    scale = loss_scale(spec)
    lmap = lambda x: min(max(x / scale, clamp_eps), 1.0 - clamp_eps)

    def integrand(x: float) -> float:
        p = nc_chi2_pdf(spec, x)
        return lmap(x) * p if p > 0.0 else 0.0

    cut = _upper_cutoff(spec)
    breakpoints = sorted({0.0, clamp_eps * scale, min((1.0 - clamp_eps) * scale, cut), cut})
    value = 0.0
    for lo, hi in zip(breakpoints[:-1], breakpoints[1:]):
        value += adaptive_quad(integrand, lo, hi)
    return value


def estimate_chi2_spec(block_losses, k_fixed: float, scale: float = 1.0) -> Chi2Spec:
    """Method-of-moments noncentrality from observed block losses.

    ``scale`` restores samples recorded in a normalized domain back to
    the raw chi-squared domain; lambda = max(mean * scale - k, 0).
    """
    sample = np.asarray(block_losses, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("empty block-loss sample")
    if k_fixed <= 0:
        raise ValueError("k_fixed must be > 0")
    lam = max(float(sample.mean()) * scale - k_fixed, 0.0)
    return Chi2Spec(k=k_fixed, lambda_nc=lam)


# --------------------------------------------------------------------------
# Two-sample and correlation statistics
# --------------------------------------------------------------------------


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    x = np.asarray(pooled, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    iu = np.triu_indices(len(x), k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med > 0.0 else 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with a Gaussian RBF kernel.

    The bandwidth defaults to the median pairwise distance of the pooled
    sample.  For equal sample sizes this is the paired one-sample
    U-statistic (exactly zero when the two samples are identical); for
    unequal sizes the three-term unbiased form is used.  Either way the
    estimate may come out slightly negative.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("both samples need at least 2 rows")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([a, b]))
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)

    def gram(x, y):
        sx = np.sum(x * x, axis=1)
        sy = np.sum(y * y, axis=1)
        return np.exp(-gamma * np.maximum(sx[:, None] + sy[None, :] - 2.0 * (x @ y.T), 0.0))

    kaa = gram(a, a)
    kbb = gram(b, b)
    kab = gram(a, b)
    if m == n:
        h = kaa + kbb - kab - kab.T
        return float((h.sum() - np.trace(h)) / (m * (m - 1)))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    term_ab = 2.0 * kab.sum() / (m * n)
    return float(term_a + term_b - term_ab)


def _betacf(a: float, b: float, x: float, max_iter: int = 300) -> float:
    """Continued fraction for the incomplete beta (modified Lentz method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction failed to converge")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def pearson(x, y) -> tuple[float, float]:
    """Sample Pearson r and the two-sided Student-t p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D vectors")
    n = len(x)
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(xc @ xc))
    sy = float(np.sqrt(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson is undefined for a constant input vector")
    r = float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))
    if abs(r) >= 1.0 - 1e-14:  # exact linear dependence up to rounding
        return math.copysign(1.0, r), 0.0
    df = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t2 = df * r * r / (1.0 - r * r)
    p = reg_inc_beta(0.5 * df, 0.5, df / (df + t2))
    return r, float(min(max(p, 0.0), 1.0))
