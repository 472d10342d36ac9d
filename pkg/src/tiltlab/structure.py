"""Verifiers for the geometric facts behind the random-workload bounds.

Covers the L1/L2 K-functional and its soft-threshold solver, exact and
Monte Carlo Rademacher tails, column-sum concentration of random +-1
matrices, the expanding/regular properties of tilted column distributions,
and the exponential-reweighting shift bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapacityError
from .linalg import lambda_max_psd

EXACT_TAIL_CAP = 22
ETA_PROBE_SCALE = 0.06
K12_SEARCH_TOL = 1e-9


# --------------------------------------------------------------------------
# K-functional


def _golden_min(f, lo: float, hi: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return min(fc, fd)


def k12(a: np.ndarray, t: float) -> float:
    """K_{1,2}(a, t) = inf{||a'||_1 + t ||a''||_2 : a' + a'' = a}.

    The optimal a'' clips a at some magnitude level c, so the infimum is a
    one-dimensional minimization of
        g(c) = sum_{|a_i| > c}(|a_i| - c) + t sqrt(sum min(|a_i|, c)^2)
    over c >= 0; g is convex between consecutive sorted magnitudes, so each
    segment is searched to 1e-9 and the best value returned.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    mags = np.sort(np.abs(np.asarray(a, dtype=float)))
    if t == 0 or mags.sum() == 0:
        return 0.0

    def g(c):
        above = mags[mags > c]
        clipped = np.minimum(mags, c)
        return float(above.sum()) - c * len(above) + t * math.sqrt(
            float((clipped ** 2).sum())
        )

    edges = np.concatenate([[0.0], mags])
    best = g(mags[-1])
    for i in range(len(edges) - 1):
        lo, hi = float(edges[i]), float(edges[i + 1])
        if hi - lo <= K12_SEARCH_TOL:
            best = min(best, g(lo))
            continue
        best = min(best, g(lo), _golden_min(g, lo, hi, K12_SEARCH_TOL))
    return best


def is_good_vector(a: np.ndarray) -> bool:
    """At least d/2 coordinates reach ||a||_2 / (5 sqrt(d))."""
    a = np.asarray(a, dtype=float)
    d = len(a)
    level = np.linalg.norm(a) / (5 * math.sqrt(d))
    return int(np.sum(np.abs(a) >= level)) >= d / 2


def k12_sandwich_constant(a: np.ndarray, t_grid=None) -> float:
    """Largest c with c t ||a||_2 <= k12(a, t) for all grid t <= c sqrt(d).

    The upper side k12 <= t ||a||_2 holds unconditionally (take a' = 0);
    the returned constant quantifies the lower side on the grid.
    """
    a = np.asarray(a, dtype=float)
    d = len(a)
    l2 = np.linalg.norm(a)
    if l2 == 0:
        return 0.0
    if t_grid is None:
        t_grid = np.linspace(0.05, math.sqrt(d), 40)
    t_grid = np.asarray(t_grid, dtype=float)
    vals = np.array([k12(a, t) for t in t_grid])

    def ok(c):
        active = t_grid <= c * math.sqrt(d)
        return bool(np.all(vals[active] >= c * t_grid[active] * l2))

    lo, hi = 0.0, 1.0
    if ok(hi):
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


# --------------------------------------------------------------------------
# Rademacher tails


def _all_sign_sums(a: np.ndarray) -> np.ndarray:
    sums = np.zeros(1)
    for v in a:
        sums = np.concatenate([sums + v, sums - v])
    return sums


def exact_sign_tail(a: np.ndarray, thresholds) -> np.ndarray:
    """Pr[<a, x> >= T] over uniform signs x, exactly, via half-enumeration."""
    a = np.asarray(a, dtype=float)
    d = len(a)
    if d > EXACT_TAIL_CAP:
        raise CapacityError(f"exact tails need d <= {EXACT_TAIL_CAP}")
    half = d // 2
    left = _all_sign_sums(a[:half])
    right = np.sort(_all_sign_sums(a[half:]))
    out = []
    for t in np.atleast_1d(np.asarray(thresholds, dtype=float)):
        idx = np.searchsorted(right, t - left, side="left")
        out.append(float(np.sum(len(right) - idx)) / 2 ** d)
    return np.array(out)


@dataclass
class TailReport:
    t_values: np.ndarray
    probabilities: np.ndarray
    stderr: np.ndarray
    hoeffding_bound: np.ndarray
    hoeffding_ok: list
    good_vector: bool
    lower_checked: bool
    fitted_c: np.ndarray
    mode: str
    notice: str = ""


def rademacher_tail(
    a: np.ndarray,
    t_values,
    mode: str = "exact",
    samples: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> TailReport:
    """Tails Pr[<a, x> >= t ||a||_2] with the exp(-t^2/2) upper bound checked
    and the lower-bound constant fitted when the vector is good."""
    a = np.asarray(a, dtype=float)
    t_values = np.asarray(np.atleast_1d(t_values), dtype=float)
    l2 = np.linalg.norm(a)
    thresholds = t_values * l2
    if mode == "exact":
        probs = exact_sign_tail(a, thresholds)
        stderr = np.zeros_like(probs)
    elif mode == "mc":
        if samples < 1 or rng is None:
            raise ValueError("mc mode needs samples >= 1 and an rng")
        signs = np.where(rng.random((samples, len(a))) < 0.5, 1.0, -1.0)
        sums = signs @ a
        probs = np.array([(sums >= t).mean() for t in thresholds])
        stderr = np.sqrt(probs * (1 - probs) / samples)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    bound = np.exp(-(t_values ** 2) / 2)
    hoeffding_ok = [
        bool(p <= b + 4 * se + 1e-15)
        for p, b, se in zip(probs, bound, stderr)
    ]
    good = is_good_vector(a)
    with np.errstate(divide="ignore"):
        fitted = np.where(
            t_values > 0,
            -np.log(np.maximum(probs, 1e-300)) / np.maximum(t_values, 1e-300) ** 2,
            np.nan,
        )
    notice = "" if good else "not a good vector; lower-bound fit skipped"
    return TailReport(
        t_values=t_values,
        probabilities=probs,
        stderr=stderr,
        hoeffding_bound=bound,
        hoeffding_ok=hoeffding_ok,
        good_vector=good,
        lower_checked=good,
        fitted_c=fitted,
        mode=mode,
        notice=notice,
    )


def fit_joint_tail_constant(vectors, t_values, hi: float = 64.0) -> float:
    """Smallest c >= 1 with Pr[<x,a> >= K12(a, t||a||_2)/c] >= e^{-c t^2}/c
    across every (vector, t) pair; +inf when even ``hi`` fails."""
    t_values = list(t_values)
    prepared = []
    for a in vectors:
        a = np.asarray(a, dtype=float)
        l2 = np.linalg.norm(a)
        kvals = np.array([k12(a, t * l2) for t in t_values])
        prepared.append((a, kvals))

    def ok(c):
        for a, kvals in prepared:
            probs = exact_sign_tail(a, kvals / c)
            for t, p in zip(t_values, probs):
                if p < math.exp(-c * t * t) / c:
                    return False
        return True

    if not ok(hi):
        return math.inf
    lo_c, hi_c = 1.0, hi
    if ok(lo_c):
        return lo_c
    for _ in range(50):
        mid = 0.5 * (lo_c + hi_c)
        if ok(mid):
            hi_c = mid
        else:
            lo_c = mid
    return hi_c


# --------------------------------------------------------------------------
# random-matrix checks


def _validate_pm1(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("matrix must be 2-D (columns are points)")
    if not np.all(np.abs(a) == 1):
        raise ValueError("matrix entries must be +-1")
    return a


@dataclass
class ColumnSumReport:
    k: int
    trials: int
    cap: float
    max_ratio: float
    violations: int
    mean_sq: float
    expected_sq: float
    stderr_sq: float


def check_column_sums(
    a: np.ndarray,
    k: int,
    subset_trials: int,
    rng: np.random.Generator,
    cap_scale: float = 0.1,
) -> ColumnSumReport:
    """Sample k-subsets of columns and test ||sum||_2 <= sqrt(2 k d).

    Also accumulates ||sum||_2^2, whose exact expectation over a random
    +-1 matrix and subset is k d.
    """
    a = _validate_pm1(a)
    d, n = a.shape
    if n < 2:
        raise ValueError("need at least 2 columns")
    # k = 1 is always legal; the log-capacity cap only bites above that
    cap = max(1.0, cap_scale * d / math.log(n))
    if not 1 <= k <= cap:
        raise ValueError(f"k must be in [1, {cap:.3f}] (cap_scale={cap_scale})")
    norms_sq = np.empty(subset_trials)
    chunk = 10_000
    a8 = a.astype(np.int8)
    for start in range(0, subset_trials, chunk):
        count = min(chunk, subset_trials - start)
        scores = rng.random((count, n))
        idx = np.argpartition(scores, k - 1, axis=1)[:, :k]
        sums = a8[:, idx].sum(axis=2)  # (d, count)
        norms_sq[start:start + count] = (sums.astype(float) ** 2).sum(axis=0)
    violations = int(np.sum(norms_sq > 2 * k * d))
    return ColumnSumReport(
        k=k,
        trials=subset_trials,
        cap=cap,
        max_ratio=float(np.sqrt(norms_sq.max() / (k * d))),
        violations=violations,
        mean_sq=float(norms_sq.mean()),
        expected_sq=float(k * d),
        stderr_sq=float(norms_sq.std(ddof=1) / math.sqrt(subset_trials))
        if subset_trials > 1 else 0.0,
    )


def _sphere_thetas(rng, trials, d, r):
    g = rng.normal(size=(trials, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True) * r


@dataclass
class ExpandingReport:
    r: float
    eta_probe: float
    trials: int
    values: np.ndarray
    fail_fraction: float
    mc_values: Optional[np.ndarray] = None
    mc_stderr: Optional[np.ndarray] = None


def check_expanding(
    a: np.ndarray,
    r: float,
    eta_probe: float,
    trials: int,
    rng: np.random.Generator,
    mc_per_theta: int = 0,
    thetas: Optional[np.ndarray] = None,
) -> ExpandingReport:
    """Per theta on the radius-r sphere, compute E_{v ~ D_theta(A)}[<v, theta>]
    exactly by enumerating the columns, and report the fraction below
    eta_probe.  ``thetas`` overrides the draw (one row per trial)."""
    a = _validate_pm1(a).astype(float)
    d, _ = a.shape
    if thetas is None:
        if r <= 0:
            raise ValueError("need r > 0 to draw boundary thetas")
        thetas = _sphere_thetas(rng, trials, d, r)
    else:
        thetas = np.asarray(thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[1] != d:
            raise ValueError("thetas must be (trials, d)")
        trials = len(thetas)
    z = thetas @ a  # (trials, N) inner products with columns
    z_shift = z - z.max(axis=1, keepdims=True)
    w = np.exp(z_shift)
    p = w / w.sum(axis=1, keepdims=True)
    values = (p * z).sum(axis=1)
    mc_values = mc_stderr = None
    if mc_per_theta > 0:
        mc_values = np.empty(trials)
        mc_stderr = np.empty(trials)
        n_cols = a.shape[1]
        for i in range(trials):
            cols = rng.choice(n_cols, size=mc_per_theta, p=p[i])
            draws = z[i, cols]
            mc_values[i] = draws.mean()
            mc_stderr[i] = draws.std(ddof=1) / math.sqrt(mc_per_theta)
    return ExpandingReport(
        r=r,
        eta_probe=eta_probe,
        trials=trials,
        values=values,
        fail_fraction=float(np.mean(values < eta_probe)),
        mc_values=mc_values,
        mc_stderr=mc_stderr,
    )


def tilted_column_cov(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Exact covariance of the exponential tilt over the matrix columns."""
    a = np.asarray(a, dtype=float)
    z = a.T @ np.asarray(theta, dtype=float)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    mu = a @ p
    return (a * p) @ a.T - np.outer(mu, mu)


@dataclass
class RegularReport:
    r: float
    trials: int
    threshold: float
    values: np.ndarray
    fraction_above: float


def check_regular(
    a: np.ndarray,
    r: float,
    trials: int,
    rng: np.random.Generator,
    threshold: float = 2.0,
) -> RegularReport:
    """Per theta in the radius-r ball, exact column covariance and its top
    eigenvalue; reports the fraction exceeding the threshold."""
    a = _validate_pm1(a)
    d, _ = a.shape
    if r == 0:
        thetas = np.zeros((trials, d))
    else:
        unit = _sphere_thetas(rng, trials, d, 1.0)
        radii = r * rng.random(trials) ** (1.0 / d)
        thetas = unit * radii[:, None]
    af = a.astype(float)
    values = np.empty(trials)
    for i in range(trials):
        cov = tilted_column_cov(af, thetas[i])
        values[i] = lambda_max_psd(cov, rng)
    return RegularReport(
        r=r,
        trials=trials,
        threshold=threshold,
        values=values,
        fraction_above=float(np.mean(values > threshold)),
    )


# --------------------------------------------------------------------------
# exponential reweighting


@dataclass
class TiltShiftReport:
    eta: float
    delta_mass: float
    premise_ok: bool
    value: Optional[float]
    bound: float
    stderr: Optional[float]
    passed: Optional[bool]
    notice: str = ""


def tilt_shift_check(samples, eta: float, delta_mass: float) -> TiltShiftReport:
    """Exponentially reweight samples of X and test E[Y] >= eta - 2 ln(1/delta).

    Requires the empirical premise Pr[X >= eta] >= delta_mass; when it fails
    the check is skipped with a notice instead of passing or failing.
    """
    if not 0 < delta_mass < 1:
        raise ValueError("delta_mass must be in (0, 1)")
    x = np.asarray(samples, dtype=float).reshape(-1)
    bound = eta - 2 * math.log(1 / delta_mass)
    premise = float(np.mean(x >= eta))
    if premise < delta_mass:
        return TiltShiftReport(
            eta=eta,
            delta_mass=delta_mass,
            premise_ok=False,
            value=None,
            bound=bound,
            stderr=None,
            passed=None,
            notice=f"premise failed: Pr[X >= eta] = {premise:.4g} < {delta_mass}",
        )
    w = np.exp(x - x.max())
    wsum = w.sum()
    value = float((w @ x) / wsum)
    ess = wsum ** 2 / float(w @ w)
    wvar = float((w @ (x - value) ** 2) / wsum)
    stderr = math.sqrt(wvar / ess) if ess > 1 else math.inf
    return TiltShiftReport(
        eta=eta,
        delta_mass=delta_mass,
        premise_ok=True,
        value=value,
        bound=bound,
        stderr=stderr,
        passed=bool(value >= bound - 4 * stderr),
    )
