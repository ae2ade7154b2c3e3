"""Multiscale IR estimation of the memory parameter.

Per-scale estimates come from inverting ``Lambda_0``; they are combined by
pseudo-generalised least squares with the tabulated asymptotic covariance.
The base window is chosen from the data by minimising the GLS quadratic form
over a logarithmic grid and then shifted upward so that the final estimator
satisfies a central limit theorem.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .asymptotics import (
    D_MAX,
    D_MIN,
    GAMMA_D_MAX,
    GAMMA_D_MIN,
    AsymptoticTable,
    default_table,
    lambda0_inv_checked,
    lambda0_prime,
)
from .ir_core import ir_statistic
from .numerics import chi2_sf, spd_solve
from .processes import TimeSeries

__all__ = [
    "EstimationError",
    "EstimationReport",
    "GridPoint",
    "ScaleGrid",
    "adapt_alpha",
    "d_hat",
    "default_p",
    "estimate",
    "gls_estimate",
    "scale_grid",
    "select_alpha",
    "sigma_hat",
    "test_statistic",
]

SeriesLike = Union[TimeSeries, np.ndarray]


class EstimationError(RuntimeError):
    """Failure inside the estimation pipeline, tagged with its stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _values(series: SeriesLike) -> np.ndarray:
    return series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)


def default_p(n: int) -> int:
    """``[1.5 log N]``."""
    return int(math.floor(1.5 * math.log(n)))


def _feasible(n: int, m: int, p: int) -> bool:
    return m >= 1 and n - 3 * p * m >= 1


class _IRCache:
    """IR values keyed by window length, so overlapping scales are computed once."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self.values: dict[int, float] = {}

    def __call__(self, m: int) -> float:
        if m not in self.values:
            self.values[m] = ir_statistic(self.x, m)
        return self.values[m]


def _d_hat(cache: _IRCache, m: int, p: int) -> tuple[np.ndarray, bool]:
    out = np.empty(p)
    clamped = False
    for j in range(1, p + 1):
        out[j - 1], flag = lambda0_inv_checked(cache(j * m))
        clamped |= flag
    return out, clamped


def d_hat(series: SeriesLike, m: int, p: int) -> tuple[np.ndarray, bool]:
    """Per-scale estimates ``Lambda_0^{-1}(IR_N(j m))`` for ``j = 1..p``.

    Returns
    -------
    d : ndarray, shape (p,)
    clamped : bool
        True when some IR value fell outside the range of ``Lambda_0`` on
        ``[-0.49, 1.49]`` and was clamped to an end point.
    """
    x = _values(series)
    m = int(m)
    if p < 1 or not _feasible(x.size, m, p):
        raise ValueError(f"infeasible (m={m}, p={p}) for N={x.size}")
    return _d_hat(_IRCache(x), m, p)


def _clamp_gamma_d(d: float) -> tuple[float, bool]:
    c = min(max(d, GAMMA_D_MIN), GAMMA_D_MAX)
    return c, c != d


def sigma_hat(d_ref: float, p: int, table: Optional[AsymptoticTable] = None
              ) -> tuple[np.ndarray, list]:
    """``Lambda_0'(d)^{-2} Gamma_p(d)`` at the reference estimate.

    ``Gamma_p`` is looked up at ``d`` clamped to the table range
    ``[-0.49, 0.49]``.  The second return value lists what happened on the
    way: ``gamma_d_clamped`` and ``gamma_repaired`` (non-positive
    eigenvalues lifted).
    """
    table = table or default_table()
    d_ref = min(max(d_ref, D_MIN), D_MAX)
    dg, clamped = _clamp_gamma_d(d_ref)
    gam, repaired = table.gamma_psd(dg, p)
    flags = ["gamma_d_clamped"] * clamped + ["gamma_repaired"] * repaired
    return gam / lambda0_prime(d_ref) ** 2, flags


def gls_estimate(d_vec, sigma) -> tuple[float, float, bool]:
    """Pseudo-GLS combination of the per-scale estimates.

    Returns
    -------
    d_tilde : float
        ``(J' S^-1 J)^-1 J' S^-1 d``.
    quad_form : float
        ``(d - d_tilde J)' S^-1 (d - d_tilde J)``.
    jittered : bool
        The covariance needed a diagonal jitter to factorise.
    """
    d_vec = np.asarray(d_vec, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p = d_vec.size
    ones = np.ones(p)
    rhs = np.column_stack([ones, d_vec])
    sol, jittered = spd_solve(sigma, rhs)
    si_j, si_d = sol[:, 0], sol[:, 1]
    w = si_j / si_j.sum()
    d_tilde = float(w @ d_vec)
    resid = d_vec - d_tilde
    q = float(resid @ (si_d - d_tilde * si_j))
    return d_tilde, max(q, 0.0), jittered


def test_statistic(d_vec, d_tilde: float, sigma, n: int, m: int) -> tuple[float, float]:
    """``T = (N/m) (d - d_tilde)' S^-1 (d - d_tilde)`` and its chi2(p-1) p-value."""
    d_vec = np.asarray(d_vec, dtype=float)
    p = d_vec.size
    if p < 2:
        raise ValueError("the goodness-of-fit test needs p >= 2")
    resid = d_vec - d_tilde
    x, _ = spd_solve(np.asarray(sigma, dtype=float), resid)
    T = max(float(n) / m * float(resid @ x), 0.0)
    return T, chi2_sf(T, p - 1)


@dataclass(frozen=True)
class ScaleGrid:
    n: int
    p: int
    k_values: np.ndarray
    alphas: np.ndarray
    m_values: np.ndarray


def scale_grid(n: int, p: int) -> ScaleGrid:
    """``alpha = k / log N`` for ``k = 2..floor(log(N/p))``; ``m = [e^k]``."""
    if p < 1 or n < 1:
        raise ValueError("n and p must be positive")
    kmax = int(math.floor(math.log(n / p)))
    if kmax < 2:
        raise ValueError(f"series too short: N/p = {n / p:.3g} must exceed e^2")
    k = np.arange(2, kmax + 1)
    return ScaleGrid(n=n, p=p, k_values=k, alphas=k / math.log(n),
                     m_values=np.floor(np.exp(k)).astype(int))


@dataclass
class GridPoint:
    k: int
    alpha: float
    m: int
    feasible: bool
    q: float = math.nan
    d_tilde: float = math.nan
    clamped: bool = False


@dataclass
class _Fit:
    m: int
    d_vec: np.ndarray
    d_tilde: float
    q: float
    sigma: np.ndarray
    flags: list


def _fit(cache: _IRCache, m: int, p: int, table: AsymptoticTable) -> _Fit:
    flags = []
    d_vec, clamped = _d_hat(cache, m, p)
    if clamped:
        flags.append("clamped_inversion")
    sigma, sflags = sigma_hat(float(d_vec[0]), p, table)
    flags.extend(sflags)
    d_tilde, q, jit = gls_estimate(d_vec, sigma)
    if jit:
        flags.append("jittered_solve")
    return _Fit(m, d_vec, d_tilde, q, sigma, flags)


def _select(cache: _IRCache, n: int, p: int, table: AsymptoticTable):
    grid = scale_grid(n, p)
    points = []
    best = None
    for k, a, m in zip(grid.k_values, grid.alphas, grid.m_values):
        gp = GridPoint(int(k), float(a), int(m), _feasible(n, int(m), p))
        if gp.feasible:
            fit = _fit(cache, int(m), p, table)
            gp.q, gp.d_tilde = fit.q, fit.d_tilde
            gp.clamped = "clamped_inversion" in fit.flags
            # strict inequality keeps the smaller alpha on ties
            if best is None or gp.q < best.q:
                best = gp
        points.append(gp)
    if best is None:
        raise EstimationError("select_alpha", f"no feasible grid point for N={n}, p={p}")
    return best, points


def select_alpha(series: SeriesLike, p: int, table: Optional[AsymptoticTable] = None
                 ) -> tuple[float, list]:
    """Minimise ``Q(alpha)`` over the grid; returns ``(alpha_hat, diagnostics)``."""
    x = _values(series)
    table = table or default_table()
    best, points = _select(_IRCache(x), x.size, p, table)
    return best.alpha, points


def adapt_alpha(alpha_hat: float, p: int, n: int) -> tuple[float, int, int, bool]:
    """Shifted exponent and window.

    Returns
    -------
    alpha_tilde : float
        ``alpha + 6 alpha / ((p - 2)(1 - alpha)) * log log N / log N``.
    m_tilde : int
        ``[N^alpha_tilde]`` capped at the largest m with ``N - 3 p m >= 1``.
    m_raw : int
        Uncapped ``[N^alpha_tilde]``.
    capped : bool
    """
    if p < 3:
        raise ValueError("the adaptive shift needs p >= 3")
    if not 0 < alpha_hat < 1:
        raise ValueError("alpha_hat must lie in (0, 1)")
    ln = math.log(n)
    a = alpha_hat + 6 * alpha_hat / ((p - 2) * (1 - alpha_hat)) * math.log(ln) / ln
    m_raw = int(math.floor(n ** a))
    m_cap = (n - 1) // (3 * p)
    m = min(m_raw, m_cap)
    return a, max(m, 1), m_raw, m_raw > m_cap


@dataclass
class EstimationReport:
    n: int
    p: int
    per_scale_d: np.ndarray
    gls_d: float
    sigma_hat: np.ndarray
    alpha_hat: float
    alpha_tilde: float
    m_hat: int
    m_tilde: int
    m_tilde_raw: int
    d_ir: float
    test_stat: float
    p_value: float
    asymptotic_sd: float
    flags: list = field(default_factory=list)
    grid: list = field(default_factory=list)

    @property
    def ci95(self) -> tuple[float, float]:
        h = 1.959963984540054 * self.asymptotic_sd
        return self.d_ir - h, self.d_ir + h

    def to_dict(self, diagnostics: bool = False) -> dict:
        out = {
            "n": self.n, "p": self.p,
            "d_ir": self.d_ir, "asymptotic_sd": self.asymptotic_sd,
            "ci95": list(self.ci95),
            "alpha_hat": self.alpha_hat, "alpha_tilde": self.alpha_tilde,
            "m_hat": self.m_hat, "m_tilde": self.m_tilde, "m_tilde_raw": self.m_tilde_raw,
            "test_stat": self.test_stat, "p_value": self.p_value,
            "per_scale_d": [float(v) for v in self.per_scale_d],
            "flags": list(self.flags),
        }
        if diagnostics:
            out["grid"] = [asdict(g) for g in self.grid]
            out["sigma_hat"] = np.asarray(self.sigma_hat).tolist()
        return out


def _asymptotic_sd(d: float, p: int, m: int, n: int, table: AsymptoticTable) -> float:
    dg, _ = _clamp_gamma_d(min(max(d, D_MIN), D_MAX))
    gam, _ = table.gamma_psd(dg, p)
    x, _ = spd_solve(gam, np.ones(p))
    dd = min(max(d, D_MIN), D_MAX)
    return float(1.0 / lambda0_prime(dd) / math.sqrt(x.sum()) * math.sqrt(m / n))


def estimate(series: SeriesLike, p: Optional[int] = None,
             table: Optional[AsymptoticTable] = None) -> EstimationReport:
    """Adaptive IR estimate of ``d`` with its goodness-of-fit test.

    Parameters
    ----------
    series : TimeSeries or array_like
    p : int, optional
        Number of scales; defaults to ``[1.5 log N]``.
    table : AsymptoticTable, optional
        Defaults to the shipped table.
    """
    x = _values(series)
    n = x.size
    p = default_p(n) if p is None else int(p)
    if p < 3:
        raise EstimationError("config", "p must be >= 3 (the adaptive shift divides by p - 2)")
    if n < 4 * p + 4:
        raise EstimationError("config", f"series has {n} points; at least {4 * p + 4} needed for p={p}")
    try:
        table = table or default_table()
        if p > table.p:
            raise EstimationError("config", f"table holds p <= {table.p}; asked for p={p}")
    except EstimationError:
        raise
    except Exception as exc:
        raise EstimationError("table", str(exc)) from exc
    cache = _IRCache(x)
    try:
        best, points = _select(cache, n, p, table)
    except EstimationError:
        raise
    except Exception as exc:
        raise EstimationError("select_alpha", str(exc)) from exc
    flags = []
    a_tilde, m_tilde, m_raw, capped = adapt_alpha(best.alpha, p, n)
    if capped:
        flags.append("m_tilde_capped")
    if best.k == points[-1].k or not points[-1].feasible and best.k == max(
            g.k for g in points if g.feasible):
        flags.append("grid_boundary")
    try:
        fit = _fit(cache, m_tilde, p, table)
        T, pval = test_statistic(fit.d_vec, fit.d_tilde, fit.sigma, n, m_tilde)
        sd = _asymptotic_sd(fit.d_tilde, p, m_tilde, n, table)
    except Exception as exc:
        raise EstimationError("final_fit", str(exc)) from exc
    flags.extend(f for f in fit.flags if f not in flags)
    d_ir = min(max(fit.d_tilde, D_MIN), D_MAX)
    return EstimationReport(
        n=n, p=p, per_scale_d=fit.d_vec, gls_d=fit.d_tilde, sigma_hat=fit.sigma,
        alpha_hat=best.alpha, alpha_tilde=a_tilde, m_hat=best.m, m_tilde=m_tilde,
        m_tilde_raw=m_raw, d_ir=d_ir, test_stat=T, p_value=pval, asymptotic_sd=sd,
        flags=flags, grid=points)
