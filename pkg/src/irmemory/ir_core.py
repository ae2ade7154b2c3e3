"""Increment ratio statistics and their exact Gaussian expectation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import special

from .numerics import QuadratureSpec, integrate
from .processes import SpectralModel, TimeSeries, spectral_density

__all__ = [
    "IRProfile",
    "LemmaConstants",
    "SpectralRatio",
    "block_increments",
    "expected_ir",
    "ir_profile",
    "ir_statistic",
    "j_integral",
    "lemma_constants",
    "psi",
]

SeriesLike = Union[TimeSeries, np.ndarray]


def _values(series: SeriesLike) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return series.values
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a one-dimensional series")
    return x


def psi(x, y):
    """``|x + y| / (|x| + |y|)`` with ``psi(0, 0) = 1``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    den = np.abs(x) + np.abs(y)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.abs(x + y) / np.where(den > 0, den, 1.0), 1.0)
    return out if out.ndim else float(out)


def block_increments(x: np.ndarray, m: int) -> np.ndarray:
    """``a_k = sum_{t=k+1}^{k+m} (X_{t+m} - X_t)`` for ``k = 0..N-2m``.

    Built from running sums of the lag-m differences, so exact cancellation
    is preserved for constant or linear inputs.
    """
    diff = x[m:] - x[:-m]
    c = np.concatenate([[0.0], np.cumsum(diff)])
    return c[m:] - c[:-m]


def ir_statistic(series: SeriesLike, m: int) -> float:
    """Increment ratio statistic ``IR_N(m)``.

    Parameters
    ----------
    series : TimeSeries or array_like
    m : int
        Window length, ``1 <= m`` and ``N - 3m >= 1``.

    Returns
    -------
    float
        Mean of ``psi(a_k, a_{k+m})`` over ``k = 0..N-3m-1``.
    """
    x = _values(series)
    m = int(m)
    n = x.size
    if m < 1:
        raise ValueError("m must be >= 1")
    if n - 3 * m < 1:
        raise ValueError(f"window m={m} too large for N={n} (need N - 3m >= 1)")
    a = block_increments(x, m)
    K = n - 3 * m
    return float(np.mean(psi(a[:K], a[m:m + K])))


@dataclass(frozen=True)
class IRProfile:
    """The vector ``(IR_N(j m))_{1 <= j <= p}``."""

    n: int
    m: int
    p: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.p,):
            raise ValueError("profile length must equal p")
        if np.any((v < 0) | (v > 1)):
            raise ValueError("IR values lie in [0, 1]")

    @property
    def scales(self) -> np.ndarray:
        return self.m * np.arange(1, self.p + 1)


def ir_profile(series: SeriesLike, m: Union[int, float], p: int) -> IRProfile:
    """Multiscale profile ``IR_N(j [m])`` for ``j = 1..p``.

    A real ``m`` is truncated to its integer part once here.
    """
    x = _values(series)
    m = int(math.floor(m))
    p = int(p)
    n = x.size
    if p < 2:
        raise ValueError("p must be >= 2")
    if m < 1:
        raise ValueError("m must be >= 1")
    if n - 3 * p * m < 1:
        raise ValueError(f"infeasible (m={m}, p={p}) for N={n}: need N - 3pm >= 1")
    vals = np.array([ir_statistic(x, j * m) for j in range(1, p + 1)])
    return IRProfile(n=n, m=m, p=p, values=vals)


# ---------------------------------------------------------------------------
# spectral oracle


@dataclass(frozen=True)
class SpectralRatio:
    m: int
    ratio: float
    expected_ir: float
    j4: float
    j6: float


def _kernel(x: np.ndarray, m: int, power: int) -> np.ndarray:
    return np.sin(m * x / 2) ** power / np.sin(x / 2) ** 2


def _panels(m: int) -> int:
    # panel width at most pi / (4 m)
    return max(4, 4 * int(m))


def _spec_for(exponent: Optional[float], panels: int, base: QuadratureSpec) -> QuadratureSpec:
    if exponent is not None and abs(exponent) < 1e-14:
        exponent = None
    return QuadratureSpec(base.abs_tol, base.rel_tol,
                          max(base.max_subdivisions, 64 * panels), exponent)


def _split_exponent(a: float) -> Optional[float]:
    """Non-smooth part of ``x**a`` that the Gauss-Jacobi panel must carry."""
    e = a - math.floor(a) if a >= 0 else a
    return e if e > 1e-14 else None


_DEFAULT_SPEC = QuadratureSpec(abs_tol=1e-15, rel_tol=1e-12)


def _weighted_integral(model: SpectralModel, m: int, power: int,
                       spec: QuadratureSpec) -> float:
    panels = _panels(m)
    if model.kind == "garma0":
        e = -2 * model.d
        half = max(2, panels // 2)
        sp = _spec_for(e, half, spec)
        pi2 = math.pi / 2
        right = integrate(lambda u: spectral_density(model, pi2 + u) * _kernel(pi2 + u, m, power),
                          0.0, pi2, sp, half)
        left = integrate(lambda u: spectral_density(model, pi2 - u) * _kernel(pi2 - u, m, power),
                         0.0, pi2, sp, half)
        return left + right
    sp = _spec_for(_split_exponent(-2 * model.d), panels, spec)
    return integrate(lambda x: spectral_density(model, x) * _kernel(x, m, power),
                     0.0, math.pi, sp, panels)


def expected_ir(model: SpectralModel, m: int,
                spec: QuadratureSpec = _DEFAULT_SPEC) -> SpectralRatio:
    """Exact mean of ``IR_N(m)`` for a stationary Gaussian model.

    ``E[IR] = Lambda(1 - 2 J6 / J4)`` with
    ``Jp = int_0^pi f(x) sin^p(m x / 2) / sin^2(x / 2) dx``.
    """
    from .asymptotics import lam

    if not model.is_gaussian:
        raise ValueError("expected_ir needs a Gaussian model")
    m = int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    m0 = model.without_contamination()
    j4 = _weighted_integral(m0, m, 4, spec)
    j6 = _weighted_integral(m0, m, 6, spec)
    r = 1.0 - 2.0 * j6 / j4
    return SpectralRatio(m=m, ratio=r, expected_ir=float(lam(r)), j4=j4, j6=j6)


def j_integral(a: float, m: int, power: int,
               spec: QuadratureSpec = _DEFAULT_SPEC) -> float:
    """``int_0^pi x^a sin^power(m x / 2) / sin^2(x / 2) dx``."""
    if not a > -1:
        raise ValueError("a must exceed -1")
    if power not in (4, 6):
        raise ValueError("power must be 4 or 6")
    m = int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    panels = _panels(m)
    sp = _spec_for(_split_exponent(a), panels, spec)
    return integrate(lambda x: x ** a * _kernel(x, m, power), 0.0, math.pi, sp, panels)


# ---------------------------------------------------------------------------
# expansion constants of J4 / J6


@dataclass(frozen=True)
class LemmaConstants:
    """Large-m expansion constants of ``J_4(a, m)`` and ``J_6(a, m)``.

    For ``-1 < a < 1``: ``J_j = C_j1 m^(1-a) + C_j2 + o(1)``.
    For ``a = 1``: ``J_j = C'_j1 log m + C'_j2 + o(1)``.
    For ``a > 1``: ``J_j -> C''_j1``.
    Fields outside the regime of ``a`` are None.
    """

    a: float
    C41: Optional[float] = None
    C42: Optional[float] = None
    C61: Optional[float] = None
    C62: Optional[float] = None
    C41p: Optional[float] = None
    C42p: Optional[float] = None
    C61p: Optional[float] = None
    C62p: Optional[float] = None
    C41pp: Optional[float] = None
    C61pp: Optional[float] = None


_Q = QuadratureSpec(abs_tol=1e-14, rel_tol=1e-12)


def _csc2_minus(y):
    # 1/sin^2 y - 1/y^2, with a series near 0 to avoid cancellation
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-3
    ys = np.where(small, 1.0, y)
    full = 1.0 / np.sin(ys) ** 2 - 1.0 / ys ** 2
    y2 = y * y
    series = 1.0 / 3.0 + y2 / 15.0 + 2.0 * y2 * y2 / 189.0
    return np.where(small, series, full)


def _sin4_over_y(y):
    y = np.asarray(y, dtype=float)
    ys = np.where(y == 0, 1.0, y)
    return np.where(y == 0, 0.0, np.sin(ys) ** 4 / ys)


def _sin6_over_y(y):
    y = np.asarray(y, dtype=float)
    ys = np.where(y == 0, 1.0, y)
    return np.where(y == 0, 0.0, np.sin(ys / 2) ** 6 / ys)


def _gamma_sin(a: float) -> float:
    return (1 - a) * special.gamma(1 - a) * math.sin((1 - a) * math.pi / 2)


def lemma_constants(a: float) -> LemmaConstants:
    """Closed-form expansion constants; see :class:`LemmaConstants`."""
    if not a > -1:
        raise ValueError("a must exceed -1")
    if a < 1:
        c41 = math.pi * (1 - 2.0 ** (-1 - a)) / _gamma_sin(a)
        c61 = math.pi * (15 + 3.0 ** (1 - a) - 6 * 2.0 ** (1 - a)) / (16 * _gamma_sin(a))
        sp = QuadratureSpec(_Q.abs_tol, _Q.rel_tol, _Q.max_subdivisions,
                            a if abs(a) > 1e-14 else None)
        inner = integrate(lambda y: y ** a * _csc2_minus(y), 0.0, math.pi / 2, sp)
        c42 = 3.0 / 2.0 ** (2 - a) * inner - 3.0 / (2 * (1 - a)) * math.pi ** (a - 1)
        return LemmaConstants(a=a, C41=c41, C42=c42, C61=c61, C62=5.0 / 6.0 * c42)
    if a == 1:
        inner = 1.0 - math.log(math.pi / 2)  # int_0^{pi/2} y (csc^2 y - y^-2) dy
        ci1 = special.sici(1.0)[1]
        ci2 = special.sici(2.0)[1]
        ci4 = special.sici(4.0)[1]
        # J4 = int g(x) sin^4(mx/2) dx + 4 int_0^{m pi/2} sin^4(v)/v dv with g = x csc^2(x/2) - 4/x
        sin4 = integrate(_sin4_over_y, 0.0, 1.0, _Q)
        c42p = 1.5 + 4.0 * sin4 + 2.0 * ci2 - 0.5 * ci4
        ci3 = special.sici(3.0)[1]
        cos_tail = (ci3 - 6 * ci2 + 15 * ci1) / 8.0
        sin6 = integrate(_sin6_over_y, 0.0, 1.0, _Q)
        c62p = 1.25 * math.log(math.pi) + 1.25 * inner + cos_tail + 4.0 * sin6
        return LemmaConstants(a=a, C41p=1.5, C42p=c42p, C61p=1.25, C62p=c62p)
    e = _split_exponent(a - 2)
    sp = QuadratureSpec(_Q.abs_tol, _Q.rel_tol, _Q.max_subdivisions, e)
    # x^a / sin^2(x/2) ~ 4 x^(a-2) near 0, integrable for a > 1
    c41pp = 0.375 * integrate(lambda x: x ** a / np.sin(x / 2) ** 2, 0.0, math.pi, sp)
    return LemmaConstants(a=a, C41pp=c41pp, C61pp=5.0 / 6.0 * c41pp)
