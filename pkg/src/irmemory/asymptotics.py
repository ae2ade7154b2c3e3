"""Transfer functions and the asymptotic covariance of the IR profile.

The scalar maps ``Lambda``, ``rho``, ``Lambda_0 = Lambda o rho`` and its
inverse are analytic.  The covariance matrix ``Gamma_p(d)`` is an integral
over lags of covariances between ``psi``-transforms of second differences of
fractional Brownian motion; it is evaluated by randomised quasi-Monte Carlo
and tabulated on a grid of ``d``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numba
import numpy as np
from scipy import interpolate as sinterp
from scipy import special
from scipy.stats import qmc

from .numerics import brent_root

__all__ = [
    "AsymptoticTable",
    "FbmSecondDifferenceKernel",
    "GammaEstimate",
    "McSpec",
    "TableError",
    "build_table",
    "default_table",
    "gamma_matrix",
    "interpolate",
    "lam",
    "lam_prime",
    "lambda0",
    "lambda0_inv",
    "lambda0_inv_checked",
    "lambda0_prime",
    "load_table",
    "non_pd_points",
    "psd_floor",
    "refine_table",
    "rho",
    "rho_prime",
    "save_table",
    "sigma2_one_sided",
    "z_cov",
]

D_MIN, D_MAX = -0.49, 1.49
GAMMA_D_MIN, GAMMA_D_MAX = -0.49, 0.49
TABLE_VERSION = 1

_LN4 = math.log(4.0)
_LN9 = math.log(9.0)


class TableError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Lambda and rho


def lam(r):
    """``Lambda(r)`` for ``|r| < 1``."""
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) >= 1):
        raise ValueError("Lambda is defined for |r| < 1")
    s = np.sqrt((1 + r) / (1 - r))
    out = 2 / math.pi * np.arctan(s) - s / math.pi * np.log1p((r - 1) / 2)
    return out if out.ndim else float(out)


def lam_prime(r):
    """Derivative ``log(2/(1+r)) / (pi (1-r) sqrt(1-r^2))``."""
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) >= 1):
        raise ValueError("Lambda is defined for |r| < 1")
    out = -np.log1p((r - 1) / 2) / (math.pi * (1 - r) * np.sqrt(1 - r * r))
    return out if out.ndim else float(out)


def _expm1_ratio(c: float, x: np.ndarray, deriv: bool = False) -> np.ndarray:
    """``E_c(x) = expm1(c x) / x`` (or its x-derivative), stable at x = 0."""
    small = np.abs(x) < 0.05
    xs = np.where(small, 1.0, x)
    if deriv:
        full = (c * xs * np.exp(c * xs) - np.expm1(c * xs)) / xs ** 2
    else:
        full = np.expm1(c * xs) / xs
    ser = np.zeros_like(x)
    term_pow = np.ones_like(x)  # x^(n) or x^(n-1)
    for n in range(0, 16):
        coef = c ** (n + 1) / math.factorial(n + 1)
        if deriv:
            if n >= 1:
                ser = ser + n * coef * term_pow
                term_pow = term_pow * x
        else:
            ser = ser + coef * term_pow
            term_pow = term_pow * x
    return np.where(small, ser, full)


def _check_d(d: np.ndarray, lo: float = -0.5, hi: float = 1.5) -> None:
    # the closed interval is accepted: both ends are finite limits of rho
    if np.any(d < lo) or np.any(d > hi) or np.any(np.isnan(d)):
        raise ValueError(f"d must lie in [{lo}, {hi}]")


def rho(d):
    """Lag-one correlation of the normalised second differences of FBM.

    Written as ``(9 E_b - 16 E_a) / (8 E_a)`` with ``E_c = expm1(c x)/x``,
    ``x = d - 1/2``, ``a = ln 4``, ``b = ln 9``; this removes the 0/0 at
    ``d = 1/2``.  Equal to ``(4^(d+1.5) - 9^(d+0.5) - 7) / (2 (4 - 4^(d+0.5)))``.
    """
    d = np.asarray(d, dtype=float)
    _check_d(d)
    x = d - 0.5
    ea = _expm1_ratio(_LN4, x)
    eb = _expm1_ratio(_LN9, x)
    out = (9 * eb - 16 * ea) / (8 * ea)
    # away from the removable point the direct form is exact at d = 0 and d = -1/2
    far = np.abs(x) >= 0.05
    H = np.where(far, d + 0.5, 0.0)
    direct = (4.0 ** (H + 1) - 9.0 ** H - 7) / (2 * (4 - 4.0 ** H))
    out = np.where(far, direct, out)
    return out if out.ndim else float(out)


def rho_prime(d):
    d = np.asarray(d, dtype=float)
    _check_d(d)
    x = d - 0.5
    ea = _expm1_ratio(_LN4, x)
    eb = _expm1_ratio(_LN9, x)
    dea = _expm1_ratio(_LN4, x, deriv=True)
    deb = _expm1_ratio(_LN9, x, deriv=True)
    out = 9.0 / 8.0 * (deb * ea - eb * dea) / ea ** 2
    return out if out.ndim else float(out)


def lambda0(d):
    """``Lambda_0(d) = Lambda(rho(d))``, increasing on (-0.5, 1.5)."""
    return lam(rho(d))


def lambda0_prime(d):
    return lam_prime(rho(d)) * rho_prime(d)


def lambda0_inv_checked(x: float) -> tuple[float, bool]:
    """Inverse of ``Lambda_0`` on ``[-0.49, 1.49]`` with clamping.

    Returns ``(d, out_of_range)``; values of ``x`` outside
    ``(Lambda_0(-0.49), Lambda_0(1.49))`` are clamped to the nearest end.
    """
    lo_v, hi_v = _lambda0_bounds()
    if not math.isfinite(x):
        raise ValueError("IR value must be finite")
    if x <= lo_v:
        return D_MIN, x < lo_v
    if x >= hi_v:
        return D_MAX, x > hi_v
    d = brent_root(lambda t: lambda0(t) - x, D_MIN, D_MAX, tol=1e-13)
    return d, False


def lambda0_inv(x: float, clamp: bool = True) -> float:
    d, out = lambda0_inv_checked(x)
    if out and not clamp:
        raise ValueError(f"IR value {x} outside the range of Lambda_0 on [{D_MIN}, {D_MAX}]")
    return d


@lru_cache(maxsize=1)
def _lambda0_bounds() -> tuple[float, float]:
    return float(lambda0(D_MIN)), float(lambda0(D_MAX))


# ---------------------------------------------------------------------------
# second differences of fractional Brownian motion

_W = np.array([1.0, -2.0, 1.0])


@dataclass(frozen=True)
class FbmSecondDifferenceKernel:
    """Covariance of ``Z^(j)(s)`` and ``Z^(j')(t)``.

    ``Z^(j)(t) = (B_H(t + 2j) - 2 B_H(t + j) + B_H(t)) / sqrt(|4^H - 4|)`` with
    ``H = d + 1/2``, so that ``Var Z^(j) = j^(2H)``.
    """

    d: float
    j: int = 1
    jp: int = 1

    def __post_init__(self):
        if not -0.5 < self.d < 0.5:
            raise ValueError("d must lie in (-0.5, 0.5)")
        if self.j < 1 or self.jp < 1:
            raise ValueError("scale indices start at 1")

    @property
    def H(self) -> float:
        return self.d + 0.5

    def cov(self, s, t):
        return z_cov(self, s, t)


def _stencil_cov(H: float, delta, h: float, k: float):
    """``Cov(Z^(h)(b + delta), Z^(k)(b))`` (normalised), vectorised in delta."""
    delta = np.asarray(delta, dtype=float)
    acc = np.zeros_like(delta)
    for p in range(3):
        for q in range(3):
            acc = acc + _W[p] * _W[q] * np.abs(delta + p * h - q * k) ** (2 * H)
    return -0.5 * acc / (4.0 - 4.0 ** H)


def z_cov(kernel: FbmSecondDifferenceKernel, s, t):
    """``Cov(Z^(j)(s), Z^(j')(t))`` via the 3x3 stencil of the FBM covariance."""
    out = _stencil_cov(kernel.H, np.asarray(s, dtype=float) - np.asarray(t, dtype=float),
                       kernel.j, kernel.jp)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# Gamma_p by randomised QMC


@numba.njit(cache=True, fastmath=True)
def _cov_curve(coef, u1, u2, w1, w2, cu, psi_perp, n_blocks):
    n_tau = coef.shape[0]
    per = u1.size // n_blocks
    out = np.zeros((n_tau, n_blocks))
    for t in range(n_tau):
        b11 = coef[t, 0]
        b12 = coef[t, 1]
        b21 = coef[t, 2]
        b22 = coef[t, 3]
        r11 = coef[t, 4]
        r12 = coef[t, 5]
        r21 = coef[t, 6]
        r22 = coef[t, 7]
        for k in range(n_blocks):
            acc = 0.0
            for s in range(k * per, (k + 1) * per):
                v1 = b11 * u1[s] + b12 * u2[s] + r11 * w1[s] + r12 * w2[s]
                v2 = b21 * u1[s] + b22 * u2[s] + r21 * w1[s] + r22 * w2[s]
                # a zero denominator has probability zero; keep the loop branch-free
                pv = abs(v1 + v2) / (abs(v1) + abs(v2) + 1e-300)
                acc += cu[s] * (pv - psi_perp[s])
            out[t, k] = acc / per
    return out


@dataclass(frozen=True)
class McSpec:
    """Sampling and lag-integration settings for ``Gamma_p``.

    ``mc_samples`` is the total number of points, split evenly across
    ``n_scrambles`` independent Sobol scrambles (each a power of two).
    """

    mc_samples: int = 2 ** 15
    n_scrambles: int = 8
    tau_max: float = 100.0
    tau_step: float = 0.25
    seed: int = 20240611
    near_nodes: int = 16

    def __post_init__(self):
        if self.n_scrambles < 2:
            raise ValueError("need at least two scrambles for error bars")
        per = self.mc_samples // self.n_scrambles
        if per < 2 or per & (per - 1) or per * self.n_scrambles != self.mc_samples:
            raise ValueError("mc_samples / n_scrambles must be a power of two")
        if not (self.tau_max > 0 and self.tau_step > 0):
            raise ValueError("tau settings must be positive")
        ratio = self.tau_max / self.tau_step
        if abs(ratio - round(ratio)) > 1e-9 or abs(1 / self.tau_step - round(1 / self.tau_step)) > 1e-9:
            raise ValueError("tau_step must divide 1 and tau_max")
        if abs(self.tau_max - round(self.tau_max)) > 1e-12:
            raise ValueError("tau_max must be an integer")
        if self.near_nodes < 2:
            raise ValueError("near_nodes must be >= 2")

    def to_dict(self) -> dict:
        return {"mc_samples": self.mc_samples, "n_scrambles": self.n_scrambles,
                "tau_max": self.tau_max, "tau_step": self.tau_step, "seed": self.seed,
                "near_nodes": self.near_nodes}


_GRADING = 3


def _graded_unit(K: int):
    """Interior nodes and weights on [0, 1] clustered at both ends.

    Sigmoidal substitution ``g(s) = s^q / (s^q + (1-s)^q)`` followed by the
    trapezoid rule in ``s``; the end nodes carry zero weight, so algebraic
    cusps at the integers are never evaluated.
    """
    q = _GRADING
    s = np.arange(1, K) / K
    den = s ** q + (1 - s) ** q
    return s ** q / den, q * s ** (q - 1) * (1 - s) ** (q - 1) / den ** 2 / K


def lag_rule(i: int, j: int, spec: McSpec, one_sided: bool = False):
    """Nodes and weights for the lag integral of pair (i, j).

    The stencils of U (points 0..3i) and V (points tau..tau+3j) overlap for
    ``tau`` in ``[-3j, 3i]``; there the covariance has algebraic cusps at the
    integers and a graded rule is used on every unit interval.  Outside, the
    integrand is smooth and the plain trapezoid rule with ``tau_step`` is used.
    """
    T = int(round(spec.tau_max))
    lo = max(-T, -3 * j - 1)
    hi = min(T, 3 * i + 1)
    if one_sided:
        if i != j:
            raise ValueError("one-sided rule needs i == j")
        lo = 0
    g, gw = _graded_unit(spec.near_nodes)
    units = np.arange(lo, hi)
    nodes = [(units[:, None] + g[None, :]).ravel()]
    weights = [np.tile(gw, units.size)]
    h = spec.tau_step
    for a, b in ((hi, T), (-T, lo)) if not one_sided else ((hi, T),):
        if b > a:
            n = int(round((b - a) / h))
            t = a + h * np.arange(n + 1)
            w = np.full(n + 1, h)
            w[0] = w[-1] = h / 2
            nodes.append(t)
            weights.append(w)
    t = np.concatenate(nodes)
    w = np.concatenate(weights)
    order = np.argsort(t, kind="stable")
    return t[order], w[order]


@lru_cache(maxsize=4)
def _base_normals(mc_samples: int, n_scrambles: int, seed: int) -> np.ndarray:
    """Four standard-normal coordinates from independent Sobol scrambles."""
    per = mc_samples // n_scrambles
    children = np.random.SeedSequence(seed).spawn(n_scrambles)
    blocks = []
    for ss in children:
        eng = qmc.Sobol(d=4, scramble=True, seed=np.random.default_rng(ss))
        u = eng.random_base2(int(round(math.log2(per))))
        blocks.append(u)
    u = np.clip(np.vstack(blocks), 1e-16, 1 - 1e-16)
    z = special.ndtri(u)
    z.setflags(write=False)
    return z


def _sym_sqrt(S: np.ndarray) -> tuple[np.ndarray, bool]:
    """Symmetric square roots of a stack of 2x2 PSD matrices, flooring tiny negatives."""
    ev, vec = np.linalg.eigh(S)
    scale = np.maximum(np.abs(ev).max(axis=-1, keepdims=True), 1.0)
    flagged = bool(np.any(ev < -1e-12 * scale))
    ev = np.maximum(ev, 0.0)
    root = np.einsum("...ik,...k,...jk->...ij", vec, np.sqrt(ev), vec)
    return root, flagged


@dataclass
class _DState:
    """Per-d sample arrays shared by every pair and lag."""

    d: float
    r: float
    l0: float
    u1: np.ndarray
    u2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    cu: np.ndarray
    psi_perp: np.ndarray
    perp_root: np.ndarray


def _prepare(d: float, spec: McSpec) -> _DState:
    z = _base_normals(spec.mc_samples, spec.n_scrambles, spec.seed)
    r = float(rho(d))
    s = math.sqrt(1 - r * r)
    u1 = z[:, 0].copy()
    u2 = r * z[:, 0] + s * z[:, 1]
    root, _ = _sym_sqrt(np.array([[1.0, r], [r, 1.0]]))
    w1 = z[:, 2].copy()
    w2 = z[:, 3].copy()
    v1 = root[0, 0] * w1 + root[0, 1] * w2
    v2 = root[1, 0] * w1 + root[1, 1] * w2
    l0 = float(lambda0(d))
    from .ir_core import psi
    cu = psi(u1, u2) - l0
    pp = psi(v1, v2)
    return _DState(d, r, l0, u1, u2, w1, w2, cu, pp, root)


def _pair_coefficients(d: float, i: int, j: int, taus: np.ndarray, r: float):
    """Regression and residual-root coefficients of V(tau) on U for pair (i, j).

    U = (Z^(i)(0), Z^(i)(i)) / i^H and V = (Z^(j)(tau), Z^(j)(tau + j)) / j^H.
    """
    H = d + 0.5
    norm = (i * j) ** H
    C = np.empty((taus.size, 2, 2))
    for a in range(2):
        for b in range(2):
            C[:, a, b] = _stencil_cov(H, taus + a * j - b * i, j, i) / norm
    Suu_inv = np.array([[1.0, -r], [-r, 1.0]]) / (1 - r * r)
    B = C @ Suu_inv
    S = np.array([[1.0, r], [r, 1.0]]) - B @ np.swapaxes(C, 1, 2)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    R, flagged = _sym_sqrt(S)
    coef = np.concatenate([B.reshape(-1, 4), R.reshape(-1, 4)], axis=1)
    return np.ascontiguousarray(coef), flagged


NEGLIGIBLE_COUPLING = 1e-6


def _lag_covariances(st: _DState, i: int, j: int, taus: np.ndarray, n_blocks: int):
    coef, flagged = _pair_coefficients(st.d, i, j, taus, st.r)
    # lags where V is numerically independent of U contribute O(coupling^2)
    coupling = np.maximum(np.abs(coef[:, :4]).max(axis=1),
                          np.abs(coef[:, 4:] - st.perp_root.ravel()).max(axis=1))
    active = coupling > NEGLIGIBLE_COUPLING
    curves = np.zeros((taus.size, n_blocks))
    if active.any():
        curves[active] = _cov_curve(np.ascontiguousarray(coef[active]), st.u1, st.u2,
                                    st.w1, st.w2, st.cu, st.psi_perp, n_blocks)
    return curves, flagged


def _tail_bound(curve: np.ndarray, taus: np.ndarray, tau_max: float) -> float:
    # |gamma(u)| <= C u^-2 beyond tau_max, C read off the outer 5% of lags
    outer = np.abs(taus) >= 0.95 * tau_max
    if not outer.any():
        return 0.0
    C = np.max(np.abs(curve[outer]) * taus[outer] ** 2)
    return float(2 * C / tau_max)


@dataclass
class GammaEstimate:
    """``Gamma_p(d)`` with Monte Carlo standard errors and diagnostics."""

    d: float
    matrix: np.ndarray
    stderr: np.ndarray
    tail_bound: np.ndarray
    flagged: bool = False
    scramble_values: Optional[np.ndarray] = None


def _coprime_pairs(p: int):
    return [(i, j) for j in range(1, p + 1) for i in range(1, j + 1) if math.gcd(i, j) == 1]


def gamma_matrix(d: float, p: int, spec: McSpec = McSpec(), *,
                 full: bool = False) -> Union[np.ndarray, GammaEstimate]:
    """Asymptotic covariance ``Gamma_p(d)`` of the IR profile.

    Each entry is ``int Cov(psi(U), psi(V(tau))) dtau`` with U, V the
    normalised second-difference pairs at scales i and j.  The Gaussian
    expectation at every lag is estimated by scrambled Sobol points shared
    across lags, pairs and ``d``; the product
    ``(psi(U) - Lambda_0)(psi(V(tau)) - psi(V_perp))`` with ``V_perp``
    independent of U is used so the estimator is exactly zero once the
    cross-correlation vanishes.  The lag integral over ``[-tau_max, tau_max]``
    uses :func:`lag_rule`.  Only coprime (i, j) are computed; the rest
    follow from ``sigma_{ki,kj} = k sigma_{i,j}``.

    Parameters
    ----------
    d : float
        Memory parameter in (-0.5, 0.5).
    p : int
    spec : McSpec
    full : bool
        Return a :class:`GammaEstimate` instead of the bare matrix.
    """
    if not -0.5 < d < 0.5:
        raise ValueError("d must lie in (-0.5, 0.5)")
    if p < 1:
        raise ValueError("p must be >= 1")
    st = _prepare(d, spec)
    K = spec.n_scrambles
    base = {}
    flagged = False
    for (i, j) in _coprime_pairs(p):
        taus, w = lag_rule(i, j, spec)
        curves, fl = _lag_covariances(st, i, j, taus, K)
        flagged |= fl
        per_scramble = w @ curves
        base[(i, j)] = (per_scramble, _tail_bound(curves.mean(axis=1), taus, spec.tau_max))
    vals = np.zeros((K, p, p))
    tail = np.zeros((p, p))
    for j in range(1, p + 1):
        for i in range(1, j + 1):
            g = math.gcd(i, j)
            ps, tb = base[(i // g, j // g)]
            vals[:, i - 1, j - 1] = vals[:, j - 1, i - 1] = g * ps
            tail[i - 1, j - 1] = tail[j - 1, i - 1] = g * tb
    mat = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(K)
    if not full:
        return mat
    return GammaEstimate(d=d, matrix=mat, stderr=se, tail_bound=tail,
                         flagged=flagged, scramble_values=vals)


def sigma2_one_sided(d: float, spec: McSpec = McSpec(), seed: Optional[int] = None,
                     n_samples: Optional[int] = None) -> tuple[float, float]:
    """``sigma^2(d) = 2 int_0^inf Cov(psi(Z(0), Z(1)), psi(Z(t), Z(t+1))) dt``.

    Independent route to ``sigma_{1,1}``: plain pseudo-random normals from a
    separate seed and a one-sided lag integral.  Returns ``(value, stderr)``.
    """
    n = n_samples or spec.mc_samples
    K = spec.n_scrambles
    n -= n % K
    rng = np.random.default_rng(np.random.SeedSequence(seed if seed is not None else spec.seed + 1))
    z = rng.standard_normal((n, 4))
    r = float(rho(d))
    s = math.sqrt(1 - r * r)
    u1 = z[:, 0].copy()
    u2 = r * z[:, 0] + s * z[:, 1]
    root, _ = _sym_sqrt(np.array([[1.0, r], [r, 1.0]]))
    w1, w2 = z[:, 2].copy(), z[:, 3].copy()
    from .ir_core import psi
    cu = psi(u1, u2) - float(lambda0(d))
    pp = psi(root[0, 0] * w1 + root[0, 1] * w2, root[1, 0] * w1 + root[1, 1] * w2)
    taus, w = lag_rule(1, 1, spec, one_sided=True)
    coef, _ = _pair_coefficients(d, 1, 1, taus, r)
    curves = _cov_curve(coef, u1, u2, w1, w2, cu, pp, K)
    per = 2.0 * (w @ curves)
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(K))


# ---------------------------------------------------------------------------
# tables


@dataclass
class AsymptoticTable:
    """Tabulated ``Lambda_0``, ``Lambda_0'`` and ``Gamma_p`` on a d grid."""

    p: int
    d_grid: np.ndarray
    lambda0: np.ndarray
    lambda0_prime: np.ndarray
    gamma_d_grid: np.ndarray
    gamma_p: np.ndarray
    gamma_stderr: np.ndarray
    gamma_tail: np.ndarray
    mc: McSpec
    flagged: bool = False
    gamma_samples: Optional[np.ndarray] = None
    _splines: Optional[object] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.gamma_samples is None:
            self.gamma_samples = np.full(self.gamma_d_grid.size, float(self.mc.mc_samples))

    def header(self) -> dict:
        return {
            "version": TABLE_VERSION,
            "p": self.p,
            "grid": {"lambda0": [float(self.d_grid[0]), float(self.d_grid[-1]), self.d_grid.size],
                     "gamma": [float(self.gamma_d_grid[0]), float(self.gamma_d_grid[-1]),
                               self.gamma_d_grid.size]},
            "mc": self.mc.to_dict(),
            "flagged": self.flagged,
        }

    def restrict(self, p: int) -> "AsymptoticTable":
        if p > self.p:
            raise TableError(f"table holds p <= {self.p}, asked for {p}")
        return AsymptoticTable(p, self.d_grid, self.lambda0,
                               self.lambda0_prime, self.gamma_d_grid,
                               self.gamma_p[:, :p, :p], self.gamma_stderr[:, :p, :p],
                               self.gamma_tail[:, :p, :p], self.mc, self.flagged,
                               self.gamma_samples)

    def gamma(self, d: float, p: Optional[int] = None) -> np.ndarray:
        p = self.p if p is None else p
        if p > self.p:
            raise TableError(f"table holds p <= {self.p}, asked for {p}")
        lo, hi = self.gamma_d_grid[0], self.gamma_d_grid[-1]
        if not lo - 1e-12 <= d <= hi + 1e-12:
            raise ValueError(f"d={d} outside table hull [{lo}, {hi}]")
        idx = np.flatnonzero(np.abs(self.gamma_d_grid - d) < 1e-12)
        if idx.size:
            return self.gamma_p[idx[0], :p, :p].copy()
        if self._splines is None:
            self._splines = sinterp.CubicSpline(self.gamma_d_grid, self.gamma_p, axis=0)
        g = self._splines(d)[:p, :p]
        return 0.5 * (g + g.T)

    def gamma_psd(self, d: float, p: Optional[int] = None) -> tuple[np.ndarray, bool]:
        """``gamma(d, p)`` made positive definite; second value reports a repair.

        Close to ``d = -1/2`` the covariance is small enough that Monte Carlo
        noise can leave no positive eigenvalue at all.  The lookup then moves
        to the nearest grid point towards ``d = 0`` whose matrix can be
        repaired.
        """
        try:
            return psd_floor(self.gamma(d, p))
        except np.linalg.LinAlgError:
            pass
        order = np.argsort(np.abs(self.gamma_d_grid - d))
        p = self.p if p is None else p
        for k in order:
            dk = self.gamma_d_grid[k]
            if abs(dk) >= abs(d):
                continue
            try:
                return psd_floor(self.gamma_p[k, :p, :p])[0], True
            except np.linalg.LinAlgError:
                continue
        raise np.linalg.LinAlgError(f"no usable covariance near d={d}")


def psd_floor(mat: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lift non-positive eigenvalues to the smallest positive one.

    Monte Carlo noise can push the weakest directions of a nearly singular
    covariance below zero; those directions are unresolved, so they are given
    the smallest resolved eigenvalue.  Positive-definite input is returned
    unchanged.
    """
    sym = 0.5 * (mat + mat.T)
    ev, vec = np.linalg.eigh(sym)
    if ev[0] > 0:
        return mat, False
    pos = ev[ev > 0]
    if pos.size == 0:
        raise np.linalg.LinAlgError("covariance has no positive eigenvalue")
    ev = np.maximum(ev, pos.min())
    out = (vec * ev) @ vec.T
    return 0.5 * (out + out.T), True


def non_pd_points(table: AsymptoticTable) -> np.ndarray:
    """Indices of grid points whose stored ``Gamma_p`` is not positive definite."""
    return np.array([k for k, g in enumerate(table.gamma_p) if np.linalg.eigvalsh(g)[0] <= 0], dtype=int)


def refine_table(table: AsymptoticTable, spec: McSpec, points=None, progress=None) -> AsymptoticTable:
    """Recompute selected grid points with a larger Monte Carlo budget.

    ``points`` defaults to the non-positive-definite grid points.  The sample
    count used at each point is kept in ``gamma_samples``.
    """
    points = non_pd_points(table) if points is None else np.asarray(points, dtype=int)
    mats, ses, tails = table.gamma_p.copy(), table.gamma_stderr.copy(), table.gamma_tail.copy()
    samples = table.gamma_samples.copy()
    flagged = table.flagged
    for n, k in enumerate(points):
        est = gamma_matrix(float(table.gamma_d_grid[k]), table.p, spec, full=True)
        mats[k], ses[k], tails[k] = est.matrix, est.stderr, est.tail_bound
        samples[k] = spec.mc_samples
        flagged |= est.flagged
        if progress is not None:
            progress(n + 1, points.size, float(table.gamma_d_grid[k]))
    return replace(table, gamma_p=mats, gamma_stderr=ses, gamma_tail=tails,
                   gamma_samples=samples, flagged=flagged)


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 12)


def build_table(p: int = 20, step: float = 0.01, spec: McSpec = McSpec(),
                progress=None) -> AsymptoticTable:
    """Evaluate ``Gamma_p`` on ``[-0.49, 0.49]`` and ``Lambda_0`` on ``[-0.49, 1.49]``."""
    d_grid = _grid(D_MIN, D_MAX, step)
    g_grid = _grid(GAMMA_D_MIN, GAMMA_D_MAX, step)
    mats, ses, tails = [], [], []
    flagged = False
    for n, d in enumerate(g_grid):
        est = gamma_matrix(float(d), p, spec, full=True)
        mats.append(est.matrix)
        ses.append(est.stderr)
        tails.append(est.tail_bound)
        flagged |= est.flagged
        if progress is not None:
            progress(n + 1, g_grid.size, float(d))
    return AsymptoticTable(p=p, d_grid=d_grid, lambda0=np.asarray(lambda0(d_grid)),
                           lambda0_prime=np.asarray(lambda0_prime(d_grid)),
                           gamma_d_grid=g_grid, gamma_p=np.array(mats),
                           gamma_stderr=np.array(ses), gamma_tail=np.array(tails),
                           mc=spec, flagged=flagged)


_ARRAYS = ("d_grid", "lambda0", "lambda0_prime", "gamma_d_grid", "gamma_p",
           "gamma_stderr", "gamma_tail", "gamma_samples")


def _checksum(header: dict, arrays: dict) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for name in (n for n in _ARRAYS if n in arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_table(table: AsymptoticTable, path: Union[str, os.PathLike]) -> None:
    header = table.header()
    arrays = {name: getattr(table, name) for name in _ARRAYS}
    header["checksum"] = _checksum(header, arrays)
    buf = io.BytesIO()
    np.savez_compressed(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_table(path: Union[str, os.PathLike]) -> AsymptoticTable:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            arrays = {name: np.array(z[name]) for name in _ARRAYS if name in z.files}
    except (OSError, ValueError, KeyError) as exc:
        raise TableError(f"cannot read table {path}: {exc}") from exc
    if header.get("version") != TABLE_VERSION:
        raise TableError(f"unsupported table version {header.get('version')}")
    # gamma_samples is optional: tables built in one pass leave it implicit
    missing = set(_ARRAYS) - set(arrays) - {"gamma_samples"}
    if missing:
        raise TableError(f"table {path} lacks {sorted(missing)}")
    stored = header.pop("checksum", None)
    if stored != _checksum(header, arrays):
        raise TableError(f"checksum mismatch in {path}")
    mc = McSpec(**header["mc"])
    return AsymptoticTable(p=header["p"], mc=mc, flagged=header.get("flagged", False), **arrays)


def interpolate(table: AsymptoticTable, d: float, p: Optional[int] = None):
    """``(Lambda_0(d), Lambda_0'(d), Gamma_p(d))`` from a table.

    ``Lambda_0`` and its derivative are evaluated analytically (they agree with
    the stored columns at grid points); ``Gamma_p`` uses a cubic spline per
    entry, returning stored values exactly at grid points.
    """
    lo, hi = table.d_grid[0], table.d_grid[-1]
    if not lo - 1e-12 <= d <= hi + 1e-12:
        raise ValueError(f"d={d} outside table hull [{lo}, {hi}]")
    return float(lambda0(d)), float(lambda0_prime(d)), table.gamma(d, p)


DEFAULT_TABLE_PATH = Path(__file__).with_name("data") / "gamma_p20.npz"


@lru_cache(maxsize=4)
def _cached_table(path: str) -> AsymptoticTable:
    return load_table(path)


def default_table() -> AsymptoticTable:
    """Shipped table (p <= 20); ``IRMEMORY_TABLE`` overrides the path."""
    path = os.environ.get("IRMEMORY_TABLE", str(DEFAULT_TABLE_PATH))
    if not os.path.exists(path):
        raise TableError(f"asymptotic table not found at {path}; run `irmemory build-table`")
    return _cached_table(path)
