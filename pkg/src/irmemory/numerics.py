"""Numerical building blocks shared by the rest of the package.

FFT wrapper, adaptive Gauss-Kronrod quadrature with an optional algebraic
endpoint singularity, bracketing root finder, symmetric positive-definite
solves with a jitter fallback, the chi-square survival function and
reproducible random streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize, special

__all__ = [
    "ConvergenceError",
    "NoBracketError",
    "NotPositiveDefiniteError",
    "QuadratureSpec",
    "RngStream",
    "brent_root",
    "chi2_sf",
    "fft_real",
    "ifft_real",
    "integrate",
    "spd_solve",
]


class ConvergenceError(RuntimeError):
    """Quadrature ran out of subdivisions before meeting its tolerance."""

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate!r}, error bound={error!r})")
        self.estimate = estimate
        self.error = error


class NoBracketError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# random streams


@dataclass
class RngStream:
    """Independent normal/uniform stream keyed by ``(seed, stream_id)``.

    The generator is derived with :class:`numpy.random.SeedSequence` using the
    stream id as spawn key, so replicate ``r`` of a batch is reproducible
    regardless of the order replicates are executed in.  Instances are meant
    to be owned by a single task.
    """

    seed: int
    stream_id: int = 0
    _gen: Optional[np.random.Generator] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.stream_id < 0:
            raise ValueError("stream_id must be non-negative")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)


# ---------------------------------------------------------------------------
# FFT


def _check_pow2(n: int) -> None:
    if n < 2 or n & (n - 1):
        raise ValueError(f"length must be a power of two >= 2, got {n}")


def fft_real(values: Sequence[float]) -> np.ndarray:
    """Discrete Fourier transform of a real sequence whose length is 2**k."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a one-dimensional sequence")
    _check_pow2(x.size)
    return np.fft.fft(x)


def ifft_real(coeffs: Sequence[complex]) -> np.ndarray:
    """Inverse of :func:`fft_real`; the imaginary residue is dropped."""
    c = np.asarray(coeffs, dtype=complex)
    _check_pow2(c.size)
    return np.fft.ifft(c).real


# ---------------------------------------------------------------------------
# quadrature

_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

# 15 Kronrod nodes on [-1, 1]; the 7 Gauss nodes are the odd positions
_K_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_K_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
_G_WEIGHTS = np.zeros(15)
_G_WEIGHTS[1::2] = np.concatenate([_WG[:-1], _WG[::-1]])

SINGULAR_PANEL_WIDTH = 1e-4


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-13
    rel_tol: float = 1e-11
    max_subdivisions: int = 200_000
    endpoint_singularity_exponent: Optional[float] = None

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be strictly positive")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be >= 1")
        e = self.endpoint_singularity_exponent
        if e is not None and not (-1.0 < e < 1.0):
            raise ValueError("singularity exponent must lie in (-1, 1)")


def _gk_panels(f, lo: np.ndarray, hi: np.ndarray):
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    x = mid[:, None] + half[:, None] * _K_NODES[None, :]
    fx = np.asarray(f(x.ravel()), dtype=float).reshape(x.shape)
    k = (fx @ _K_WEIGHTS) * half
    g = (fx @ _G_WEIGHTS) * half
    return k, np.abs(k - g)


def _jacobi_panel(f, a: float, width: float, exponent: float):
    """Integral of f over [a, a + width] where f(x) ~ (x - a)**exponent."""
    out = []
    for n in (16, 32):
        t, w = special.roots_jacobi(n, 0.0, exponent)
        x = a + 0.5 * width * (1.0 + t)
        g = np.asarray(f(x), dtype=float) * ((x - a) ** -exponent)
        out.append((0.5 * width) ** (exponent + 1.0) * np.dot(w, g))
    return out[1], abs(out[1] - out[0])


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    spec: QuadratureSpec = QuadratureSpec(),
    panels: int = 1,
    breakpoints: Optional[Sequence[float]] = None,
) -> float:
    """Adaptive 7/15 Gauss-Kronrod integration of a vectorised ``f`` on [a, b].

    ``panels`` sets the initial uniform partition (useful for oscillatory
    integrands), ``breakpoints`` adds fixed interior points such as kinks.
    When ``spec.endpoint_singularity_exponent`` is set, ``f(x) * (x - a)**-e``
    is assumed smooth near ``a`` and the first stretch of width 1e-4 is done
    with a Gauss-Jacobi rule carrying the power weight.
    """
    if not b > a:
        raise ValueError("need b > a")
    total = 0.0
    err = 0.0
    e = spec.endpoint_singularity_exponent
    if e is not None:
        width = min(SINGULAR_PANEL_WIDTH, (b - a) / max(panels, 2))
        val, verr = _jacobi_panel(f, a, width, e)
        total += val
        err += verr
        a = a + width

    edges = np.linspace(a, b, max(int(panels), 1) + 1)
    if breakpoints is not None:
        bp = np.asarray([p for p in breakpoints if a < p < b], dtype=float)
        edges = np.union1d(edges, bp)
    lo, hi = edges[:-1], edges[1:]
    n_used = lo.size
    span = b - a

    while True:
        vals, errs = _gk_panels(f, lo, hi)
        est = total + vals.sum()
        cur_err = err + errs.sum()
        tol = max(spec.abs_tol, spec.rel_tol * abs(est))
        if cur_err <= tol:
            return float(est)
        # a panel is accepted once its error is within its share of the budget
        share = 0.5 * tol * (hi - lo) / span
        bad = errs > share
        if not bad.any():
            bad = errs >= np.max(errs)
        total += vals[~bad].sum()
        err += errs[~bad].sum()
        if err > tol:
            # accepted panels alone blow the budget; keep refining everything
            total -= vals[~bad].sum()
            err -= errs[~bad].sum()
            bad[:] = True
        lo, hi = lo[bad], hi[bad]
        n_used += lo.size
        if n_used > spec.max_subdivisions:
            raise ConvergenceError("subdivision budget exhausted", est, cur_err)
        mid = 0.5 * (lo + hi)
        lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])


# ---------------------------------------------------------------------------
# roots, linear algebra, distributions


def brent_root(g: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12) -> float:
    """Root of a monotone function inside a sign-changing bracket."""
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return float(lo)
    if ghi == 0.0:
        return float(hi)
    if glo * ghi > 0:
        raise NoBracketError(f"no sign change on [{lo}, {hi}]: g={glo}, {ghi}")
    return float(optimize.brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=200))


def spd_solve(A, b) -> tuple[np.ndarray, bool]:
    """Solve ``A x = b`` for symmetric positive-definite ``A``.

    Returns ``(x, jittered)``.  If the Cholesky factorisation fails, a
    diagonal jitter of ``1e-10 * trace(A) / p`` is added and ``jittered`` is
    True.  One step of iterative refinement is applied.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-14 * np.abs(A).max(initial=1.0)):
        raise ValueError("A must be symmetric")
    jittered = False
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
        Aw = A
    except linalg.LinAlgError:
        p = A.shape[0]
        Aw = A + (1e-10 * np.trace(A) / p) * np.eye(p)
        try:
            factor = linalg.cho_factor(Aw, lower=True)
        except linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("matrix not positive definite even after jitter") from exc
        jittered = True
    x = linalg.cho_solve(factor, b)
    x = x + linalg.cho_solve(factor, b - Aw @ x)
    return x, jittered


def chi2_sf(x: float, k: int) -> float:
    """Survival function P(chi2(k) > x)."""
    if k < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if x < 0 or math.isnan(x):
        raise ValueError("x must be a non-negative number")
    return float(special.chdtrc(k, x))
