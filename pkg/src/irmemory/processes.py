"""Stationary process models, their second-order structure and exact simulation.

Gaussian kinds are sampled exactly by circulant embedding of the
autocovariance.  Non-Gaussian FARIMA innovations go through a truncated
MA(infinity) filter, and deterministic trend/seasonal contamination is added
after sampling.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import fft as sfft
from scipy import signal, special

from .numerics import QuadratureSpec, RngStream, fft_real, integrate

__all__ = [
    "EmbeddingError",
    "SpectralModel",
    "TimeSeries",
    "autocovariance",
    "generate",
    "ingest_csv",
    "spectral_density",
    "write_csv",
]

KINDS = ("fgn", "farima", "powerlaw", "garma0", "custom")
INNOVATIONS = ("gaussian", "uniform", "burr2", "burr1.5")
ARMA_CONVENTIONS = ("box-jenkins", "signal")

MA_TRUNCATION = 5000
BURN_IN = 2000
CLIP_RATIO = 1e-8


class EmbeddingError(RuntimeError):
    """Circulant embedding has eigenvalues too negative to clip."""


@dataclass(frozen=True)
class SpectralModel:
    """Second-order description of a stationary process.

    Parameters
    ----------
    kind : {'fgn', 'farima', 'powerlaw', 'garma0', 'custom'}
    d : float
        Memory parameter in (-0.5, 0.5).  For fGn, ``H = d + 1/2``.
    sigma2 : float
        Innovation variance (FARIMA) or marginal variance (fGn).
    ar, ma : tuple of float
        ARMA coefficients for FARIMA(p, d, q).
    arma_convention : {'box-jenkins', 'signal'}
        'box-jenkins' reads the model as
        ``(1 - sum ar_i B^i)(1 - B)^d X = (1 + sum ma_i B^i) eps``;
        'signal' uses ``(1 + sum ar_i B^i)`` on the left instead.
    beta : float
        Smoothness exponent of the power-law density ``l^-2d (1 + l^beta)``.
    custom_freqs, custom_values : tuple of float
        Tabulated density on (0, pi] for the 'custom' kind.
    innovation : {'gaussian', 'uniform', 'burr2', 'burr1.5'}
    trend_slope, seasonal_amplitude, seasonal_period : float
        Additive contamination ``slope * t + amplitude * sin(2 pi t / period)``.
    """

    kind: str
    d: float = 0.0
    sigma2: float = 1.0
    ar: tuple = ()
    ma: tuple = ()
    arma_convention: str = "box-jenkins"
    beta: float = 1.0
    custom_freqs: tuple = ()
    custom_values: tuple = ()
    innovation: str = "gaussian"
    trend_slope: float = 0.0
    seasonal_amplitude: float = 0.0
    seasonal_period: float = 12.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not -0.5 < self.d < 0.5:
            raise ValueError("d must lie in (-0.5, 0.5)")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.kind == "powerlaw" and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.innovation not in INNOVATIONS:
            raise ValueError(f"unknown innovation law {self.innovation!r}")
        if self.innovation != "gaussian" and self.kind != "farima":
            raise ValueError("non-Gaussian innovations are only defined for FARIMA")
        if self.arma_convention not in ARMA_CONVENTIONS:
            raise ValueError(f"unknown ARMA convention {self.arma_convention!r}")
        object.__setattr__(self, "ar", tuple(float(a) for a in self.ar))
        object.__setattr__(self, "ma", tuple(float(a) for a in self.ma))
        if self.ar:
            roots = np.roots(self.ar_polynomial[::-1])
            if np.any(np.abs(roots) <= 1.0 + 1e-12):
                raise ValueError("AR polynomial has a root on or inside the unit circle")
        if self.seasonal_amplitude and not self.seasonal_period > 0:
            raise ValueError("seasonal period must be positive")
        if self.kind == "custom":
            fr = np.asarray(self.custom_freqs, dtype=float)
            fv = np.asarray(self.custom_values, dtype=float)
            if fr.size < 2 or fr.shape != fv.shape:
                raise ValueError("custom density needs matching frequency/value tables")
            if np.any(np.diff(fr) <= 0) or fr[0] <= 0 or fr[-1] > math.pi:
                raise ValueError("custom frequencies must increase within (0, pi]")
            if np.any(fv < 0):
                raise ValueError("spectral density must be non-negative")

    # convenience constructors
    @classmethod
    def fgn(cls, H: float, sigma2: float = 1.0, **kw) -> "SpectralModel":
        return cls("fgn", d=H - 0.5, sigma2=sigma2, **kw)

    @classmethod
    def farima(cls, d: float, sigma2: float = 1.0, ar=(), ma=(), **kw) -> "SpectralModel":
        return cls("farima", d=d, sigma2=sigma2, ar=tuple(ar), ma=tuple(ma), **kw)

    @classmethod
    def powerlaw(cls, d: float, beta: float = 1.0, **kw) -> "SpectralModel":
        return cls("powerlaw", d=d, beta=beta, **kw)

    @classmethod
    def garma0(cls, d: float, **kw) -> "SpectralModel":
        return cls("garma0", d=d, **kw)

    @classmethod
    def custom(cls, freqs, values, **kw) -> "SpectralModel":
        return cls("custom", custom_freqs=tuple(freqs), custom_values=tuple(values), **kw)

    @property
    def H(self) -> float:
        return self.d + 0.5

    @property
    def ar_polynomial(self) -> np.ndarray:
        """Coefficients of the AR operator in increasing powers of B."""
        sign = -1.0 if self.arma_convention == "box-jenkins" else 1.0
        return np.concatenate([[1.0], sign * np.asarray(self.ar)])

    @property
    def ma_polynomial(self) -> np.ndarray:
        return np.concatenate([[1.0], np.asarray(self.ma)])

    @property
    def is_gaussian(self) -> bool:
        return self.innovation == "gaussian"

    @property
    def is_contaminated(self) -> bool:
        return bool(self.trend_slope) or bool(self.seasonal_amplitude)

    def without_contamination(self) -> "SpectralModel":
        return replace(self, trend_slope=0.0, seasonal_amplitude=0.0)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d}
        defaults = SpectralModel(self.kind, d=self.d) if self.kind != "custom" else None
        for name in self.__dataclass_fields__:
            if name in ("kind", "d"):
                continue
            val = getattr(self, name)
            if defaults is None or val != getattr(defaults, name):
                out[name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "SpectralModel":
        spec = dict(spec)
        if "H" in spec:
            if "d" in spec:
                raise ValueError("give either H or d, not both")
            spec["d"] = float(spec.pop("H")) - 0.5
        for key in ("ar", "ma", "custom_freqs", "custom_values"):
            if key in spec:
                spec[key] = tuple(spec[key])
        return cls(**spec)


@dataclass
class TimeSeries:
    """Observed or simulated path ``(X_1, ..., X_N)``."""

    values: np.ndarray
    origin: str = "unknown"
    model: Optional[SpectralModel] = None
    stream: Optional[tuple] = None
    clipped: bool = False
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("a time series is one-dimensional")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise ValueError(f"non-finite value at index {bad}")

    def __len__(self) -> int:
        return self.values.size

    def check_length(self, p: int) -> None:
        need = 4 * p + 4
        if len(self) < need:
            raise ValueError(f"series has {len(self)} points; at least {need} needed for p={p}")


# ---------------------------------------------------------------------------
# spectral densities


def _fgn_density(lam: np.ndarray, H: float, sigma2: float) -> np.ndarray:
    # exact alias sum: the two half-infinite tails are Hurwitz zeta values
    s = 2.0 * H + 1.0
    c = sigma2 * special.gamma(2 * H + 1) * math.sin(math.pi * H) / (2 * math.pi)
    x = lam / (2 * math.pi)
    tails = (2 * math.pi) ** -s * (special.zeta(s, 1.0 + x) + special.zeta(s, 1.0 - x))
    return c * 4.0 * np.sin(lam / 2) ** 2 * (lam ** -s + tails)


def _arma_gain(lam: np.ndarray, model: SpectralModel) -> np.ndarray:
    z = np.exp(-1j * lam)
    num = np.abs(np.polynomial.polynomial.polyval(z, model.ma_polynomial)) ** 2
    den = np.abs(np.polynomial.polynomial.polyval(z, model.ar_polynomial)) ** 2
    return num / den


def spectral_density(model: SpectralModel, lam) -> np.ndarray:
    """Spectral density ``f`` with ``gamma(k) = 2 int_0^pi f(l) cos(k l) dl``.

    Parameters
    ----------
    model : SpectralModel
    lam : float or array_like
        Frequencies in (0, pi].

    Returns
    -------
    ndarray or float
    """
    scalar = np.ndim(lam) == 0
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam <= 0) or np.any(lam > math.pi * (1 + 1e-15)):
        raise ValueError("frequencies must lie in (0, pi]")
    d = model.d
    if model.kind == "fgn":
        out = _fgn_density(lam, model.H, model.sigma2)
    elif model.kind == "farima":
        out = model.sigma2 / (2 * math.pi) * (2 * np.sin(lam / 2)) ** (-2 * d)
        if model.ar or model.ma:
            out = out * _arma_gain(lam, model)
    elif model.kind == "powerlaw":
        out = model.sigma2 * lam ** (-2 * d) * (1 + lam ** model.beta)
    elif model.kind == "garma0":
        dist = np.abs(lam - math.pi / 2)
        if np.any(dist == 0):
            raise ValueError("GARMA(0,d,0) density has a pole at pi/2")
        out = model.sigma2 * dist ** (-2 * d)
    else:
        out = np.interp(lam, model.custom_freqs, model.custom_values)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# autocovariances


def _fgn_acvf(H: float, sigma2: float, max_lag: int) -> np.ndarray:
    k = np.arange(max_lag + 1, dtype=float)
    h2 = 2 * H
    return 0.5 * sigma2 * (np.abs(k + 1) ** h2 - 2 * k ** h2 + np.abs(k - 1) ** h2)


def _frac_acvf(d: float, sigma2: float, max_lag: int) -> np.ndarray:
    out = np.empty(max_lag + 1)
    out[0] = sigma2 * math.exp(special.gammaln(1 - 2 * d) - 2 * special.gammaln(1 - d))
    if max_lag:
        k = np.arange(1, max_lag + 1, dtype=float)
        out[1:] = out[0] * np.cumprod((k - 1 + d) / (k - d))
    return out


def _psi_weights(model: SpectralModel, tol: float = 1e-17, cap: int = 200_000) -> np.ndarray:
    """MA(infinity) weights of ``theta(B) / phi(B)``, truncated once negligible."""
    n = 64
    while True:
        impulse = np.zeros(n)
        impulse[0] = 1.0
        w = signal.lfilter(model.ma_polynomial, model.ar_polynomial, impulse)
        tail = np.abs(w[-8:]).max()
        if tail < tol * np.abs(w).max() or n >= cap:
            nz = np.flatnonzero(np.abs(w) >= tol * np.abs(w).max())
            return w[: nz[-1] + 1]
        n *= 4


def _farima_acvf(model: SpectralModel, max_lag: int) -> np.ndarray:
    base_only = not (model.ar or model.ma)
    if base_only:
        return _frac_acvf(model.d, model.sigma2, max_lag)
    # X = A(B) Y with Y fractional noise: gamma_X = gamma_Y convolved with the
    # autocorrelation sequence of the psi weights
    w = _psi_weights(model)
    L = w.size - 1
    c = np.correlate(w, w, mode="full")  # lags -L..L
    gy = _frac_acvf(model.d, model.sigma2, max_lag + L)
    two_sided = np.concatenate([gy[:0:-1], gy])  # lags -(max_lag+L)..(max_lag+L)
    full = np.convolve(two_sided, c, mode="valid")  # lags -max_lag..max_lag
    return full[max_lag:]


def _zeta_negative(s: np.ndarray) -> np.ndarray:
    # Riemann zeta for s < 1; scipy's zetac is defined on the whole real line
    return special.zetac(s) + 1.0


def _navot_correction(a: float, h: float, derivs: np.ndarray) -> np.ndarray:
    """Midpoint-rule error for ``int_0 u^a phi(u) du`` at the singular end.

    ``derivs[j]`` holds ``phi^(j)(0) / j!`` (shape ``(J, n_lags)``).
    Returns the amount by which the midpoint sum exceeds the integral.
    """
    J = derivs.shape[0]
    s = -a - np.arange(J)
    z = (2.0 ** s - 1.0) * _zeta_negative(s)  # Hurwitz zeta(s, 1/2)
    hp = h ** (a + 1 + np.arange(J))
    return (z * hp) @ derivs


def _cos_derivs(k: np.ndarray, J: int, shift: np.ndarray, sign: float) -> np.ndarray:
    """Taylor coefficients at ``u = 0`` of ``cos(k (shift + sign u))``."""
    j = np.arange(J)[:, None]
    fact = special.factorial(np.arange(J))[:, None]
    return (sign * k[None, :]) ** j * np.cos(shift[None, :] + j * math.pi / 2) / fact


def _dct_acvf(model: SpectralModel, max_lag: int) -> np.ndarray:
    """``2 int_0^pi f(l) cos(k l) dl`` for k = 0..max_lag on a midpoint grid.

    The midpoint sum is computed for all lags at once by a type-II DCT and
    corrected for the algebraic singularities of ``f`` with the generalised
    Euler-Maclaurin (Navot) expansion, plus the first regular endpoint term.
    """
    M = 1 << max(12, int(math.ceil(math.log2(16 * (max_lag + 1)))))
    h = math.pi / M
    lam = (np.arange(M) + 0.5) * h
    k = np.arange(max_lag + 1, dtype=float)
    fvals = spectral_density(model, lam)
    mid = h * sfft.dct(fvals, type=2)[: max_lag + 1] / 2.0  # h * sum f cos
    J = 24
    d = model.d
    s2 = model.sigma2
    corr = np.zeros(max_lag + 1)
    zero = np.zeros_like(k)
    if model.kind == "powerlaw":
        powers = [(-2 * d, s2), (model.beta - 2 * d, s2)]
        for a, c in powers:
            if a == 0:
                continue
            corr += c * _navot_correction(a, h, _cos_derivs(k, J, zero, 1.0))
        # right end: F'(pi) with F = f cos(k l)
        fprime = s2 * (-2 * d * math.pi ** (-2 * d - 1)
                       + (model.beta - 2 * d) * math.pi ** (model.beta - 2 * d - 1))
        corr += -(h ** 2 / 24.0) * fprime * np.cos(k * math.pi)
    elif model.kind == "garma0":
        a = -2 * d
        shift = k * math.pi / 2
        if a != 0:
            # right half: u = l - pi/2 ; left half: u = pi/2 - l
            corr += s2 * _navot_correction(a, h, _cos_derivs(k, J, shift, 1.0))
            corr += s2 * _navot_correction(a, h, _cos_derivs(k, J, shift, -1.0))
        # regular ends l = 0 and l = pi
        fp0 = s2 * (-a) * (math.pi / 2) ** (a - 1)   # derivative of (pi/2 - l)^a at 0
        fpp = s2 * a * (math.pi / 2) ** (a - 1)      # derivative of (l - pi/2)^a at pi
        corr += (h ** 2 / 24.0) * fp0 - (h ** 2 / 24.0) * fpp * np.cos(k * math.pi)
    return 2.0 * (mid - corr)


def autocovariance(model: SpectralModel, max_lag: int) -> np.ndarray:
    """Autocovariances ``gamma(0), ..., gamma(max_lag)`` of the Gaussian model.

    Closed forms are used for fGn and FARIMA(0, d, 0).  FARIMA(p, d, q) is
    obtained exactly by convolving the fractional-noise autocovariance with
    the ARMA weight correlations.  Power-law, GARMA(0, d, 0) and tabulated
    densities use a corrected midpoint rule evaluated by DCT.
    """
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    max_lag = int(max_lag)
    if model.kind == "fgn":
        return _fgn_acvf(model.H, model.sigma2, max_lag)
    if model.kind == "farima":
        return _farima_acvf(model, max_lag)
    return _dct_acvf(model, max_lag)


def autocovariance_quadrature(model: SpectralModel, lags: Sequence[int],
                              spec: QuadratureSpec = QuadratureSpec(abs_tol=1e-12, rel_tol=1e-10)
                              ) -> np.ndarray:
    """Reference autocovariances by adaptive quadrature of the density."""
    out = []
    a = -2 * model.d
    for k in lags:
        def f(x, k=k):
            return 2.0 * spectral_density(model, x) * np.cos(k * x)
        panels = max(4, 2 * int(k))
        if model.kind == "garma0":
            sp = QuadratureSpec(spec.abs_tol, spec.rel_tol, spec.max_subdivisions,
                                a if a != 0 else None)
            # split at the pole and integrate each half from the singular end
            g_right = integrate(lambda u: f(math.pi / 2 + u), 0.0, math.pi / 2, sp, panels)
            g_left = integrate(lambda u: f(math.pi / 2 - u), 0.0, math.pi / 2, sp, panels)
            out.append(g_left + g_right)
        else:
            exp = a if a != 0 else None
            if model.kind == "fgn":
                exp = 1 - 2 * model.H if model.H != 0.5 else None
            sp = QuadratureSpec(spec.abs_tol, spec.rel_tol, spec.max_subdivisions, exp)
            out.append(integrate(f, 0.0, math.pi, sp, panels))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# simulation


def _circulant_sample(acvf: np.ndarray, n: int, rng: RngStream) -> tuple[np.ndarray, bool]:
    M = 2
    while M < 2 * (n - 1):
        M *= 2
    half = M // 2
    g = acvf[: half + 1]
    row = np.concatenate([g, g[-2:0:-1]])
    eig = fft_real(row).real
    top = eig.max()
    clipped = False
    if eig.min() < 0:
        if -eig.min() > CLIP_RATIO * top:
            raise EmbeddingError(
                f"circulant embedding has eigenvalue {eig.min():.3e} "
                f"(max {top:.3e}); not nonnegative-definite")
        clipped = True
        eig = np.maximum(eig, 0.0)
    z = rng.normal(M) + 1j * rng.normal(M)
    w = np.fft.fft(np.sqrt(eig / M) * z)
    return w.real[:n], clipped


def _innovations(law: str, size: int, rng: RngStream) -> np.ndarray:
    if law == "gaussian":
        return rng.normal(size)
    if law == "uniform":
        return math.sqrt(3.0) * (2.0 * rng.uniform(size) - 1.0)
    alpha = 2.0 if law == "burr2" else 1.5
    u = rng.uniform(size)
    # inverse of the symmetric F(x) = 1 - 1/(2 (1 + |x|^alpha)) on each side
    tail = np.where(u >= 0.5, 1.0 - u, u)
    tail = np.maximum(tail, np.finfo(float).tiny)
    mag = (1.0 / (2.0 * tail) - 1.0) ** (1.0 / alpha)
    return np.where(u >= 0.5, mag, -mag)


def burr_cdf(x, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    tail = 0.5 / (1.0 + np.abs(x) ** alpha)
    return np.where(x >= 0, 1.0 - tail, tail)


def _ma_sample(model: SpectralModel, n: int, rng: RngStream) -> np.ndarray:
    d = model.d
    j = np.arange(1, MA_TRUNCATION, dtype=float)
    b = np.concatenate([[1.0], np.cumprod((j - 1 + d) / j)])
    total = n + BURN_IN + MA_TRUNCATION - 1
    eps = math.sqrt(model.sigma2) * _innovations(model.innovation, total, rng)
    x = signal.fftconvolve(eps, b, mode="valid")  # length n + BURN_IN
    if model.ar or model.ma:
        x = signal.lfilter(model.ma_polynomial, model.ar_polynomial, x)
    return x[BURN_IN:]


def contamination(model: SpectralModel, n: int) -> np.ndarray:
    t = np.arange(1, n + 1, dtype=float)
    out = model.trend_slope * t
    if model.seasonal_amplitude:
        out = out + model.seasonal_amplitude * np.sin(2 * math.pi * t / model.seasonal_period)
    return out


def generate(model: SpectralModel, n: int, rng: RngStream) -> TimeSeries:
    """Sample ``n`` consecutive values of the model.

    Gaussian kinds are exact (circulant embedding).  Non-Gaussian FARIMA uses
    a truncated moving average with burn-in.  Contamination is added last.
    """
    if int(n) != n or n < 2:
        raise ValueError("n must be an integer >= 2")
    n = int(n)
    flags = []
    clipped = False
    if model.is_gaussian:
        M = 2
        while M < 2 * (n - 1):
            M *= 2
        acvf = autocovariance(model, M // 2)
        x, clipped = _circulant_sample(acvf, n, rng)
        if clipped:
            flags.append("embedding_clipped")
    else:
        x = _ma_sample(model, n, rng)
    if model.is_contaminated:
        x = x + contamination(model, n)
    return TimeSeries(x, origin="generated", model=model,
                      stream=(rng.seed, rng.stream_id), clipped=clipped, flags=flags)


# ---------------------------------------------------------------------------
# CSV


def ingest_csv(path: Union[str, os.PathLike], column: Union[int, str] = 0,
               delimiter: str = ",", skip_header: bool = False,
               p: Optional[int] = None) -> TimeSeries:
    """Read one numeric column from a delimited text file.

    Rows are numbered from 1 as they appear in the file.  A blank, NaN or
    non-numeric cell raises ``ValueError`` naming its row.  A string
    ``column`` selects by header name and implies a header row.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    start = 0
    if isinstance(column, str):
        if not rows:
            raise ValueError("empty file has no header")
        header = [c.strip() for c in rows[0]]
        if column not in header:
            raise ValueError(f"column {column!r} not in header {header}")
        column = header.index(column)
        start = 1
    elif skip_header:
        start = 1
    values = []
    for i in range(start, len(rows)):
        row = rows[i]
        lineno = i + 1
        if not row or all(not c.strip() for c in row):
            if i == len(rows) - 1 or all(not any(c.strip() for c in r) for r in rows[i:]):
                break  # trailing blank lines
            raise ValueError(f"row {lineno}: blank row")
        if column >= len(row):
            raise ValueError(f"row {lineno}: no column {column}")
        cell = row[column].strip()
        try:
            v = float(cell)
        except ValueError:
            raise ValueError(f"row {lineno}: non-numeric cell {cell!r}") from None
        if not math.isfinite(v):
            raise ValueError(f"row {lineno}: non-finite value {cell!r}")
        values.append(v)
    ts = TimeSeries(np.asarray(values), origin=f"ingested:{os.fspath(path)}")
    if p is not None:
        ts.check_length(p)
    return ts


def write_csv(ts: Union[TimeSeries, np.ndarray], path: Union[str, os.PathLike],
              header: Optional[str] = None) -> None:
    values = ts.values if isinstance(ts, TimeSeries) else np.asarray(ts, dtype=float)
    with open(path, "w") as fh:
        if header:
            fh.write(header + "\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")
