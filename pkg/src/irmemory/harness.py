"""Monte Carlo scenarios, file estimation, density export and self-checks."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import yaml
from scipy import stats

from .asymptotics import (
    AsymptoticTable,
    McSpec,
    default_table,
    gamma_matrix,
    lambda0,
    load_table,
    sigma2_one_sided,
)
from .estimator import EstimationReport, estimate
from .ir_core import expected_ir, j_integral, lemma_constants
from .numerics import RngStream
from .processes import SpectralModel, generate, ingest_csv

__all__ = [
    "BatchFailure",
    "CheckResult",
    "DensityExport",
    "MCSummary",
    "ReplicateRecord",
    "ScenarioConfig",
    "estimate_file",
    "export_density",
    "format_checks",
    "render_report",
    "run_scenario",
    "summarize",
    "validate_asymptotics",
]

CONFIG_VERSION = 1
STREAM_STRIDE = 1_000_000
MAX_FAILURE_RATE = 0.10


class BatchFailure(RuntimeError):
    """More than 10% of the replicates of a scenario failed."""


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    """A simulation experiment.

    ``model`` is a template whose ``d`` is replaced by each entry of
    ``d_values``.  ``p`` is an integer or ``"auto"`` for ``[1.5 log N]``.
    """

    model: SpectralModel
    n: int
    d_values: tuple
    p: Union[int, str] = "auto"
    replicates: int = 100
    seed: int = 0
    outputs: dict = field(default_factory=dict)
    table: Optional[str] = None
    workers: int = 1
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "d_values", tuple(float(d) for d in self.d_values))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.d_values:
            raise ValueError("d_values must not be empty")
        if any(not -0.5 < d < 0.5 for d in self.d_values):
            raise ValueError("every d value must lie in (-0.5, 0.5)")
        if self.p != "auto" and (not isinstance(self.p, int) or self.p < 3):
            raise ValueError("p must be an integer >= 3 or 'auto'")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def p_value(self) -> Optional[int]:
        return None if self.p == "auto" else int(self.p)

    def model_for(self, d: float) -> SpectralModel:
        return replace(self.model, d=d)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw)
        version = raw.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"scenario config version must be {CONFIG_VERSION}, got {version!r}")
        model = dict(raw.pop("model"))
        model.setdefault("d", 0.0)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(model=SpectralModel.from_dict(model), **raw)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "ScenarioConfig":
        """Read a YAML (or JSON) scenario file."""
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: expected a mapping at the top level")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION, "name": self.name, "model": self.model.to_dict(),
               "n": self.n, "d_values": list(self.d_values), "p": self.p,
               "replicates": self.replicates, "seed": self.seed, "workers": self.workers}
        if self.outputs:
            out["outputs"] = dict(self.outputs)
        if self.table:
            out["table"] = self.table
        return out


@dataclass
class ReplicateRecord:
    d_index: int
    d: float
    replicate: int
    stream_id: int
    d_ir: float = math.nan
    m_tilde: float = math.nan
    test_stat: float = math.nan
    p_value: float = math.nan
    sd: float = math.nan
    flags: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _true_d(model: SpectralModel) -> float:
    # the GARMA density is regular at the origin; its singularity sits at pi/2
    return 0.0 if model.kind == "garma0" else model.d


@lru_cache(maxsize=4)
def _table_at(path: str, mtime_ns: int) -> AsymptoticTable:
    # keyed on mtime so a rebuilt file is picked up by long-lived workers
    return load_table(path)


def _replicate(args) -> ReplicateRecord:
    model, n, p, seed, d_index, r, table_path = args
    sid = d_index * STREAM_STRIDE + r
    rec = ReplicateRecord(d_index=d_index, d=_true_d(model), replicate=r, stream_id=sid)
    try:
        ts = generate(model, n, RngStream(seed, sid))
    except Exception as exc:
        rec.error = f"generate: {exc}"
        return rec
    try:
        table = (_table_at(table_path, os.stat(table_path).st_mtime_ns) if table_path
                 else default_table())
        rep = estimate(ts, p=p, table=table)
    except Exception as exc:
        rec.error = f"estimate: {exc}"
        return rec
    rec.d_ir, rec.m_tilde = rep.d_ir, float(rep.m_tilde)
    rec.test_stat, rec.p_value, rec.sd = rep.test_stat, rep.p_value, rep.asymptotic_sd
    rec.flags = ";".join(ts.flags + rep.flags)
    return rec


@dataclass
class CellSummary:
    model: str
    d: float
    n: int
    p: int
    sqrt_mse: float
    bias: float
    mean_m_tilde: float
    acceptance: float
    n_ok: int
    n_failed: int


@dataclass
class MCSummary:
    """Per-d cells, the pooled cell, and every replicate record."""

    name: str
    cells: list
    pooled: CellSummary
    records: list

    def cells_csv(self) -> str:
        buf = io.StringIO()
        names = list(CellSummary.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for c in self.cells + [self.pooled]:
            w.writerow([_fmt(getattr(c, k)) for k in names])
        return buf.getvalue()

    def records_csv(self) -> str:
        buf = io.StringIO()
        names = list(ReplicateRecord.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([_fmt(getattr(r, k)) for k in names])
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _cell(name: str, d: float, n: int, p: int, recs: Sequence[ReplicateRecord]) -> CellSummary:
    ok = [r for r in recs if r.ok]
    if ok:
        err = np.array([r.d_ir - r.d for r in ok])
        sqrt_mse = float(np.sqrt(np.mean(err ** 2)))
        bias = float(err.mean())
        m_mean = float(np.mean([r.m_tilde for r in ok]))
        acc = float(np.mean([r.p_value >= 0.05 for r in ok]))
    else:
        sqrt_mse = bias = m_mean = acc = math.nan
    return CellSummary(name, d, n, p, sqrt_mse, bias, m_mean, acc, len(ok), len(recs) - len(ok))


def summarize(config: ScenarioConfig, records: Sequence[ReplicateRecord]) -> MCSummary:
    """Aggregate replicate records; pure, so it can be rerun on stored records."""
    p = config.p_value or int(math.floor(1.5 * math.log(config.n)))
    kind = config.model.kind
    cells = []
    for k, _ in enumerate(config.d_values):
        recs = [r for r in records if r.d_index == k]
        d = recs[0].d if recs else config.d_values[k]
        cells.append(_cell(kind, d, config.n, p, recs))
    pooled = _cell(kind, math.nan, config.n, p, records)
    return MCSummary(config.name, cells, pooled, list(records))


def run_scenario(config: ScenarioConfig, table: Optional[str] = None,
                 workers: Optional[int] = None) -> MCSummary:
    """Run every (d, replicate) pair and aggregate.

    Replicate ``r`` of the ``k``-th d value uses stream id
    ``k * 1_000_000 + r``, so results do not depend on the number of
    workers.  Individual failures are recorded; the batch fails (after the
    outputs are written) when more than 10% of replicates failed.
    """
    table = table or config.table
    workers = workers or config.workers
    tasks = [(config.model_for(d), config.n, config.p_value, config.seed, k, r, table)
             for k, d in enumerate(config.d_values) for r in range(config.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate, tasks, chunksize=8))
    else:
        records = [_replicate(t) for t in tasks]
    summary = summarize(config, records)
    out = config.outputs or {}
    if "summary" in out:
        Path(out["summary"]).write_text(summary.cells_csv())
    if "records" in out:
        Path(out["records"]).write_text(summary.records_csv())
    failed = sum(not r.ok for r in records)
    if failed > MAX_FAILURE_RATE * len(records):
        first = next(r.error for r in records if not r.ok)
        raise BatchFailure(f"{failed}/{len(records)} replicates failed; first error: {first}")
    return summary


# ---------------------------------------------------------------------------
# real data


def render_report(report: EstimationReport, diagnostics: bool = False) -> str:
    """Human-readable summary of an estimate."""
    lo, hi = report.ci95
    lines = [
        f"d_IR          {report.d_ir: .6f}",
        f"asymptotic sd {report.asymptotic_sd: .6f}",
        f"95% interval  [{lo:.6f}, {hi:.6f}]",
        f"N             {report.n}",
        f"p             {report.p}",
        f"m_tilde       {report.m_tilde}" + (f" (uncapped {report.m_tilde_raw})"
                                             if report.m_tilde != report.m_tilde_raw else ""),
        f"alpha_hat     {report.alpha_hat:.6f}",
        f"alpha_tilde   {report.alpha_tilde:.6f}",
        f"T_tilde       {report.test_stat:.6f}",
        f"p-value       {report.p_value:.6f}",
        f"flags         {', '.join(report.flags) or 'none'}",
    ]
    if diagnostics:
        lines.append("grid:")
        lines.append("   k     alpha       m            Q       d_tilde")
        for g in report.grid:
            if g.feasible:
                lines.append(f"  {g.k:2d}  {g.alpha:8.5f}  {g.m:6d}  {g.q:11.6g}  {g.d_tilde: .6f}")
            else:
                lines.append(f"  {g.k:2d}  {g.alpha:8.5f}  {g.m:6d}  infeasible")
    return "\n".join(lines)


def estimate_file(path: Union[str, os.PathLike], p: Optional[int] = None,
                  table: Optional[Union[str, AsymptoticTable]] = None,
                  column: Union[int, str] = 0, skip_header: bool = False,
                  diagnostics: bool = False) -> tuple[EstimationReport, str, str]:
    """Estimate ``d`` for one column of a CSV file.

    Returns the report, its text rendering and a JSON rendering.
    """
    ts = ingest_csv(path, column=column, skip_header=skip_header)
    if p is None:
        p = int(math.floor(1.5 * math.log(max(len(ts), 2))))
    need = 4 * p + 4
    if len(ts) < need:
        raise ValueError(f"{path}: {len(ts)} observations; at least {need} needed for p={p}")
    if isinstance(table, (str, os.PathLike)):
        table = load_table(table)
    rep = estimate(ts, p=p, table=table)
    text = render_report(rep, diagnostics)
    js = json.dumps(rep.to_dict(diagnostics), indent=2)
    return rep, text, js


# ---------------------------------------------------------------------------
# plot data


@dataclass
class DensityExport:
    x: np.ndarray
    kde: np.ndarray
    overlay_x: np.ndarray
    overlay: np.ndarray
    bandwidth: float
    label: str

    def to_csv(self) -> str:
        """Two blocks of two columns, one per curve."""
        buf = io.StringIO()
        buf.write("# kde\nx,density\n")
        for a, b in zip(self.x, self.kde):
            buf.write(f"{float(a)!r},{float(b)!r}\n")
        buf.write(f"# {self.label}\nx,density\n")
        for a, b in zip(self.overlay_x, self.overlay):
            buf.write(f"{float(a)!r},{float(b)!r}\n")
        return buf.getvalue()


def _overlay(spec) -> tuple:
    if isinstance(spec, str):
        name, _, args = spec.partition(":")
        vals = [float(a) for a in args.split(",")] if args else []
        spec = (name, *vals)
    name = spec[0]
    if name == "normal":
        mu, sd = (spec[1], spec[2]) if len(spec) == 3 else (0.0, 1.0)
        if not sd > 0:
            raise ValueError("normal overlay needs sd > 0")
        return stats.norm(mu, sd), f"normal({mu:g},{sd:g})", False
    if name == "chi2":
        if len(spec) != 2 or not spec[1] > 0:
            raise ValueError("chi2 overlay needs one positive degree of freedom")
        return stats.chi2(spec[1]), f"chi2({spec[1]:g})", True
    raise ValueError(f"unknown overlay {name!r}; use normal or chi2")


def export_density(samples, overlay=("normal", 0.0, 1.0), points: int = 200) -> DensityExport:
    """Gaussian-kernel density (Silverman bandwidth) plus a reference density.

    Both curves are sampled on ``points`` equally spaced abscissae covering
    the data range padded by three bandwidths; the chi-square overlay is
    evaluated on the same range clipped at zero.
    """
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 20:
        raise ValueError(f"density export needs at least 20 samples, got {x.size}")
    kde = stats.gaussian_kde(x, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, points)
    dist, label, positive = _overlay(overlay)
    ogrid = np.linspace(max(grid[0], 0.0), max(grid[-1], 1.0), points) if positive else grid
    return DensityExport(grid, kde(grid), ogrid, dist.pdf(ogrid), bw, label)


# ---------------------------------------------------------------------------
# self-checks


@dataclass
class CheckResult:
    name: str
    value: float
    target: float
    tolerance: float
    passed: bool
    note: str = ""


def _check(name, value, target, tol, relative=False, note="") -> CheckResult:
    err = abs(value - target) / (abs(target) if relative else 1.0)
    return CheckResult(name, float(value), float(target), tol, bool(err <= tol), note)


def _rate_slope(model: SpectralModel, ms=(64, 128, 256, 512, 1024)) -> float:
    ms = np.asarray(ms)
    e = np.array([expected_ir(model, int(m)).expected_ir for m in ms]) - lambda0(_true_d(model))
    return float(np.polyfit(np.log(ms), np.log(np.abs(e)), 1)[0])


def validate_asymptotics(mc: McSpec = McSpec(), d_values=(-0.3, 0.0, 0.3)) -> list:
    """Expansion, rate and variance consistency checks as a pass/fail list."""
    out = [
        _check("J4(0,1) = pi/2", j_integral(0.0, 1, 4), math.pi / 2, 1e-10),
        _check("J6(0,1) = 3pi/8", j_integral(0.0, 1, 6), 3 * math.pi / 8, 1e-10),
    ]
    for a in (-0.4, 0.4):
        c = lemma_constants(a)
        out.append(_check(f"J4({a},512) / (C41 m^(1-a))", j_integral(a, 512, 4) / (c.C41 * 512 ** (1 - a)),
                          1.0, 0.02))
    out.append(_check("C'42", lemma_constants(1.0).C42p, 2.34, 0.005,
                      note="numerical intercept of J4(1, m) - 1.5 log m is 3.0590"))
    out.append(_check("rate slope POWERLAW(0.3, beta=1)", _rate_slope(SpectralModel.powerlaw(0.3, 1.0)),
                      -1.0, 0.15))
    out.append(_check("rate slope FARIMA(0, 0.2, 0)", _rate_slope(SpectralModel.farima(0.2)), -1.4, 0.15))
    for d in d_values:
        g = gamma_matrix(d, 1, mc, full=True)
        s2, s2_se = sigma2_one_sided(d, mc)
        pooled = math.hypot(float(g.stderr[0, 0]), s2_se)
        out.append(_check(f"sigma_11({d}) vs sigma^2({d})", float(g.matrix[0, 0]), s2, 2 * pooled,
                          note=f"pooled se {pooled:.2e}"))
    return out


def format_checks(checks: Sequence[CheckResult]) -> str:
    lines = []
    for c in checks:
        tag = "PASS" if c.passed else "FAIL"
        lines.append(f"{tag}  {c.name}: {c.value:.6g} (target {c.target:.6g}, tol {c.tolerance:.3g})"
                     + (f"  [{c.note}]" if c.note else ""))
    return "\n".join(lines)
