"""Memory parameter estimation with multiscale increment ratio statistics."""

from .asymptotics import (
    AsymptoticTable,
    McSpec,
    build_table,
    default_table,
    gamma_matrix,
    lam,
    lambda0,
    lambda0_inv,
    lambda0_prime,
    load_table,
    rho,
    save_table,
)
from .estimator import EstimationError, EstimationReport, estimate
from .ir_core import expected_ir, ir_profile, ir_statistic, psi
from .numerics import RngStream
from .processes import SpectralModel, TimeSeries, autocovariance, generate, ingest_csv

__version__ = "0.1.0"

__all__ = [
    "AsymptoticTable",
    "EstimationError",
    "EstimationReport",
    "McSpec",
    "RngStream",
    "SpectralModel",
    "TimeSeries",
    "autocovariance",
    "build_table",
    "default_table",
    "estimate",
    "expected_ir",
    "gamma_matrix",
    "generate",
    "ingest_csv",
    "ir_profile",
    "ir_statistic",
    "lam",
    "lambda0",
    "lambda0_inv",
    "lambda0_prime",
    "load_table",
    "psi",
    "rho",
    "save_table",
]
