"""
Sample-quality and efficiency metrics on raw coordinates: Frechet distance
between Gaussian moment fits (the FD-analog), sliced 2-Wasserstein distance,
and per-sample NFE / wall time of a solver configuration.
"""
import time
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.core.config import SolverConfig
from app.core.errors import ContractError, ShapeMismatchError
from app.models.reports import EfficiencyReport, FrechetStats, MetricsReport
from app.services.networks import VectorField
from app.services.ode_solvers import solve
from app.services.tensor_engine import Tensor

RANK_TOLERANCE = 1e-10


def _as_samples(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2:
        raise ContractError(f"expected samples of shape (n, dim), got {samples.shape}")
    return samples


def _pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("metrics", a.shape, b.shape, "sample dimensions differ")
    return a, b


def _psd_sqrt(matrix: np.ndarray) -> Tuple[np.ndarray, bool]:
    eigvals, eigvecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    degenerate = bool(eigvals.min() < RANK_TOLERANCE)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T, degenerate


def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray,
                         mu_b: np.ndarray, cov_b: np.ndarray) -> FrechetStats:
    """
    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The cross term is the trace of the square root of the symmetric product
    sqrt(cov_a) cov_b sqrt(cov_a), whose negative eigenvalues are clipped at 0.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if cov_a.shape != cov_b.shape or mu_a.shape != mu_b.shape:
        raise ShapeMismatchError("frechet", cov_a.shape, cov_b.shape)

    sqrt_a, degenerate_a = _psd_sqrt(cov_a)
    _, degenerate_b = _psd_sqrt(cov_b)
    product = sqrt_a @ cov_b @ sqrt_a
    eigvals = np.clip(np.linalg.eigvalsh((product + product.T) / 2.0), 0.0, None)
    cross = float(np.sqrt(eigvals).sum())

    distance = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return FrechetStats(distance=max(distance, 0.0), degenerate=degenerate_a or degenerate_b)


def frechet_stats(a: np.ndarray, b: np.ndarray) -> FrechetStats:
    """Frechet-Gaussian distance of two sample sets plus the degenerate-covariance flag"""
    a, b = _pair(a, b)
    dim = a.shape[1]
    if min(a.shape[0], b.shape[0]) < dim + 1:
        raise ContractError(f"need at least {dim + 1} samples per set for dimension {dim}")
    return frechet_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False, ddof=1),
        b.mean(axis=0), np.cov(b, rowvar=False, ddof=1),
    )


def frechet_gauss_distance(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_stats(a, b).distance


def _wasserstein_1d(pa: np.ndarray, pb: np.ndarray) -> float:
    pa, pb = np.sort(pa), np.sort(pb)
    if pa.size != pb.size:
        grid_size = max(pa.size, pb.size)
        levels = (np.arange(grid_size) + 0.5) / grid_size
        pa, pb = np.quantile(pa, levels), np.quantile(pb, levels)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 256, seed: int = 0) -> float:
    """
    Mean over random unit directions of the 1-D 2-Wasserstein distance between projections.

    Args:
        a: Samples (n, dim)
        b: Samples (m, dim)
        n_projections: Number of directions (>= 16)
        seed: Seed for the directions

    Returns:
        Nonnegative distance
    """
    if n_projections < 16:
        raise ContractError(f"n_projections must be >= 16, got {n_projections}")
    a, b = _pair(a, b)
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    proj_a, proj_b = a @ directions.T, b @ directions.T
    return float(np.mean([_wasserstein_1d(proj_a[:, i], proj_b[:, i]) for i in range(n_projections)]))


def efficiency_probe(model: VectorField, cfg: SolverConfig, x1: np.ndarray,
                     conditions: Optional[np.ndarray] = None) -> EfficiencyReport:
    """
    Generate each noise point on its own and average NFE and wall time.

    Args:
        model: Vector field
        cfg: Solver configuration
        x1: Noise points (n, dim), one independent generation each
        conditions: Encoded conditions (n, condition_dim) for conditional models

    Returns:
        EfficiencyReport
    """
    x1 = _as_samples(x1)
    n = x1.shape[0]
    if n < 1:
        raise ContractError("efficiency_probe needs at least one sample")
    total_nfe = 0
    start = time.perf_counter()
    for i in range(n):
        c = None if conditions is None else Tensor(conditions[i])
        total_nfe += solve(model, x1[i], c, cfg).nfe
    elapsed = time.perf_counter() - start
    return EfficiencyReport(mean_nfe=total_nfe / n, time_per_sample=elapsed / n, n=n)


def build_report(samples: np.ndarray, reference: np.ndarray, n_projections: int, seed: int,
                 straightness: Optional[float] = None, efficiency: Optional[EfficiencyReport] = None,
                 config_echo: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """Distances between generated samples and reference data, plus optional diagnostics"""
    stats = frechet_stats(samples, reference)
    return MetricsReport(
        frechet_gauss=stats.distance,
        frechet_degenerate=stats.degenerate,
        sliced_wasserstein=sliced_wasserstein(samples, reference, n_projections, seed),
        straightness=straightness,
        mean_nfe=None if efficiency is None else efficiency.mean_nfe,
        time_per_sample=None if efficiency is None else efficiency.time_per_sample,
        n_samples=int(_as_samples(samples).shape[0]),
        config=config_echo or {},
    )
