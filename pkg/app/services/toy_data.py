"""
Synthetic distributions: the Gaussian prior pi1, toy data distributions pi0 and
the closed-form velocity field of the Gaussian-to-Gaussian rectified flow.

Samples are generated in fixed blocks whose generator is seeded by
SeedSequence([seed, stream, block]), so sample `index` of a given seed is the
same no matter how a batch is sliced or partitioned.
"""
from typing import Callable, Optional, Sequence, Union

import numpy as np

from app.core.config import DatasetConfig
from app.core.errors import ConfigError, ContractError, DomainError, SingularityError
from app.models.artifacts import DataBatch
from app.services.networks import FixedField

BLOCK_SIZE = 1024

NOISE_STREAM = 0
DATA_STREAM = 1
TOKEN_STREAM = 2


def _draw_blocks(seed: int, stream: int, start: int, n: int,
                 draw: Callable[[np.random.Generator, int], np.ndarray]) -> np.ndarray:
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    if seed < 0 or start < 0:
        raise ContractError("seed and start index must be nonnegative")
    first = start // BLOCK_SIZE
    last = (start + n - 1) // BLOCK_SIZE
    blocks = []
    for block in range(first, last + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream, block]))
        blocks.append(draw(rng, BLOCK_SIZE))
    stacked = np.concatenate(blocks, axis=0)
    offset = start - first * BLOCK_SIZE
    return stacked[offset:offset + n]


def sample_noise(n: int, dim: int, seed: int, start: int = 0, stream: int = NOISE_STREAM) -> np.ndarray:
    """
    I.i.d. standard normal batch x1 ~ pi1.

    Args:
        n: Number of samples
        dim: Dimension
        seed: Seed
        start: Index of the first sample
        stream: Independent stream id (distinct streams never share draws)

    Returns:
        Array of shape (n, dim)
    """
    if dim < 1:
        raise ContractError(f"dimension must be >= 1, got {dim}")
    return _draw_blocks(seed, stream, start, n, lambda rng, size: rng.standard_normal((size, dim)))


def ring_centers(components: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(components) / components
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def class_of_tokens(tokens: np.ndarray, vocab_size: int, components: int) -> np.ndarray:
    """Deterministic class rule: base-vocab value of the sequence modulo the component count"""
    tokens = np.asarray(tokens, dtype=np.int64)
    weights = vocab_size ** np.arange(tokens.shape[-1], dtype=np.int64)
    return (tokens @ weights) % components


def _validate(dist: DatasetConfig) -> None:
    if dist.sigma <= 0:
        raise ConfigError(f"dataset.sigma must be > 0, got {dist.sigma}")
    if dist.kind in ("mixture_ring", "cond_seq") and dist.components < 1:
        raise ConfigError("dataset.components must be >= 1 (empty mixture)")
    if dist.kind == "cond_seq" and (dist.vocab_size < 1 or dist.seq_len < 1):
        raise ConfigError("dataset.vocab_size and dataset.seq_len must be >= 1")
    if dist.kind == "gauss_nd" and dist.mean is not None and len(dist.mean) != dist.dim:
        raise ConfigError(f"dataset.mean has {len(dist.mean)} entries, expected {dist.dim}")
    if dist.kind != "gauss_nd" and dist.dim != 2:
        raise ConfigError(f"{dist.kind} is two-dimensional; got dim={dist.dim}")


def data_mean(dist: DatasetConfig) -> np.ndarray:
    return np.zeros(dist.dim) if dist.mean is None else np.asarray(dist.mean, dtype=np.float64)


def sample_data(dist: DatasetConfig, n: int, seed: Optional[int] = None, start: int = 0) -> DataBatch:
    """
    Reproducible batch x0 ~ pi0 (plus tokens and classes for cond_seq).

    Args:
        dist: Distribution parameters
        n: Number of samples
        seed: Seed (defaults to dist.seed)
        start: Index of the first sample

    Returns:
        DataBatch

    Raises:
        ConfigError: invalid distribution parameters
    """
    _validate(dist)
    seed = dist.seed if seed is None else seed

    if dist.kind == "gauss_nd":
        mu, sigma, dim = data_mean(dist), dist.sigma, dist.dim
        x0 = _draw_blocks(seed, DATA_STREAM, start, n,
                          lambda rng, size: mu + sigma * rng.standard_normal((size, dim)))
        return DataBatch(x0=x0)

    if dist.kind == "mixture_ring":
        centers = ring_centers(dist.components, dist.radius)

        def draw_ring(rng: np.random.Generator, size: int) -> np.ndarray:
            component = rng.integers(dist.components, size=size)
            points = centers[component] + dist.sigma * rng.standard_normal((size, 2))
            return np.column_stack([points, component])

        raw = _draw_blocks(seed, DATA_STREAM, start, n, draw_ring)
        return DataBatch(x0=raw[:, :2].copy(), classes=raw[:, 2].astype(np.int64))

    if dist.kind == "checkerboard":
        def draw_checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
            x1 = rng.uniform(-2.0, 2.0, size=size)
            x2 = rng.uniform(0.0, 1.0, size=size) - 2.0 * rng.integers(0, 2, size=size)
            x2 = x2 + np.floor(x1) % 2
            return dist.scale * np.column_stack([x1, x2])

        return DataBatch(x0=_draw_blocks(seed, DATA_STREAM, start, n, draw_checkerboard))

    # cond_seq
    centers = ring_centers(dist.components, dist.radius)
    seq_len = dist.seq_len

    def draw_conditional(rng: np.random.Generator, size: int) -> np.ndarray:
        tokens = rng.integers(dist.vocab_size, size=(size, seq_len))
        classes = class_of_tokens(tokens, dist.vocab_size, dist.components)
        points = centers[classes] + dist.sigma * rng.standard_normal((size, 2))
        return np.column_stack([points, tokens, classes])

    raw = _draw_blocks(seed, DATA_STREAM, start, n, draw_conditional)
    return DataBatch(
        x0=raw[:, :2].copy(),
        tokens=raw[:, 2:2 + seq_len].astype(np.int64),
        classes=raw[:, 2 + seq_len].astype(np.int64),
    )


def sample_tokens(dist: DatasetConfig, n: int, seed: int, start: int = 0) -> np.ndarray:
    """Token sequences from the condition prior (uniform over the vocabulary)"""
    if dist.kind != "cond_seq":
        raise ContractError(f"{dist.kind} has no condition prior")
    return _draw_blocks(seed, TOKEN_STREAM, start, n,
                        lambda rng, size: rng.integers(dist.vocab_size, size=(size, dist.seq_len)))


def analytic_velocity_gauss(x: np.ndarray, t: Union[float, np.ndarray],
                            mu0: Union[float, Sequence[float], np.ndarray], sigma0: float) -> np.ndarray:
    """
    E[x1 - x0 | x_t = x] for x0 ~ N(mu0, sigma0^2 I), x1 ~ N(0, I) independent.

    v = -mu0 + (t - (1-t) sigma0^2) / (t^2 + (1-t)^2 sigma0^2) * (x - (1-t) mu0)

    Raises:
        DomainError: t outside [0, 1]
        SingularityError: denominator below 1e-12
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("t must lie in [0, 1]")
    if sigma0 < 0:
        raise DomainError(f"sigma0 must be nonnegative, got {sigma0}")
    var0 = sigma0 * sigma0
    denom = t * t + (1.0 - t) ** 2 * var0
    if np.any(denom < 1e-12):
        raise SingularityError(f"analytic field is singular at t={t}, sigma0={sigma0}")
    coef = (t - (1.0 - t) * var0) / denom
    return -mu0 + coef * (x - (1.0 - t) * mu0)


def gauss_analytic_field(mu0: Union[float, Sequence[float]], sigma0: float) -> FixedField:
    """The exact rectified-flow velocity for Gaussian data as a fixed vector field"""
    return FixedField(lambda x, t: analytic_velocity_gauss(x, t, mu0, sigma0))
