"""
ODE integration of dx/dt = v(x, t, c) from t=1 (noise) down to t=0 (data).

Fixed-step Euler and Dormand-Prince 5(4) with PI step control. A batch is
integrated as one system: the adaptive error norm is the worst sample's.
Vector-field evaluations run without recording on the gradient tape.
"""
import time
from typing import List, Optional

import numpy as np
from loguru import logger

from app.core.config import SolverConfig
from app.core.errors import (
    BudgetExceededError,
    ContractError,
    IntegrationError,
    NumericFaultError,
    StiffnessError,
)
from app.models.reports import SolverReport, TrajectoryKnot
from app.services import tensor_engine as te
from app.services.networks import VectorField
from app.services.tensor_engine import Tensor

# Dormand-Prince 5(4) tableau
DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
DP_B_STAR = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
DP_E = DP_B - DP_B_STAR

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_ALPHA = 0.2 - 0.75 * 0.04
PI_BETA = 0.04
MIN_STEP = 1e-10


def _evaluate(model: VectorField, x: np.ndarray, t: float, c: Optional[Tensor], step: int) -> np.ndarray:
    try:
        with te.no_grad():
            v = model(Tensor(x), t, c).values
    except NumericFaultError as e:
        raise IntegrationError(f"vector field produced non-finite values at t={t:.6g}", step=step) from e
    if v.shape != x.shape:
        raise ContractError(f"vector field returned shape {v.shape} for input {x.shape}")
    return v


def _initial_state(x1) -> np.ndarray:
    x = x1.values if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    if not np.isfinite(x).all():
        raise IntegrationError("initial state is not finite", step=0)
    return x.copy()


def _sample_norm(x: np.ndarray) -> np.ndarray:
    """Per-sample infinity norm (a 1-D state is one sample)"""
    return np.abs(x).max(axis=-1) if x.ndim > 1 else np.atleast_1d(np.abs(x).max())


def euler_solve(model: VectorField, x1, c: Optional[Tensor], cfg: SolverConfig) -> SolverReport:
    """
    N uniform steps x <- x - v(x, t, c)/N at t = 1, 1 - 1/N, ..., 1/N.

    Args:
        model: Vector field
        x1: Noise batch (batch, dim) or a single point (dim,)
        c: Encoded conditions or None
        cfg: Solver configuration with kind "euler"

    Returns:
        SolverReport with nfe == N
    """
    if cfg.kind != "euler":
        raise ContractError(f"euler_solve called with solver kind '{cfg.kind}'")
    n_steps = cfg.euler_steps
    if n_steps > cfg.max_nfe:
        raise BudgetExceededError(f"{n_steps} Euler steps exceed max_nfe={cfg.max_nfe}", step=0)

    start = time.perf_counter()
    x = _initial_state(x1)
    dt = 1.0 / n_steps
    trajectory: Optional[List[TrajectoryKnot]] = [] if cfg.record_trajectory else None
    for i in range(n_steps):
        t = 1.0 - i * dt
        if trajectory is not None:
            trajectory.append(TrajectoryKnot(t=t, x=x.copy()))
        x = x - dt * _evaluate(model, x, t, c, i)
    if trajectory is not None:
        trajectory.append(TrajectoryKnot(t=0.0, x=x.copy()))

    return SolverReport(
        endpoint=x,
        nfe=n_steps,
        accepted=n_steps,
        wall_time=time.perf_counter() - start,
        trajectory=trajectory,
    )


def rk45_solve(model: VectorField, x1, c: Optional[Tensor], cfg: SolverConfig) -> SolverReport:
    """
    Dormand-Prince 5(4) integration from t=1 to exactly t=0.

    The first stage of each step reuses the last stage of the previous accepted step,
    so nfe = 1 + 6 * (accepted + rejected).

    Raises:
        BudgetExceededError: the next step would exceed cfg.max_nfe
        StiffnessError: step size fell below 1e-10
        IntegrationError: the field produced non-finite values
    """
    if cfg.kind != "rk45":
        raise ContractError(f"rk45_solve called with solver kind '{cfg.kind}'")

    start = time.perf_counter()
    x = _initial_state(x1)
    trajectory: Optional[List[TrajectoryKnot]] = [TrajectoryKnot(t=1.0, x=x.copy())] if cfg.record_trajectory else None

    # integrate in s = 1 - t so steps are positive: dx/ds = -v(x, 1 - s)
    def rhs(s: float, state: np.ndarray, step: int) -> np.ndarray:
        return -_evaluate(model, state, 1.0 - s, c, step)

    s = 0.0
    k_first = rhs(0.0, x, 0)
    nfe = 1
    accepted = rejected = 0

    x_norm = float(np.linalg.norm(x))
    k_norm = float(np.linalg.norm(k_first))
    h = 1.0 if k_norm == 0.0 else float(np.clip(0.01 * x_norm / k_norm, 1e-4, 1.0))
    err_prev = 1e-4
    previous_rejected = False

    while s < 1.0:
        if h < MIN_STEP:
            raise StiffnessError(f"step size {h:.3e} underflowed at t={1.0 - s:.6g}", step=accepted + rejected)
        last = s + h >= 1.0
        if last:
            h = 1.0 - s
            if h < MIN_STEP:
                # remainder below the smallest step: close it with the slope already evaluated at s
                x = x + h * k_first
                s = 1.0
                if trajectory is not None:
                    trajectory[-1] = TrajectoryKnot(t=0.0, x=x.copy())
                break
        if nfe + 6 > cfg.max_nfe:
            raise BudgetExceededError(
                f"rk45 needs more than max_nfe={cfg.max_nfe} evaluations (reached t={1.0 - s:.6g})",
                step=accepted + rejected,
            )

        step = accepted + rejected
        stages = [k_first]
        for i in range(1, 7):
            increment = sum(a * k for a, k in zip(DP_A[i], stages) if a != 0.0)
            stages.append(rhs(s + DP_C[i] * h, x + h * increment, step))
        nfe += 6

        x_new = x + h * sum(b * k for b, k in zip(DP_B, stages) if b != 0.0)
        err_vec = h * sum(e * k for e, k in zip(DP_E, stages))
        tolerance = np.maximum(cfg.rtol * np.maximum(_sample_norm(x), _sample_norm(x_new)), cfg.atol)
        err = float(np.max(_sample_norm(err_vec) / tolerance))
        if not np.isfinite(err):
            raise IntegrationError(f"non-finite error estimate at t={1.0 - s:.6g}", step=step)

        if err <= 1.0:
            s = 1.0 if last else s + h
            x = x_new
            k_first = stages[6]
            accepted += 1
            if trajectory is not None:
                trajectory.append(TrajectoryKnot(t=max(1.0 - s, 0.0), x=x.copy()))
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * err ** -PI_ALPHA * err_prev ** PI_BETA
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            if previous_rejected:
                factor = min(1.0, factor)
            err_prev = max(err, 1e-4)
            previous_rejected = False
            h *= factor
        else:
            rejected += 1
            previous_rejected = True
            h *= max(MIN_FACTOR, SAFETY * err ** -0.2)

    logger.debug(f"rk45: {accepted} accepted, {rejected} rejected, nfe={nfe}")
    return SolverReport(
        endpoint=x,
        nfe=nfe,
        accepted=accepted,
        rejected=rejected,
        wall_time=time.perf_counter() - start,
        trajectory=trajectory,
    )


def solve(model: VectorField, x1, c: Optional[Tensor], cfg: SolverConfig) -> SolverReport:
    """Dispatch on cfg.kind"""
    if cfg.kind == "euler":
        return euler_solve(model, x1, c, cfg)
    return rk45_solve(model, x1, c, cfg)


def reverse_euler_solve(model: VectorField, x0, c: Optional[Tensor], steps: int) -> SolverReport:
    """Integrate forward t: 0 -> 1 with N uniform Euler steps (reversibility diagnostic)"""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    start = time.perf_counter()
    x = _initial_state(x0)
    dt = 1.0 / steps
    for i in range(steps):
        x = x + dt * _evaluate(model, x, i * dt, c, i)
    return SolverReport(endpoint=x, nfe=steps, accepted=steps, wall_time=time.perf_counter() - start)


def straightness(model: VectorField, x1, c: Optional[Tensor], probe_steps: int = 64) -> float:
    """
    Mean over the batch of the integral over t of ||(x_end - x1) + v(x_t, t, c)||^2, estimated
    on a probe_steps Euler trajectory. Zero iff every path is a straight line traversed at
    constant velocity.
    """
    if probe_steps < 8:
        raise ContractError(f"probe_steps must be >= 8, got {probe_steps}")
    x_start = _initial_state(x1)
    x = x_start.copy()
    dt = 1.0 / probe_steps
    velocities = []
    for i in range(probe_steps):
        v = _evaluate(model, x, 1.0 - i * dt, c, i)
        velocities.append(v)
        x = x - dt * v
    chord = x - x_start
    deviations = [np.square(chord + v).sum(axis=-1) for v in velocities]
    return float(np.mean(np.mean(deviations, axis=0)))
