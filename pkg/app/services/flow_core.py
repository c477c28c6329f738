"""
Interpolation rules and loss functionals for rectified flows: the base
rectified-flow loss, annealing reflow, one-step distillation and the two-step
flow-guided regularizer.

Batches are NumPy arrays or constant Tensors of shape (batch, dim); gradients
flow only into the parameters of the model being trained.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from app.core.errors import ContractError, DomainError, ShapeMismatchError
from app.services import tensor_engine as te
from app.services.networks import VectorField
from app.services.tensor_engine import Tensor

ArrayLike = Union[np.ndarray, Tensor]

T_MIN = 1e-5
T_MAX = 1.0 - 1e-5


def _values(x: ArrayLike) -> np.ndarray:
    values = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return values[None, :] if values.ndim == 1 else values


def _times(t: Union[float, np.ndarray], batch: int, op: str) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(batch, float(t))
    t = t.reshape(-1)
    if t.size != batch:
        raise ShapeMismatchError(op, (batch,), t.shape, "one time per sample")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"{op}: t must lie in [0, 1]")
    return t


def _congruent(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def _squared_error(prediction: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of the per-sample squared Euclidean norm"""
    return (prediction - target).square().sum(axis=-1).mean()


# --- interpolation and schedules ---

def interpolate(x0: ArrayLike, x1: ArrayLike, t: Union[float, np.ndarray]) -> np.ndarray:
    """
    Straight-line interpolation x_t = t*x1 + (1-t)*x0.

    Args:
        x0: Data endpoint, shape (dim,) or (batch, dim)
        x1: Noise endpoint, same shape as x0
        t: Scalar or one time per sample

    Returns:
        Interpolated points with the shape of x0
    """
    a = x0.values if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    b = x1.values if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    _congruent("interpolate", a, b)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("interpolate: t must lie in [0, 1]")
    if t.ndim == 1 and a.ndim == 2:
        t = t[:, None]
    return t * b + (1.0 - t) * a


class TimeSampler:
    """Uniform t on [T_MIN, T_MAX]; draws are keyed by (seed, stream, step) so resumed runs see the same times"""

    def __init__(self, seed: int, stream: int = 0, scheme: str = "uniform"):
        if scheme != "uniform":
            raise ContractError(f"unknown time sampling scheme '{scheme}'")
        self.seed = seed
        self.stream = stream
        self.scheme = scheme

    def draw(self, n: int, step: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.stream, step]))
        return rng.uniform(T_MIN, T_MAX, size=n)


@dataclass(frozen=True)
class AnnealSchedule:
    K_a_step: int

    def __post_init__(self):
        if self.K_a_step < 0:
            raise ContractError(f"K_a_step must be nonnegative, got {self.K_a_step}")


def beta(k: int, sched: AnnealSchedule) -> float:
    """beta(k) = 1 - min(1, k / K_a_step); K_a_step = 0 means plain reflow from the first step"""
    if k < 0:
        raise ContractError(f"iteration must be nonnegative, got {k}")
    if sched.K_a_step == 0:
        return 0.0
    return 1.0 - min(1.0, k / sched.K_a_step)


def mix_noise(x1: ArrayLike, x1_prime: ArrayLike, beta_value: float) -> np.ndarray:
    """
    Variance-preserving blend sqrt(1 - beta^2)*x1 + beta*x1'.

    Raises:
        DomainError: beta outside [0, 1]
    """
    if not 0.0 <= beta_value <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta_value}")
    a = x1.values if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    b = x1_prime.values if isinstance(x1_prime, Tensor) else np.asarray(x1_prime, dtype=np.float64)
    _congruent("mix_noise", a, b)
    if beta_value == 0.0:
        return a.copy()
    if beta_value == 1.0:
        return b.copy()
    return np.sqrt(1.0 - beta_value * beta_value) * a + beta_value * b


# --- losses ---

def rf_loss(model: VectorField, x0: ArrayLike, x1: ArrayLike, c: Optional[Tensor],
            t: Union[float, np.ndarray]) -> Tensor:
    """
    Rectified-flow loss: batch mean of ||v(x_t, t, c) - (x1 - x0)||^2.

    Args:
        model: Velocity field being trained
        x0: Data endpoints (batch, dim)
        x1: Noise endpoints (batch, dim)
        c: Encoded conditions (batch, condition_dim) or None
        t: One time per sample

    Returns:
        Scalar Tensor on the tape
    """
    a, b = _values(x0), _values(x1)
    _congruent("rf_loss", a, b)
    t = _times(t, a.shape[0], "rf_loss")
    x_t = interpolate(a, b, t)
    return _squared_error(model(Tensor(x_t), t, c), b - a)


def annealing_reflow_loss(student: VectorField, x1: ArrayLike, x0_hat: ArrayLike, c: Optional[Tensor],
                          x1_prime: ArrayLike, k: int, sched: AnnealSchedule,
                          t: Union[float, np.ndarray]) -> Tensor:
    """
    Reflow loss on the teacher endpoint x0_hat paired with noise annealed from fresh to original.

    At k = 0 the pair is (x0_hat, x1'), a random re-pairing; from k = K_a_step on it is the
    deterministic teacher pair (x0_hat, x1).
    """
    mixed = mix_noise(_values(x1), _values(x1_prime), beta(k, sched))
    return rf_loss(student, x0_hat, mixed, c, t)


def distill_loss(student: VectorField, x1: ArrayLike, x0_hat: ArrayLike, c: Optional[Tensor]) -> Tensor:
    """One-step distillation: batch mean of ||(x1 - x0_hat) - v'(x1, 1, c)||^2"""
    a, b = _values(x0_hat), _values(x1)
    _congruent("distill_loss", a, b)
    return _squared_error(student(Tensor(b), np.ones(b.shape[0]), c), b - a)


def two_step_target(teacher: VectorField, x1: ArrayLike, c: Optional[Tensor],
                    t: Union[float, np.ndarray]) -> np.ndarray:
    """
    Two-step endpoint of the frozen teacher: a step of length 1-t from t=1 followed by a step
    of length t from t.
    """
    b = _values(x1)
    t = _times(t, b.shape[0], "two_step_target")
    cond = c.detach() if isinstance(c, Tensor) else c
    with te.no_grad():
        first = teacher(Tensor(b), np.ones(b.shape[0]), cond).values
        x_t = b - (1.0 - t)[:, None] * first
        second = teacher(Tensor(x_t), t, cond).values
    return x_t - t[:, None] * second


def two_step_loss(teacher: VectorField, student: VectorField, x1: ArrayLike, c: Optional[Tensor],
                  t: Union[float, np.ndarray]) -> Tensor:
    """
    Flow-guided regularizer: batch mean of ||x~0 - (x1 - v'(x1, 1, c))||^2 where x~0 is the
    teacher's two-step endpoint. No gradient reaches the teacher.
    """
    b = _values(x1)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise DomainError("two_step_loss: t must lie in (0, 1)")
    target = two_step_target(teacher, b, c, t)
    return _squared_error(student(Tensor(b), np.ones(b.shape[0]), c), b - target)


def fg_distill_loss(teacher: VectorField, student: VectorField, x1: ArrayLike, x0_hat: ArrayLike,
                    c: Optional[Tensor], t: Union[float, np.ndarray], two_step: bool = True,
                    x1_two_step: Optional[ArrayLike] = None) -> Tensor:
    """
    Total flow-guided distillation loss (unit weights).

    Args:
        two_step: False drops the two-step regularizer (naive distillation)
        x1_two_step: Noise for the regularizer; it needs no stored pair, so fresh draws from pi1
            may be used. Defaults to the pair noise x1.
    """
    loss = distill_loss(student, x1, x0_hat, c)
    if two_step:
        loss = loss + two_step_loss(teacher, student, x1 if x1_two_step is None else x1_two_step, c, t)
    return loss
