from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from app.services import flow_core
from app.services.networks import ConditionEncoder, DepthwiseSeparableConv1d, Linear, ResidualBlock, VelocityModel
from app.services.tensor_engine import Tensor, backward, no_grad, zero_grad


class GradcheckResult(BaseModel):
    """Outcome of a finite-difference comparison"""
    max_relative_error: float = Field(..., description="Worst norm-wise relative error over all parameters")
    per_parameter: Dict[str, float] = Field(default_factory=dict)
    tolerance: float
    passed: bool


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. one tensor"""
    grad = np.zeros_like(param.values)
    flat_values = param.values.reshape(-1)
    flat_grad = grad.reshape(-1)
    with no_grad():
        for i in range(flat_values.size):
            original = flat_values[i]
            flat_values[i] = original + step
            plus = loss_fn().item()
            flat_values[i] = original - step
            minus = loss_fn().item()
            flat_values[i] = original
            flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], names: Sequence[str] = (),
              step: float = 1e-4, tolerance: float = 1e-5) -> GradcheckResult:
    """
    Compare analytic gradients from the tape against central finite differences.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values
        params: Tensors to check (must have requires_grad set)
        names: Optional labels for the report
        step: Finite-difference step
        tolerance: Allowed norm-wise relative error per parameter

    Returns:
        GradcheckResult with the worst relative error
    """
    zero_grad(params)
    backward(loss_fn())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]

    errors: Dict[str, float] = {}
    for i, (param, grad) in enumerate(zip(params, analytic)):
        numeric = numerical_gradient(loss_fn, param, step)
        denom = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-4)
        label = names[i] if i < len(names) else f"param{i}"
        errors[label] = float(np.linalg.norm(grad - numeric) / denom)
    zero_grad(params)

    worst = max(errors.values()) if errors else 0.0
    return GradcheckResult(
        max_relative_error=worst,
        per_parameter=errors,
        tolerance=tolerance,
        passed=worst <= tolerance,
    )


def _randomize(params: Sequence[Tensor], rng: np.random.Generator, scale: float = 0.5) -> None:
    # zero-initialized layers would otherwise hide every upstream gradient
    for p in params:
        p.values[...] = rng.normal(0.0, scale, size=p.shape)


def _suite_cases(seed: int) -> List[Tuple[str, Callable[[], Tensor], List[Tensor]]]:
    rng = np.random.default_rng(seed)
    batch, dim, width, cdim = 3, 2, 4, 3

    linear = Linear(dim, width, rng)
    x_lin = Tensor(rng.standard_normal((batch, dim)))

    conv = DepthwiseSeparableConv1d(2, 3, 3, rng)
    x_conv = Tensor(rng.standard_normal((batch, 2, 4)))

    encoder = ConditionEncoder(vocab_size=4, embed_dim=3, channels=2, layers=2, kernel_size=3,
                               seq_len=2, condition_dim=cdim, rng=rng)
    tokens = rng.integers(4, size=(batch, 2))

    block = ResidualBlock(width, cdim, rng)
    h = Tensor(rng.standard_normal((batch, width)))
    feats = Tensor(rng.standard_normal((batch, width)))
    cond = Tensor(rng.standard_normal((batch, cdim)))

    plain = VelocityModel(dim, width, 1, time_embed_dim=4, seed=seed)
    conditional = VelocityModel(dim, width, 1, time_embed_dim=4, condition_dim=cdim, seed=seed + 1)
    frozen = VelocityModel(dim, width, 1, time_embed_dim=4, seed=seed + 2)
    for module in (linear, conv, encoder, block, plain, conditional, frozen):
        _randomize(module.parameters(), rng)
    frozen.freeze()

    x0 = rng.standard_normal((batch, dim))
    x1 = rng.standard_normal((batch, dim))
    x1_prime = rng.standard_normal((batch, dim))
    t = rng.uniform(0.05, 0.95, size=batch)
    sched = flow_core.AnnealSchedule(10)

    return [
        ("linear", lambda: linear(x_lin).square().sum(), linear.parameters()),
        ("dsconv", lambda: conv(x_conv).square().sum(), conv.parameters()),
        ("condition_encoder", lambda: encoder(tokens).square().sum(), encoder.parameters()),
        ("residual_block", lambda: block(h, feats, cond).square().sum(), block.parameters()),
        ("velocity", lambda: plain(Tensor(x0), t).square().sum(), plain.parameters()),
        ("velocity_conditional", lambda: conditional(Tensor(x0), t, cond).square().sum(),
         conditional.parameters()),
        ("rf_loss", lambda: flow_core.rf_loss(plain, x0, x1, None, t), plain.parameters()),
        ("annealing_reflow_loss",
         lambda: flow_core.annealing_reflow_loss(plain, x1, x0, None, x1_prime, 4, sched, t),
         plain.parameters()),
        ("distill_loss", lambda: flow_core.distill_loss(plain, x1, x0, None), plain.parameters()),
        ("two_step_loss", lambda: flow_core.two_step_loss(frozen, plain, x1, None, t), plain.parameters()),
        ("fg_distill_loss", lambda: flow_core.fg_distill_loss(frozen, plain, x1, x0, None, t),
         plain.parameters()),
    ]


def run_gradcheck_suite(seeds: int = 10, tolerance: float = 1e-5) -> List[Tuple[str, int, GradcheckResult]]:
    """Check every layer and loss on width-4 models for seeds 0..seeds-1"""
    results = []
    for seed in range(seeds):
        for name, loss_fn, params in _suite_cases(seed):
            result = gradcheck(loss_fn, params, tolerance=tolerance)
            if not result.passed:
                logger.warning(f"gradcheck {name} (seed {seed}): relative error {result.max_relative_error:.2e}")
            results.append((name, seed, result))
    return results
