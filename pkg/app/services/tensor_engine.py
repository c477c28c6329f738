"""
Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Every primitive checks its output for NaN/Inf and raises NumericFaultError
instead of propagating non-finite values. Operations are recorded on a
per-thread tape whenever gradient recording is enabled and at least one input
requires a gradient; backward() replays the tape in reverse recording order
and clears it.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError, NumericFaultError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


class _Node:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: "Tensor", inputs: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one thread"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread"""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _check_finite(op: str, values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        raise NumericFaultError(f"{op} produced non-finite values")


class Tensor:
    """Row-major float64 array that can take part in the gradient tape"""

    def __init__(self, values: ArrayLike, requires_grad: bool = False):
        if isinstance(values, Tensor):
            values = values.values
        array = np.array(values, dtype=np.float64, order="C")
        _check_finite("tensor", array)
        self.values: np.ndarray = array
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._is_leaf = True

    @classmethod
    def _from_op(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64, order="C")
        out.requires_grad = requires_grad
        out.grad = None
        out._is_leaf = not requires_grad
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # --- operators ---
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("tensors only divide by Python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    # --- methods ---
    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def sin(self) -> "Tensor":
        return sin(self)

    def cos(self) -> "Tensor":
        return cos(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self) -> "Tensor":
        return swap_last_axes(self)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return broadcast_to(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _apply(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    _check_finite(op, values)
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(values, requires)
    if requires:
        get_tape().record(_Node(op, out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# --- elementwise binary ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _apply("add", a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _apply("subtract", a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _apply("multiply", a.values * b.values, (a, b),
                  lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _apply("scale", a.values * factor, (a,), lambda g: (g * factor,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "batch dimensions do not broadcast") from None

    def backward_fn(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.values, -1, -2)
        grad_b = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _apply("matmul", a.values @ b.values, (a, b), backward_fn)


# --- reductions ---

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _apply("sum", np.sum(a.values, axis=axis, keepdims=keepdims), (a,),
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractError(f"mean over an empty extent of shape {a.shape}")
    return _apply("mean", np.mean(a.values, axis=axis, keepdims=keepdims), (a,),
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


# --- elementwise unary ---

def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("square", a.values * a.values, (a,), lambda g: (2.0 * a.values * g,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        values = np.sqrt(a.values)

    def backward_fn(g: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2.0 * values),)

    return _apply("sqrt", values, (a,), backward_fn)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        values = np.exp(a.values)
    return _apply("exp", values, (a,), lambda g: (g * values,))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("sin", np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("cos", np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    values = np.tanh(a.values)
    return _apply("tanh", values, (a,), lambda g: (g * (1.0 - values * values),))


# --- structural ---

def concatenate(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("concatenate needs at least one tensor")
    reference = parts[0]
    ndim = reference.ndim
    norm_axis = axis % ndim if ndim else 0
    for part in parts[1:]:
        if part.ndim != ndim or any(
            part.shape[i] != reference.shape[i] for i in range(ndim) if i != norm_axis
        ):
            raise ShapeMismatchError("concatenate", reference.shape, part.shape, f"axis {axis}")
    sizes = [p.shape[norm_axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _apply("concatenate", np.concatenate([p.values for p in parts], axis=norm_axis), parts,
                  lambda g: tuple(np.split(g, splits, axis=norm_axis)))


def slice_(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g: np.ndarray):
        grad = np.zeros_like(a.values)
        np.add.at(grad, index, g)
        return (grad,)

    return _apply("slice", a.values[index], (a,), backward_fn)


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        values = np.broadcast_to(a.values, shape).copy()
    except ValueError:
        raise ShapeMismatchError("broadcast_to", a.shape, shape) from None
    return _apply("broadcast_to", values, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _apply("reshape", values, (a,), lambda g: (g.reshape(a.shape),))


def swap_last_axes(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ContractError(f"swap_last_axes needs at least two dimensions, got {a.shape}")
    return _apply("swap_last_axes", np.swapaxes(a.values, -1, -2), (a,),
                  lambda g: (np.swapaxes(g, -1, -2),))


# --- reverse mode ---

def backward(loss: Tensor) -> None:
    """
    Populate .grad of every requires_grad leaf reachable from a scalar loss.

    Gradients accumulate into existing .grad buffers; the tape is cleared afterwards.

    Raises:
        ContractError: loss is not scalar, does not require a gradient, or the tape is empty
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss does not depend on any tensor that requires a gradient")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    try:
        for node in reversed(tape.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                _check_finite(f"{node.op} backward", grad)
                if tensor._is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    pending[key] = grad if key not in pending else pending[key] + grad
    finally:
        tape.clear()


def clear_tape() -> None:
    get_tape().clear()


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- optimizer ---

class AdamState:
    """Bias-corrected Adam moments for a fixed, ordered parameter list"""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8,
                 weight_decay: float = 0.0, decayed: Optional[Sequence[Tensor]] = None):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        decayed_ids = {id(p) for p in decayed} if decayed is not None else {id(p) for p in params}
        # decoupled (AdamW-style) decay, applied only to the flagged parameters
        self.decay_mask: List[bool] = [weight_decay > 0.0 and id(p) in decayed_ids for p in params]
        self.step = 0
        self.m: List[np.ndarray] = [np.zeros_like(p.values) for p in params]
        self.v: List[np.ndarray] = [np.zeros_like(p.values) for p in params]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step": np.array(self.step, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m
            state[f"v.{i}"] = v
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        step = int(state["step"])
        m = [np.array(state[f"m.{i}"], dtype=np.float64) for i in range(len(self.m))]
        v = [np.array(state[f"v.{i}"], dtype=np.float64) for i in range(len(self.v))]
        for i, (old, new) in enumerate(zip(self.m, m)):
            if old.shape != new.shape:
                raise ShapeMismatchError("adam state", old.shape, new.shape, f"moment {i}")
        self.step, self.m, self.v = step, m, v


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update in place.

    A None gradient counts as zero (parameter not reached by the loss). The update is
    all-or-nothing: if any gradient or any updated value is non-finite, NumericFaultError
    is raised before a single parameter or moment buffer changes.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError(
            f"adam_step got {len(params)} params, {len(grads)} grads and {len(state.m)} moment buffers"
        )
    for p, g, m in zip(params, grads, state.m):
        if g is not None and g.shape != p.shape:
            raise ShapeMismatchError("adam_step", p.shape, g.shape, "gradient")
        if m.shape != p.shape:
            raise ShapeMismatchError("adam_step", p.shape, m.shape, "moment buffer")
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            raise NumericFaultError(f"adam_step got a non-finite gradient for parameter {i}")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    lr = state.learning_rate
    staged = []
    for p, g, m, v, decay in zip(params, grads, state.m, state.v, state.decay_mask):
        if g is None:
            g = np.zeros_like(p.values)
        with np.errstate(over="ignore", invalid="ignore"):
            new_m = b1 * m + (1.0 - b1) * g
            new_v = b2 * v + (1.0 - b2) * g * g
            new_p = p.values - lr * (new_m / correction1) / (np.sqrt(new_v / correction2) + state.epsilon)
            if decay:
                new_p = new_p - lr * state.weight_decay * p.values
        _check_finite("adam_step", new_p)
        staged.append((new_m, new_v, new_p))

    state.step = step
    for p, m, v, (new_m, new_v, new_p) in zip(params, state.m, state.v, staged):
        m[...] = new_m
        v[...] = new_v
        p.values[...] = new_p
