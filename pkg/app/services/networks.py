"""
Layer library and conditional velocity-field networks v(x, t, c).

The trunk is a stack of residual MLP blocks; time and condition embeddings are
added to every block input after a learned projection. The last affine of each
block and the output head start at zero so a fresh model is the zero field.
"""
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from app.core.config import ModelConfig
from app.core.errors import ContractError, DomainError, ShapeMismatchError
from app.models.reports import ParameterReport
from app.services import tensor_engine as te
from app.services.tensor_engine import Tensor

TimeLike = Union[float, np.ndarray]


class VectorField(Protocol):
    """Anything that maps (x, t, c) to a velocity with the shape of x"""

    def __call__(self, x: Tensor, t: TimeLike, c: Optional[Tensor] = None) -> Tensor: ...


class Module:
    """Ordered container of named parameters and child modules"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, values: np.ndarray) -> Tensor:
        param = Tensor(values, requires_grad=True)
        self._params[name] = param
        return param

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        items = [(f"{prefix}{name}", p) for name, p in self._params.items()]
        for child_name, child in self._children.items():
            items.extend(child.named_parameters(f"{prefix}{child_name}."))
        return items

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != param.shape:
                raise ShapeMismatchError("load_state_dict", param.shape, values.shape, name)
            param.values[...] = values

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self) -> None:
        te.zero_grad(self.parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            bound = 1.0 / np.sqrt(in_features)
            weight = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeMismatchError("linear", x.shape, self.weight.shape)
        return x @ self.weight + self.bias

    @staticmethod
    def count(in_features: int, out_features: int) -> int:
        return in_features * out_features + out_features


# --- time embedding ---

class SinusoidalTimeEmbedding:
    def __init__(self, dim: int, max_period: float = 100.0):
        if dim < 2 or dim % 2:
            raise ContractError(f"time embedding dim must be even and positive, got {dim}")
        if max_period <= 0:
            raise ContractError(f"max_period must be positive, got {max_period}")
        self.dim = dim
        self.max_period = max_period
        half = dim // 2
        self.frequencies = max_period ** (-np.arange(half) / half)

    def __call__(self, t: TimeLike) -> np.ndarray:
        return embed_time(t, self)


def embed_time(t: TimeLike, cfg: SinusoidalTimeEmbedding) -> np.ndarray:
    """
    Sinusoidal embedding [sin(t*w_0..w_{h-1}), cos(t*w_0..w_{h-1})] with w_i = max_period^(-i/h).

    Args:
        t: Scalar or array of times in [0, 1]
        cfg: Embedding configuration

    Returns:
        Array of shape t.shape + (dim,)
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.isfinite(t).all():
        raise DomainError(f"time must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    angles = t[..., None] * cfg.frequencies
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# --- depthwise separable convolution ---

class DepthwiseSeparableConv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        if min(in_channels, out_channels, kernel_size) < 1:
            raise ContractError("channels and kernel_size must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        dw_bound = 1.0 / np.sqrt(kernel_size)
        pw_bound = 1.0 / np.sqrt(in_channels)
        self.depthwise = self.add_parameter(
            "depthwise", rng.uniform(-dw_bound, dw_bound, size=(in_channels, kernel_size)))
        self.pointwise = self.add_parameter(
            "pointwise", rng.uniform(-pw_bound, pw_bound, size=(in_channels, out_channels)))
        self.bias = self.add_parameter("bias", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return dsconv_forward(x, self)

    def weight_count(self) -> int:
        return self.in_channels * self.kernel_size + self.in_channels * self.out_channels

    def dense_weight_count(self) -> int:
        return self.in_channels * self.out_channels * self.kernel_size


def dsconv_forward(x: Tensor, layer: DepthwiseSeparableConv1d) -> Tensor:
    """
    Same-padded depthwise convolution per channel followed by pointwise 1x1 mixing.

    Args:
        x: Tensor of shape (..., in_channels, length)
        layer: Convolution parameters

    Returns:
        Tensor of shape (..., out_channels, length)
    """
    x = te.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != layer.in_channels:
        raise ShapeMismatchError("dsconv", x.shape, layer.depthwise.shape, "channel mismatch")
    length = x.shape[-1]
    if length < 1:
        raise ContractError("dsconv needs a sequence length of at least 1")

    k = layer.kernel_size
    left = (k - 1) // 2
    right = k - 1 - left
    pieces = []
    if left:
        pieces.append(Tensor(np.zeros(x.shape[:-1] + (left,))))
    pieces.append(x)
    if right:
        pieces.append(Tensor(np.zeros(x.shape[:-1] + (right,))))
    padded = te.concatenate(pieces, axis=-1) if len(pieces) > 1 else x

    mixed = None
    for j in range(k):
        tap = padded[..., j:j + length] * layer.depthwise[:, j:j + 1]
        mixed = tap if mixed is None else mixed + tap

    # (..., C_in, L) -> (..., L, C_in) @ (C_in, C_out) -> (..., C_out, L)
    out = mixed.swapaxes() @ layer.pointwise + layer.bias
    return out.swapaxes()


# --- condition encoder ---

class ConditionEncoder(Module):
    """Token sequence -> fixed-length condition vector through a depthwise-separable conv stack"""

    def __init__(self, vocab_size: int, embed_dim: int, channels: int, layers: int, kernel_size: int,
                 seq_len: int, condition_dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.channels = channels
        self.kernel_size = kernel_size
        self.seq_len = seq_len
        self.condition_dim = condition_dim
        self.table = self.add_parameter("table", rng.standard_normal((vocab_size, embed_dim)))
        self.convs: List[DepthwiseSeparableConv1d] = []
        in_channels = embed_dim
        for i in range(layers):
            conv = DepthwiseSeparableConv1d(in_channels, channels, kernel_size, rng)
            self.add_module(f"convs.{i}", conv)
            self.convs.append(conv)
            in_channels = channels
        self.proj = self.add_module("proj", Linear(channels * seq_len, condition_dim, rng))

    def __call__(self, tokens: np.ndarray) -> Tensor:
        return encode_condition(tokens, self)

    def spec(self) -> Dict[str, int]:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "channels": self.channels,
            "layers": len(self.convs),
            "kernel_size": self.kernel_size,
            "seq_len": self.seq_len,
            "condition_dim": self.condition_dim,
        }

    def dense_equivalent_count(self) -> int:
        """Parameter count if every separable conv were a dense conv with the same channels/kernel"""
        total = self.num_parameters()
        for conv in self.convs:
            total += conv.dense_weight_count() - conv.weight_count()
        return total


def encode_condition(tokens: np.ndarray, enc: ConditionEncoder) -> Tensor:
    """
    Encode integer token sequences into condition vectors.

    Args:
        tokens: Integer array of shape (seq_len,) or (batch, seq_len)
        enc: Encoder

    Returns:
        Tensor of shape (condition_dim,) or (batch, condition_dim)
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[-1] != enc.seq_len:
        raise ContractError(f"expected token sequences of length {enc.seq_len}, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        if not np.all(np.equal(np.mod(tokens, 1), 0)):
            raise DomainError("tokens must be integers")
        tokens = tokens.astype(np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= enc.vocab_size):
        raise DomainError(f"token outside vocabulary [0, {enc.vocab_size})")

    one_hot = Tensor(np.eye(enc.vocab_size)[tokens])  # (B, L, V)
    h = (one_hot @ enc.table).swapaxes()  # (B, E, L)
    for conv in enc.convs:
        h = conv(h).tanh()
    h = h.reshape(tokens.shape[0], enc.channels * enc.seq_len)
    out = enc.proj(h)
    return out.reshape(enc.condition_dim) if single else out


# --- velocity network ---

class ResidualBlock(Module):
    def __init__(self, width: int, condition_dim: int, rng: np.random.Generator):
        super().__init__()
        self.time_proj = self.add_module("time_proj", Linear(width, width, rng))
        self.cond_proj = self.add_module("cond_proj", Linear(condition_dim, width, rng)) if condition_dim else None
        self.fc1 = self.add_module("fc1", Linear(width, width, rng))
        self.fc2 = self.add_module("fc2", Linear(width, width, rng, zero_init=True))

    def __call__(self, h: Tensor, time_features: Tensor, c: Optional[Tensor]) -> Tensor:
        shift = self.time_proj(time_features)
        if self.cond_proj is not None:
            shift = shift + self.cond_proj(c)
        return h + self.fc2(self.fc1(h + shift).tanh())

    @staticmethod
    def count(width: int, condition_dim: int) -> int:
        total = 3 * Linear.count(width, width)
        if condition_dim:
            total += Linear.count(condition_dim, width)
        return total


class VelocityModel(Module):
    def __init__(self, data_dim: int, width: int, depth: int, time_embed_dim: int = 16,
                 max_period: float = 100.0, condition_dim: int = 0, seed: int = 0):
        super().__init__()
        if min(data_dim, width, depth) < 1 or condition_dim < 0:
            raise ContractError("data_dim, width and depth must be positive; condition_dim nonnegative")
        rng = np.random.default_rng(seed)
        self.data_dim = data_dim
        self.width = width
        self.depth = depth
        self.condition_dim = condition_dim
        self.time_embed = SinusoidalTimeEmbedding(time_embed_dim, max_period)
        self.time_mlp = self.add_module("time_mlp", Linear(time_embed_dim, width, rng))
        self.input = self.add_module("input", Linear(data_dim, width, rng))
        self.blocks: List[ResidualBlock] = []
        for i in range(depth):
            block = ResidualBlock(width, condition_dim, rng)
            self.add_module(f"blocks.{i}", block)
            self.blocks.append(block)
        self.head = self.add_module("head", Linear(width, data_dim, rng, zero_init=True))
        # time-dependent scale and offset applied directly to x
        self.affine = self.add_module("affine", Linear(width, 2 * data_dim, rng, zero_init=True))

    def __call__(self, x: Tensor, t: TimeLike, c: Optional[Tensor] = None) -> Tensor:
        return velocity_forward(self, x, t, c)

    def spec(self) -> Dict[str, Union[int, float]]:
        return {
            "data_dim": self.data_dim,
            "width": self.width,
            "depth": self.depth,
            "time_embed_dim": self.time_embed.dim,
            "max_period": self.time_embed.max_period,
            "condition_dim": self.condition_dim,
        }

    @classmethod
    def from_spec(cls, spec: Dict[str, Union[int, float]], seed: int = 0) -> "VelocityModel":
        return cls(
            data_dim=int(spec["data_dim"]),
            width=int(spec["width"]),
            depth=int(spec["depth"]),
            time_embed_dim=int(spec["time_embed_dim"]),
            max_period=float(spec["max_period"]),
            condition_dim=int(spec["condition_dim"]),
            seed=seed,
        )

    def copy(self) -> "VelocityModel":
        clone = VelocityModel.from_spec(self.spec())
        clone.load_state_dict(self.state_dict())
        return clone

    def trunk_parameters(self) -> int:
        return sum(block.num_parameters() for block in self.blocks)


def trunk_parameter_count(width: int, depth: int, condition_dim: int = 0) -> int:
    return depth * ResidualBlock.count(width, condition_dim)


def velocity_parameter_count(width: int, depth: int, data_dim: int, condition_dim: int = 0,
                             time_embed_dim: int = 16) -> int:
    return (
        Linear.count(time_embed_dim, width)
        + Linear.count(data_dim, width)
        + trunk_parameter_count(width, depth, condition_dim)
        + Linear.count(width, data_dim)
        + Linear.count(width, 2 * data_dim)
    )


def _batch_times(t: TimeLike, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(batch, float(t))
    t = t.reshape(-1)
    if t.size == 1:
        return np.full(batch, float(t[0]))
    if t.size != batch:
        raise ShapeMismatchError("velocity_forward", (batch,), t.shape, "one time per sample")
    return t


def velocity_forward(model: VelocityModel, x: Union[Tensor, np.ndarray], t: TimeLike,
                     c: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
    """
    Evaluate v(x, t, c).

    Args:
        model: Velocity network
        x: Points of shape (data_dim,) or (batch, data_dim)
        t: Scalar time or one time per sample, in [0, 1]
        c: Condition vectors, required iff model.condition_dim > 0

    Returns:
        Velocity with the shape of x
    """
    x = te.as_tensor(x)
    if x.shape[-1] != model.data_dim or x.ndim not in (1, 2):
        raise ShapeMismatchError("velocity_forward", x.shape, (model.data_dim,), "data dimension")
    if (c is None) != (model.condition_dim == 0):
        raise ContractError(
            "condition required" if c is None else "model is unconditional but a condition was given"
        )
    single = x.ndim == 1
    if single:
        x = x.reshape(1, model.data_dim)
    batch = x.shape[0]

    times = _batch_times(t, batch)
    time_features = model.time_mlp(Tensor(model.time_embed(times))).tanh()

    cond = None
    if c is not None:
        cond = te.as_tensor(c)
        if cond.shape[-1] != model.condition_dim:
            raise ShapeMismatchError("velocity_forward", cond.shape, (model.condition_dim,), "condition")
        if cond.ndim == 1:
            cond = cond.reshape(1, model.condition_dim)

    h = model.input(x)
    for block in model.blocks:
        h = block(h, time_features, cond)
    gate = model.affine(time_features)
    scale = gate[:, :model.data_dim]
    offset = gate[:, model.data_dim:]
    out = model.head(h) + scale * x + offset
    return out.reshape(model.data_dim) if single else out


# --- fixed fields (oracles and diagnostics) ---

class FixedField:
    """Wrap a NumPy function f(x, t) -> v as a non-trainable vector field"""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, x: Tensor, t: TimeLike, c: Optional[Tensor] = None) -> Tensor:
        x_values = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        t_values = np.asarray(t, dtype=np.float64)
        if x_values.ndim == 2 and t_values.ndim == 1:
            t_values = t_values[:, None]
        return Tensor(self.fn(x_values, t_values))


class ConstantField(FixedField):
    def __init__(self, velocity: Sequence[float]):
        self.velocity = np.asarray(velocity, dtype=np.float64)
        super().__init__(lambda x, t: np.broadcast_to(self.velocity, x.shape).copy())


def parameter_report(model_cfg: ModelConfig, data_dim: int, conditional: bool = False,
                     seq_len: int = 2, vocab_size: int = 4) -> ParameterReport:
    """Exact parameter counts of the configured teacher/student pair"""
    condition_dim = model_cfg.condition_dim if conditional else 0
    teacher_trunk = trunk_parameter_count(model_cfg.teacher_width, model_cfg.depth, condition_dim)
    student_trunk = trunk_parameter_count(model_cfg.student_width, model_cfg.depth, condition_dim)
    report = ParameterReport(
        teacher_total=velocity_parameter_count(model_cfg.teacher_width, model_cfg.depth, data_dim,
                                               condition_dim, model_cfg.time_embed_dim),
        teacher_trunk=teacher_trunk,
        student_total=velocity_parameter_count(model_cfg.student_width, model_cfg.depth, data_dim,
                                               condition_dim, model_cfg.time_embed_dim),
        student_trunk=student_trunk,
        trunk_ratio=student_trunk / teacher_trunk,
    )
    if conditional:
        encoder = build_encoder(model_cfg, vocab_size, seq_len, np.random.default_rng(0))
        report.encoder_total = encoder.num_parameters()
        report.encoder_dense_equivalent = encoder.dense_equivalent_count()
    return report


def build_encoder(model_cfg: ModelConfig, vocab_size: int, seq_len: int,
                  rng: np.random.Generator) -> ConditionEncoder:
    return ConditionEncoder(
        vocab_size=vocab_size,
        embed_dim=model_cfg.encoder_embed_dim,
        channels=model_cfg.encoder_channels,
        layers=model_cfg.encoder_layers,
        kernel_size=model_cfg.encoder_kernel_size,
        seq_len=seq_len,
        condition_dim=model_cfg.condition_dim,
        rng=rng,
    )


def encoder_from_spec(spec: Dict[str, int]) -> ConditionEncoder:
    return ConditionEncoder(rng=np.random.default_rng(0), **{k: int(v) for k, v in spec.items()})
