"""
On-disk formats: checkpoints (npz + JSON header), PairSet binary files,
CSV dumps and JSON reports. Every writer goes through a temp file and an
atomic rename so reruns overwrite outputs cleanly.
"""
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel

from app.core.config import RunConfig, SolverConfig, config_hash
from app.core.errors import ContractError, FingerprintMismatchError, MissingPrerequisiteError
from app.models.artifacts import Checkpoint, LossRecord, PairSet
from app.models.reports import TrajectoryKnot
from app.services.networks import Module

PathLike = Union[str, Path]

PAIRSET_MAGIC = b"RFLXPAIR"
PAIRSET_VERSION = 1
# magic, version, dim, seq_len, count, fingerprint digest, metadata length
PAIRSET_HEADER = struct.Struct("<8sHIIQ32sI")
RECORD_DTYPE = np.dtype("<f8")

HEADER_KEY = "__header__"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json_model(path: PathLike, model: BaseModel) -> Path:
    return atomic_write_text(path, model.model_dump_json(indent=2))


def write_resolved_config(cfg: RunConfig) -> Tuple[Path, str]:
    """Write resolved_config.json (defaults expanded) into the run's output dir; returns (path, hash)"""
    path = atomic_write_text(cfg.output_path / "resolved_config.json",
                             json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    return path, config_hash(cfg)


def model_fingerprint(model: Module, encoder: Optional[Module] = None) -> str:
    """SHA-256 over the architecture spec and the exact parameter bytes"""
    digest = hashlib.sha256()
    for part in (model, encoder):
        if part is None:
            continue
        spec = part.spec() if hasattr(part, "spec") else {}
        digest.update(json.dumps(spec, sort_keys=True).encode())
        for name, param in part.named_parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(param.values, dtype="<f8").tobytes())
    return digest.hexdigest()


# --- checkpoints ---

def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    header = ckpt.model_dump(mode="json", exclude={"model_state", "encoder_state", "optimizer_state"})
    arrays = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    if ckpt.encoder_state is not None:
        arrays.update({f"encoder/{k}": v for k, v in ckpt.encoder_state.items()})
    arrays.update({f"optim/{k}": v for k, v in ckpt.optimizer_state.items()})
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    written = atomic_write_bytes(path, buffer.getvalue())
    logger.debug(f"Saved {ckpt.stage} checkpoint at iteration {ckpt.iteration} to {written}")
    return written


def load_checkpoint(path: PathLike, stage: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        MissingPrerequisiteError: the file does not exist
        ContractError: the file is not a checkpoint or belongs to another stage
    """
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(str(path), f"{stage} checkpoint" if stage else "checkpoint")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise ContractError(f"{path} is not a readable checkpoint: {e}") from e
    if HEADER_KEY not in arrays:
        raise ContractError(f"{path} has no checkpoint header")

    header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode("utf-8"))
    sections = {"model": {}, "encoder": {}, "optim": {}}
    for key, value in arrays.items():
        section, _, name = key.partition("/")
        sections[section][name] = value

    ckpt = Checkpoint(
        **header,
        model_state=sections["model"],
        encoder_state=sections["encoder"] or None,
        optimizer_state=sections["optim"],
    )
    if stage is not None and ckpt.stage != stage:
        raise ContractError(f"{path} holds a '{ckpt.stage}' checkpoint, expected '{stage}'")
    return ckpt


# --- pair sets ---

def save_pairset(path: PathLike, pairs: PairSet) -> Path:
    metadata = json.dumps({
        "solver": pairs.solver.model_dump(mode="json"),
        "skipped": pairs.skipped,
        "mean_nfe": pairs.mean_nfe,
    }).encode("utf-8")
    header = PAIRSET_HEADER.pack(
        PAIRSET_MAGIC, PAIRSET_VERSION, pairs.dim, pairs.seq_len, pairs.count,
        bytes.fromhex(pairs.fingerprint), len(metadata),
    )
    columns = [pairs.x1, pairs.x0_hat]
    if pairs.tokens is not None:
        columns.append(pairs.tokens.astype(np.float64))
    records = np.ascontiguousarray(np.hstack(columns), dtype=RECORD_DTYPE)
    written = atomic_write_bytes(path, header + metadata + records.tobytes())
    logger.debug(f"Saved {pairs.count} pairs to {written}")
    return written


def load_pairset(path: PathLike, expected_fingerprint: Optional[str] = None) -> PairSet:
    """
    Read a PairSet file, refusing it when the generator fingerprint differs from the expected one.

    Raises:
        MissingPrerequisiteError: no file at path
        ContractError: malformed or truncated file
        FingerprintMismatchError: header fingerprint differs from expected_fingerprint
    """
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(str(path), "pair set")
    raw = path.read_bytes()
    if len(raw) < PAIRSET_HEADER.size:
        raise ContractError(f"{path} is too short to be a pair set")
    magic, version, dim, seq_len, count, digest, meta_len = PAIRSET_HEADER.unpack_from(raw)
    if magic != PAIRSET_MAGIC:
        raise ContractError(f"{path} is not a pair set (bad magic {magic!r})")
    if version != PAIRSET_VERSION:
        raise ContractError(f"{path}: unsupported pair set version {version}")

    fingerprint = digest.hex()
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(expected_fingerprint, fingerprint)

    offset = PAIRSET_HEADER.size
    metadata = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    width = 2 * dim + seq_len
    expected_bytes = count * width * RECORD_DTYPE.itemsize
    if len(raw) - offset != expected_bytes:
        raise ContractError(f"{path}: expected {expected_bytes} bytes of records, found {len(raw) - offset}")
    records = np.frombuffer(raw, dtype=RECORD_DTYPE, offset=offset).reshape(count, width).astype(np.float64)

    return PairSet(
        x1=records[:, :dim].copy(),
        x0_hat=records[:, dim:2 * dim].copy(),
        tokens=records[:, 2 * dim:].astype(np.int64) if seq_len else None,
        fingerprint=fingerprint,
        solver=SolverConfig.model_validate(metadata["solver"]),
        skipped=int(metadata.get("skipped", 0)),
        mean_nfe=float(metadata.get("mean_nfe", 0.0)),
    )


# --- CSV ---

def _savetxt(path: PathLike, rows: np.ndarray, header: Sequence[str], fmt: Union[str, Sequence[str]]) -> Path:
    buffer = io.StringIO()
    np.savetxt(buffer, rows, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    return atomic_write_text(path, buffer.getvalue())


def write_loss_csv(path: PathLike, records: Iterable[LossRecord]) -> Path:
    records = list(records)
    rows = np.array([[r.iteration, r.loss, r.beta, r.wall_time] for r in records], dtype=np.float64)
    return _savetxt(path, rows.reshape(-1, 4), ["iteration", "loss", "beta", "wall_time"],
                    ["%d", "%.17g", "%.17g", "%.6f"])


def read_loss_csv(path: PathLike) -> List[LossRecord]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [LossRecord(iteration=int(r[0]), loss=r[1], beta=r[2], wall_time=r[3]) for r in rows]


def write_samples_csv(path: PathLike, x: np.ndarray, tokens: Optional[np.ndarray] = None,
                      classes: Optional[np.ndarray] = None) -> Path:
    """Header row, one x column per dimension, then optional class and token columns"""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    columns, header, fmt = [x], [f"x{i + 1}" for i in range(x.shape[1])], ["%.17g"] * x.shape[1]
    if classes is not None:
        columns.append(np.asarray(classes).reshape(-1, 1))
        header.append("class")
        fmt.append("%d")
    if tokens is not None:
        tokens = np.asarray(tokens).reshape(x.shape[0], -1)
        columns.append(tokens)
        header.extend(f"tok{i + 1}" for i in range(tokens.shape[1]))
        fmt.extend(["%d"] * tokens.shape[1])
    return _savetxt(path, np.hstack(columns), header, fmt)


def read_samples_csv(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (x, tokens); tokens is None when the file has no token columns"""
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(str(path), "samples CSV")
    with path.open() as f:
        header = f.readline().strip().split(",")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    x_cols = [i for i, name in enumerate(header) if name.startswith("x")]
    tok_cols = [i for i, name in enumerate(header) if name.startswith("tok")]
    if not x_cols:
        raise ContractError(f"{path} has no coordinate columns")
    tokens = rows[:, tok_cols].astype(np.int64) if tok_cols else None
    return rows[:, x_cols], tokens


def write_trajectory_csv(path: PathLike, trajectory: Sequence[TrajectoryKnot]) -> Path:
    """Rows (sample_id, t, x1..xd) for every knot of every sample"""
    if not trajectory:
        raise ContractError("empty trajectory")
    first = np.atleast_2d(trajectory[0].x)
    n, dim = first.shape
    rows = []
    for knot in trajectory:
        x = np.atleast_2d(knot.x)
        rows.append(np.column_stack([np.arange(n), np.full(n, knot.t), x]))
    table = np.vstack(rows)
    # group by sample, knots in integration order
    order = np.argsort(table[:, 0], kind="stable")
    header = ["sample_id", "t"] + [f"x{i + 1}" for i in range(dim)]
    return _savetxt(path, table[order], header, ["%d"] + ["%.17g"] * (dim + 1))
