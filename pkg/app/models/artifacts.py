from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import SolverConfig


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class DataBatch(ArrayModel):
    """Samples from a data distribution, with token conditions for cond_seq"""
    x0: np.ndarray = Field(..., description="Data points, shape (n, dim)")
    tokens: Optional[np.ndarray] = Field(None, description="Token sequences, shape (n, seq_len)")
    classes: Optional[np.ndarray] = Field(None, description="Mixture component per sample")

    def __len__(self) -> int:
        return int(self.x0.shape[0])


class PairSet(ArrayModel):
    """Noise/endpoint couplings (x1, x0_hat, c) produced by integrating a trained model"""
    x1: np.ndarray
    x0_hat: np.ndarray
    tokens: Optional[np.ndarray] = None
    fingerprint: str = Field(..., description="SHA-256 fingerprint of the generating model")
    solver: SolverConfig
    skipped: int = 0
    mean_nfe: float = 0.0

    @property
    def count(self) -> int:
        return int(self.x1.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x1.shape[1])

    @property
    def seq_len(self) -> int:
        return 0 if self.tokens is None else int(self.tokens.shape[1])


class LossRecord(BaseModel):
    iteration: int
    loss: float
    beta: float = 0.0
    wall_time: float


class Checkpoint(ArrayModel):
    """Everything needed to resume a stage or to sample from its model"""
    stage: str
    iteration: int
    model_spec: Dict[str, Any]
    model_state: Dict[str, np.ndarray]
    encoder_spec: Optional[Dict[str, Any]] = None
    encoder_state: Optional[Dict[str, np.ndarray]] = None
    optimizer_state: Dict[str, np.ndarray] = Field(default_factory=dict)
    rng_state: Dict[str, Any] = Field(default_factory=dict)
    config_hash: str = ""
    fingerprint: str = ""
    extra: Dict[str, Any] = Field(default_factory=dict)
    loss_log: List[LossRecord] = Field(default_factory=list)
