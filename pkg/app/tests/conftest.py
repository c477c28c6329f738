from typing import Any, Dict

import pytest

from app.core.config import RunConfig, load_run_config
from app.services import tensor_engine as te


@pytest.fixture(autouse=True)
def clean_tape():
    """Every test starts and ends with an empty tape"""
    te.clear_tape()
    yield
    te.clear_tape()


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


@pytest.fixture
def tiny_config(tmp_path):
    """Factory for a run config small enough to train every stage in seconds"""

    def make(**sections: Any) -> RunConfig:
        document: Dict[str, Any] = {
            "dataset": {"kind": "mixture_ring", "components": 4, "radius": 2.0, "sigma": 0.2},
            "model": {"teacher_width": 8, "student_width": 4, "depth": 1, "time_embed_dim": 4,
                      "condition_dim": 4, "encoder_embed_dim": 4, "encoder_channels": 3,
                      "encoder_layers": 1},
            "stages": {
                "teacher": {"iterations": 20, "batch_size": 32},
                "gen_pairs": {"pair_count": 64, "chunk_size": 16},
                "anneal_reflow": {"iterations": 10, "batch_size": 32, "K_a_step": 5},
                "distill": {"iterations": 10, "batch_size": 32},
            },
            "solver": {"kind": "rk45", "rtol": 1e-3, "atol": 1e-3},
            "metrics": {"n_samples": 64, "n_projections": 16, "probe_steps": 8, "efficiency_samples": 2},
            "output_dir": str(tmp_path / "run"),
            "log_interval": 5,
            "checkpoint_interval": 5,
        }
        return RunConfig.model_validate(_merge(document, sections))

    return make


@pytest.fixture
def config_file(tmp_path):
    """Write a JSON config document and return its path"""
    import json

    def write(document: Dict[str, Any], name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document))
        return path

    return write


@pytest.fixture
def default_config() -> RunConfig:
    return load_run_config()
