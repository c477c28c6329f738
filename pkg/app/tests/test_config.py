from pathlib import Path

import pytest

from app.core.config import apply_overrides, config_hash, load_run_config
from app.core.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def test_defaults():
    cfg = load_run_config()
    assert cfg.model.student_width < cfg.model.teacher_width
    assert cfg.solver.kind == "rk45"
    assert cfg.seeds.eval == 5


@pytest.mark.parametrize("name", ["gauss_oracle.json", "mixture_ring.json", "cond_seq.json"])
def test_shipped_configs_load(name):
    cfg = load_run_config(CONFIG_DIR / name)
    assert cfg.stages.anneal_reflow.K_a_step <= cfg.stages.anneal_reflow.iterations


def test_overrides_win_over_file(config_file):
    path = config_file({"stages": {"teacher": {"iterations": 10}}})
    cfg = load_run_config(path, {"stages.teacher.iterations": "25", "solver.kind": "euler"})
    assert cfg.stages.teacher.iterations == 25
    assert cfg.solver.kind == "euler"


def test_override_through_scalar_fails():
    with pytest.raises(ConfigError):
        apply_overrides({"output_dir": "runs"}, {"output_dir.sub": 1})


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"model": {"depth": 2,}}')
    with pytest.raises(ConfigError, match="line 1"):
        load_run_config(path)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/config.json")


def test_validation_errors_name_the_key(config_file):
    with pytest.raises(ConfigError, match="model.depth"):
        load_run_config(config_file({"model": {"depth": 0}}))


def test_anneal_step_bounded_by_iterations(config_file):
    path = config_file({"stages": {"anneal_reflow": {"iterations": 10, "K_a_step": 20}}})
    with pytest.raises(ConfigError, match="K_a_step"):
        load_run_config(path)


def test_gauss_mean_length(config_file):
    with pytest.raises(ConfigError):
        load_run_config(config_file({"dataset": {"kind": "gauss_nd", "dim": 2, "mean": [1.0]}}))


def test_config_hash_tracks_values():
    a = load_run_config()
    b = load_run_config(overrides={"stages.teacher.learning_rate": 0.002})
    assert config_hash(a) == config_hash(load_run_config())
    assert config_hash(a) != config_hash(b)
