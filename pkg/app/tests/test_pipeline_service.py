from unittest.mock import patch

import numpy as np
import pytest

from app.core.config import TrainStageConfig
from app.core.errors import (
    ContractError,
    DivergenceError,
    IntegrationError,
    MissingPrerequisiteError,
    NumericFaultError,
    StageFailureError,
)
from app.services import flow_core
from app.services.artifact_store import load_checkpoint, load_pairset, read_loss_csv
from app.services.pipeline_service import ANNEAL, DISTILL, ONE_STEP, TEACHER, PipelineService, _stage_learning_rate

CONDITIONAL = {"dataset": {"kind": "cond_seq", "components": 4, "radius": 2.0, "sigma": 0.2}}


def test_zero_iteration_teacher(tiny_config):
    """A zero-iteration run saves the initialized model with an empty loss log"""
    service = PipelineService(tiny_config(stages={"teacher": {"iterations": 0}}))
    ckpt = service.train_teacher()

    assert ckpt.iteration == 0
    assert ckpt.loss_log == []
    assert ckpt.extra["complete"] is True
    flow, _ = service.load_flow(TEACHER)
    assert not np.any(flow.velocity(np.ones((3, 2)), 0.5).values)
    assert (service.output_dir / "resolved_config.json").exists()


def test_teacher_loss_log_and_csv(tiny_config):
    service = PipelineService(tiny_config())
    ckpt = service.train_teacher()

    assert [r.iteration for r in ckpt.loss_log] == list(range(20))
    assert all(r.beta == 0.0 for r in ckpt.loss_log)
    records = read_loss_csv(service.loss_csv_path(TEACHER))
    assert [r.loss for r in records] == [r.loss for r in ckpt.loss_log]


def test_stage_ordering(tiny_config):
    service = PipelineService(tiny_config())
    with pytest.raises(MissingPrerequisiteError):
        service.generate_pairs()
    with pytest.raises(MissingPrerequisiteError):
        service.train_anneal_reflow()
    with pytest.raises(MissingPrerequisiteError):
        service.train_distill()
    with pytest.raises(MissingPrerequisiteError):
        service.evaluate(DISTILL)


def test_anneal_needs_teacher_pairs(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()
    with pytest.raises(MissingPrerequisiteError):
        service.train_anneal_reflow()


def test_resume_reproduces_loss_sequence(tiny_config, tmp_path):
    """Stopping after 10 iterations and resuming gives the uninterrupted run bit for bit"""
    full = PipelineService(tiny_config(output_dir=str(tmp_path / "full"))).train_teacher()

    PipelineService(tiny_config(output_dir=str(tmp_path / "split"),
                                stages={"teacher": {"iterations": 10}})).train_teacher()
    resumed = PipelineService(tiny_config(output_dir=str(tmp_path / "split"))).train_teacher(resume=True)

    assert [r.loss for r in resumed.loss_log] == [r.loss for r in full.loss_log]
    for name, values in full.model_state.items():
        np.testing.assert_array_equal(resumed.model_state[name], values)


def test_training_is_deterministic(tiny_config, tmp_path):
    a = PipelineService(tiny_config(output_dir=str(tmp_path / "a"))).train_teacher()
    b = PipelineService(tiny_config(output_dir=str(tmp_path / "b"))).train_teacher()
    assert a.fingerprint == b.fingerprint


def test_divergence_aborts_with_last_checkpoint(tiny_config):
    service = PipelineService(tiny_config())
    with patch("app.services.pipeline_service.flow_core.rf_loss", side_effect=NumericFaultError("nan loss")):
        with pytest.raises(DivergenceError) as excinfo:
            service.train_teacher()
    assert excinfo.value.stage == TEACHER
    assert excinfo.value.iteration == 0


def test_generate_pairs_deterministic_and_thread_independent(tiny_config, tmp_path):
    service = PipelineService(tiny_config())
    service.train_teacher()
    first = service.generate_pairs()
    again = service.generate_pairs()
    np.testing.assert_array_equal(first.x0_hat, again.x0_hat)
    assert first.count == 64
    assert first.skipped == 0

    threaded = PipelineService(tiny_config(threads=3), write_config=False)
    pairs = threaded.generate_pairs()
    np.testing.assert_array_equal(pairs.x0_hat, first.x0_hat)

    on_disk = load_pairset(service.pairs_path(TEACHER))
    assert on_disk.fingerprint == load_checkpoint(service.checkpoint_path(TEACHER)).fingerprint


def test_pair_generation_skip_limit(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()
    with patch("app.services.pipeline_service.solve", side_effect=IntegrationError("budget", step=3)):
        with pytest.raises(StageFailureError):
            service.generate_pairs()


def test_conditional_stages_keep_teacher_encoder(tiny_config):
    """The student reads the teacher's encoder unchanged, and a zero-iteration distill is the annealed student"""
    service = PipelineService(tiny_config(stages={"distill": {"iterations": 0}}, **CONDITIONAL))
    teacher = service.train_teacher()
    service.generate_pairs()
    annealed = service.train_anneal_reflow()

    for name, values in teacher.encoder_state.items():
        np.testing.assert_array_equal(annealed.encoder_state[name], values)
    assert [round(r.beta, 6) for r in annealed.loss_log[:6]] == [1.0, 0.8, 0.6, 0.4, 0.2, 0.0]

    distilled = service.train_distill()
    for name, values in annealed.model_state.items():
        np.testing.assert_array_equal(distilled.model_state[name], values)
    assert distilled.extra["source"] == ANNEAL
    assert service.pairs_path(ANNEAL).exists()


def test_sample_and_evaluate(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()

    result = service.sample(TEACHER, 16, ONE_STEP, trajectory=True)
    assert result.x.shape == (16, 2)
    assert result.report.nfe == 1
    assert [knot.t for knot in result.report.trajectory] == [1.0, 0.0]

    report = service.evaluate(TEACHER, ONE_STEP)
    assert report.mean_nfe == 1.0
    assert report.n_samples == 64
    assert service.metrics_path(TEACHER, ONE_STEP).exists()
    assert service.metrics_path(TEACHER, ONE_STEP).name == "metrics_teacher_euler1.json"


def test_sample_from_checkpoint_file(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()
    by_stage = service.sample(TEACHER, 8, ONE_STEP)
    by_file = service.sample(DISTILL, 8, ONE_STEP, checkpoint=service.checkpoint_path(TEACHER))
    np.testing.assert_array_equal(by_stage.x, by_file.x)


def test_evaluate_samples_dimension(tiny_config):
    service = PipelineService(tiny_config())
    report = service.evaluate_samples(service.reference_data(100))
    assert report.frechet_gauss <= 1e-10
    with pytest.raises(ContractError):
        service.evaluate_samples(np.zeros((10, 3)))


def test_run_all_writes_reports(tiny_config):
    service = PipelineService(tiny_config())
    reports = service.run_all()

    assert set(reports) == {"teacher_rk45", "distill_euler1", "distill_euler4"}
    assert reports["distill_euler1"].mean_nfe == 1.0
    assert reports["distill_euler4"].mean_nfe == 4.0
    for stage in (TEACHER, ANNEAL, DISTILL):
        assert load_checkpoint(service.checkpoint_path(stage)).extra["complete"]


def test_evaluate_checkpoint_file(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()
    by_stage = service.evaluate(TEACHER, ONE_STEP, write=False)
    by_file = service.evaluate(DISTILL, ONE_STEP, write=False, checkpoint=service.checkpoint_path(TEACHER))

    assert by_file.frechet_gauss == by_stage.frechet_gauss
    assert by_file.straightness == by_stage.straightness
    assert by_file.config["stage"] == TEACHER


def test_student_pairs_regenerated_when_solver_changes(tiny_config):
    service = PipelineService(tiny_config())
    service.train_teacher()
    service.generate_pairs()
    service.train_anneal_reflow()
    service.generate_pairs(ANNEAL)

    with patch.object(service, "generate_pairs") as regenerate:
        service._student_pairs(ANNEAL, 64)
    regenerate.assert_not_called()

    euler = PipelineService(tiny_config(solver={"kind": "euler", "euler_steps": 2}))
    pairs = euler._student_pairs(ANNEAL, 64)
    assert pairs.solver.kind == "euler"
    assert pairs.mean_nfe == 2.0
    assert load_pairset(euler.pairs_path(ANNEAL)).solver.kind == "euler"


def test_distill_two_step_term_draws_fresh_noise(tiny_config):
    service = PipelineService(tiny_config(stages={"distill": {"iterations": 2}}))
    service.train_teacher()
    service.generate_pairs()
    service.train_anneal_reflow()

    with patch("app.services.flow_core.fg_distill_loss", wraps=flow_core.fg_distill_loss) as loss:
        service.train_distill()
    pairs = service.load_pairs(ANNEAL)
    first, second = (call.kwargs["x1_two_step"] for call in loss.call_args_list)
    assert first.shape == (32, 2)
    assert not np.array_equal(first, second)
    assert not np.isin(first, pairs.x1).any()


def test_block_weight_decay_shrinks_residual_blocks(tiny_config, tmp_path):
    plain = PipelineService(tiny_config())
    plain.train_teacher()
    decayed = PipelineService(tiny_config(stages={"teacher": {"block_weight_decay": 100.0}},
                                          output_dir=str(tmp_path / "decayed")))
    decayed.train_teacher()

    plain_fc1 = plain.load_flow(TEACHER)[0].velocity.blocks[0].fc1.weight.values
    decayed_fc1 = decayed.load_flow(TEACHER)[0].velocity.blocks[0].fc1.weight.values
    # 20 steps at lr 1e-3: the decay alone scales the weights by 0.9 ** 20
    assert np.abs(decayed_fc1).mean() < 0.5 * np.abs(plain_fc1).mean()


def test_learning_rate_halving():
    stage_cfg = TrainStageConfig(learning_rate=1e-3, lr_halve_at=10)
    assert _stage_learning_rate(stage_cfg, 9) == 1e-3
    assert _stage_learning_rate(stage_cfg, 10) == 5e-4
    assert _stage_learning_rate(TrainStageConfig(learning_rate=1e-3), 10_000) == 1e-3
