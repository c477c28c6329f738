import numpy as np
import pytest

from app.core.config import ModelConfig
from app.core.errors import ContractError, DomainError, ShapeMismatchError
from app.services import tensor_engine as te
from app.services.networks import (
    ConditionEncoder,
    DepthwiseSeparableConv1d,
    Linear,
    ResidualBlock,
    SinusoidalTimeEmbedding,
    VelocityModel,
    embed_time,
    encoder_from_spec,
    parameter_report,
    trunk_parameter_count,
    velocity_parameter_count,
)
from app.services.tensor_engine import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def encoder(rng):
    return ConditionEncoder(vocab_size=4, embed_dim=3, channels=5, layers=2, kernel_size=3,
                            seq_len=2, condition_dim=6, rng=rng)


def test_linear_count_matches_parameters(rng):
    layer = Linear(3, 7, rng)
    assert layer.num_parameters() == Linear.count(3, 7) == 28


def test_residual_block_count(rng):
    assert ResidualBlock(8, 0, rng).num_parameters() == ResidualBlock.count(8, 0) == 3 * (64 + 8)
    assert ResidualBlock(8, 4, rng).num_parameters() == ResidualBlock.count(8, 4) == 3 * 72 + 40


def test_velocity_parameter_count_formula():
    model = VelocityModel(data_dim=2, width=8, depth=3, time_embed_dim=4, condition_dim=5)
    assert model.num_parameters() == velocity_parameter_count(8, 3, 2, 5, 4)
    assert model.trunk_parameters() == trunk_parameter_count(8, 3, 5)


def test_parameter_report_trunk_ratio():
    """The default student has well under 40% of the teacher's trunk"""
    report = parameter_report(ModelConfig(), data_dim=2)
    assert report.trunk_ratio < 0.4
    assert report.student_trunk == trunk_parameter_count(24, 4)
    assert report.encoder_total is None


def test_parameter_report_conditional_encoder():
    report = parameter_report(ModelConfig(), data_dim=2, conditional=True)
    assert report.encoder_total is not None
    assert report.encoder_dense_equivalent > report.encoder_total


def test_dsconv_count(rng):
    conv = DepthwiseSeparableConv1d(3, 5, 3, rng)
    assert conv.weight_count() == 3 * 3 + 3 * 5
    assert conv.num_parameters() == conv.weight_count() + 5
    assert conv.dense_weight_count() == 3 * 5 * 3


def test_dsconv_matches_direct_convolution(rng):
    conv = DepthwiseSeparableConv1d(2, 3, 3, rng)
    conv.bias.values[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 4))

    out = conv(Tensor(x[None])).values[0]

    padded = np.pad(x, ((0, 0), (1, 1)))
    depthwise = np.stack([
        sum(padded[c, j:j + 4] * conv.depthwise.values[c, j] for j in range(3)) for c in range(2)
    ])
    expected = conv.pointwise.values.T @ depthwise + conv.bias.values[:, None]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_dsconv_channel_mismatch(rng):
    conv = DepthwiseSeparableConv1d(2, 3, 3, rng)
    with pytest.raises(ShapeMismatchError):
        conv(Tensor(np.ones((1, 3, 4))))


def test_embed_time_values():
    emb = SinusoidalTimeEmbedding(4, max_period=100.0)
    np.testing.assert_allclose(embed_time(0.0, emb), [0.0, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(embed_time(0.5, emb),
                               [np.sin(0.5), np.sin(0.05), np.cos(0.5), np.cos(0.05)], rtol=1e-12)

    # dim 2 has a single unit frequency
    np.testing.assert_allclose(embed_time(0.5, SinusoidalTimeEmbedding(2)), [np.sin(0.5), np.cos(0.5)])
    assert embed_time(np.array([0.1, 0.9]), emb).shape == (2, 4)


def test_embed_time_rejects_out_of_range():
    with pytest.raises(DomainError):
        embed_time(1.5, SinusoidalTimeEmbedding(4))


def test_fresh_model_is_zero_field():
    model = VelocityModel(data_dim=3, width=8, depth=2, time_embed_dim=4)
    out = model(Tensor(np.random.default_rng(0).standard_normal((5, 3))), np.linspace(0, 1, 5))
    np.testing.assert_array_equal(out.values, np.zeros((5, 3)))


def test_affine_path_is_time_conditioned_scale_and_offset():
    """With the head at zero the field is exactly scale(t) * x + offset(t)"""
    model = VelocityModel(data_dim=1, width=4, depth=2, time_embed_dim=4)
    model.affine.bias.values[...] = [0.5, -2.0]
    x = np.linspace(-3.0, 7.0, 11)[:, None]
    out = model(Tensor(x), 0.3).values
    np.testing.assert_allclose(out, 0.5 * x - 2.0, atol=1e-12)

    x_tensor = Tensor(x, requires_grad=True)
    te.backward(model(x_tensor, 0.3).sum())
    np.testing.assert_allclose(x_tensor.grad, np.full_like(x, 0.5))


def test_velocity_single_point_shape():
    model = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4)
    assert model(Tensor([1.0, 2.0]), 0.3).shape == (2,)


def test_velocity_condition_contract():
    conditional = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4, condition_dim=3)
    with pytest.raises(ContractError):
        conditional(Tensor(np.ones((2, 2))), 0.5)

    plain = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4)
    with pytest.raises(ContractError):
        plain(Tensor(np.ones((2, 2))), 0.5, Tensor(np.ones((2, 3))))


def test_velocity_shape_errors():
    model = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4)
    with pytest.raises(ShapeMismatchError):
        model(Tensor(np.ones((2, 3))), 0.5)
    with pytest.raises(ShapeMismatchError):
        model(Tensor(np.ones((2, 2))), np.array([0.1, 0.2, 0.3]))


def test_encoder_output_shapes(encoder):
    assert encoder(np.array([[0, 1], [3, 2], [1, 1]])).shape == (3, 6)
    assert encoder(np.array([2, 3])).shape == (6,)


def test_encoder_rejects_bad_tokens(encoder):
    with pytest.raises(DomainError):
        encoder(np.array([[0, 4]]))
    with pytest.raises(DomainError):
        encoder(np.array([[0, -1]]))
    with pytest.raises(ContractError):
        encoder(np.array([[0, 1, 2]]))


def test_encoder_gradients_reach_table(encoder):
    te.backward(encoder(np.array([[0, 1], [2, 3]])).square().sum())
    assert encoder.table.grad is not None
    assert encoder.table.grad.shape == (4, 3)
    assert encoder.convs[0].depthwise.grad is not None


def test_encoder_from_spec_rebuilds_architecture(encoder):
    clone = encoder_from_spec(encoder.spec())
    clone.load_state_dict(encoder.state_dict())
    tokens = np.array([[1, 2]])
    np.testing.assert_array_equal(clone(tokens).values, encoder(tokens).values)


def test_state_dict_roundtrip_and_copy():
    model = VelocityModel(data_dim=2, width=4, depth=2, time_embed_dim=4, seed=3)
    clone = model.copy()
    for (name, a), (_, b) in zip(model.named_parameters(), clone.named_parameters()):
        np.testing.assert_array_equal(a.values, b.values, err_msg=name)

    # copies do not share storage
    clone.head.bias.values[...] = 1.0
    assert not np.any(model.head.bias.values)


def test_load_state_dict_mismatch():
    model = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4)
    state = model.state_dict()
    state.pop("head.bias")
    with pytest.raises(ContractError):
        model.load_state_dict(state)

    wider = VelocityModel(data_dim=2, width=5, depth=1, time_embed_dim=4)
    with pytest.raises(ShapeMismatchError):
        model.load_state_dict(wider.state_dict())


def test_freeze_stops_recording():
    model = VelocityModel(data_dim=2, width=4, depth=1, time_embed_dim=4)
    model.freeze()
    out = model(Tensor(np.ones((2, 2))), 0.5)
    assert not out.requires_grad
    assert all(not p.requires_grad for p in model.parameters())
