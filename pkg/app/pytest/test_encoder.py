import numpy as np
import pytest
from pydantic import ValidationError

from app.internal.autograd import Tensor, precision
from app.internal.autograd.engine import ParameterStore
from app.internal.config import (
    ContextConfig,
    ConvKind,
    ConvLayerSpec,
    EncoderConfig,
    EncoderGeometry,
    EncoderSection,
    TrainConfig,
    load_config,
)
from app.internal.model import ForwardContext, InputLengthError, ModelConfigError
from app.internal.model.encoder import (
    build_encoder,
    count_parameters,
    dynamic_conv,
    dynamic_kernels,
    encode,
    head_of_channel,
    init_encoder,
    lightweight_conv,
)
from app.internal.model.main import init_model, model_config_from

from .mock import TOY_PRESET


@pytest.fixture(autouse=True)
def float64():
    with precision("float64"):
        yield


def brute_force_depthwise(x, kernels, stride, left, right):
    """Reference loop; `kernels` is (t_out, channels, kernel) for each batch row."""
    batch, length, channels = x.shape
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    t_out, _, kernel = kernels.shape[1:]
    out = np.zeros((batch, t_out, channels))
    for b in range(batch):
        for t in range(t_out):
            for c in range(channels):
                out[b, t, c] = np.dot(kernels[b, t, c], xp[b, t * stride:t * stride + kernel, c])
    return out


@pytest.mark.parametrize(("k_tail", "channels"), [(0, 512), (2, 640), (4, 608)])
def test_base_encoder_widths(k_tail, channels):
    config = build_encoder(k_tail)
    assert len(config.layers) == 7
    assert all(layer.out_channels == channels for layer in config.layers)
    kinds = [layer.kind for layer in config.layers]
    assert kinds == ["standard"] * (7 - k_tail) + ["lightweight"] * k_tail
    assert config.layers[0].norm
    assert not any(layer.norm for layer in config.layers[1:])


def test_base_encoder_geometry():
    config = build_encoder()
    assert config.total_stride == 320
    assert config.receptive_field == 400
    assert 16000 / config.total_stride == 50.0


@pytest.mark.parametrize(("length", "frames"), [(16000, 49), (32000, 99), (400, 1), (399, 0)])
def test_base_encoder_output_length(length, frames):
    assert build_encoder().output_length(length) == frames


def test_output_length_matches_closed_form():
    config = build_encoder(2, ConvKind.dynamic)
    for length in range(400, 48001, 997):
        assert config.output_length(length) == (length - 400) // 320 + 1


def test_build_encoder_rejects_unknown_tail():
    with pytest.raises(ModelConfigError):
        build_encoder(3)
    with pytest.raises(ModelConfigError):
        build_encoder(2, ConvKind.standard)
    with pytest.raises(ModelConfigError):
        build_encoder(3, geometry=EncoderGeometry.toy)


def test_build_encoder_rejects_indivisible_heads():
    with pytest.raises(ModelConfigError):
        build_encoder(2, heads=7)


def test_encode_rejects_short_input():
    with pytest.raises(InputLengthError, match="400"):
        encode(ParameterStore(), build_encoder(), np.zeros((1, 399)))


@pytest.mark.parametrize("tail_kind", [ConvKind.lightweight, ConvKind.dynamic])
def test_toy_encoder_frames(tail_kind):
    rng = np.random.default_rng(0)
    plain = build_encoder(0, geometry=EncoderGeometry.toy)
    tailed = build_encoder(2, tail_kind, geometry=EncoderGeometry.toy, heads=4)
    wave = rng.standard_normal((2, 4000)) * 0.1
    expected = plain.output_length(4000)

    for config in (plain, tailed):
        store = ParameterStore()
        init_encoder(store, config, rng)
        out = encode(store, config, wave, ForwardContext(training=False))
        assert out.frames.shape == (2, expected, 32)
        assert out.num_frames == expected
        assert out.frame_rate == 16000 / config.total_stride
        assert np.all(np.isfinite(out.frames.data))


def test_encode_accepts_a_single_waveform():
    config = build_encoder(0, geometry=EncoderGeometry.toy)
    store = ParameterStore()
    init_encoder(store, config, np.random.default_rng(1))
    out = encode(store, config, np.random.default_rng(2).standard_normal(1000))
    assert out.frames.shape[0] == 1


def test_single_layer_counts():
    layer = dict(out_channels=512, kernel=10, stride=5)
    assert count_parameters(EncoderConfig(layers=[ConvLayerSpec(**layer)])) == 5120
    assert count_parameters(EncoderConfig(layers=[ConvLayerSpec(**layer, bias=True)])) == 5632


def test_bias_in_front_of_group_norm_is_rejected():
    with pytest.raises(ValidationError, match="group norm"):
        ConvLayerSpec(out_channels=4, kernel=2, stride=1, bias=True, norm=True)


def test_base_encoder_count():
    assert count_parameters(build_encoder()) == 4200448


@pytest.mark.parametrize("tail_kind", ["lightweight", "dynamic"])
def test_tailed_model_stays_near_the_baseline_size(tail_kind):
    baseline = count_parameters(model_config_from(TrainConfig()))
    tailed = count_parameters(model_config_from(TrainConfig(encoder=EncoderSection(k_tail=2, tail_kind=tail_kind))))
    assert abs(tailed / baseline - 1.0) <= 0.05


def test_conformer_context_matches_transformer_size():
    transformer = count_parameters(ContextConfig())
    conformer = count_parameters(ContextConfig(kind="conformer", num_blocks=14, model_dim=512, num_heads=8,
                                               ffn_dim=2048, depthwise_kernel=31))
    assert abs(conformer / transformer - 1.0) <= 0.10


def test_initialized_model_matches_its_count():
    model = model_config_from(load_config(TOY_PRESET))
    store = init_model(model, np.random.default_rng(0))
    assert store.num_parameters() == count_parameters(model)


def test_head_of_channel():
    np.testing.assert_array_equal(head_of_channel(8, 2, 2), [0, 0, 1, 1, 0, 0, 1, 1])
    np.testing.assert_array_equal(head_of_channel(8, 2, 4), [0, 0, 0, 0, 1, 1, 1, 1])


def test_lightweight_conv_with_flat_kernels_is_a_moving_average():
    x = np.random.default_rng(2).standard_normal((1, 9, 4))
    out = lightweight_conv(Tensor(x), Tensor(np.zeros((2, 3))), group_size=2).data
    padded = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    expected = (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize(("stride", "padding"), [(1, None), (2, (0, 0)), (3, (2, 1))])
def test_lightweight_conv_matches_brute_force(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 17, 6))
    raw = rng.standard_normal((3, 5))
    out = lightweight_conv(Tensor(x), Tensor(raw), group_size=2, stride=stride, padding=padding).data

    left, right = padding or (2, 2)
    soft = np.exp(raw) / np.exp(raw).sum(axis=-1, keepdims=True)
    per_channel = soft[head_of_channel(6, 3, 2)]
    t_out = (17 + left + right - 5) // stride + 1
    kernels = np.broadcast_to(per_channel, (2, t_out, 6, 5))
    np.testing.assert_allclose(out, brute_force_depthwise(x, kernels, stride, left, right), rtol=1e-10, atol=1e-12)


def test_lightweight_conv_rejects_indivisible_channels():
    with pytest.raises(ModelConfigError):
        lightweight_conv(Tensor(np.zeros((1, 5, 6))), Tensor(np.zeros((4, 3))), group_size=3)


def test_dynamic_kernels_are_distributions():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 11, 8)))
    weights = dynamic_kernels(x, Tensor(rng.standard_normal((8, 2 * 3))), heads=2, kernel=3, group_size=4)
    assert weights.shape == (2, 11, 8, 3)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(weights.data >= 0)


def test_dynamic_conv_with_zero_projection_is_lightweight():
    x = Tensor(np.random.default_rng(5).standard_normal((1, 12, 4)))
    dynamic = dynamic_conv(x, Tensor(np.zeros((4, 2 * 5))), heads=2, group_size=2).data
    light = lightweight_conv(x, Tensor(np.zeros((2, 5))), group_size=2).data
    np.testing.assert_allclose(dynamic, light, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
def test_dynamic_conv_matches_brute_force(stride):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 13, 4))
    projection = rng.standard_normal((4, 2 * 3))
    out = dynamic_conv(Tensor(x), Tensor(projection), heads=2, group_size=2, stride=stride, padding=(0, 0)).data

    t_out = (13 - 3) // stride + 1
    centre = np.arange(t_out) * stride + 1
    logits = (x[:, centre] @ projection).reshape(2, t_out, 2, 3)
    soft = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
    kernels = soft[:, :, head_of_channel(4, 2, 2)]
    np.testing.assert_allclose(out, brute_force_depthwise(x, kernels, stride, 0, 0), rtol=1e-10, atol=1e-12)


def test_tail_dropout_only_in_training():
    config = build_encoder(1, geometry=EncoderGeometry.toy, heads=4, dropout=0.5)
    store = ParameterStore()
    init_encoder(store, config, np.random.default_rng(7))
    wave = np.random.default_rng(8).standard_normal((1, 2000)) * 0.1
    a = encode(store, config, wave, ForwardContext(training=False)).frames.data
    b = encode(store, config, wave, ForwardContext(training=False)).frames.data
    c = encode(store, config, wave, ForwardContext(training=True, rng=np.random.default_rng(0))).frames.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
