import numpy as np
import pytest

from app.internal.autograd import ContractError, Tensor, precision, record
from app.internal.autograd.engine import ParameterStore, backpropagate
from app.internal.config import HeadConfig, MaskConfig, load_config
from app.internal.model import DegenerateBatchError, ForwardContext
from app.internal.model.main import init_model, model_config_from, pretrain_loss
from app.internal.model.objective import (
    apply_mask,
    contrastive_loss,
    head_forward,
    indices_to_mask,
    init_head,
    sample_distractors,
    sample_mask,
)

from .mock import TOY_PRESET, utterance


@pytest.fixture(autouse=True)
def float64():
    with precision("float64"):
        yield


def unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_mask_indices_are_sorted_unique_and_in_range():
    rng = np.random.default_rng(0)
    config = MaskConfig(mask_prob=0.2, span_len=4)
    for length in (1, 5, 49, 300):
        indices = sample_mask(length, rng, config)
        assert indices.size >= 1
        assert np.all(np.diff(indices) > 0)
        assert indices.min() >= 0 and indices.max() < length


def test_mask_without_probability_is_empty():
    assert sample_mask(50, np.random.default_rng(1), MaskConfig(mask_prob=0.0)).size == 0


def test_mask_forces_one_span_when_no_start_is_drawn():
    config = MaskConfig(mask_prob=1e-12, span_len=10)
    for seed in range(30):
        indices = sample_mask(49, np.random.default_rng(seed), config)
        start = indices[0]
        np.testing.assert_array_equal(indices, np.arange(start, start + min(10, 49 - start)))


def test_masked_fraction_matches_its_expectation():
    config = MaskConfig(mask_prob=0.065, span_len=10)
    rng = np.random.default_rng(2)
    fraction = np.mean([sample_mask(100, rng, config).size / 100 for _ in range(2000)])
    t = np.arange(100)
    expected = np.mean(1.0 - (1.0 - 0.065) ** np.minimum(t + 1, 10))
    assert fraction == pytest.approx(expected, abs=0.015)


def test_mask_of_empty_sequence_is_an_error():
    with pytest.raises(ContractError):
        sample_mask(0, np.random.default_rng(0), MaskConfig())


def test_indices_to_mask_checks_range():
    np.testing.assert_array_equal(indices_to_mask([0, 2], 4), [True, False, True, False])
    with pytest.raises(ContractError):
        indices_to_mask([4], 4)


def test_apply_mask_replaces_only_masked_rows():
    frames = Tensor(np.random.default_rng(3).standard_normal((2, 6, 3)))
    embedding = Tensor(np.array([7.0, 8.0, 9.0]))
    mask = np.zeros((2, 6), dtype=bool)
    mask[0, [1, 4]] = True
    mask[1, 5] = True
    out = apply_mask(frames, mask, embedding).data
    np.testing.assert_array_equal(out[mask], np.tile(embedding.data, (3, 1)))
    np.testing.assert_array_equal(out[~mask], frames.data[~mask])


def test_apply_mask_accepts_indices_and_empty_masks():
    frames = Tensor(np.random.default_rng(4).standard_normal((1, 5, 2)))
    embedding = Tensor(np.zeros(2))
    out = apply_mask(frames, [0, 3], embedding).data
    assert not out[0, [0, 3]].any()
    assert apply_mask(frames, np.zeros((1, 5), dtype=bool), embedding) is frames
    with pytest.raises(ContractError):
        apply_mask(frames, np.zeros((1, 4), dtype=bool), embedding)


def test_distractors_come_from_the_other_masked_positions():
    rng = np.random.default_rng(5)
    masked = np.array([2, 3, 4, 9, 10])
    picks = sample_distractors(masked, 4, 50, rng)
    assert picks.shape == (50,)
    assert set(picks) <= {2, 3, 9, 10}


def test_lone_masked_position_has_no_distractors():
    assert sample_distractors(np.array([7]), 7, 10, np.random.default_rng(0)) is None


def test_distractor_contract():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        sample_distractors(np.array([1, 2]), 1, 0, rng)
    with pytest.raises(ContractError):
        sample_distractors(np.array([1, 2]), 5, 3, rng)


def test_zero_depth_head_is_identity():
    head = HeadConfig(num_layers=0, hidden_dim=4, output_dim=4)
    store = ParameterStore()
    init_head(store, head, np.random.default_rng(0), 4, "heads.context")
    assert store.num_parameters() == 0
    x = Tensor(np.ones((3, 4)))
    assert head_forward(store, head, x) is x


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_head_with_zero_output_layer_is_zero(depth):
    head = HeadConfig(num_layers=depth, hidden_dim=6, output_dim=4)
    store = ParameterStore()
    init_head(store, head, np.random.default_rng(1), 4, "heads.target")
    store["heads.target.out.weight"].data[...] = 0.0
    x = Tensor(np.random.default_rng(2).standard_normal((5, 4)))
    out = head_forward(store, head, x, ForwardContext(training=True), prefix="heads.target")
    assert out.shape == (5, 4)
    assert not out.data.any()


def test_head_in_training_needs_two_rows():
    head = HeadConfig(num_layers=2, hidden_dim=4, output_dim=4)
    store = ParameterStore()
    init_head(store, head, np.random.default_rng(3), 4, "heads.context")
    with pytest.raises(ContractError):
        head_forward(store, head, Tensor(np.ones((1, 4))), ForwardContext(training=True))


def test_contrastive_loss_closed_form():
    c = np.zeros((1, 101))
    c[0, 0] = 1.0
    negatives = np.eye(101)[1:][None]
    loss, correct = contrastive_loss(Tensor(c), Tensor(c.copy()), Tensor(negatives), 0.1)
    assert float(loss.data) == pytest.approx(np.log1p(100 * np.exp(-10.0)), abs=1e-9)
    assert correct.tolist() == [True]


def test_contrastive_loss_of_indistinguishable_candidates():
    c = np.random.default_rng(4).standard_normal((3, 8))
    loss, correct = contrastive_loss(Tensor(c), Tensor(c.copy()), Tensor(c.copy()[:, None]), 0.1)
    assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-12)
    assert not correct.any()


def test_contrastive_loss_of_random_vectors():
    rng = np.random.default_rng(5)
    losses = []
    for _ in range(10):
        loss, _ = contrastive_loss(Tensor(unit_rows(rng, 100, 1024)), Tensor(unit_rows(rng, 100, 1024)),
                                   Tensor(unit_rows(rng, 100, 100, 1024)), 0.1)
        losses.append(float(loss.data))
    assert np.mean(losses) == pytest.approx(np.log(101.0), abs=0.1)


def test_contrastive_loss_ignores_vector_scale():
    rng = np.random.default_rng(6)
    c, pos, negs = rng.standard_normal((4, 5)), rng.standard_normal((4, 5)), rng.standard_normal((4, 3, 5))
    base, _ = contrastive_loss(Tensor(c), Tensor(pos), Tensor(negs), 0.1)
    scaled, _ = contrastive_loss(Tensor(3.0 * c), Tensor(0.5 * pos), Tensor(7.0 * negs), 0.1)
    assert float(scaled.data) == pytest.approx(float(base.data), abs=1e-12)


def test_contrastive_loss_ignores_distractor_order():
    rng = np.random.default_rng(7)
    c, pos, negs = rng.standard_normal((4, 5)), rng.standard_normal((4, 5)), rng.standard_normal((4, 6, 5))
    base, _ = contrastive_loss(Tensor(c), Tensor(pos), Tensor(negs), 0.1)
    shuffled, _ = contrastive_loss(Tensor(c), Tensor(pos), Tensor(negs[:, ::-1].copy()), 0.1)
    assert float(shuffled.data) == pytest.approx(float(base.data), abs=1e-12)


def test_accuracy_of_random_vectors_is_chance():
    rng = np.random.default_rng(8)
    _, correct = contrastive_loss(Tensor(unit_rows(rng, 1000, 64)), Tensor(unit_rows(rng, 1000, 64)),
                                  Tensor(unit_rows(rng, 1000, 10, 64)), 0.1)
    assert correct.mean() == pytest.approx(1 / 11, abs=0.05)


def test_contrastive_loss_needs_positive_temperature():
    x = Tensor(np.ones((1, 2)))
    with pytest.raises(ContractError):
        contrastive_loss(x, x, Tensor(np.ones((1, 1, 2))), 0.0)


def toy_batch(seed=0):
    return np.stack([utterance(seed).samples, utterance(seed + 1).samples])


def test_untrained_toy_loss_is_near_chance():
    config = load_config(TOY_PRESET, ["heads.layers=0"])
    model = model_config_from(config)
    store = init_model(model, np.random.default_rng(0))
    batch = toy_batch()
    out = pretrain_loss(store, model, config, batch, batch, np.random.default_rng(1), 2.0, training=False)
    assert abs(float(out.contrastive.data) - np.log(11.0)) <= 1.0
    assert out.positions > 0
    assert 0.0 <= out.masked_accuracy <= 1.0
    assert out.perplexity.shape == (2,)
    expected = float(out.contrastive.data) + config.quantizer.diversity_weight * float(out.diversity.data)
    assert float(out.total.data) == pytest.approx(expected, rel=1e-12)


def test_every_toy_parameter_gets_a_gradient():
    config = load_config(TOY_PRESET, ["heads.layers=2"])
    model = model_config_from(config)
    store = init_model(model, np.random.default_rng(2))
    batch = toy_batch(3)
    with record() as rec:
        out = pretrain_loss(store, model, config, batch, batch, np.random.default_rng(4), 2.0)
    backpropagate(out.total, rec, store)
    for name, tensor in store.params.items():
        assert tensor.grad is not None and np.any(tensor.grad != 0), name


def test_batch_without_distractors_is_degenerate():
    config = load_config(TOY_PRESET, ["heads.layers=0", "mask.mask_prob=1e-12", "mask.span_len=1"])
    model = model_config_from(config)
    store = init_model(model, np.random.default_rng(5))
    batch = toy_batch(6)
    with pytest.raises(DegenerateBatchError) as e:
        pretrain_loss(store, model, config, batch, batch, np.random.default_rng(7), 2.0)
    assert e.value.skipped == 2


def test_degenerate_batch_leaves_batch_norm_statistics_alone():
    config = load_config(TOY_PRESET, ["heads.layers=2", "mask.mask_prob=1e-12", "mask.span_len=1"])
    model = model_config_from(config)
    store = init_model(model, np.random.default_rng(5))
    before = {path: buffer.copy() for path, buffer in store.buffers.items()}
    assert before
    with pytest.raises(DegenerateBatchError):
        pretrain_loss(store, model, config, toy_batch(6), toy_batch(6), np.random.default_rng(7), 2.0)
    for path, buffer in store.buffers.items():
        np.testing.assert_array_equal(buffer, before[path], err_msg=path)
