import numpy as np
import pytest
from scipy import stats

from app.internal.autograd import ContractError, Tensor, ops, precision, record
from app.internal.autograd.engine import ParameterStore, backpropagate
from app.internal.config import QuantizerConfig
from app.internal.model import ForwardContext
from app.internal.model.quantizer import (
    anneal_temperature,
    codebook_perplexity,
    diversity_loss,
    gumbel_softmax,
    init_quantizer,
    quantize,
)


CONFIG = QuantizerConfig(num_groups=2, entries_per_group=4, target_dim=6)


@pytest.fixture(autouse=True)
def float64():
    with precision("float64"):
        yield


def built(config=CONFIG, d_in=5, seed=0):
    store = ParameterStore()
    init_quantizer(store, config, np.random.default_rng(seed), d_in)
    return store


def rows(n, d_in=5, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d_in)), requires_grad=True)


def test_eval_selects_the_argmax_codebook_entries():
    store = built()
    out = quantize(store, CONFIG, rows(7), 1.0, ForwardContext(training=False))
    codebook = store["quantizer.codebook"].data
    assert out.q.shape == (7, 6)
    assert out.codes.shape == (7, 2)
    np.testing.assert_array_equal(out.codes, out.probs.data.argmax(axis=-1))
    for r in range(7):
        expected = np.concatenate([codebook[g, out.codes[r, g]] for g in range(2)])
        np.testing.assert_array_equal(out.q.data[r], expected)


def test_training_output_is_made_of_codebook_entries():
    store = built()
    out = quantize(store, CONFIG, rows(9), 2.0, ForwardContext(training=True, rng=np.random.default_rng(2)))
    codebook = store["quantizer.codebook"].data
    for r in range(9):
        expected = np.concatenate([codebook[g, out.codes[r, g]] for g in range(2)])
        np.testing.assert_array_equal(out.q.data[r], expected)
    np.testing.assert_allclose(out.probs.data.sum(axis=-1), 1.0, atol=1e-12)


def test_fresh_quantizer_codes_follow_the_input_not_the_noise():
    config = QuantizerConfig(num_groups=2, entries_per_group=16, target_dim=8)
    store = built(config, d_in=32)
    z = rows(2000, d_in=32)
    noisy = quantize(store, config, z, 2.0, ForwardContext(training=True, rng=np.random.default_rng(3))).codes
    clean = quantize(store, config, z, 2.0, ForwardContext(training=False)).codes
    assert np.mean(noisy == clean) > 0.5


def test_gumbel_max_is_fair_between_equal_logits():
    soft = gumbel_softmax(Tensor(np.zeros((10000, 2))), 1.0, np.random.default_rng(3))
    count = int(np.sum(soft.data.argmax(axis=-1) == 0))
    assert abs(count - 5000) <= 200


def test_gumbel_max_samples_the_softmax_distribution():
    logits = np.log(np.linspace(1.0, 4.0, 16))
    expected = np.exp(logits) / np.exp(logits).sum()
    soft = gumbel_softmax(Tensor(np.tile(logits, (20000, 1))), 0.5, np.random.default_rng(4))
    observed = np.bincount(soft.data.argmax(axis=-1), minlength=16)
    assert stats.chisquare(observed, expected * 20000).pvalue > 0.001


def test_low_temperature_is_nearly_one_hot():
    soft = gumbel_softmax(Tensor(np.zeros((1000, 8))), 0.01, np.random.default_rng(5))
    assert np.mean(soft.data.max(axis=-1) >= 0.99) >= 0.9


def test_lower_temperature_sharpens_the_same_draw():
    logits = Tensor(np.random.default_rng(6).standard_normal((50, 8)))
    peaks = [gumbel_softmax(logits, t, np.random.default_rng(7)).data.max(axis=-1) for t in (2.0, 1.0, 0.5, 0.1)]
    for hotter, colder in zip(peaks, peaks[1:]):
        assert np.all(colder >= hotter)


@pytest.mark.parametrize("temperature", [0.0, -1.0])
def test_temperature_must_be_positive(temperature):
    with pytest.raises(ContractError):
        gumbel_softmax(Tensor(np.zeros((1, 4))), temperature, np.random.default_rng(0))
    with pytest.raises(ContractError):
        quantize(built(), CONFIG, rows(2), temperature)


def test_anneal_temperature():
    config = QuantizerConfig(temperature_start=2.0, temperature_floor=0.5, temperature_decay=0.999)
    assert anneal_temperature(0, config) == 2.0
    assert anneal_temperature(10**6, config) == 0.5
    assert anneal_temperature(693, config) == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ContractError):
        anneal_temperature(-1, config)


def test_perplexity_of_uniform_and_one_hot():
    np.testing.assert_allclose(codebook_perplexity(np.full((3, 2, 5), 0.2)), [5.0, 5.0])
    one_hot = np.zeros((4, 1, 5))
    one_hot[:, 0, 2] = 1.0
    np.testing.assert_allclose(codebook_perplexity(one_hot), [1.0])


def test_perplexity_of_a_skewed_distribution():
    p = np.array([0.7, 0.1, 0.1, 0.1])
    perplexity = codebook_perplexity(p.reshape(1, 1, 4))[0]
    assert perplexity == pytest.approx(np.exp(-np.sum(p * np.log(p))), rel=1e-12)
    assert perplexity == pytest.approx(2.56, abs=0.01)


def test_diversity_of_uniform_use_vanishes():
    probs = Tensor(np.full((6, 2, 4), 0.25))
    assert abs(float(diversity_loss(probs).data)) < 1e-4


def test_diversity_of_a_collapsed_codebook():
    probs = np.zeros((6, 1, 4))
    probs[:, 0, 1] = 1.0
    assert float(diversity_loss(Tensor(probs)).data) == pytest.approx(3 / 4, abs=1e-5)


def test_diversity_falls_toward_uniform_use():
    collapsed = np.zeros((1, 2, 4))
    collapsed[0, :, 0] = 1.0
    uniform = np.full((1, 2, 4), 0.25)
    losses = [float(diversity_loss(Tensor((1 - a) * collapsed + a * uniform)).data) for a in np.linspace(0, 1, 11)]
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


def test_straight_through_gradient_is_the_soft_gradient():
    store = built()
    z = rows(6)
    readout = np.random.default_rng(8).standard_normal((6, 6))
    ctx = ForwardContext(training=True, rng=np.random.default_rng(9))
    with record() as rec:
        loss = ops.sum(ops.mul(quantize(store, CONFIG, z, 0.7, ctx).q, readout))
    backpropagate(loss, rec, store)
    hard_grad = store["quantizer.logits.weight"].grad.copy()
    hard_z = z.grad.copy()

    store.zero_grad()
    z.zero_grad()
    with record() as rec:
        logits = ops.linear(z, store["quantizer.logits.weight"], store["quantizer.logits.bias"])
        soft = gumbel_softmax(ops.reshape(logits, (6, 2, 4)), 0.7, np.random.default_rng(9))
        chosen = ops.matmul(ops.transpose(soft, (1, 0, 2)), store["quantizer.codebook"])
        q = ops.reshape(ops.transpose(chosen, (1, 0, 2)), (6, 6))
        loss = ops.sum(ops.mul(q, readout))
    backpropagate(loss, rec, store)
    np.testing.assert_allclose(store["quantizer.logits.weight"].grad, hard_grad, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(z.grad, hard_z, rtol=1e-10, atol=1e-12)
