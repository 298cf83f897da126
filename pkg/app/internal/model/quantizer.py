"""Gumbel-softmax product quantizer."""
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from scipy.special import entr

from app.internal.autograd import ContractError, Tensor, ops

from . import ForwardContext


log = getLogger("SSL")

# keeps log() finite for codes nobody picks
DIVERSITY_EPS = 1e-7


@dataclass
class QuantizeOutput:
    # (rows, num_groups * code_dim)
    q: Tensor
    # (rows, num_groups, entries) soft assignment, noise free
    probs: Tensor
    # (num_groups,)
    perplexity: np.ndarray
    # (rows, num_groups) chosen entries
    codes: np.ndarray


def init_quantizer(store, config, rng, d_in, prefix="quantizer"):
    gv = config.num_groups * config.entries_per_group
    # logits have variance d_in on layer-normed input
    store.add(f"{prefix}.logits.weight", rng.standard_normal((d_in, gv)))
    store.add(f"{prefix}.logits.bias", np.zeros(gv))
    store.add(f"{prefix}.codebook",
              rng.uniform(0.0, 1.0, size=(config.num_groups, config.entries_per_group, config.code_dim)))


def anneal_temperature(step, config):
    if step < 0:
        raise ContractError(f"step {step} is negative")
    return max(config.temperature_floor, config.temperature_start * config.temperature_decay ** step)


def gumbel_noise(rng, shape):
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, temperature, rng):
    """softmax((logits + Gumbel noise) / temperature) over the last axis."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    noisy = ops.add(logits, Tensor(gumbel_noise(rng, logits.shape), dtype=logits.data.dtype))
    return ops.softmax(ops.mul(noisy, 1.0 / temperature), axis=-1)


def one_hot(indices, depth, dtype):
    out = np.zeros(indices.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def quantize(store, config, z, temperature, ctx=None, prefix="quantizer"):
    """Map rows of `z` (rows, d) to concatenated codebook entries.

    Training draws Gumbel noise and uses the straight-through estimator: the
    forward value is the hard one-hot selection, the gradient is the soft
    one's. Evaluation takes the noise-free argmax.
    """
    ctx = ctx or ForwardContext(training=False)
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    rows = z.shape[0]
    groups, entries = config.num_groups, config.entries_per_group

    logits = ops.linear(z, store[f"{prefix}.logits.weight"], store[f"{prefix}.logits.bias"])
    logits = ops.reshape(logits, (rows, groups, entries))
    probs = ops.softmax(logits, axis=-1)

    if ctx.training:
        soft = gumbel_softmax(logits, temperature, ctx.rng)
        codes = soft.data.argmax(axis=-1)
        selection = ops.straight_through(one_hot(codes, entries, soft.data.dtype), soft)
    else:
        codes = logits.data.argmax(axis=-1)
        selection = Tensor(one_hot(codes, entries, logits.data.dtype), dtype=logits.data.dtype)

    # (groups, rows, entries) @ (groups, entries, code_dim)
    chosen = ops.matmul(ops.transpose(selection, (1, 0, 2)), store[f"{prefix}.codebook"])
    q = ops.reshape(ops.transpose(chosen, (1, 0, 2)), (rows, groups * config.code_dim))
    return QuantizeOutput(q=q, probs=probs, perplexity=codebook_perplexity(probs.data), codes=codes)


def codebook_perplexity(probs):
    """exp(entropy) of the mean assignment, per group; `probs` is (..., groups, entries)."""
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    mean = probs.reshape(-1, probs.shape[-2], probs.shape[-1]).mean(axis=0)
    return np.exp(entr(mean).sum(axis=-1))


def diversity_loss(probs):
    """(G*V - sum of group perplexities) / (G*V); 0 when every entry is used equally."""
    groups, entries = probs.shape[-2], probs.shape[-1]
    flat = ops.reshape(probs, (-1, groups, entries))
    mean = ops.mean(flat, axis=0)
    neg_entropy = ops.sum(ops.mul(mean, ops.log(ops.add(mean, DIVERSITY_EPS))), axis=-1)
    perplexity = ops.exp(ops.neg(neg_entropy))
    total = groups * entries
    return ops.mul(ops.sub(total, ops.sum(perplexity)), 1.0 / total)
