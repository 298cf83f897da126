"""Masking, distractor sampling, projection heads and the contrastive loss."""
from logging import getLogger

import numpy as np

from app.internal.autograd import ContractError, ops

from . import ForwardContext, add_linear, add_norm, apply_linear


log = getLogger("SSL")


def sample_mask(length, rng, config):
    """Sorted masked indices: span starts drawn independently, spans unioned and cut at `length`."""
    if length < 1:
        raise ContractError(f"cannot mask a sequence of length {length}")
    starts = np.flatnonzero(rng.random(length) < config.mask_prob)
    if starts.size == 0 and config.mask_prob > 0:
        starts = np.array([rng.integers(length)])
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s:s + config.span_len] = True
    return np.flatnonzero(mask)


def indices_to_mask(indices, length):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= length):
        raise ContractError(f"masked index out of range [0, {length})")
    mask = np.zeros(length, dtype=bool)
    mask[indices] = True
    return mask


def apply_mask(frames, mask, mask_embedding):
    """Replace masked rows of (batch, time, dim) frames with the learned mask embedding.

    `mask` is a boolean (batch, time) array or, for a single sequence, a list
    of indices.
    """
    mask = np.asarray(mask)
    if mask.dtype != bool:
        mask = indices_to_mask(mask, frames.shape[1])[None, :]
    if mask.shape != frames.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} does not match frames {frames.shape[:2]}")
    if not mask.any():
        return frames
    return ops.mask_rows(frames, mask, mask_embedding)


def sample_distractors(masked_indices, positive_index, num_distractors, rng):
    """`num_distractors` draws with replacement from the masked set minus the positive.

    Returns None when the positive is the only masked index.
    """
    if num_distractors < 1:
        raise ContractError(f"need at least one distractor, got {num_distractors}")
    masked = np.asarray(masked_indices)
    if positive_index not in masked:
        raise ContractError(f"positive index {positive_index} is not masked")
    if masked.size < 2:
        return None
    picks = rng.choice(masked, size=num_distractors)
    clash = picks == positive_index
    while clash.any():
        picks[clash] = rng.choice(masked, size=int(clash.sum()))
        clash = picks == positive_index
    return picks


def init_head(store, head, rng, d_in, prefix):
    for i in range(head.num_layers):
        p = f"{prefix}.layers.{i}"
        add_linear(store, f"{p}.linear", rng, d_in, head.hidden_dim, bias=False)
        add_norm(store, f"{p}.batch_norm", head.hidden_dim)
        store.add_buffer(f"{p}.batch_norm.running_mean", np.zeros(head.hidden_dim))
        store.add_buffer(f"{p}.batch_norm.running_var", np.ones(head.hidden_dim))
        d_in = head.hidden_dim
    if head.num_layers:
        add_linear(store, f"{prefix}.out", rng, d_in, head.output_dim)


def head_forward(store, head, x, ctx=None, prefix="heads.context"):
    """Identity for a zero-depth head; otherwise (linear, batchnorm, ReLU) layers and a final linear."""
    ctx = ctx or ForwardContext(training=False)
    if head.num_layers == 0:
        return x
    for i in range(head.num_layers):
        p = f"{prefix}.layers.{i}"
        x = apply_linear(store, f"{p}.linear", x)
        x = ops.batch_norm(x, store[f"{p}.batch_norm.weight"], store[f"{p}.batch_norm.bias"],
                           store.buffers[f"{p}.batch_norm.running_mean"],
                           store.buffers[f"{p}.batch_norm.running_var"], ctx.training)
        x = ops.relu(x)
    return apply_linear(store, f"{prefix}.out", x)


def contrastive_loss(context, positive, negatives, temperature):
    """Mean of -log softmax(cos / temperature) at the positive over (positive, negatives).

    context and positive are (positions, dim), negatives (positions, K, dim).
    Returns the loss and a per-position flag set where the positive scores
    strictly highest.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    positions, dim = context.shape
    candidates = ops.concat([ops.reshape(positive, (positions, 1, dim)), negatives], axis=1)
    anchor = ops.reshape(context, (positions, 1, dim))
    scores = ops.mul(ops.cosine_similarity(anchor, candidates, axis=-1), 1.0 / temperature)
    log_probs = ops.log_softmax(scores, axis=-1)
    loss = ops.neg(ops.mean(log_probs[:, 0]))
    correct = scores.data[:, 0] > scores.data[:, 1:].max(axis=-1)
    return loss, correct
