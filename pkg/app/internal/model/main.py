from dataclasses import dataclass
from logging import getLogger

import numpy as np

from app.internal.autograd import Tensor, ops
from app.internal.autograd.engine import ParameterStore
from app.internal.config import ModelConfig

from . import DegenerateBatchError, ForwardContext, ModelConfigError, add_linear, add_norm, apply_layer_norm, apply_linear
from .context import contextualize, init_context
from .encoder import build_encoder, encode, init_encoder
from .objective import apply_mask, contrastive_loss, head_forward, init_head, sample_distractors, sample_mask
from .quantizer import diversity_loss, init_quantizer, quantize


log = getLogger("SSL")


@dataclass
class LossOutput:
    contrastive: Tensor
    diversity: Tensor
    total: Tensor
    masked_accuracy: float
    positions: int
    skipped_positions: int
    perplexity: np.ndarray


def model_config_from(config):
    """ModelConfig for a TrainConfig."""
    enc = config.encoder
    encoder = build_encoder(enc.k_tail, enc.tail_kind, enc.geometry, enc.tail_heads,
                            enc.tail_group_size, enc.tail_dropout)
    if config.batch.crop_samples < encoder.receptive_field:
        raise ModelConfigError(f"crop_samples {config.batch.crop_samples} is shorter than the encoder "
                               f"receptive field {encoder.receptive_field}")
    d = config.context.model_dim
    return ModelConfig(
        encoder=encoder,
        context=config.context,
        quantizer=config.quantizer,
        context_head=config.heads.context_head(d),
        target_head=config.heads.target_head(d),
    )


def init_model(config, rng):
    """Fresh ParameterStore holding every parameter and buffer of the network."""
    store = ParameterStore()
    c = config.encoder.out_channels
    d = config.context.model_dim
    init_encoder(store, config.encoder, rng)
    add_norm(store, "features.norm", c)
    add_linear(store, "features.proj", rng, c, d)
    store.add("mask_embedding", rng.uniform(0.0, 1.0, size=d))
    init_context(store, config.context, rng)
    init_quantizer(store, config.quantizer, rng, c)
    add_linear(store, "project_q", rng, config.quantizer.target_dim, d)
    add_linear(store, "final_proj", rng, d, d)
    init_head(store, config.context_head, rng, d, "heads.context")
    init_head(store, config.target_head, rng, d, "heads.target")
    log.info(f"model initialized with {store.num_parameters()} parameters")
    return store


def _distractor_rows(masks, codes, rng, num_distractors):
    """Row indices (into the flattened masked rows) of positives and their distractors.

    Distractors come from the other masked steps of the same utterance whose
    codes differ from the positive's. A position without any is skipped.
    """
    positives, negatives, skipped = [], [], 0
    start = 0
    for mask in masks:
        masked = np.flatnonzero(mask)
        rows = np.arange(start, start + masked.size)
        start += masked.size
        for i, t in enumerate(masked):
            pool = (codes[rows] != codes[rows[i]]).any(axis=-1)
            pool[i] = True
            picks = sample_distractors(masked[pool], t, num_distractors, rng)
            if picks is None:
                skipped += 1
                continue
            positives.append(rows[i])
            negatives.append(rows[np.searchsorted(masked, picks)])
    return np.array(positives, dtype=np.int64), np.array(negatives, dtype=np.int64).reshape(-1, num_distractors), skipped


def pretrain_loss(store, model, train_config, source, target, rng, temperature, training=True):
    """Contrastive plus weighted diversity loss for one batch of (source, target) waveforms.

    `source` feeds the masked context path and `target` the quantized
    targets; both are (batch, samples). A degenerate batch is detected before
    any batch norm statistics move.
    """
    ctx = ForwardContext(training=training, rng=rng)
    objective = train_config.objective

    z_src = encode(store, model.encoder, source, ctx).frames
    features = apply_layer_norm(store, "features.norm", z_src)
    features = ops.dropout(features, objective.feature_dropout, rng, training)
    x = apply_linear(store, "features.proj", features)

    batch, length, d = x.shape
    masks = np.zeros((batch, length), dtype=bool)
    for b in range(batch):
        masks[b, sample_mask(length, rng, train_config.mask)] = True
    flat_masked = np.flatnonzero(masks.reshape(-1))

    z_tgt = apply_layer_norm(store, "features.norm", encode(store, model.encoder, target, ctx).frames)
    channels = z_tgt.shape[-1]
    z_masked = ops.take(ops.reshape(z_tgt, (batch * length, channels)), flat_masked)
    quantized = quantize(store, model.quantizer, z_masked, temperature, ctx)

    positives, negatives, skipped = _distractor_rows(masks, quantized.codes, rng, objective.num_distractors)
    if positives.size == 0:
        raise DegenerateBatchError(f"all {skipped} masked positions lack distractors", skipped=skipped)

    c = contextualize(store, model.context, apply_mask(x, masks, store["mask_embedding"]), ctx)
    c_masked = ops.take(ops.reshape(c, (batch * length, d)), flat_masked)
    c_proj = head_forward(store, model.context_head, apply_linear(store, "final_proj", c_masked), ctx,
                          prefix="heads.context")
    q_proj = head_forward(store, model.target_head, apply_linear(store, "project_q", quantized.q), ctx,
                          prefix="heads.target")

    contrastive, correct = contrastive_loss(
        ops.take(c_proj, positives),
        ops.take(q_proj, positives),
        ops.take(q_proj, negatives),
        objective.temperature,
    )
    diversity = diversity_loss(quantized.probs)
    total = ops.add(contrastive, ops.mul(diversity, train_config.quantizer.diversity_weight))
    return LossOutput(
        contrastive=contrastive,
        diversity=diversity,
        total=total,
        masked_accuracy=float(correct.mean()),
        positions=int(positives.size),
        skipped_positions=skipped,
        perplexity=quantized.perplexity,
    )
