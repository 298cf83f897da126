"""Context network: positional convolution followed by transformer or conformer blocks."""
from logging import getLogger

import numpy as np

from app.internal.autograd import ops
from app.internal.config import ContextKind

from . import (
    ForwardContext,
    add_linear,
    add_norm,
    apply_layer_norm,
    apply_linear,
    kaiming_init,
    uniform_init,
)


log = getLogger("SSL")


def init_attention(store, prefix, rng, dim):
    add_linear(store, f"{prefix}.q", rng, dim, dim)
    add_linear(store, f"{prefix}.k", rng, dim, dim, bias=False)
    add_linear(store, f"{prefix}.v", rng, dim, dim)
    add_linear(store, f"{prefix}.out", rng, dim, dim)


def init_ffn(store, prefix, rng, dim, ffn_dim):
    add_linear(store, f"{prefix}.fc1", rng, dim, ffn_dim)
    add_linear(store, f"{prefix}.fc2", rng, ffn_dim, dim)


def init_conv_module(store, prefix, rng, dim, kernel):
    add_linear(store, f"{prefix}.pointwise1", rng, dim, 2 * dim)
    store.add(f"{prefix}.depthwise.weight", uniform_init(rng, (dim, kernel), kernel))
    add_norm(store, f"{prefix}.batch_norm", dim)
    store.add_buffer(f"{prefix}.batch_norm.running_mean", np.zeros(dim))
    store.add_buffer(f"{prefix}.batch_norm.running_var", np.ones(dim))
    add_linear(store, f"{prefix}.pointwise2", rng, dim, dim)


def init_context(store, config, rng, prefix="context"):
    d = config.model_dim
    if config.positional:
        store.add(f"{prefix}.pos_conv.weight",
                  kaiming_init(rng, (d, d // config.pos_groups, config.pos_kernel),
                               (d // config.pos_groups) * config.pos_kernel) * 0.5)
        store.add(f"{prefix}.pos_conv.bias", np.zeros(d))
    for i in range(config.num_blocks):
        p = f"{prefix}.blocks.{i}"
        if config.kind == ContextKind.transformer:
            add_norm(store, f"{p}.attn_norm", d)
            init_attention(store, f"{p}.attn", rng, d)
            add_norm(store, f"{p}.ffn_norm", d)
            init_ffn(store, f"{p}.ffn", rng, d, config.ffn_dim)
        else:
            add_norm(store, f"{p}.ffn1_norm", d)
            init_ffn(store, f"{p}.ffn1", rng, d, config.ffn_dim)
            add_norm(store, f"{p}.attn_norm", d)
            init_attention(store, f"{p}.attn", rng, d)
            add_norm(store, f"{p}.conv_norm", d)
            init_conv_module(store, f"{p}.conv", rng, d, config.depthwise_kernel)
            add_norm(store, f"{p}.ffn2_norm", d)
            init_ffn(store, f"{p}.ffn2", rng, d, config.ffn_dim)
            add_norm(store, f"{p}.final_norm", d)


def positional_embed(store, config, x, prefix="context"):
    """x + GELU(grouped same-padded convolution of x)."""
    conv = ops.conv1d(x, store[f"{prefix}.pos_conv.weight"], store[f"{prefix}.pos_conv.bias"],
                      padding=ops.same_padding(config.pos_kernel), groups=config.pos_groups)
    return ops.add(x, ops.gelu(conv))


def self_attention(store, prefix, x, num_heads, ctx, dropout=0.0, return_weights=False):
    batch, length, dim = x.shape
    head_dim = dim // num_heads

    def split(t):
        return ops.transpose(ops.reshape(t, (batch, length, num_heads, head_dim)), (0, 2, 1, 3))

    q = split(apply_linear(store, f"{prefix}.q", x))
    k = split(apply_linear(store, f"{prefix}.k", x))
    v = split(apply_linear(store, f"{prefix}.v", x))

    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    weights = ops.softmax(scores, axis=-1)
    attended = ops.matmul(ops.dropout(weights, dropout, ctx.rng, ctx.training), v)
    merged = ops.reshape(ops.transpose(attended, (0, 2, 1, 3)), (batch, length, dim))
    out = apply_linear(store, f"{prefix}.out", merged)
    if return_weights:
        return out, weights
    return out


def feed_forward(store, prefix, x, ctx, dropout, activation):
    h = activation(apply_linear(store, f"{prefix}.fc1", x))
    h = ops.dropout(h, dropout, ctx.rng, ctx.training)
    return apply_linear(store, f"{prefix}.fc2", h)


def transformer_block(store, config, x, ctx=None, prefix="context.blocks.0"):
    """Pre-norm block: x + MHSA(LN x), then + FFN(LN x) with GELU."""
    ctx = ctx or ForwardContext(training=False)
    p = config.dropout
    h = self_attention(store, f"{prefix}.attn", apply_layer_norm(store, f"{prefix}.attn_norm", x),
                       config.num_heads, ctx, dropout=p)
    x = ops.add(x, ops.dropout(h, p, ctx.rng, ctx.training))
    h = feed_forward(store, f"{prefix}.ffn", apply_layer_norm(store, f"{prefix}.ffn_norm", x), ctx, p, ops.gelu)
    return ops.add(x, ops.dropout(h, p, ctx.rng, ctx.training))


def conv_module(store, prefix, x, ctx, kernel, dropout):
    """pointwise(2d) -> GLU -> depthwise -> batchnorm -> swish -> pointwise(d) -> dropout."""
    h = ops.glu(apply_linear(store, f"{prefix}.pointwise1", x), axis=-1)
    h = ops.depthwise_conv1d(h, store[f"{prefix}.depthwise.weight"], padding=ops.same_padding(kernel))
    h = ops.batch_norm(h, store[f"{prefix}.batch_norm.weight"], store[f"{prefix}.batch_norm.bias"],
                       store.buffers[f"{prefix}.batch_norm.running_mean"],
                       store.buffers[f"{prefix}.batch_norm.running_var"], ctx.training)
    h = apply_linear(store, f"{prefix}.pointwise2", ops.swish(h))
    return ops.dropout(h, dropout, ctx.rng, ctx.training)


def conformer_block(store, config, x, ctx=None, prefix="context.blocks.0"):
    """Half-step FFN, self-attention, convolution module, half-step FFN, final layer norm."""
    ctx = ctx or ForwardContext(training=False)
    p = config.dropout
    h = feed_forward(store, f"{prefix}.ffn1", apply_layer_norm(store, f"{prefix}.ffn1_norm", x), ctx, p, ops.swish)
    x = ops.add(x, ops.mul(ops.dropout(h, p, ctx.rng, ctx.training), 0.5))
    h = self_attention(store, f"{prefix}.attn", apply_layer_norm(store, f"{prefix}.attn_norm", x),
                       config.num_heads, ctx, dropout=p)
    x = ops.add(x, ops.dropout(h, p, ctx.rng, ctx.training))
    h = conv_module(store, f"{prefix}.conv", apply_layer_norm(store, f"{prefix}.conv_norm", x), ctx,
                    config.depthwise_kernel, p)
    x = ops.add(x, h)
    h = feed_forward(store, f"{prefix}.ffn2", apply_layer_norm(store, f"{prefix}.ffn2_norm", x), ctx, p, ops.swish)
    x = ops.add(x, ops.mul(ops.dropout(h, p, ctx.rng, ctx.training), 0.5))
    return apply_layer_norm(store, f"{prefix}.final_norm", x)


def contextualize(store, config, x, ctx=None, prefix="context"):
    """Positional embedding then `num_blocks` blocks of the configured kind; shape is preserved."""
    ctx = ctx or ForwardContext(training=False)
    if config.positional:
        x = positional_embed(store, config, x, prefix)
    block = transformer_block if config.kind == ContextKind.transformer else conformer_block
    for i in range(config.num_blocks):
        x = block(store, config, x, ctx, prefix=f"{prefix}.blocks.{i}")
    return x
