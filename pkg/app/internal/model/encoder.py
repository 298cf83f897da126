"""Convolutional feature encoder: raw waveform -> latent frames."""
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from pydantic import ValidationError

from app.const import (
    BASE_ENCODER_CHANNELS,
    BASE_ENCODER_KERNELS,
    BASE_ENCODER_STRIDES,
    SAMPLE_RATE,
    TAIL_WIDENING,
    TOY_ENCODER_CHANNELS,
    TOY_ENCODER_KERNELS,
    TOY_ENCODER_STRIDES,
)
from app.internal.autograd import Tensor, ops
from app.internal.config import ContextConfig, ConvKind, ConvLayerSpec, EncoderConfig, EncoderGeometry, ModelConfig

from . import ForwardContext, InputLengthError, ModelConfigError, add_norm, kaiming_init, uniform_init


log = getLogger("SSL")


@dataclass
class FrameSequence:
    frames: Tensor
    frame_rate: float

    @property
    def num_frames(self):
        return self.frames.shape[1]


def build_encoder(k_tail=0, tail_kind=ConvKind.lightweight, geometry=EncoderGeometry.base,
                  heads=8, group_size=None, dropout=0.1):
    """Encoder layer stack with the final `k_tail` layers replaced by lightweight or dynamic convolutions.

    The base geometry only admits the tail sizes of TAIL_WIDENING and widens
    every layer accordingly; the toy geometry keeps its width for any tail
    shorter than the stack.
    """
    if geometry == EncoderGeometry.base:
        if k_tail not in TAIL_WIDENING:
            raise ModelConfigError(f"k_tail {k_tail} not in {sorted(TAIL_WIDENING)} for the base encoder")
        channels = TAIL_WIDENING[k_tail] if k_tail else BASE_ENCODER_CHANNELS
        kernels, strides = BASE_ENCODER_KERNELS, BASE_ENCODER_STRIDES
    else:
        channels = TOY_ENCODER_CHANNELS
        kernels, strides = TOY_ENCODER_KERNELS, TOY_ENCODER_STRIDES
        if not 0 <= k_tail < len(kernels):
            raise ModelConfigError(f"k_tail {k_tail} must be below the {len(kernels)} toy encoder layers")
    if k_tail and tail_kind not in (ConvKind.lightweight, ConvKind.dynamic):
        raise ModelConfigError(f"tail kind {tail_kind} is not a replacement layer kind")

    first_tail = len(kernels) - k_tail
    layers = []
    try:
        for i, (kernel, stride) in enumerate(zip(kernels, strides)):
            if i >= first_tail:
                layers.append(ConvLayerSpec(kind=tail_kind, out_channels=channels, kernel=kernel, stride=stride,
                                            heads=heads, group_size=group_size, dropout=dropout))
            else:
                layers.append(ConvLayerSpec(out_channels=channels, kernel=kernel, stride=stride, norm=i == 0))
    except ValidationError as e:
        raise ModelConfigError(f"encoder layer {len(layers)}: {e}")
    return EncoderConfig(layers=layers)


def init_encoder(store, config, rng, prefix="encoder"):
    c_in = config.in_channels
    for i, layer in enumerate(config.layers):
        p = f"{prefix}.layers.{i}"
        c, k = layer.out_channels, layer.kernel
        if layer.kind == ConvKind.standard:
            store.add(f"{p}.weight", kaiming_init(rng, (c, c_in, k), c_in * k))
            if layer.bias:
                store.add(f"{p}.bias", np.zeros(c))
            if layer.norm:
                add_norm(store, f"{p}.norm", c)
        else:
            store.add(f"{p}.in_proj.weight", uniform_init(rng, (c_in, c), c_in))
            store.add(f"{p}.in_proj.bias", np.zeros(c))
            if layer.kind == ConvKind.lightweight:
                store.add(f"{p}.weight", uniform_init(rng, (layer.heads, k), k))
            else:
                store.add(f"{p}.weight_proj", uniform_init(rng, (c, layer.heads * k), c))
        c_in = c


def head_of_channel(channels, heads, group_size):
    """Channel c uses head (c // group_size) % heads."""
    return (np.arange(channels) // group_size) % heads


def _resolve_padding(padding, kernel):
    if padding is None:
        return ops.same_padding(kernel)
    return padding


def lightweight_conv(x, raw_weights, group_size, stride=1, padding=None, dropout=0.0, ctx=None):
    """Depthwise convolution with softmax-normalized kernels shared across channel groups.

    `raw_weights` is (heads, kernel). `padding=None` gives same-length output
    at stride 1.
    """
    channels = x.shape[-1]
    heads, kernel = raw_weights.shape
    if channels % heads or channels % group_size:
        raise ModelConfigError(f"{channels} channels not divisible by heads {heads} and group size {group_size}")
    weights = ops.softmax(raw_weights, axis=-1)
    if ctx is not None:
        weights = ops.dropout(weights, dropout, ctx.rng, ctx.training)
    per_channel = ops.take(weights, head_of_channel(channels, heads, group_size))
    return ops.depthwise_conv1d(x, per_channel, stride=stride, padding=_resolve_padding(padding, kernel))


def dynamic_kernels(x, projection, heads, kernel, group_size, stride=1, padding=None, dropout=0.0, ctx=None):
    """Per-output-step normalized kernels (batch, t_out, channels, kernel) predicted from the window centre."""
    batch, length, channels = x.shape
    if channels % heads or channels % group_size:
        raise ModelConfigError(f"{channels} channels not divisible by heads {heads} and group size {group_size}")
    left, right = _resolve_padding(padding, kernel)
    padded = length + left + right
    if padded < kernel:
        raise InputLengthError(f"dynamic_conv: {length} steps shorter than kernel {kernel}")
    t_out = (padded - kernel) // stride + 1
    centre = np.clip(np.arange(t_out) * stride + (kernel - 1) // 2 - left, 0, length - 1)

    centred = ops.transpose(ops.take(ops.transpose(x, (1, 0, 2)), centre), (1, 0, 2))
    logits = ops.reshape(ops.matmul(centred, projection), (batch, t_out, heads, kernel))
    weights = ops.softmax(logits, axis=-1)
    if ctx is not None:
        weights = ops.dropout(weights, dropout, ctx.rng, ctx.training)
    per_channel = ops.take(ops.transpose(weights, (2, 0, 1, 3)), head_of_channel(channels, heads, group_size))
    return ops.transpose(per_channel, (1, 2, 0, 3))


def dynamic_conv(x, projection, heads, group_size, stride=1, padding=None, dropout=0.0, ctx=None):
    """Lightweight convolution whose kernels are a linear function of the input at each step.

    `projection` is (channels, heads * kernel).
    """
    kernel = projection.shape[1] // heads
    if projection.shape[1] != heads * kernel:
        raise ModelConfigError(f"projection width {projection.shape[1]} is not a multiple of heads {heads}")
    padding = _resolve_padding(padding, kernel)
    weights = dynamic_kernels(x, projection, heads, kernel, group_size, stride, padding, dropout, ctx)
    return ops.dynamic_depthwise_conv1d(x, weights, stride=stride, padding=padding)


def group_norm(x, gamma, beta):
    """One group per channel, statistics over time."""
    return ops.add(ops.mul(ops.normalize(x, (1,)), gamma), beta)


def encode(store, config, waveform, ctx=None, prefix="encoder", sample_rate=SAMPLE_RATE):
    ctx = ctx or ForwardContext(training=False)
    x = waveform if isinstance(waveform, Tensor) else Tensor(waveform)
    if x.ndim == 1:
        x = ops.reshape(x, (1, x.shape[0]))
    length = x.shape[1]
    if config.output_length(length) < 1:
        raise InputLengthError(f"input of {length} samples is shorter than the receptive field, "
                               f"need at least {config.receptive_field}")
    x = ops.reshape(x, (x.shape[0], length, 1))

    for i, layer in enumerate(config.layers):
        p = f"{prefix}.layers.{i}"
        if layer.kind == ConvKind.standard:
            x = ops.conv1d(x, store[f"{p}.weight"], store.params.get(f"{p}.bias"), stride=layer.stride)
            if layer.norm:
                x = group_norm(x, store[f"{p}.norm.weight"], store[f"{p}.norm.bias"])
        else:
            x = ops.linear(x, store[f"{p}.in_proj.weight"], store[f"{p}.in_proj.bias"])
            if layer.kind == ConvKind.lightweight:
                x = lightweight_conv(x, store[f"{p}.weight"], layer.group_size, stride=layer.stride,
                                     padding=(0, 0), dropout=layer.dropout, ctx=ctx)
            else:
                x = dynamic_conv(x, store[f"{p}.weight_proj"], layer.heads, layer.group_size,
                                 stride=layer.stride, padding=(0, 0), dropout=layer.dropout, ctx=ctx)
        x = ops.gelu(x)
    return FrameSequence(frames=x, frame_rate=sample_rate / config.total_stride)


def _encoder_count(config):
    total = 0
    c_in = config.in_channels
    for layer in config.layers:
        c, k = layer.out_channels, layer.kernel
        if layer.kind == ConvKind.standard:
            total += c * c_in * k
            total += c if layer.bias else 0
            total += 2 * c if layer.norm else 0
        else:
            total += c_in * c + c
            if layer.kind == ConvKind.lightweight:
                total += layer.heads * k
            else:
                total += c * layer.heads * k
        c_in = c
    return total


def _head_count(head, d_in):
    total = 0
    for _ in range(head.num_layers):
        total += d_in * head.hidden_dim + 2 * head.hidden_dim
        d_in = head.hidden_dim
    if head.num_layers:
        total += d_in * head.output_dim + head.output_dim
    return total


def _context_count(context):
    d, f = context.model_dim, context.ffn_dim
    attention = 4 * d * d + 3 * d
    ffn = d * f + f + f * d + d
    if context.kind == "transformer":
        block = attention + ffn + 2 * 2 * d
    else:
        conv = d * 2 * d + 2 * d + d * context.depthwise_kernel + 2 * d + d * d + d
        block = 2 * ffn + attention + conv + 5 * 2 * d
    total = context.num_blocks * block
    if context.positional:
        total += d * (d // context.pos_groups) * context.pos_kernel + d
    return total


def count_parameters(config):
    """Exact trainable scalar count of an EncoderConfig, a ContextConfig, or a whole ModelConfig."""
    if isinstance(config, EncoderConfig):
        return _encoder_count(config)
    if isinstance(config, ContextConfig):
        return _context_count(config)
    if not isinstance(config, ModelConfig):
        raise ModelConfigError(f"cannot count parameters of {type(config).__name__}")

    c = config.encoder.out_channels
    d = config.context.model_dim
    q = config.quantizer
    total = _encoder_count(config.encoder)
    total += 2 * c + c * d + d          # feature layer norm and projection
    total += d                          # mask embedding
    total += _context_count(config.context)
    total += c * q.num_groups * q.entries_per_group + q.num_groups * q.entries_per_group
    total += q.num_groups * q.entries_per_group * q.code_dim
    total += q.target_dim * d + d       # target projection
    total += d * d + d                  # context projection
    total += _head_count(config.context_head, d) + _head_count(config.target_head, d)
    return total
