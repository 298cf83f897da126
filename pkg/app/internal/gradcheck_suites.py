"""Finite-difference gradient suites for every primitive and layer, at toy sizes in float64."""
from logging import getLogger

import numpy as np

from app.internal.autograd import KinkProximityError, Tensor, ops, precision
from app.internal.autograd.engine import ParameterStore
from app.internal.autograd.gradcheck import gradient_check
from app.internal.config import ContextConfig, ConvKind, ConvLayerSpec, EncoderConfig, HeadConfig, QuantizerConfig
from app.internal.model import ForwardContext
from app.internal.model.context import conformer_block, init_context, positional_embed, transformer_block
from app.internal.model.encoder import encode, init_encoder
from app.internal.model.objective import contrastive_loss, head_forward, init_head
from app.internal.model.quantizer import diversity_loss, gumbel_softmax, init_quantizer


log = getLogger("SSL")

TOLERANCE = 1e-4
MAX_ATTEMPTS = 5


def _var(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def _fixed(seed):
    """A generator recreated on every call, so repeated forward passes see the same draws."""
    return lambda: np.random.default_rng(seed)


# each case maps a generator to (fn, inputs, store)

def _binary(op, positive_rhs=False):
    def case(rng):
        b = _var(rng, 3, 4, low=0.5) if positive_rhs else _var(rng, 4)
        return op, (_var(rng, 3, 4), b), None
    return case


def _unary(op, low=None, shape=(3, 4)):
    def case(rng):
        return op, (_var(rng, *shape, low=low),), None
    return case


def _batch_norm(training):
    def case(rng):
        running_mean, running_var = rng.standard_normal(4), np.abs(rng.standard_normal(4)) + 0.5

        def fn(x, g, b):
            return ops.batch_norm(x, g, b, running_mean.copy(), running_var.copy(), training)
        return fn, (_var(rng, 6, 4), _var(rng, 4), _var(rng, 4)), None
    return case


def _dropout(rng):
    draws = _fixed(7)
    return (lambda a: ops.dropout(a, 0.3, draws(), True)), (_var(rng, 3, 4),), None


def _mask_rows(rng):
    mask = np.array([[True, False, True], [False, False, True]])
    return (lambda x, f: ops.mask_rows(x, mask, f)), (_var(rng, 2, 3, 4), _var(rng, 4)), None


PRIMITIVES = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_rhs=True),
    "neg": _unary(ops.neg),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, low=0.5),
    "sum": _unary(lambda a: ops.sum(a, axis=1)),
    "mean": _unary(lambda a: ops.mean(a, axis=0, keepdims=True)),
    "reshape": _unary(lambda a: ops.reshape(a, (2, 6))),
    "transpose": _unary(lambda a: ops.transpose(a, (1, 0))),
    "getitem": _unary(lambda a: a[1:, ::2]),
    "take": _unary(lambda a: ops.take(a, np.array([[0, 2], [2, 2]]))),
    "concat": lambda rng: ((lambda a, b: ops.concat([a, b], axis=0)), (_var(rng, 2, 3), _var(rng, 1, 3)), None),
    "matmul": lambda rng: (ops.matmul, (_var(rng, 2, 3, 4), _var(rng, 4, 5)), None),
    "relu": _unary(ops.relu),
    "sigmoid": _unary(ops.sigmoid),
    "swish": _unary(ops.swish),
    "gelu": _unary(ops.gelu),
    "glu": _unary(lambda a: ops.glu(a, axis=-1)),
    "softmax": _unary(lambda a: ops.softmax(a, axis=-1)),
    "log_softmax": _unary(lambda a: ops.log_softmax(a, axis=-1)),
    "dropout": _dropout,
    "normalize": _unary(lambda a: ops.normalize(a, (0,)), shape=(5, 3)),
    "layer_norm": lambda rng: (ops.layer_norm, (_var(rng, 3, 4), _var(rng, 4), _var(rng, 4)), None),
    "batch_norm.train": _batch_norm(True),
    "batch_norm.eval": _batch_norm(False),
    "conv1d": lambda rng: ((lambda x, w, b: ops.conv1d(x, w, b, stride=2, padding=(1, 2), groups=2)),
                           (_var(rng, 2, 9, 4), _var(rng, 6, 2, 3), _var(rng, 6)), None),
    "depthwise_conv1d": lambda rng: ((lambda x, w: ops.depthwise_conv1d(x, w, stride=2, padding=(1, 1))),
                                     (_var(rng, 2, 7, 3), _var(rng, 3, 3)), None),
    "dynamic_depthwise_conv1d": lambda rng: ((lambda x, w: ops.dynamic_depthwise_conv1d(x, w, stride=1, padding=(1, 1))),
                                             (_var(rng, 2, 5, 3), _var(rng, 2, 5, 3, 3)), None),
    "cosine_similarity": lambda rng: (ops.cosine_similarity, (_var(rng, 3, 1, 4), _var(rng, 3, 2, 4)), None),
    "mask_rows": _mask_rows,
}


def _encoder_case(kind):
    def case(rng):
        layers = [ConvLayerSpec(out_channels=4, kernel=4, stride=2, norm=True)]
        if kind == ConvKind.standard:
            layers.append(ConvLayerSpec(out_channels=4, kernel=3, stride=2, bias=True))
        else:
            layers.append(ConvLayerSpec(kind=kind, out_channels=4, kernel=3, stride=2, heads=2))
        config = EncoderConfig(layers=layers)
        store = ParameterStore()
        init_encoder(store, config, rng)

        def fn(wave):
            return encode(store, config, wave, ForwardContext(training=True, rng=np.random.default_rng(3))).frames
        return fn, (_var(rng, 2, 24),), store
    return case


def _context_config(**kw):
    base = dict(model_dim=8, num_heads=2, num_blocks=1, depthwise_kernel=3, pos_kernel=3, pos_groups=2, dropout=0.0)
    base.update(kw)
    return ContextConfig(**base)


def _block_case(kind, batch, length):
    def case(rng):
        config = _context_config(kind=kind, positional=False)
        store = ParameterStore()
        init_context(store, config, rng)
        block = transformer_block if kind == "transformer" else conformer_block

        def fn(x):
            return block(store, config, x, ForwardContext(training=True), prefix="context.blocks.0")
        return fn, (_var(rng, batch, length, 8),), store
    return case


def _positional_case(rng):
    config = _context_config(num_blocks=0)
    store = ParameterStore()
    init_context(store, config, rng)
    return (lambda x: positional_embed(store, config, x)), (_var(rng, 1, 5, 8),), store


def _head_case(rng):
    head = HeadConfig(num_layers=4, hidden_dim=6, output_dim=5)
    store = ParameterStore()
    init_head(store, head, rng, 5, "heads.context")
    return (lambda x: head_forward(store, head, x, ForwardContext(training=True))), (_var(rng, 8, 5),), store


def _quantizer_case(rng):
    config = QuantizerConfig(num_groups=2, entries_per_group=3, target_dim=4)
    store = ParameterStore()
    init_quantizer(store, config, rng, 5)
    draws = _fixed(11)

    def fn(z):
        logits = ops.reshape(ops.linear(z, store["quantizer.logits.weight"], store["quantizer.logits.bias"]), (4, 2, 3))
        soft = gumbel_softmax(logits, 0.7, draws())
        codes = ops.matmul(ops.transpose(soft, (1, 0, 2)), store["quantizer.codebook"])
        return ops.add(ops.sum(codes), diversity_loss(ops.softmax(logits, axis=-1)))
    return fn, (_var(rng, 4, 5),), store


def _contrastive_case(rng):
    def fn(c, pos, negs):
        return contrastive_loss(c, pos, negs, 0.5)[0]
    return fn, (_var(rng, 3, 4), _var(rng, 3, 4), _var(rng, 3, 5, 4)), None


SUITES = {
    "primitives": PRIMITIVES,
    "encoder": {
        "standard": _encoder_case(ConvKind.standard),
        "lightweight": _encoder_case(ConvKind.lightweight),
        "dynamic": _encoder_case(ConvKind.dynamic),
    },
    "context": {
        "positional": _positional_case,
        "transformer": _block_case("transformer", 1, 5),
        "conformer": _block_case("conformer", 2, 6),
    },
    "heads": {"mlp": _head_case},
    "quantizer": {"soft_path": _quantizer_case},
    "objective": {"contrastive": _contrastive_case},
}


def check_case(case, seed=0, epsilon=1e-5):
    """Gradient check one case in float64, drawing fresh inputs while a ReLU sits on its kink."""
    with precision("float64"):
        for attempt in range(MAX_ATTEMPTS):
            fn, inputs, store = case(np.random.default_rng(seed + 1000 * attempt))
            try:
                return gradient_check(fn, inputs, store, epsilon=epsilon)
            except KinkProximityError as e:
                log.debug(f"gradcheck attempt {attempt}: {e.msg}, resampling")
    raise KinkProximityError(f"still near a kink after {MAX_ATTEMPTS} attempts")


def run_suites(modules=None, seed=0, tolerance=TOLERANCE):
    """Run the named suites (all by default); returns [(suite, case, error, passed)]."""
    modules = modules or list(SUITES)
    results = []
    for module in modules:
        if module not in SUITES:
            raise KeyError(f"unknown gradcheck suite '{module}', choose from {sorted(SUITES)}")
        for name, case in SUITES[module].items():
            error = check_case(case, seed)
            passed = error < tolerance
            log.info(f"gradcheck {module}.{name}: {error:.2e} {'ok' if passed else 'FAILED'}")
            results.append((module, name, error, passed))
    return results
