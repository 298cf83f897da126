from dataclasses import dataclass, field

import numpy as np

from app.internal.autograd import ops


class ModelConfigError(Exception):
    """Raised when a network cannot be built from the requested configuration

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="invalid model configuration"):
        self.msg = msg
        super().__init__(self.msg)


class InputLengthError(Exception):
    """Raised when an input is shorter than the encoder's receptive field

    Attributes:
        msg -- error message reporting the minimum length
    """

    def __init__(self, msg="input shorter than the encoder receptive field"):
        self.msg = msg
        super().__init__(self.msg)


class DegenerateBatchError(Exception):
    """Raised when no masked position in a batch has a distractor to contrast with

    Attributes:
        msg -- error message
        skipped -- number of masked positions skipped
    """

    def __init__(self, msg="every masked position was skipped", skipped=0):
        self.msg = msg
        self.skipped = skipped
        super().__init__(self.msg)


@dataclass
class ForwardContext:
    """Mode and randomness for one forward pass."""
    training: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def kaiming_init(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def add_linear(store, prefix, rng, d_in, d_out, bias=True):
    store.add(f"{prefix}.weight", uniform_init(rng, (d_in, d_out), d_in))
    if bias:
        store.add(f"{prefix}.bias", np.zeros(d_out))


def add_norm(store, prefix, dim):
    store.add(f"{prefix}.weight", np.ones(dim))
    store.add(f"{prefix}.bias", np.zeros(dim))


def apply_linear(store, prefix, x):
    bias = store.params.get(f"{prefix}.bias")
    return ops.linear(x, store[f"{prefix}.weight"], bias)


def apply_layer_norm(store, prefix, x):
    return ops.layer_norm(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"])
