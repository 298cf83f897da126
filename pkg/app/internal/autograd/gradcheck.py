from logging import getLogger

import numpy as np

from . import KinkProximityError, Tensor, no_record, record
from . import ops
from .engine import backpropagate


log = getLogger("SSL")

RELATIVE_FLOOR = 1e-8
# bound on the rounding error of one loss evaluation, in units of machine epsilon
ROUNDOFF_ULPS = 1024


def _as_loss(out, weights):
    if out.size == 1:
        return ops.sum(out)
    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.data.dtype)))


def elementwise_error(analytic, numeric, roundoff=0.0):
    """Largest per-element relative error, after discounting `roundoff`."""
    diff = np.maximum(np.abs(analytic - numeric) - roundoff, 0.0)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_FLOOR)
    return float((diff / scale).max(initial=0.0))


def gradient_check(fn, inputs=(), store=None, epsilon=1e-5, kink_margin=None, seed=0):
    """Compare backpropagated gradients against finite differences.

    `fn(*inputs)` must be deterministic (draw any randomness from a generator
    created inside `fn`). A non-scalar output is reduced with fixed random
    weights. Gradients are checked for every input with `requires_grad` and
    every parameter in `store`. Each element contributes

        max(|a - n| - r, 0) / max(|a|, |n|, 1e-8)

    where `n` extrapolates central differences at epsilon and 2 * epsilon and
    `r` bounds its rounding error,
    1.5 * ROUNDOFF_ULPS * machine epsilon * max(|f|, 1) / epsilon. The
    largest contribution over all elements is returned.

    Raises KinkProximityError when a ReLU input lies within `kink_margin`
    (default 20 * epsilon) of zero; callers resample and retry.
    """
    kink_margin = 20 * epsilon if kink_margin is None else kink_margin
    targets = [(f"input.{i}", t) for i, t in enumerate(inputs) if t.requires_grad]
    if store is not None:
        targets += list(store)
    if not targets:
        return 0.0

    buffers = {k: v.copy() for k, v in store.buffers.items()} if store is not None else {}

    for _, t in targets:
        t.zero_grad()
    with record() as rec:
        out = fn(*inputs)
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss = _as_loss(out, weights)
    for node in rec:
        if node.kink is not None and node.kink < kink_margin:
            raise KinkProximityError(f"{node.op} input at distance {node.kink:.3g} from its kink")
    backpropagate(loss, rec)
    analytic = {name: t.grad.copy() for name, t in targets}

    def evaluate():
        with no_record():
            return float(_as_loss(fn(*inputs), weights).data)

    def shifted(flat, i, delta):
        saved = flat[i]
        flat[i] = saved + delta
        value = evaluate()
        flat[i] = saved
        return value

    worst = 0.0
    for name, t in targets:
        numeric = np.zeros_like(t.data)
        roundoff = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat, rflat = numeric.reshape(-1), roundoff.reshape(-1)
        for i in range(flat.size):
            f = [shifted(flat, i, k * epsilon) for k in (2, 1, -1, -2)]
            # central differences at epsilon and 2*epsilon, extrapolated to cancel the second-order term
            nflat[i] = (8 * (f[1] - f[2]) - (f[0] - f[3])) / (12 * epsilon)
            rflat[i] = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(max(map(abs, f)), 1.0) * 1.5 / epsilon
        err = elementwise_error(analytic[name], numeric, roundoff)
        log.debug(f"gradcheck {name}: relative error {err:.3e}")
        worst = max(worst, err)

    for path, saved in buffers.items():
        store.buffers[path][...] = saved
    for _, t in targets:
        t.zero_grad()
    return worst
