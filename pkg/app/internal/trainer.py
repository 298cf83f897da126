import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
import ujson

from app.const import METRICS_FILENAME, SAMPLE_RATE, SKIP_WINDOW_STEPS
from app.internal.audio import AudioBuffer, load_manifest, read_wav, resample
from app.internal.augment.main import NoiseCorpus, augment_pair
from app.internal.autograd import ContractError, get_dtype, precision, record
from app.internal.autograd.engine import backpropagate
from app.internal.checkpoint import load_checkpoint, save_checkpoint
from app.internal.config import dump_config
from app.internal.model import DegenerateBatchError
from app.internal.model.main import init_model, model_config_from, pretrain_loss
from app.internal.model.quantizer import anneal_temperature
from app.settings import get_settings


log = getLogger("SSL")

SEED_RANGE = 2**63


class NonFiniteGradientError(Exception):
    """Raised when a parameter gradient holds NaN or Inf

    Attributes:
        msg -- error message naming the parameter path
    """

    def __init__(self, msg="non-finite gradient"):
        self.msg = msg
        super().__init__(self.msg)


class TrainingAbortedError(Exception):
    """Raised when too many recent steps were skipped as degenerate

    Attributes:
        msg -- error message
    """

    def __init__(self, msg="training aborted"):
        self.msg = msg
        super().__init__(self.msg)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def learning_rate(step, config):
    """Linear warmup to the peak, then linear decay reaching 0 at total_steps."""
    peak = config.learning_rate
    warmup, total = config.warmup_steps, config.total_steps
    if warmup and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


def adam_step(store, state, step, config, lr=None):
    """One Adam update with bias correction and decoupled weight decay, in place."""
    if step < 1:
        raise ContractError(f"adam_step needs step >= 1, got {step}")
    lr = learning_rate(step, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step

    for path, param in store:
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteGradientError(f"gradient of {path} is not finite")

    for path, param in store:
        grad = param.grad
        m = state.m.setdefault(path, np.zeros_like(param.data))
        v = state.v.setdefault(path, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        if config.weight_decay:
            param.data -= lr * config.weight_decay * param.data
        param.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return lr


def rng_state_to_json(rng):
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: hex(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": hex(state["uinteger"]),
    }


def rng_from_json(data):
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": data["bit_generator"],
        "state": {k: int(v, 16) for k, v in data["state"].items()},
        "has_uint32": data["has_uint32"],
        "uinteger": int(data["uinteger"], 16),
    }
    return rng


@dataclass
class TrainingState:
    store: object
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    skips: deque = field(default_factory=lambda: deque(maxlen=SKIP_WINDOW_STEPS))


def checkpoint_tensors(state):
    tensors = dict(state.store.state())
    for path, m in state.adam.m.items():
        tensors[f"adam.m.{path}"] = m
    for path, v in state.adam.v.items():
        tensors[f"adam.v.{path}"] = v
    return tensors


def write_checkpoint(state, config, path):
    metadata = {
        "step": state.step,
        "rng": rng_state_to_json(state.rng),
        "skips": [int(s) for s in state.skips],
        "precision": np.dtype(get_dtype()).name,
        "config": dump_config(config),
    }
    save_checkpoint(path, checkpoint_tensors(state), metadata)


def restore_state(state, path):
    tensors, metadata = load_checkpoint(path)
    state.store.load_state(tensors)
    for name, value in tensors.items():
        if name.startswith("adam.m."):
            state.adam.m[name[len("adam.m."):]] = value.astype(get_dtype())
        elif name.startswith("adam.v."):
            state.adam.v[name[len("adam.v."):]] = value.astype(get_dtype())
    state.rng = rng_from_json(metadata["rng"])
    state.step = int(metadata["step"])
    state.skips.clear()
    state.skips.extend(bool(s) for s in metadata["skips"])
    log.info(f"resumed from {path} at step {state.step}")
    return state


def load_corpus(config):
    entries = load_manifest(config.data.manifest, strict=config.data.strict)
    if not entries:
        raise TrainingAbortedError(f"manifest {config.data.manifest} lists no training examples")
    utterances = []
    for entry in entries:
        buf = read_wav(entry.path)
        if buf.sample_rate != SAMPLE_RATE:
            buf = resample(buf, SAMPLE_RATE)
        utterances.append(buf)
    log.info(f"loaded {len(utterances)} utterances from {config.data.manifest}")
    return utterances


def crop(buffer, length, rng):
    """Uniformly placed crop of `length` samples, zero-padded at the end when too short."""
    n = len(buffer)
    offset = int(rng.integers(max(n - length, 0) + 1))
    samples = buffer.samples[offset:offset + length]
    if samples.shape[0] < length:
        samples = np.pad(samples, (0, length - samples.shape[0]))
    return AudioBuffer(samples, buffer.sample_rate)


def assemble_batch(utterances, noise_corpus, config, rng, pool):
    picks = rng.integers(len(utterances), size=config.batch.examples_per_batch)
    crops = [crop(utterances[i], config.batch.crop_samples, rng) for i in picks]
    seeds = rng.integers(SEED_RANGE, size=len(crops))

    def augment(args):
        audio, seed = args
        return augment_pair(audio, noise_corpus, np.random.default_rng(int(seed)), config.augment)

    pairs = list(pool.map(augment, zip(crops, seeds)))
    source = np.stack([s.samples for s, _ in pairs])
    target = np.stack([t.samples for _, t in pairs])
    return source, target


def training_step(state, model, config, source, target):
    """Forward, backward and update for one batch; returns its metrics record, or None when skipped."""
    step = state.step + 1
    temperature = anneal_temperature(step - 1, config.quantizer)
    try:
        with record() as rec:
            out = pretrain_loss(state.store, model, config, source, target, state.rng, temperature)
    except DegenerateBatchError as e:
        log.warning(f"step {step}: degenerate batch skipped ({e.msg})")
        return None

    state.store.zero_grad()
    backpropagate(out.total, rec, state.store)
    lr = adam_step(state.store, state.adam, step, config.optimizer)
    return {
        "step": step,
        "loss": float(out.total.item()),
        "contrastive": float(out.contrastive.item()),
        "diversity": float(out.diversity.item()),
        "accuracy": out.masked_accuracy,
        "temperature": temperature,
        "lr": lr,
        "perplexity": [float(p) for p in out.perplexity],
        "skipped_positions": out.skipped_positions,
    }


def note_skip(state, skipped):
    state.skips.append(skipped)
    if len(state.skips) == SKIP_WINDOW_STEPS and sum(state.skips) > SKIP_WINDOW_STEPS // 2:
        raise TrainingAbortedError(f"{sum(state.skips)} of the last {SKIP_WINDOW_STEPS} steps were skipped")


def train(config, utterances=None, noise_corpus=None):
    """Run pretraining as configured; returns the list of metrics records written this run.

    `utterances` and `noise_corpus` default to the manifests named in the
    configuration.
    """
    settings = get_settings()
    dtype_name = "float64" if config.train.deterministic else settings.precision
    with precision(dtype_name):
        return _train(config, utterances, noise_corpus, settings)


def _train(config, utterances, noise_corpus, settings):
    out_dir = config.train.output_dir
    os.makedirs(out_dir, exist_ok=True)
    if utterances is None:
        utterances = load_corpus(config)
    if noise_corpus is None and config.augment.noise_manifest:
        noise_corpus = NoiseCorpus.from_manifest(config.augment.noise_manifest)

    rng = np.random.default_rng(config.train.seed)
    model = model_config_from(config)
    state = TrainingState(store=init_model(model, rng), adam=AdamState(), rng=rng)
    metrics_mode = "w"
    if config.train.resume:
        restore_state(state, config.train.resume)
        metrics_mode = "a"

    workers = 1 if config.train.deterministic else max(1, settings.augment_workers)
    total = config.optimizer.total_steps
    final_path = os.path.join(out_dir, "final.ckpt")
    records = []

    with ThreadPoolExecutor(max_workers=workers) as pool, \
            open(os.path.join(out_dir, METRICS_FILENAME), metrics_mode) as metrics:
        if total == 0 or state.step >= total:
            write_checkpoint(state, config, final_path)
            return records

        while state.step < total:
            source, target = assemble_batch(utterances, noise_corpus, config, state.rng, pool)
            entry = training_step(state, model, config, source, target)
            state.step += 1
            note_skip(state, entry is None)
            if entry is not None:
                metrics.write(ujson.dumps(entry) + "\n")
                metrics.flush()
                records.append(entry)
                log.info(f"step {entry['step']}: loss {entry['loss']:.4f} contrastive {entry['contrastive']:.4f} "
                         f"accuracy {entry['accuracy']:.3f} lr {entry['lr']:.2e}")
            if state.step % config.train.checkpoint_every == 0 and state.step < total:
                write_checkpoint(state, config, os.path.join(out_dir, f"step-{state.step}.ckpt"))

        write_checkpoint(state, config, final_path)
    return records
