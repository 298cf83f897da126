from pathlib import Path

import numpy as np
from scipy.io import wavfile

from app.const import DIR_PRESETS, SAMPLE_RATE
from app.internal.audio import AudioBuffer
from app.internal.config import load_config


PRESETS = Path(__file__).parents[2] / DIR_PRESETS
TOY_PRESET = PRESETS / "toy.ini"
FULL_SCALE_PRESET = PRESETS / "full-scale.ini"

# a network small enough to train a few steps inside a unit test
TINY_OVERRIDES = [
    "context.kind=conformer",
    "context.num_blocks=1",
    "context.model_dim=16",
    "context.num_heads=2",
    "context.ffn_dim=32",
    "context.depthwise_kernel=3",
    "context.pos_kernel=3",
    "context.pos_groups=2",
    "context.dropout=0.1",
    "quantizer.entries_per_group=4",
    "quantizer.target_dim=8",
    "objective.num_distractors=4",
    "objective.feature_dropout=0.1",
    "mask.span_len=3",
    "mask.mask_prob=0.2",
    "heads.layers=2",
    "batch.examples_per_batch=2",
    "batch.crop_samples=4000",
    "optimizer.warmup_steps=1",
    "optimizer.total_steps=3",
    "train.checkpoint_every=2",
]


def sine(freq, num_samples=SAMPLE_RATE, amplitude=0.5, sample_rate=SAMPLE_RATE):
    t = np.arange(num_samples) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t)


def white_noise(num_samples, seed=0, scale=0.1):
    return scale * np.random.default_rng(seed).standard_normal(num_samples)


def sine_buffer(freq=440.0, num_samples=SAMPLE_RATE, amplitude=0.5):
    return AudioBuffer(sine(freq, num_samples, amplitude), SAMPLE_RATE)


def noise_buffer(num_samples=8000, seed=0, scale=0.1):
    return AudioBuffer(white_noise(num_samples, seed, scale), SAMPLE_RATE)


def utterance(seed, num_samples=SAMPLE_RATE):
    """A harmonic tone with a drifting fundamental plus a little noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_samples) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 250.0) * (1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    wave = sum(np.sin(h * phase) / h for h in range(1, 6))
    wave += 0.05 * rng.standard_normal(num_samples)
    return AudioBuffer(0.3 * wave / np.max(np.abs(wave)), SAMPLE_RATE)


def write_pcm16(path, samples, sample_rate=SAMPLE_RATE):
    data = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, data)


def write_manifest(directory, buffers, name="train.tsv"):
    """Write `buffers` as PCM16 files under `directory` plus a manifest listing them."""
    directory = Path(directory)
    lines = ["."]
    for i, buf in enumerate(buffers):
        write_pcm16(directory / f"clip{i}.wav", buf.samples, buf.sample_rate)
        lines.append(f"clip{i}.wav\t{len(buf)}")
    manifest = directory / name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def tiny_config(tmp_path, *overrides):
    return load_config(TOY_PRESET, [*TINY_OVERRIDES, f"train.output_dir={tmp_path}", *overrides])
