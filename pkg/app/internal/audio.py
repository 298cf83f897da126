import os
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from pydantic import BaseModel, Field
from scipy.io import wavfile

from app.const import KAISER_BETA, RESAMPLE_CUTOFF, RESAMPLE_ZERO_CROSSINGS


log = getLogger("SSL")


class AudioFormatError(Exception):
    """Raised when a WAV file is not mono PCM16 or IEEE float32

    Attributes:
        msg -- error message naming the offending chunk
    """

    def __init__(self, msg="unsupported WAV file"):
        self.msg = msg
        super().__init__(self.msg)


class ManifestParseError(Exception):
    """Raised on a malformed manifest line

    Attributes:
        msg -- error message citing the line number
    """

    def __init__(self, msg="malformed manifest"):
        self.msg = msg
        super().__init__(self.msg)


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    # anomalies noticed along the way, e.g. "clipped", "silent_clean", "pitch_clamped"
    flags: set = field(default_factory=set)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"audio must be mono, got array of shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioFormatError(f"invalid sample rate {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate

    def replace(self, samples, flags=()):
        return AudioBuffer(samples, self.sample_rate, self.flags | set(flags))


class ManifestEntry(BaseModel):
    path: str
    num_samples: int = Field(ge=0)


def rms(samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(samples * samples)))


def read_wav(path):
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise AudioFormatError(f"{path}: {e}")

    if data.ndim != 1:
        raise AudioFormatError(f"{path}: 'fmt ' chunk declares {data.shape[1]} channels, only mono is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: 'fmt ' chunk codec gives {data.dtype} samples, expected PCM16 or float32")

    if not np.all(np.isfinite(samples)):
        raise AudioFormatError(f"{path}: 'data' chunk holds non-finite samples")
    return AudioBuffer(samples, int(rate))


def write_wav(buffer, path, encoding="pcm16"):
    """Write `buffer`; returns the number of samples clipped to [-1, 1]."""
    samples = buffer.samples
    clipped = int(np.count_nonzero(np.abs(samples) > 1.0))
    if clipped:
        buffer.flags.add("clipped")
        log.warning(f"write_wav: {clipped} samples clipped writing {path}")

    if encoding == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = np.clip(samples, -1.0, 1.0).astype(np.float32)
    else:
        raise AudioFormatError(f"unknown encoding {encoding}")

    wavfile.write(path, buffer.sample_rate, data)
    return clipped


def _kaiser(x, half_width):
    inside = np.abs(x) < half_width
    arg = np.sqrt(np.clip(1.0 - (x / half_width) ** 2, 0.0, None))
    return np.where(inside, np.i0(KAISER_BETA * arg) / np.i0(KAISER_BETA), 0.0)


def resample_ratio(samples, ratio, length=None):
    """Band-limited resampling of `samples` by a real `ratio` (output rate / input rate)."""
    samples = np.asarray(samples, dtype=np.float64)
    if ratio <= 0:
        raise ValueError(f"resampling ratio must be positive, got {ratio}")
    n = samples.shape[0]
    if length is None:
        length = int(round(n * ratio))
    if ratio == 1.0 and length == n:
        return samples.copy()
    if n == 0 or length == 0:
        return np.zeros(length)

    # cutoff relative to the input Nyquist
    cutoff = RESAMPLE_CUTOFF * min(1.0, ratio)
    half_width = RESAMPLE_ZERO_CROSSINGS / cutoff
    taps = int(np.ceil(half_width))

    t = np.arange(length) / ratio
    base = np.floor(t).astype(np.int64)
    offsets = np.arange(-taps, taps + 1)
    idx = base[:, None] + offsets[None, :]
    x = t[:, None] - idx
    kernel = cutoff * np.sinc(cutoff * x) * _kaiser(x, half_width)
    valid = (idx >= 0) & (idx < n)
    gathered = np.where(valid, samples[np.clip(idx, 0, n - 1)], 0.0)
    return (gathered * kernel).sum(axis=1)


def resample(buffer, target_rate):
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return AudioBuffer(buffer.samples.copy(), buffer.sample_rate, set(buffer.flags))
    out = resample_ratio(buffer.samples, target_rate / buffer.sample_rate)
    return AudioBuffer(out, int(target_rate), set(buffer.flags))


def load_manifest(path, strict=False):
    """Parse a manifest: a root directory line, then `relative_path<TAB>num_samples` lines.

    A relative root is taken relative to the manifest's own directory. With
    `strict`, every file's sample count is checked against its header.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ManifestParseError(f"{path}: line 1: missing root directory")

    root = lines[0].strip()
    if not os.path.isabs(root):
        root = os.path.join(os.path.dirname(os.path.abspath(path)), root)

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestParseError(f"{path}: line {lineno}: expected 'path<TAB>num_samples'")
        rel, count = parts
        try:
            num_samples = int(count.strip())
        except ValueError:
            raise ManifestParseError(f"{path}: line {lineno}: sample count '{count}' is not an integer")
        if num_samples < 0:
            raise ManifestParseError(f"{path}: line {lineno}: negative sample count")
        entries.append(ManifestEntry(path=os.path.join(root, rel.strip()), num_samples=num_samples))

    if strict:
        for entry in entries:
            _, data = wavfile.read(entry.path, mmap=True)
            if data.shape[0] != entry.num_samples:
                raise ManifestParseError(
                    f"{path}: {entry.path} has {data.shape[0]} samples, manifest says {entry.num_samples}")

    log.debug(f"loaded {len(entries)} manifest entries from {path}")
    return entries
