from logging import getLogger

import numpy as np

from app.const import NOISE_OFFSET_RETRIES, SILENCE_RMS
from app.internal.audio import rms

from . import AugmentConfigError


log = getLogger("SSL")


def noise_segment(noise, length, offset):
    """`length` samples of `noise` starting at `offset`, tiled cyclically."""
    idx = (offset + np.arange(length)) % noise.shape[0]
    return noise[idx]


def noise_gain(clean_rms, noise_rms, snr_db):
    return (clean_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)


def mix_additive(clean, noise, snr_db, offset=0):
    """Add `noise` to `clean` so that rms(clean) / rms(added noise) is `snr_db`.

    The noise clip is tiled from `offset` to the clean length. A silent
    segment moves the offset forward by a fixed stride, up to
    NOISE_OFFSET_RETRIES times.
    """
    if clean.sample_rate != noise.sample_rate:
        raise AugmentConfigError(f"noise at {noise.sample_rate} Hz cannot be mixed into audio at {clean.sample_rate} Hz")
    if len(noise) == 0:
        raise AugmentConfigError("noise clip is empty")

    clean_rms = rms(clean.samples)
    if clean_rms < SILENCE_RMS:
        log.warning("mix_additive: clean signal is silent, leaving it unchanged")
        return clean.replace(clean.samples.copy(), flags=("silent_clean",))

    n = len(clean)
    stride = max(1, len(noise) // NOISE_OFFSET_RETRIES)
    offset = offset % len(noise)
    for attempt in range(NOISE_OFFSET_RETRIES):
        segment = noise_segment(noise.samples, n, offset + attempt * stride)
        noise_rms = rms(segment)
        if noise_rms >= SILENCE_RMS:
            break
    else:
        log.warning("mix_additive: noise clip is silent at every offset tried, leaving audio unchanged")
        return clean.replace(clean.samples.copy(), flags=("silent_noise",))

    gain = noise_gain(clean_rms, noise_rms, snr_db)
    return clean.replace(clean.samples + gain * segment)


def measured_snr(clean, mixed):
    added = mixed - clean
    return 20.0 * np.log10(rms(clean) / rms(added))
