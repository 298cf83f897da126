from logging import getLogger

import numpy as np
from scipy.signal import fftconvolve

from app.const import MAX_ROOM_SCALE, MAX_RT60_SECONDS

from . import AugmentConfigError, RoomImpulseResponse


log = getLogger("SSL")

DECAY_DB = 60.0


def rt60_for(room_scale):
    return (room_scale / MAX_ROOM_SCALE) * MAX_RT60_SECONDS


def drr_for(room_scale):
    """Direct-to-reverberant energy ratio in dB."""
    return 20.0 * (1.0 - room_scale / MAX_ROOM_SCALE) + 3.0


def synthesize_rir(room_scale, rir_seed, sample_rate):
    """Unit direct path followed by exponentially decaying Gaussian noise.

    The tail amplitude envelope is exp(-t / tau) with tau = RT60 / ln(1000),
    cut where it falls below -60 dB, and scaled to the room's DRR.
    """
    if not 0.0 <= room_scale <= MAX_ROOM_SCALE:
        raise AugmentConfigError(f"room_scale {room_scale} outside [0, {MAX_ROOM_SCALE:.0f}]")
    rt60 = rt60_for(room_scale)
    length = int(np.floor(rt60 * sample_rate))
    if length < 1:
        return RoomImpulseResponse(np.ones(1), sample_rate)

    tau = rt60 / np.log(10.0 ** (DECAY_DB / 20.0))
    t = np.arange(1, length + 1) / sample_rate
    rng = np.random.default_rng(rir_seed)
    tail = rng.standard_normal(length) * np.exp(-t / tau)

    energy = float(np.sum(tail * tail))
    target = 10.0 ** (-drr_for(room_scale) / 10.0)
    tail *= np.sqrt(target / energy)
    return RoomImpulseResponse(np.concatenate([[1.0], tail]), sample_rate)


def apply_reverb(audio, rir):
    if audio.sample_rate != rir.sample_rate:
        raise AugmentConfigError(f"RIR at {rir.sample_rate} Hz cannot be applied to audio at {audio.sample_rate} Hz")
    if len(rir) == 1 and rir.taps[0] == 1.0:
        return audio.replace(audio.samples.copy())

    out = fftconvolve(audio.samples, rir.taps, mode="full")[:len(audio)]
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    return audio.replace(out)
