from logging import getLogger

import numpy as np
from scipy.signal import get_window

from app.const import MAX_PITCH_SHIFT_CENTS, WSOLA_TOLERANCE_SECONDS, WSOLA_WINDOW_SECONDS
from app.internal.audio import resample_ratio


log = getLogger("SSL")


def time_stretch(samples, length, sample_rate):
    """Waveform-similarity overlap-add: change duration to `length` samples, keep pitch.

    Hann windows of 25 ms at 50% overlap; each analysis frame is shifted by up
    to 5 ms to best match the natural continuation of the previous frame.
    """
    samples = np.asarray(samples, dtype=np.float64)
    m = samples.shape[0]
    if m == length:
        return samples.copy()
    if m == 0 or length == 0:
        return np.zeros(length)

    window = max(4, int(round(WSOLA_WINDOW_SECONDS * sample_rate)))
    window += window % 2
    hop = window // 2
    tol = int(round(WSOLA_TOLERANCE_SECONDS * sample_rate))
    alpha = m / length
    win = get_window("hann", window, fftbins=True)

    # output index j holds stretched sample j - hop, so every kept sample has two frames over it
    n_frames = int(np.ceil((length + hop) / hop)) + 1
    lead = int(np.ceil(hop * alpha)) + tol
    tail = int(np.ceil(n_frames * hop * alpha)) + window + 2 * tol
    padded = np.pad(samples, (lead, tail))

    out = np.zeros(n_frames * hop + window)
    norm = np.zeros_like(out)
    prev = None
    for k in range(n_frames):
        nominal = int(round((k * hop - hop) * alpha)) + lead
        if prev is None:
            pos = nominal
        else:
            target = padded[prev + hop:prev + hop + window]
            lo = max(nominal - tol, 0)
            region = padded[lo:nominal + tol + window]
            corr = np.correlate(region, target, mode="valid")
            if corr.size == 0 or np.all(corr == corr[0]):
                pos = nominal
            else:
                pos = lo + int(np.argmax(corr))
        out[k * hop:k * hop + window] += win * padded[pos:pos + window]
        norm[k * hop:k * hop + window] += win
        prev = pos

    out = out[hop:hop + length]
    norm = norm[hop:hop + length]
    return np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)


def pitch_shift(audio, shift_cents):
    """Shift pitch by `shift_cents` while keeping the duration."""
    flags = ()
    if abs(shift_cents) > MAX_PITCH_SHIFT_CENTS:
        log.warning(f"pitch_shift: {shift_cents:.1f} cents clamped to +/-{MAX_PITCH_SHIFT_CENTS:.0f}")
        shift_cents = float(np.clip(shift_cents, -MAX_PITCH_SHIFT_CENTS, MAX_PITCH_SHIFT_CENTS))
        flags = ("pitch_clamped",)
    if shift_cents == 0.0:
        return audio.replace(audio.samples.copy(), flags=flags)

    factor = 2.0 ** (shift_cents / 1200.0)
    shifted = resample_ratio(audio.samples, 1.0 / factor)
    return audio.replace(time_stretch(shifted, len(audio), audio.sample_rate), flags=flags)
