import threading
from logging import getLogger

import numpy as np
from scipy import stats

from app.const import MAX_ROOM_SCALE, SAMPLE_RATE
from app.internal.audio import AudioBuffer, load_manifest, read_wav, resample

from . import AdditivePlan, AugmentConfigError, AugmentationPlan, PitchPlan, ReverbPlan
from .additive import measured_snr, mix_additive
from .pitch import pitch_shift
from .reverb import apply_reverb, synthesize_rir


log = getLogger("SSL")

SEED_RANGE = 2**31


class NoiseCorpus:
    """Noise clips addressed by index, loaded on first use and resampled to `sample_rate`."""

    def __init__(self, paths=(), sample_rate=SAMPLE_RATE, buffers=None):
        self.paths = list(paths)
        self.sample_rate = sample_rate
        self._cache = {}
        self._lock = threading.Lock()
        if buffers is not None:
            self.paths = [None] * len(buffers)
            for i, buf in enumerate(buffers):
                self._cache[i] = self._conform(buf)

    @classmethod
    def from_manifest(cls, path, sample_rate=SAMPLE_RATE, strict=False):
        entries = load_manifest(path, strict=strict)
        log.info(f"noise corpus: {len(entries)} clips from {path}")
        return cls([e.path for e in entries], sample_rate=sample_rate)

    def _conform(self, buf):
        if buf.sample_rate != self.sample_rate:
            buf = resample(buf, self.sample_rate)
        return buf

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        with self._lock:
            buf = self._cache.get(index)
        if buf is None:
            buf = self._conform(read_wav(self.paths[index]))
            with self._lock:
                self._cache[index] = buf
        return buf


def sample_plan(rng, config, noise_corpus_size):
    """Draw one augmentation plan.

    The same number of values is drawn from `rng` whatever the outcome, so
    switching one method off does not change the plans of the others.
    """
    use_additive = rng.random() < config.apply_prob
    snr_db = rng.uniform(config.snr_low, config.snr_high)
    noise_index = int(rng.integers(max(noise_corpus_size, 1)))
    noise_offset = int(rng.integers(SEED_RANGE))

    use_pitch = rng.random() < config.apply_prob
    shift_cents = rng.normal(0.0, config.pitch_sigma)

    use_reverb = rng.random() < config.apply_prob
    room_scale = min(abs(rng.normal(0.0, config.room_sigma)), MAX_ROOM_SCALE)
    rir_seed = int(rng.integers(SEED_RANGE))

    plan = AugmentationPlan()
    if use_additive and config.additive:
        if noise_corpus_size < 1:
            raise AugmentConfigError("additive noise selected but the noise corpus is empty")
        plan.additive = AdditivePlan(noise_index=noise_index, noise_offset=noise_offset, snr_db=float(snr_db))
    if use_pitch and config.pitch:
        plan.pitch = PitchPlan(shift_cents=float(shift_cents))
    if use_reverb and config.reverb:
        plan.reverb = ReverbPlan(room_scale=float(room_scale), rir_seed=rir_seed)
    return plan


def fit_length(audio, length):
    n = len(audio)
    if n == length:
        return audio
    if n > length:
        return audio.replace(audio.samples[:length])
    return audio.replace(np.pad(audio.samples, (0, length - n)))


def apply_plan(audio, plan, noise_corpus=None):
    """Pitch, then reverb, then additive noise; output has the input's length."""
    out = audio
    if plan.pitch is not None:
        out = pitch_shift(out, plan.pitch.shift_cents)
    if plan.reverb is not None:
        rir = synthesize_rir(plan.reverb.room_scale, plan.reverb.rir_seed, out.sample_rate)
        out = apply_reverb(out, rir)
    if plan.additive is not None:
        if noise_corpus is None or len(noise_corpus) == 0:
            raise AugmentConfigError("plan adds noise but no noise corpus was given")
        noise = noise_corpus[plan.additive.noise_index]
        out = mix_additive(out, noise, plan.additive.snr_db, offset=plan.additive.noise_offset)
    if out is audio:
        out = audio.replace(audio.samples.copy())
    return fit_length(out, len(audio))


def augment_pair(audio, noise_corpus, rng, config):
    """Two independently augmented copies: (source for the context path, target for the quantizer path)."""
    size = len(noise_corpus) if noise_corpus is not None else 0
    source_plan = sample_plan(rng, config, size)
    target_plan = sample_plan(rng, config, size)
    log.debug(f"augment_pair: source {source_plan.methods()}, target {target_plan.methods()}")
    source = apply_plan(audio, source_plan, noise_corpus)
    target = apply_plan(audio, target_plan, noise_corpus)
    return source, target


def augment_statistics(config, trials, seed=0, mix_trials=200):
    """Empirical statistics of the augmentation sampler.

    Draws `trials` plans, and mixes synthetic noise into a synthetic tone for
    up to `mix_trials` of the additive ones to measure the realized SNR.
    """
    rng = np.random.default_rng(seed)
    counts = {"additive": 0, "pitch": 0, "reverb": 0}
    snr, cents, rooms = [], [], []
    for _ in range(trials):
        plan = sample_plan(rng, config, 1)
        for method in plan.methods():
            counts[method] += 1
        if plan.additive is not None:
            snr.append(plan.additive.snr_db)
        if plan.pitch is not None:
            cents.append(plan.pitch.shift_cents)
        if plan.reverb is not None:
            rooms.append(plan.reverb.room_scale)

    report = {
        "trials": trials,
        "rate": {k: v / trials if trials else 0.0 for k, v in counts.items()},
    }
    if snr:
        width = config.snr_high - config.snr_low
        if width > 0:
            ks = stats.kstest(snr, stats.uniform(loc=config.snr_low, scale=width).cdf).statistic
        else:
            ks = 0.0
        report["snr"] = {"mean": float(np.mean(snr)), "std": float(np.std(snr)), "ks": float(ks)}
    if cents:
        report["pitch"] = {"mean": float(np.mean(cents)), "std": float(np.std(cents, ddof=1)) if len(cents) > 1 else 0.0}
    if rooms:
        report["room_scale"] = {"mean": float(np.mean(rooms)), "max": float(np.max(rooms))}

    mix_rng = np.random.default_rng(seed + 1)
    t = np.arange(1600) / SAMPLE_RATE
    clean = AudioBuffer(0.5 * np.sin(2 * np.pi * 440.0 * t), SAMPLE_RATE)
    noise = AudioBuffer(mix_rng.standard_normal(4000) * 0.1, SAMPLE_RATE)
    errors = []
    for target in snr[:mix_trials]:
        offset = int(mix_rng.integers(len(noise)))
        mixed = mix_additive(clean, noise, target, offset=offset)
        errors.append(abs(measured_snr(clean.samples, mixed.samples) - target))
    if errors:
        report["snr"]["max_mix_error_db"] = float(np.max(errors))
    return report
