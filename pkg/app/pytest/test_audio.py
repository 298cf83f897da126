import numpy as np
import pytest
from scipy.io import wavfile

from app.internal.audio import (
    AudioBuffer,
    AudioFormatError,
    ManifestParseError,
    load_manifest,
    read_wav,
    resample,
    write_wav,
)

from .mock import sine, write_pcm16


def test_read_silence(tmp_path):
    path = tmp_path / "zeros.wav"
    wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
    audio = read_wav(path)
    assert audio.sample_rate == 16000
    assert len(audio) == 16000
    assert not audio.samples.any()


def test_read_pcm16_scaling(tmp_path):
    path = tmp_path / "scale.wav"
    wavfile.write(path, 16000, np.array([-32768, 16384, 0], dtype=np.int16))
    np.testing.assert_array_equal(read_wav(path).samples, [-1.0, 0.5, 0.0])


def test_read_float32(tmp_path):
    path = tmp_path / "float.wav"
    wavfile.write(path, 8000, np.array([0.25, -0.75], dtype=np.float32))
    audio = read_wav(path)
    assert audio.sample_rate == 8000
    np.testing.assert_array_equal(audio.samples, [0.25, -0.75])


def test_pcm16_survives_read_and_write(tmp_path):
    data = np.random.default_rng(0).integers(-32768, 32768, size=4000).astype(np.int16)
    src, dst = tmp_path / "src.wav", tmp_path / "dst.wav"
    wavfile.write(src, 16000, data)
    assert write_wav(read_wav(src), dst) == 0
    _, written = wavfile.read(dst)
    np.testing.assert_array_equal(written, data)


def test_rejects_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 16000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(AudioFormatError, match="fmt "):
        read_wav(path)


def test_rejects_pcm32(tmp_path):
    path = tmp_path / "pcm32.wav"
    wavfile.write(path, 16000, np.zeros(100, dtype=np.int32))
    with pytest.raises(AudioFormatError, match="fmt "):
        read_wav(path)


def test_write_silence(tmp_path):
    path = tmp_path / "silence.wav"
    write_wav(AudioBuffer(np.zeros(50), 16000), path)
    _, data = wavfile.read(path)
    assert data.dtype == np.int16
    assert not data.any()


def test_write_clamps_full_scale(tmp_path):
    path = tmp_path / "full.wav"
    buffer = AudioBuffer(np.array([1.0, -1.0, 1.5]), 16000)
    assert write_wav(buffer, path) == 1
    assert "clipped" in buffer.flags
    _, data = wavfile.read(path)
    np.testing.assert_array_equal(data, [32767, -32768, 32767])


def test_write_header_of_one_sample(tmp_path):
    path = tmp_path / "one.wav"
    write_wav(AudioBuffer(np.array([0.1]), 16000), path)
    raw = path.read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
    assert int.from_bytes(raw[24:28], "little") == 16000
    data = raw.index(b"data")
    assert int.from_bytes(raw[data + 4:data + 8], "little") == 2


def test_resample_to_same_rate_is_identity():
    buffer = AudioBuffer(sine(440.0, 1000), 16000)
    out = resample(buffer, 16000)
    assert out is not buffer
    np.testing.assert_array_equal(out.samples, buffer.samples)


def test_resample_length_and_pitch():
    out = resample(AudioBuffer(sine(440.0), 16000), 8000)
    assert out.sample_rate == 8000
    assert len(out) == 8000
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out), 1 / 8000)
    assert abs(freqs[np.argmax(spectrum)] - 440.0) <= 1.0


def test_resample_is_linear():
    x = np.random.default_rng(1).standard_normal(3000) * 0.1
    a = resample(AudioBuffer(x, 16000), 11025).samples
    b = resample(AudioBuffer(0.37 * x, 16000), 11025).samples
    np.testing.assert_allclose(b, 0.37 * a, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("target_rate", [8000, 22050])
def test_resample_preserves_band_limited_energy(target_rate):
    x = sine(440.0) + sine(1250.0, amplitude=0.2)
    out = resample(AudioBuffer(x, 16000), target_rate).samples
    ratio_db = 10 * np.log10(np.mean(out ** 2) / np.mean(x ** 2))
    assert abs(ratio_db) < 1.0


def test_resample_rejects_bad_rate():
    with pytest.raises(ValueError):
        resample(AudioBuffer(np.zeros(10), 16000), 0)


def test_manifest_with_empty_body(tmp_path):
    manifest = tmp_path / "empty.tsv"
    manifest.write_text("/data/corpus\n")
    assert load_manifest(manifest) == []


def test_manifest_entries_in_order(tmp_path):
    manifest = tmp_path / "train.tsv"
    manifest.write_text("/data/corpus\nb/two.wav\t32000\na/one.wav\t16000\n")
    entries = load_manifest(manifest)
    assert [e.path for e in entries] == ["/data/corpus/b/two.wav", "/data/corpus/a/one.wav"]
    assert [e.num_samples for e in entries] == [32000, 16000]


def test_manifest_relative_root(tmp_path):
    manifest = tmp_path / "train.tsv"
    manifest.write_text("audio\nx.wav\t10\n")
    assert load_manifest(manifest)[0].path == str(tmp_path / "audio" / "x.wav")


@pytest.mark.parametrize(
    ("body", "match"),
    [
        ("/root\na.wav\t10\nb.wav\tten\n", "line 3"),
        ("/root\na.wav 10\n", "line 2"),
        ("/root\na.wav\t-4\n", "line 2"),
    ],
)
def test_manifest_parse_errors(tmp_path, body, match):
    manifest = tmp_path / "bad.tsv"
    manifest.write_text(body)
    with pytest.raises(ManifestParseError, match=match):
        load_manifest(manifest)


def test_strict_manifest_checks_lengths(tmp_path):
    write_pcm16(tmp_path / "a.wav", np.zeros(120))
    manifest = tmp_path / "train.tsv"
    manifest.write_text(".\na.wav\t120\n")
    assert load_manifest(manifest, strict=True)[0].num_samples == 120

    manifest.write_text(".\na.wav\t100\n")
    load_manifest(manifest)
    with pytest.raises(ManifestParseError, match="120"):
        load_manifest(manifest, strict=True)
