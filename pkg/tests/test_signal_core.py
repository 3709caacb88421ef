"""Waveform, WAV I/O, resampling, STFT and level-measurement tests.

Derived-value cases use independent oracles: analytic sine generation for the
resampler, direct DFT evaluation for the STFT, and hand-trimmed references for
the active-level meter.
"""

from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from conftest import speech_like
from ovrlab.errors import (
    AudioFormatError,
    ConfigMismatchError,
    SilentSignalError,
    TruncatedFileError,
)
from ovrlab.signal_core import (
    Spectrogram,
    StftConfig,
    Waveform,
    active_level,
    istft,
    load_wav,
    resample,
    rms_level,
    save_wav,
    stft,
)


# ---------------------------------------------------------------------------
# Waveform type
# ---------------------------------------------------------------------------


def test_waveform_shapes_and_validation():
    w = Waveform(np.zeros((2, 100)), 16000)
    assert w.channel_count == 2
    assert w.num_samples == 100
    assert w.duration == pytest.approx(100 / 16000)
    mono = Waveform.from_mono(np.zeros(10), 8000)
    assert mono.channel_count == 1
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 3, 4)), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros((1, 10)), 0)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)), 16000).mono()


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def test_wav_16bit_full_scale_normalization(tmp_path):
    # constant value 16384 in int16 is exactly half of full scale 2^15
    path = tmp_path / "c.wav"
    payload = np.full(1000, 16384, dtype="<i2").tobytes()
    _write_raw_wav(path, payload, channels=1, rate=16000, bits=16, fmt=1)
    w = load_wav(path)
    assert w.channel_count == 1
    assert w.sample_rate == 16000
    np.testing.assert_allclose(w.samples, 0.5)


def test_wav_roundtrip_32f_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 777)).astype(np.float32).astype(np.float64)
    w = Waveform(x, 44100)
    info = save_wav(w, tmp_path / "w.wav", bit_depth="32f")
    assert not info.clipped
    back = load_wav(tmp_path / "w.wav")
    assert back.sample_rate == 44100
    np.testing.assert_array_equal(back.samples, x)


def test_wav_roundtrip_16bit_quantization_bound(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (1, 5000))
    w = Waveform(x, 16000)
    save_wav(w, tmp_path / "w.wav", bit_depth="16")
    back = load_wav(tmp_path / "w.wav")
    assert np.max(np.abs(back.samples - x)) <= 2.0**-15


def test_wav_roundtrip_24bit(tmp_path):
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (2, 3001))
    save_wav(Waveform(x, 48000), tmp_path / "w.wav", bit_depth="24")
    back = load_wav(tmp_path / "w.wav")
    assert back.channel_count == 2
    assert np.max(np.abs(back.samples - x)) <= 2.0**-23
    # negative values must sign-extend correctly
    y = np.array([[-1.0, -0.5, -2.0**-23, 2.0**-23]])
    save_wav(Waveform(y, 48000), tmp_path / "n.wav", bit_depth="24")
    back = load_wav(tmp_path / "n.wav")
    np.testing.assert_allclose(back.samples, y, atol=2.0**-23)


def test_wav_clipping_flag(tmp_path):
    x = np.array([[0.0, 1.5, -2.0, 0.5]])
    info = save_wav(Waveform(x, 8000), tmp_path / "c.wav", bit_depth="16")
    assert info.clipped
    assert info.clipped_samples == 2
    back = load_wav(tmp_path / "c.wav")
    assert np.max(back.samples) <= 1.0
    # float output keeps values verbatim, nothing clipped
    info = save_wav(Waveform(x, 8000), tmp_path / "f.wav", bit_depth="32f")
    assert not info.clipped
    np.testing.assert_array_equal(load_wav(tmp_path / "f.wav").samples, x)


def test_wav_zero_length_data_chunk(tmp_path):
    path = tmp_path / "e.wav"
    _write_raw_wav(path, b"", channels=2, rate=22050, bits=16, fmt=1)
    w = load_wav(path)
    assert w.channel_count == 2
    assert w.num_samples == 0
    assert w.sample_rate == 22050


def test_wav_malformed_header_is_format_error(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"OGGS" + b"\x00" * 100)
    with pytest.raises(AudioFormatError):
        load_wav(path)
    (tmp_path / "notwave.wav").write_bytes(b"RIFF\x10\x00\x00\x00AVI " + b"\x00" * 16)
    with pytest.raises(AudioFormatError):
        load_wav(tmp_path / "notwave.wav")


def test_wav_truncated_is_distinct_error(tmp_path):
    path = tmp_path / "t.wav"
    payload = np.zeros(1000, dtype="<i2").tobytes()
    _write_raw_wav(path, payload, channels=1, rate=16000, bits=16, fmt=1)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 500])  # chop the data chunk
    with pytest.raises(TruncatedFileError):
        load_wav(path)


def test_wav_unsupported_format_is_format_error(tmp_path):
    path = tmp_path / "u.wav"
    _write_raw_wav(path, b"\x00" * 100, channels=1, rate=8000, bits=8, fmt=1)
    with pytest.raises(AudioFormatError):
        load_wav(path)
    _write_raw_wav(path, b"\x00" * 100, channels=1, rate=8000, bits=16, fmt=6)  # A-law
    with pytest.raises(AudioFormatError):
        load_wav(path)


def test_wav_extensible_format(tmp_path):
    # WAVE_FORMAT_EXTENSIBLE wrapping PCM16 must load like plain PCM16
    path = tmp_path / "x.wav"
    payload = np.full(64, -16384, dtype="<i2").tobytes()
    guid = struct.pack("<H", 1) + b"\x00\x00" + b"\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"
    fmt_body = struct.pack("<HHIIHH", 0xFFFE, 1, 16000, 32000, 2, 16)
    fmt_body += struct.pack("<HHI", 22, 16, 0x4) + guid
    chunks = struct.pack("<4sI", b"fmt ", len(fmt_body)) + fmt_body
    chunks += struct.pack("<4sI", b"data", len(payload)) + payload
    path.write_bytes(struct.pack("<4sI4s", b"RIFF", 4 + len(chunks), b"WAVE") + chunks)
    w = load_wav(path)
    np.testing.assert_allclose(w.samples, -0.5)


def _write_raw_wav(path, payload, channels, rate, bits, fmt):
    frame = channels * bits // 8
    fmt_body = struct.pack("<HHIIHH", fmt, channels, rate, rate * frame, frame, bits)
    chunks = struct.pack("<4sI", b"fmt ", len(fmt_body)) + fmt_body
    chunks += struct.pack("<4sI", b"data", len(payload)) + payload
    path.write_bytes(struct.pack("<4sI4s", b"RIFF", 4 + len(chunks), b"WAVE") + chunks)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def test_resample_identity():
    w = speech_like(0.3, 16000, seed=3)
    out = resample(w, 16000)
    np.testing.assert_array_equal(out.samples, w.samples)
    assert out.sample_rate == 16000


def test_resample_sine_16k_to_10k_against_analytic_oracle():
    # oracle: the same 1 kHz sine generated analytically on the 10 kHz grid
    sr, tr, f = 16000, 10000, 1000.0
    t = np.arange(16000) / sr
    w = Waveform.from_mono(np.sin(2 * np.pi * f * t), sr)
    out = resample(w, tr)
    assert out.num_samples == round(16000 * tr / sr)
    oracle = np.sin(2 * np.pi * f * np.arange(out.num_samples) / tr)
    core = slice(400, out.num_samples - 400)  # steady state
    got, want = out.samples[0][core], oracle[core]
    amp_err_db = 20 * np.log10(np.sqrt(np.mean(got**2)) / np.sqrt(np.mean(want**2)))
    assert abs(amp_err_db) < 0.1
    # alignment is sample-exact, so the pointwise error is also tiny
    assert np.max(np.abs(got - want)) < 1e-3


def test_resample_suppresses_above_target_nyquist():
    sr, tr = 16000, 10000
    t = np.arange(16000) / sr
    w = Waveform.from_mono(np.sin(2 * np.pi * 7000.0 * t), sr)
    out = resample(w, tr)
    core = out.samples[0][400:-400]
    residual_dbfs = 10 * np.log10(np.mean(core**2) + 1e-300)
    assert residual_dbfs < -40.0


def test_resample_output_length_rounding():
    # 101 samples 16k -> 44.1k: exact ratio gives 278.4 -> round to 278
    w = Waveform.from_mono(np.zeros(101), 16000)
    assert resample(w, 44100).num_samples == 278
    assert resample(Waveform.from_mono(np.zeros(0), 16000), 8000).num_samples == 0


def test_resample_linearity():
    rng = np.random.default_rng(4)
    a = Waveform.from_mono(rng.standard_normal(2000), 16000)
    b = Waveform.from_mono(rng.standard_normal(2000), 16000)
    lhs = resample(Waveform.from_mono(2.0 * a.samples[0] + 3.0 * b.samples[0], 16000), 10000)
    rhs = 2.0 * resample(a, 10000).samples[0] + 3.0 * resample(b, 10000).samples[0]
    assert np.max(np.abs(lhs.samples[0] - rhs)) < 1e-9


def test_resample_multichannel():
    rng = np.random.default_rng(5)
    w = Waveform(rng.standard_normal((2, 1600)), 16000)
    out = resample(w, 8000)
    assert out.samples.shape == (2, 800)
    ch0 = resample(w.channel(0), 8000)
    np.testing.assert_allclose(out.samples[0], ch0.samples[0], atol=1e-12)


# ---------------------------------------------------------------------------
# STFT / iSTFT
# ---------------------------------------------------------------------------


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(window_length=512, hop=300, fft_size=512)  # hop must divide
    with pytest.raises(ValueError):
        StftConfig(window_length=512, hop=256, fft_size=256)
    with pytest.raises(ValueError):
        StftConfig(window="blackman-ish")
    cfg = StftConfig()
    assert cfg.num_bins == 257


def test_stft_all_zero_and_frame_count():
    cfg = StftConfig()
    w = Waveform.from_mono(np.zeros(16000), 16000)
    spec = stft(w, cfg)
    assert spec.num_frames == math.ceil(16000 / 256)
    assert spec.num_bins == 257
    assert np.all(spec.bins == 0)


def test_stft_impulse_matches_direct_dft_oracle():
    # frame 0 sees the impulse at sample 0; its spectrum is the DFT of
    # window[0]*delta, i.e. constant magnitude window[0]... compute directly
    cfg = StftConfig()
    x = np.zeros(4096)
    x[0] = 1.0
    spec = stft(Waveform.from_mono(x, 16000), cfg)
    win = cfg.analysis_window()
    frame0 = np.zeros(cfg.fft_size)
    frame0[0] = win[0]
    oracle = np.fft.rfft(frame0)
    np.testing.assert_allclose(spec.bins[:, 0], oracle, atol=1e-12)
    # an impulse at sample 300 lands in frames 0 and 1 at different window taps
    x = np.zeros(4096)
    x[300] = 1.0
    spec = stft(Waveform.from_mono(x, 16000), cfg)
    frame1 = np.zeros(cfg.fft_size)
    frame1[300 - cfg.hop] = win[300 - cfg.hop]
    np.testing.assert_allclose(spec.bins[:, 1], np.fft.rfft(frame1), atol=1e-12)


def test_stft_bin_center_sine_concentration():
    cfg = StftConfig()
    sr = 16000
    k = 40  # bin center frequency k*sr/fft = 1250 Hz
    f = k * sr / cfg.fft_size
    n = np.arange(8192)
    x = np.cos(2 * np.pi * f * n / sr)
    spec = stft(Waveform.from_mono(x, sr), cfg)
    mid = spec.num_frames // 2  # fully-overlapped interior frame
    mags = np.abs(spec.bins[:, mid])
    # oracle: direct DFT of the windowed frame
    start = mid * cfg.hop
    frame = x[start : start + cfg.window_length] * cfg.analysis_window()
    oracle = np.abs(np.fft.rfft(frame, n=cfg.fft_size))
    np.testing.assert_allclose(mags, oracle, atol=1e-10)
    assert np.argmax(mags) == k
    # sqrt-Hann leakage: adjacent bins below peak, far bins far below
    assert mags[k] > 10 * mags[k + 3]


def test_istft_roundtrip_white_noise_interior():
    cfg = StftConfig()
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, 16000)
    w = Waveform.from_mono(x, 16000)
    back = istft(stft(w, cfg))
    assert back.num_samples == 16000
    half = cfg.window_length // 2
    err = np.abs(back.samples[0] - x)[half:-half]
    assert err.max() < 1e-6


def test_istft_roundtrip_zero_and_speech_snr():
    cfg = StftConfig()
    z = istft(stft(Waveform.from_mono(np.zeros(5000), 16000), cfg))
    assert np.all(z.samples == 0)
    w = speech_like(1.0, 16000, seed=8)
    back = istft(stft(w, cfg))
    half = cfg.window_length // 2
    x, y = w.samples[0][half:-half], back.samples[0][half:-half]
    snr = 10 * np.log10(np.sum(x**2) / np.sum((x - y) ** 2))
    assert snr > 120.0


def test_istft_grid_mismatch_raises():
    w = speech_like(0.5, 16000, seed=9)
    a = stft(w, StftConfig())
    b = stft(w, StftConfig(window_length=256, hop=128, fft_size=256))
    with pytest.raises(ConfigMismatchError):
        a.require_same_grid(b)


def test_parseval_consistency_with_window_compensation():
    # Per-frame Parseval: sum_k |X(k,l)|^2 over a full rfft equals
    # fft_size/2-ish... use the exact two-sided accounting: for real x,
    # E_frame = (|X_0|^2 + |X_K|^2 + 2*sum_middle |X_k|^2)/fft_size equals
    # sum_n (w[n] x[n])^2.  Summing over frames and dividing by the window
    # power envelope total recovers time-domain energy exactly for interior
    # coverage; tolerance covers edge taper.
    cfg = StftConfig()
    w = speech_like(1.0, 16000, seed=10)
    x = w.samples[0]
    spec = stft(w, cfg)
    mag2 = np.abs(spec.bins) ** 2
    frame_energy = (mag2[0] + mag2[-1] + 2 * mag2[1:-1].sum(axis=0)) / cfg.fft_size
    # window-power compensation: each sample n is weighted by sum_l w^2[n-l*hop],
    # which is 1.0 for sqrt-Hann at 50% overlap on the interior.
    stft_energy = frame_energy.sum()
    # compensate the edge taper analytically: first/last half-window samples
    # are covered once with weight w^2 instead of unity.
    win = cfg.analysis_window() ** 2
    half = cfg.window_length - cfg.hop
    edge_deficit = np.sum((1.0 - win[:half]) * x[:half] ** 2)
    tail = x[(spec.num_frames - 1) * cfg.hop :]
    pad = np.zeros(cfg.window_length)
    pad[: tail.size] = tail
    edge_deficit += np.sum((1.0 - win[half:]) * pad[half:] ** 2)
    time_energy = np.sum(x**2)
    assert abs(stft_energy + edge_deficit - time_energy) / time_energy < 1e-3


# ---------------------------------------------------------------------------
# Level measurement
# ---------------------------------------------------------------------------


def test_active_level_dc_full_scale():
    w = Waveform.from_mono(np.ones(16000), 16000)
    assert active_level(w) == pytest.approx(0.0, abs=1e-9)


def test_active_level_full_scale_sine():
    t = np.arange(16000) / 16000
    w = Waveform.from_mono(np.sin(2 * np.pi * 997.0 * t), 16000)
    assert active_level(w) == pytest.approx(20 * np.log10(1 / np.sqrt(2)), abs=0.01)


def test_active_level_ignores_leading_silence():
    # oracle: manually trimmed signal
    speech = speech_like(1.0, 16000, seed=11)
    padded = Waveform.from_mono(
        np.concatenate([np.zeros(16000), speech.samples[0]]), 16000
    )
    assert abs(active_level(padded) - active_level(speech)) < 0.2


def test_active_level_invariant_to_appended_silence():
    speech = speech_like(1.0, 16000, seed=12)
    for silence_s in (0.5, 2.0, 5.0):
        padded = Waveform.from_mono(
            np.concatenate([speech.samples[0], np.zeros(int(16000 * silence_s))]), 16000
        )
        assert abs(active_level(padded) - active_level(speech)) < 0.2


def test_active_level_silent_raises():
    with pytest.raises(SilentSignalError):
        active_level(Waveform.from_mono(np.zeros(16000), 16000))
    with pytest.raises(SilentSignalError):
        active_level(Waveform.from_mono(np.full(16000, 1e-9), 16000))
    with pytest.raises(SilentSignalError):
        active_level(Waveform.from_mono(np.zeros(0), 16000))


def test_rms_level():
    w = Waveform.from_mono(np.full(1000, 0.1), 8000)
    assert rms_level(w) == pytest.approx(-20.0, abs=1e-9)
    with pytest.raises(SilentSignalError):
        rms_level(Waveform.from_mono(np.zeros(100), 8000))
