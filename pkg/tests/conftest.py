"""Shared fixtures: deterministic speech-like synthetic signals.

No recorded audio ships with the repo, so tests synthesize voiced/unvoiced
material with controllable duration, silence padding and sample rate.  The
generator is intentionally speech-shaped (harmonic source, slow formant-ish
coloring, syllabic amplitude modulation) so level/intelligibility metrics
behave the way they do on real speech.
"""

from __future__ import annotations

import numpy as np
import pytest

from ovrlab.signal_core import Waveform


def speech_like(
    duration: float = 1.0,
    sample_rate: int = 16000,
    seed: int = 0,
    f0: float = 120.0,
    lead_silence: float = 0.0,
    tail_silence: float = 0.0,
    level: float = 0.1,
) -> Waveform:
    """Deterministic speech-shaped test signal (mono)."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    # harmonic stack with mild vibrato, energy falling off with harmonic index
    f0_track = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * 3.1 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_track) / sample_rate
    x = np.zeros(n)
    for h in range(1, 13):
        if h * f0 > 0.45 * sample_rate:
            break
        x += np.cos(h * phase + rng.uniform(0, 2 * np.pi)) / h
    # unvoiced component: filtered noise (one-pole lowpass, then first difference
    # to tilt it toward the kHz range)
    from scipy.signal import lfilter

    noise = rng.standard_normal(n)
    lp = lfilter([0.03], [1.0, -0.97], noise)
    x += 2.0 * np.diff(np.concatenate([[0.0], lp]))
    # syllabic modulation ~4 Hz with pauses
    mod = 0.55 + 0.45 * np.sin(2 * np.pi * 3.7 * t + rng.uniform(0, 2 * np.pi))
    x *= mod
    x = x / np.max(np.abs(x)) * level / 0.1 * 0.3
    pieces = [
        np.zeros(int(round(lead_silence * sample_rate))),
        x,
        np.zeros(int(round(tail_silence * sample_rate))),
    ]
    return Waveform.from_mono(np.concatenate(pieces), sample_rate)


@pytest.fixture
def speech_16k() -> Waveform:
    return speech_like(duration=1.0, sample_rate=16000, seed=7)
