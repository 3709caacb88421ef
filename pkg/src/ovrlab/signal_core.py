"""Core signal plumbing: waveforms, WAV file I/O, resampling, STFT, levels.

All audio is carried as float64 in [-1, 1] nominal full scale, shaped
``(channels, num_samples)``.  Functions are pure: they never mutate their
inputs and return new objects.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as _sps

from .errors import (
    AudioFormatError,
    ConfigMismatchError,
    SilentSignalError,
    TruncatedFileError,
)

__all__ = [
    "Waveform",
    "StftConfig",
    "Spectrogram",
    "SaveInfo",
    "load_wav",
    "save_wav",
    "resample",
    "stft",
    "istft",
    "active_level",
    "rms_level",
]

# Digital-silence threshold for level measurements (power for -100 dBFS RMS).
_SILENCE_POWER = 1e-10


@dataclass(frozen=True)
class Waveform:
    """Multichannel audio buffer: float64 samples shaped (channels, num_samples)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got ndim={arr.ndim}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> "Waveform":
        """Single channel as a new (1, n) waveform."""
        return Waveform(self.samples[index : index + 1].copy(), self.sample_rate)

    def mono(self) -> np.ndarray:
        """The single channel as a flat array; raises if multichannel."""
        if self.channel_count != 1:
            raise ValueError(f"expected mono waveform, got {self.channel_count} channels")
        return self.samples[0]

    @staticmethod
    def from_mono(samples: np.ndarray, sample_rate: int) -> "Waveform":
        return Waveform(np.asarray(samples, dtype=np.float64)[np.newaxis, :], sample_rate)


@dataclass(frozen=True)
class SaveInfo:
    """Metadata returned by :func:`save_wav`."""

    clipped: bool
    clipped_samples: int
    bit_depth: str


# ---------------------------------------------------------------------------
# WAV container I/O
#
# Hand-rolled RIFF parsing so the failure taxonomy is explicit: a file that is
# not a WAV at all (or uses a codec we don't speak) raises AudioFormatError,
# while a WAV whose payload stops early raises TruncatedFileError.
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) < n:
        raise TruncatedFileError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def load_wav(path: str | Path) -> Waveform:
    """Read a RIFF/WAVE file into a float64 waveform.

    Supports PCM 16/24/32-bit and IEEE float32, plain or WAVE_FORMAT_EXTENSIBLE.
    Integer samples are scaled by the format's full scale (2^15, 2^23, 2^31);
    float samples pass through unscaled.
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 4 or head[:4] != b"RIFF":
            raise AudioFormatError(f"{path.name}: not a RIFF file")
        if len(head) < 12:
            raise TruncatedFileError(f"{path.name}: file ends inside RIFF header")
        if head[8:12] != b"WAVE":
            raise AudioFormatError(f"{path.name}: RIFF form is not WAVE")

        fmt = None
        data_bytes = None
        while True:
            chunk_head = f.read(8)
            if len(chunk_head) == 0:
                break
            if len(chunk_head) < 8:
                raise TruncatedFileError(f"{path.name}: file ends inside chunk header")
            cid, csize = struct.unpack("<4sI", chunk_head)
            if cid == b"fmt ":
                body = _read_exact(f, csize, "fmt chunk")
                if csize < 16:
                    raise AudioFormatError(f"{path.name}: fmt chunk too small ({csize} bytes)")
                fmt = struct.unpack("<HHIIHH", body[:16])
                if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                    if csize < 40:
                        raise AudioFormatError(f"{path.name}: extensible fmt chunk too small")
                    # sub-format GUID starts at offset 24; first two bytes are
                    # the actual format code.
                    sub = struct.unpack_from("<H", body, 24)[0]
                    fmt = (sub,) + fmt[1:]
            elif cid == b"data":
                payload = f.read(csize)
                if len(payload) < csize:
                    raise TruncatedFileError(
                        f"{path.name}: data chunk declares {csize} bytes, file has {len(payload)}"
                    )
                data_bytes = payload
            else:
                f.seek(csize, 1)
            if csize % 2:  # RIFF chunks are word-aligned
                f.seek(1, 1)

    if fmt is None:
        raise AudioFormatError(f"{path.name}: missing fmt chunk")
    if data_bytes is None:
        raise AudioFormatError(f"{path.name}: missing data chunk")

    fmt_code, channels, rate, _byte_rate, block_align, bits = fmt
    if channels < 1:
        raise AudioFormatError(f"{path.name}: invalid channel count {channels}")
    if fmt_code == _WAVE_FORMAT_PCM and bits in (16, 24, 32):
        bytes_per = bits // 8
    elif fmt_code == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        bytes_per = 4
    else:
        raise AudioFormatError(
            f"{path.name}: unsupported encoding (format=0x{fmt_code:04x}, bits={bits})"
        )
    frame_bytes = bytes_per * channels
    if block_align not in (0, frame_bytes):
        raise AudioFormatError(
            f"{path.name}: block alignment {block_align} inconsistent with "
            f"{channels}x{bits}-bit frames"
        )
    if len(data_bytes) % frame_bytes:
        raise TruncatedFileError(
            f"{path.name}: data chunk ends mid-frame ({len(data_bytes)} bytes, "
            f"{frame_bytes}-byte frames)"
        )

    n = len(data_bytes) // frame_bytes
    if fmt_code == _WAVE_FORMAT_IEEE_FLOAT:
        flat = np.frombuffer(data_bytes, dtype="<f4").astype(np.float64)
    elif bits == 16:
        flat = np.frombuffer(data_bytes, dtype="<i2").astype(np.float64) / 2**15
    elif bits == 32:
        flat = np.frombuffer(data_bytes, dtype="<i4").astype(np.float64) / 2**31
    else:  # 24-bit: 3-byte little-endian, sign-extend through the top byte
        raw = np.frombuffer(data_bytes, dtype=np.uint8).reshape(-1, 3)
        as32 = np.zeros(raw.shape[0], dtype=np.uint32)
        as32 |= raw[:, 0].astype(np.uint32) << 8
        as32 |= raw[:, 1].astype(np.uint32) << 16
        as32 |= raw[:, 2].astype(np.uint32) << 24
        flat = (as32.view(np.int32) >> 8).astype(np.float64) / 2**23
    samples = flat.reshape(n, channels).T if n else np.zeros((channels, 0))
    return Waveform(samples, rate)


def save_wav(wave: Waveform, path: str | Path, bit_depth: str = "32f") -> SaveInfo:
    """Write a waveform as RIFF/WAVE.

    ``bit_depth`` is one of ``"16"``, ``"24"`` (PCM) or ``"32f"`` (IEEE float).
    Integer targets clip samples outside [-1, 1] and report it in the result;
    float output is written verbatim (bit-exact round trip).
    """
    path = Path(path)
    x = wave.samples
    clipped_samples = int(np.count_nonzero(np.abs(x) > 1.0)) if bit_depth != "32f" else 0

    if bit_depth == "32f":
        payload = x.T.astype("<f4").tobytes()
        fmt_code, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    elif bit_depth == "16":
        q = np.clip(np.rint(x * 2**15), -(2**15), 2**15 - 1).astype("<i2")
        payload = q.T.tobytes()
        fmt_code, bits = _WAVE_FORMAT_PCM, 16
    elif bit_depth == "24":
        q = np.clip(np.rint(x * 2**23), -(2**23), 2**23 - 1).astype(np.int64)
        u = (q & 0xFFFFFF).astype(np.uint32).T.reshape(-1)
        raw = np.empty((u.size, 3), dtype=np.uint8)
        raw[:, 0] = u & 0xFF
        raw[:, 1] = (u >> 8) & 0xFF
        raw[:, 2] = (u >> 16) & 0xFF
        payload = raw.tobytes()
        fmt_code, bits = _WAVE_FORMAT_PCM, 24
    else:
        raise ValueError(f"unsupported bit depth {bit_depth!r}; use '16', '24' or '32f'")

    channels = wave.channel_count
    frame_bytes = channels * bits // 8
    fmt_body = struct.pack(
        "<HHIIHH",
        fmt_code,
        channels,
        wave.sample_rate,
        wave.sample_rate * frame_bytes,
        frame_bytes,
        bits,
    )
    chunks = [(b"fmt ", fmt_body)]
    if fmt_code == _WAVE_FORMAT_IEEE_FLOAT:
        chunks.append((b"fact", struct.pack("<I", wave.num_samples)))
    chunks.append((b"data", payload))

    body = bytearray()
    for cid, cbody in chunks:
        body += struct.pack("<4sI", cid, len(cbody))
        body += cbody
        if len(cbody) % 2:
            body += b"\x00"
    with open(path, "wb") as f:
        f.write(struct.pack("<4sI4s", b"RIFF", 4 + len(body), b"WAVE"))
        f.write(bytes(body))
    return SaveInfo(clipped=clipped_samples > 0, clipped_samples=clipped_samples, bit_depth=bit_depth)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


@lru_cache(maxsize=32)
def _resample_filter(up: int, down: int) -> np.ndarray:
    n_taps = _TAPS_PER_PHASE * up + 1
    cutoff = min(1.0 / up, 1.0 / down)  # relative to Nyquist at the up-rate
    return _sps.firwin(n_taps, cutoff, window=("kaiser", _KAISER_BETA))


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Polyphase resample to ``target_rate``.

    Windowed-sinc prototype (Kaiser beta 8.6, 64 taps per phase), linear-phase
    delay compensated so output sample m sits at time m/target_rate.  Output
    length is round(n * target / source).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    n_out = round(wave.num_samples * target_rate / wave.sample_rate)
    if wave.num_samples == 0:
        return Waveform(np.zeros((wave.channel_count, 0)), target_rate)
    g = math.gcd(wave.sample_rate, target_rate)
    up, down = target_rate // g, wave.sample_rate // g
    h = _resample_filter(up, down)
    out = _sps.resample_poly(wave.samples, up, down, axis=1, window=h)
    return Waveform(out[:, :n_out], target_rate)


# ---------------------------------------------------------------------------
# STFT / iSTFT
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _window(name: str, length: int) -> np.ndarray:
    n = np.arange(length)
    if name == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / length))
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)
    raise ValueError(f"unknown window {name!r}; supported: 'sqrt_hann', 'hann'")


@dataclass(frozen=True)
class StftConfig:
    """Analysis grid: frame l covers samples [l*hop, l*hop + window_length)."""

    window_length: int = 512
    hop: int = 256
    fft_size: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.hop <= 0 or self.window_length <= 0:
            raise ValueError("window_length and hop must be positive")
        if self.window_length % self.hop:
            raise ValueError("hop must divide window_length")
        if self.fft_size < self.window_length:
            raise ValueError("fft_size must be >= window_length")
        _window(self.window, self.window_length)  # validates the name

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        return _window(self.window, self.window_length)

    def num_frames(self, num_samples: int) -> int:
        return math.ceil(num_samples / self.hop) if num_samples else 0

    def frame_center_time(self, frame: int, sample_rate: int) -> float:
        return (frame * self.hop + self.window_length / 2) / sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT, bins shaped (num_bins, num_frames)."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int
    num_samples: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.bins, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[0] != self.config.num_bins:
            raise ValueError(
                f"bins must be 2-D with {self.config.num_bins} rows, got shape {arr.shape}"
            )
        object.__setattr__(self, "bins", arr)

    @property
    def num_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    def same_grid(self, other: "Spectrogram") -> bool:
        return (
            self.config == other.config
            and self.sample_rate == other.sample_rate
            and self.bins.shape == other.bins.shape
        )

    def require_same_grid(self, other: "Spectrogram", what: str = "spectrograms"):
        if not self.same_grid(other):
            raise ConfigMismatchError(
                f"{what} disagree: {self.bins.shape}@{self.config}/{self.sample_rate}Hz vs "
                f"{other.bins.shape}@{other.config}/{other.sample_rate}Hz"
            )


def stft(wave: Waveform, config: StftConfig = StftConfig()) -> Spectrogram:
    """Forward STFT of a mono waveform.

    The signal is zero-padded at the end so every frame is complete;
    num_frames = ceil(num_samples / hop).
    """
    x = wave.mono()
    L = config.num_frames(x.size)
    if L == 0:
        return Spectrogram(
            np.zeros((config.num_bins, 0), dtype=np.complex128),
            config,
            wave.sample_rate,
            0,
        )
    total = (L - 1) * config.hop + config.window_length
    padded = np.zeros(total)
    padded[: x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.window_length)[
        :: config.hop
    ][:L]
    spec = np.fft.rfft(frames * config.analysis_window(), n=config.fft_size, axis=1)
    return Spectrogram(spec.T, config, wave.sample_rate, x.size)


def istft(spec: Spectrogram, num_samples: int | None = None) -> Waveform:
    """Inverse STFT by overlap-add with window-envelope normalization.

    The same window is used for analysis and synthesis; dividing by the summed
    squared-window envelope makes reconstruction exact wherever the envelope
    is nonzero, independent of the chosen hop.
    """
    cfg = spec.config
    L = spec.num_frames
    if num_samples is None:
        num_samples = spec.num_samples
    if L == 0:
        return Waveform(np.zeros((1, 0)), spec.sample_rate)
    win = cfg.analysis_window()
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size)[:, : cfg.window_length]
    total = (L - 1) * cfg.hop + cfg.window_length
    y = np.zeros(total)
    env = np.zeros(total)
    wsq = win * win
    for l in range(L):
        start = l * cfg.hop
        y[start : start + cfg.window_length] += frames[l] * win
        env[start : start + cfg.window_length] += wsq
    good = env > 1e-10
    y[good] /= env[good]
    if num_samples is not None:
        if num_samples <= total:
            y = y[:num_samples]
        else:
            y = np.concatenate([y, np.zeros(num_samples - total)])
    return Waveform.from_mono(y, spec.sample_rate)


# ---------------------------------------------------------------------------
# Level measurement
# ---------------------------------------------------------------------------


def _frame_powers(x: np.ndarray, frame: int, hop: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean power and sample count of each analysis frame (tail kept partial)."""
    n = x.size
    if n <= frame:
        return np.array([np.mean(x * x)]), np.array([n])
    starts = np.arange(0, n - frame + 1, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][: starts.size]
    powers = np.mean(frames * frames, axis=1)
    counts = np.full(starts.size, frame)
    tail_start = starts[-1] + frame
    if tail_start < n:  # partial tail frame so no sample is silently dropped
        tail = x[tail_start:]
        powers = np.append(powers, np.mean(tail * tail))
        counts = np.append(counts, tail.size)
    return powers, counts


def active_level(
    wave: Waveform,
    frame_duration: float = 0.025,
    hop_duration: float = 0.0125,
    dynamic_range_db: float = 40.0,
) -> float:
    """Active speech level in dBFS.

    Frames (25 ms / 12.5 ms hop by default) whose power is within
    ``dynamic_range_db`` of the loudest frame count as active; the level is the
    RMS over active samples only, so leading/trailing silence does not dilute
    it.  Raises SilentSignalError when every frame is below -100 dBFS.
    """
    x = wave.mono()
    if x.size == 0:
        raise SilentSignalError("cannot measure level of an empty waveform")
    frame = max(1, round(frame_duration * wave.sample_rate))
    hop = max(1, round(hop_duration * wave.sample_rate))
    powers, counts = _frame_powers(x, frame, hop)
    pmax = powers.max()
    if pmax <= _SILENCE_POWER:
        raise SilentSignalError("signal is digital silence (all frames below -100 dBFS)")
    active = powers > pmax * 10.0 ** (-dynamic_range_db / 10.0)
    energy = float(np.sum(powers[active] * counts[active]))
    n_active = float(np.sum(counts[active]))
    return 10.0 * math.log10(energy / n_active)


def rms_level(wave: Waveform) -> float:
    """Plain RMS level in dBFS over all samples of a mono waveform."""
    x = wave.mono()
    if x.size == 0:
        raise SilentSignalError("cannot measure level of an empty waveform")
    p = float(np.mean(x * x))
    if p <= _SILENCE_POWER:
        raise SilentSignalError("signal is digital silence")
    return 10.0 * math.log10(p)
