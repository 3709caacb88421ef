"""Intelligibility scoring and external metric ingestion.

The only metric computed natively is ESTOI (spectral correlation of
third-octave band envelopes over 384 ms segments).  Quality predictors that
need standardized or trained models (PESQ, DNSMOS, SCOREQ, WV-MOS, LEAP,
PEMO-Q, eMoBi-Q) are ingested from CSV files produced elsewhere and only
carried through to the statistical analysis.

Inputs to estoi() are assumed sample-aligned; there is no alignment search.
Signals produced inside this package are aligned by construction, externally
processed stimuli must be aligned by the caller.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, TooShortError
from .signal_core import Waveform, active_level, resample, rms_level

__all__ = [
    "EstoiConfig",
    "estoi",
    "estoi_improvement",
    "snr_db",
    "MetricScale",
    "MetricRecord",
    "DEFAULT_SCALES",
    "load_scale_registry",
    "write_scale_registry",
    "ingest_predictions",
]


@dataclass(frozen=True)
class EstoiConfig:
    """ESTOI constants.  Defaults are the metric's published definition;
    overriding them is a unit-test affordance, not a tuning surface."""

    target_rate: int = 10000
    frame: int = 256
    hop: int = 128
    fft: int = 512
    num_bands: int = 15
    lowest_center_hz: float = 150.0
    segment_len: int = 30
    silence_range_db: float = 40.0

    def band_edges(self):
        """(lo, hi) arrays of third-octave band edges in Hz."""
        j = np.arange(self.num_bands)
        centers = self.lowest_center_hz * 2.0 ** (j / 3.0)
        return centers * 2.0 ** (-1.0 / 6.0), centers * 2.0 ** (1.0 / 6.0)


def _frame_signal(x, cfg: EstoiConfig):
    """(L, frame) matrix of complete windowed frames; no tail padding."""
    if x.size < cfg.frame:
        return np.zeros((0, cfg.frame))
    window = np.hanning(cfg.frame + 2)[1:-1]
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame)[:: cfg.hop]
    return frames * window


def _band_matrix(frames, cfg: EstoiConfig):
    """Third-octave band magnitudes, shape (num_bands, L).

    Rectangular summation of FFT bin powers between band edges; bin k sits at
    k * target_rate / fft Hz.
    """
    spec = np.fft.rfft(frames, n=cfg.fft, axis=1)
    power = np.abs(spec) ** 2
    freqs = np.arange(spec.shape[1]) * (cfg.target_rate / cfg.fft)
    lo, hi = cfg.band_edges()
    bands = np.zeros((cfg.num_bands, frames.shape[0]))
    for j in range(cfg.num_bands):
        mask = (freqs >= lo[j]) & (freqs < hi[j])
        bands[j] = np.sqrt(power[:, mask].sum(axis=1))
    return bands


def _normalize_rows_then_columns(seg):
    """Mean/variance normalize a (bands, N) segment, rows first then columns.

    Zero-variance rows/columns become zero vectors rather than picking up an
    epsilon, so the result is exactly invariant to input gain.
    """
    out = seg - seg.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    out = np.divide(out, norms, out=np.zeros_like(out), where=norms > 0.0)
    out = out - out.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(out, axis=0, keepdims=True)
    return np.divide(out, norms, out=np.zeros_like(out), where=norms > 0.0)


def estoi(
    reference: Waveform, test: Waveform, config: EstoiConfig = EstoiConfig()
) -> float:
    """Extended short-time objective intelligibility of `test` against
    `reference`.

    Both signals are resampled to 10 kHz, framed, and frames where the
    reference is more than 40 dB below its own maximum are dropped (the mask
    depends on the reference only).  The score is the average over all
    length-30 segments of the band/frame-normalized spectral correlation,
    clipped to [-1, 1].

    Raises TooShortError when fewer than segment_len frames survive.
    """
    ref = resample(reference, config.target_rate) if reference.sample_rate != config.target_rate else reference
    tst = resample(test, config.target_rate) if test.sample_rate != config.target_rate else test
    x = ref.mono()
    y = tst.mono()
    n = min(x.size, y.size)
    x, y = x[:n], y[:n]

    xf = _frame_signal(x, config)
    yf = _frame_signal(y, config)

    # silence removal driven by the reference alone
    energy = np.sum(xf**2, axis=1)
    if energy.size:
        emax = energy.max()
        keep = energy > emax * 10.0 ** (-config.silence_range_db / 10.0)
        xf, yf = xf[keep], yf[keep]

    if xf.shape[0] < config.segment_len:
        raise TooShortError(
            f"only {xf.shape[0]} frames remain after silence removal; "
            f"need at least {config.segment_len}"
        )

    xb = _band_matrix(xf, config)
    yb = _band_matrix(yf, config)

    n_seg = config.segment_len
    total = 0.0
    count = xb.shape[1] - n_seg + 1
    for m in range(count):
        xs = _normalize_rows_then_columns(xb[:, m : m + n_seg])
        ys = _normalize_rows_then_columns(yb[:, m : m + n_seg])
        total += float(np.sum(xs * ys)) / n_seg
    score = total / count
    return float(np.clip(score, -1.0, 1.0))


def estoi_improvement(
    reference: Waveform,
    noisy: Waveform,
    processed: Waveform,
    config: EstoiConfig = EstoiConfig(),
) -> float:
    """estoi(reference, processed) - estoi(reference, noisy)."""
    return estoi(reference, processed, config) - estoi(reference, noisy, config)


def snr_db(speech: Waveform, noise: Waveform, active: bool = True) -> float:
    """Signal-to-noise ratio in dB from separately known components.

    Speech is measured with the active-level meter by default (pause-robust);
    noise with plain RMS.  Both must be mono and share a sample rate.
    """
    if speech.sample_rate != noise.sample_rate:
        raise DataError(
            f"sample rates differ: {speech.sample_rate} vs {noise.sample_rate}"
        )
    s = active_level(speech) if active else rms_level(speech)
    return s - rms_level(noise)


# --- external metric ingestion ---------------------------------------------


@dataclass(frozen=True)
class MetricScale:
    """Nominal range of a metric; max may be +inf for open-ended distances."""

    min: float
    max: float
    higher_is_better: bool = True

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError(f"scale min {self.min} must be below max {self.max}")


@dataclass(frozen=True)
class MetricRecord:
    stimulus_id: str
    metric_name: str
    value: float
    scale_min: float
    scale_max: float
    higher_is_better: bool
    out_of_scale: bool = False


# Nominal scales of the metrics handled downstream.  DNN-based predictors do
# stray outside these ranges on unusual inputs; such values are kept but
# flagged at ingestion.
DEFAULT_SCALES = {
    "pesq": MetricScale(0.5, 4.5),
    "estoi": MetricScale(0.0, 1.0),
    "emobi_q": MetricScale(0.0, 1.0),
    "pemo_q": MetricScale(0.0, 1.0),
    "dnsmos": MetricScale(1.0, 5.0),
    "wvmos": MetricScale(1.0, 5.0),
    "leap": MetricScale(1.0, 13.0),
    "scoreq": MetricScale(0.0, math.inf, higher_is_better=False),
}


def load_scale_registry(path) -> dict:
    """Read a JSON registry: name -> {min, max, higher_is_better}.

    "inf" (any case) is accepted for open-ended maxima.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{path}: registry must be an object")
    registry = {}
    for name, entry in raw.items():
        try:
            registry[name] = MetricScale(
                min=float(entry["min"]),
                max=float(entry["max"]),
                higher_is_better=bool(entry.get("higher_is_better", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad scale entry for {name!r}: {exc}") from exc
    return registry


def write_scale_registry(path, registry: dict) -> None:
    payload = {
        name: {
            "min": scale.min,
            "max": scale.max,
            "higher_is_better": scale.higher_is_better,
        }
        for name, scale in sorted(registry.items())
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ingest_predictions(path, metric_name: str, scale: MetricScale = None) -> list:
    """Read a prediction CSV (header ``stimulus_id,value``) into records.

    The declared scale is attached to every record; values outside it are kept
    but flagged.  Duplicate stimulus ids resolve last-wins with a warning.
    Malformed rows raise DataError naming the line.
    """
    if scale is None:
        try:
            scale = DEFAULT_SCALES[metric_name]
        except KeyError:
            raise DataError(
                f"no registered scale for metric {metric_name!r}; pass one explicitly"
            ) from None
    by_id = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["stimulus_id", "value"]:
            raise DataError(
                f"{path}: line 1: expected header 'stimulus_id,value', "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            stimulus_id = row[0].strip()
            if not stimulus_id:
                raise DataError(f"{path}: line {lineno}: empty stimulus_id")
            try:
                value = float(row[1])
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: malformed value {row[1]!r}"
                ) from None
            if not math.isfinite(value):
                raise DataError(f"{path}: line {lineno}: non-finite value {row[1]!r}")
            if stimulus_id in by_id:
                warnings.warn(
                    f"{path}: line {lineno}: duplicate stimulus_id {stimulus_id!r}, "
                    "keeping the later value"
                )
            by_id[stimulus_id] = MetricRecord(
                stimulus_id=stimulus_id,
                metric_name=metric_name,
                value=value,
                scale_min=scale.min,
                scale_max=scale.max,
                higher_is_better=scale.higher_is_better,
                out_of_scale=not scale.min <= value <= scale.max,
            )
    return list(by_id.values())
