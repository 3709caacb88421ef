"""Phoneme-specific relative transfer function (RTF) estimation.

Given paired clean recordings from the outer and in-ear microphones plus a
phoneme annotation, estimates one complex transfer vector per phoneme by the
least-squares cross-PSD ratio, pooled over all frames in which the phoneme
occurs.  The set of per-phoneme vectors for one talker — plus a global
fallback — forms that talker's transfer characteristics model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigMismatchError, DataError, SchemaError, SilentSignalError, VersionError
from .signal_core import Spectrogram, StftConfig

SILENCE_LABEL = "sil"

MODEL_SCHEMA_VERSION = 1

# Relative regularizer for the cross-PSD ratio denominator.
_EPS_REL = 1e-10


class PhonemeInterval(NamedTuple):
    start: float
    end: float
    phoneme: str


@dataclass(frozen=True)
class PhonemeAnnotation:
    """Ordered, non-overlapping phoneme intervals in seconds.

    Gaps between intervals are silence; a frame whose center falls in a gap is
    labeled "sil".
    """

    intervals: tuple[PhonemeInterval, ...]

    def __post_init__(self):
        ivs = tuple(PhonemeInterval(float(s), float(e), str(p)) for s, e, p in self.intervals)
        prev_end = -np.inf
        for iv in ivs:
            if not iv.start < iv.end:
                raise ValueError(f"interval {iv} has start >= end")
            if iv.start < prev_end:
                raise ValueError(f"interval {iv} overlaps its predecessor or is unsorted")
            prev_end = iv.end
        object.__setattr__(self, "intervals", ivs)

    def label_at(self, t: float) -> str:
        for iv in self.intervals:
            if iv.start <= t < iv.end:
                return iv.phoneme
        return SILENCE_LABEL

    @staticmethod
    def from_tsv(path: str | Path) -> "PhonemeAnnotation":
        """Read a TSV with columns start_s, end_s, phoneme (header optional)."""
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if lineno == 1 and parts[0] == "start_s":
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            try:
                rows.append(PhonemeInterval(float(parts[0]), float(parts[1]), parts[2]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        try:
            return PhonemeAnnotation(tuple(rows))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc

    def to_tsv(self, path: str | Path):
        lines = ["start_s\tend_s\tphoneme"]
        lines += [f"{iv.start!r}\t{iv.end!r}\t{iv.phoneme}" for iv in self.intervals]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


EMPTY_ANNOTATION = PhonemeAnnotation(())


def frame_phoneme_sequence(
    annotation: PhonemeAnnotation,
    stft_config: StftConfig,
    frame_count: int,
    sample_rate: int,
) -> list[str]:
    """Label of each STFT frame: the phoneme whose interval contains the frame
    center time (l*hop + window/2)/rate, or "sil" outside all intervals."""
    if frame_count < 0:
        raise ValueError("frame_count must be >= 0")
    centers = (
        np.arange(frame_count) * stft_config.hop + stft_config.window_length / 2
    ) / sample_rate
    labels = [SILENCE_LABEL] * frame_count
    if not annotation.intervals:
        return labels
    starts = np.array([iv.start for iv in annotation.intervals])
    idx = np.searchsorted(starts, centers, side="right") - 1
    for l in range(frame_count):
        j = idx[l]
        if j >= 0 and centers[l] < annotation.intervals[j].end:
            labels[l] = annotation.intervals[j].phoneme
    return labels


@dataclass(frozen=True)
class RtfEntry:
    rtf: np.ndarray  # complex, length K
    frame_count: int


@dataclass(frozen=True)
class TransferModel:
    """Per-talker transfer characteristics: phoneme → RTF vector + fallback."""

    talker_id: str
    stft_config: StftConfig
    sample_rate: int
    global_rtf: np.ndarray
    entries: dict[str, RtfEntry] = field(default_factory=dict)

    def __post_init__(self):
        K = self.stft_config.num_bins
        g = np.asarray(self.global_rtf, dtype=np.complex128)
        if g.shape != (K,):
            raise ValueError(f"global_rtf must have length {K}, got {g.shape}")
        object.__setattr__(self, "global_rtf", g)
        for label, entry in self.entries.items():
            if np.asarray(entry.rtf).shape != (K,):
                raise ValueError(f"rtf for phoneme {label!r} must have length {K}")

    @property
    def phonemes(self) -> list[str]:
        return sorted(self.entries)


def lookup_rtf(model: TransferModel, phoneme: str) -> np.ndarray:
    """Phoneme's RTF if the model stores one, else the global fallback."""
    entry = model.entries.get(phoneme)
    return entry.rtf if entry is not None else model.global_rtf


class RtfAccumulator:
    """Fold-style accumulator for RTF estimation across many utterances.

    Per phoneme p it keeps the running numerator sum S_i * conj(S_o) and
    denominator sum |S_o|^2 over all energetically active frames labeled p;
    silence-labeled frames feed only the global statistics.  Two accumulators
    over the same grid merge associatively.
    """

    def __init__(
        self,
        stft_config: StftConfig,
        sample_rate: int,
        energy_floor_db: float = 40.0,
    ):
        self.stft_config = stft_config
        self.sample_rate = sample_rate
        self.energy_floor_db = energy_floor_db
        K = stft_config.num_bins
        self._num: dict[str, np.ndarray] = {}
        self._den: dict[str, np.ndarray] = {}
        self._frames: dict[str, int] = {}
        self._gnum = np.zeros(K, dtype=np.complex128)
        self._gden = np.zeros(K)
        self._gframes = 0

    @property
    def active_frames(self) -> int:
        return self._gframes

    def add(
        self,
        outer: Spectrogram,
        inear: Spectrogram,
        annotation: PhonemeAnnotation = EMPTY_ANNOTATION,
    ) -> "RtfAccumulator":
        outer.require_same_grid(inear, "outer/in-ear spectrograms")
        if outer.config != self.stft_config or outer.sample_rate != self.sample_rate:
            raise ConfigMismatchError("spectrogram grid does not match accumulator grid")
        labels = frame_phoneme_sequence(
            annotation, self.stft_config, outer.num_frames, self.sample_rate
        )
        energy = np.sum(np.abs(outer.bins) ** 2, axis=0)
        if energy.size == 0 or energy.max() <= 0:
            return self
        active = energy > energy.max() * 10.0 ** (-self.energy_floor_db / 10.0)
        cross = inear.bins * np.conj(outer.bins)
        power = np.abs(outer.bins) ** 2
        label_arr = np.array(labels)
        for label in set(labels):
            mask = active & (label_arr == label)
            if not mask.any():
                continue
            n = int(mask.sum())
            num = cross[:, mask].sum(axis=1)
            den = power[:, mask].sum(axis=1)
            self._gnum += num
            self._gden += den
            self._gframes += n
            if label == SILENCE_LABEL:
                continue  # silence contributes to the global fallback only
            if label not in self._num:
                K = self.stft_config.num_bins
                self._num[label] = np.zeros(K, dtype=np.complex128)
                self._den[label] = np.zeros(K)
                self._frames[label] = 0
            self._num[label] += num
            self._den[label] += den
            self._frames[label] += n
        return self

    def merge(self, other: "RtfAccumulator") -> "RtfAccumulator":
        """Associative combination of two accumulators over the same grid."""
        if (
            other.stft_config != self.stft_config
            or other.sample_rate != self.sample_rate
        ):
            raise ConfigMismatchError("cannot merge accumulators over different grids")
        out = RtfAccumulator(self.stft_config, self.sample_rate, self.energy_floor_db)
        for src in (self, other):
            out._gnum = out._gnum + src._gnum
            out._gden = out._gden + src._gden
            out._gframes += src._gframes
            for label in src._num:
                if label not in out._num:
                    out._num[label] = src._num[label].copy()
                    out._den[label] = src._den[label].copy()
                    out._frames[label] = src._frames[label]
                else:
                    out._num[label] = out._num[label] + src._num[label]
                    out._den[label] = out._den[label] + src._den[label]
                    out._frames[label] += src._frames[label]
        return out

    def finalize(self, talker_id: str, min_frames: int = 10) -> TransferModel:
        """Pool the accumulated statistics into a TransferModel.

        Phonemes observed in fewer than ``min_frames`` active frames are
        dropped; lookups for them resolve to the global RTF.
        """
        if self._gframes == 0:
            raise SilentSignalError("zero speech-active frames accumulated")
        entries = {}
        for label, num in self._num.items():
            if self._frames[label] < min_frames:
                continue
            den = self._den[label]
            entries[label] = RtfEntry(
                rtf=num / (den + _EPS_REL * den.max()), frame_count=self._frames[label]
            )
        global_rtf = self._gnum / (self._gden + _EPS_REL * self._gden.max())
        return TransferModel(
            talker_id=talker_id,
            stft_config=self.stft_config,
            sample_rate=self.sample_rate,
            global_rtf=global_rtf,
            entries=entries,
        )


def estimate_rtfs(
    outer: Spectrogram,
    inear: Spectrogram,
    annotation: PhonemeAnnotation = EMPTY_ANNOTATION,
    *,
    talker_id: str = "",
    min_frames: int = 10,
    energy_floor_db: float = 40.0,
) -> TransferModel:
    """Single-utterance convenience wrapper around :class:`RtfAccumulator`."""
    acc = RtfAccumulator(outer.config, outer.sample_rate, energy_floor_db)
    acc.add(outer, inear, annotation)
    return acc.finalize(talker_id=talker_id, min_frames=min_frames)


# ---------------------------------------------------------------------------
# Serialization: versioned JSON
# ---------------------------------------------------------------------------


def save_model(model: TransferModel, path: str | Path):
    cfg = model.stft_config
    doc = {
        "version": MODEL_SCHEMA_VERSION,
        "talker_id": model.talker_id,
        "stft": {
            "window": cfg.window_length,
            "hop": cfg.hop,
            "fft": cfg.fft_size,
            "rate": model.sample_rate,
            "window_fn": cfg.window,
        },
        "global": {
            "re": model.global_rtf.real.tolist(),
            "im": model.global_rtf.imag.tolist(),
        },
        "phonemes": {
            label: {
                "re": entry.rtf.real.tolist(),
                "im": entry.rtf.imag.tolist(),
                "frames": entry.frame_count,
            }
            for label, entry in sorted(model.entries.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def _vector(block: dict, K: int, what: str) -> np.ndarray:
    try:
        re, im = block["re"], block["im"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{what}: missing re/im arrays") from exc
    if len(re) != K or len(im) != K:
        raise SchemaError(f"{what}: rtf vector length {len(re)}/{len(im)}, expected {K}")
    return np.asarray(re, dtype=np.float64) + 1j * np.asarray(im, dtype=np.float64)


def load_model(path: str | Path) -> TransferModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise SchemaError(f"{path}: missing version field")
    if doc["version"] != MODEL_SCHEMA_VERSION:
        raise VersionError(
            f"{path}: schema version {doc['version']!r}, this reader speaks {MODEL_SCHEMA_VERSION}"
        )
    try:
        stft_block = doc["stft"]
        cfg = StftConfig(
            window_length=int(stft_block["window"]),
            hop=int(stft_block["hop"]),
            fft_size=int(stft_block["fft"]),
            window=str(stft_block.get("window_fn", "sqrt_hann")),
        )
        rate = int(stft_block["rate"])
        talker = str(doc["talker_id"])
        phonemes = doc["phonemes"]
        global_block = doc["global"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed model document: {exc}") from exc
    K = cfg.num_bins
    entries = {}
    for label, block in phonemes.items():
        vec = _vector(block, K, f"{path}: phoneme {label!r}")
        frames = block.get("frames")
        if not isinstance(frames, int) or frames < 0:
            raise SchemaError(f"{path}: phoneme {label!r}: bad frame count {frames!r}")
        entries[label] = RtfEntry(rtf=vec, frame_count=frames)
    return TransferModel(
        talker_id=talker,
        stft_config=cfg,
        sample_rate=rate,
        global_rtf=_vector(global_block, K, f"{path}: global"),
        entries=entries,
    )


class PhonemeRtfEstimator(BaseEstimator):
    """Estimator-style front end for RTF model fitting.

    ``fit`` consumes an iterable of (outer Spectrogram, in-ear Spectrogram,
    PhonemeAnnotation) triples — one per clean recorded utterance — and leaves
    the pooled transfer model in ``model_``.
    """

    def __init__(
        self,
        talker_id: str = "talker",
        min_frames: int = 10,
        energy_floor_db: float = 40.0,
    ):
        self.talker_id = talker_id
        self.min_frames = min_frames
        self.energy_floor_db = energy_floor_db

    def fit(self, recordings: Iterable[tuple], y=None):
        acc = None
        for outer, inear, annotation in recordings:
            if acc is None:
                acc = RtfAccumulator(outer.config, outer.sample_rate, self.energy_floor_db)
            acc.add(outer, inear, annotation)
        if acc is None:
            raise DataError("fit requires at least one recording triple")
        self.model_ = acc.finalize(talker_id=self.talker_id, min_frames=self.min_frames)
        return self

    def lookup(self, phoneme: str) -> np.ndarray:
        return lookup_rtf(self.model_, phoneme)
