"""Own-voice data augmentation: in-ear simulation, noise spatialization,
SNR-controlled mixing, and dataset manifest construction.

The central operation multiplies a clean outer-mic STFT frame-by-frame with
the phoneme-conditioned RTF of a transfer characteristics model, temporally
smoothed across phoneme transitions, to synthesize the corresponding in-ear
signal (generic or personalized variant).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator

from .errors import (
    ConfigMismatchError,
    DataError,
    SchemaError,
    SilentSignalError,
    TalkerMismatchError,
)
from .rtf import (
    EMPTY_ANNOTATION,
    PhonemeAnnotation,
    TransferModel,
    frame_phoneme_sequence,
    lookup_rtf,
)
from .signal_core import Spectrogram, Waveform, active_level, istft, rms_level, stft

MANIFEST_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# In-ear simulation
# ---------------------------------------------------------------------------


def smooth_rtf_track(raw: np.ndarray, alpha: float) -> np.ndarray:
    """First-order recursive smoothing along frames.

    out(l) = alpha*out(l-1) + (1-alpha)*raw(l), initialized with
    out(-1) = raw(0) so the first frame passes through unchanged.
    """
    if not 0.0 <= alpha < 1.0 + 1e-12:
        raise ValueError("alpha must lie in [0, 1]")
    out = np.empty_like(raw)
    if raw.shape[1] == 0:
        return out
    out[:, 0] = raw[:, 0]
    for l in range(1, raw.shape[1]):
        out[:, l] = alpha * out[:, l - 1] + (1.0 - alpha) * raw[:, l]
    return out


def rtf_track(
    model: TransferModel, labels: Sequence[str]
) -> np.ndarray:
    """Stack the per-frame RTF vectors for a label sequence, (K, L)."""
    K = model.stft_config.num_bins
    track = np.empty((K, len(labels)), dtype=np.complex128)
    cache: dict[str, np.ndarray] = {}
    for l, label in enumerate(labels):
        vec = cache.get(label)
        if vec is None:
            vec = cache[label] = lookup_rtf(model, label)
        track[:, l] = vec
    return track


def simulate_inear(
    clean: Waveform,
    annotation: PhonemeAnnotation,
    model: TransferModel,
    alpha: float = 0.5,
) -> Waveform:
    """Synthesize the in-ear own-voice signal for a clean outer-mic recording.

    Per frame l the clean STFT is multiplied by the smoothed RTF of the
    phoneme active at that frame; the result is inverted back to time domain
    at the input length.
    """
    if clean.sample_rate != model.sample_rate:
        raise ConfigMismatchError(
            f"clean rate {clean.sample_rate} != model rate {model.sample_rate}"
        )
    spec = stft(clean, model.stft_config)
    labels = frame_phoneme_sequence(
        annotation, model.stft_config, spec.num_frames, model.sample_rate
    )
    smoothed = smooth_rtf_track(rtf_track(model, labels), alpha)
    shaped = Spectrogram(smoothed * spec.bins, model.stft_config, model.sample_rate, spec.num_samples)
    return istft(shaped, num_samples=clean.num_samples)


def simulate_inear_personalized(
    clean: Waveform,
    annotation: PhonemeAnnotation,
    model: TransferModel,
    target_talker: str,
    alpha: float = 0.5,
) -> Waveform:
    """Same computation as :func:`simulate_inear`, but the model must belong
    to the declared target talker."""
    if model.talker_id != target_talker:
        raise TalkerMismatchError(
            f"model belongs to talker {model.talker_id!r}, target is {target_talker!r}"
        )
    return simulate_inear(clean, annotation, model, alpha)


class InEarSimulator(BaseEstimator):
    """Estimator-style wrapper: transform clean (waveform, annotation) pairs
    into simulated in-ear waveforms with a fixed model and smoothing."""

    def __init__(self, model: TransferModel | None = None, alpha: float = 0.5):
        self.model = model
        self.alpha = alpha

    def fit(self, X=None, y=None):
        if self.model is None:
            raise DataError("InEarSimulator needs a transfer model")
        return self

    def transform(self, pairs: Sequence[tuple[Waveform, PhonemeAnnotation]]) -> list[Waveform]:
        self.fit()
        return [simulate_inear(w, ann, self.model, self.alpha) for w, ann in pairs]


# ---------------------------------------------------------------------------
# Noise spatialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IrSet:
    """Two-channel impulse responses (outer, in-ear) indexed by azimuth degrees."""

    responses: Mapping[int, np.ndarray]
    sample_rate: int

    def __post_init__(self):
        for az, ir in self.responses.items():
            arr = np.asarray(ir, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != 2:
                raise ValueError(f"IR for azimuth {az} must be (2, taps), got {arr.shape}")

    @property
    def directions(self) -> list[int]:
        return sorted(self.responses)


def load_ir_set(directory: str | Path) -> IrSet:
    """Load an IR directory of WAVs named by azimuth ("000.wav" ... "315.wav"),
    each with 2 channels: ch0 = outer mic, ch1 = in-ear mic."""
    from .signal_core import load_wav

    directory = Path(directory)
    responses: dict[int, np.ndarray] = {}
    rate = None
    for path in sorted(directory.glob("*.wav")):
        if not path.stem.isdigit():
            continue
        w = load_wav(path)
        if w.channel_count != 2:
            raise DataError(f"{path.name}: expected 2-channel IR, got {w.channel_count}")
        if rate is None:
            rate = w.sample_rate
        elif w.sample_rate != rate:
            raise ConfigMismatchError(f"{path.name}: rate {w.sample_rate} != {rate}")
        responses[int(path.stem)] = w.samples
    if not responses:
        raise DataError(f"no azimuth-named WAV impulse responses found in {directory}")
    return IrSet(responses=responses, sample_rate=rate)


def spatialize_noise(
    sources: Sequence[Waveform], ir_set: IrSet, directions: Sequence[int]
) -> Waveform:
    """Render point or pseudo-diffuse noise at the two microphones.

    Each mono source is convolved with its direction's two-channel IR and the
    renders are summed; output length = max source length + max IR length - 1.
    """
    if len(sources) != len(directions):
        raise DataError(f"{len(sources)} sources vs {len(directions)} directions")
    if not sources:
        raise DataError("at least one source required")
    for d in directions:
        if d not in ir_set.responses:
            raise DataError(f"direction {d} missing from IR set (has {ir_set.directions})")
    for s in sources:
        if s.sample_rate != ir_set.sample_rate:
            raise ConfigMismatchError(
                f"source rate {s.sample_rate} != IR rate {ir_set.sample_rate}"
            )
    out_len = max(s.num_samples for s in sources) + max(
        np.asarray(ir_set.responses[d]).shape[1] for d in directions
    ) - 1
    acc = np.zeros((2, out_len))
    for src, d in zip(sources, directions):
        x = src.mono()
        ir = np.asarray(ir_set.responses[d])
        for ch in range(2):
            y = fftconvolve(x, ir[ch])
            acc[ch, : y.size] += y
    return Waveform(acc, ir_set.sample_rate)


# ---------------------------------------------------------------------------
# SNR mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixResult:
    """Mixture plus the exact scaled-noise component that was added."""

    mixture: Waveform
    scaled_noise: Waveform
    gain: float
    own_level_db: float
    noise_level_db: float


def _fit_noise_length(noise: np.ndarray, n: int, rng: random.Random) -> np.ndarray:
    """Crop longer noise at a random offset; loop shorter noise circularly
    from a random offset."""
    m = noise.shape[1]
    if m == n:
        return noise.copy()
    if m > n:
        start = rng.randrange(m - n + 1)
        return noise[:, start : start + n].copy()
    offset = rng.randrange(m)
    idx = (offset + np.arange(n)) % m
    return noise[:, idx]


def mix_at_snr(
    own: Waveform,
    noise: Waveform,
    snr_db: float,
    seed: int | None = None,
) -> MixResult:
    """Add noise to a two-channel own-voice pair at a controlled outer-mic SNR.

    The SNR anchors the *active* speech level of the outer channel against the
    plain RMS of the outer noise channel; one scalar gain is applied to both
    noise channels so the inter-channel structure of the noise is preserved.
    """
    if own.sample_rate != noise.sample_rate:
        raise ConfigMismatchError(f"own rate {own.sample_rate} != noise rate {noise.sample_rate}")
    if own.channel_count != noise.channel_count:
        raise ConfigMismatchError(
            f"own has {own.channel_count} channels, noise has {noise.channel_count}"
        )
    rng = random.Random(seed)
    fitted = _fit_noise_length(noise.samples, own.num_samples, rng)
    own_level = active_level(own.channel(0))
    noise_level = rms_level(Waveform(fitted[:1], noise.sample_rate))
    gain = 10.0 ** ((own_level - noise_level - snr_db) / 20.0)
    scaled = fitted * gain
    return MixResult(
        mixture=Waveform(own.samples + scaled, own.sample_rate),
        scaled_noise=Waveform(scaled, own.sample_rate),
        gain=gain,
        own_level_db=own_level,
        noise_level_db=noise_level,
    )


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    noise_paths: tuple[str, ...]
    directions: tuple[int, ...]
    snr_db: float

    def __post_init__(self):
        object.__setattr__(self, "noise_paths", tuple(str(p) for p in self.noise_paths))
        object.__setattr__(self, "directions", tuple(int(d) for d in self.directions))
        if len(self.noise_paths) != len(self.directions):
            raise ValueError("noise_paths and directions must have equal length")


@dataclass(frozen=True)
class ManifestRow:
    utterance_path: str
    annotation_path: str
    transfer_model_id: str
    split: str
    noise_spec: NoiseSpec | None = None

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"split must be train|val|test, got {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[ManifestRow, ...]
    mode: str
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.mode not in ("generic", "personalized"):
            raise ValueError(f"mode must be generic|personalized, got {self.mode!r}")
        if self.mode == "personalized":
            ids = {r.transfer_model_id for r in self.rows}
            if len(ids) > 1:
                raise ValueError(f"personalized manifest must use one model, found {sorted(ids)}")

    @property
    def model_ids(self) -> list[str]:
        return sorted({r.transfer_model_id for r in self.rows})


@dataclass(frozen=True)
class CorpusEntry:
    utterance_path: str
    annotation_path: str
    talker_id: str


def build_manifest(
    corpus_index: Sequence[CorpusEntry],
    model_ids: Sequence[str],
    mode: str,
    split_spec: Mapping[str, int],
    seed: int,
    noise: NoiseSpec | None = None,
) -> DatasetManifest:
    """Assign splits per talker (in corpus order) and a transfer model per row.

    Generic mode draws each row's model uniformly with the seeded RNG;
    personalized mode requires exactly one model and stamps it everywhere.
    """
    if not corpus_index:
        raise DataError("corpus index is empty")
    if not model_ids:
        raise DataError("model pool is empty")
    if mode == "personalized" and len(model_ids) != 1:
        raise DataError(f"personalized mode requires exactly one model, got {len(model_ids)}")
    sizes = {s: int(split_spec.get(s, 0)) for s in ("train", "val", "test")}
    total = sum(sizes.values())
    by_talker: dict[str, list[CorpusEntry]] = {}
    for entry in corpus_index:
        by_talker.setdefault(entry.talker_id, []).append(entry)
    for talker, entries in by_talker.items():
        if len(entries) < total:
            raise DataError(
                f"talker {talker!r} has {len(entries)} utterances, split needs {total}"
            )
    rng = random.Random(seed)
    rows = []
    for talker in by_talker:  # insertion order = corpus order
        entries = by_talker[talker]
        cursor = 0
        for split in ("train", "val", "test"):
            for entry in entries[cursor : cursor + sizes[split]]:
                model_id = model_ids[0] if mode == "personalized" else rng.choice(model_ids)
                rows.append(
                    ManifestRow(
                        utterance_path=entry.utterance_path,
                        annotation_path=entry.annotation_path,
                        transfer_model_id=model_id,
                        split=split,
                        noise_spec=noise,
                    )
                )
            cursor += sizes[split]
    return DatasetManifest(rows=tuple(rows), mode=mode, seed=seed)


def select_finetune_subset(manifest: DatasetManifest, size: int, seed: int) -> DatasetManifest:
    """Uniform draw without replacement from the train rows of all talkers."""
    pool = [r for r in manifest.rows if r.split == "train"]
    if size > len(pool):
        raise DataError(f"subset size {size} exceeds train pool of {len(pool)}")
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(pool)), size))
    return DatasetManifest(rows=tuple(pool[i] for i in chosen), mode=manifest.mode, seed=seed)


def _row_to_json(row: ManifestRow) -> dict:
    doc: dict = {
        "utterance_path": row.utterance_path,
        "annotation_path": row.annotation_path,
        "transfer_model_id": row.transfer_model_id,
        "split": row.split,
    }
    if row.noise_spec is not None:
        doc["noise_spec"] = {
            "noise_paths": list(row.noise_spec.noise_paths),
            "directions": list(row.noise_spec.directions),
            "snr_db": row.noise_spec.snr_db,
        }
    return doc


def write_manifest(manifest: DatasetManifest, path: str | Path):
    """JSON-lines: a header object, then one row object per utterance."""
    lines = [
        json.dumps(
            {"version": MANIFEST_SCHEMA_VERSION, "mode": manifest.mode, "seed": manifest.seed},
            sort_keys=True,
        )
    ]
    lines += [json.dumps(_row_to_json(r), sort_keys=True) for r in manifest.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        if header.get("version") != MANIFEST_SCHEMA_VERSION:
            raise SchemaError(f"{path}: unknown manifest version {header.get('version')!r}")
        rows = []
        for ln in lines[1:]:
            doc = json.loads(ln)
            spec = None
            if doc.get("noise_spec") is not None:
                ns = doc["noise_spec"]
                spec = NoiseSpec(
                    noise_paths=tuple(ns["noise_paths"]),
                    directions=tuple(ns["directions"]),
                    snr_db=float(ns["snr_db"]),
                )
            rows.append(
                ManifestRow(
                    utterance_path=doc["utterance_path"],
                    annotation_path=doc["annotation_path"],
                    transfer_model_id=doc["transfer_model_id"],
                    split=doc["split"],
                    noise_spec=spec,
                )
            )
        return DatasetManifest(rows=tuple(rows), mode=header["mode"], seed=int(header["seed"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed manifest: {exc}") from exc
