"""Experiment configuration: screens, stimuli, and their validation.

Config files are JSON; stimulus paths are resolved relative to the config
file's directory.  Validation decodes every WAV once: all stimuli of a screen
must share a sample rate, and a screen that declares a hidden reference must
contain exactly one stimulus whose decoded content equals the reference
signal (matched by content, not by label, so authors are free to name the
condition; exports normalize it to "hidden_reference").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError, SchemaError
from ..signal_core import load_wav

HIDDEN_REFERENCE_LABEL = "hidden_reference"


@dataclass(frozen=True)
class StimulusSpec:
    condition_label: str
    path: str  # absolute, resolved at load time


@dataclass(frozen=True)
class ScreenSpec:
    screen_id: str
    reference_stimulus: str
    stimuli: tuple
    hidden_reference_included: bool
    # condition label of the stimulus identified (by content) as the hidden
    # reference; None when not included
    hidden_reference_label: Optional[str] = None

    def conditions(self):
        return [s.condition_label for s in self.stimuli]


@dataclass(frozen=True)
class UiOptions:
    require_full_scale_use: bool = False
    loop_playback: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    screens: tuple
    seed: int
    training_screen: Optional[ScreenSpec] = None
    ui_options: UiOptions = field(default_factory=UiOptions)

    def screen(self, screen_id: str) -> ScreenSpec:
        for s in self.screens:
            if s.screen_id == screen_id:
                return s
        raise KeyError(screen_id)


def _parse_stimulus(entry, base: Path, where: str) -> StimulusSpec:
    try:
        label = str(entry["condition"])
        path = str(entry["path"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{where}: stimulus needs 'condition' and 'path': {exc}") from exc
    if not label:
        raise SchemaError(f"{where}: empty condition label")
    return StimulusSpec(condition_label=label, path=str((base / path).resolve()))


def _parse_screen(entry, base: Path, where: str) -> ScreenSpec:
    try:
        screen_id = str(entry["screen_id"])
        reference = str(entry["reference"])
        stimuli_raw = entry["stimuli"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{where}: screen needs 'screen_id', 'reference', 'stimuli': {exc}") from exc
    if not isinstance(stimuli_raw, list) or not stimuli_raw:
        raise SchemaError(f"{where}: 'stimuli' must be a non-empty list")
    stimuli = tuple(
        _parse_stimulus(s, base, f"{where}: stimulus {i}") for i, s in enumerate(stimuli_raw)
    )
    labels = [s.condition_label for s in stimuli]
    if len(set(labels)) != len(labels):
        raise SchemaError(f"{where}: duplicate condition labels")
    return ScreenSpec(
        screen_id=screen_id,
        reference_stimulus=str((base / reference).resolve()),
        stimuli=stimuli,
        hidden_reference_included=bool(entry.get("hidden_reference_included", True)),
    )


def _validated_screen(screen: ScreenSpec, where: str) -> ScreenSpec:
    """Decode every file once; enforce rate equality and hidden-ref content."""
    try:
        reference = load_wav(screen.reference_stimulus)
    except Exception as exc:
        raise DataError(f"{where}: cannot read reference {screen.reference_stimulus}: {exc}") from exc
    decoded = {}
    for stim in screen.stimuli:
        try:
            decoded[stim.condition_label] = load_wav(stim.path)
        except Exception as exc:
            raise DataError(f"{where}: cannot read stimulus {stim.path}: {exc}") from exc
    rates = {w.sample_rate for w in decoded.values()} | {reference.sample_rate}
    if len(rates) != 1:
        raise DataError(f"{where}: mixed sample rates {sorted(rates)} within one screen")
    hidden_label = None
    if screen.hidden_reference_included:
        matches = [
            label
            for label, wave in decoded.items()
            if wave.samples.shape == reference.samples.shape
            and np.array_equal(wave.samples, reference.samples)
        ]
        if len(matches) != 1:
            raise DataError(
                f"{where}: hidden_reference_included needs exactly one stimulus "
                f"matching the reference content, found {len(matches)} ({matches})"
            )
        hidden_label = matches[0]
    return ScreenSpec(
        screen_id=screen.screen_id,
        reference_stimulus=screen.reference_stimulus,
        stimuli=screen.stimuli,
        hidden_reference_included=screen.hidden_reference_included,
        hidden_reference_label=hidden_label,
    )


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: config must be an object")
    base = path.parent
    try:
        experiment_id = str(raw["experiment_id"])
        screens_raw = raw["screens"]
        seed = int(raw["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: config needs 'experiment_id', 'screens', 'seed': {exc}") from exc
    if not isinstance(screens_raw, list) or not screens_raw:
        raise SchemaError(f"{path}: 'screens' must be a non-empty list")
    screens = []
    for i, entry in enumerate(screens_raw):
        screen = _parse_screen(entry, base, f"{path}: screen {i}")
        screens.append(_validated_screen(screen, f"{path}: screen {screen.screen_id!r}"))
    ids = [s.screen_id for s in screens]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate screen_ids")
    training = None
    if raw.get("training_screen") is not None:
        training = _validated_screen(
            _parse_screen(raw["training_screen"], base, f"{path}: training_screen"),
            f"{path}: training_screen",
        )
    ui_raw = raw.get("ui_options", {})
    if not isinstance(ui_raw, dict):
        raise SchemaError(f"{path}: 'ui_options' must be an object")
    ui = UiOptions(
        require_full_scale_use=bool(ui_raw.get("require_full_scale_use", False)),
        loop_playback=bool(ui_raw.get("loop_playback", True)),
    )
    return ExperimentConfig(
        experiment_id=experiment_id,
        screens=tuple(screens),
        seed=seed,
        training_screen=training,
        ui_options=ui,
    )
