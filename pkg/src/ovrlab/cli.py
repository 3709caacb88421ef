"""Command-line pipelines.

One entry point, one subcommand per pipeline stage: transfer-model
estimation, in-ear simulation, noisy mixing, MWF enhancement, metric sweeps,
rating analysis, and the listening-test server.  Exit codes: 0 success,
2 usage, 3 data problem, 4 numeric failure.  A JSON config file
(--config) can pre-fill any subcommand's options; explicit flags win.
Every JSON report embeds the resolved options and a schema version.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .analysis import analyze_experiment, format_p, load_ratings, load_screen_info
from .augmentation import mix_at_snr, read_manifest, simulate_inear, simulate_inear_personalized
from .errors import DataError, NumericError, ToolkitError
from .metrics import DEFAULT_SCALES, estoi, ingest_predictions, load_scale_registry
from .mwf import MwfConfig, enhance_waveform
from .rtf import EMPTY_ANNOTATION, PhonemeAnnotation, RtfAccumulator, load_model, save_model
from .signal_core import StftConfig, Waveform, load_wav, save_wav, stft

REPORT_SCHEMA_VERSION = 1

EXIT_DATA = 3
EXIT_NUMERIC = 4


def _guarded(fn):
    """Map domain errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (ToolkitError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def _resolve(ctx, command: str, **flags) -> dict:
    """Merge config-file defaults under `command` into unset flags."""
    defaults = ctx.obj.get("config_data", {}).get(command, {})
    resolved = {}
    for key, value in flags.items():
        if value is None or value == ():
            value = defaults.get(key, value)
            if isinstance(value, list):
                value = tuple(value)
        resolved[key] = value
    resolved["seed"] = ctx.obj["seed"]
    resolved["jobs"] = ctx.obj["jobs"]
    return resolved


def _require(resolved: dict, *names):
    for name in names:
        if resolved.get(name) in (None, ()):
            raise click.UsageError(f"missing required option --{name.replace('_', '-')}")


def _pmap(fn, items, jobs: int) -> list:
    """Map preserving input order; a thread pool when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_report(path, command: str, resolved: dict, payload: dict) -> None:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in resolved.items()},
    }
    doc.update(payload)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _load_mono(path, channel: int = 0) -> Waveform:
    """Load a WAV; a multichannel file contributes the indexed channel."""
    wave = load_wav(path)
    if wave.channel_count == 1:
        return wave
    if channel >= wave.channel_count:
        raise DataError(f"{path}: has {wave.channel_count} channels, need channel {channel}")
    return wave.channel(channel)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file with per-subcommand option defaults; flags win.")
@click.option("--seed", type=int, default=None, help="RNG seed for all stochastic steps.")
@click.option("--jobs", type=int, default=None, help="Worker threads for batch stages.")
@click.pass_context
def cli(ctx, config_path, seed, jobs):
    """Own-voice reconstruction toolkit."""
    config_data = {}
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                config_data = json.load(fh)
        except FileNotFoundError:
            raise click.UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise click.UsageError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(config_data, dict):
            raise click.UsageError(f"config file {config_path} must hold a JSON object")
    if seed is None:
        seed = int(config_data.get("seed", 0))
    if jobs is None:
        jobs = int(config_data.get("jobs", 1))
    if jobs < 1:
        raise click.UsageError("--jobs must be at least 1")
    ctx.obj = {"config_data": config_data, "seed": seed, "jobs": jobs,
               "config_path": config_path}


main = cli


@cli.command("estimate-rtf")
@click.option("--outer", multiple=True, type=click.Path(dir_okay=False))
@click.option("--inear", multiple=True, type=click.Path(dir_okay=False))
@click.option("--annotations", multiple=True, type=click.Path(dir_okay=False))
@click.option("--talker", type=str, default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--min-frames", type=int, default=10, show_default=True,
              help="Frames below which a phoneme falls back to the global response.")
@click.option("--energy-floor-db", type=float, default=40.0, show_default=True)
@click.pass_context
@_guarded
def estimate_rtf(ctx, outer, inear, annotations, talker, out, min_frames, energy_floor_db):
    """Estimate a talker's phoneme transfer model from outer/in-ear pairs."""
    resolved = _resolve(ctx, "estimate_rtf", outer=outer, inear=inear,
                        annotations=annotations, talker=talker, out=out,
                        min_frames=min_frames, energy_floor_db=energy_floor_db)
    _require(resolved, "outer", "inear", "talker", "out")
    outer, inear, annotations = resolved["outer"], resolved["inear"], resolved["annotations"]
    if len(inear) != len(outer):
        raise click.UsageError(
            f"--outer and --inear list lengths differ ({len(outer)} vs {len(inear)})"
        )
    if annotations and len(annotations) != len(outer):
        raise click.UsageError(
            f"--annotations must be empty or match --outer ({len(annotations)} vs {len(outer)})"
        )

    def prepare(paths):
        outer_path, inear_path, ann_path = paths
        wave_o = _load_mono(outer_path)
        wave_i = _load_mono(inear_path)
        if wave_o.sample_rate != wave_i.sample_rate:
            raise DataError(
                f"{outer_path} / {inear_path}: sample rates differ "
                f"({wave_o.sample_rate} vs {wave_i.sample_rate})"
            )
        ann = PhonemeAnnotation.from_tsv(ann_path) if ann_path else EMPTY_ANNOTATION
        cfg = StftConfig()
        return stft(wave_o, cfg), stft(wave_i, cfg), ann

    triplets = list(zip(outer, inear, annotations or [None] * len(outer)))
    prepared = _pmap(prepare, triplets, resolved["jobs"])
    acc = RtfAccumulator(StftConfig(), prepared[0][0].sample_rate,
                         energy_floor_db=resolved["energy_floor_db"])
    for spec_o, spec_i, ann in prepared:
        acc.add(spec_o, spec_i, ann)
    model = acc.finalize(talker_id=resolved["talker"], min_frames=resolved["min_frames"])
    save_model(model, resolved["out"])
    click.echo(
        f"estimated transfer model for talker {model.talker_id!r}: "
        f"{len(model.phonemes)} phoneme responses from {len(outer)} utterance pair(s) "
        f"-> {resolved['out']}"
    )


@cli.command("simulate")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--models", "models_dir", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--personalized", type=str, default=None,
              help="Target talker id; requires a single-model manifest for that talker.")
@click.option("--alpha", type=float, default=0.5, show_default=True,
              help="Frame-recursive smoothing weight for the applied responses.")
@click.pass_context
@_guarded
def simulate(ctx, manifest, models_dir, out_dir, personalized, alpha):
    """Synthesize in-ear signals for every manifest row."""
    resolved = _resolve(ctx, "simulate", manifest=manifest, models=models_dir,
                        out=out_dir, personalized=personalized, alpha=alpha)
    _require(resolved, "manifest", "models", "out")
    data = read_manifest(resolved["manifest"])
    personalized = resolved["personalized"]
    if personalized is not None and data.model_ids != [personalized]:
        raise DataError(
            f"--personalized {personalized!r} needs a single-model manifest for that "
            f"talker, manifest uses {data.model_ids}"
        )
    models_dir = Path(resolved["models"])
    missing = [mid for mid in data.model_ids if not (models_dir / f"{mid}.json").exists()]
    if missing:
        raise DataError(f"missing model file(s) under {models_dir}: {', '.join(missing)}")
    models = {mid: load_model(models_dir / f"{mid}.json") for mid in data.model_ids}
    out_root = Path(resolved["out"])
    out_root.mkdir(parents=True, exist_ok=True)

    def run(indexed):
        i, row = indexed
        clean = _load_mono(row.utterance_path)
        ann = (PhonemeAnnotation.from_tsv(row.annotation_path)
               if row.annotation_path else EMPTY_ANNOTATION)
        model = models[row.transfer_model_id]
        if personalized is not None:
            simulated = simulate_inear_personalized(clean, ann, model, personalized,
                                                    alpha=resolved["alpha"])
        else:
            simulated = simulate_inear(clean, ann, model, alpha=resolved["alpha"])
        out_path = out_root / f"{i:04d}_{Path(row.utterance_path).stem}.wav"
        save_wav(simulated, out_path)
        return str(out_path)

    written = _pmap(run, enumerate(data.rows), resolved["jobs"])
    click.echo(f"simulated {len(written)} in-ear signal(s) -> {out_root}")


@cli.command("mix")
@click.option("--outer", multiple=True, type=click.Path(dir_okay=False))
@click.option("--inear", multiple=True, type=click.Path(dir_okay=False))
@click.option("--noise", multiple=True, type=click.Path(dir_okay=False),
              help="One file reused for all pairs, or one per pair.")
@click.option("--snr", type=float, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@_guarded
def mix(ctx, outer, inear, noise, snr, out_dir):
    """Mix two-channel own-voice pairs with noise at a controlled outer SNR."""
    resolved = _resolve(ctx, "mix", outer=outer, inear=inear, noise=noise,
                        snr=snr, out=out_dir)
    _require(resolved, "outer", "inear", "noise", "snr", "out")
    outer, inear, noise = resolved["outer"], resolved["inear"], resolved["noise"]
    if len(inear) != len(outer):
        raise click.UsageError(
            f"--outer and --inear list lengths differ ({len(outer)} vs {len(inear)})"
        )
    if len(noise) not in (1, len(outer)):
        raise click.UsageError(
            f"--noise needs 1 or {len(outer)} file(s), got {len(noise)}"
        )
    out_root = Path(resolved["out"])
    out_root.mkdir(parents=True, exist_ok=True)

    def run(indexed):
        i, (outer_path, inear_path) = indexed
        wave_o = _load_mono(outer_path)
        wave_i = _load_mono(inear_path)
        if wave_o.sample_rate != wave_i.sample_rate:
            raise DataError(f"{outer_path} / {inear_path}: sample rates differ")
        if wave_o.num_samples != wave_i.num_samples:
            raise DataError(f"{outer_path} / {inear_path}: lengths differ")
        own = Waveform(np.vstack([wave_o.mono(), wave_i.mono()]), wave_o.sample_rate)
        noise_wave = load_wav(noise[i] if len(noise) > 1 else noise[0])
        if noise_wave.channel_count == 1:
            noise_wave = Waveform(np.vstack([noise_wave.mono()] * 2), noise_wave.sample_rate)
        result = mix_at_snr(own, noise_wave, resolved["snr"], seed=resolved["seed"] + i)
        out_path = out_root / f"{i:04d}_{Path(outer_path).stem}_mix.wav"
        save_wav(result.mixture, out_path)
        return {
            "outer": str(outer_path),
            "inear": str(inear_path),
            "output": str(out_path),
            "snr_db": resolved["snr"],
            "gain": result.gain,
            "own_level_db": result.own_level_db,
            "noise_level_db": result.noise_level_db,
        }

    rows = _pmap(run, enumerate(zip(outer, inear)), resolved["jobs"])
    _write_report(out_root / "mix_report.json", "mix", resolved, {"rows": rows})
    click.echo(f"mixed {len(rows)} pair(s) at {resolved['snr']:+.1f} dB -> {out_root}")


@cli.command("enhance-mwf")
@click.option("--input", "inputs", multiple=True, type=click.Path(dir_okay=False),
              help="Two-channel WAV files: channel 0 outer, channel 1 in-ear.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--init-frames", type=int, default=10, show_default=True)
@click.pass_context
@_guarded
def enhance_mwf(ctx, inputs, out_dir, init_frames):
    """Run the two-channel filter over noisy recordings."""
    resolved = _resolve(ctx, "enhance_mwf", input=inputs, out=out_dir,
                        init_frames=init_frames)
    _require(resolved, "input", "out")
    out_root = Path(resolved["out"])
    out_root.mkdir(parents=True, exist_ok=True)
    config = MwfConfig(init_frames=resolved["init_frames"])

    def run(indexed):
        i, path = indexed
        wave = load_wav(path)
        if wave.channel_count != 2:
            raise DataError(f"{path}: expected 2 channels (outer, in-ear), "
                            f"got {wave.channel_count}")
        enhanced = enhance_waveform(wave.channel(0), wave.channel(1), config)
        out_path = out_root / f"{i:04d}_{Path(path).stem}_mwf.wav"
        save_wav(enhanced, out_path)
        return str(out_path)

    written = _pmap(run, enumerate(resolved["input"]), resolved["jobs"])
    click.echo(f"enhanced {len(written)} recording(s) -> {out_root}")


def _read_pairs_csv(path):
    """Rows of (reference, noisy, processed[, snr]); header row optional."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        raw = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if not raw:
        raise DataError(f"{path}: no rows")
    start = 0
    head = [cell.strip().lower() for cell in raw[0]]
    if head[:3] == ["reference", "noisy", "processed"]:
        start = 1
    rows = []
    for lineno, row in enumerate(raw[start:], start=start + 1):
        if len(row) not in (3, 4):
            raise DataError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(row)}")
        snr = None
        if len(row) == 4:
            try:
                snr = float(row[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad snr value {row[3]!r}") from exc
        rows.append((row[0].strip(), row[1].strip(), row[2].strip(), snr))
    return rows


def _group_rows_by_snr(rows, snrs):
    """Attach each row to one sweep SNR.

    Explicit per-row values must cover exactly the requested sweep; without
    them a multi-SNR sweep expects the rows in consecutive equal-sized
    blocks, one block per SNR in the given order.
    """
    groups = {s: [] for s in snrs}
    tagged = [r for r in rows if r[3] is not None]
    if tagged and len(tagged) != len(rows):
        raise DataError("pairs CSV mixes rows with and without an snr column")
    if tagged:
        extra = sorted({r[3] for r in rows} - set(snrs))
        if extra:
            raise DataError(f"pairs CSV contains SNRs not in --snrs: {extra}")
        for row in rows:
            groups[row[3]].append(row)
    elif len(snrs) == 1:
        groups[snrs[0]] = list(rows)
    else:
        if len(rows) % len(snrs):
            raise DataError(
                f"{len(rows)} rows cannot be split evenly over {len(snrs)} SNRs; "
                "add an snr column to the pairs CSV"
            )
        block = len(rows) // len(snrs)
        for j, s in enumerate(snrs):
            groups[s] = list(rows[j * block : (j + 1) * block])
    empty = [s for s, g in groups.items() if not g]
    if empty:
        raise DataError(f"no pairs for SNR(s) {empty}")
    return groups


@cli.command("evaluate")
@click.option("--pairs", type=click.Path(dir_okay=False), default=None,
              help="CSV of reference,noisy,processed paths (optional snr column).")
@click.option("--snrs", type=str, default=None, help="Comma-separated sweep, e.g. -10,-5,0,5,10")
@click.option("--metric", type=click.Choice(["estoi"]), default="estoi", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_guarded
def evaluate(ctx, pairs, snrs, metric, out):
    """Intelligibility sweep: per-SNR and averaged improvement."""
    resolved = _resolve(ctx, "evaluate", pairs=pairs, snrs=snrs, metric=metric, out=out)
    _require(resolved, "pairs", "snrs", "out")
    try:
        snr_list = [float(tok) for tok in str(resolved["snrs"]).split(",") if tok.strip()]
    except ValueError:
        raise click.UsageError(f"--snrs must be comma-separated numbers, got {resolved['snrs']!r}")
    if not snr_list:
        raise click.UsageError("--snrs is empty")
    rows = _read_pairs_csv(resolved["pairs"])

    missing = []
    usable = []
    for idx, row in enumerate(rows):
        absent = [p for p in row[:3] if not Path(p).exists()]
        if absent:
            missing.append({"row": idx + 1, "missing": absent})
        else:
            usable.append(row)
    if not usable:
        raise DataError(
            "no evaluable pairs; missing files: "
            + "; ".join(str(m["missing"]) for m in missing)
        )
    groups = _group_rows_by_snr(usable, snr_list)

    def score(row):
        reference = _load_mono(row[0])
        noisy = _load_mono(row[1])
        processed = _load_mono(row[2])
        before = estoi(reference, noisy)
        after = estoi(reference, processed)
        return {"reference": row[0], "noisy": row[1], "processed": row[2],
                "score_noisy": before, "score_processed": after,
                "delta": after - before}

    per_snr = []
    for s in snr_list:
        scored = _pmap(score, groups[s], resolved["jobs"])
        per_snr.append({
            "snr_db": s,
            "n_pairs": len(scored),
            "mean_score_noisy": float(np.mean([r["score_noisy"] for r in scored])),
            "mean_score_processed": float(np.mean([r["score_processed"] for r in scored])),
            "mean_delta": float(np.mean([r["delta"] for r in scored])),
            "pairs": scored,
        })
    average_delta = float(np.mean([g["mean_delta"] for g in per_snr]))
    payload = {
        "metric": resolved["metric"],
        "per_snr": per_snr,
        "average": {"mean_delta": average_delta, "n_snrs": len(per_snr)},
        "missing_files": missing,
        "partial": bool(missing),
    }
    _write_report(resolved["out"], "evaluate", resolved, payload)
    note = f" ({len(missing)} pair(s) skipped, partial report)" if missing else ""
    click.echo(
        f"{resolved['metric']} improvement averaged over {len(per_snr)} SNR(s): "
        f"{average_delta:+.4f}{note} -> {resolved['out']}"
    )


@cli.command("analyze")
@click.option("--ratings", type=click.Path(dir_okay=False), default=None)
@click.option("--screens", type=click.Path(dir_okay=False), default=None,
              help="JSON: screen_id -> {talker, sentence, noise_type}.")
@click.option("--predictions", "predictions_dir", type=click.Path(file_okay=False),
              default=None, help="Directory of <metric>.csv prediction files.")
@click.option("--screening-rule",
              type=click.Choice(["reference_min_90_all_screens", "reference_top_ranked"]),
              default="reference_min_90_all_screens", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_guarded
def analyze(ctx, ratings, screens, predictions_dir, screening_rule, out):
    """Screening, per-talker tests, and metric agreement tables."""
    resolved = _resolve(ctx, "analyze", ratings=ratings, screens=screens,
                        predictions=predictions_dir, screening_rule=screening_rule,
                        out=out)
    _require(resolved, "ratings", "screens", "out")
    records = load_ratings(resolved["ratings"])
    screen_info = load_screen_info(resolved["screens"])

    predictions = None
    if resolved["predictions"] is not None:
        pred_root = Path(resolved["predictions"])
        if not pred_root.is_dir():
            raise DataError(f"predictions directory not found: {pred_root}")
        registry = dict(DEFAULT_SCALES)
        scales_file = pred_root / "scales.json"
        if scales_file.exists():
            registry.update(load_scale_registry(scales_file))
        predictions = {}
        for pred_file in sorted(pred_root.glob("*.csv")):
            name = pred_file.stem
            scale = registry.get(name)
            if scale is None:
                raise DataError(
                    f"{pred_file}: no scale known for metric {name!r}; "
                    f"add it to {scales_file.name}"
                )
            predictions[name] = (ingest_predictions(pred_file, name, scale), scale)
        if not predictions:
            raise DataError(f"predictions directory {pred_root} has no .csv files")

    report = analyze_experiment(
        records, screen_info, predictions, screening_rule=resolved["screening_rule"]
    )
    _write_report(resolved["out"], "analyze", resolved, report)
    for talker, block in report["talkers"].items():
        click.echo(f"[talker {talker}] Friedman chi2({block['friedman']['df']}) = "
                   f"{block['friedman']['chi2']:.2f}, p = {format_p(block['friedman']['p'])}")
    if report.get("metric_table"):
        click.echo(report["metric_table"])
    click.echo(f"report -> {resolved['out']}")


@cli.command("serve")
@click.option("--experiment", type=click.Path(dir_okay=False), default=None)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.pass_context
@_guarded
def serve(ctx, experiment, data_dir, port, host):
    """Serve a listening experiment over HTTP."""
    resolved = _resolve(ctx, "serve", experiment=experiment, data_dir=data_dir,
                        port=port, host=host)
    _require(resolved, "experiment", "data_dir")
    from .experiment import create_app, load_experiment_config

    config = load_experiment_config(resolved["experiment"])
    app = create_app(config, resolved["data_dir"])
    click.echo(
        f"serving experiment {config.experiment_id!r} "
        f"({len(config.screens)} screens) on {resolved['host']}:{resolved['port']}"
    )
    import uvicorn

    uvicorn.run(app, host=resolved["host"], port=int(resolved["port"]), log_level="warning")


if __name__ == "__main__":
    main()
