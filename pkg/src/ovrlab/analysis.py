"""Statistics for subjective ratings and objective-metric agreement.

Covers the full evaluation chain: participant screening, aggregation of
MUSHRA ratings into subject x condition matrices, Friedman and Wilcoxon
signed-rank tests with Bonferroni correction, correlation of metric
predictions with median ratings, and RMSE before/after a third-order
polynomial fit.  Nonparametric tests throughout; no normality machinery.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import stats

from .errors import DataError, MissingCellsError, NumericError, SchemaError
from .metrics import MetricScale

logger = logging.getLogger(__name__)

__all__ = [
    "RatingRecord",
    "ScreenInfo",
    "RatingMatrix",
    "load_ratings",
    "load_screen_info",
    "aggregate_ratings",
    "median_by_stimulus",
    "FriedmanResult",
    "friedman_test",
    "WilcoxonResult",
    "wilcoxon_signed_rank",
    "bonferroni",
    "format_p",
    "pearson",
    "spearman",
    "scale_to_mushra",
    "rmse_scaled",
    "Poly3Fit",
    "fit_poly3",
    "rmse_poly3",
    "ScreeningResult",
    "screen_participants",
    "render_pairwise_table",
    "render_metric_table",
    "analyze_experiment",
]

REFERENCE_LABEL = "hidden_reference"

# Exact Wilcoxon by sign enumeration up to this many nonzero differences;
# 2^25 outcomes is covered bit-exactly by the integer-count convolution.
_EXACT_LIMIT = 25


class RatingRecord(NamedTuple):
    participant: str
    screen_id: str
    condition: str
    rating: float


class ScreenInfo(NamedTuple):
    talker: str
    sentence: str
    noise_type: str


@dataclass(frozen=True)
class RatingMatrix:
    """Subjects x conditions rating matrix plus the labels that index it."""

    values: np.ndarray
    participants: tuple
    conditions: tuple
    trail: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.participants), len(self.conditions)):
            raise ValueError(
                f"matrix shape {v.shape} does not match "
                f"{len(self.participants)} participants x {len(self.conditions)} conditions"
            )
        if v.size and (v.min() < 0.0 or v.max() > 100.0):
            raise ValueError("ratings must lie in [0, 100]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "conditions", tuple(self.conditions))


def load_ratings(path) -> list:
    """Read a ratings CSV with header participant,screen_id,condition,rating."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["participant", "screen_id", "condition", "rating"]:
            raise DataError(
                f"{path}: line 1: expected header "
                f"'participant,screen_id,condition,rating', got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            participant, screen_id, condition = (f.strip() for f in row[:3])
            if not (participant and screen_id and condition):
                raise DataError(f"{path}: line {lineno}: empty field")
            try:
                rating = float(row[3])
            except ValueError:
                raise DataError(
                    f"{path}: line {lineno}: malformed rating {row[3]!r}"
                ) from None
            if not math.isfinite(rating) or not 0.0 <= rating <= 100.0:
                raise DataError(
                    f"{path}: line {lineno}: rating {row[3]!r} outside [0, 100]"
                )
            records.append(RatingRecord(participant, screen_id, condition, rating))
    return records


def load_screen_info(path) -> dict:
    """Read screen metadata JSON: screen_id -> {talker, sentence, noise_type}."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: screen metadata must be an object")
    screens = {}
    for screen_id, entry in raw.items():
        try:
            screens[screen_id] = ScreenInfo(
                talker=str(entry["talker"]),
                sentence=str(entry["sentence"]),
                noise_type=str(entry["noise_type"]),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: bad screen entry for {screen_id!r}: {exc}") from exc
    return screens


def _apply_statistic(values, statistic):
    if statistic == "mean":
        return float(np.mean(values))
    if statistic == "median":
        return float(np.median(values))
    raise ValueError(f"unknown statistic {statistic!r}")


def aggregate_ratings(
    records: Sequence[RatingRecord],
    over=frozenset(),
    statistic: str = "mean",
    screens: Optional[dict] = None,
    talker: Optional[str] = None,
    exclude_conditions=frozenset(),
) -> RatingMatrix:
    """Collapse rating records into a subjects x conditions matrix.

    `over` names the factors to average out: a subset of
    {"sentences", "noise_types"} when screen metadata is given, or
    {"screens"} to pool everything without metadata.  Every participant x
    condition must cover the same factor combinations — including the
    averaged-out ones, which would otherwise bias the pooled means — and an
    incomplete factorial raises MissingCellsError naming each hole at the
    finest granularity observed within its group (so nested designs, where
    e.g. talkers use disjoint sentence sets, are not flagged).
    """
    over = frozenset(over)
    known = {"sentences", "noise_types"} if screens is not None else {"screens"}
    if not over <= known:
        raise ValueError(f"cannot aggregate over {sorted(over - known)} here")
    rows = [r for r in records if r.condition not in exclude_conditions]
    if talker is not None:
        if screens is None:
            raise ValueError("talker filtering requires screen metadata")
        rows = [r for r in rows if _screen_of(screens, r).talker == talker]
    if not rows:
        raise DataError("no rating records to aggregate")

    def cell_key(r):
        if screens is None:
            return r.screen_id if "screens" not in over else ()
        info = _screen_of(screens, r)
        key = [info.talker]
        if "sentences" not in over:
            key.append(info.sentence)
        if "noise_types" not in over:
            key.append(info.noise_type)
        return tuple(key)

    def fine_key(r):
        if screens is None:
            return r.screen_id
        info = _screen_of(screens, r)
        return (info.talker, info.sentence, info.noise_type)

    participants = list(dict.fromkeys(r.participant for r in rows))
    conditions = list(dict.fromkeys(r.condition for r in rows))
    all_keys = sorted(set(cell_key(r) for r in rows))

    grouped = {}
    fine_by_cell = {}
    seen_fine = set()
    for r in rows:
        grouped.setdefault((r.participant, r.condition, cell_key(r)), []).append(r.rating)
        fine_by_cell.setdefault(cell_key(r), set()).add(fine_key(r))
        seen_fine.add((r.participant, r.condition, fine_key(r)))

    missing = [
        (p, c, f)
        for p in participants
        for c in conditions
        for k in all_keys
        for f in sorted(fine_by_cell[k])
        if (p, c, f) not in seen_fine
    ]
    if missing:
        raise MissingCellsError(
            f"{len(missing)} missing cells, first: {missing[0]!r}", missing=missing
        )

    values = np.empty((len(participants), len(conditions)))
    for i, p in enumerate(participants):
        for j, c in enumerate(conditions):
            per_key = [
                _apply_statistic(grouped[(p, c, k)], statistic) for k in all_keys
            ]
            values[i, j] = _apply_statistic(per_key, statistic)
    trail = f"{statistic} over {sorted(over)}" + (f", talker={talker}" if talker else "")
    return RatingMatrix(values, tuple(participants), tuple(conditions), trail)


def _screen_of(screens, record):
    try:
        return screens[record.screen_id]
    except KeyError:
        raise DataError(f"no screen metadata for {record.screen_id!r}") from None


def median_by_stimulus(
    records: Sequence[RatingRecord],
    participants=None,
    statistic: str = "median",
    exclude_conditions=frozenset({REFERENCE_LABEL}),
) -> dict:
    """Per-stimulus statistic over subjects: {"screen_id/condition": value}."""
    grouped = {}
    for r in records:
        if r.condition in exclude_conditions:
            continue
        if participants is not None and r.participant not in participants:
            continue
        grouped.setdefault(f"{r.screen_id}/{r.condition}", []).append(r.rating)
    return {sid: _apply_statistic(vals, statistic) for sid, vals in grouped.items()}


# --- rank machinery ---------------------------------------------------------


def _midranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


class FriedmanResult(NamedTuple):
    chi2: float
    df: int
    p: float


def friedman_test(matrix: RatingMatrix) -> FriedmanResult:
    """Friedman rank sum test over a subjects x conditions matrix.

    Midranks within each subject; the tie correction divides the statistic by
    1 - sum(t^3 - t) / (n c (c^2 - 1)).  A matrix where every subject rates
    all conditions identically has no rank information at all: chi2 = 0,
    p = 1 by convention.
    """
    x = matrix.values
    n, c = x.shape
    if n < 2:
        raise DataError(f"need at least 2 subjects, got {n}")
    if c < 3:
        raise DataError(f"need at least 3 conditions, got {c}")
    ranks = np.vstack([_midranks(row) for row in x])
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * c * (c + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (c + 1)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts**3 - counts))
    denom = 1.0 - ties / (n * c * (c**2 - 1))
    df = c - 1
    if denom <= 0.0:
        return FriedmanResult(chi2=0.0, df=df, p=1.0)
    chi2 /= denom
    chi2 = max(chi2, 0.0)
    return FriedmanResult(chi2=chi2, df=df, p=float(stats.chi2.sf(chi2, df)))


class WilcoxonResult(NamedTuple):
    p: float
    w_plus: float
    n_nonzero: int
    exact: bool


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; |d| ties get midranks.  Up to 25 nonzero
    differences the p-value is exact over all 2^m sign assignments (computed
    by convolving integer counts over the doubled-rank grid, which is
    identical to full enumeration); beyond that a normal approximation with
    tie-corrected variance and 0.5 continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 5:
        raise DataError(f"need at least 5 pairs, got {a.size}")
    d = b - a
    d = d[d != 0.0]
    m = d.size
    if m == 0:
        return WilcoxonResult(p=1.0, w_plus=0.0, n_nonzero=0, exact=True)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if m <= _EXACT_LIMIT:
        # distribution of 2*W+ as integer counts; midranks double to integers
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        dp = np.zeros(int(doubled.sum()) + 1)
        dp[0] = 1.0
        for r2 in doubled:
            shifted = np.zeros_like(dp)
            shifted[r2:] = dp[: dp.size - r2]
            dp = dp + shifted
        total = 2.0**m
        w2 = int(round(2.0 * w_plus))
        p_low = dp[: w2 + 1].sum() / total
        p_high = dp[w2:].sum() / total
        p = min(1.0, 2.0 * min(p_low, p_high))
        return WilcoxonResult(p=p, w_plus=w_plus, n_nonzero=m, exact=True)

    mean = ranks.sum() / 2.0
    var = float(np.sum(ranks**2)) / 4.0
    if var == 0.0:
        return WilcoxonResult(p=1.0, w_plus=w_plus, n_nonzero=m, exact=False)
    z = (w_plus - mean - 0.5 * np.sign(w_plus - mean)) / math.sqrt(var)
    p = min(1.0, 2.0 * float(stats.norm.sf(abs(z))))
    return WilcoxonResult(p=p, w_plus=w_plus, n_nonzero=m, exact=False)


def bonferroni(pvals, m: int):
    """min(1, m*p) for each p; m must cover the comparison family."""
    pvals = list(pvals)
    if m < len(pvals):
        raise ValueError(f"family size {m} smaller than {len(pvals)} comparisons")
    return [min(1.0, m * p) for p in pvals]


def format_p(p: float, alpha: float = 0.05) -> str:
    """Publication rendering: '<0.001*', '>0.999', or '0.012*'-style."""
    if p >= 0.9995:
        return ">0.999"
    if p < 0.001:
        return "<0.001*"
    text = f"{p:.3f}"
    return text + "*" if p < alpha else text


# --- correlation and RMSE ---------------------------------------------------


def _pair_arrays(pairs):
    arr = np.asarray(list(pairs), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError("pairs must be (x, y) tuples")
    return arr[:, 0], arr[:, 1]


def pearson(pairs) -> float:
    x, y = _pair_arrays(pairs)
    if x.size < 3:
        raise DataError(f"need at least 3 pairs, got {x.size}")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = float(np.sqrt(np.sum(xd**2)))
    sy = float(np.sqrt(np.sum(yd**2)))
    if sx == 0.0 or sy == 0.0:
        raise NumericError("correlation undefined for constant input")
    return float(np.sum(xd * yd)) / (sx * sy)


def spearman(pairs) -> float:
    x, y = _pair_arrays(pairs)
    if x.size < 3:
        raise DataError(f"need at least 3 pairs, got {x.size}")
    return pearson(zip(_midranks(x), _midranks(y)))


def scale_to_mushra(values, scale: MetricScale):
    """Map metric values onto the 0-100 rating scale, clipping strays.

    Open-ended scales cannot be mapped; they carry no finite upper anchor.
    """
    if not (math.isfinite(scale.min) and math.isfinite(scale.max)):
        raise DataError(
            f"no finite scale: ({scale.min}, {scale.max}) cannot be mapped to 0-100"
        )
    v = np.asarray(values, dtype=np.float64)
    scaled = 100.0 * (v - scale.min) / (scale.max - scale.min)
    n_clipped = int(np.sum((scaled < 0.0) | (scaled > 100.0)))
    if n_clipped:
        logger.info("clipped %d out-of-scale predictions into [0, 100]", n_clipped)
    return np.clip(scaled, 0.0, 100.0)


def rmse_scaled(pairs, scale: MetricScale) -> float:
    """RMSE between scale-mapped predictions and 0-100 ratings."""
    x, y = _pair_arrays(pairs)
    scaled = scale_to_mushra(x, scale)
    return float(np.sqrt(np.mean((scaled - y) ** 2)))


@dataclass(frozen=True)
class Poly3Fit:
    """Unconstrained OLS cubic from raw predictions to ratings."""

    coefficients: np.ndarray  # c0..c3 in the raw (unshifted) basis
    rmse: float


def fit_poly3(pairs) -> Poly3Fit:
    x, y = _pair_arrays(pairs)
    if x.size < 5:
        raise DataError(f"need at least 5 pairs, got {x.size}")
    if np.ptp(x) == 0.0:
        raise NumericError("cubic fit undefined for constant predictions")
    # fitting happens on a [-1, 1]-mapped domain for conditioning; convert()
    # recovers the raw-basis coefficients
    poly = Polynomial.fit(x, y, deg=3)
    residuals = poly(x) - y
    coeffs = poly.convert().coef
    if coeffs.size < 4:
        coeffs = np.pad(coeffs, (0, 4 - coeffs.size))
    return Poly3Fit(coefficients=coeffs, rmse=float(np.sqrt(np.mean(residuals**2))))


def rmse_poly3(pairs) -> float:
    return fit_poly3(pairs).rmse


# --- participant screening --------------------------------------------------


@dataclass(frozen=True)
class ScreeningResult:
    kept: tuple
    excluded: tuple
    rule: str


def screen_participants(
    records: Sequence[RatingRecord],
    rule: str = "reference_min_90_all_screens",
    reference_label: str = REFERENCE_LABEL,
) -> ScreeningResult:
    """Exclude participants who failed to identify the hidden reference.

    reference_min_90_all_screens: out if any screen's reference rating < 90.
    reference_top_ranked: out if the reference is not the strictly
    highest-rated stimulus on some screen.
    """
    if rule not in ("reference_min_90_all_screens", "reference_top_ranked"):
        raise ValueError(f"unknown screening rule {rule!r}")
    by_screen = {}
    for r in records:
        by_screen.setdefault((r.participant, r.screen_id), {})[r.condition] = r.rating
    participants = list(dict.fromkeys(r.participant for r in records))
    excluded = set()
    for (participant, screen_id), conditions in by_screen.items():
        if reference_label not in conditions:
            raise DataError(
                f"participant {participant!r} has no {reference_label!r} rating "
                f"on screen {screen_id!r}"
            )
        ref = conditions[reference_label]
        if rule == "reference_min_90_all_screens":
            if ref < 90.0:
                excluded.add(participant)
        else:
            others = [v for c, v in conditions.items() if c != reference_label]
            if others and max(others) >= ref:
                excluded.add(participant)
    kept = tuple(p for p in participants if p not in excluded)
    result = ScreeningResult(kept=kept, excluded=tuple(sorted(excluded)), rule=rule)
    logger.info(
        "screening rule %s: kept %d, excluded %d participants",
        rule,
        len(result.kept),
        len(result.excluded),
    )
    return result


# --- report rendering -------------------------------------------------------


def render_pairwise_table(labels, p_by_pair) -> str:
    """Lower-triangular pairwise p-value table.

    labels: condition names in presentation order; p_by_pair: {(a, b): p}
    with unordered pairs.  Row i compares labels[i] (i >= 1) against all
    earlier columns.
    """
    cols = list(labels[:-1])
    rows = list(labels[1:])
    cells = []
    for i, row_label in enumerate(rows, start=1):
        line = []
        for j, col_label in enumerate(cols):
            if j < i:
                pair = (labels[j], row_label)
                p = p_by_pair.get(pair, p_by_pair.get(pair[::-1]))
                if p is None:
                    raise KeyError(f"no p-value for pair {pair!r}")
                line.append(format_p(p))
            else:
                line.append("-")
        cells.append(line)
    widths = [
        max([len(c)] + [len(line[j]) for line in cells]) for j, c in enumerate(cols)
    ]
    name_w = max(len(r) for r in rows)
    out = [" " * name_w + "  " + "  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    for row_label, line in zip(rows, cells):
        out.append(
            row_label.ljust(name_w)
            + "  "
            + "  ".join(c.rjust(w) for c, w in zip(line, widths))
        )
    return "\n".join(out)


def render_metric_table(rows) -> str:
    """Metric agreement table: name, r, rho_s, RMSE, RMSE3 ('-' when absent)."""
    header = ("Metric", "r", "rho_s", "RMSE", "RMSE3")

    def fmt(value, places):
        return "-" if value is None else f"{value:.{places}f}"

    body = [
        (
            name,
            fmt(r, 2),
            fmt(rho, 2),
            fmt(rmse, 1),
            fmt(rmse3, 1),
        )
        for name, r, rho, rmse, rmse3 in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = [
        header[0].ljust(widths[0])
        + "  "
        + "  ".join(h.rjust(w) for h, w in zip(header[1:], widths[1:]))
    ]
    for row in body:
        lines.append(
            row[0].ljust(widths[0])
            + "  "
            + "  ".join(c.rjust(w) for c, w in zip(row[1:], widths[1:]))
        )
    return "\n".join(lines)


def analyze_experiment(
    records: Sequence[RatingRecord],
    screens: dict,
    predictions: Optional[dict] = None,
    screening_rule: str = "reference_min_90_all_screens",
    statistic: str = "mean",
    reference_label: str = REFERENCE_LABEL,
) -> dict:
    """Run the complete subjective + objective analysis.

    records: loaded ratings; screens: screen metadata; predictions:
    {metric_name: (records, MetricScale)} with stimulus ids of the form
    "screen_id/condition".  Returns a JSON-compatible report: participant
    screening, per-talker Friedman + Bonferroni-corrected pairwise Wilcoxon
    tests (hidden reference excluded), and per-metric agreement statistics
    against median ratings.
    """
    screening = screen_participants(records, rule=screening_rule, reference_label=reference_label)
    kept_records = [r for r in records if r.participant in set(screening.kept)]
    if not kept_records:
        raise DataError("no participants survived screening")

    talkers = sorted({info.talker for info in screens.values()})
    report = {
        "screening": {
            "rule": screening.rule,
            "kept": list(screening.kept),
            "excluded": list(screening.excluded),
        },
        "talkers": {},
        "metrics": {},
    }
    for talker in talkers:
        matrix = aggregate_ratings(
            kept_records,
            over={"sentences", "noise_types"},
            statistic=statistic,
            screens=screens,
            talker=talker,
            exclude_conditions={reference_label},
        )
        fried = friedman_test(matrix)
        labels = list(matrix.conditions)
        pairs = [
            (labels[i], labels[j])
            for i in range(len(labels))
            for j in range(i + 1, len(labels))
        ]
        raw = [
            wilcoxon_signed_rank(
                matrix.values[:, labels.index(a)], matrix.values[:, labels.index(b)]
            ).p
            for a, b in pairs
        ]
        adjusted = bonferroni(raw, m=len(pairs))
        p_by_pair = dict(zip(pairs, adjusted))
        report["talkers"][talker] = {
            "conditions": labels,
            "n_subjects": len(matrix.participants),
            "friedman": {"chi2": fried.chi2, "df": fried.df, "p": fried.p},
            "pairwise": [
                {"a": a, "b": b, "p_raw": p, "p_adjusted": q, "rendered": format_p(q)}
                for (a, b), p, q in zip(pairs, raw, adjusted)
            ],
            "pairwise_table": render_pairwise_table(labels, p_by_pair),
        }

    if predictions:
        medians = median_by_stimulus(
            kept_records,
            participants=set(screening.kept),
            exclude_conditions={reference_label},
        )
        table_rows = []
        for name in sorted(predictions):
            metric_records, scale = predictions[name]
            pairs = [
                (rec.value, medians[rec.stimulus_id])
                for rec in metric_records
                if rec.stimulus_id in medians
            ]
            if len(pairs) < 5:
                raise DataError(
                    f"metric {name!r}: only {len(pairs)} predictions matched rated stimuli"
                )
            r = pearson(pairs)
            rho = spearman(pairs)
            open_ended = not (math.isfinite(scale.min) and math.isfinite(scale.max))
            rmse = None if open_ended else rmse_scaled(pairs, scale)
            rmse3 = rmse_poly3(pairs)
            report["metrics"][name] = {
                "n": len(pairs),
                "pearson": r,
                "spearman": rho,
                "rmse": rmse,
                "rmse3": rmse3,
            }
            table_rows.append((name, r, rho, rmse, rmse3))
        report["metric_table"] = render_metric_table(table_rows)
    return report
