"""Task-complexity profiling and fine-tuning lift prediction.

Given a supervised text dataset, this module computes cheap structural
heuristics -- token-length distributions, input/output ROUGE-L similarity,
and DEFLATE compressibility -- and relates them to model-quality metrics via
correlation analysis and ordinary least squares on z-scored features.  The
regression predicts how much quality lift adapter-based fine-tuning is likely
to deliver for a task before any training is run.

Conventions, applied consistently: whitespace tokenization (lowercased for
ROUGE), population standard deviation, and nearest-rank percentiles.
"""

from __future__ import annotations

import csv
import gzip
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import percentile

__all__ = [
    "CorrelationReport",
    "LenStats",
    "LiftModel",
    "MeanStd",
    "PROFILE_FEATURES",
    "QUALITY_METRICS",
    "QualityRecord",
    "TaskProfile",
    "ZScoreResult",
    "bundled_fixture_path",
    "compressibility",
    "compute_profile",
    "correlation_report",
    "fit_lift_model",
    "fit_ols",
    "load_examples_jsonl",
    "load_quality_records",
    "load_task_profiles",
    "loo_rmse",
    "pearson",
    "predict",
    "profile_features",
    "profile_to_json_dict",
    "rmse",
    "rouge_l",
    "zscore",
]


# ---------------------------------------------------------------------------
# Text heuristics


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 between two texts (lowercased, whitespace-tokenized).

    Returns 0.0 when either text is empty or the sequences share no tokens.
    """
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(b) > len(a):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b):
            if token_a == token_b:
                current.append(previous[j] + 1)
            else:
                current.append(max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def compressibility(text: str) -> float:
    """Compressed-to-original byte ratio of the UTF-8 encoding (gzip container).

    Smaller values mean more redundant text.  ``mtime`` is pinned so the ratio
    is a pure function of the text.
    """
    if not text:
        raise ValueError("compressibility of empty text is undefined")
    raw = text.encode("utf-8")
    compressed = gzip.compress(raw, mtime=0)
    return len(compressed) / len(raw)


# ---------------------------------------------------------------------------
# Profiles


@dataclass(frozen=True)
class LenStats:
    mean: float
    std: float
    p95: float


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float


@dataclass(frozen=True)
class TaskProfile:
    """Structural heuristics for one supervised text dataset."""

    name: str
    n_examples: int
    input_len: LenStats
    output_len: LenStats
    example_len: LenStats
    io_rougeL: MeanStd
    compressibility: MeanStd


@dataclass(frozen=True)
class QualityRecord:
    """Observed model-quality metrics for one task."""

    name: str
    gpt4_score: float
    max_gpt4_lift: float
    avg_base_lift: float
    best_base_score: float
    avg_base_score: float
    best_ft_score: float
    avg_ft_score: float


QUALITY_METRICS = (
    "gpt4_score",
    "max_gpt4_lift",
    "avg_base_lift",
    "best_base_score",
    "avg_base_score",
    "best_ft_score",
    "avg_ft_score",
)

PROFILE_FEATURES = (
    "n_examples",
    "input_len_mean",
    "input_len_std",
    "input_len_p95",
    "output_len_mean",
    "output_len_std",
    "output_len_p95",
    "example_len_mean",
    "example_len_std",
    "example_len_p95",
    "io_rougeL_mean",
    "io_rougeL_std",
    "compressibility_mean",
    "compressibility_std",
)


def _pop_std(values: Sequence[float], mean: float) -> float:
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def _len_stats(values: Sequence[float]) -> LenStats:
    mean = sum(values) / len(values)
    return LenStats(mean=mean, std=_pop_std(values, mean), p95=percentile(values, 0.95))


def _mean_std(values: Sequence[float]) -> MeanStd:
    mean = sum(values) / len(values)
    return MeanStd(mean=mean, std=_pop_std(values, mean))


def compute_profile(examples: Sequence[tuple[str, str]], name: str) -> TaskProfile:
    """Profile a dataset of (input, output) text pairs."""
    if not examples:
        raise ValueError("cannot profile an empty dataset")
    input_lens = [float(len(inp.split())) for inp, _ in examples]
    output_lens = [float(len(out.split())) for _, out in examples]
    example_lens = [i + o for i, o in zip(input_lens, output_lens)]
    rouges = [rouge_l(out, inp) for inp, out in examples]
    ratios = [compressibility(inp + "\n" + out) for inp, out in examples]
    return TaskProfile(
        name=name,
        n_examples=len(examples),
        input_len=_len_stats(input_lens),
        output_len=_len_stats(output_lens),
        example_len=_len_stats(example_lens),
        io_rougeL=_mean_std(rouges),
        compressibility=_mean_std(ratios),
    )


def profile_features(profile: TaskProfile) -> list[float]:
    """The profile as an ordered feature vector matching PROFILE_FEATURES."""
    return [
        float(profile.n_examples),
        profile.input_len.mean,
        profile.input_len.std,
        profile.input_len.p95,
        profile.output_len.mean,
        profile.output_len.std,
        profile.output_len.p95,
        profile.example_len.mean,
        profile.example_len.std,
        profile.example_len.p95,
        profile.io_rougeL.mean,
        profile.io_rougeL.std,
        profile.compressibility.mean,
        profile.compressibility.std,
    ]


def profile_to_json_dict(profile: TaskProfile) -> dict:
    return {
        "name": profile.name,
        "n_examples": profile.n_examples,
        "input_len": vars(profile.input_len).copy(),
        "output_len": vars(profile.output_len).copy(),
        "example_len": vars(profile.example_len).copy(),
        "io_rougeL": vars(profile.io_rougeL).copy(),
        "compressibility": vars(profile.compressibility).copy(),
    }


# ---------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True)
class ZScoreResult:
    """Z-scored matrix with constant columns removed."""

    matrix: list[list[float]]
    means: list[float]
    stds: list[float]
    kept_columns: tuple[int, ...]
    dropped_columns: tuple[int, ...]


def zscore(matrix: Sequence[Sequence[float]]) -> ZScoreResult:
    """Normalize each column to mean 0 / population std 1; drop constants."""
    if len(matrix) < 2:
        raise ValueError("zscore requires at least 2 rows")
    data = np.asarray(matrix, dtype=float)
    means = data.mean(axis=0)
    stds = data.std(axis=0)
    kept = tuple(int(i) for i in np.flatnonzero(stds > 0))
    dropped = tuple(int(i) for i in np.flatnonzero(stds == 0))
    normalized = (data[:, kept] - means[list(kept)]) / stds[list(kept)]
    return ZScoreResult(
        matrix=[list(map(float, row)) for row in normalized],
        means=[float(means[i]) for i in kept],
        stds=[float(stds[i]) for i in kept],
        kept_columns=kept,
        dropped_columns=dropped,
    )


def rmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    if len(predicted) != len(actual) or not predicted:
        raise ValueError("rmse requires equal non-empty vectors")
    return math.sqrt(
        sum((p - a) ** 2 for p, a in zip(predicted, actual)) / len(predicted)
    )


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson correlation; None when either input has zero variance."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("pearson requires equal vectors of length >= 2")
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    cov = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    var_x = sum((x - mean_x) ** 2 for x in xs)
    var_y = sum((y - mean_y) ** 2 for y in ys)
    if var_x == 0 or var_y == 0:
        return None
    return cov / math.sqrt(var_x * var_y)


# ---------------------------------------------------------------------------
# Regression


@dataclass(frozen=True)
class LiftModel:
    """Linear predictor of a quality metric from profile features.

    ``feature_means``/``feature_stds`` hold the normalization applied before
    the weights; models fit on raw features carry the identity normalization.
    """

    target: str
    feature_names: tuple[str, ...]
    weights: tuple[float, ...]
    intercept: float
    feature_means: tuple[float, ...]
    feature_stds: tuple[float, ...]
    train_rmse: float


def fit_ols(
    matrix: Sequence[Sequence[float]],
    y: Sequence[float],
    *,
    feature_names: tuple[str, ...] | None = None,
    target: str = "y",
) -> LiftModel:
    """Least-squares fit with intercept on the matrix as given.

    Rank-deficient systems get the minimum-norm solution.  The matrix is not
    normalized here; use :func:`fit_lift_model` for the z-scored pipeline.
    """
    if len(matrix) != len(y):
        raise ValueError(f"matrix has {len(matrix)} rows but y has {len(y)}")
    if len(y) < 2:
        raise ValueError("fit_ols requires at least 2 rows")
    data = np.asarray(matrix, dtype=float)
    if data.ndim != 2:
        raise ValueError("matrix rows must be equal-length feature vectors")
    n_features = data.shape[1]
    if feature_names is None:
        feature_names = tuple(f"x{i}" for i in range(n_features))
    if len(feature_names) != n_features:
        raise ValueError(
            f"{len(feature_names)} feature names for {n_features} columns"
        )
    design = np.hstack([data, np.ones((len(y), 1))])
    solution, *_ = np.linalg.lstsq(design, np.asarray(y, dtype=float), rcond=None)
    predictions = design @ solution
    return LiftModel(
        target=target,
        feature_names=tuple(feature_names),
        weights=tuple(float(w) for w in solution[:-1]),
        intercept=float(solution[-1]),
        feature_means=tuple(0.0 for _ in range(n_features)),
        feature_stds=tuple(1.0 for _ in range(n_features)),
        train_rmse=rmse(list(predictions), list(y)),
    )


def fit_lift_model(
    matrix: Sequence[Sequence[float]],
    y: Sequence[float],
    feature_names: tuple[str, ...],
    target: str,
) -> LiftModel:
    """Z-score the features (dropping constants), then least-squares fit."""
    scored = zscore(matrix)
    kept_names = tuple(feature_names[i] for i in scored.kept_columns)
    fitted = fit_ols(scored.matrix, y, feature_names=kept_names, target=target)
    return LiftModel(
        target=target,
        feature_names=kept_names,
        weights=fitted.weights,
        intercept=fitted.intercept,
        feature_means=tuple(scored.means),
        feature_stds=tuple(scored.stds),
        train_rmse=fitted.train_rmse,
    )


def predict(model: LiftModel, features: Sequence[float] | Mapping[str, float]) -> float:
    """Apply the model's stored normalization and weights to one feature row."""
    if isinstance(features, Mapping):
        missing = [name for name in model.feature_names if name not in features]
        if missing:
            raise ValueError(f"missing features: {', '.join(missing)}")
        row = [float(features[name]) for name in model.feature_names]
    else:
        row = [float(v) for v in features]
        if len(row) != len(model.feature_names):
            raise ValueError(
                f"expected {len(model.feature_names)} features, got {len(row)}"
            )
    total = model.intercept
    for value, weight, mean, std in zip(
        row, model.weights, model.feature_means, model.feature_stds
    ):
        total += weight * ((value - mean) / std)
    return total


def loo_rmse(
    matrix: Sequence[Sequence[float]],
    y: Sequence[float],
    feature_names: tuple[str, ...],
    target: str,
) -> float:
    """Leave-one-out RMSE: refit without each row, predict it, pool errors."""
    if len(matrix) != len(y):
        raise ValueError(f"matrix has {len(matrix)} rows but y has {len(y)}")
    if len(y) < 3:
        raise ValueError("leave-one-out requires at least 3 rows")
    predictions = []
    for i in range(len(y)):
        train_x = [row for j, row in enumerate(matrix) if j != i]
        train_y = [v for j, v in enumerate(y) if j != i]
        model = fit_lift_model(train_x, train_y, feature_names, target)
        held_out = {name: matrix[i][k] for k, name in enumerate(feature_names)}
        predictions.append(predict(model, held_out))
    return rmse(predictions, list(y))


# ---------------------------------------------------------------------------
# Correlation report


@dataclass(frozen=True)
class CorrelationReport:
    """Cross-correlation of every profile feature with every quality metric."""

    feature_names: tuple[str, ...]
    metric_names: tuple[str, ...]
    matrix: list[list[float | None]]


def correlation_report(
    profiles: Sequence[TaskProfile], quality: Sequence[QualityRecord]
) -> CorrelationReport:
    profile_by_name = {p.name: p for p in profiles}
    quality_by_name = {q.name: q for q in quality}
    if set(profile_by_name) != set(quality_by_name):
        only_p = sorted(set(profile_by_name) - set(quality_by_name))
        only_q = sorted(set(quality_by_name) - set(profile_by_name))
        raise ValueError(
            f"task names do not align: profiles-only={only_p}, quality-only={only_q}"
        )
    names = sorted(profile_by_name)
    feature_rows = [profile_features(profile_by_name[n]) for n in names]
    matrix: list[list[float | None]] = []
    for i, _feature in enumerate(PROFILE_FEATURES):
        xs = [row[i] for row in feature_rows]
        row_out: list[float | None] = []
        for metric in QUALITY_METRICS:
            ys = [getattr(quality_by_name[n], metric) for n in names]
            row_out.append(pearson(xs, ys))
        matrix.append(row_out)
    return CorrelationReport(
        feature_names=PROFILE_FEATURES, metric_names=QUALITY_METRICS, matrix=matrix
    )


# ---------------------------------------------------------------------------
# File formats


def bundled_fixture_path(name: str) -> Path:
    """Path to a data file shipped with the package."""
    return Path(str(resources.files(__package__) / "fixtures" / name))


def load_examples_jsonl(path: str | Path) -> list[tuple[str, str]]:
    """Read a JSON-lines dataset of {"input": ..., "output": ...} objects."""
    examples: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "input" not in obj or "output" not in obj:
                raise ValueError(
                    f"{path}:{line_no}: expected an object with 'input' and 'output'"
                )
            if not isinstance(obj["input"], str) or not isinstance(obj["output"], str):
                raise ValueError(f"{path}:{line_no}: 'input' and 'output' must be strings")
            examples.append((obj["input"], obj["output"]))
    return examples


def _parse_float(path, line_no: int, field: str, raw: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{path}:{line_no}: field '{field}' is not a number: {raw!r}")


def load_task_profiles(path: str | Path) -> list[TaskProfile]:
    """Read task profiles from CSV with flattened stat-field headers."""
    profiles = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        required = {"name", *PROFILE_FEATURES}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or ()))
            raise ValueError(f"{path}:1: missing columns: {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            get = lambda field: _parse_float(path, line_no, field, row[field])
            profiles.append(
                TaskProfile(
                    name=row["name"],
                    n_examples=int(get("n_examples")),
                    input_len=LenStats(
                        get("input_len_mean"), get("input_len_std"), get("input_len_p95")
                    ),
                    output_len=LenStats(
                        get("output_len_mean"), get("output_len_std"), get("output_len_p95")
                    ),
                    example_len=LenStats(
                        get("example_len_mean"),
                        get("example_len_std"),
                        get("example_len_p95"),
                    ),
                    io_rougeL=MeanStd(get("io_rougeL_mean"), get("io_rougeL_std")),
                    compressibility=MeanStd(
                        get("compressibility_mean"), get("compressibility_std")
                    ),
                )
            )
    return profiles


def load_quality_records(path: str | Path) -> list[QualityRecord]:
    """Read per-task quality metrics from CSV."""
    records = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        required = {"name", *QUALITY_METRICS}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or ()))
            raise ValueError(f"{path}:1: missing columns: {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            records.append(
                QualityRecord(
                    name=row["name"],
                    **{
                        metric: _parse_float(path, line_no, metric, row[metric])
                        for metric in QUALITY_METRICS
                    },
                )
            )
    return records
