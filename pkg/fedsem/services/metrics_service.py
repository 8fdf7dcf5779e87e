"""
services/metrics_service.py
---------------------------

Analysis statistics: entropy series, semantic alignment, regressions,
dispersion, accuracy, AUROC and binned calibration curves.

Standard deviations are population (``ddof=0``) throughout and entropies
use the natural log.  Every metric can be written as a plot-ready CSV
whose header names the columns with their units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from fedsem.core.errors import InvalidInputError, ShapeMismatchError
from fedsem.utils.csv_io import write_csv

# Distances below this are clamped before inversion in the alignment score.
ALIGNMENT_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricSeries:
    name: str
    pairs: Tuple[Tuple[int, float], ...]

    def __post_init__(self) -> None:
        ts = [t for t, _ in self.pairs]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidInputError(f"series '{self.name}' must have strictly increasing t")

    @property
    def values(self) -> List[float]:
        return [v for _, v in self.pairs]


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.slope, self.intercept, self.r)):
            raise InvalidInputError("regression produced non-finite coefficients")
        if not -1.0 <= self.r <= 1.0:
            raise InvalidInputError(f"correlation {self.r} outside [-1, 1]")


@dataclass(frozen=True)
class EntropySeries:
    shift: MetricSeries
    delta: MetricSeries
    fit: RegressionFit


@dataclass(frozen=True)
class BinnedCurve:
    points: Tuple[Tuple[float, float, int], ...]
    monotone_decreasing: bool


def alignment_score(client_embeddings: Sequence, centroid) -> float:
    """Mean inverse distance of client embeddings to the centroid.

    A client exactly at the centroid contributes ``1 / ALIGNMENT_FLOOR``.
    """
    if len(client_embeddings) == 0:
        raise InvalidInputError("alignment needs at least one client embedding")
    c = np.asarray(centroid, dtype=np.float64)
    terms = []
    for z in client_embeddings:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != c.shape:
            raise ShapeMismatchError(f"client embedding {z.shape} vs centroid {c.shape}")
        terms.append(1.0 / max(float(np.linalg.norm(z - c)), ALIGNMENT_FLOOR))
    return math.fsum(sorted(terms)) / len(terms)


def alignment_series(values: Sequence[Tuple[int, float]]) -> Tuple[MetricSeries, MetricSeries]:
    """``A(t)`` and ``dA(t) = A(t) - A(t-1)`` (0 at the first round)."""
    pairs = tuple((int(t), float(a)) for t, a in values)
    deltas = tuple(
        (t, 0.0 if i == 0 else a - pairs[i - 1][1]) for i, (t, a) in enumerate(pairs)
    )
    return MetricSeries("alignment", pairs), MetricSeries("alignment_delta", deltas)


def ols_fit(xs: Sequence[float], ys: Sequence[float]) -> RegressionFit:
    """Ordinary least squares ``y = slope x + intercept`` with Pearson r."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatchError(f"xs and ys must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InvalidInputError("regression needs at least 2 points")
    if np.all(x == x[0]):
        raise InvalidInputError("regression is degenerate: all xs are equal")
    if np.all(y == y[0]):
        return RegressionFit(slope=0.0, intercept=float(y[0]), r=0.0)
    result = stats.linregress(x, y)
    r = float(np.clip(result.rvalue, -1.0, 1.0))
    return RegressionFit(slope=float(result.slope), intercept=float(result.intercept), r=r)


def coefficient_of_variation(samples: Sequence[float]) -> float:
    """Population standard deviation over mean."""
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        raise InvalidInputError("coefficient of variation of an empty sample")
    mean = float(values.mean())
    if mean == 0:
        raise InvalidInputError("coefficient of variation undefined for zero mean")
    return float(values.std()) / mean


def trust_entropy_series(round_reports: Sequence) -> EntropySeries:
    """``H(t) - H(0)``, ``dH(t)`` and the linear fit of the shift against t."""
    if len(round_reports) < 2:
        raise InvalidInputError("entropy series needs at least 2 rounds")
    reports = sorted(round_reports, key=lambda r: r.t)
    h0 = reports[0].entropy
    shift = MetricSeries("entropy_shift", tuple((r.t, r.entropy - h0) for r in reports))
    delta = MetricSeries("entropy_delta", tuple((r.t, r.delta_entropy) for r in reports))
    fit = ols_fit([t for t, _ in shift.pairs], shift.values)
    return EntropySeries(shift=shift, delta=delta, fit=fit)


def centered_entropy(round_reports: Sequence) -> MetricSeries:
    """``H(t) - mean_t H(t)``."""
    if not round_reports:
        raise InvalidInputError("no rounds")
    reports = sorted(round_reports, key=lambda r: r.t)
    mean = math.fsum(r.entropy for r in reports) / len(reports)
    return MetricSeries("entropy_centered", tuple((r.t, r.entropy - mean) for r in reports))


def _attributed(a) -> str:
    return a.attributed_concept if hasattr(a, "attributed_concept") else str(a)


def zero_shot_accuracy(assessments: Sequence, truth: Sequence[str]) -> float:
    """Share of attributions equal to the true label."""
    if len(assessments) != len(truth):
        raise ShapeMismatchError(f"{len(assessments)} assessments but {len(truth)} labels")
    if not truth:
        raise InvalidInputError("accuracy of an empty set")
    correct = sum(1 for a, y in zip(assessments, truth) if _attributed(a) == y)
    return correct / len(truth)


def auroc(scores: Sequence[float], is_novel: Sequence[bool]) -> float:
    """Probability that a novel sample outscores a seen one, ties counting 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_novel, dtype=bool)
    if s.shape != pos.shape:
        raise ShapeMismatchError(f"{s.shape[0]} scores but {pos.shape[0]} flags")
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUROC needs both novel and seen samples")
    ranks = stats.rankdata(s)
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def binned_curve(x_values: Sequence[float], y_values: Sequence[float], num_bins: int) -> BinnedCurve:
    """Equal-width bins over the x range; empty bins are skipped.

    Points are ``(bin_center, mean_y, count)``.  The flag tolerates
    rounding-level increases between consecutive means.
    """
    x = np.asarray(x_values, dtype=np.float64)
    y = np.asarray(y_values, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("binned curve of empty data")
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{x.size} x values but {y.size} y values")
    if num_bins < 2:
        raise InvalidInputError(f"num_bins must be >= 2, got {num_bins}")
    lo, hi = float(x.min()), float(x.max())
    width = (hi - lo) / num_bins
    if width > 0:
        idx = np.clip(np.floor((x - lo) / width).astype(np.int64), 0, num_bins - 1)
    else:
        idx = np.zeros(x.size, dtype=np.int64)
    points = []
    for b in range(num_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        center = lo + (b + 0.5) * width if width > 0 else lo
        points.append((center, float(y[mask].mean()), count))
    means = [m for _, m, _ in points]
    monotone = all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(means, means[1:]))
    return BinnedCurve(points=tuple(points), monotone_decreasing=monotone)


# -----------------------------------------------------------------------------
# Composite statistics
# -----------------------------------------------------------------------------

def latency_table(samples: Dict[str, Tuple[Sequence[int], Sequence[float]]]) -> pd.DataFrame:
    """Per encoder: mean/std/CV of latency and the OLS fit against token count.

    ``samples`` maps encoder_id to ``(token_counts, latencies_ms)``.
    """
    rows = []
    for encoder_id, (tokens, latencies) in samples.items():
        lat = np.asarray(latencies, dtype=np.float64)
        fit = ols_fit(tokens, lat)
        rows.append([
            encoder_id, float(lat.mean()), float(lat.std()), coefficient_of_variation(lat),
            fit.slope, fit.intercept, fit.r, int(lat.size),
        ])
    return pd.DataFrame(rows, columns=[
        "encoder_id", "mean_latency_ms", "std_latency_ms", "cv", "slope_ms_per_token",
        "intercept_ms", "r", "n",
    ])


def similarity_stats(confidences: Sequence[float], correct: Sequence[bool]) -> Dict[str, Optional[float]]:
    """Mean and population std of cosine confidence for correct and incorrect attributions."""
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if c.shape != ok.shape:
        raise ShapeMismatchError("confidences and correctness flags differ in length")
    out: Dict[str, Optional[float]] = {}
    for name, mask in (("correct", ok), ("incorrect", ~ok)):
        out[f"{name}_count"] = float(mask.sum())
        out[f"{name}_mean"] = float(c[mask].mean()) if mask.any() else None
        out[f"{name}_std"] = float(c[mask].std()) if mask.any() else None
    return out


def client_regression(disagreements: Sequence[float], accuracies: Sequence[float]) -> Optional[RegressionFit]:
    """``Acc_i = a + b D_i`` over clients; ``None`` when all ``D_i`` coincide."""
    d = np.asarray(disagreements, dtype=np.float64)
    if d.size < 2 or np.all(d == d[0]):
        return None
    return ols_fit(d, accuracies)


# -----------------------------------------------------------------------------
# Output
# -----------------------------------------------------------------------------

def write_metric_csv(directory: str | Path, name: str, frame: pd.DataFrame) -> Path:
    """Write ``<directory>/<name>.csv``; column names carry their units."""
    return write_csv(Path(directory) / f"{name}.csv", frame)


def series_frame(series: MetricSeries, value_column: str) -> pd.DataFrame:
    return pd.DataFrame(list(series.pairs), columns=["t_round", value_column])
