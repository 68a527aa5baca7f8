"""Image-level AUROC, thresholded accuracy/recall, evaluation matrices,
and the forgetting measure for continual protocols."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_KINDS = ("auroc", "accuracy", "recall")


def linear_percentile(values, q: float) -> float:
    """Percentile with linear interpolation at zero-based rank q*(n-1)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must be in [0, 1]")
    return float(np.percentile(arr, q * 100.0, method="linear"))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks.

    Equals P(anomalous score > normal score) + 0.5 * P(equal). *labels* is
    boolean (True = anomalous); both classes must be present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: single-class input")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    # midranks: tied runs share the average 1-based rank
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[y].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy_recall(scores, labels, threshold: float) -> tuple[float, float]:
    """Accuracy over all samples and recall over anomalous ones.

    Predicted anomalous iff score > threshold (strictly), so training
    self-scores sitting exactly at the calibrated percentile stay normal.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if not np.isfinite(threshold) and not np.isinf(threshold):
        raise ValueError("threshold must not be NaN")
    pred = s > threshold
    accuracy = float((pred == y).mean()) if y.size else 0.0
    n_pos = int(y.sum())
    recall = float(pred[y].sum() / n_pos) if n_pos else 0.0
    return accuracy, recall


@dataclass
class EvalMatrix:
    """Lower-triangular performance matrix a[t][j]: task j evaluated after
    training stage t (both 0-based), for one metric kind."""

    metric_kind: str
    rows: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.metric_kind!r}")
        self.validate()

    def validate(self) -> None:
        for t, row in enumerate(self.rows):
            if len(row) != t + 1:
                raise ValueError(f"row {t} must have {t + 1} entries, got {len(row)}")
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"matrix entry {v} outside [0, 1]")

    def add_stage(self, values: list[float]) -> None:
        self.rows.append(list(values))
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class MetricSummary:
    """Final-stage mean, forgetting measure, and per-task forgetting values."""

    final_mean: float
    fm: float
    per_task_f: tuple[float, ...]


def forgetting(matrix: EvalMatrix) -> MetricSummary:
    """Forgetting per task: best past performance minus final performance.

    f_j = max_{t in {j..T-2}} a[t][j] - a[T-1][j] (0-based stages), averaged
    over j = 0..T-2. Negative values (backward transfer) are kept as-is.
    """
    matrix.validate()
    T = matrix.n_stages
    if T < 2:
        raise ValueError("forgetting needs at least two stages")
    final = matrix.rows[T - 1]
    per_task = []
    for j in range(T - 1):
        best_past = max(matrix.rows[t][j] for t in range(j, T - 1))
        per_task.append(best_past - final[j])
    return MetricSummary(
        final_mean=float(np.mean(final)),
        fm=float(np.mean(per_task)),
        per_task_f=tuple(per_task),
    )
