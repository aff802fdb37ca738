"""AUC and LogLoss computation plus per-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MetricError", "auc", "auc_bruteforce", "log_loss", "aggregate", "RunSummary"]

SCORE_CLIP = 1e-7


class MetricError(ValueError):
    """Metric is undefined for the given inputs."""


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores/labels must be parallel 1-d arrays, got {scores.shape} and {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals the fraction of (positive, negative) pairs ranked correctly, with
    ties counted as half credit.  O(m log m) through sorting with fractional
    (mid) ranks for tied scores.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # mid-rank assignment per tie group
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """O(n_pos * n_neg) pairwise oracle for `auc`; test use only."""
    scores, labels = _validate(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def log_loss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clipped to [1e-7, 1 - 1e-7]."""
    scores, labels = _validate(scores, labels)
    clipped = np.clip(scores, SCORE_CLIP, 1.0 - SCORE_CLIP)
    terms = labels * np.log(clipped) + (1 - labels) * np.log(1.0 - clipped)
    return float(-terms.mean())


@dataclass
class RunSummary:
    """Mean +/- sample std of a per-period metric, over runs."""

    mean: float
    std: float
    n_runs: int


def aggregate(per_run_period_values: list[list[float]]) -> RunSummary:
    """Aggregate one metric over runs.

    Each inner list holds the metric at every reported period of one run;
    a run's value is the mean over its periods, and the summary is the mean
    and sample standard deviation (ddof=1; zero for a single run) across runs.
    """
    if not per_run_period_values:
        raise MetricError("aggregate needs at least one run")
    run_means = np.array([np.mean(v) for v in per_run_period_values], dtype=np.float64)
    std = float(run_means.std(ddof=1)) if run_means.size > 1 else 0.0
    return RunSummary(mean=float(run_means.mean()), std=std, n_runs=run_means.size)
