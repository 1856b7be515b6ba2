"""Offline feature construction: category counts, activity groups, dosage, engagement."""

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage


class DegenerateScoreError(ValueError):
    """Raised when a clustering cannot be scored."""


def ch_score(labels, values, n_clusters: int | None = None) -> float:
    """Calinski-Harabasz index of a 1-D clustering.

    ``(B / (k - 1)) / (W / (n - k))`` where ``B`` and ``W`` are the between-
    and within-cluster sums of squares. With ``n_clusters`` given, labels
    must lie in ``range(n_clusters)`` and every cluster must be nonempty.
    """
    labels = np.asarray(labels)
    values = np.asarray(values, dtype=float).ravel()
    if labels.shape != values.shape:
        raise ValueError("labels and values must have the same length")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    k = uniq.size
    if n_clusters is not None:
        if np.any(~np.isin(labels, np.arange(n_clusters))):
            raise ValueError("labels outside range(n_clusters)")
        if k < n_clusters:
            raise DegenerateScoreError("empty cluster")
    n = values.size
    if k < 2:
        raise DegenerateScoreError("need at least two nonempty clusters")
    if n <= k:
        raise DegenerateScoreError("need more samples than clusters")
    sums = np.bincount(inv, weights=values)
    means = sums / counts
    grand = values.mean()
    between = float(np.sum(counts * (means - grand) ** 2))
    within = float(np.sum((values - means[inv]) ** 2))
    if within <= 0.0:
        raise DegenerateScoreError("zero within-cluster dispersion")
    return (between / (k - 1)) / (within / (n - k))


@dataclass(frozen=True)
class PartitionCandidate:
    k: int
    thresholds: tuple
    score: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")


def quantile_thresholds(feature_values, k: int) -> tuple:
    """Cut points at the ``j/k`` quantiles, ``j = 1..k-1``."""
    q = np.arange(1, k) / k
    return tuple(float(v) for v in np.quantile(np.asarray(feature_values, dtype=float), q))


def bucketize(feature_values, thresholds) -> np.ndarray:
    """Bucket ``j`` holds ``thresholds[j-1] <= x < thresholds[j]``."""
    return np.searchsorted(np.asarray(thresholds, dtype=float),
                           np.asarray(feature_values, dtype=float), side="right")


def select_partition(feature_values, step_counts, candidates: Sequence[int]) -> PartitionCandidate:
    """Number of quantile buckets of a feature that best separates step counts.

    Each ``k`` is scored by the Calinski-Harabasz index of the step counts
    grouped by feature bucket. Candidates that cannot be scored (one bucket,
    repeated quantiles, empty buckets, zero spread) are skipped; the
    highest score wins and ties go to the smaller ``k``.
    """
    if len(candidates) == 0:
        raise ValueError("candidates must be nonempty")
    x = np.asarray(feature_values, dtype=float)
    y = np.asarray(step_counts, dtype=float)
    if x.shape != y.shape:
        raise ValueError("feature_values and step_counts must align")
    best = None
    errors = []
    for k in sorted(set(int(c) for c in candidates)):
        try:
            th = quantile_thresholds(x, k)
            if any(b <= a for a, b in zip(th, th[1:])):
                raise DegenerateScoreError("repeated quantile cut points")
            score = ch_score(bucketize(x, th), y, n_clusters=k)
        except (DegenerateScoreError, ValueError) as exc:
            errors.append(f"k={k}: {exc}")
            continue
        if best is None or score > best.score:
            best = PartitionCandidate(k, th, score)
    if best is None:
        raise DegenerateScoreError("no candidate could be scored; " + "; ".join(errors))
    return best


def _sequential_score(counts, sums, sumsq, cuts, n, grand_mean):
    edges = (0,) + cuts + (counts.size,)
    cc = np.add.reduceat(counts, edges[:-1])
    ss = np.add.reduceat(sums, edges[:-1])
    qq = np.add.reduceat(sumsq, edges[:-1])
    if np.any(cc == 0):
        return None
    k = cc.size
    between = float(np.sum(cc * (ss / cc - grand_mean) ** 2))
    within = float(np.sum(qq - ss ** 2 / cc))
    if within <= 0 or n <= k:
        return None
    return (between / (k - 1)) / (within / (n - k))


def select_hour_partition(hours, step_counts, sizes=range(2, 9), cut_grid=range(1, 24)):
    """Best contiguous split of the day at hour-grid cuts.

    Every choice of ``k - 1`` cuts from ``cut_grid`` is tried for each ``k``
    in ``sizes``; buckets are ``[c_{j-1}, c_j)`` in hours. Returns the
    winning :class:`PartitionCandidate` with the cuts as thresholds. Ties go
    to the smaller ``k`` and then to the earlier cut combination.
    """
    h = np.asarray(hours, dtype=float)
    y = np.asarray(step_counts, dtype=float)
    if h.shape != y.shape or h.size == 0:
        raise ValueError("hours and step_counts must be nonempty and aligned")
    if np.any((h < 0) | (h >= 24)):
        raise ValueError("hours must lie in [0, 24)")
    hour = np.floor(h).astype(int)
    counts = np.bincount(hour, minlength=24).astype(float)
    sums = np.bincount(hour, weights=y, minlength=24)
    sumsq = np.bincount(hour, weights=y * y, minlength=24)
    grid = sorted(set(int(c) for c in cut_grid))
    if any(c <= 0 or c >= 24 for c in grid):
        raise ValueError("cuts must lie strictly inside the day")
    best = None
    for k in sorted(set(int(s) for s in sizes)):
        if k < 2:
            continue
        for cuts in itertools.combinations(grid, k - 1):
            score = _sequential_score(counts, sums, sumsq, cuts, y.size, y.mean())
            if score is not None and (best is None or score > best.score):
                best = PartitionCandidate(k, tuple(float(c) for c in cuts), score)
    if best is None:
        raise DegenerateScoreError("no hour partition could be scored")
    return best


def activity_summaries(per_user_step_series) -> np.ndarray:
    rows = []
    for series in per_user_step_series:
        s = np.asarray(series, dtype=float).ravel()
        if s.size == 0:
            raise ValueError("each user needs at least one daily step count")
        rows.append((s.mean(), s.var()))
    return np.array(rows)


def assign_activity_groups(per_user_step_series, standardize: bool = False) -> np.ndarray:
    """Two activity groups from average-linkage clustering of (mean, variance).

    The cluster with the lower mean daily step count is labeled 0. With
    ``standardize`` the two summary columns are z-scored first.
    """
    summaries = activity_summaries(per_user_step_series)
    if summaries.shape[0] < 2:
        raise ValueError("need at least two users")
    x = summaries
    if standardize:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    tree = linkage(x, method="average", metric="euclidean")
    raw = fcluster(tree, t=2, criterion="maxclust") - 1
    if np.unique(raw).size < 2:
        return np.zeros(summaries.shape[0], dtype=int)
    means = [summaries[raw == c, 0].mean() for c in (0, 1)]
    return (raw if means[0] <= means[1] else 1 - raw).astype(int)


@dataclass(frozen=True)
class DosageState:
    value: float = 0.0
    decay: float = 0.9

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("dosage must be nonnegative")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")


def dosage_update(d: DosageState, delivered: bool) -> DosageState:
    return DosageState(d.decay * d.value + (1.0 if delivered else 0.0), d.decay)


def engagement_flag(user_screens_today: int, population_screens_today, percentile: float = 40.0) -> int:
    """1 if the user viewed strictly more screens than the population percentile."""
    pop = np.asarray(population_screens_today, dtype=float)
    if pop.size == 0:
        raise ValueError("population must be nonempty")
    return int(user_screens_today > np.percentile(pop, percentile, method="linear"))
