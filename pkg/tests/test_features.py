import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import calinski_harabasz_score

from intelpool.features import (
    DegenerateScoreError,
    DosageState,
    PartitionCandidate,
    assign_activity_groups,
    bucketize,
    ch_score,
    dosage_update,
    engagement_flag,
    select_hour_partition,
    select_partition,
)
from intelpool.sim.history import synth_daily_steps


def textbook_ch(labels, values):
    """Trace form: tr(B)/(k-1) over tr(W)/(n-k), looping over clusters."""
    values = [float(v) for v in values]
    n = len(values)
    grand = sum(values) / n
    clusters = {}
    for lab, v in zip(labels, values):
        clusters.setdefault(lab, []).append(v)
    k = len(clusters)
    b = w = 0.0
    for members in clusters.values():
        m = sum(members) / len(members)
        b += len(members) * (m - grand) ** 2
        w += sum((v - m) ** 2 for v in members)
    return (b / (k - 1)) / (w / (n - k))


def test_ch_far_apart_clusters():
    assert ch_score([0, 0, 1, 1], [0.0, 0.01, 100.0, 100.01]) > 1e6


def test_ch_random_labels_near_one():
    rng = np.random.default_rng(0)
    scores = [ch_score(rng.integers(0, 3, 200), rng.normal(size=200)) for _ in range(400)]
    assert np.mean(scores) == pytest.approx(1.0, abs=0.1)


def test_ch_matches_textbook_and_sklearn(rng):
    for _ in range(20):
        k = int(rng.integers(2, 6))
        labels = np.r_[np.arange(k), rng.integers(0, k, 60)]
        values = rng.normal(size=labels.size) * 10 + labels * rng.normal()
        ours = ch_score(labels, values)
        assert ours == pytest.approx(textbook_ch(labels, values), rel=1e-9)
        assert ours == pytest.approx(calinski_harabasz_score(values[:, None], labels), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3), st.floats(0.01, 100.0),
       st.booleans())
def test_ch_affine_invariance(seed, shift, scale, negate):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, 2, rng.integers(0, 3, 30)]
    values = rng.normal(size=labels.size) + labels
    a = scale * (-1 if negate else 1)
    assert ch_score(labels, a * values + shift) == pytest.approx(ch_score(labels, values), rel=1e-9)


def test_ch_errors():
    with pytest.raises(DegenerateScoreError):
        ch_score([0, 0, 0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateScoreError):
        ch_score([0, 2, 0, 2], [1.0, 2.0, 3.0, 4.0], n_clusters=3)
    with pytest.raises(DegenerateScoreError):
        ch_score([0, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        ch_score([0, 1], [1.0])


def test_bucketize_is_left_closed():
    assert list(bucketize([0.9, 1.0, 1.5, 2.0, 3.0], (1.0, 2.0))) == [0, 1, 1, 2, 2]


def test_bimodal_data_picks_two(rng):
    x = rng.uniform(0, 1, 2000)
    y = np.where(x >= np.median(x), 500.0, 100.0) + rng.normal(size=2000) * 20
    best = select_partition(x, y, [1, 2, 3, 4])
    assert best.k == 2
    assert best.thresholds[0] == pytest.approx(np.median(x))


def test_temperature_partition_prefers_two_buckets(rng):
    # steps respond only to whether it is warmer than the median
    temp = rng.normal(15, 8, 5000)
    steps = 200 + 120 * (temp > np.median(temp)) + rng.normal(size=5000) * 60
    assert select_partition(temp, steps, [2, 5]).k == 2


def test_constant_steps_surface_error(rng):
    with pytest.raises(DegenerateScoreError):
        select_partition(rng.uniform(size=100), np.full(100, 7.0), [2, 3])


def test_select_partition_deterministic_and_validated(rng):
    x, y = rng.normal(size=300), rng.normal(size=300)
    assert select_partition(x, y, [2, 3, 4]) == select_partition(x, y, [4, 3, 2])
    with pytest.raises(ValueError):
        select_partition(x, y, [])


def test_partition_candidate_invariants():
    with pytest.raises(ValueError):
        PartitionCandidate(0, (), 1.0)
    with pytest.raises(ValueError):
        PartitionCandidate(3, (2.0, 1.0), 1.0)


def test_hour_partition_recovers_planted_cuts(rng):
    hours = rng.uniform(0, 24, 6000)
    level = np.select([hours < 5, hours < 13, hours < 18], [50.0, 300.0, 450.0], 120.0)
    steps = level + rng.normal(size=hours.size) * 40
    best = select_hour_partition(hours, steps, sizes=range(2, 5))
    assert best.k == 4 and best.thresholds == (5.0, 13.0, 18.0)


def test_hour_partition_matches_bucket_scoring(rng):
    hours = rng.uniform(0, 24, 500)
    steps = rng.normal(size=500) + (hours > 12)
    best = select_hour_partition(hours, steps, sizes=[3], cut_grid=range(2, 23, 4))
    assert best.score == pytest.approx(ch_score(bucketize(hours, best.thresholds), steps), rel=1e-9)


def test_activity_groups_two_users():
    labels = assign_activity_groups([[100.0, 110.0, 90.0], [10000.0, 9000.0, 11000.0]])
    assert list(labels) == [0, 1]
    with pytest.raises(ValueError):
        assign_activity_groups([[1.0, 2.0]])


def test_activity_groups_planted_partition():
    agree = []
    for seed in range(20):
        series, truth = synth_daily_steps(40, 60, rng=seed)
        labels = assign_activity_groups(series)
        agree.append(np.mean(labels == truth))
    assert min(agree) >= 0.95


def test_activity_groups_permutation_invariant(rng):
    series, _ = synth_daily_steps(25, 30, rng=3)
    labels = assign_activity_groups(series)
    perm = rng.permutation(25)
    assert np.array_equal(assign_activity_groups(series[perm]), labels[perm])


def test_dosage_examples():
    assert dosage_update(DosageState(0.0, 0.5), True).value == 1.0
    assert dosage_update(DosageState(1.0, 0.5), False).value == 0.5
    d = DosageState(decay=0.9)
    for _ in range(200):
        d = dosage_update(d, True)
    assert d.value == pytest.approx(1 / (1 - 0.9), abs=1e-6)


def test_dosage_after_hundred_steps_close_to_limit_bound():
    # geometric series: 1/(1-lam) - D_100 = lam^100/(1-lam) ~ 2.7e-4
    d = DosageState(decay=0.9)
    for _ in range(100):
        d = dosage_update(d, True)
    assert 10.0 - d.value == pytest.approx(0.9**100 / 0.1, rel=1e-9)


@settings(max_examples=100)
@given(st.floats(0, 1e6), st.floats(0.01, 0.99))
def test_dosage_monotone(value, lam):
    d = DosageState(value, lam)
    assert dosage_update(d, True).value > dosage_update(d, False).value


def test_dosage_validation():
    with pytest.raises(ValueError):
        DosageState(-1.0)
    with pytest.raises(ValueError):
        DosageState(0.0, 1.0)


def test_engagement_flag():
    pop = list(range(1, 11))
    assert engagement_flag(10, pop) == 1
    assert engagement_flag(0, pop) == 0
    at = np.percentile(pop, 40)
    assert at == pytest.approx(4.6)
    assert engagement_flag(4.6, pop) == 0 and engagement_flag(5, pop) == 1
    with pytest.raises(ValueError):
        engagement_flag(1, [])
