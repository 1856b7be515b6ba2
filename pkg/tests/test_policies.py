from datetime import datetime, timedelta
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intelpool.core_model import FeatureMap, GaussianPosterior, Hyperparams, Priors, posterior
from intelpool.hyperopt import HyperSearchConfig
from intelpool.policies import (
    PolicyKind,
    UpdateSchedule,
    action_probability,
    closed_form_two_user,
    observations_from_records,
    policy_posterior,
    read_records,
    run_trial,
    select_action,
    write_trace,
)

from helpers import ToyEnv, identity_map, make_log, random_log, toy_feature_map

# treatment-only map: phi(s, a) = [s0; a * s1]
SPLIT = FeatureMap(lambda s: (s[0],), lambda s: (s[1],), 1, 1)


def post(m, v):
    return GaussianPosterior(np.array([0.0, m]), np.diag([1.0, v]))


# -- action probability ---------------------------------------------------------


def test_probability_symmetric_posterior_is_half():
    assert action_probability(post(0.0, 1.0), (1.0, 1.0), SPLIT) == pytest.approx(0.5, abs=1e-15)


def test_probability_one_sd_matches_normal_table():
    # Phi(1) from standard normal tables
    assert action_probability(post(1.0, 1.0), (1.0, 1.0), SPLIT) == pytest.approx(0.8413447461, abs=1e-9)


def test_probability_zero_difference_ties_at_half():
    assert action_probability(post(3.0, 1.0), (1.0, 0.0), SPLIT) == 0.5


@pytest.mark.parametrize("m,expected", [(2.0, 1.0), (-2.0, 0.0), (0.0, 0.5)])
def test_probability_point_mass(m, expected):
    assert action_probability(post(m, 0.0), (1.0, 1.0), SPLIT) == expected


def test_probability_clip_is_opt_in():
    p = post(10.0, 1.0)
    assert action_probability(p, (1.0, 1.0), SPLIT) > 0.999
    assert action_probability(p, (1.0, 1.0), SPLIT, clip=(0.1, 0.9)) == 0.9


def test_probability_matches_monte_carlo(rng):
    p = 4
    fm = FeatureMap(lambda s: s[:2], lambda s: s[2:], 2, 2)
    for _ in range(5):
        a = rng.normal(size=(p, p))
        g = GaussianPosterior(rng.normal(size=p), a @ a.T / p)
        s = rng.normal(size=p)
        draws = rng.multivariate_normal(g.mean, g.cov, size=100_000)
        d = fm(s, 1) - fm(s, 0)
        assert abs(np.mean(draws @ d > 0) - action_probability(g, s, fm)) < 0.01


# -- action selection ---------------------------------------------------------


def test_select_action_extremes():
    rng = np.random.default_rng(0)
    assert all(select_action(1.0, True, rng) == 1 for _ in range(50))
    assert all(select_action(0.0, True, rng) == 0 for _ in range(50))


def test_unavailable_never_treated_and_draws_nothing():
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    assert select_action(0.7, False, rng) == 0
    assert rng.bit_generator.state == before


def test_select_action_replays_from_seed():
    a = [select_action(0.5, True, np.random.default_rng(9)) for _ in range(3)]
    b = np.random.default_rng(9)
    assert a == [int(b.random() < 0.5)] * 3


def test_select_action_rejects_bad_probability():
    with pytest.raises(ValueError):
        select_action(1.5, True, np.random.default_rng(0))


def test_policy_kind_parse():
    assert PolicyKind.parse("ip") is PolicyKind.INTELLIGENT_POOLING
    assert PolicyKind.parse("person-specific") is PolicyKind.PERSON_SPECIFIC
    with pytest.raises(ValueError):
        PolicyKind.parse("greedy")


# -- policy posteriors --------------------------------------------------------


def random_setup(rng, n=40, p=3, n_users=4):
    log = random_log(rng, n, p, n_users)
    mask = np.array([False, True, True])
    priors = Priors(rng.normal(size=p), np.eye(p) * 2.0)
    hp = Hyperparams.diagonal(mask, [0.5, 1.5], 0.7)
    return log, priors, hp


def test_ip_without_random_effect_equals_complete(rng):
    log, priors, hp = random_setup(rng)
    flat = hp.with_sigma_u(np.zeros_like(hp.sigma_u))
    for u in range(4):
        ip = policy_posterior("intelligent_pooling", u, log, identity_map, priors, flat)
        cp = policy_posterior("complete", u, log, identity_map, priors, hp)
        assert np.max(np.abs(ip.mean - cp.mean)) < 1e-8
        assert np.max(np.abs(ip.cov - cp.cov)) < 1e-8


def test_complete_is_shared(rng):
    log, priors, hp = random_setup(rng)
    a = policy_posterior("complete", 0, log, identity_map, priors, hp)
    b = policy_posterior("complete", 3, log, identity_map, priors, hp)
    assert np.array_equal(a.mean, b.mean)


def test_person_specific_without_data_is_prior(rng):
    log, priors, hp = random_setup(rng)
    g = policy_posterior("person_specific", 99, log, identity_map, priors, hp)
    assert np.array_equal(g.mean, priors.mu_theta)
    assert np.array_equal(g.cov, priors.sigma_theta)


def test_person_specific_ignores_other_users(rng):
    log, priors, hp = random_setup(rng)
    own = [o for o in log if o.user_id == 2]
    a = policy_posterior("person_specific", 2, log, identity_map, priors, hp)
    b = policy_posterior("person_specific", 2, own, identity_map, priors, hp)
    assert np.allclose(a.mean, b.mean, atol=1e-12)


def test_person_specific_scalar_shrinkage(rng):
    phi = rng.normal(size=12)
    r = rng.normal(size=12) + 2.0
    log = make_log(phi, [0] * 12, r)
    st2, se2 = 2.0, 0.5
    g = policy_posterior("ps", 0, log, identity_map, Priors([0.0], [[st2]]),
                         Hyperparams([[1.0]], se2, [True]))
    s, y = np.sum(phi**2), np.sum(phi * r)
    assert g.mean[0] == pytest.approx(y / (s + se2 / st2), rel=1e-12)


def test_pooling_on_one_user_with_huge_random_effect_is_least_squares(rng):
    phi = rng.normal(size=30)
    r = 3.0 * phi + rng.normal(size=30)
    log = make_log(phi, [0] * 30, r)
    priors = Priors([0.0], [[1.0]])
    hp = Hyperparams([[1e8]], 1.0, [True])
    ip = policy_posterior("ip", 0, log, identity_map, priors, hp)
    wide = policy_posterior("ps", 0, log, identity_map, Priors([0.0], [[1.0 + 1e8]]), hp)
    assert ip.mean[0] == pytest.approx(wide.mean[0], abs=1e-8)
    assert abs(ip.mean[0] - np.sum(phi * r) / np.sum(phi**2)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_shifting_treated_rewards_never_lowers_probability(seed, shift):
    rng = np.random.default_rng(seed)
    n = 25
    states = rng.normal(size=(n, 2))
    states[:, 1] = 1.0
    actions = rng.integers(0, 2, size=n)
    rewards = rng.normal(size=n)
    users = rng.integers(0, 3, size=n)
    fm = SPLIT
    priors = Priors([0.0, 0.0], np.eye(2))
    hp = Hyperparams.diagonal([False, True], [0.5], 1.0)

    from intelpool.core_model import Observation

    def build(rs):
        counts = {}
        out = []
        for t in range(n):
            u = int(users[t])
            counts[u] = counts.get(u, 0) + 1
            out.append(Observation(u, counts[u], t, tuple(states[t]), int(actions[t]), float(rs[t])))
        return out

    shifted = rewards + shift * actions
    for u in range(3):
        before = action_probability(policy_posterior("ip", u, build(rewards), fm, priors, hp),
                                    (1.0, 1.0), fm)
        after = action_probability(policy_posterior("ip", u, build(shifted), fm, priors, hp),
                                   (1.0, 1.0), fm)
        assert after >= before - 1e-12


# -- closed form ------------------------------------------------------------------


def test_closed_form_full_pooling_value():
    mu1, mu2 = closed_form_two_user(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert mu1 == pytest.approx(2 / 3, abs=1e-15)
    assert mu2 == pytest.approx(2 / 3, abs=1e-15)


def test_closed_form_person_specific_limit():
    mu1, mu2 = closed_form_two_user(1e-9, 0.7, 2.0, 5.0, 3.0, -1.0)
    assert mu1 == pytest.approx(1.5, abs=1e-6)
    assert mu2 == pytest.approx(-0.2, abs=1e-6)


def test_closed_form_worked_instance():
    # gamma=1/2, delta=1, S=(2,3), Y=(1,2) evaluated in exact rationals
    g, d = Fraction(1, 2), Fraction(1)
    den = (1 - g * g) * 6 + d * g * 5 + (d * g) ** 2
    m1 = ((d * g + (1 - g * g) * 3) * 1 + d * g * g * 2) / den
    m2 = ((d * g + (1 - g * g) * 2) * 2 + d * g * g * 1) / den
    assert (m1, m2) == (Fraction(13, 29), Fraction(17, 29))
    mu1, mu2 = closed_form_two_user(0.5, 1.0, 2.0, 3.0, 1.0, 2.0)
    assert mu1 == pytest.approx(13 / 29, abs=1e-14)
    assert mu2 == pytest.approx(17 / 29, abs=1e-14)


def test_closed_form_matches_posterior(rng):
    for _ in range(25):
        st2, su2, se2 = rng.uniform(0.2, 3.0, size=3)
        phi = rng.normal(size=9)
        users = np.r_[np.zeros(4, int), np.ones(5, int)]
        r = rng.normal(size=9)
        log = make_log(phi, users, r)
        priors, hp = Priors([0.0], [[st2]]), Hyperparams([[su2]], se2, [True])
        s = [np.sum(phi[users == i] ** 2) for i in (0, 1)]
        y = [np.sum(phi[users == i] * r[users == i]) for i in (0, 1)]
        mu = closed_form_two_user(st2 / (st2 + su2), se2 / st2, s[0], s[1], y[0], y[1])
        for i in (0, 1):
            assert posterior(i, log, identity_map, priors, hp).mean[0] == pytest.approx(mu[i], abs=1e-10)


@pytest.mark.parametrize("gamma,delta", [(0.0, 1.0), (1.5, 1.0), (0.5, 0.0)])
def test_closed_form_rejects_bad_parameters(gamma, delta):
    with pytest.raises(ValueError):
        closed_form_two_user(gamma, delta, 1.0, 1.0, 1.0, 1.0)


def test_closed_form_zero_denominator():
    with pytest.raises(ZeroDivisionError):
        closed_form_two_user(1.0, 1e-200, 0.0, 0.0, 1.0, 1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.05, 10), st.floats(0.05, 10), st.floats(0.01, 10), st.floats(0.01, 10),
       st.floats(0.05, 10), st.booleans())
def test_gamma_sweep_moves_monotonically_to_pooled(s1, s2, a, b, delta, flip):
    # users whose own estimates sit on opposite sides of zero
    y1, y2 = (-a, b) if flip else (a, -b)
    own = y1 / s1
    pooled = (y1 + y2) / (s1 + s2 + delta)
    gammas = np.linspace(1e-6, 1.0, 60)
    mu = np.array([closed_form_two_user(g, delta, s1, s2, y1, y2)[0] for g in gammas])
    step = np.diff(mu)
    tol = 1e-9 * (1 + np.max(np.abs(mu)))
    assert np.all(step >= -tol) if pooled > own else np.all(step <= tol)
    assert mu[0] == pytest.approx(own, rel=1e-3, abs=1e-3)
    assert mu[-1] == pytest.approx(pooled, rel=1e-9, abs=1e-9)


def test_gamma_sweep_can_overshoot_when_users_agree():
    # same-sign users with a strong prior: the path dips below the pooled value
    mu = [closed_form_two_user(g, 2.0, 1.0, 1.0, 1.0, 2.0)[0] for g in np.linspace(1e-6, 1, 50)]
    assert min(mu) < 0.75 - 1e-3 and mu[-1] == pytest.approx(0.75)


# -- schedule ------------------------------------------------------------------------


def test_schedule_validation():
    t = datetime(2020, 1, 1)
    with pytest.raises(ValueError):
        UpdateSchedule((t, t), (False, False))
    with pytest.raises(ValueError):
        UpdateSchedule((), ())
    with pytest.raises(ValueError):
        UpdateSchedule((t,), (False, True))


def test_daily_schedule_refits_weekly():
    s = UpdateSchedule.daily(datetime(2020, 1, 1, 13), 15)
    assert s.update_times[0] == datetime(2020, 1, 1)
    assert len(s.update_times) == 16
    assert [i for i, r in enumerate(s.refit_hyperparams) if r] == [7, 14]


# -- trial loop --------------------------------------------------------------------


def toy_model():
    fm = toy_feature_map()
    priors = Priors(np.zeros(4), np.eye(4) * 4.0)
    hp = Hyperparams.diagonal(fm.random_effect_mask, [1.0, 1.0], 1.0)
    return fm, priors, hp


def test_prior_only_schedule_keeps_probabilities_fixed():
    fm, priors, hp = toy_model()
    env = ToyEnv([1.0, -1.0], days=3)
    sched = UpdateSchedule((env.start - timedelta(days=1),), (False,))
    tr = run_trial(env, "ip", sched, priors, hp, np.random.default_rng(0), fm)
    assert len(tr.posterior_snapshots) == 1 and tr.posterior_snapshots[0].n_tuples == 0
    assert set(tr.probabilities) == {0.5}


def test_identical_seeds_give_identical_traces(tmp_path):
    fm, priors, hp = toy_model()
    paths = []
    for j in range(2):
        env = ToyEnv([1.0, -1.0, 0.5], days=9, p_avail=0.8, seed=4)
        tr = run_trial(env, "ip", UpdateSchedule.daily(env.start, 9), priors, hp,
                       np.random.default_rng(11), fm, HyperSearchConfig(seed=2))
        paths.append(tmp_path / f"t{j}.jsonl")
        write_trace(tr, paths[-1], {"seed": 4})
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_unavailable_decisions_are_untreated():
    fm, priors, hp = toy_model()
    env = ToyEnv([2.0, 2.0], days=4, p_avail=0.5, seed=1)
    tr = run_trial(env, "complete", UpdateSchedule.daily(env.start, 4), priors, hp,
                   np.random.default_rng(0), fm)
    for o, pi in zip(tr.observations, tr.probabilities):
        if not o.availability:
            assert o.action == 0 and pi is None
        else:
            assert 0.0 <= pi <= 1.0


def test_snapshots_use_only_data_up_to_update_time():
    fm, priors, hp = toy_model()
    env = ToyEnv([1.0, 0.0], days=5, seed=2)
    tr = run_trial(env, "ps", UpdateSchedule.daily(env.start, 5), priors, hp,
                   np.random.default_rng(0), fm)
    for snap in tr.posterior_snapshots:
        assert snap.n_tuples == sum(o.calendar_time <= snap.time for o in tr.observations)


def test_refits_only_for_pooling():
    fm, priors, hp = toy_model()
    sched = lambda env: UpdateSchedule.daily(env.start, 15)
    for kind, expected in (("ip", 2), ("complete", 0), ("ps", 0)):
        env = ToyEnv([1.0, -1.0], days=15, seed=3)
        tr = run_trial(env, kind, sched(env), priors, hp, np.random.default_rng(0), fm)
        assert len(tr.hyperparam_history) == expected


def test_pooling_regret_falls_over_weeks():
    fm, priors, hp = toy_model()
    env = ToyEnv([1.5, -1.5, 1.0, -1.0], slope=0.5, days=28, seed=5)
    tr = run_trial(env, "ip", UpdateSchedule.daily(env.start, 28), priors, hp,
                   np.random.default_rng(1), fm)
    weekly = np.zeros(4)
    for o in tr.observations:
        e = env.effect(o.user_id, o.state)
        week = (o.calendar_time - env.start).days // 7
        weekly[week] += max(e, 0.0) - e * o.action
    assert np.all(np.diff(weekly) <= 0.0)
    assert weekly[-1] < 0.5 * weekly[0]


def test_trace_records_round_trip(tmp_path):
    fm, priors, hp = toy_model()
    env = ToyEnv([1.0], days=2)
    tr = run_trial(env, "ip", UpdateSchedule.daily(env.start, 2), priors, hp,
                   np.random.default_rng(0), fm)
    path = tmp_path / "trace.jsonl"
    write_trace(tr, path)
    recs = read_records(path)
    assert recs[0]["record"] == "header" and recs[0]["policy"] == "intelligent_pooling"
    back = observations_from_records(recs)
    assert [(o.user_id, o.decision_index, o.action, o.reward) for o in back] == \
        [(o.user_id, o.decision_index, o.action, o.reward) for o in tr.observations]
    assert [o.calendar_time for o in back] == [o.calendar_time for o in tr.observations]
