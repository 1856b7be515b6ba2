"""Shared test utilities."""

from datetime import datetime, timedelta

import numpy as np

from intelpool.core_model import FeatureMap, Observation
from intelpool.policies import Decision


def identity_map(state, action):
    """Treat the state itself as the feature vector."""
    return np.atleast_1d(np.asarray(state, dtype=float))


def make_log(phis, users, rewards):
    counts = {}
    log = []
    for t, (phi, u, r) in enumerate(zip(phis, users, rewards)):
        counts[u] = counts.get(u, 0) + 1
        log.append(Observation(int(u), counts[u], t, np.atleast_1d(phi), 0, float(r)))
    return log


def random_log(rng, n, p, n_users):
    phis = rng.normal(size=(n, p))
    users = rng.integers(0, n_users, size=n)
    rewards = rng.normal(size=n) * 2.0 + 0.5
    return make_log(phis, users, rewards)


class ToyEnv:
    """Two contexts, known per-user treatment effects, Gaussian noise.

    Effects are ``tau[i] + slope * x`` with ``x`` in {-1, 1}; each day has
    ``per_day`` decisions per user spaced two hours apart from 08:00.
    """

    def __init__(self, tau, slope=0.0, days=14, per_day=5, noise=1.0, p_avail=1.0, seed=0,
                 start=None):
        self.tau = np.asarray(tau, dtype=float)
        self.slope = slope
        self.noise = noise
        self.p_avail = p_avail
        self.rng = np.random.default_rng(seed)
        self.start = start or datetime(2020, 1, 6)
        self._events = self._schedule(days, per_day)
        self._pos = 0
        self.signature = {"toy": seed}

    def _schedule(self, days, per_day):
        events = []
        counts = {}
        for d in range(days):
            for j in range(per_day):
                t = self.start + timedelta(days=d, hours=8 + 2 * j)
                for u in range(self.tau.size):
                    counts[u] = counts.get(u, 0) + 1
                    x = float(self.rng.choice([-1.0, 1.0]))
                    avail = bool(self.rng.random() < self.p_avail)
                    events.append(Decision(u, counts[u], t, x, avail))
        return events

    def effect(self, user_id, x):
        return self.tau[user_id] + self.slope * x

    def treatment_effect(self, user_id, state):
        return self.effect(user_id, state)

    def next_decision(self):
        return self._events[self._pos] if self._pos < len(self._events) else None

    def submit(self, action):
        d = self._events[self._pos]
        self._pos += 1
        a = action if d.available else 0
        return float(1.0 + 0.5 * d.state + a * self.effect(d.user_id, d.state)
                     + self.noise * self.rng.standard_normal())


def toy_feature_map():
    return FeatureMap(lambda x: (1.0, x), lambda x: (1.0, x), 2, 2, ["b0", "bx", "a0", "ax"])
