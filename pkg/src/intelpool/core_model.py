"""Mixed-effects Bayesian reward model.

Rewards follow ``R = phi(S, A)^T theta_i + eps`` with
``theta_i = theta_pop + u_i``, ``theta_pop ~ N(mu_theta, Sigma_theta)``,
``u_i ~ N(0, Sigma_u)`` and ``eps ~ N(0, sigma_eps2)``. Integrating out the
parameters gives a Gaussian process over logged tuples with kernel

    K(x1, x2) = phi1^T (Sigma_theta + 1{i1 == i2} Sigma_u) phi2

Two numerical routes are provided for the posterior and the marginal
likelihood:

``"dense"``
    Builds the n x n kernel matrix and factors ``K + sigma_eps2 I`` directly.
``"lowrank"``
    Writes ``K = B B^T`` with ``B`` of width ``q = rank(Sigma_theta) +
    n_users * rank(Sigma_u)`` and works with the q x q matrix
    ``sigma_eps2 I + B^T B``. The result is identical in exact arithmetic and
    costs O(q^3) once per-user sufficient statistics are accumulated, which is
    what makes repeated hyperparameter evaluation cheap.
"""

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .linalg import (
    cho_solve_lower,
    jittered_cholesky,
    logdet_from_cholesky,
    psd_factor,
)

LOG_2PI = float(np.log(2.0 * np.pi))

FeatureMapFn = Callable[[Any, int], np.ndarray]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """One logged decision tuple."""

    user_id: int
    decision_index: int
    calendar_time: Any
    state: Any
    action: int
    reward: float
    availability: bool = True

    def __post_init__(self):
        if self.action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {self.action!r}")
        if not self.availability and self.action != 0:
            raise ValueError("action must be 0 when the user is unavailable")
        if self.decision_index < 1:
            raise ValueError("decision_index starts at 1")


def validate_log(log: Sequence[Observation]) -> None:
    """Check uniqueness of (user, k) and per-user time ordering."""
    per_user: dict[int, list[Observation]] = {}
    for obs in log:
        per_user.setdefault(obs.user_id, []).append(obs)
    for uid, rows in per_user.items():
        rows = sorted(rows, key=lambda o: o.decision_index)
        for a, b in zip(rows, rows[1:]):
            if a.decision_index == b.decision_index:
                raise ValueError(f"duplicate decision index {a.decision_index} for user {uid}")
            if b.calendar_time < a.calendar_time:
                raise ValueError(f"calendar_time decreases for user {uid}")


def _check_psd(mat, name, tol=1e-8):
    if not np.allclose(mat, mat.T, atol=1e-12, rtol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if mat.shape[0]:
        eig = np.linalg.eigvalsh(mat)
        scale = max(1.0, float(np.max(np.abs(eig))))
        if eig[0] < -tol * scale:
            raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class Priors:
    """Fixed prior on the population parameter."""

    mu_theta: np.ndarray
    sigma_theta: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu_theta, dtype=float).reshape(-1)
        sig = np.atleast_2d(np.asarray(self.sigma_theta, dtype=float))
        if sig.shape != (mu.size, mu.size):
            raise ValueError("sigma_theta must be p x p with p = len(mu_theta)")
        _check_psd(sig, "sigma_theta")
        object.__setattr__(self, "mu_theta", mu)
        object.__setattr__(self, "sigma_theta", sig)

    @property
    def dim(self) -> int:
        return self.mu_theta.size


@dataclass(frozen=True)
class RandomEffectSpec:
    """Which coordinates carry a person-specific deviation, and its covariance."""

    mask: np.ndarray
    sigma_u: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        sig = np.atleast_2d(np.asarray(self.sigma_u, dtype=float))
        if sig.shape != (mask.size, mask.size):
            raise ValueError("sigma_u must be p x p with p = len(mask)")
        _check_psd(sig, "sigma_u")
        off = ~mask
        if np.any(sig[off, :] != 0) or np.any(sig[:, off] != 0):
            raise ValueError("sigma_u must vanish outside the random-effect mask")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "sigma_u", sig)


@dataclass(frozen=True)
class Hyperparams:
    """Empirically tuned hyperparameters ``(Sigma_u, sigma_eps2)``."""

    sigma_u: np.ndarray
    sigma_eps2: float
    mask: np.ndarray | None = None

    def __post_init__(self):
        sig = np.atleast_2d(np.asarray(self.sigma_u, dtype=float))
        if not np.isfinite(self.sigma_eps2) or self.sigma_eps2 <= 0:
            raise ValueError("sigma_eps2 must be a positive finite number")
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))
        if self.mask is not None:
            spec = RandomEffectSpec(self.mask, sig)
            object.__setattr__(self, "mask", spec.mask)
        else:
            _check_psd(sig, "sigma_u")
        object.__setattr__(self, "sigma_u", sig)

    @classmethod
    def diagonal(cls, mask, variances, sigma_eps2):
        """Diagonal ``Sigma_u`` with ``variances`` placed on the masked coordinates."""
        mask = np.asarray(mask, dtype=bool)
        diag = np.zeros(mask.size)
        diag[mask] = variances
        return cls(np.diag(diag), sigma_eps2, mask)

    def with_sigma_u(self, sigma_u):
        return Hyperparams(sigma_u, self.sigma_eps2, self.mask)

    @property
    def dim(self) -> int:
        return self.sigma_u.shape[0]


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------


class FeatureMap:
    """``phi(s, a) = [f0(s); a * f(s)]`` with a default random-effect mask.

    ``baseline`` and ``effect`` map a raw state to the baseline features
    ``f0(s)`` and the treatment-effect features ``f(s)``.
    """

    def __init__(self, baseline: Callable[[Any], Sequence[float]],
                 effect: Callable[[Any], Sequence[float]],
                 n_baseline: int, n_effect: int, names: Sequence[str] | None = None):
        self.baseline = baseline
        self.effect = effect
        self.n_baseline = n_baseline
        self.n_effect = n_effect
        self.names = list(names) if names is not None else None

    @property
    def dim(self) -> int:
        return self.n_baseline + self.n_effect

    @property
    def random_effect_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        mask[self.n_baseline:] = True
        return mask

    def __call__(self, state, action):
        out = np.empty(self.dim)
        out[: self.n_baseline] = self.baseline(state)
        out[self.n_baseline:] = np.asarray(self.effect(state), dtype=float) * action
        return out

    def difference(self, state):
        """``phi(s, 1) - phi(s, 0)``."""
        out = np.zeros(self.dim)
        out[self.n_baseline:] = self.effect(state)
        return out


def arm_difference(feature_map: FeatureMapFn, state) -> np.ndarray:
    diff = getattr(feature_map, "difference", None)
    if diff is not None:
        return np.asarray(diff(state), dtype=float)
    return (np.asarray(feature_map(state, 1), dtype=float)
            - np.asarray(feature_map(state, 0), dtype=float))


@dataclass(frozen=True)
class Design:
    """Array view of a log: features, user ids, rewards."""

    phi: np.ndarray
    users: np.ndarray
    rewards: np.ndarray

    @classmethod
    def from_log(cls, log: Sequence[Observation], feature_map: FeatureMapFn,
                 dim: int | None = None):
        n = len(log)
        if n == 0:
            p = dim if dim is not None else getattr(feature_map, "dim", 0)
            return cls(np.zeros((0, p)), np.zeros(0, dtype=int), np.zeros(0))
        phi = np.array([np.asarray(feature_map(o.state, o.action), dtype=float) for o in log])
        if phi.ndim != 2:
            raise ValueError("feature map must return 1-D vectors of a fixed length")
        if dim is not None and phi.shape[1] != dim:
            raise ValueError(f"feature map returned length {phi.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("feature vectors must be finite")
        users = np.array([o.user_id for o in log], dtype=int)
        rewards = np.array([o.reward for o in log], dtype=float)
        return cls(phi, users, rewards)

    def __len__(self):
        return self.rewards.size

    @classmethod
    def from_arrays(cls, phi, users, rewards):
        phi = np.asarray(phi, dtype=float)
        if phi.ndim == 1:
            phi = phi.reshape(len(rewards), -1)
        return cls(phi, np.asarray(users, dtype=int), np.asarray(rewards, dtype=float))

    def subset(self, mask):
        return Design(self.phi[mask], self.users[mask], self.rewards[mask])


# ---------------------------------------------------------------------------
# kernel and direct (dense) route
# ---------------------------------------------------------------------------


def _as_features(x):
    if isinstance(x, Mapping):
        return int(x["user_id"]), np.asarray(x["phi"], dtype=float)
    user, phi = x
    return int(user), np.asarray(phi, dtype=float)


def kernel(x1, x2, priors: Priors, hp: Hyperparams) -> float:
    """Random-effects kernel between two ``(user_id, phi)`` pairs."""
    i1, phi1 = _as_features(x1)
    i2, phi2 = _as_features(x2)
    p = priors.dim
    if phi1.shape != (p,) or phi2.shape != (p,):
        raise ValueError(f"feature vectors must have length {p}")
    if hp.dim != p:
        raise ValueError("hyperparameter dimension does not match the prior")
    cov = priors.sigma_theta + hp.sigma_u if i1 == i2 else priors.sigma_theta
    return float(phi1 @ cov @ phi2)


def _kernel_from_design(design: Design, priors: Priors, hp: Hyperparams) -> np.ndarray:
    phi = design.phi
    k = phi @ priors.sigma_theta @ phi.T
    same = design.users[:, None] == design.users[None, :]
    k += (phi @ hp.sigma_u @ phi.T) * same
    return 0.5 * (k + k.T)


def kernel_matrix(log, feature_map, priors: Priors, hp: Hyperparams) -> np.ndarray:
    """``K[a, b] = kernel(x_a, x_b)`` over the whole log."""
    design = Design.from_log(log, feature_map, priors.dim)
    return _kernel_from_design(design, priors, hp)


def centered_rewards(log, feature_map, priors: Priors) -> np.ndarray:
    """Rewards minus their prior-mean prediction ``phi^T mu_theta``."""
    design = Design.from_log(log, feature_map, priors.dim)
    return design.rewards - design.phi @ priors.mu_theta


def _prior_posterior(priors, hp, include_random_effect=True):
    cov = priors.sigma_theta + hp.sigma_u if include_random_effect else priors.sigma_theta.copy()
    return GaussianPosterior(priors.mu_theta.copy(), cov)


def _dense_posteriors(design, priors, hp, user_ids):
    n = len(design)
    r_tilde = design.rewards - design.phi @ priors.mu_theta
    cov = _kernel_from_design(design, priors, hp) + hp.sigma_eps2 * np.eye(n)
    chol, _ = jittered_cholesky(cov)
    alpha = cho_solve_lower(chol, r_tilde)
    prior_cov = priors.sigma_theta + hp.sigma_u
    out = {}
    for uid in user_ids:
        if uid is None:
            same = np.zeros((n, 1), dtype=bool)
        else:
            same = (design.users == uid)[:, None]
        m = design.phi @ priors.sigma_theta + same * (design.phi @ hp.sigma_u)
        mean = priors.mu_theta + m.T @ alpha
        post_cov = prior_cov - m.T @ cho_solve_lower(chol, m)
        out[uid] = GaussianPosterior(mean, 0.5 * (post_cov + post_cov.T))
    return out


def _dense_loglik(design, priors, hp):
    n = len(design)
    r_tilde = design.rewards - design.phi @ priors.mu_theta
    cov = _kernel_from_design(design, priors, hp) + hp.sigma_eps2 * np.eye(n)
    chol, _ = jittered_cholesky(cov)
    alpha = cho_solve_lower(chol, r_tilde)
    return -0.5 * (float(r_tilde @ alpha) + logdet_from_cholesky(chol) + n * LOG_2PI)


# ---------------------------------------------------------------------------
# low-rank route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SufficientStats:
    """Per-user Gram matrices and cross products of a design.

    Centering by ``mu_theta`` is applied lazily so the same statistics serve
    every hyperparameter value.
    """

    user_ids: np.ndarray
    gram: np.ndarray       # (N, p, p)  Phi_i^T Phi_i
    cross: np.ndarray      # (N, p)     Phi_i^T R_i
    sq: np.ndarray         # (N,)       R_i^T R_i
    n: int

    @classmethod
    def from_design(cls, design: Design):
        ids = np.unique(design.users)
        p = design.phi.shape[1]
        gram = np.zeros((ids.size, p, p))
        cross = np.zeros((ids.size, p))
        sq = np.zeros(ids.size)
        for j, uid in enumerate(ids):
            rows = design.users == uid
            ph = design.phi[rows]
            r = design.rewards[rows]
            gram[j] = ph.T @ ph
            cross[j] = ph.T @ r
            sq[j] = r @ r
        return cls(ids, gram, cross, sq, len(design))

    @classmethod
    def from_log(cls, log, feature_map, dim=None):
        return cls.from_design(Design.from_log(log, feature_map, dim))

    def centered(self, mu):
        """Per-user ``Phi_i^T R~_i`` and total ``R~^T R~``."""
        h = self.cross - self.gram @ mu
        rr = float(np.sum(self.sq) - 2.0 * self.cross.sum(axis=0) @ mu
                   + mu @ self.gram.sum(axis=0) @ mu)
        return h, rr


@dataclass
class _LowRankSystem:
    w_theta: np.ndarray
    w_u: np.ndarray
    chol: np.ndarray
    xi_hat: np.ndarray
    rr: float
    c: np.ndarray
    n_users: int

    @property
    def rank_theta(self):
        return self.w_theta.shape[1]

    @property
    def rank_u(self):
        return self.w_u.shape[1]


def _lowrank_system(stats: SufficientStats, priors: Priors, hp: Hyperparams,
                    w_theta=None) -> _LowRankSystem:
    if w_theta is None:
        w_theta = psd_factor(priors.sigma_theta)
    w_u = psd_factor(hp.sigma_u)
    kt, ku = w_theta.shape[1], w_u.shape[1]
    n_users = stats.user_ids.size
    q = kt + n_users * ku
    h, rr = stats.centered(priors.mu_theta)

    a = np.zeros((q, q))
    c = np.zeros(q)
    g_total = stats.gram.sum(axis=0)
    a[:kt, :kt] = w_theta.T @ g_total @ w_theta
    c[:kt] = w_theta.T @ h.sum(axis=0)
    for j in range(n_users):
        s = slice(kt + j * ku, kt + (j + 1) * ku)
        gj = stats.gram[j]
        gw = gj @ w_u
        off = w_theta.T @ gw
        a[:kt, s] = off
        a[s, :kt] = off.T
        a[s, s] = w_u.T @ gw
        c[s] = w_u.T @ h[j]
    a[np.diag_indices(q)] += hp.sigma_eps2
    chol, _ = jittered_cholesky(a)
    xi_hat = cho_solve_lower(chol, c) if q else np.zeros(0)
    return _LowRankSystem(w_theta, w_u, chol, xi_hat, rr, c, n_users)


def _lowrank_loglik(stats, priors, hp, w_theta=None):
    sysm = _lowrank_system(stats, priors, hp, w_theta)
    n = stats.n
    q = sysm.c.size
    s2 = hp.sigma_eps2
    quad = (sysm.rr - float(sysm.c @ sysm.xi_hat)) / s2
    logdet = (n - q) * np.log(s2) + logdet_from_cholesky(sysm.chol)
    return -0.5 * (quad + logdet + n * LOG_2PI)


def _lowrank_posteriors(stats, priors, hp, user_ids):
    sysm = _lowrank_system(stats, priors, hp)
    kt, ku = sysm.rank_theta, sysm.rank_u
    s2 = hp.sigma_eps2
    index = {int(uid): j for j, uid in enumerate(stats.user_ids)}
    out = {}
    pop_cols = np.arange(kt)
    for uid in user_ids:
        j = None if uid is None else index.get(int(uid))
        if j is None:
            cols = pop_cols
            w = sysm.w_theta
        else:
            cols = np.concatenate([pop_cols, kt + j * ku + np.arange(ku)])
            w = np.hstack([sysm.w_theta, sysm.w_u])
        # posterior of the whitened coordinates is N(xi_hat, s2 * A^{-1})
        e = np.zeros((sysm.c.size, cols.size))
        e[cols, np.arange(cols.size)] = 1.0
        cov_xi = s2 * cho_solve_lower(sysm.chol, e)[cols]
        mean = priors.mu_theta + w @ sysm.xi_hat[cols]
        cov = w @ cov_xi @ w.T
        if j is None:
            cov = cov + hp.sigma_u
        out[uid] = GaussianPosterior(mean, 0.5 * (cov + cov.T))
    return out


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def _check_dims(priors, hp):
    if hp.dim != priors.dim:
        raise ValueError("hyperparameter dimension does not match the prior")


def posteriors_from_design(design: Design, priors: Priors, hp: Hyperparams,
                           user_ids, method="lowrank"):
    """Posteriors for several users from one factorization.

    A ``None`` entry in ``user_ids`` stands for a user with no logged data.
    """
    _check_dims(priors, hp)
    user_ids = list(user_ids)
    if len(design) == 0:
        return {uid: _prior_posterior(priors, hp) for uid in user_ids}
    if method == "dense":
        return _dense_posteriors(design, priors, hp, user_ids)
    if method == "lowrank":
        return _lowrank_posteriors(SufficientStats.from_design(design), priors, hp, user_ids)
    raise ValueError(f"unknown method {method!r}")


def posterior(user_id, log, feature_map, priors: Priors, hp: Hyperparams,
              method="lowrank") -> GaussianPosterior:
    """Posterior of ``theta_i`` given every tuple in ``log``."""
    design = Design.from_log(log, feature_map, priors.dim)
    return posteriors_from_design(design, priors, hp, [user_id], method)[user_id]


def posteriors(user_ids, log, feature_map, priors, hp, method="lowrank"):
    design = Design.from_log(log, feature_map, priors.dim)
    return posteriors_from_design(design, priors, hp, user_ids, method)


def loglik_from_stats(stats: SufficientStats, priors: Priors, hp: Hyperparams,
                      w_theta=None) -> float:
    """Marginal log-likelihood evaluated from sufficient statistics."""
    _check_dims(priors, hp)
    if stats.n < 1:
        raise ValueError("marginal likelihood needs at least one observation")
    return _lowrank_loglik(stats, priors, hp, w_theta)


def marginal_log_likelihood(log, feature_map, priors: Priors, hp: Hyperparams,
                            method="lowrank") -> float:
    """Log-density of the centered rewards under ``N(0, K + sigma_eps2 I)``."""
    _check_dims(priors, hp)
    design = Design.from_log(log, feature_map, priors.dim)
    if len(design) < 1:
        raise ValueError("marginal likelihood needs at least one observation")
    if method == "dense":
        return _dense_loglik(design, priors, hp)
    if method == "lowrank":
        return _lowrank_loglik(SufficientStats.from_design(design), priors, hp)
    raise ValueError(f"unknown method {method!r}")
