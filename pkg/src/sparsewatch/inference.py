"""Streaming variational inference for the sparse-anomaly coefficients.

The working model for an observed subset Z of the p variables at one step is

    x_Z = B_bZ · theta_n + B_aZ · theta_a + noise,  noise ~ N(0, sigma_e^2 I),

with a fresh Gaussian background coefficient theta_n per step and a sparse
anomaly coefficient theta_a shared across steps.  Each anomaly coordinate
carries a spike-slab prior: with probability w_j it is drawn from the wide
slab N(0, sigma_j^2), otherwise from the narrow spike N(0, v·sigma_j^2).

The per-step background is never estimated and subtracted inside the
history; it is integrated out.  Given theta_a, one step's observation is
Gaussian with covariance sigma_b^2·B_bZ·B_bZ' + sigma_e^2·I, so each step
contributes cross-moments of its rows under that covariance's inverse
(computed through the k_b-sized complement, never the m-sized inverse).
History enters only through exponentially decayed sums of those whitened
cross-moments, so every update is O(1) in the stream length.  The decayed
sums are left unnormalized, in the style of recursive least squares with a
forgetting factor: a fresh stream carries little weight and the effective
sample size grows toward 1/decay.  The variational family matches the
prior's structure: per coordinate, inclusion probability alpha_j, slab
component N(mu_aj, s_j^2), spike component N(0, v·s_j^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bases import BasisDictionary
from .errors import DimensionError, StateError

__all__ = [
    "ALPHA_CLAMP",
    "ModelConfig",
    "SpikeSlabPosterior",
    "DecayedStats",
    "BackgroundPosterior",
    "FitResult",
    "absorb_sample",
    "vb_coordinate_sweep",
    "elbo",
    "update_background",
    "fit",
    "posterior_record",
    "append_jsonl",
]

# Inclusion probabilities live in [ALPHA_CLAMP, 1 - ALPHA_CLAMP] so logits and
# entropy terms stay finite.
ALPHA_CLAMP = 1e-12

_LOG_2PI = math.log(2.0 * math.pi)


# ── Domain types ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ModelConfig:
    """Fixed hyperparameters of the monitoring model.

    Parameters
    ----------
    sigma_e : float
        Observation noise standard deviation (noise covariance sigma_e^2 I).
    sigma_b : float
        Prior standard deviation of each background coefficient.
    sigma_j : ndarray, shape (k_a,)
        Slab standard deviation per anomaly basis column.
    w : ndarray, shape (k_a,)
        Prior inclusion probability per anomaly basis column, in (0, 1).
    v : float
        Spike shrink factor in (0, 1); spike variance is v·sigma_j^2 (and
        v·s_j^2 in the variational family), v ≪ 1.
    decay : float
        Exponential decay rate of the history weights, in (0, 0.1].
    m : int
        Sensing budget: number of variables observed per step.
    """

    sigma_e: float
    sigma_b: float
    sigma_j: np.ndarray
    w: np.ndarray
    v: float
    decay: float
    m: int

    def __post_init__(self):
        sigma_j = np.atleast_1d(np.asarray(self.sigma_j, dtype=np.float64)).ravel()
        w = np.atleast_1d(np.asarray(self.w, dtype=np.float64)).ravel()
        object.__setattr__(self, "sigma_j", sigma_j)
        object.__setattr__(self, "w", w)
        if sigma_j.size != w.size:
            raise DimensionError("sigma_j and w must have one entry per anomaly column")
        if not (self.sigma_e > 0 and self.sigma_b > 0):
            raise ValueError("sigma_e and sigma_b must be positive")
        if not np.all(sigma_j > 0):
            raise ValueError("all slab standard deviations must be positive")
        if not (np.all(w > 0) and np.all(w < 1)):
            raise ValueError("inclusion priors w must lie strictly in (0, 1)")
        if not (0.0 < self.v < 1.0):
            raise ValueError("spike shrink factor v must lie in (0, 1)")
        if not (0.0 < self.decay <= 0.1):
            raise ValueError("decay rate must lie in (0, 0.1]")
        if self.m < 1:
            raise ValueError("sensing budget m must be positive")
        # Derived quantities used in every sweep; cached once.
        object.__setattr__(self, "sigma_e2", float(self.sigma_e) ** 2)
        object.__setattr__(self, "sigma_b2", float(self.sigma_b) ** 2)
        object.__setattr__(self, "sigma_j2", sigma_j**2)
        object.__setattr__(self, "logit_w", np.log(w) - np.log1p(-w))

    @property
    def k_a(self) -> int:
        return self.sigma_j.size

    @classmethod
    def homogeneous(
        cls,
        k_a: int,
        sigma_e: float,
        sigma_b: float,
        sigma_j: float,
        w: float,
        v: float,
        decay: float,
        m: int,
    ) -> "ModelConfig":
        """Config with identical slab/inclusion settings on every column."""
        return cls(
            sigma_e=sigma_e,
            sigma_b=sigma_b,
            sigma_j=np.full(k_a, float(sigma_j)),
            w=np.full(k_a, float(w)),
            v=v,
            decay=decay,
            m=m,
        )


@dataclass(frozen=True)
class SpikeSlabPosterior:
    """Variational posterior over the anomaly coefficients.

    Per coordinate j: inclusion probability ``alpha[j]``, slab mean
    ``mu_a[j]``, slab variance ``s2[j]``.  The posterior mean is the
    shrunken vector ``mu_tilde = mu_a * alpha``.
    """

    mu_a: np.ndarray
    s2: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu_a, dtype=np.float64).ravel()
        s2 = np.asarray(self.s2, dtype=np.float64).ravel()
        alpha = np.clip(
            np.asarray(self.alpha, dtype=np.float64).ravel(),
            ALPHA_CLAMP,
            1.0 - ALPHA_CLAMP,
        )
        if not (mu.size == s2.size == alpha.size):
            raise DimensionError("posterior fields must share one length")
        if not np.all(s2 > 0):
            raise ValueError("slab variances must be positive")
        object.__setattr__(self, "mu_a", mu)
        object.__setattr__(self, "s2", s2)
        object.__setattr__(self, "alpha", alpha)

    @property
    def k_a(self) -> int:
        return self.mu_a.size

    @property
    def mu_tilde(self) -> np.ndarray:
        return self.mu_a * self.alpha

    @classmethod
    def prior(cls, cfg: ModelConfig) -> "SpikeSlabPosterior":
        return cls(
            mu_a=np.zeros(cfg.k_a), s2=cfg.sigma_j2.copy(), alpha=cfg.w.copy()
        )


@dataclass(frozen=True)
class DecayedStats:
    """Exponentially decayed cross-moments of the whitened observed history.

    One absorbed step with observed anomaly rows B_aZ, background rows B_bZ
    and values x_Z contributes through the matrix

        W = I − B_bZ (B_bZ'B_bZ + (sigma_e^2/sigma_b^2) I)^{-1} B_bZ',

    which is sigma_e^2 times the inverse of the step's marginal covariance
    sigma_b^2·B_bZ·B_bZ' + sigma_e^2·I (background integrated out).  The
    fields are unnormalized decayed sums, newest step at weight one:
    ``raw_M`` of B_aZ'·W·B_aZ, ``raw_u`` of B_aZ'·W·x_Z, ``raw_q`` of
    x_Z'·W·x_Z, and ``raw_norm`` of the per-step Gaussian normalization
    −(m·ln(2π) + ln det(marginal covariance))/2.  ``mass`` is the decayed
    sum of the weights themselves, (1 − (1−decay)^n)/decay after n steps:
    the effective sample size the sums carry, approaching 1/decay.
    """

    raw_M: np.ndarray
    raw_u: np.ndarray
    raw_q: float
    raw_norm: float
    mass: float
    n: int

    @classmethod
    def empty(cls, k_a: int) -> "DecayedStats":
        return cls(
            raw_M=np.zeros((k_a, k_a)),
            raw_u=np.zeros(k_a),
            raw_q=0.0,
            raw_norm=0.0,
            mass=0.0,
            n=0,
        )

    @property
    def k_a(self) -> int:
        return self.raw_u.size


@dataclass(frozen=True)
class BackgroundPosterior:
    """Gaussian posterior over the current step's background coefficient."""

    theta_n: np.ndarray
    cov_b: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta_n, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.cov_b, dtype=np.float64))
        if cov.shape != (theta.size, theta.size):
            raise DimensionError("cov_b shape must match theta_n length")
        object.__setattr__(self, "theta_n", theta)
        object.__setattr__(self, "cov_b", cov)

    @property
    def k_b(self) -> int:
        return self.theta_n.size

    @classmethod
    def prior(cls, cfg: ModelConfig, k_b: int) -> "BackgroundPosterior":
        return cls(theta_n=np.zeros(k_b), cov_b=cfg.sigma_b2 * np.eye(k_b))


class FitResult(NamedTuple):
    post: SpikeSlabPosterior
    bg: BackgroundPosterior
    stats: DecayedStats
    converged: bool
    n_iters: int


# ── Internal helpers ──────────────────────────────────────────────────────


def _check_subset(z, p: int, m: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.intp).ravel()
    if z.size != m:
        raise DimensionError(f"observation subset has {z.size} indices, budget is {m}")
    if z.size and (z.min() < 0 or z.max() >= p):
        raise IndexError("observation subset index out of range")
    if np.unique(z).size != z.size:
        raise DimensionError("observation subset indices must be distinct")
    return z


def _background_solve(
    x_z: np.ndarray,
    b_b_z: np.ndarray,
    mu_tilde_signal: np.ndarray,
    cfg: ModelConfig,
):
    """Posterior mean/covariance of the background coefficient on rows Z.

    Solves (B_bZ' B_bZ / sigma_e^2 + I / sigma_b^2) theta = B_bZ'(x − signal)
    / sigma_e^2 through a Cholesky factorization.  ``mu_tilde_signal`` is the
    anomaly-mean contribution B_aZ·mu_tilde already evaluated on Z.
    """
    k_b = b_b_z.shape[1]
    if k_b == 0:
        return np.zeros(0), np.zeros((0, 0))
    h = b_b_z.T @ b_b_z / cfg.sigma_e2 + np.eye(k_b) / cfg.sigma_b2
    factor = cho_factor(h, lower=True)
    rhs = b_b_z.T @ (x_z - mu_tilde_signal) / cfg.sigma_e2
    theta = cho_solve(factor, rhs)
    cov = cho_solve(factor, np.eye(k_b))
    cov = 0.5 * (cov + cov.T)
    return theta, cov


# ── Operations ────────────────────────────────────────────────────────────


def absorb_sample(
    stats: DecayedStats,
    x_z: np.ndarray,
    z,
    dictionary: BasisDictionary,
    cfg: ModelConfig,
) -> DecayedStats:
    """Fold one partially observed sample into the decayed cross-moments.

    The step's background coefficient is integrated out under its
    N(0, sigma_b^2 I) prior, so the contribution is whitened by

        W = I − B_bZ (B_bZ'B_bZ + (sigma_e^2/sigma_b^2) I)^{-1} B_bZ'

    and each accumulator follows raw ← (1 − decay)·raw + contribution (the
    newest step always enters at weight one).  The complement is solved at
    size k_b; the m×m matrix W is never formed.

    Returns a new DecayedStats; the input is not modified.
    """
    z = _check_subset(z, dictionary.p, cfg.m)
    x_z = np.asarray(x_z, dtype=np.float64).ravel()
    if x_z.size != z.size:
        raise DimensionError("x_z length must match the observation subset")
    if stats.k_a != dictionary.k_a:
        raise DimensionError("stats and dictionary disagree on basis sizes")

    b_a_z = dictionary.b_a[z]
    b_b_z = dictionary.b_b[z]
    k_b = dictionary.k_b
    if k_b:
        h = b_b_z.T @ b_b_z / cfg.sigma_e2 + np.eye(k_b) / cfg.sigma_b2
        factor = cho_factor(h, lower=True)
        # Rows of B_a and x with the background component shrunk away:
        # W·v = v − B_bZ·(B_bZ'B_bZ + ridge)^{-1}·B_bZ'v.
        g = cho_solve(factor, b_b_z.T / cfg.sigma_e2, check_finite=False)
        w_a = b_a_z - b_b_z @ (g @ b_a_z)
        w_x = x_z - b_b_z @ (g @ x_z)
        # ln det W = −k_b·ln sigma_b^2 − ln det h (matrix determinant lemma
        # applied to the rank-k_b complement).
        logdet_w = -k_b * math.log(cfg.sigma_b2) - 2.0 * float(
            np.sum(np.log(np.diag(factor[0])))
        )
    else:
        w_a = b_a_z
        w_x = x_z
        logdet_w = 0.0

    m_c = b_a_z.T @ w_a
    m_c = 0.5 * (m_c + m_c.T)
    u_c = b_a_z.T @ w_x
    q_c = float(x_z @ w_x)
    # ln det of the marginal covariance is m·ln sigma_e^2 − ln det W.
    norm_c = -0.5 * (x_z.size * (_LOG_2PI + math.log(cfg.sigma_e2)) - logdet_w)

    keep = 1.0 - cfg.decay
    return DecayedStats(
        raw_M=keep * stats.raw_M + m_c,
        raw_u=keep * stats.raw_u + u_c,
        raw_q=keep * stats.raw_q + q_c,
        raw_norm=keep * stats.raw_norm + norm_c,
        mass=keep * stats.mass + 1.0,
        n=stats.n + 1,
    )


def vb_coordinate_sweep(
    post: SpikeSlabPosterior,
    stats: DecayedStats,
    cfg: ModelConfig,
) -> SpikeSlabPosterior:
    """One in-order pass of the per-coordinate variational updates.

    For each anomaly coordinate j (ascending, each using the freshly
    updated earlier coordinates), with M and u the decayed whitened stats:

        s_j^2     = 1 / (M_jj/sigma_e^2 + 1/sigma_j^2)
        mu_aj     = (s_j^2/sigma_e^2) (u_j − Σ_{k≠j} M_jk alpha_k mu_ak)
        logit a_j = logit w_j + mu_aj^2/(2 sigma_j^2)
                    + (M_jj/(2 sigma_e^2)) (mu_aj^2 − s_j^2 + v s_j^2)

    The slab variance depends only on the stats, so repeated sweeps at fixed
    stats move only (mu_a, alpha), each to its exact conditional maximizer;
    the evidence bound is therefore non-decreasing across sweeps.
    """
    if stats.n == 0:
        raise StateError("cannot sweep before any sample has been absorbed")
    if stats.k_a != post.k_a or post.k_a != cfg.k_a:
        raise DimensionError("posterior, stats, and config disagree on k_a")

    # The loop below runs on plain floats; boxing numpy scalars per
    # coordinate dominates the cost of the whole monitoring step otherwise.
    m_rows = stats.raw_M.tolist()
    u = stats.raw_u.tolist()
    se2 = cfg.sigma_e2
    sj2 = cfg.sigma_j2.tolist()
    logit_w = cfg.logit_w.tolist()
    v = cfg.v
    exp = math.exp

    mu = post.mu_a.tolist()
    alpha = post.alpha.tolist()
    s2 = [0.0] * len(mu)
    mu_t = [mu[j] * alpha[j] for j in range(len(mu))]
    lo, hi = ALPHA_CLAMP, 1.0 - ALPHA_CLAMP
    for j in range(len(mu)):
        row = m_rows[j]
        m_jj = row[j]
        s2_j = 1.0 / (m_jj / se2 + 1.0 / sj2[j])
        cross = -m_jj * mu_t[j]
        for a, b in zip(row, mu_t):
            cross += a * b
        mu_j = s2_j / se2 * (u[j] - cross)
        logit = (
            logit_w[j]
            + mu_j * mu_j / (2.0 * sj2[j])
            + m_jj / (2.0 * se2) * (mu_j * mu_j - s2_j + v * s2_j)
        )
        if logit >= 0.0:
            a_j = 1.0 / (1.0 + exp(-logit if logit < 700.0 else -700.0))
        else:
            e = exp(logit if logit > -700.0 else -700.0)
            a_j = e / (1.0 + e)
        a_j = min(max(a_j, lo), hi)
        mu[j] = mu_j
        s2[j] = s2_j
        alpha[j] = a_j
        mu_t[j] = mu_j * a_j
    return SpikeSlabPosterior(mu_a=mu, s2=s2, alpha=alpha)


def elbo(
    post: SpikeSlabPosterior,
    stats: DecayedStats,
    cfg: ModelConfig,
) -> float:
    """Evidence lower bound of the weighted model at the current posterior.

    Evaluates the closed form

        raw_norm − (q − 2 u'mu_tilde + T_M)/(2 sigma_e^2)
        + Σ_j [ 1/2 − s_j^2/(2 sigma_j^2) + (1/2)·ln(s_j^2/sigma_j^2)
                − alpha_j mu_j^2/(2 sigma_j^2)
                + alpha_j ln(w_j/alpha_j) + (1−alpha_j) ln((1−w_j)/(1−alpha_j)) ]

    with T_M = Σ_j M_jj (alpha_j (mu_j^2 + s_j^2) + (1−alpha_j) v s_j^2)
    + Σ_{j≠k} M_jk mu_tilde_j mu_tilde_k, and q, u, M the decayed whitened
    statistics (the quadratic q and the Gaussian normalizations are carried
    exactly, so bound differences across sweeps are exact rather than up to
    a data constant).
    """
    if stats.n == 0:
        raise StateError("cannot evaluate the bound before any sample is absorbed")
    m_mat = stats.raw_M
    u = stats.raw_u
    q = stats.raw_q

    mu, s2, alpha = post.mu_a, post.s2, post.alpha
    mu_t = mu * alpha
    sj2 = cfg.sigma_j2
    diag_m = np.diag(m_mat)

    second_moment = alpha * (mu * mu + s2) + (1.0 - alpha) * cfg.v * s2
    quad_cross = float(mu_t @ m_mat @ mu_t) - float(diag_m @ (mu_t * mu_t))
    t_m = float(diag_m @ second_moment) + quad_cross
    data_term = stats.raw_norm - (q - 2.0 * float(u @ mu_t) + t_m) / (
        2.0 * cfg.sigma_e2
    )

    per_coord = (
        0.5
        - s2 / (2.0 * sj2)
        + 0.5 * np.log(s2 / sj2)
        - alpha * mu * mu / (2.0 * sj2)
        + alpha * (np.log(cfg.w) - np.log(alpha))
        + (1.0 - alpha) * (np.log1p(-cfg.w) - np.log1p(-alpha))
    )
    return float(data_term + per_coord.sum())


def update_background(
    x_z: np.ndarray,
    z,
    post: SpikeSlabPosterior,
    dictionary: BasisDictionary,
    cfg: ModelConfig,
) -> BackgroundPosterior:
    """Gaussian posterior of the current background coefficient.

    Conditions on the current observation with the anomaly contribution
    replaced by its posterior mean B_aZ·(mu_a ∘ alpha):

        theta = (B_bZ' B_bZ/sigma_e^2 + I/sigma_b^2)^{-1} B_bZ' (x − B_aZ mu_tilde)/sigma_e^2
        cov   = (B_bZ' B_bZ/sigma_e^2 + I/sigma_b^2)^{-1}

    computed through a Cholesky factorization of the precision matrix.
    """
    z = _check_subset(z, dictionary.p, cfg.m)
    x_z = np.asarray(x_z, dtype=np.float64).ravel()
    if x_z.size != z.size:
        raise DimensionError("x_z length must match the observation subset")
    signal = dictionary.b_a[z] @ post.mu_tilde
    theta, cov = _background_solve(x_z, dictionary.b_b[z], signal, cfg)
    return BackgroundPosterior(theta_n=theta, cov_b=cov)


def fit(
    x_z: np.ndarray,
    z,
    prev_posterior: SpikeSlabPosterior,
    prev_stats: DecayedStats,
    dictionary: BasisDictionary,
    cfg: ModelConfig,
    tol: float = 1e-6,
    max_iters: int = 100,
) -> FitResult:
    """Absorb one observation and iterate the variational updates to a fixed point.

    The sample's whitened cross-moments are folded in once up front; the
    background never enters the anomaly iteration (it is integrated out of
    the moments), so the loop is plain coordinate sweeps at fixed stats,
    stopping when the largest absolute change across (mu_a, alpha) falls
    below ``tol``.  The returned background posterior conditions on the
    current observation alone with the converged anomaly mean subtracted;
    it feeds the monitoring statistic but carries no weight in the history.

    Non-convergence within ``max_iters`` returns the best iterate with
    ``converged=False`` rather than raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    stats = absorb_sample(prev_stats, x_z, z, dictionary, cfg)

    post = prev_posterior
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        post_new = vb_coordinate_sweep(post, stats, cfg)
        delta = max(
            float(np.max(np.abs(post_new.mu_a - post.mu_a))),
            float(np.max(np.abs(post_new.alpha - post.alpha))),
        )
        post = post_new
        if delta < tol:
            converged = True
            break

    bg = update_background(x_z, z, post, dictionary, cfg)
    return FitResult(post=post, bg=bg, stats=stats, converged=converged, n_iters=iters)


# ── Serialization ─────────────────────────────────────────────────────────


def posterior_record(
    step: int, post: SpikeSlabPosterior, bg: BackgroundPosterior, converged: bool
) -> dict:
    """JSON-serializable snapshot of one step's fitted posterior."""
    return {
        "step": int(step),
        "mu_a": [float(x) for x in post.mu_a],
        "s2": [float(x) for x in post.s2],
        "alpha": [float(x) for x in post.alpha],
        "theta_n": [float(x) for x in bg.theta_n],
        "converged": bool(converged),
    }


def append_jsonl(path, record: dict) -> None:
    """Append one record to a JSON-lines file (sorted keys, one line)."""
    with open(path, "a", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
