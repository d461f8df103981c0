"""Adaptive selection of the next observation subset.

Between steps the monitor chooses which m of the p variables to observe
next.  The default strategy is posterior sampling: draw one plausible
anomaly coefficient from the fitted spike-slab posterior, synthesize the
full signal it would produce, score every variable by its additive
contribution to the expected monitoring statistic, and keep the top m.
An exhaustive subset scorer is provided as a reference strategy; it is
exponential in p choose m and exists for validation and small problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .bases import BasisDictionary
from .errors import CapabilityError, DimensionError
from .inference import BackgroundPosterior, ModelConfig, SpikeSlabPosterior

__all__ = [
    "ORACLE_SUBSET_LIMIT",
    "SensingPlan",
    "draw_anomaly_sample",
    "synthesize_anomaly_signal",
    "score_variables",
    "select_top_m",
    "OracleScorer",
    "oracle_select",
    "sensing_record",
]

ORACLE_SUBSET_LIMIT = 10**6

# Spike variances are floored here before taking square roots, so a draw is
# well-defined even at extreme shrink factors.
_VAR_FLOOR = 1e-18


@dataclass(frozen=True)
class SensingPlan:
    """Observation subset for the next step, with the scores that chose it."""

    z: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        z = np.sort(np.asarray(self.z, dtype=np.intp).ravel())
        if z.size == 0:
            raise DimensionError("a sensing plan must observe at least one variable")
        if np.unique(z).size != z.size:
            raise DimensionError("sensing plan indices must be distinct")
        object.__setattr__(self, "z", z)
        if self.scores is not None:
            object.__setattr__(
                self, "scores", np.asarray(self.scores, dtype=np.float64).ravel()
            )

    @property
    def m(self) -> int:
        return self.z.size


# ── Posterior sampling ────────────────────────────────────────────────────


def draw_anomaly_sample(
    post: SpikeSlabPosterior, cfg: ModelConfig, rng: np.random.Generator
) -> np.ndarray:
    """One draw of the anomaly coefficient from the fitted posterior.

    Each coordinate tosses its inclusion probability, then draws from the
    slab N(mu_j, s_j^2) when included and from the spike N(0, v·s_j^2)
    otherwise.  Consumes exactly one uniform and one normal vector of length
    k_a, regardless of the inclusion outcome, so downstream randomness does
    not depend on the tosses.
    """
    include = rng.random(post.k_a) < post.alpha
    noise = rng.standard_normal(post.k_a)
    slab_sd = np.sqrt(np.maximum(post.s2, _VAR_FLOOR))
    spike_sd = np.sqrt(np.maximum(cfg.v * post.s2, _VAR_FLOOR))
    return np.where(
        include, post.mu_a + slab_sd * noise, spike_sd * noise
    )


def synthesize_anomaly_signal(
    theta_hat: np.ndarray,
    dictionary: BasisDictionary,
    cfg: ModelConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Hypothetical full observation carrying the sampled anomaly alone.

    Returns B_a·theta_hat plus fresh N(0, sigma_e^2 I) noise over all p
    variables; the background contribution is deliberately absent, since the
    monitoring statistic it feeds is background-corrected.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64).ravel()
    if theta_hat.size != dictionary.k_a:
        raise DimensionError("theta_hat length must match the anomaly basis")
    return dictionary.b_a @ theta_hat + cfg.sigma_e * rng.standard_normal(dictionary.p)


def score_variables(
    x1_hat: np.ndarray, post: SpikeSlabPosterior, dictionary: BasisDictionary
) -> np.ndarray:
    """Per-variable contribution to the monitoring statistic.

    With y = B_a·mu_tilde and the per-coordinate spread
    alpha_j(1−alpha_j)·mu_j^2, variable i scores

        2·x1_hat_i·y_i − (y_i^2 + Σ_j B_a[i,j]^2 · spread_j),

    so the statistic of any subset (absent background correction) is the sum
    of its variables' scores.
    """
    x1_hat = np.asarray(x1_hat, dtype=np.float64).ravel()
    if x1_hat.size != dictionary.p:
        raise DimensionError("x1_hat must cover all p variables")
    if post.k_a != dictionary.k_a:
        raise DimensionError("posterior and dictionary disagree on k_a")
    y = dictionary.b_a @ post.mu_tilde
    spread = post.alpha * (1.0 - post.alpha) * post.mu_a * post.mu_a
    quad = y * y + (dictionary.b_a * dictionary.b_a) @ spread
    return 2.0 * x1_hat * y - quad


def select_top_m(
    scores: np.ndarray, m: int, rng: np.random.Generator
) -> SensingPlan:
    """Indices of the m largest scores, ties broken uniformly at random.

    A random permutation is applied before a stable descending sort, so
    equal-scored variables enter the cut in exchangeable random order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    p = scores.size
    if not 1 <= m <= p:
        raise DimensionError(f"budget m={m} must lie in [1, {p}]")
    perm = rng.permutation(p)
    ranked = perm[np.argsort(-scores[perm], kind="stable")]
    return SensingPlan(z=ranked[:m], scores=scores)


# ── Exhaustive reference strategy ─────────────────────────────────────────


class OracleScorer:
    """Exhaustive subset scorer with the subset geometry precomputed.

    Building the scorer enumerates all p-choose-m subsets and, when a
    background basis is present, factors each subset's projection onto its
    observed background columns.  Construction is therefore expensive and
    meant to be reused across steps; ``oracle_select`` wraps a fresh one for
    single calls.
    """

    def __init__(self, dictionary: BasisDictionary, cfg: ModelConfig, m: int):
        p = dictionary.p
        if not 1 <= m <= p:
            raise DimensionError(f"budget m={m} must lie in [1, {p}]")
        n_subsets = comb(p, m)
        if n_subsets > ORACLE_SUBSET_LIMIT:
            raise CapabilityError(
                f"exhaustive search over C({p},{m})={n_subsets} subsets exceeds "
                f"the {ORACLE_SUBSET_LIMIT} limit; use the posterior-sampling "
                "strategy at this size"
            )
        self.dictionary = dictionary
        self.cfg = cfg
        self.m = m
        self.subsets = np.array(
            list(combinations(range(p), m)), dtype=np.intp
        )
        if dictionary.k_b:
            # Per-subset projection matrices onto the observed background
            # columns, stacked for batched application.
            proj = np.empty((n_subsets, m, m))
            for i, z in enumerate(self.subsets):
                b = dictionary.b_b[z]
                u_mat, svals, _ = np.linalg.svd(b, full_matrices=False)
                cutoff = (
                    max(b.shape)
                    * np.finfo(np.float64).eps
                    * (svals[0] if svals.size else 0.0)
                )
                u_r = u_mat[:, svals > cutoff]
                proj[i] = u_r @ u_r.T
            self._proj = proj
        else:
            self._proj = None

    def subset_scores(
        self, x1_hat: np.ndarray, post: SpikeSlabPosterior
    ) -> np.ndarray:
        """Monitoring-statistic value of every candidate subset."""
        x1_hat = np.asarray(x1_hat, dtype=np.float64).ravel()
        if x1_hat.size != self.dictionary.p:
            raise DimensionError("x1_hat must cover all p variables")
        y = self.dictionary.b_a @ post.mu_tilde
        spread = post.alpha * (1.0 - post.alpha) * post.mu_a * post.mu_a
        quad = y * y + (self.dictionary.b_a * self.dictionary.b_a) @ spread

        y_sub = y[self.subsets]
        x_sub = x1_hat[self.subsets]
        scores = 2.0 * np.einsum("ij,ij->i", y_sub, x_sub) - quad[self.subsets].sum(
            axis=1
        )
        if self._proj is not None:
            py = np.einsum("ijk,ik->ij", self._proj, y_sub)
            scores += np.einsum("ij,ij->i", py, y_sub - 2.0 * x_sub)
        return scores

    def select(
        self,
        x1_hat: np.ndarray,
        post: SpikeSlabPosterior,
        rng: np.random.Generator | None = None,
    ) -> SensingPlan:
        scores = self.subset_scores(x1_hat, post)
        best = scores.max()
        ties = np.flatnonzero(scores == best)
        if ties.size > 1:
            if rng is None:
                rng = np.random.default_rng()
            pick = int(ties[rng.integers(ties.size)])
        else:
            pick = int(ties[0])
        return SensingPlan(z=self.subsets[pick].copy(), scores=None)


def oracle_select(
    x1_hat: np.ndarray,
    post: SpikeSlabPosterior,
    bg: BackgroundPosterior,
    dictionary: BasisDictionary,
    cfg: ModelConfig,
    m: int,
    rng: np.random.Generator | None = None,
) -> SensingPlan:
    """Best observation subset by exhaustive evaluation of the statistic.

    Scores every p-choose-m subset Z by the monitoring statistic the
    synthesized signal would produce there,

        2·mu_tilde'B_aZ'(I − P_Z)·x1_hat_Z − mu_a'(B_aZ'B_aZ ∘ moments)·mu_a
        + (B_aZ mu_tilde)'P_Z(B_aZ mu_tilde),

    with P_Z the projection onto the subset's background columns (the
    projection depends on the dictionary only; ``bg`` is accepted for
    interface symmetry with the sampling strategy).  Exact ties, including
    the all-zero posterior mean where every subset scores zero, are broken
    uniformly at random.  Refuses problems with more than 10^6 subsets.
    """
    del bg
    return OracleScorer(dictionary, cfg, m).select(x1_hat, post, rng)


def sensing_record(step: int, plan: SensingPlan) -> dict:
    """JSON-serializable log entry for one selection decision."""
    return {
        "step": int(step),
        "z": [int(i) for i in plan.z],
    }
