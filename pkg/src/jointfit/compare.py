"""Information criteria from pointwise predictive densities.

WAIC uses the log pointwise predictive density with the summed posterior
variance of the per-observation log densities as effective parameter
count; DIC uses the deviance at the posterior mean. Two models fitted to
the same data are compared through a z-test on the per-observation
differences of their WAIC contributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr


class CompareError(ValueError):
    """Invalid inputs to a model-comparison computation."""


@dataclass
class PointwiseCriteria:
    """Per-observation WAIC contributions plus aggregate criteria."""

    waic_contrib: np.ndarray
    lppd: float
    p_waic: float
    waic: float
    dic: float | None = None
    p_dic: float | None = None

    @property
    def n_obs(self) -> int:
        return self.waic_contrib.size


@dataclass(frozen=True)
class PairwiseWaicResult:
    """Observation-level WAIC difference test between two models.

    ``delta`` is the total contribution difference (equals waic_a minus
    waic_b); ``se`` is the standard error of the mean per-observation
    difference, so the test statistic is z = delta / (n * se).
    """

    delta: float
    se: float
    z: float
    p: float
    n: int


class WaicAccumulator:
    """Streaming accumulation of pointwise criteria over draw chunks.

    Chunks are (S_chunk, n) matrices of per-draw, per-observation log
    densities. Running statistics use an online log-sum-exp for the
    predictive density and pairwise-merged mean/M2 for the variance.
    """

    def __init__(self, n_obs: int):
        self.n_obs = n_obs
        self.n_draws = 0
        self._max = np.full(n_obs, -np.inf)
        self._sumexp = np.zeros(n_obs)
        self._mean = np.zeros(n_obs)
        self._m2 = np.zeros(n_obs)
        self.draw_totals = []

    def add(self, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk, dtype=float)
        if chunk.ndim != 2 or chunk.shape[1] != self.n_obs:
            raise CompareError(f"chunk must be (draws, {self.n_obs})")
        if not np.all(np.isfinite(chunk)):
            bad = int(np.flatnonzero(~np.isfinite(chunk).all(axis=0))[0])
            raise CompareError(f"non-finite log density at observation {bad}")
        s = chunk.shape[0]
        self.draw_totals.append(chunk.sum(axis=1))
        # Online log-sum-exp.
        cmax = chunk.max(axis=0)
        new_max = np.maximum(self._max, cmax)
        with np.errstate(over="ignore"):
            self._sumexp = self._sumexp * np.exp(self._max - new_max) + np.exp(
                chunk - new_max
            ).sum(axis=0)
        self._max = new_max
        # Chan merge of (count, mean, M2).
        c_mean = chunk.mean(axis=0)
        c_m2 = ((chunk - c_mean) ** 2).sum(axis=0)
        delta = c_mean - self._mean
        total = self.n_draws + s
        self._m2 = self._m2 + c_m2 + delta**2 * (self.n_draws * s / total)
        self._mean = self._mean + delta * (s / total)
        self.n_draws = total

    def finalize(self) -> PointwiseCriteria:
        if self.n_draws < 2:
            raise CompareError("need at least 2 draws")
        lppd_j = self._max + np.log(self._sumexp) - np.log(self.n_draws)
        p_waic_j = np.maximum(self._m2 / (self.n_draws - 1), 0.0)
        contrib = -2.0 * (lppd_j - p_waic_j)
        return PointwiseCriteria(
            waic_contrib=contrib,
            lppd=float(lppd_j.sum()),
            p_waic=float(p_waic_j.sum()),
            waic=float(contrib.sum()),
        )

    def dic(self, loglik_at_mean: np.ndarray) -> tuple[float, float]:
        totals = np.concatenate(self.draw_totals)
        d_bar = -2.0 * float(totals.mean())
        d_hat = -2.0 * float(np.asarray(loglik_at_mean, dtype=float).sum())
        p_dic = d_bar - d_hat
        return d_bar + p_dic, p_dic


def compute_waic(pointwise_loglik: np.ndarray) -> PointwiseCriteria:
    """WAIC from an (S, n) matrix of per-draw log densities."""
    mat = np.asarray(pointwise_loglik, dtype=float)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise CompareError("pointwise_loglik must be (S >= 2, n)")
    acc = WaicAccumulator(mat.shape[1])
    acc.add(mat)
    out = acc.finalize()
    # Exact lppd via a single log-sum-exp pass (identical up to rounding).
    out.lppd = float(logsumexp(mat, axis=0).sum() - mat.shape[1] * np.log(mat.shape[0]))
    return out


def compute_dic(pointwise_loglik: np.ndarray, loglik_at_mean: np.ndarray) -> tuple[float, float]:
    """DIC and its effective parameter count.

    ``pointwise_loglik`` is (S, n); ``loglik_at_mean`` holds per-observation
    log densities at the posterior mean parameters.
    """
    mat = np.asarray(pointwise_loglik, dtype=float)
    at_mean = np.asarray(loglik_at_mean, dtype=float)
    if mat.ndim != 2 or at_mean.shape != (mat.shape[1],):
        raise CompareError("shape mismatch between draws and at-mean log densities")
    acc = WaicAccumulator(mat.shape[1])
    acc.add(mat)
    return acc.dic(at_mean)


def pairwise_waic_test(a: PointwiseCriteria, b: PointwiseCriteria) -> PairwiseWaicResult:
    """z-test on per-observation WAIC contribution differences.

    Requires both criteria to come from the same dataset in identical row
    order. A positive z favors model ``b`` (model ``a`` has the larger
    WAIC).
    """
    if a.n_obs != b.n_obs:
        raise CompareError(f"observation counts differ: {a.n_obs} vs {b.n_obs}")
    d = a.waic_contrib - b.waic_contrib
    n = d.size
    delta = float(d.sum())
    sd = float(d.std(ddof=1)) if n > 1 else 0.0
    se = sd / np.sqrt(n) if n > 0 else 0.0
    if sd == 0.0:
        z = 0.0
        p = 1.0 if delta == 0.0 else 0.0
    else:
        z = delta / (np.sqrt(n) * sd)
        p = float(2.0 * (1.0 - ndtr(abs(z))))
    return PairwiseWaicResult(delta=delta, se=se, z=float(z), p=p, n=n)
