"""Isotropic Gaussian mixtures with exact scores under the diffusion kernel.

A mixture diffused by the linear sub-VP kernel stays a mixture in closed
form: component k at time t has mean ``m(t) * mu_k`` and isotropic variance
``(m(t) * std_k)**2 + sigma(t)**2``.  That gives an exact ground-truth
density and score at every noise level, which anchors the acceptance tests
of the likelihood estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .sde import LOG_2PI, SubVpSde


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.asarray(self.stds, dtype=np.float64)
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.stds.shape != (k,):
            raise ValueError(
                f"component count mismatch: weights {self.weights.shape}, "
                f"means {self.means.shape}, stds {self.stds.shape}"
            )
        if np.any(self.weights < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {self.weights.sum()}, not 1")
        if np.any(self.stds <= 0):
            raise ValueError("component stds must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[ks] + self.stds[ks, None] * eps


def _diffused_components(gmm: GaussianMixture, t: float, sde: SubVpSde):
    m, sig = sde.kernel_moments(t)
    centers = m * gmm.means
    variances = (m * gmm.stds) ** 2 + sig**2
    return centers, variances


def gmm_logp0(x, gmm: GaussianMixture) -> float:
    """Exact mixture log-density at t=0, log-sum-exp stabilized."""
    return gmm_logp_t(x, 0.0, gmm, SubVpSde())


def gmm_logp_t(x, t: float, gmm: GaussianMixture, sde: SubVpSde) -> float:
    """Exact log-density of the mixture diffused to time t."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = gmm.dim
    centers, variances = _diffused_components(gmm, t, sde)
    sq = np.sum((x[None, :] - centers) ** 2, axis=1)
    logs = (
        np.log(gmm.weights)
        - 0.5 * sq / variances
        - 0.5 * d * (LOG_2PI + np.log(variances))
    )
    top = logs.max()
    return float(top + np.log(np.exp(logs - top).sum()))


def gmm_score_t(x, t: float, gmm: GaussianMixture, sde: SubVpSde):
    """Exact score of the diffused mixture at time t.

    Computed as responsibility-weighted component scores with the usual
    max-shift stabilization.  A taped Var input yields a taped Var output so
    attacks can differentiate through the score; a plain array comes back as
    an array.
    """
    taped = isinstance(x, ad.Var)
    xv = x if taped else ad.constant(np.asarray(x, dtype=np.float64).ravel())
    k = gmm.n_components
    d = gmm.dim
    centers, variances = _diffused_components(gmm, t, sde)
    log_norm = np.log(gmm.weights) - 0.5 * d * (LOG_2PI + np.log(variances))

    # All components at once: tile x to a (K, D) block and reduce rows.
    tiled = ad.outer(np.ones(k), xv)
    diffs = ad.sub(tiled, centers)
    sq = ad.vsum(ad.square(diffs))                        # (K,) row norms
    logs = ad.add(ad.mul(sq, -0.5 / variances), log_norm)

    # The shift is chosen by value only; subtracting a constant keeps the
    # softmax gradient exact.
    top = float(np.max(logs.value))
    exps = ad.exp(ad.sub(logs, top))
    resp = ad.div(exps, ad.expand(ad.vsum(exps), k))
    coef = ad.mul(resp, -1.0 / variances)
    score = ad.vecmat(coef, diffs)
    return score if taped else score.value


@dataclass
class AnalyticGmmScore:
    """Score model backed by the exact diffused-mixture score."""

    gmm: GaussianMixture
    sde: SubVpSde = field(default_factory=SubVpSde)
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.shape is None:
            self.shape = (self.gmm.dim,)
        if int(np.prod(self.shape)) != self.gmm.dim:
            raise ValueError(f"shape {self.shape} does not match dim {self.gmm.dim}")

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def score(self, x, t: float):
        return gmm_score_t(x, t, self.gmm, self.sde)

    def logp0(self, x) -> float:
        return gmm_logp_t(x, 0.0, self.gmm, self.sde)

    def logp_t(self, x, t: float) -> float:
        return gmm_logp_t(x, t, self.gmm, self.sde)


def standard_normal_model(dim: int, sde: SubVpSde | None = None) -> AnalyticGmmScore:
    """Single standard-normal component; handy exactness baseline."""
    gmm = GaussianMixture(
        weights=np.ones(1), means=np.zeros((1, dim)), stds=np.ones(1)
    )
    return AnalyticGmmScore(gmm, sde if sde is not None else SubVpSde())
