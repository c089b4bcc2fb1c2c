"""Gamma-threshold adapter turning regression monitors into binary classes.

Validation errors (or per-layer negative log densities) are fitted with a
Gamma distribution by maximum likelihood; values beyond the epsilon tail
quantile are labeled anomalous. The resulting {normal, anomalous} classes run
through the ordinary two-class selection and checking pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import polygamma, psi

_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 200


@dataclass(frozen=True)
class GammaParams:
    shape: float  # k
    scale: float  # theta
    loc: float = 0.0
    epsilon: float = 0.05

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError("shape and scale must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    def quantile(self, q: float) -> float:
        return float(stats.gamma.ppf(q, a=self.shape, loc=self.loc, scale=self.scale))

    def cdf(self, x: float) -> float:
        return float(stats.gamma.cdf(x, a=self.shape, loc=self.loc, scale=self.scale))


def fit_gamma(errors, epsilon: float = 0.05) -> GammaParams:
    """Maximum-likelihood Gamma fit (loc fixed at 0) via Newton on the
    digamma equation log(k) - psi(k) = log(mean) - mean(log)."""
    x = np.asarray(errors, dtype=np.float64)
    if x.ndim != 1 or len(x) < 10:
        raise ValueError("need a 1-D vector with at least 10 values")
    if x.min() <= 0.0:
        raise ValueError("all values must be strictly positive")
    if np.all(x == x[0]):
        raise ValueError("degenerate input: all values equal")

    s = float(np.log(x.mean()) - np.log(x).mean())
    if s <= 0.0:
        raise ValueError("degenerate input: zero log-spread")
    # Minka's closed-form start, then Newton.
    k = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(_NEWTON_MAX_ITER):
        f = np.log(k) - psi(k) - s
        fprime = 1.0 / k - polygamma(1, k)
        step = f / fprime
        k_next = k - step
        if k_next <= 0.0:
            k_next = k / 2.0
        if abs(k_next - k) <= _NEWTON_TOL * max(1.0, k):
            k = k_next
            break
        k = k_next
    theta = float(x.mean()) / k
    return GammaParams(shape=float(k), scale=theta, loc=0.0, epsilon=epsilon)


def binarize(values, params: GammaParams, direction: str = "above") -> np.ndarray:
    """Anomaly flags per value against the epsilon tail quantile.

    ``above``: anomalous iff value > upper-epsilon quantile (rare large values);
    ``below``: anomalous iff value < lower-epsilon quantile. A value exactly at
    the quantile is not anomalous.
    """
    x = np.asarray(values, dtype=np.float64)
    if direction == "above":
        return x > params.quantile(1.0 - params.epsilon)
    if direction == "below":
        return x < params.quantile(params.epsilon)
    raise ValueError(f"unknown direction {direction!r}")


def fit_layer_gammas(scores: np.ndarray, epsilon: float = 0.05) -> list[GammaParams]:
    """One Gamma fit per column of an (n, L) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    return [fit_gamma(scores[:, l], epsilon) for l in range(scores.shape[1])]


def binarize_layers(
    scores: np.ndarray, params: list[GammaParams], direction: str = "above"
) -> np.ndarray:
    """Per-layer anomaly classes (n, L): 1 = anomalous, 0 = normal.

    The output slots straight into the selection pipeline as a two-class
    inferred-class matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[1] != len(params):
        raise ValueError(
            f"{scores.shape[1]} layers but {len(params)} fitted distributions"
        )
    out = np.zeros(scores.shape, dtype=np.int64)
    for l, p in enumerate(params):
        out[:, l] = binarize(scores[:, l], p, direction)
    return out
