"""Closed-form predictions for single-pass cluster estimators on noise.

Each prediction expresses the large-M limit of the centroid estimates as
linear combinations of the templates: alpha[l][k] is the coefficient of
template k in the estimate of template l. The induced correlation matrix
alpha @ (scale**2 * rho) is directly comparable to what the Monte Carlo
engine measures.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ApproximationBreakdownError,
    DimensionError,
    DomainError,
)

FORMULA_IDS = frozenset({
    "HardPair",
    "SoftPairApprox",
    "SoftFiniteLApprox",
    "BetaZeroLimit",
    "GumbelScale",
})

_CONSISTENCY_ATOL = 1e-12


@dataclass(frozen=True)
class TheoryPrediction:
    """Predicted estimates in template-span coordinates.

    predicted_corr[l][k] = (alpha @ (scale**2 * rho))[l][k] is the
    predicted inner product of estimate l with template k.
    """

    formula_id: str
    alpha: np.ndarray
    rho: np.ndarray = field(repr=False)
    scale: float = 1.0
    validity_note: str = ""
    predicted_corr: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.formula_id not in FORMULA_IDS:
            raise DomainError(f"unknown formula id {self.formula_id!r}")
        alpha = np.asarray(self.alpha, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
            raise DimensionError("alpha must be a square matrix")
        if rho.shape != alpha.shape:
            raise DimensionError("rho must match alpha in shape")
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise DomainError("scale must be a positive finite real")
        corr = alpha @ ((self.scale ** 2) * rho)
        if self.predicted_corr is not None:
            given = np.asarray(self.predicted_corr, dtype=np.float64)
            if np.max(np.abs(given - corr)) > _CONSISTENCY_ATOL:
                raise DomainError(
                    "predicted_corr is inconsistent with alpha and the Gram")
        for name, arr in (("alpha", alpha), ("rho", rho),
                          ("predicted_corr", corr)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def L(self):
        return self.alpha.shape[0]


def _correlation_of(obj):
    """Accept a TemplateSet, GramModel, or plain matrix; return (rho, scale)."""
    corr = getattr(obj, "correlation", None)
    if callable(corr):
        return corr(), obj.common_norm
    rho = getattr(obj, "rho", None)
    if rho is not None:
        return np.asarray(rho, dtype=np.float64), float(obj.scale)
    rho = np.asarray(obj, dtype=np.float64)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError("expected a template set, Gram model, "
                             "or square correlation matrix")
    return rho, 1.0


def _pair_rho(rho):
    return np.array([[1.0, rho], [rho, 1.0]])


_PAIR_SHAPE = np.array([[1.0, -1.0], [-1.0, 1.0]])


def hard_pair_prediction(rho, norm=1.0):
    """Limit of the argmax-average estimates for a correlated pair.

    Both estimates converge to +-c (x0 - x1) with
    c = sqrt(1 / (pi (1 - rho) norm**2)), so the self inner product is
    norm * sqrt((1 - rho) / pi).
    """
    if not (-1.0 <= rho < 1.0):
        raise DomainError(f"need -1 <= rho < 1 for a hard pair, got {rho!r}")
    if not (norm > 0.0 and math.isfinite(norm)):
        raise DomainError("norm must be a positive finite real")
    c = math.sqrt(1.0 / (math.pi * (1.0 - rho) * norm * norm))
    return TheoryPrediction(
        formula_id="HardPair",
        alpha=c * _PAIR_SHAPE,
        rho=_pair_rho(rho),
        scale=norm,
        validity_note="exact M -> infinity limit for two templates",
    )


def soft_pair_prediction(rho, norm=1.0):
    """Smoothed-assignment analogue of the hard pair limit at beta = 1.

    Based on the logistic-to-erf surrogate, so the value is approximate;
    its error grows with (1 - rho) * norm**2, and the small-norm limit of
    alpha is [[1/2, -1/2], [-1/2, 1/2]].
    """
    if not (-1.0 <= rho < 1.0):
        raise DomainError(f"need -1 <= rho < 1 for a soft pair, got {rho!r}")
    if not (norm > 0.0 and math.isfinite(norm)):
        raise DomainError("norm must be a positive finite real")
    gap = (1.0 - rho) * norm * norm
    a = 0.5 / math.sqrt(1.0 + 0.25 * math.pi * gap)
    return TheoryPrediction(
        formula_id="SoftPairApprox",
        alpha=a * _PAIR_SHAPE,
        rho=_pair_rho(rho),
        scale=norm,
        validity_note="logistic approximated by erf; error grows with "
                      "(1 - rho) * norm**2",
    )


def soft_finite_prediction(g):
    """First-order finite-L expansion of the beta = 1 soft estimates.

    Estimate l is predicted as
    x_l - (1/C_l) sum_r exp(<x_l, x_r>) x_r, with
    C_l = L - sum_r exp(<x_l, x_r>) + (1/L) sum_{r1,r2} exp(<x_r1, x_r2>)
    and inner products taken unnormalized (scale**2 * rho). Valid only
    while every C_l stays positive; accuracy degrades as the exponents
    grow, so the validity note must travel with the numbers.
    """
    rho, scale = _correlation_of(g)
    L = rho.shape[0]
    ex = np.exp((scale * scale) * rho)
    total = float(ex.sum())
    c = L - ex.sum(axis=1) + total / L
    bad = np.nonzero(c <= 0.0)[0]
    if bad.size:
        raise ApproximationBreakdownError(
            f"normalizer C_{bad[0]} = {c[bad[0]]:.6g} is not positive; "
            f"the expansion has left its validity region")
    alpha = -ex / c[:, None]
    alpha[np.diag_indices(L)] += 1.0
    return TheoryPrediction(
        formula_id="SoftFiniteLApprox",
        alpha=alpha,
        rho=rho,
        scale=scale,
        validity_note=f"first-order expansion, normalizers C in "
                      f"[{c.min():.6g}, {c.max():.6g}]; trust only while "
                      f"exp(scale**2 * rho) stays moderate",
    )


def beta_zero_limit(set_or_gram):
    """Slope of the soft estimates at vanishing inverse temperature.

    As beta -> 0, estimate l divided by beta converges to
    x_l - (1/L) sum_r x_r, so alpha = I - (1/L) ones.
    """
    rho, scale = _correlation_of(set_or_gram)
    L = rho.shape[0]
    alpha = np.eye(L) - np.full((L, L), 1.0 / L)
    return TheoryPrediction(
        formula_id="BetaZeroLimit",
        alpha=alpha,
        rho=rho,
        scale=scale,
        validity_note="leading order in beta; compare corr / beta against it",
    )


def gumbel_prediction(L, norm=1.0):
    """Leading-order growth of the self inner products for many templates.

    For (near) orthogonal sets each argmax-average estimate aligns with
    its own template at magnitude sqrt(2 log L) to leading order.
    """
    if L < 2:
        raise DomainError("need at least two templates")
    if not (norm > 0.0 and math.isfinite(norm)):
        raise DomainError("norm must be a positive finite real")
    a_l = math.sqrt(2.0 * math.log(L))
    return TheoryPrediction(
        formula_id="GumbelScale",
        alpha=(a_l / norm) * np.eye(L),
        rho=np.eye(L),
        scale=norm,
        validity_note="leading order only; the second-order constant b_L "
                      "converges very slowly",
    )


def gumbel_constants(n):
    """Centering and scaling constants for the max of n iid standard normals.

    Returns (a_n, b_n, asymptotic_scale) with a_n = sqrt(2 log n),
    b_n = a_n - (log log n + log 4 pi) / (2 a_n), and asymptotic_scale
    equal to a_n, the leading growth rate of the maximum.
    """
    if n < 2:
        raise DomainError("need n >= 2 for the extreme value constants")
    a_n = math.sqrt(2.0 * math.log(n))
    b_n = a_n - (math.log(math.log(n)) + math.log(4.0 * math.pi)) / (2.0 * a_n)
    return a_n, b_n, a_n


def max_two_gaussians_mean(rho):
    """E[max(Z0, Z1)] for standard normals at correlation rho.

    The max is (Z0 + Z1)/2 + |Z0 - Z1|/2; the absolute difference is a
    folded normal, which gives sqrt((1 - rho) / pi) exactly.
    """
    if not (-1.0 <= rho <= 1.0):
        raise DomainError(f"correlation must lie in [-1, 1], got {rho!r}")
    return math.sqrt((1.0 - rho) / math.pi)
