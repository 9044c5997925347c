"""Task losses and the two players' objectives.

The encoder-side player (enc, pred, dec) minimizes

    j_m1 = alpha * l_pred + beta * l_dec - gamma * (l_dis1 + l_dis2)

while the disentanglers minimize their own error ``j_m2 = l_dis1 + l_dis2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0
    beta: float = 0.1
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")
        if self.alpha == self.beta == self.gamma == 0:
            raise ConfigError("at least one loss weight must be positive")

    @property
    def eta(self) -> float:
        """Prediction-to-reconstruction ratio alpha / beta (inf when beta = 0)."""
        if self.beta == 0:
            return math.inf
        return self.alpha / self.beta

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.alpha * c, self.beta * c, self.gamma * c)


@dataclass(frozen=True)
class LossBreakdown:
    l_pred: float
    l_dec: float
    l_dis1: float
    l_dis2: float
    j_m1: float
    j_m2: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def as_dict(self) -> dict:
        return asdict(self)


def l_pred(probs: Tensor, y) -> Tensor:
    """Mean categorical cross-entropy of probability rows against labels."""
    y = np.asarray(y)
    n, c = probs.shape
    if y.shape != (n,):
        raise DimensionError(f"l_pred: {n} rows but labels of shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DataError(f"l_pred: labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    rows = np.arange(n)
    picked = probs.data[rows, y]
    clamped = np.maximum(picked, probs.dtype.type(LOG_CLAMP))
    value = (-np.log(clamped).sum(dtype=probs.dtype) / probs.dtype.type(n)).reshape(1)

    def bw(g):
        grad = np.zeros_like(probs.data)
        live = picked > LOG_CLAMP
        grad[rows[live], y[live]] = -g[0] / (n * picked[live])
        return (grad,)

    return ad.make_node(value, (probs,), bw, "nll")


def l_dec(x_hat: Tensor, x) -> Tensor:
    """Mean squared reconstruction error."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=x_hat.dtype))
    return ad.mse(x_hat, x)


def l_dis(e2_hat: Tensor, e2: Tensor, e1_hat: Tensor, e1: Tensor) -> tuple[Tensor, Tensor]:
    """(MSE(Dis1(e1), e2), MSE(Dis2(e2), e1))."""
    return ad.mse(e2_hat, e2), ad.mse(e1_hat, e1)


def objective_tensors(lp, ld, ld1, ld2, weights: LossWeights):
    """Differentiable (j_m1, j_m2). Any term may be None when absent."""
    terms = []
    if lp is not None and weights.alpha:
        terms.append(lp * weights.alpha)
    if ld is not None and weights.beta:
        terms.append(ld * weights.beta)
    j_m2 = None
    if ld1 is not None and ld2 is not None:
        j_m2 = ld1 + ld2
        if weights.gamma:
            terms.append(j_m2 * (-weights.gamma))
    if not terms:
        raise ConfigError("objective has no active terms")
    j_m1 = terms[0]
    for t in terms[1:]:
        j_m1 = j_m1 + t
    return j_m1, j_m2


def composite_objectives(l_pred_v, l_dec_v, l_dis1_v, l_dis2_v, weights: LossWeights) -> LossBreakdown:
    """Scalar breakdown for given component losses (floats or 1-element tensors)."""
    lp, ld, d1, d2 = (_scalar(v) for v in (l_pred_v, l_dec_v, l_dis1_v, l_dis2_v))
    j_m2 = d1 + d2
    j_m1 = weights.alpha * lp + weights.beta * ld - weights.gamma * j_m2
    return LossBreakdown(lp, ld, d1, d2, j_m1, j_m2)


def _scalar(v) -> float:
    if v is None:
        return 0.0
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
