"""Score-distribution alignment.

Fits a half-Gaussian to the LLM's score histogram, then trains a strictly
monotone scalar map that pulls the detector's scaled scores onto that target
distribution. Monotonicity matters: alignment recalibrates severity without
reordering the detector's anomaly ranking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ScoreKind, ScoreSeries
from .errors import DegenerateScores, NonConvergence, NonFiniteDensity

_SQRT2 = math.sqrt(2.0)
_TWO_OVER_PI = 2.0 / math.pi


@dataclass(frozen=True)
class HalfGaussianFit:
    """Scale of the half-Gaussian target; moments are derived, never stored."""

    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ValueError("sigma must be finite and positive")

    @property
    def mu_hat(self) -> float:
        return self.sigma * math.sqrt(_TWO_OVER_PI)

    @property
    def sigma_hat_sq(self) -> float:
        return self.sigma**2 * (1.0 - _TWO_OVER_PI)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.where(x <= 0.0, 0.0, np.vectorize(math.erf)(x / (self.sigma * _SQRT2)))


@dataclass(frozen=True)
class AlignmentConfig:
    lambda_hat_1: float = 1.0
    lambda_hat_2: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 400
    seed: int = 0
    hidden: int = 8

    def __post_init__(self):
        if self.lambda_hat_1 < 0 or self.lambda_hat_2 < 0:
            raise ValueError("penalty weights must be nonnegative")


def fit_half_gaussian(scores) -> HalfGaussianFit:
    """Estimate the half-Gaussian scale from nonnegative scores.

    The scores are mirrored across zero and merged with the originals; the
    population standard deviation of that symmetric set is sqrt(mean(s^2)).
    """
    s = scores.scores if isinstance(scores, ScoreSeries) else np.asarray(scores, float)
    s = s.reshape(-1)
    if s.size == 0:
        raise ValueError("scores must be nonempty")
    if (s < 0).any():
        raise ValueError("scores must be nonnegative")
    second_moment = float(np.mean(s**2))
    if second_moment == 0.0:
        raise DegenerateScores("all scores are zero; half-Gaussian scale undefined")
    return HalfGaussianFit(sigma=math.sqrt(second_moment))


def half_gaussian_density(fit: HalfGaussianFit, x, printed_exponent: bool = False):
    """Density of the half-Gaussian target; zero below the origin.

    ``printed_exponent`` switches the exponent denominator from 2*sigma^2 to
    2*sigma, kept only so equivalence experiments can compare the two
    conventions; the variance form is the one used everywhere else.
    """
    x = np.asarray(x, dtype=np.float64)
    denom = 2.0 * fit.sigma if printed_exponent else 2.0 * fit.sigma**2
    dens = (2.0 / (fit.sigma * math.sqrt(2.0 * math.pi))) * np.exp(-(x**2) / denom)
    out = np.where(x < 0.0, 0.0, dens)
    return float(out) if out.ndim == 0 else out


def alignment_loss(mapped: np.ndarray, fit: HalfGaussianFit, cfg: AlignmentConfig) -> float:
    """Negative mean log-density of the mapped scores under the target, plus
    squared penalties steering the batch mean and (n-1)-variance onto the
    target moments."""
    loss, _ = alignment_loss_grad(mapped, fit, cfg)
    return loss


def alignment_loss_grad(
    mapped: np.ndarray, fit: HalfGaussianFit, cfg: AlignmentConfig
) -> tuple[float, np.ndarray]:
    """Alignment loss and its gradient with respect to the mapped scores."""
    m = np.asarray(mapped, dtype=np.float64).reshape(-1)
    n = m.size
    if n < 2:
        raise ValueError("need at least two mapped scores")
    dens = half_gaussian_density(fit, m)
    if (dens <= 0.0).any():
        raise NonFiniteDensity("mapped score fell where the target density is zero")
    mean = float(m.mean())
    var = float(m.var(ddof=1))
    loss = (
        -float(np.mean(np.log(dens)))
        + cfg.lambda_hat_1 * (mean - fit.mu_hat) ** 2
        + cfg.lambda_hat_2 * (var - fit.sigma_hat_sq) ** 2
    )
    # -log density has derivative m / sigma^2; the centered-variance term's
    # mean-dependence cancels because sum(m - mean) = 0.
    grad = m / (fit.sigma**2 * n)
    grad += cfg.lambda_hat_1 * 2.0 * (mean - fit.mu_hat) / n
    grad += cfg.lambda_hat_2 * 2.0 * (var - fit.sigma_hat_sq) * 2.0 * (m - mean) / (n - 1)
    return float(loss), grad


def bin_mass(fit: HalfGaussianFit, lo: float, hi: float) -> float:
    """Target probability mass on [lo, hi]."""
    return float(fit.cdf(hi) - fit.cdf(lo))


def discrete_alignment_objective(
    mapped: np.ndarray, fit: HalfGaussianFit, n_bins: int, cfg: AlignmentConfig
) -> float:
    """Histogram form of the alignment objective over n_bins bins of [0, 1].

    The cross-entropy term weights each occupied bin by its count and scores
    it by the log of the bin-averaged target density (bin mass divided by bin
    width); empty bins contribute nothing. With one bin this reduces to the
    log of the total mass on [0, 1]. Serves as the discretization oracle for
    the differentiable loss and is never used in training.
    """
    m = np.asarray(mapped, dtype=np.float64).reshape(-1)
    n = m.size
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if (m < 0).any() or (m > 1).any():
        raise ValueError("mapped scores must lie in [0, 1] for the binned objective")
    idx = np.minimum((m * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    ce = 0.0
    for i in np.nonzero(counts)[0]:
        mass = bin_mass(fit, i / n_bins, (i + 1) / n_bins)
        if mass <= 0.0:
            raise NonFiniteDensity(f"bin {i} has zero target mass")
        ce -= counts[i] / n * math.log(mass * n_bins)
    mean = float(m.mean())
    var = float(m.var(ddof=1)) if n > 1 else 0.0
    return (
        ce
        + cfg.lambda_hat_1 * (mean - fit.mu_hat) ** 2
        + cfg.lambda_hat_2 * (var - fit.sigma_hat_sq) ** 2
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MonotoneMapping:
    """Strictly non-decreasing scalar network with output in (0, 1).

    M(s) = sigmoid(sum_k softplus(a2_k) * tanh(softplus(a1_k) * s + b1_k) + b2).
    Every factor in dM/ds is positive, so monotonicity holds for all reachable
    parameters, not just trained ones.
    """

    def __init__(self, hidden: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.a1 = rng.normal(0.0, 1.0, hidden)
        self.b1 = rng.normal(0.0, 1.0, hidden)
        self.a2 = rng.normal(-1.0, 0.5, hidden)
        self.b2 = 0.0
        self.loss_curve: list[float] = []

    @property
    def hidden(self) -> int:
        return self.a1.size

    def params(self) -> dict[str, np.ndarray]:
        return {"a1": self.a1, "b1": self.b1, "a2": self.a2, "b2": self.b2}

    def __call__(self, s) -> np.ndarray:
        return self.forward(np.asarray(s, dtype=np.float64))[0]

    def forward(self, s: np.ndarray):
        s = np.asarray(s, dtype=np.float64)
        w1 = _softplus(self.a1)
        w2 = _softplus(self.a2)
        pre = np.multiply.outer(s, w1) + self.b1
        h = np.tanh(pre)
        z = h @ w2 + self.b2
        m = _sigmoid(z)
        cache = (s, w1, w2, pre, h, z, m)
        return m, cache

    def backward(self, dm: np.ndarray, cache) -> tuple[dict, np.ndarray]:
        """Gradients of a scalar objective wrt parameters and the input."""
        s, w1, w2, pre, h, z, m = cache
        dz = dm * m * (1.0 - m)
        dh = np.multiply.outer(dz, w2)
        dw2 = dz @ h if h.ndim > 1 else dz * h
        dpre = dh * (1.0 - h**2)
        dw1 = (dpre * np.asarray(s)[..., None]).sum(axis=tuple(range(dpre.ndim - 1)))
        db1 = dpre.sum(axis=tuple(range(dpre.ndim - 1)))
        ds = dpre @ w1
        grads = {
            "a1": dw1 * _sigmoid(self.a1),
            "b1": db1,
            "a2": dw2 * _sigmoid(self.a2),
            "b2": float(np.sum(dz)),
        }
        return grads, ds

    def to_dict(self) -> dict:
        return {
            "hidden": int(self.hidden),
            "a1": self.a1.tolist(),
            "b1": self.b1.tolist(),
            "a2": self.a2.tolist(),
            "b2": float(self.b2),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneMapping":
        obj = cls.__new__(cls)
        obj.a1 = np.asarray(d["a1"], dtype=np.float64)
        obj.b1 = np.asarray(d["b1"], dtype=np.float64)
        obj.a2 = np.asarray(d["a2"], dtype=np.float64)
        obj.b2 = float(d["b2"])
        obj.loss_curve = []
        return obj


def train_mapping(
    scaled: ScoreSeries | np.ndarray, fit: HalfGaussianFit, cfg: AlignmentConfig
) -> MonotoneMapping:
    """Full-batch gradient descent of the alignment loss over the mapping.

    Deterministic under cfg.seed; the per-epoch loss curve is recorded on the
    returned mapping.
    """
    s = scaled.scores if isinstance(scaled, ScoreSeries) else np.asarray(scaled, float)
    s = s.reshape(-1)
    if s.size < 2:
        raise ValueError("need at least two scores to train the mapping")
    mapping = MonotoneMapping(hidden=cfg.hidden, seed=cfg.seed)
    for _ in range(cfg.epochs):
        mapped, cache = mapping.forward(s)
        loss, dmapped = alignment_loss_grad(mapped, fit, cfg)
        if not np.isfinite(loss):
            raise NonConvergence("alignment loss became non-finite")
        mapping.loss_curve.append(loss)
        grads, _ = mapping.backward(dmapped, cache)
        mapping.a1 -= cfg.learning_rate * grads["a1"]
        mapping.b1 -= cfg.learning_rate * grads["b1"]
        mapping.a2 -= cfg.learning_rate * grads["a2"]
        mapping.b2 -= cfg.learning_rate * grads["b2"]
    return mapping


def kl_histogram(a: np.ndarray, reference, bins: int, eps: float = 1e-9) -> float:
    """KL divergence from the bin histogram of ``a`` to a reference.

    The reference is either a HalfGaussianFit (bin masses from its CDF) or a
    second sample vector (binned over the same edges). Both sides receive
    additive smoothing ``eps`` and are renormalized, so the result is finite
    and nonnegative even with empty bins.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if bins < 2:
        raise ValueError("need at least two bins")
    if a.size == 0:
        raise ValueError("empty sample")
    hi = max(1.0, float(a.max()))
    lo = min(0.0, float(a.min()))
    if isinstance(reference, HalfGaussianFit):
        edges = np.linspace(lo, hi, bins + 1)
        q = np.diff(reference.cdf(edges))
    else:
        b = np.asarray(reference, dtype=np.float64).reshape(-1)
        hi = max(hi, float(b.max()))
        lo = min(lo, float(b.min()))
        edges = np.linspace(lo, hi, bins + 1)
        q = np.histogram(b, bins=edges)[0] / b.size
    p = np.histogram(a, bins=edges)[0] / a.size
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(np.sum(p * np.log(p / q)))
