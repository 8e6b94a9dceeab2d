"""Shared numeric types, score scaling, patching, and adaptive loss weights.

All operations here are pure functions over immutable inputs; nothing holds
shared mutable state, so concurrent use across windows is safe.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateRange, NonFiniteInput, ShapeMismatch, WindowTooShort


class ScoreKind(Enum):
    RAW_TSADM = "raw_tsadm"
    SCALED_TSADM = "scaled_tsadm"
    ALIGNED_TSADM = "aligned_tsadm"
    LLM = "llm"
    COLLATED = "collated"


_UNIT_INTERVAL_KINDS = frozenset(
    {ScoreKind.ALIGNED_TSADM, ScoreKind.LLM, ScoreKind.COLLATED}
)


@dataclass(frozen=True)
class TimeSeriesWindow:
    """A T x D slice of a multivariate series, the unit every scorer consumes.

    ``start_index`` is the absolute slot offset of the first row, used to key
    per-window artifacts (LLM fixtures, detection output) back to the series.
    """

    values: np.ndarray
    start_index: int = 0
    labels: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeMismatch("window values must be a T x D matrix with T, D >= 1")
        if not np.isfinite(values).all():
            raise NonFiniteInput("window values must be finite")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ShapeMismatch("labels length must equal window length")
            if not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be binary")
            object.__setattr__(self, "labels", labels)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def window_id(self) -> str:
        return f"w{self.start_index}"


@dataclass(frozen=True)
class ScoreSeries:
    """Per-slot anomaly scores with a provenance kind."""

    scores: np.ndarray
    kind: ScoreKind

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if scores.size < 1:
            raise ValueError("score series must be nonempty")
        if not np.isfinite(scores).all():
            raise NonFiniteInput("scores must be finite")
        if self.kind in _UNIT_INTERVAL_KINDS:
            if scores.min() < 0.0 or scores.max() > 1.0:
                raise ValueError(f"{self.kind.value} scores must lie in [0, 1]")
        elif self.kind is ScoreKind.RAW_TSADM and scores.min() < 0.0:
            raise ValueError("raw detector scores must be nonnegative")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class NormalizationConfig:
    """Root exponent for range scaling: scores are divided by range**(1/d)."""

    d: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.d) or self.d <= 0.0:
            raise ValueError("d must be finite and positive")


@dataclass(frozen=True)
class PatchWeights:
    """Per-slot intra/inter patch distances and the adaptive weights they induce.

    Invariant: lambda1 + lambda2 == 1 exactly for every slot (lambda2 is
    computed as the complement, never independently).
    """

    d_intra: np.ndarray
    d_inter: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        for name in ("d_intra", "d_inter", "lambda1", "lambda2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        n = self.d_intra.size
        if any(getattr(self, f).size != n for f in ("d_inter", "lambda1", "lambda2")):
            raise ShapeMismatch("patch weight fields must share one length")
        if (self.d_intra < 0).any() or (self.d_inter < 0).any():
            raise ValueError("distances must be nonnegative")
        if np.abs(self.lambda1 + self.lambda2 - 1.0).max() > 1e-12:
            raise ValueError("lambda1 + lambda2 must equal 1")

    def __len__(self) -> int:
        return self.d_intra.size

    @staticmethod
    def fixed(n: int, lambda1: float = 1.0, lambda2: float = 1.0) -> "FixedWeights":
        """Constant weights, bypassing the sum-to-one invariant (ablation use)."""
        return FixedWeights(
            d_intra=np.zeros(n),
            d_inter=np.zeros(n),
            lambda1=np.full(n, float(lambda1)),
            lambda2=np.full(n, float(lambda2)),
        )


@dataclass(frozen=True)
class FixedWeights(PatchWeights):
    """PatchWeights with the sum-to-one check relaxed (both weights may be 1)."""

    def __post_init__(self):
        for name in ("d_intra", "d_inter", "lambda1", "lambda2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)


def normalize_scores(raw: ScoreSeries, cfg: NormalizationConfig) -> ScoreSeries:
    """Scale raw detector scores by range**(1/d).

    The output is deliberately not clamped to [0, 1]; the learned monotone
    mapping downstream re-bounds scores, and clamping here would distort the
    distribution that mapping must reshape.

    Raises DegenerateRange when all raw scores are equal (a constant scorer
    cannot be aligned and the caller must not proceed).
    """
    if raw.kind is not ScoreKind.RAW_TSADM:
        raise ValueError(f"expected raw detector scores, got {raw.kind.value}")
    lo = float(raw.scores.min())
    hi = float(raw.scores.max())
    if hi == lo:
        raise DegenerateRange(f"score range is zero (all values {lo})")
    divisor = (hi - lo) ** (1.0 / cfg.d)
    return ScoreSeries(raw.scores / divisor, ScoreKind.SCALED_TSADM)


def score_range_divisor(raw: np.ndarray, cfg: NormalizationConfig) -> float:
    """The divisor normalize_scores would apply; frozen into pipelines."""
    lo, hi = float(np.min(raw)), float(np.max(raw))
    if hi == lo:
        raise DegenerateRange(f"score range is zero (all values {lo})")
    return (hi - lo) ** (1.0 / cfg.d)


def _patch_slices(n_slots: int, patch_size: int) -> list[slice]:
    """Partition [0, n_slots) into patches; a ragged tail of fewer than two
    slots is merged backward so every slot receives weights."""
    starts = list(range(0, n_slots, patch_size))
    slices = [slice(s, min(s + patch_size, n_slots)) for s in starts]
    if len(slices) > 1 and (slices[-1].stop - slices[-1].start) < 2:
        tail = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, tail.stop))
    return slices


def patch_weights(window: TimeSeriesWindow, patch_size: int) -> PatchWeights:
    """Adaptive per-slot weights from intra-patch and inter-patch distances.

    For slot t: d_intra is the mean Euclidean distance between slot t's vector
    and every other slot in its patch; d_inter is the mean Euclidean distance
    between the centroid of t's patch and the centroids of all other patches.
    lambda1 = d_intra / (d_intra + d_inter) when the denominator is positive,
    else 0.5 (constant windows carry no kind information, so both models are
    weighted equally).
    """
    if patch_size < 2:
        raise ValueError("patch_size must be at least 2")
    n = window.length
    if n < patch_size:
        raise WindowTooShort(f"window has {n} slots, need at least {patch_size}")
    x = window.values
    slices = _patch_slices(n, patch_size)
    centroids = np.stack([x[sl].mean(axis=0) for sl in slices])

    d_intra = np.zeros(n)
    d_inter = np.zeros(n)
    n_patches = len(slices)
    if n_patches > 1:
        # pairwise centroid distances, mean over the other patches per patch
        diff = centroids[:, None, :] - centroids[None, :, :]
        cdist = np.sqrt((diff**2).sum(axis=-1))
        inter_per_patch = cdist.sum(axis=1) / (n_patches - 1)
    else:
        inter_per_patch = np.zeros(1)

    for p, sl in enumerate(slices):
        block = x[sl]
        m = block.shape[0]
        diff = block[:, None, :] - block[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        d_intra[sl] = dist.sum(axis=1) / (m - 1)
        d_inter[sl] = inter_per_patch[p]

    denom = d_intra + d_inter
    lambda1 = np.where(denom > 0, np.divide(d_intra, np.where(denom > 0, denom, 1.0)), 0.5)
    lambda2 = 1.0 - lambda1
    return PatchWeights(d_intra=d_intra, d_inter=d_inter, lambda1=lambda1, lambda2=lambda2)
