"""Conditional fusion network, collaborative loss, training, and inference.

The fusion network reads (LLM score, aligned detector score, detector
representation) per slot and emits a collated score in (0, 1). Training is
two-phase: the detector is trained first and frozen, then the monotone
mapping and the fusion network are optimized jointly on the alignment loss
plus a pairwise loss chosen by the ablation variant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import alignment as align_mod
from .alignment import AlignmentConfig, HalfGaussianFit, MonotoneMapping
from .core import (
    NormalizationConfig,
    PatchWeights,
    ScoreKind,
    ScoreSeries,
    TimeSeriesWindow,
    patch_weights,
    score_range_divisor,
)
from .errors import (
    LengthMismatch,
    MissingLlmScores,
    NonConvergence,
    ShapeMismatch,
)
from .optim import Adam

_LEAKY_SLOPE = 0.01


class LossVariant(Enum):
    COLLABORATIVE = "collaborative"
    MSE_VARIANT = "mse"
    FIXED_WEIGHTS = "fixed_weights"
    NO_ALIGNMENT = "no_alignment"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


class ConditionalNetParams:
    """Two-layer perceptron: leaky-rectified hidden layer, sigmoid output.

    Input is the per-slot concatenation (llm, aligned, representation), so the
    first weight matrix has 2 + h rows for representation width h. Inputs are
    standardized by stored per-channel statistics before the first layer; this
    is an affine reparameterization of (w1, b1) that keeps the network
    trainable when the alignment stage compresses its input's scale.
    """

    def __init__(self, rep_dim: int, hidden: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        d_in = 2 + rep_dim
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, 0.5 / np.sqrt(hidden), hidden)
        self.b2 = 0.0
        self.in_mean = np.zeros(d_in)
        self.in_std = np.ones(d_in)

    @property
    def rep_dim(self) -> int:
        return self.w1.shape[0] - 2

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.in_mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.in_std = np.maximum(np.asarray(std, dtype=np.float64).reshape(-1), 1e-12)

    def _stack(self, llm: np.ndarray, aligned: np.ndarray, rep: np.ndarray) -> np.ndarray:
        llm = np.asarray(llm, dtype=np.float64).reshape(-1)
        aligned = np.asarray(aligned, dtype=np.float64).reshape(-1)
        rep = np.asarray(rep, dtype=np.float64)
        if rep.ndim == 1:
            rep = rep.reshape(1, -1) if llm.size == 1 else rep.reshape(-1, 1)
        if not (llm.size == aligned.size == rep.shape[0]):
            raise ShapeMismatch("per-slot inputs must share one length")
        if rep.shape[1] != self.rep_dim:
            raise ShapeMismatch(
                f"representation width {rep.shape[1]} != expected {self.rep_dim}"
            )
        return np.concatenate([llm[:, None], aligned[:, None], rep], axis=1)

    def forward(self, llm: np.ndarray, aligned: np.ndarray, rep: np.ndarray):
        raw = self._stack(llm, aligned, rep)
        z = (raw - self.in_mean) / self.in_std
        pre = z @ self.w1 + self.b1
        h = np.where(pre > 0, pre, _LEAKY_SLOPE * pre)
        logits = h @ self.w2 + self.b2
        out = _sigmoid(logits)
        cache = (z, pre, h, logits, out)
        return out, cache

    def backward(self, dout: np.ndarray, cache):
        """Gradients wrt parameters and the (llm, aligned, rep) inputs."""
        z, pre, h, logits, out = cache
        dlogits = dout * out * (1.0 - out)
        dw2 = h.T @ dlogits
        db2 = float(dlogits.sum())
        dh = np.outer(dlogits, self.w2)
        dpre = dh * np.where(pre > 0, 1.0, _LEAKY_SLOPE)
        dw1 = z.T @ dpre
        db1 = dpre.sum(axis=0)
        draw = (dpre @ self.w1.T) / self.in_std
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return grads, draw[:, 0], draw[:, 1], draw[:, 2:]

    def step(self, grads: dict, lr: float):
        self.w1 -= lr * grads["w1"]
        self.b1 -= lr * grads["b1"]
        self.w2 -= lr * grads["w2"]
        self.b2 -= lr * grads["b2"]

    def to_dict(self) -> dict:
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": float(self.b2),
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalNetParams":
        obj = cls.__new__(cls)
        obj.w1 = np.asarray(d["w1"], dtype=np.float64)
        obj.b1 = np.asarray(d["b1"], dtype=np.float64)
        obj.w2 = np.asarray(d["w2"], dtype=np.float64)
        obj.b2 = float(d["b2"])
        obj.in_mean = np.asarray(d["in_mean"], dtype=np.float64)
        obj.in_std = np.asarray(d["in_std"], dtype=np.float64)
        return obj


def conditional_forward(
    params: ConditionalNetParams, aligned: float, llm: float, rep: np.ndarray
) -> float:
    """Collated score for one slot; strictly inside (0, 1)."""
    out, _ = params.forward(
        np.array([llm]), np.array([aligned]), np.asarray(rep, float).reshape(1, -1)
    )
    return float(out[0])


def _check_lengths(*vecs):
    n = vecs[0].size
    if any(v.size != n for v in vecs[1:]):
        raise LengthMismatch("score vectors must share one length")
    return n


def collaborative_loss(
    s_hat: np.ndarray, s: np.ndarray, llm: np.ndarray, weights: PatchWeights
) -> float:
    """Pairwise difference-correlation loss.

    -(1/n^2) * sum_ij [ lam1(i,j)(s_i - s_j)(S^_i - S^_j)
                      + lam2(i,j)(S_i - S_j)(S^_i - S^_j) ]
    with pair weights symmetrized as lam(i,j) = (lam(i) + lam(j)) / 2. Depends
    on the collated scores only through their differences.
    """
    loss, _ = collaborative_loss_grad(s_hat, s, llm, weights)
    return loss


def _pairwise_weighted_excess(
    lam: np.ndarray, ref: np.ndarray, n: int
) -> np.ndarray:
    """For each t: sum_j (lam_t + lam_j)/2 * (ref_t - ref_j), in O(n)."""
    lam_sum = lam.sum()
    ref_sum = ref.sum()
    lamref_sum = (lam * ref).sum()
    return 0.5 * (lam * (n * ref - ref_sum) + (ref * lam_sum - lamref_sum))


def collaborative_loss_grad(
    s_hat: np.ndarray, s: np.ndarray, llm: np.ndarray, weights: PatchWeights
) -> tuple[float, np.ndarray]:
    """Collaborative loss and its gradient wrt the collated scores."""
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    llm = np.asarray(llm, dtype=np.float64).reshape(-1)
    lam1 = weights.lambda1
    lam2 = weights.lambda2
    n = _check_lengths(s_hat, s, llm, lam1, lam2)
    if n < 2:
        raise ValueError("need at least two slots")
    # sum_ij lam(i,j)(a_i - a_j)(b_i - b_j) = 2 * sum_t b_t * excess_t(a)
    exc1 = _pairwise_weighted_excess(lam1, s, n)
    exc2 = _pairwise_weighted_excess(lam2, llm, n)
    loss = -(2.0 / n**2) * float(s_hat @ (exc1 + exc2))
    grad = -(2.0 / n**2) * (exc1 + exc2)
    return loss, grad


def collaborative_loss_naive(
    s_hat: np.ndarray, s: np.ndarray, llm: np.ndarray, weights: PatchWeights
) -> float:
    """Literal double sum; the O(n) form is checked against this in tests."""
    s_hat = np.asarray(s_hat, float).reshape(-1)
    s = np.asarray(s, float).reshape(-1)
    llm = np.asarray(llm, float).reshape(-1)
    n = _check_lengths(s_hat, s, llm)
    total = 0.0
    for i in range(n):
        for j in range(n):
            lam1 = 0.5 * (weights.lambda1[i] + weights.lambda1[j])
            lam2 = 0.5 * (weights.lambda2[i] + weights.lambda2[j])
            d_hat = s_hat[i] - s_hat[j]
            total += lam1 * (s[i] - s[j]) * d_hat + lam2 * (llm[i] - llm[j]) * d_hat
    return -total / n**2


def mse_variant_loss(
    s_hat: np.ndarray, s: np.ndarray, llm: np.ndarray, weights: PatchWeights
) -> float:
    """Per-slot weighted squared error against both scorers (ablation)."""
    loss, _ = mse_variant_loss_grad(s_hat, s, llm, weights)
    return loss


def mse_variant_loss_grad(
    s_hat: np.ndarray, s: np.ndarray, llm: np.ndarray, weights: PatchWeights
) -> tuple[float, np.ndarray]:
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    llm = np.asarray(llm, dtype=np.float64).reshape(-1)
    lam1 = weights.lambda1
    lam2 = weights.lambda2
    n = _check_lengths(s_hat, s, llm, lam1, lam2)
    loss = float(np.mean(lam1 * (s - s_hat) ** 2 + lam2 * (llm - s_hat) ** 2))
    grad = (2.0 / n) * (lam1 * (s_hat - s) + lam2 * (s_hat - llm))
    return loss, grad


@dataclass
class CollabConfig:
    """Phase-2 training knobs (the detector is already frozen)."""

    colr: float = 0.01
    batch_size: int = 100
    epochs: int = 60
    seed: int = 0
    patch_size: int = 2
    d: float = 1.0
    lambda_hat_1: float = 1.0
    lambda_hat_2: float = 1.0
    mapping_hidden: int = 8
    cond_hidden: int = 16

    def alignment_config(self) -> AlignmentConfig:
        return AlignmentConfig(
            lambda_hat_1=self.lambda_hat_1,
            lambda_hat_2=self.lambda_hat_2,
            seed=self.seed,
            hidden=self.mapping_hidden,
        )


@dataclass
class TrainingCurves:
    """Per-epoch diagnostics emitted as CSV by the reporting layer."""

    alignment_loss: list[float] = field(default_factory=list)
    pairwise_loss: list[float] = field(default_factory=list)
    kl_aligned: list[float] = field(default_factory=list)
    kl_raw: float = float("nan")


class FusionPipeline:
    """Frozen scorer + trained mapping + trained fusion net; the deployable detector."""

    CHECKPOINT_VERSION = 1

    def __init__(
        self,
        scorer,
        mapping: MonotoneMapping | None,
        cond: ConditionalNetParams,
        normalization: NormalizationConfig,
        score_divisor: float,
        patch_size: int,
        variant: LossVariant,
        fit: HalfGaussianFit,
        config_echo: dict | None = None,
    ):
        self.scorer = scorer
        self.mapping = mapping
        self.cond = cond
        self.normalization = normalization
        self.score_divisor = float(score_divisor)
        self.patch_size = int(patch_size)
        self.variant = variant
        self.fit = fit
        self.config_echo = dict(config_echo or {})

    def aligned_scores(self, scaled: np.ndarray) -> np.ndarray:
        if self.mapping is None:
            return np.asarray(scaled, dtype=np.float64)
        return self.mapping(scaled)

    def to_dict(self) -> dict:
        from .tsadm import scorer_to_dict

        return {
            "version": self.CHECKPOINT_VERSION,
            "scorer": scorer_to_dict(self.scorer),
            "mapping": None if self.mapping is None else self.mapping.to_dict(),
            "cond": self.cond.to_dict(),
            "d": self.normalization.d,
            "score_divisor": self.score_divisor,
            "patch_size": self.patch_size,
            "variant": self.variant.value,
            "sigma": self.fit.sigma,
            "config_echo": self.config_echo,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "FusionPipeline":
        from .tsadm import scorer_from_dict

        if d.get("version") != cls.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(
            scorer=scorer_from_dict(d["scorer"]),
            mapping=None if d["mapping"] is None else MonotoneMapping.from_dict(d["mapping"]),
            cond=ConditionalNetParams.from_dict(d["cond"]),
            normalization=NormalizationConfig(d["d"]),
            score_divisor=d["score_divisor"],
            patch_size=d["patch_size"],
            variant=LossVariant(d["variant"]),
            fit=HalfGaussianFit(d["sigma"]),
            config_echo=d.get("config_echo", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "FusionPipeline":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _slot_streams(
    windows: list[TimeSeriesWindow],
    scorer,
    llm_scores: dict[str, ScoreSeries],
    divisor: float,
    patch_size: int,
):
    """Per-window (scaled, llm, rep, weights) streams for phase-2 training."""
    streams = []
    for w in windows:
        key = w.window_id()
        if key not in llm_scores:
            raise MissingLlmScores(f"no LLM scores for window {key}")
        series = llm_scores[key]
        if len(series) != w.length:
            raise LengthMismatch(
                f"window {key} has {w.length} slots but {len(series)} LLM scores"
            )
        raw, rep = scorer.score(w)
        scaled = raw.scores / divisor
        pw = patch_weights(w, patch_size)
        streams.append((scaled, series.scores, rep, pw))
    return streams


def _pairwise_grad_for_variant(variant, s_hat, scaled, llm, pw):
    if variant in (LossVariant.COLLABORATIVE, LossVariant.NO_ALIGNMENT):
        return collaborative_loss_grad(s_hat, scaled, llm, pw)
    if variant is LossVariant.FIXED_WEIGHTS:
        ones = PatchWeights.fixed(len(s_hat), 1.0, 1.0)
        return collaborative_loss_grad(s_hat, scaled, llm, ones)
    if variant is LossVariant.MSE_VARIANT:
        return mse_variant_loss_grad(s_hat, scaled, llm, pw)
    raise ValueError(f"unknown variant {variant}")


def train_collab(
    windows: list[TimeSeriesWindow],
    scorer,
    llm_scores: dict[str, ScoreSeries],
    variant: LossVariant,
    cfg: CollabConfig,
    config_echo: dict | None = None,
) -> tuple[FusionPipeline, TrainingCurves]:
    """Joint minibatch SGD over the monotone mapping and the fusion network.

    The scorer stays frozen. Batches are contiguous blocks of ``batch_size``
    slots inside one window, so the pairwise terms see both near and far slots;
    block order is reshuffled each epoch under the run seed. The NO_ALIGNMENT
    variant feeds scaled scores straight into the network and skips both the
    mapping and the alignment term.
    """
    if not windows:
        raise ValueError("no training windows")
    raws = [scorer.score(w)[0].scores for w in windows]
    divisor = score_range_divisor(np.concatenate(raws), NormalizationConfig(cfg.d))
    streams = _slot_streams(windows, scorer, llm_scores, divisor, cfg.patch_size)

    all_llm = np.concatenate([st[1] for st in streams])
    fit = align_mod.fit_half_gaussian(all_llm)
    acfg = cfg.alignment_config()

    use_mapping = variant is not LossVariant.NO_ALIGNMENT
    mapping = MonotoneMapping(cfg.mapping_hidden, seed=cfg.seed) if use_mapping else None
    rep_dim = streams[0][2].shape[1]
    cond = ConditionalNetParams(rep_dim, hidden=cfg.cond_hidden, seed=cfg.seed + 1)

    blocks = []
    for wi, (scaled, _, _, _) in enumerate(streams):
        for start in range(0, len(scaled), cfg.batch_size):
            stop = min(start + cfg.batch_size, len(scaled))
            if stop - start >= 2:
                blocks.append((wi, start, stop))

    all_scaled = np.concatenate([st[0] for st in streams])
    curves = TrainingCurves()
    curves.kl_raw = align_mod.kl_histogram(all_scaled, fit, bins=50)

    # Adam keeps the two loss terms trainable together: the pairwise term's
    # 1/n^2 scale is orders of magnitude below the alignment term's per-slot
    # log-density gradients, so raw SGD would starve the fusion net.
    opt = Adam(cfg.colr)
    cond_params = {"w1": cond.w1, "b1": cond.b1, "w2": cond.w2}
    b2_box = np.array([cond.b2])

    all_llm_flat = np.concatenate([st[1] for st in streams])
    all_rep = np.concatenate([st[2] for st in streams])

    def refresh_input_stats():
        mapped_all = mapping(all_scaled) if use_mapping else all_scaled
        stacked = np.concatenate(
            [all_llm_flat[:, None], mapped_all[:, None], all_rep], axis=1
        )
        cond.set_input_stats(stacked.mean(axis=0), stacked.std(axis=0))

    rng = np.random.default_rng(cfg.seed)
    for _epoch in range(cfg.epochs):
        # the mapping reshapes its output distribution as it trains, so the
        # standardization constants track it once per epoch
        refresh_input_stats()
        order = rng.permutation(len(blocks))
        ep_align = 0.0
        ep_pair = 0.0
        for bi in order:
            wi, start, stop = blocks[bi]
            scaled, llm, rep, pw = streams[wi]
            sb = scaled[start:stop]
            lb = llm[start:stop]
            rb = rep[start:stop]
            pwb = PatchWeights(
                d_intra=pw.d_intra[start:stop],
                d_inter=pw.d_inter[start:stop],
                lambda1=pw.lambda1[start:stop],
                lambda2=pw.lambda2[start:stop],
            )
            if use_mapping:
                mapped, mcache = mapping.forward(sb)
            else:
                mapped = sb
            s_hat, ccache = cond.forward(lb, mapped, rb)
            pair_loss, ds_hat = _pairwise_grad_for_variant(variant, s_hat, sb, lb, pwb)
            cgrads, _dllm, dmapped, _drep = cond.backward(ds_hat, ccache)
            params = dict(cond_params)
            b2_box[0] = cond.b2
            params["b2"] = b2_box
            cgrads["b2"] = np.array([cgrads["b2"]])
            grads = cgrads
            if use_mapping:
                a_loss, da_mapped = align_mod.alignment_loss_grad(mapped, fit, acfg)
                mgrads, _ = mapping.backward(dmapped + da_mapped, mcache)
                params.update(
                    {"m_a1": mapping.a1, "m_b1": mapping.b1, "m_a2": mapping.a2}
                )
                mb2_box = np.array([mapping.b2])
                params["m_b2"] = mb2_box
                grads.update(
                    {
                        "m_a1": mgrads["a1"],
                        "m_b1": mgrads["b1"],
                        "m_a2": mgrads["a2"],
                        "m_b2": np.array([mgrads["b2"]]),
                    }
                )
            else:
                a_loss = 0.0
            opt.step(params, grads)
            cond.b2 = float(b2_box[0])
            if use_mapping:
                mapping.b2 = float(mb2_box[0])
            if not (np.isfinite(pair_loss) and np.isfinite(a_loss)):
                raise NonConvergence("phase-2 loss became non-finite")
            ep_align += a_loss
            ep_pair += pair_loss
        curves.alignment_loss.append(ep_align / len(blocks))
        curves.pairwise_loss.append(ep_pair / len(blocks))
        if use_mapping:
            curves.kl_aligned.append(
                align_mod.kl_histogram(mapping(all_scaled), fit, bins=50)
            )

    pipeline = FusionPipeline(
        scorer=scorer,
        mapping=mapping,
        cond=cond,
        normalization=NormalizationConfig(cfg.d),
        score_divisor=divisor,
        patch_size=cfg.patch_size,
        variant=variant,
        fit=fit,
        config_echo=config_echo,
    )
    return pipeline, curves


def detect(
    pipeline: FusionPipeline, window: TimeSeriesWindow, llm_scores: ScoreSeries
) -> ScoreSeries:
    """Collated scores for one window.

    Pure given (pipeline, window, scores): the detector scores the window, the
    frozen training divisor rescales, the mapping aligns, and the fusion net
    emits per-slot collated scores.
    """
    if llm_scores.kind is not ScoreKind.LLM:
        raise ValueError("detect expects LLM-kind scores")
    if len(llm_scores) != window.length:
        raise LengthMismatch("LLM scores must cover every slot of the window")
    raw, rep = pipeline.scorer.score(window)
    scaled = raw.scores / pipeline.score_divisor
    aligned = pipeline.aligned_scores(scaled)
    out, _ = pipeline.cond.forward(llm_scores.scores, aligned, rep)
    return ScoreSeries(out, ScoreKind.COLLATED)
