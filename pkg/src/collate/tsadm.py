"""Task-specific detector: anomaly-attention reconstruction network.

A small per-channel attention autoencoder. Each layer computes attention
logits q k^T, multiplies them by a distance mask G[i, j] = 1 - exp(-(i-j)^2 /
sigma^2) that suppresses self- and near-neighbour links, row-softmaxes, and
mixes values; layers are stacked with plain residual connections. The raw
anomaly score of a slot is its reconstruction error summed over channels.

Anything implementing the Scorer protocol can stand in for the attention
model; PrecomputedScorer replays externally produced scores.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .core import ScoreKind, ScoreSeries, TimeSeriesWindow
from .errors import NonConvergence, NonFiniteInput, ShapeMismatch
from .optim import Adam


@runtime_checkable
class Scorer(Protocol):
    def score(self, window: TimeSeriesWindow) -> tuple[ScoreSeries, np.ndarray]:
        """Raw per-slot scores and a T x h representation for the window."""
        ...


def gaussian_mask(length: int, sigma: float) -> np.ndarray:
    """Distance mask: zero on the diagonal, approaching one far away."""
    idx = np.arange(length, dtype=np.float64)
    d2 = (idx[:, None] - idx[None, :]) ** 2
    return 1.0 - np.exp(-d2 / sigma**2)


def _softmax_rows(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def anomaly_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, sigma: float) -> np.ndarray:
    """Masked attention: softmax((q k^T) * G) applied to v."""
    out, _ = anomaly_attention_vjp(q, k, v, sigma)
    return out


def anomaly_attention_vjp(q: np.ndarray, k: np.ndarray, v: np.ndarray, sigma: float):
    """Forward output plus a closure mapping d(out) to (dq, dk, dv, dsigma)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ShapeMismatch("q, k must share a shape and v the same row count")
    if not (np.isfinite(q).all() and np.isfinite(k).all() and np.isfinite(v).all()):
        raise NonFiniteInput("attention inputs must be finite")
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError("sigma must be positive")
    length = q.shape[0]
    idx = np.arange(length, dtype=np.float64)
    d2 = (idx[:, None] - idx[None, :]) ** 2
    expo = np.exp(-d2 / sigma**2)
    g = 1.0 - expo
    a = q @ k.T
    p = _softmax_rows(a * g)
    out = p @ v

    def backward(dout: np.ndarray):
        dout = np.asarray(dout, dtype=np.float64)
        dp = dout @ v.T
        dv = p.T @ dout
        dm = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
        da = dm * g
        dg = dm * a
        dsigma = float(-(dg * expo * 2.0 * d2 / sigma**3).sum())
        dq = da @ k
        dk = da.T @ q
        return dq, dk, dv, dsigma

    return out, backward


@dataclass
class TsadmConfig:
    winLen: int = 16
    moduleNum: int = 3
    kLen: int = 2
    embed: int = 4
    trlr: float = 0.01
    epochs: int = 200
    batchSize: int = 32
    seed: int = 0


class AttentionLayerParams:
    """Per-channel q/k/v projections and one shared mask scale per layer.

    sigma is optimized through its logarithm, so positivity survives every
    update.
    """

    def __init__(self, dims: int, embed: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(embed)
        self.wq = rng.normal(0.0, scale, (dims, embed, embed))
        self.wk = rng.normal(0.0, scale, (dims, embed, embed))
        self.wv = rng.normal(0.0, scale, (dims, embed, embed))
        self.log_sigma = 0.0

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))


class TsadmModel:
    """Attention reconstruction model; immutable once trained, scoring is pure."""

    CHECKPOINT_VERSION = 1

    def __init__(self, dims: int, cfg: TsadmConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.dims = dims
        e, kl = cfg.embed, cfg.kLen
        self.embed_w = rng.normal(0.0, 1.0 / np.sqrt(kl), (kl, e))
        self.embed_b = np.zeros(e)
        self.layers = [AttentionLayerParams(dims, e, rng) for _ in range(cfg.moduleNum)]
        self.out_w = rng.normal(0.0, 1.0 / np.sqrt(dims * e), (dims * e, dims))
        self.out_b = np.zeros(dims)

    @property
    def rep_dim(self) -> int:
        return self.dims * self.cfg.embed

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"embed_w": self.embed_w, "embed_b": self.embed_b,
                  "out_w": self.out_w, "out_b": self.out_b}
        for i, layer in enumerate(self.layers):
            params[f"wq{i}"] = layer.wq
            params[f"wk{i}"] = layer.wk
            params[f"wv{i}"] = layer.wv
        return params

    def _embed(self, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b, t, d = xb.shape
        kl = self.cfg.kLen
        pad = np.concatenate([np.repeat(xb[:, :1, :], kl - 1, axis=1), xb], axis=1)
        xwin = np.stack([pad[:, j : j + t, :] for j in range(kl)], axis=-1)  # (B,T,D,kl)
        u = np.einsum("btdj,je->btde", xwin, self.embed_w) + self.embed_b
        return u.transpose(0, 2, 1, 3), xwin  # (B,D,T,e)

    def forward(self, xb: np.ndarray):
        """Reconstruction, representation, and caches for one batch (B, T, D)."""
        xb = np.asarray(xb, dtype=np.float64)
        if xb.ndim != 3 or xb.shape[2] != self.dims:
            raise ShapeMismatch(f"expected (B, T, {self.dims}) input")
        t = xb.shape[1]
        x, xwin = self._embed(xb)
        idx = np.arange(t, dtype=np.float64)
        d2 = (idx[:, None] - idx[None, :]) ** 2
        layer_caches = []
        for layer in self.layers:
            sigma = layer.sigma
            expo = np.exp(-d2 / sigma**2)
            g = 1.0 - expo
            q = np.einsum("bdte,def->bdtf", x, layer.wq)
            k = np.einsum("bdte,def->bdtf", x, layer.wk)
            v = np.einsum("bdte,def->bdtf", x, layer.wv)
            a = np.einsum("bdtf,bdsf->bdts", q, k)
            p = _softmax_rows(a * g)
            o = np.einsum("bdts,bdse->bdte", p, v)
            layer_caches.append((x, q, k, v, a, p, g, expo, sigma))
            x = x + o
        rep = x.transpose(0, 2, 1, 3).reshape(xb.shape[0], t, self.rep_dim)
        recon = rep @ self.out_w + self.out_b
        return recon, rep, (xb, xwin, d2, layer_caches)

    def loss_and_grads(self, xb: np.ndarray):
        """Mean squared reconstruction error and gradients for every parameter."""
        recon, rep, (xb, xwin, d2, layer_caches) = self.forward(xb)
        resid = recon - xb
        loss = float(np.mean(resid**2))
        drecon = 2.0 * resid / resid.size
        grads: dict[str, np.ndarray] = {
            "out_w": np.einsum("bth,btd->hd", rep, drecon),
            "out_b": drecon.sum(axis=(0, 1)),
        }
        drep = drecon @ self.out_w.T
        b, t = xb.shape[0], xb.shape[1]
        dx = drep.reshape(b, t, self.dims, self.cfg.embed).transpose(0, 2, 1, 3)
        dlog_sigma = np.zeros(len(self.layers))
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x, q, k, v, a, p, g, expo, sigma = layer_caches[i]
            do = dx  # residual: dx flows to both the branch and the skip
            dp = np.einsum("bdte,bdse->bdts", do, v)
            dv = np.einsum("bdts,bdte->bdse", p, do)
            dm = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
            da = dm * g
            dg = (dm * a).sum(axis=(0, 1))
            dsigma = float(-(dg * expo * 2.0 * d2 / sigma**3).sum())
            dlog_sigma[i] = dsigma * sigma
            dq = np.einsum("bdts,bdsf->bdtf", da, k)
            dk = np.einsum("bdts,bdtf->bdsf", da, q)
            grads[f"wq{i}"] = np.einsum("bdte,bdtf->def", x, dq)
            grads[f"wk{i}"] = np.einsum("bdte,bdtf->def", x, dk)
            grads[f"wv{i}"] = np.einsum("bdte,bdtf->def", x, dv)
            dx = dx + (
                np.einsum("bdtf,def->bdte", dq, layer.wq)
                + np.einsum("bdtf,def->bdte", dk, layer.wk)
                + np.einsum("bdtf,def->bdte", dv, layer.wv)
            )
        du = dx.transpose(0, 2, 1, 3)  # (B,T,D,e)
        grads["embed_w"] = np.einsum("btdj,btde->je", xwin, du)
        grads["embed_b"] = du.sum(axis=(0, 1, 2))
        grads["log_sigma"] = dlog_sigma
        return loss, grads

    def score(self, window: TimeSeriesWindow) -> tuple[ScoreSeries, np.ndarray]:
        """Raw per-slot reconstruction errors and the final attention features.

        Windows longer than winLen are scored in non-overlapping tiles, with
        an end-aligned tile covering the remainder; every slot is scored once.
        """
        t = window.length
        w = self.cfg.winLen
        if window.dims != self.dims:
            raise ShapeMismatch(f"window has {window.dims} dims, model expects {self.dims}")
        if t < w:
            raise ShapeMismatch(f"window length {t} shorter than winLen {w}")
        raw = np.empty(t)
        rep = np.empty((t, self.rep_dim))
        n_full = t // w
        tiles = window.values[: n_full * w].reshape(n_full, w, self.dims)
        recon, r, _ = self.forward(tiles)
        err = ((recon - tiles) ** 2).sum(axis=2)
        raw[: n_full * w] = err.reshape(-1)
        rep[: n_full * w] = r.reshape(-1, self.rep_dim)
        if n_full * w < t:
            tail = window.values[None, t - w :, :]
            recon, r, _ = self.forward(tail)
            err = ((recon[0] - tail[0]) ** 2).sum(axis=1)
            keep = t - n_full * w
            raw[n_full * w :] = err[-keep:]
            rep[n_full * w :] = r[0, -keep:]
        return ScoreSeries(raw, ScoreKind.RAW_TSADM), rep

    def to_dict(self) -> dict:
        return {
            "version": self.CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "dims": self.dims,
            "embed_w": self.embed_w.tolist(),
            "embed_b": self.embed_b.tolist(),
            "out_w": self.out_w.tolist(),
            "out_b": self.out_b.tolist(),
            "layers": [
                {
                    "wq": l.wq.tolist(),
                    "wk": l.wk.tolist(),
                    "wv": l.wv.tolist(),
                    "log_sigma": l.log_sigma,
                }
                for l in self.layers
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "TsadmModel":
        if d.get("version") != cls.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        cfg = TsadmConfig(**d["config"])
        model = cls(d["dims"], cfg)
        model.embed_w = np.asarray(d["embed_w"], dtype=np.float64)
        model.embed_b = np.asarray(d["embed_b"], dtype=np.float64)
        model.out_w = np.asarray(d["out_w"], dtype=np.float64)
        model.out_b = np.asarray(d["out_b"], dtype=np.float64)
        for layer, ld in zip(model.layers, d["layers"]):
            layer.wq = np.asarray(ld["wq"], dtype=np.float64)
            layer.wk = np.asarray(ld["wk"], dtype=np.float64)
            layer.wv = np.asarray(ld["wv"], dtype=np.float64)
            layer.log_sigma = float(ld["log_sigma"])
        return model

    @classmethod
    def load(cls, path: str | Path) -> "TsadmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sliding_windows(values: np.ndarray, win_len: int) -> np.ndarray:
    """Non-overlapping training windows (B, winLen, D); the tail is dropped."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] < win_len:
        raise ShapeMismatch("series shorter than one window")
    n_win = values.shape[0] // win_len
    return values[: n_win * win_len].reshape(n_win, win_len, values.shape[1])


def train_tsadm(values: np.ndarray, cfg: TsadmConfig) -> TsadmModel:
    """Minibatch Adam on mean squared reconstruction error.

    Deterministic under cfg.seed: init, batch shuffling, and updates all flow
    from one generator.
    """
    windows = sliding_windows(values, cfg.winLen)
    dims = windows.shape[2]
    model = TsadmModel(dims, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(cfg.trlr)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(windows.shape[0])
        for start in range(0, order.size, cfg.batchSize):
            batch = windows[order[start : start + cfg.batchSize]]
            loss, grads = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise NonConvergence(f"reconstruction loss became {loss}")
            params = model.parameters()
            log_sigmas = np.array([l.log_sigma for l in model.layers])
            params["log_sigma"] = log_sigmas
            opt.step(params, grads)
            for i, layer in enumerate(model.layers):
                layer.log_sigma = float(log_sigmas[i])
    return model


class PrecomputedScorer:
    """Replays per-slot scores and representations computed elsewhere.

    Covers slots [base_index, base_index + T); score() slices by the window's
    absolute start index.
    """

    def __init__(self, raw: np.ndarray, rep: np.ndarray, base_index: int = 0):
        self.raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        self.rep = np.atleast_2d(np.asarray(rep, dtype=np.float64))
        if self.rep.shape[0] != self.raw.size:
            raise ShapeMismatch("raw scores and representation must cover the same slots")
        self.base_index = int(base_index)

    @property
    def rep_dim(self) -> int:
        return self.rep.shape[1]

    def score(self, window: TimeSeriesWindow) -> tuple[ScoreSeries, np.ndarray]:
        lo = window.start_index - self.base_index
        hi = lo + window.length
        if lo < 0 or hi > self.raw.size:
            raise ShapeMismatch(
                f"window [{window.start_index}, {window.start_index + window.length}) "
                "outside precomputed score coverage"
            )
        return ScoreSeries(self.raw[lo:hi], ScoreKind.RAW_TSADM), self.rep[lo:hi]

    def to_dict(self) -> dict:
        return {
            "raw": self.raw.tolist(),
            "rep": self.rep.tolist(),
            "base_index": self.base_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrecomputedScorer":
        return cls(np.asarray(d["raw"]), np.asarray(d["rep"]), d["base_index"])


def scorer_to_dict(scorer) -> dict:
    if isinstance(scorer, TsadmModel):
        return {"kind": "attention", "state": scorer.to_dict()}
    if isinstance(scorer, PrecomputedScorer):
        return {"kind": "precomputed", "state": scorer.to_dict()}
    raise TypeError(f"cannot serialize scorer of type {type(scorer).__name__}")


def scorer_from_dict(d: dict):
    if d["kind"] == "attention":
        return TsadmModel.from_dict(d["state"])
    if d["kind"] == "precomputed":
        return PrecomputedScorer.from_dict(d["state"])
    raise ValueError(f"unknown scorer kind {d['kind']!r}")
