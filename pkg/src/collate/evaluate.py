"""Detection metrics, threshold selection, per-kind breakdowns, reports.

Slot-wise precision/recall/F1 with no point-adjustment by default: adjusted
scoring inflates results, so the stricter metric is primary and adjustment is
available behind a flag for comparison only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .core import ScoreSeries
from .data import AnomalyKind, AnomalySpan
from .errors import LengthMismatch, NoPositives


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    fn: int
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "threshold": self.threshold,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }
        if self.per_kind:
            out["per_kind"] = self.per_kind
        return out


def _as_scores(scores) -> np.ndarray:
    if isinstance(scores, ScoreSeries):
        return scores.scores
    return np.asarray(scores, dtype=np.float64).reshape(-1)


def point_adjust(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mark a whole ground-truth segment detected if any slot in it is; for
    comparison with adjusted published numbers only."""
    pred = pred.copy()
    n = labels.size
    i = 0
    while i < n:
        if labels[i] == 1:
            j = i
            while j < n and labels[j] == 1:
                j += 1
            if pred[i:j].any():
                pred[i:j] = True
            i = j
        else:
            i += 1
    return pred


def prf1(scores, labels, threshold: float, adjust: bool = False) -> DetectionMetrics:
    """Slot-wise thresholding: score > threshold predicts anomalous.

    Zero-division conventions: precision is 0 with no predicted positives,
    F1 is 0 when precision + recall is 0.
    """
    s = _as_scores(scores)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.size != y.size:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    pred = s > threshold
    if adjust:
        pred = point_adjust(pred, y)
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return DetectionMetrics(precision, recall, f1, float(threshold), tp, fp, fn)


def best_f1_threshold(scores, labels, adjust: bool = False) -> tuple[float, DetectionMetrics]:
    """Exhaustive scan over midpoints of sorted unique scores plus a
    predict-everything threshold below the minimum; F1 ties break toward the
    lower threshold (higher recall)."""
    s = _as_scores(scores)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.size != y.size:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    if not (y == 1).any():
        raise NoPositives("threshold selection needs at least one positive label")
    uniq = np.unique(s)
    candidates = [float(uniq[0]) - 1.0]
    candidates.extend(((uniq[:-1] + uniq[1:]) / 2.0).tolist())
    best: DetectionMetrics | None = None
    for t in candidates:
        m = prf1(s, y, t, adjust=adjust)
        if best is None or m.f1 > best.f1 or (m.f1 == best.f1 and t < best.threshold):
            best = m
    return best.threshold, best


def labels_from_spans(spans: list[AnomalySpan], length: int, kind=None) -> np.ndarray:
    y = np.zeros(length, dtype=np.int64)
    for s in spans:
        if kind is None or s.kind == kind:
            y[s.start : s.end] = 1
    return y


def per_kind_metrics(scores, spans: list[AnomalySpan], adjust: bool = False) -> DetectionMetrics:
    """Overall best-F1 metrics plus contextual-only and point-only breakdowns.

    The breakdowns reuse the overall operating threshold; each considers only
    its kind's positive slots together with the shared negatives (other-kind
    slots are excluded entirely). A kind with no spans is reported as
    'no_positives'.
    """
    s = _as_scores(scores)
    y_all = labels_from_spans(spans, s.size)
    if not y_all.any():
        raise NoPositives("spans mark no slots")
    threshold, overall = best_f1_threshold(s, y_all, adjust=adjust)
    breakdown = {}
    for kind in AnomalyKind:
        y_kind = labels_from_spans(spans, s.size, kind)
        if not y_kind.any():
            breakdown[kind.value] = "no_positives"
            continue
        keep = (y_all == 0) | (y_kind == 1)
        m = prf1(s[keep], y_kind[keep], threshold, adjust=adjust)
        breakdown[kind.value] = m.to_dict()
    return DetectionMetrics(
        overall.precision,
        overall.recall,
        overall.f1,
        threshold,
        overall.tp,
        overall.fp,
        overall.fn,
        per_kind=breakdown,
    )


def score_overlay_svg(
    values: np.ndarray,
    scores: np.ndarray,
    labels: np.ndarray | None = None,
    threshold: float | None = None,
    width: int = 900,
    height: int = 260,
    title: str = "",
) -> str:
    """Hand-rolled SVG: series polyline, score polyline, label shading.

    Deterministic output (no timestamps, no font dependencies), so report
    artifacts are byte-stable across identical runs.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim > 1:
        values = values[:, 0]
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = values.size

    def scale(v: np.ndarray, lo_px: float, hi_px: float) -> np.ndarray:
        vmin, vmax = float(v.min()), float(v.max())
        if vmax == vmin:
            vmax = vmin + 1.0
        return hi_px - (v - vmin) / (vmax - vmin) * (hi_px - lo_px)

    xs = np.linspace(5, width - 5, n)
    half = height / 2.0
    y_vals = scale(values, 15, half - 5)
    y_scores = scale(scores, half + 10, height - 10)

    def polyline(ys: np.ndarray, color: str) -> str:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        return f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        i = 0
        while i < n:
            if labels[i] == 1:
                j = i
                while j < n and labels[j] == 1:
                    j += 1
                x0, x1 = xs[i], xs[min(j, n - 1)]
                parts.append(
                    f'<rect x="{x0:.2f}" y="0" width="{max(x1 - x0, 1.0):.2f}" '
                    f'height="{height}" fill="#fdd" />'
                )
                i = j
            else:
                i += 1
    parts.append(polyline(y_vals, "#1f77b4"))
    parts.append(polyline(y_scores, "#d62728"))
    if threshold is not None and scores.max() > scores.min():
        frac = (threshold - scores.min()) / (scores.max() - scores.min())
        if 0.0 <= frac <= 1.0:
            ty = (height - 10) - frac * ((height - 10) - (half + 10))
            parts.append(
                f'<line x1="5" y1="{ty:.2f}" x2="{width - 5}" y2="{ty:.2f}" '
                'stroke="#888" stroke-dasharray="4,3" stroke-width="1"/>'
            )
    if title:
        parts.append(
            f'<text x="8" y="12" font-size="11" font-family="monospace">'
            f"{escape(title)}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_csv_table(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def emit_report(
    out_dir: str | Path,
    metrics: dict,
    curves: dict[str, tuple[list[str], list[list]]] | None = None,
    plots: dict[str, str] | None = None,
) -> list[Path]:
    """Write metrics.json, CSV curve tables, and SVG overlays; idempotent
    overwrite, deterministic bytes for identical inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, sort_keys=True, indent=1))
    written.append(metrics_path)
    for name, (header, rows) in (curves or {}).items():
        p = out_dir / f"{name}.csv"
        write_csv_table(p, header, rows)
        written.append(p)
    for name, svg in (plots or {}).items():
        p = out_dir / f"{name}.svg"
        p.write_text(svg)
        written.append(p)
    return written
