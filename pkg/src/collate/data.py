"""Synthetic benchmark generation, dataset loading, and splits.

The generator integrates the delayed feedback equation
dx/dt = a x(t - tau) / (1 + x(t - tau)^p) - b x(t) with unit Euler steps and
bounded uniform noise, then plants two anomaly kinds: contextual anomalies
copy a future segment over the present, point anomalies shift single slots by
a multiple of the series deviation. All randomness comes from explicit
per-call seeds.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .core import TimeSeriesWindow
from .errors import InsufficientRoom, MissingColumn, ParseError, TooShort


class AnomalyKind(Enum):
    CONTEXTUAL = "contextual"
    POINT = "point"


@dataclass(frozen=True)
class AnomalySpan:
    start: int
    end: int  # exclusive
    kind: AnomalyKind

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "kind": self.kind.value}


@dataclass(frozen=True)
class MackeyGlassConfig:
    length: int = 10_000
    tau: int = 18
    a: float = 0.25
    b: float = 0.1
    exponent: float = 10.0
    noise_amplitude: float = 0.01
    history_init: float = 1.2
    seed: int = 0
    step: float = 1.0

    def __post_init__(self):
        if self.length <= self.tau:
            raise ValueError("length must exceed the delay")
        if self.noise_amplitude < 0:
            raise ValueError("noise amplitude must be nonnegative")


@dataclass
class LabeledSeries:
    """T x D values, optional binary labels, and the spans that produced them.

    ``labels`` is None for unlabeled data (a CSV without a label column); an
    all-zero vector means every slot was observed normal, which is different.
    """

    values: np.ndarray
    labels: np.ndarray | None = None
    spans: list[AnomalySpan] = field(default_factory=list)
    start_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.values = values
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.size != self.values.shape[0]:
                raise ValueError("labels must cover every slot")
        ordered = sorted(self.spans, key=lambda s: s.start)
        for s1, s2 in zip(ordered[:-1], ordered[1:]):
            if s1.end > s2.start:
                raise ValueError("anomaly spans must not overlap")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def window(self) -> TimeSeriesWindow:
        return TimeSeriesWindow(self.values, start_index=self.start_index, labels=self.labels)


def gen_mackey_glass(cfg: MackeyGlassConfig) -> LabeledSeries:
    """Generate one noisy delayed-feedback series; labels start all zero."""
    rng = np.random.default_rng(cfg.seed)
    x = np.empty(cfg.length)
    x[0] = cfg.history_init
    noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, cfg.length)

    def delayed(t: int) -> float:
        return x[t - cfg.tau] if t - cfg.tau >= 0 else cfg.history_init

    for t in range(cfg.length - 1):
        xd = delayed(t)
        drift = cfg.a * xd / (1.0 + xd**cfg.exponent) - cfg.b * x[t]
        x[t + 1] = x[t] + cfg.step * drift + noise[t + 1]
    return LabeledSeries(values=x[:, None], labels=np.zeros(cfg.length, dtype=np.int64))


def _occupied(spans: list[AnomalySpan]) -> np.ndarray:
    if not spans:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(s.start, s.end) for s in spans])


def insert_contextual_anomalies(
    series: LabeledSeries,
    count: int,
    span_range: tuple[int, int] = (20, 40),
    seed: int = 0,
    region: tuple[int, int] | None = None,
) -> LabeledSeries:
    """Copy future segments onto the present at ``count`` non-overlapping spans.

    The source segment starts at least one span length ahead of the
    destination, so the overwritten values are an exact copy of genuinely
    future dynamics. ``region`` restricts destination starts to [lo, hi).
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    values = series.values.copy()
    labels = series.labels.copy()
    spans = list(series.spans)
    t_total = series.length
    lo, hi = region if region is not None else (0, t_total)
    for _ in range(count):
        placed = False
        for _attempt in range(10_000):
            span_len = int(rng.integers(span_range[0], span_range[1] + 1))
            start = int(rng.integers(lo, max(lo + 1, hi - span_len)))
            end = start + span_len
            if end + span_len >= t_total:
                continue
            occupied = _occupied(spans)
            if occupied.size and ((occupied >= start) & (occupied < end)).any():
                continue
            offset = int(rng.integers(span_len, t_total - end))
            values[start:end] = values[start + offset : end + offset]
            labels[start:end] = 1
            spans.append(AnomalySpan(start, end, AnomalyKind.CONTEXTUAL))
            placed = True
            break
        if not placed:
            raise InsufficientRoom("could not place a contextual span without overlap")
    return LabeledSeries(values=values, labels=labels, spans=spans,
                         start_index=series.start_index)


def insert_point_anomalies(
    series: LabeledSeries,
    count: int,
    magnitude: float = 5.0,
    seed: int = 0,
    region: tuple[int, int] | None = None,
) -> LabeledSeries:
    """Shift ``count`` isolated slots by +/- magnitude * series std."""
    if count < 1:
        raise ValueError("count must be positive")
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    rng = np.random.default_rng(seed)
    values = series.values.copy()
    labels = series.labels.copy()
    spans = list(series.spans)
    std = float(values.std())
    lo, hi = region if region is not None else (0, series.length)
    for _ in range(count):
        placed = False
        for _attempt in range(10_000):
            slot = int(rng.integers(lo, hi))
            occupied = _occupied(spans)
            if occupied.size and (np.abs(occupied - slot) <= 1).any():
                continue
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            values[slot] += sign * magnitude * std
            labels[slot] = 1
            spans.append(AnomalySpan(slot, slot + 1, AnomalyKind.POINT))
            placed = True
            break
        if not placed:
            raise InsufficientRoom("could not place a point anomaly")
    return LabeledSeries(values=values, labels=labels, spans=spans,
                         start_index=series.start_index)


def _slice_series(series: LabeledSeries, lo: int, hi: int) -> LabeledSeries:
    spans = [
        AnomalySpan(max(s.start, lo), min(s.end, hi), s.kind)
        for s in series.spans
        if s.start < hi and s.end > lo
    ]
    return LabeledSeries(
        values=series.values[lo:hi],
        labels=None if series.labels is None else series.labels[lo:hi],
        spans=[AnomalySpan(s.start - lo, s.end - lo, s.kind) for s in spans],
        start_index=series.start_index + lo,
    )


def split(
    dataset: list[LabeledSeries],
) -> tuple[list[LabeledSeries], list[LabeledSeries], list[LabeledSeries]]:
    """Contiguous 40/10/50 split of each series, in temporal order.

    Boundaries are floor-rounded; every slot lands in exactly one part. The
    split is deterministic; no shuffling across time.
    """
    train, val, test = [], [], []
    for series in dataset:
        t = series.length
        if t < 10:
            raise TooShort(f"series of length {t} cannot be split 40/10/50")
        a = int(t * 0.4)
        b = int(t * 0.5)
        train.append(_slice_series(series, 0, a))
        val.append(_slice_series(series, a, b))
        test.append(_slice_series(series, b, t))
    return train, val, test


def split_windows(
    series: LabeledSeries, window_len: int
) -> dict[str, list[TimeSeriesWindow]]:
    """Windows of each 40/10/50 split part, keyed 'train'/'val'/'test'.

    Windowing after splitting keeps window identities stable across commands
    that consume different parts of the same series.
    """
    train, val, test = split([series])
    return {
        "train": to_windows(train[0], window_len),
        "val": to_windows(val[0], window_len),
        "test": to_windows(test[0], window_len),
    }


def to_windows(series: LabeledSeries, window_len: int) -> list[TimeSeriesWindow]:
    """Non-overlapping windows covering the series; the tail keeps its
    natural (shorter) length so every slot appears exactly once."""
    out = []
    for start in range(0, series.length, window_len):
        stop = min(start + window_len, series.length)
        out.append(
            TimeSeriesWindow(
                series.values[start:stop],
                start_index=series.start_index + start,
                labels=None if series.labels is None else series.labels[start:stop],
            )
        )
    return out


def save_csv(series: LabeledSeries, path: str | Path) -> None:
    """Write `t,dim_0,...,dim_{D-1}[,label]`; floats use shortest round-trip
    form, so a load after save is bit-exact. The label column is emitted only
    when the series carries labels."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["t"] + [f"dim_{d}" for d in range(series.dims)]
        if series.has_labels:
            header.append("label")
        writer.writerow(header)
        for i in range(series.length):
            row = [str(series.start_index + i)] + [repr(float(v)) for v in series.values[i]]
            if series.has_labels:
                row.append(str(int(series.labels[i])))
            writer.writerow(row)


def load_csv(path: str | Path) -> LabeledSeries:
    """Read the CSV schema written by save_csv.

    A missing label column yields ``labels=None`` (absent, not all-normal).
    Raises ParseError with the 1-based line number on any malformed row.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if not header or header[0] != "t":
            raise MissingColumn("first column must be 't'")
        dim_cols = [h for h in header if h.startswith("dim_")]
        if not dim_cols:
            raise MissingColumn("no dim_* columns present")
        expected = [f"dim_{d}" for d in range(len(dim_cols))]
        if dim_cols != expected:
            raise MissingColumn(f"dim columns must be contiguous from dim_0, got {dim_cols}")
        has_labels = header[-1] == "label"
        width = 1 + len(dim_cols) + (1 if has_labels else 0)
        values, labels, start = [], [], None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1 : 1 + len(dim_cols)]]
                lab = int(row[-1]) if has_labels else 0
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if has_labels and lab not in (0, 1):
                raise ParseError(f"label must be 0 or 1, got {lab}", line=lineno)
            if start is None:
                start = t
            values.append(vals)
            labels.append(lab)
        if not values:
            raise ParseError("no data rows", line=2)
    return LabeledSeries(
        values=np.asarray(values),
        labels=np.asarray(labels) if has_labels else None,
        spans=[],
        start_index=start or 0,
    )


def write_metadata(
    path: str | Path, cfg: MackeyGlassConfig, spans: list[AnomalySpan], seed: int
) -> None:
    """Sidecar JSON with the generator config, seed, and span list."""
    payload = {
        "generator": asdict(cfg),
        "seed": seed,
        "spans": [s.to_dict() for s in spans],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def read_metadata(path: str | Path) -> tuple[dict, list[AnomalySpan]]:
    payload = json.loads(Path(path).read_text())
    spans = [
        AnomalySpan(s["start"], s["end"], AnomalyKind(s["kind"]))
        for s in payload["spans"]
    ]
    return payload, spans
