"""Confidence-calibration analysis: binning, ECE, MCE, reliability diagrams.

Bins are equal-width over (0, 1] and top-closed: confidence c lands in bin
ceil(c * n_bins), so a value sitting exactly on an interior edge belongs to
the lower bin.  Empty bins contribute nothing to ECE and are excluded from
MCE's max.  No calibration correction is applied anywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PredictionLog:
    """Per-example top-class confidence plus predicted and true labels."""

    confidence: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=np.float64))
        object.__setattr__(self, "predicted", np.asarray(self.predicted, dtype=np.int64))
        object.__setattr__(self, "actual", np.asarray(self.actual, dtype=np.int64))
        n = len(self.confidence)
        if len(self.predicted) != n or len(self.actual) != n:
            raise ValueError(
                f"field lengths differ: {n} confidences, "
                f"{len(self.predicted)} predictions, {len(self.actual)} labels"
            )
        if n and (self.confidence.min() <= 0.0 or self.confidence.max() > 1.0):
            raise ValueError("confidence must lie in (0, 1]")

    @classmethod
    def from_probs(cls, probs, actual) -> "PredictionLog":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs.max(axis=1), np.argmax(probs, axis=1), actual)

    def __len__(self) -> int:
        return len(self.confidence)


@dataclass(frozen=True)
class CalibrationBins:
    """Per-bin tallies; accuracy and confidence are 0 where count is 0."""

    n_bins: int
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    def edges(self, i: int) -> tuple[float, float]:
        return i / self.n_bins, (i + 1) / self.n_bins


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    mce: float
    bins: CalibrationBins


def bin_predictions(log: PredictionLog, n_bins: int = 10) -> CalibrationBins:
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if len(log) == 0:
        raise ValueError("prediction log is empty")
    # canonical order: per-bin sums come out bitwise identical for any
    # permutation of the log
    order = np.argsort(log.confidence, kind="stable")
    conf = log.confidence[order]
    hits = (log.predicted[order] == log.actual[order]).astype(np.float64)
    # ceil(c * n_bins), clipped into [1, n_bins], then to zero-based
    idx = np.ceil(conf * n_bins).astype(np.int64)
    idx = np.clip(idx, 1, n_bins) - 1
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=hits, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    safe = np.where(counts > 0, counts, 1)
    return CalibrationBins(
        n_bins=n_bins,
        counts=counts,
        accuracy=np.where(counts > 0, acc_sum / safe, 0.0),
        confidence=np.where(counts > 0, conf_sum / safe, 0.0),
    )


def _nonempty(bins: CalibrationBins):
    mask = bins.counts > 0
    if not mask.any():
        raise ValueError("all bins are empty")
    return mask


def ece(bins: CalibrationBins) -> float:
    mask = _nonempty(bins)
    n = bins.counts.sum()
    gaps = np.abs(bins.accuracy - bins.confidence)
    return float((bins.counts[mask] / n * gaps[mask]).sum())


def mce(bins: CalibrationBins) -> float:
    mask = _nonempty(bins)
    return float(np.abs(bins.accuracy - bins.confidence)[mask].max())


def calibration_report(log: PredictionLog, n_bins: int = 10) -> CalibrationReport:
    bins = bin_predictions(log, n_bins)
    return CalibrationReport(ece=ece(bins), mce=mce(bins), bins=bins)


def bins_csv_text(bins: CalibrationBins) -> str:
    """Nonempty bins only, matching the gaps in the published-style charts."""
    lines = ["bin_lo,bin_hi,count,accuracy,confidence"]
    for i in range(bins.n_bins):
        if bins.counts[i] == 0:
            continue
        lo, hi = bins.edges(i)
        lines.append(
            f"{lo!r},{hi!r},{int(bins.counts[i])},"
            f"{float(bins.accuracy[i])!r},{float(bins.confidence[i])!r}"
        )
    return "\n".join(lines) + "\n"


def _svg_text(bins: CalibrationBins) -> str:
    # 320x320 canvas with a 40px margin; accuracy bars over confidence bins,
    # identity diagonal for reference
    size, margin = 320, 40
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    def sy(v):
        return size - margin - v * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(0):.2f}" stroke="black"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(0):.2f}" y2="{sy(1):.2f}" stroke="black"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(1):.2f}" '
        f'stroke="gray" stroke-dasharray="4 3"/>',
    ]
    for i in range(bins.n_bins):
        if bins.counts[i] == 0:
            continue
        lo, hi = bins.edges(i)
        acc = float(bins.accuracy[i])
        conf = float(bins.confidence[i])
        parts.append(
            f'<rect x="{sx(lo):.2f}" y="{sy(acc):.2f}" width="{(hi - lo) * span:.2f}" '
            f'height="{(sy(0) - sy(acc)):.2f}" fill="steelblue" stroke="black" '
            f'stroke-width="0.5"/>'
        )
        parts.append(
            f'<line x1="{sx(lo):.2f}" y1="{sy(conf):.2f}" x2="{sx(hi):.2f}" '
            f'y2="{sy(conf):.2f}" stroke="crimson" stroke-width="1.5"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def reliability_diagram(bins: CalibrationBins, out_path) -> tuple[Path, Path]:
    """Write per-bin CSV to out_path and a bar chart alongside it (.svg);
    output bytes depend only on the bins."""
    csv_path = Path(out_path)
    svg_path = csv_path.with_suffix(".svg")
    csv_path.write_text(bins_csv_text(bins))
    svg_path.write_text(_svg_text(bins))
    return csv_path, svg_path
