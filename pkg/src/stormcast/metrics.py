"""Forecast verification: contingency counts, CSI, masked MAE, lead-time tables.

Aggregation across samples is micro-averaged: contingency counts pool before
the CSI ratio is taken. Frames where neither mask contains any convection are
degenerate; they score 1.0 individually but are excluded from pooling and
tallied separately so empty scenes cannot inflate a report.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .detection import ConvectionMask, threshold_detect
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ContingencyCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("contingency counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ContingencyCounts") -> "ContingencyCounts":
        return ContingencyCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def _mask_array(m) -> np.ndarray:
    return m.mask if isinstance(m, ConvectionMask) else np.asarray(m)


def contingency(pred, truth) -> ContingencyCounts:
    """Per-pixel tallies; tn is carried for completeness though CSI ignores it."""
    p = _mask_array(pred).astype(bool)
    t = _mask_array(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"mask grids differ: {p.shape} vs {t.shape}")
    return ContingencyCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def degenerate(c: ContingencyCounts) -> bool:
    """Neither mask contained any convection; CSI is undefined there."""
    return c.tp + c.fn + c.fp == 0


def csi(c: ContingencyCounts) -> float:
    """tp/(tp+fn+fp); the empty-vs-empty case scores 1.0 (see `degenerate`)."""
    denom = c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0
    return c.tp / denom


def masked_mae(pred, truth, pred_mask, truth_mask) -> float:
    """Mean over every pixel of |pred*pred_mask - truth*truth_mask|, kelvin.

    Masked-out pixels contribute the full magnitude of whichever side stays
    masked in; the literal Hadamard form, not a convective-pixel-only mean.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    pm = _mask_array(pred_mask)
    tm = _mask_array(truth_mask)
    if not (pred.shape == truth.shape == pm.shape == tm.shape):
        raise DimensionError(
            f"grids differ: pred {pred.shape}, truth {truth.shape}, "
            f"masks {pm.shape}/{tm.shape}"
        )
    return float(np.mean(np.abs(pred * pm - truth * tm)))


@dataclass
class LeadTimeReport:
    """Pooled scores per lead step plus the all-steps aggregate."""

    interval_minutes: int
    csi: List[float]  # one per lead step, pooled over samples
    mae: List[float]  # arithmetic mean over samples
    n_samples: List[int]
    n_degenerate: List[int]  # frames excluded from the CSI pool
    csi_all: float
    mae_all: float

    @property
    def k(self) -> int:
        return len(self.csi)

    def lead_minutes(self, step: int) -> int:
        return (step + 1) * self.interval_minutes


def leadtime_report(
    predictions: Sequence[Tuple[np.ndarray, np.ndarray]],
    detector: Callable[[np.ndarray], ConvectionMask] = threshold_detect,
    interval_minutes: int = 15,
) -> LeadTimeReport:
    """Score (forecast, truth) kelvin sequence pairs per lead step.

    Counts pool across samples before the CSI ratio (micro-average); MAE is
    the arithmetic mean over samples. Both-empty frames leave the CSI pool.
    """
    if not predictions:
        raise ContractError("no prediction pairs to evaluate")
    k = np.asarray(predictions[0][0]).shape[0]
    for y_hat, y in predictions:
        if np.asarray(y_hat).shape[0] != k or np.asarray(y).shape[0] != k:
            raise ContractError("all sequences must share the same forecast length")
    pooled = [ContingencyCounts(0, 0, 0, 0) for _ in range(k)]
    mae_sums = np.zeros(k)
    n_samples = [0] * k
    n_degenerate = [0] * k
    for y_hat, y in predictions:
        y_hat = np.asarray(y_hat)
        y = np.asarray(y)
        for s in range(k):
            pm = detector(y_hat[s])
            tm = detector(y[s])
            c = contingency(pm, tm)
            n_samples[s] += 1
            if degenerate(c):
                n_degenerate[s] += 1
            else:
                pooled[s] = pooled[s] + c
            mae_sums[s] += masked_mae(y_hat[s], y[s], pm, tm)
    per_step_csi = [csi(c) for c in pooled]
    per_step_mae = [float(m / n) for m, n in zip(mae_sums, n_samples)]
    total = ContingencyCounts(0, 0, 0, 0)
    for c in pooled:
        total = total + c
    return LeadTimeReport(
        interval_minutes=interval_minutes,
        csi=per_step_csi,
        mae=per_step_mae,
        n_samples=n_samples,
        n_degenerate=n_degenerate,
        csi_all=csi(total),
        mae_all=float(mae_sums.sum() / sum(n_samples)),
    )


def write_report_csv(report: LeadTimeReport, path) -> None:
    """One row per lead step plus an ALL aggregate row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lead_minutes", "csi", "mae", "n_samples", "n_degenerate"])
        for s in range(report.k):
            writer.writerow(
                [
                    report.lead_minutes(s),
                    f"{report.csi[s]:.6f}",
                    f"{report.mae[s]:.6f}",
                    report.n_samples[s],
                    report.n_degenerate[s],
                ]
            )
        writer.writerow(
            [
                "ALL",
                f"{report.csi_all:.6f}",
                f"{report.mae_all:.6f}",
                sum(report.n_samples),
                sum(report.n_degenerate),
            ]
        )
