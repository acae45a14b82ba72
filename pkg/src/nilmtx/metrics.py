"""Accuracy, F1, MAE and MRE on appliance power and on/off states.

Sums use :func:`math.fsum` so results are correctly rounded and do not
depend on summation order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InstrumentationError

MRE_DEFINITION = "mean(|pred - true| / max(true, pred, on_threshold))"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    acc: float
    f1: float
    mre: float
    mae: float
    seconds_per_epoch: list[float] = field(default_factory=list)

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.seconds_per_epoch)) if self.seconds_per_epoch else 0.0


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise DimensionError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    return pred, true


def confusion(pred_states, true_states) -> ConfusionCounts:
    pred, true = _pair(pred_states, true_states)
    p = pred > 0
    t = true > 0
    return ConfusionCounts(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)), tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t))
    )


def accuracy(pred_states, true_states) -> float:
    c = confusion(pred_states, true_states)
    return (c.tp + c.tn) / c.total if c.total else 0.0


def f1_from_counts(c: ConfusionCounts) -> float:
    if c.tp == 0:
        return 1.0 if c.fp == 0 and c.fn == 0 else 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return 2 * precision * recall / (precision + recall)


def f1(pred_states, true_states) -> float:
    """F1 of the on state; 1 when nothing is on in either sequence."""
    return f1_from_counts(confusion(pred_states, true_states))


def mae(pred_watts, true_watts) -> float:
    pred, true = _pair(pred_watts, true_watts)
    if pred.size == 0:
        return 0.0
    return math.fsum(np.abs(pred.astype(float) - true.astype(float)).tolist()) / pred.size


def mre(pred_watts, true_watts, floor) -> float:
    """Relative error per step against max(true, pred, floor), averaged.

    ``floor`` is the on-threshold in watts, or an appliance spec carrying one.
    """
    floor = getattr(floor, "on_threshold", floor)
    pred, true = _pair(pred_watts, true_watts)
    if pred.size == 0:
        return 0.0
    pred = pred.astype(float)
    true = true.astype(float)
    denom = np.maximum(np.maximum(true, pred), float(floor))
    return math.fsum((np.abs(pred - true) / denom).tolist()) / pred.size


def states_from_watts(watts, on_threshold: float) -> np.ndarray:
    return np.where(np.asarray(watts) >= on_threshold, 1, -1)


def evaluate(pred_watts, true_watts, on_threshold: float, seconds_per_epoch=()) -> MetricsReport:
    """All four metrics, with states thresholded from the power series."""
    pred_s = states_from_watts(pred_watts, on_threshold)
    true_s = states_from_watts(true_watts, on_threshold)
    return MetricsReport(
        acc=accuracy(pred_s, true_s),
        f1=f1(pred_s, true_s),
        mre=mre(pred_watts, true_watts, on_threshold),
        mae=mae(pred_watts, true_watts),
        seconds_per_epoch=list(seconds_per_epoch),
    )


class EpochTimer:
    """Collects wall-clock seconds between paired ``begin``/``end`` calls."""

    def __init__(self, clock=time.perf_counter):
        self._clock = clock
        self._started: float | None = None
        self.seconds: list[float] = []

    def begin(self) -> None:
        if self._started is not None:
            raise InstrumentationError("begin() called twice without end()")
        self._started = self._clock()

    def end(self) -> float:
        if self._started is None:
            raise InstrumentationError("end() called without begin()")
        elapsed = self._clock() - self._started
        self._started = None
        self.seconds.append(elapsed)
        return elapsed
