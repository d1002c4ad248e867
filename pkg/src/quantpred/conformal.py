"""Conformalized quantile regression: nonconformity scores, the
(1-alpha)(1+1/n) calibration constant, interval inflation, and coverage
evaluation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import DomainError, conformal_quantile


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    level: float  # target coverage 1 - alpha

    def __post_init__(self):
        if self.lower > self.upper:
            raise DomainError(f"lower {self.lower} exceeds upper {self.upper}")
        if not (0.0 <= self.level <= 1.0):
            raise DomainError(f"level {self.level} outside [0, 1]")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, y):
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    scores: np.ndarray
    qhat: float
    n: int

    def to_record(self) -> str:
        digest = hashlib.sha256(
            np.sort(np.asarray(self.scores, dtype="<f8")).tobytes()
        ).hexdigest()
        return (
            f"conformal-calibration v1\n"
            f"alpha={self.alpha!r}\n"
            f"n={self.n}\n"
            f"qhat={self.qhat!r}\n"
            f"score_sha256={digest}\n"
        )

    @classmethod
    def from_record(cls, text: str) -> "ConformalCalibration":
        lines = text.strip().splitlines()
        if not lines or lines[0] != "conformal-calibration v1":
            raise DomainError("not a conformal-calibration record")
        kv = dict(line.split("=", 1) for line in lines[1:])
        # scores are summarized by digest only; the record carries qhat
        return cls(
            alpha=float(kv["alpha"]),
            scores=np.array([]),
            qhat=float(kv["qhat"]),
            n=int(kv["n"]),
        )


def nonconformity_score(y, lower, upper) -> float:
    """max(lower - y, y - upper): negative strictly inside the band,
    the outside distance when outside."""
    if lower > upper:
        raise DomainError(f"lower {lower} exceeds upper {upper}")
    return float(max(lower - y, y - upper))


def calibrate(calibration_set, alpha) -> ConformalCalibration:
    """Score each (y, lower, upper) triple and take the conformal quantile."""
    triples = list(calibration_set)
    if not triples:
        raise DomainError("calibration set must be non-empty")
    scores = np.array(
        [nonconformity_score(y, lo, hi) for y, lo, hi in triples], dtype=float
    )
    qhat = conformal_quantile(scores, alpha, scores.size)
    return ConformalCalibration(float(alpha), scores, qhat, scores.size)


def conformalize(interval: PredictionInterval, cal: ConformalCalibration) -> PredictionInterval:
    """Inflate by qhat on both sides; a negative qhat larger than the
    half-width collapses the interval to its midpoint."""
    lo = interval.lower - cal.qhat
    hi = interval.upper + cal.qhat
    if hi < lo:
        mid = 0.5 * (interval.lower + interval.upper)
        lo = hi = mid
    return PredictionInterval(lo, hi, interval.level)


def evaluate_coverage(intervals, y_test):
    """Closed-interval empirical coverage and mean width."""
    intervals = list(intervals)
    y = np.asarray(y_test, dtype=float)
    if len(intervals) != y.size:
        raise DomainError(
            f"{len(intervals)} intervals but {y.size} test targets"
        )
    if not intervals:
        raise DomainError("need at least one interval")
    hits = sum(iv.contains(yy) for iv, yy in zip(intervals, y))
    widths = np.array([iv.width for iv in intervals])
    return hits / y.size, float(widths.mean())
