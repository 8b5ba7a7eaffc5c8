"""Evaluation metrics: accuracy, Recall@K, calibration error and a toy caption
score, plus the per-run report that gathers them."""
from typing import Iterable, List, Optional, Sequence, Set

import attr
import numpy as np

from numcore import ArrayLike

ECE_BINS = 10
RATE_FIELDS = ("top1", "top5", "recall1", "recall5", "recall10", "ece", "caption_f1")


def _check_lengths(a: Sequence[object], b: Sequence[object]) -> None:
    if len(a) != len(b):
        raise ValueError(f"Length mismatch: {len(a)} vs {len(b)}")


def bin_index(confidences: ArrayLike, bins: int = ECE_BINS) -> np.ndarray:
    """Equal-width bins over (lo, hi]; a confidence of exactly 0 joins the first."""
    conf = np.asarray(confidences, dtype=np.float64)
    return np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)


@attr.s(auto_attribs=True, frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.confidence)


def reliability_bins(
    confidences: ArrayLike, correct: ArrayLike, bins: int = ECE_BINS
) -> List[ReliabilityBin]:
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(correct, dtype=np.float64)
    _check_lengths(conf, hits)
    if bins < 1:
        raise ValueError(f"Need at least one bin, got {bins}")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("Confidences must lie in [0, 1]")

    index = bin_index(conf, bins)
    result = []
    for b in range(bins):
        members = index == b
        count = int(members.sum())
        result.append(
            ReliabilityBin(
                lower=b / bins,
                upper=(b + 1) / bins,
                count=count,
                accuracy=float(hits[members].mean()) if count else 0.0,
                confidence=float(conf[members].mean()) if count else 0.0,
            )
        )
    return result


def ece(confidences: ArrayLike, correct: ArrayLike, bins: int = ECE_BINS) -> float:
    """Σ_b (|B_b|/N) · |acc(B_b) − conf(B_b)|; empty bins contribute nothing."""
    table = reliability_bins(confidences, correct, bins)
    total = sum(b.count for b in table)
    if total == 0:
        return 0.0
    return float(sum(b.count / total * b.gap for b in table))


def top_k_accuracy(
    rankings: Sequence[Sequence[int]], truths: Sequence[int], k: int
) -> float:
    _check_lengths(rankings, truths)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if not truths:
        return 0.0
    return float(np.mean([truth in list(r)[:k] for r, truth in zip(rankings, truths)]))


def recall_at_k(
    rankings: Sequence[Sequence[int]], truths: Sequence[int], k: int
) -> float:
    """Fraction of queries whose single relevant item is among the first k."""
    return top_k_accuracy(rankings, truths, k)


def caption_attribute_f1(
    caption_attributes: Iterable[int], reference: Iterable[int]
) -> float:
    predicted: Set[int] = set(caption_attributes)
    truth: Set[int] = set(reference)
    if not predicted and not truth:
        return 1.0
    overlap = len(predicted & truth)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(truth)
    return 2 * precision * recall / (precision + recall)


@attr.s(auto_attribs=True, frozen=True)
class MetricsReport:
    samples: int
    top1: Optional[float] = None
    top5: Optional[float] = None
    recall1: Optional[float] = None
    recall5: Optional[float] = None
    recall10: Optional[float] = None
    ece: Optional[float] = None
    reward_gain: Optional[float] = None
    caption_f1: Optional[float] = None
    mean_reward: Optional[float] = None
    wall_time: Optional[float] = None

    def __attrs_post_init__(self) -> None:
        for name in RATE_FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is outside [0, 1]")

    def row(self) -> List[str]:
        """Table cells for the deterministic columns; wall time is reported apart."""
        return [str(self.samples)] + [
            "" if value is None else f"{value:.6f}"
            for value in (
                self.top1,
                self.top5,
                self.recall1,
                self.recall5,
                self.recall10,
                self.ece,
                self.reward_gain,
                self.caption_f1,
                self.mean_reward,
            )
        ]


REPORT_COLUMNS = [
    "samples",
    "top1",
    "top5",
    "recall1",
    "recall5",
    "recall10",
    "ece",
    "reward_gain",
    "caption_f1",
    "mean_reward",
]
