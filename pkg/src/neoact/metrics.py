"""Per-class and macro F1 on thresholded predictions."""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when the class is absent and never predicted."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def confusion(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    return tp, fp, fn


def f1_scores(probs: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """F1 per column of ``(N, C)`` probabilities (``>= threshold`` is positive)."""
    tp, fp, fn = confusion(np.asarray(probs) >= threshold, truth)
    return np.array([f1_from_counts(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)])


def macro_f1(per_class: Sequence[float]) -> float:
    vals = list(per_class)
    if not vals:
        raise ValueError("macro_f1 of an empty list")
    return float(sum(vals) / len(vals))


def round_half_up(x: float, places: int = 2) -> float:
    """Decimal rounding as printed in tables (0.695 -> 0.70).

    The value is first cut to 12 significant digits so accumulated float
    error (0.2274999...98) does not flip a half-way case.
    """
    q = Decimal(1).scaleb(-places)
    return float(Decimal(f"{float(x):.12g}").quantize(q, rounding=ROUND_HALF_UP))
