"""Per-class and macro F1 reports, table rendering, and activity timelines."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LABELS, SUCT, VENT
from .metrics import confusion, f1_from_counts, macro_f1, round_half_up

log = logging.getLogger(__name__)

SHORT = {"baby_on_table": "bv", "ventilation": "vent", "stimulation": "stim", "suction": "suct"}
COLUMNS = (("baby_on_table", "B.V."), ("ventilation", "Vent."), ("stimulation", "Stim."), ("suction", "Suct."))
EPS = 1e-9


class CoverageError(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"{len(missing)} clips have no prediction: {', '.join(missing[:20])}"
                         + (" ..." if len(missing) > 20 else ""))
        self.missing = missing


class TimelineInputError(ValueError):
    pass


@dataclass
class PredictionSet:
    """Per-clip probabilities (or 0/1 hard labels) with ground truth, in ``LABELS`` column order.

    ``classes`` names the columns a method actually predicts; the rest are
    ignored by :func:`per_class_f1` (a protocol that never scores B.V., say).
    """

    clip_ids: list[str]
    probs: np.ndarray
    truth: np.ndarray
    spans: np.ndarray
    source_ids: list[str]
    classes: tuple[str, ...] = LABELS

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1, len(LABELS))
        self.truth = np.asarray(self.truth, dtype=np.int64).reshape(-1, len(LABELS))
        self.spans = np.asarray(self.spans, dtype=np.float64).reshape(-1, 2)
        n = len(self.clip_ids)
        if not (len(self.probs) == len(self.truth) == len(self.spans) == len(self.source_ids) == n):
            raise ValueError("prediction set fields disagree in length")
        if np.isnan(self.probs).any() or (self.probs < 0).any() or (self.probs > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")
        if len(set(self.clip_ids)) != n:
            raise ValueError("clip ids must be unique")
        if (self.spans[:, 1] <= self.spans[:, 0]).any():
            raise ValueError("every clip span needs end > start")
        unknown = set(self.classes) - set(LABELS)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.clip_ids)

    def hard(self, threshold: float = 0.5) -> np.ndarray:
        return (self.probs >= threshold).astype(np.int64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id", "source_id", "start_s", "end_s"] + [f"p_{l}" for l in LABELS]
                       + [f"y_{l}" for l in LABELS])
            for i, cid in enumerate(self.clip_ids):
                w.writerow([cid, self.source_ids[i], repr(float(self.spans[i, 0])), repr(float(self.spans[i, 1]))]
                           + [repr(float(v)) for v in self.probs[i]] + [int(v) for v in self.truth[i]])
        meta = Path(str(path) + ".classes")
        if tuple(self.classes) != LABELS:
            meta.write_text(",".join(self.classes) + "\n")
        elif meta.exists():
            meta.unlink()

    @classmethod
    def from_csv(cls, path) -> "PredictionSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        meta = Path(str(path) + ".classes")
        classes = tuple(meta.read_text().strip().split(",")) if meta.exists() else LABELS
        return cls([r["clip_id"] for r in rows],
                   [[float(r[f"p_{l}"]) for l in LABELS] for r in rows],
                   [[int(r[f"y_{l}"]) for l in LABELS] for r in rows],
                   [[float(r["start_s"]), float(r["end_s"])] for r in rows],
                   [r["source_id"] for r in rows], classes)


# -- metrics ------------------------------------------------------------------

def per_class_f1(preds: PredictionSet, threshold: float = 0.5) -> np.ndarray:
    """F1 per class in ``LABELS`` order; NaN for classes the method does not predict."""
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    tp, fp, fn = confusion(preds.hard(threshold), preds.truth)
    out = np.full(len(LABELS), np.nan)
    for c, lab in enumerate(LABELS):
        if lab in preds.classes:
            out[c] = f1_from_counts(int(tp[c]), int(fp[c]), int(fn[c]))
    return out


@dataclass
class MetricsReport:
    method: str
    per_class: dict            # short name -> F1 or None
    macro_f1: float
    support: dict              # short name -> positive count
    conflicts: int = 0
    hallucinations: int = 0
    threshold: float = 0.5
    missing_class_as_zero: bool = False
    flags: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate_method(method: str, preds: PredictionSet, threshold: float = 0.5,
                    expected_ids: Sequence[str] | None = None, missing_class_as_zero: bool = False,
                    conflicts: int = 0, hallucinations: int = 0) -> MetricsReport:
    """Per-class F1, macro-F1 and support.

    Classes outside ``preds.classes`` are left out of the mean unless
    ``missing_class_as_zero``, which counts them as 0.
    """
    if expected_ids is not None:
        have = set(preds.clip_ids)
        missing = [c for c in expected_ids if c not in have]
        if missing:
            raise CoverageError(missing)
    f1 = per_class_f1(preds, threshold)
    flags = []
    tp, fp, fn = confusion(preds.hard(threshold), preds.truth)
    vals = []
    for c, lab in enumerate(LABELS):
        if np.isnan(f1[c]):
            if missing_class_as_zero:
                vals.append(0.0)
            flags.append(f"not_predicted:{SHORT[lab]}")
            continue
        if tp[c] + fp[c] + fn[c] == 0:
            flags.append(f"empty_support:{SHORT[lab]}")
        vals.append(float(f1[c]))
    support = {SHORT[l]: int(preds.truth[:, c].sum()) for c, l in enumerate(LABELS)}
    per = {SHORT[l]: (None if np.isnan(f1[c]) else float(f1[c])) for c, l in enumerate(LABELS)}
    return MetricsReport(method, per, macro_f1(vals), support, int(conflicts), int(hallucinations),
                         float(threshold), bool(missing_class_as_zero), flags)


def format_score(x: float | None) -> str:
    """2 decimals, or 3 for values >= 0.99 (trailing zeros beyond 2 dropped)."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "-"
    if x >= 0.99:
        s = f"{round_half_up(x, 3):.3f}"
        return s[:-1] if s.endswith("0") else s
    return f"{round_half_up(x, 2):.2f}"


def render_table(reports: Sequence[MetricsReport]) -> str:
    head = ["Method"] + [c for _, c in COLUMNS] + ["mAv"]
    rows = [[r.method] + [format_score(r.per_class[SHORT[l]]) for l, _ in COLUMNS] + [format_score(r.macro_f1)]
            for r in reports]
    widths = [max(len(str(row[i])) for row in [head] + rows) for i in range(len(head))]
    line = lambda row: "| " + " | ".join(str(v).ljust(w) for v, w in zip(row, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(head), sep] + [line(r) for r in rows]) + "\n"


# -- timelines ---------------------------------------------------------------------

@dataclass(frozen=True)
class TimelineSegment:
    activity: str
    start_s: float
    end_s: float
    source_id: str

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"segment needs end_s > start_s, got [{self.start_s}, {self.end_s})")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class Violation:
    source_id: str
    clip_id: str
    start_s: float
    end_s: float
    kept: str
    dropped: str
    kept_mean_prob: float
    dropped_mean_prob: float


@dataclass
class Timeline:
    segments: list[TimelineSegment]
    violations: list[Violation]


def _runs(on: np.ndarray, spans: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[i, j)`` of positive clips that touch end to start."""
    runs, i, n = [], 0, len(on)
    while i < n:
        if not on[i]:
            i += 1
            continue
        j = i + 1
        while j < n and on[j] and abs(spans[j, 0] - spans[j - 1, 1]) <= EPS:
            j += 1
        runs.append((i, j))
        i = j
    return runs


def stitch_timeline(preds: PredictionSet, threshold: float = 0.5, min_duration_s: float = 0.0) -> Timeline:
    """Merge consecutive positive clips into segments, per episode and class.

    Where ventilation and suction are both positive in a clip, the class
    whose merged segment has the higher mean probability keeps the clip
    (ventilation on ties), the other is cut there, and a violation is
    recorded.  Segments shorter than ``min_duration_s`` are dropped last.
    """
    if min_duration_s < 0:
        raise ValueError("min_duration_s must be >= 0")
    segments, violations = [], []
    for sid in dict.fromkeys(preds.source_ids):
        idx = [i for i, s in enumerate(preds.source_ids) if s == sid]
        idx.sort(key=lambda i: (preds.spans[i, 0], preds.spans[i, 1]))
        spans = preds.spans[idx]
        for a in range(1, len(idx)):
            if spans[a, 0] < spans[a - 1, 1] - EPS:
                raise TimelineInputError(
                    f"{sid}: clips {preds.clip_ids[idx[a - 1]]} and {preds.clip_ids[idx[a]]} overlap")
        probs = preds.probs[idx]
        on = probs >= threshold
        seg_mean = np.zeros_like(probs)
        for c in (VENT, SUCT):
            for i, j in _runs(on[:, c], spans):
                seg_mean[i:j, c] = probs[i:j, c].mean()
        for k in np.flatnonzero(on[:, VENT] & on[:, SUCT]):
            keep, drop = (VENT, SUCT) if seg_mean[k, VENT] >= seg_mean[k, SUCT] else (SUCT, VENT)
            on[k, drop] = False
            v = Violation(sid, preds.clip_ids[idx[k]], float(spans[k, 0]), float(spans[k, 1]), LABELS[keep],
                          LABELS[drop], float(seg_mean[k, keep]), float(seg_mean[k, drop]))
            log.info("exclusion violation %s: kept %s", v.clip_id, v.kept)
            violations.append(v)
        for c, lab in enumerate(LABELS):
            if lab not in preds.classes:
                continue
            for i, j in _runs(on[:, c], spans):
                seg = TimelineSegment(lab, float(spans[i, 0]), float(spans[j - 1, 1]), sid)
                if seg.duration_s >= min_duration_s - EPS:
                    segments.append(seg)
    return Timeline(segments, violations)


def rewindow(segments: Sequence[TimelineSegment], preds: PredictionSet) -> np.ndarray:
    """Clip labels from segments by the 50% overlap rule, in ``preds`` order."""
    by_key: dict[tuple, list] = {}
    for s in segments:
        by_key.setdefault((s.source_id, s.activity), []).append(s)
    out = np.zeros((len(preds), len(LABELS)), dtype=np.int64)
    for i, sid in enumerate(preds.source_ids):
        a, b = preds.spans[i]
        for c, lab in enumerate(LABELS):
            ov = sum(max(0.0, min(b, s.end_s) - max(a, s.start_s)) for s in by_key.get((sid, lab), ()))
            out[i, c] = int(2 * ov >= (b - a) - EPS)
    return out


def check_exclusion(segments: Sequence[TimelineSegment]) -> list[tuple[TimelineSegment, TimelineSegment]]:
    """Pairs of overlapping ventilation and suction segments (should be empty)."""
    bad = []
    vent = [s for s in segments if s.activity == "ventilation"]
    for s in segments:
        if s.activity != "suction":
            continue
        for v in vent:
            if v.source_id == s.source_id and min(v.end_s, s.end_s) - max(v.start_s, s.start_s) > EPS:
                bad.append((v, s))
    return bad


def write_timeline_csv(segments: Sequence[TimelineSegment], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "activity", "start_s", "end_s"])
        for s in segments:
            w.writerow([s.source_id, s.activity, f"{s.start_s:.3f}", f"{s.end_s:.3f}"])


def read_timeline_csv(path) -> list[TimelineSegment]:
    with open(path, newline="") as fh:
        return [TimelineSegment(r["activity"], float(r["start_s"]), float(r["end_s"]), r["source_id"])
                for r in csv.DictReader(fh)]


_COLORS = {"baby_on_table": "#9e9e9e", "ventilation": "#1f77b4", "stimulation": "#2ca02c", "suction": "#d62728"}


def timeline_svg(segments: Sequence[TimelineSegment], source_id: str, duration_s: float | None = None,
                 width: int = 800) -> str:
    """Standalone Gantt-style SVG, one lane per class."""
    segs = [s for s in segments if s.source_id == source_id]
    end = duration_s or max((s.end_s for s in segs), default=1.0)
    left, lane, top = 110, 26, 30
    scale = (width - left - 10) / max(end, EPS)
    h = top + lane * len(LABELS) + 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" '
             f'viewBox="0 0 {width} {h}" font-family="sans-serif" font-size="12">',
             f'<text x="10" y="18">{source_id}</text>']
    for k, lab in enumerate(LABELS):
        y = top + k * lane
        parts.append(f'<text x="10" y="{y + 16}">{lab}</text>')
        parts.append(f'<rect x="{left}" y="{y + 2}" width="{width - left - 10}" height="{lane - 6}" fill="#f3f3f3"/>')
        for s in segs:
            if s.activity == lab:
                parts.append(f'<rect x="{left + s.start_s * scale:.2f}" y="{y + 2}" '
                             f'width="{max(s.duration_s * scale, 0.5):.2f}" height="{lane - 6}" '
                             f'fill="{_COLORS[lab]}"><title>{lab} {s.start_s:.1f}-{s.end_s:.1f} s</title></rect>')
    axis_y = top + lane * len(LABELS) + 14
    step = max(1, int(round(end / 10)))
    for t in range(0, int(end) + 1, step):
        parts.append(f'<text x="{left + t * scale:.2f}" y="{axis_y}" text-anchor="middle">{t}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
