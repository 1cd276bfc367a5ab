"""Episode annotations, clip extraction and labeling, resampling, splits.

Label order everywhere is ``LABELS``: ventilation, stimulation, suction,
baby_on_table.  Annotation times are integer milliseconds so the 50% rule
is evaluated exactly.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("ventilation", "stimulation", "suction", "baby_on_table")
VENT, STIM, SUCT, BABY = range(4)
ACTIVITIES = LABELS[:3]


class SchemaError(ValueError):
    pass


class AnnotationValidationError(ValueError):
    pass


class LabelConflictError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class SplitError(ValueError):
    pass


# -- labels ---------------------------------------------------------------

@dataclass(frozen=True)
class LabelVector:
    """Four binary flags in ``LABELS`` order."""

    y: tuple[int, int, int, int]

    def __post_init__(self):
        y = tuple(int(v) for v in self.y)
        if len(y) != 4 or any(v not in (0, 1) for v in y):
            raise ValueError(f"label vector needs 4 binary flags, got {self.y!r}")
        if y[VENT] and y[SUCT]:
            raise LabelConflictError("ventilation and suction cannot both be active")
        object.__setattr__(self, "y", y)

    @classmethod
    def from_bits(cls, bits: str) -> "LabelVector":
        return cls(tuple(int(c) for c in bits))

    @property
    def bits(self) -> str:
        return "".join(str(v) for v in self.y)

    @property
    def contained(self) -> bool:
        """True unless an activity flag is set while baby_on_table is 0."""
        return self.y[BABY] == 1 or not any(self.y[:3])

    def as_array(self) -> np.ndarray:
        return np.array(self.y, dtype=np.int64)

    def __getitem__(self, i: int) -> int:
        return self.y[i]


# -- annotations ----------------------------------------------------------

@dataclass
class AnnotationTrack:
    label: str
    intervals: list[tuple[int, int]] = field(default_factory=list)

    def normalized(self) -> "AnnotationTrack":
        return AnnotationTrack(self.label, merge_intervals(self.intervals))

    def overlap_ms(self, start_ms: int, end_ms: int) -> int:
        total = 0
        for s, e in self.intervals:
            lo, hi = max(s, start_ms), min(e, end_ms)
            if hi > lo:
                total += hi - lo
        return total


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Merge overlapping (and touching) half-open intervals."""
    merged: list[list[int]] = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def parse_annotations(path) -> list[AnnotationTrack]:
    """Read a ``label,start_ms,end_ms`` CSV into one merged track per label."""
    tracks: dict[str, list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["label", "start_ms", "end_ms"]:
            raise SchemaError(f"{path}: expected header 'label,start_ms,end_ms', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise SchemaError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            label = row[0].strip()
            if label not in LABELS:
                raise SchemaError(
                    f"{path}:{lineno}: unknown label {label!r}; allowed: {', '.join(LABELS)}")
            try:
                start, end = int(row[1]), int(row[2])
            except ValueError:
                raise AnnotationValidationError(
                    f"{path}:{lineno}: start/end must be integer milliseconds") from None
            if end <= start:
                raise AnnotationValidationError(
                    f"{path}:{lineno}: end_ms ({end}) must exceed start_ms ({start})")
            tracks.setdefault(label, []).append((start, end))
    return [AnnotationTrack(lab, merge_intervals(iv)) for lab, iv in tracks.items()]


def write_annotations(path, tracks: Sequence[AnnotationTrack]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "start_ms", "end_ms"])
        for tr in tracks:
            for s, e in tr.intervals:
                w.writerow([tr.label, s, e])


# -- frames and clips -----------------------------------------------------

class FrameSource(Protocol):
    fps: int

    def __len__(self) -> int: ...

    def frame(self, k: int) -> np.ndarray: ...


class ArrayFrames:
    """Frame source over an in-memory ``(N, h, w, c)`` array."""

    def __init__(self, frames: np.ndarray, fps: int):
        self.frames = np.asarray(frames)
        self.fps = fps

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, k: int) -> np.ndarray:
        return self.frames[k]


@dataclass
class Episode:
    source_id: str
    frames: FrameSource
    duration_s: float

    @property
    def fps(self) -> int:
        return self.frames.fps


@dataclass
class VideoClip:
    """A window of an episode; frames are materialized on demand."""

    source_id: str
    start_time: float
    fps: int
    n_frames: int
    source: FrameSource = field(repr=False)
    first_frame: int = 0

    @property
    def clip_id(self) -> str:
        return clip_id(self.source_id, self.start_time)

    @property
    def end_time(self) -> float:
        return self.start_time + self.n_frames / self.fps

    def frame(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_frames:
            raise IndexError(i)
        return self.source.frame(self.first_frame + i)

    @property
    def frames(self) -> np.ndarray:
        return np.stack([self.frame(i) for i in range(self.n_frames)])


def clip_id(source_id: str, start_time: float) -> str:
    return f"{source_id}@{int(round(start_time * 1000)):08d}"


@dataclass
class ConflictRecord:
    source_id: str
    start_time: float
    coverage_ms: dict[str, int]
    reason: str


class ExtractedClips(list):
    """List of ``(VideoClip, LabelVector)`` plus rejected-window records."""

    def __init__(self, items=(), conflicts=None, warnings=None):
        super().__init__(items)
        self.conflicts: list[ConflictRecord] = list(conflicts or [])
        self.warnings: list[ConflictRecord] = list(warnings or [])


def window_labels(tracks: Sequence[AnnotationTrack], start_ms: int, window_ms: int) -> tuple[tuple[int, ...], dict[str, int]]:
    """Apply the inclusive >=50% coverage rule to one window."""
    by_label = {t.label: t for t in tracks}
    cover = {}
    flags = []
    for lab in LABELS:
        tr = by_label.get(lab)
        ov = tr.overlap_ms(start_ms, start_ms + window_ms) if tr else 0
        cover[lab] = ov
        flags.append(1 if 2 * ov >= window_ms else 0)
    return tuple(flags), cover


def extract_clips(episode: Episode, tracks: Sequence[AnnotationTrack], window_s: float = 3.0,
                  stride_s: float = 3.0) -> ExtractedClips:
    """Tile an episode into windows and label each one.

    Windows where ventilation and suction both reach 50% coverage are left
    out and reported in ``.conflicts``; windows where an activity is set
    without baby_on_table are kept but reported in ``.warnings``.
    """
    if window_s <= 0 or stride_s <= 0:
        raise ParameterError("window_s and stride_s must be positive")
    fps = episode.fps
    window_ms = int(round(window_s * 1000))
    stride_ms = int(round(stride_s * 1000))
    duration_ms = int(round(episode.duration_s * 1000))
    n_f = int(round(window_s * fps))
    tracks = [t.normalized() for t in tracks]
    out = ExtractedClips()
    start = 0
    while start + window_ms <= duration_ms:
        flags, cover = window_labels(tracks, start, window_ms)
        t0 = start / 1000
        first = int(round(t0 * fps))
        if first + n_f > len(episode.frames):
            break
        if flags[VENT] and flags[SUCT]:
            out.conflicts.append(ConflictRecord(episode.source_id, t0, cover,
                                                "ventilation and suction both >= 50%"))
        else:
            y = LabelVector(flags)
            if not y.contained:
                log.warning("%s@%.3fs: activity without baby_on_table", episode.source_id, t0)
                out.warnings.append(ConflictRecord(episode.source_id, t0, cover,
                                                   "activity flag without baby_on_table"))
            clip = VideoClip(episode.source_id, t0, fps, n_f, episode.frames, first)
            out.append((clip, y))
        start += stride_ms
    return out


# -- resampling -----------------------------------------------------------

def frame_indices(n_frames: int, t: int) -> list[int]:
    """Uniform temporal indices with both endpoints pinned (middle frame for t=1)."""
    if not 1 <= t <= n_frames:
        raise ParameterError(f"target frame count {t} must be in [1, {n_frames}]")
    if t == 1:
        return [(n_frames - 1) // 2]
    return [(i * (n_frames - 1)) // (t - 1) for i in range(t)]


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``(..., H, W, C)`` with half-pixel centers."""
    H, W = img.shape[-3], img.shape[-2]
    if (H, W) == (h, w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(H, h)
    x0, x1, fx = coords(W, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[..., y0, :, :][..., :, x0, :] * (1 - fx) + img[..., y0, :, :][..., :, x1, :] * fx
    bot = img[..., y1, :, :][..., :, x0, :] * (1 - fx) + img[..., y1, :, :][..., :, x1, :] * fx
    return top * (1 - fy) + bot * fy


def resample_frames(frames: np.ndarray, t: int, size: tuple[int, int] | None = None) -> np.ndarray:
    idx = frame_indices(len(frames), t)
    out = np.asarray(frames, dtype=np.float64)[idx]
    if size is not None:
        out = bilinear_resize(out, *size)
    return np.clip(out, 0.0, 1.0)


def resample_clip(clip: VideoClip, t: int, size: tuple[int, int] | None = None) -> np.ndarray:
    """Select ``t`` frames of a clip and resize them; only those frames are rendered."""
    idx = frame_indices(clip.n_frames, t)
    frames = np.stack([clip.frame(i) for i in idx]).astype(np.float64)
    if size is not None:
        frames = bilinear_resize(frames, *size)
    return np.clip(frames, 0.0, 1.0)


# -- splits ---------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]


def split_dataset(clips: Sequence, test_fraction: float, group_by_episode: bool = True,
                  seed: int = 0) -> DatasetSplit:
    """Split labeled clips (``(VideoClip, LabelVector)`` pairs or clips) by id."""
    if not 0 < test_fraction < 1:
        raise ParameterError("test_fraction must be strictly between 0 and 1")
    items = [c[0] if isinstance(c, tuple) else c for c in clips]
    ids = [c.clip_id for c in items]
    rng = np.random.default_rng(seed)
    if group_by_episode:
        groups = sorted({c.source_id for c in items})
        if len(groups) < 2:
            raise SplitError("grouped split needs at least 2 episodes")
        n_test = min(max(int(round(test_fraction * len(groups))), 1), len(groups) - 1)
        test_groups = {groups[i] for i in rng.permutation(len(groups))[:n_test]}
        test = [i for i, c in zip(ids, items) if c.source_id in test_groups]
    else:
        n_test = min(max(int(round(test_fraction * len(ids))), 1), len(ids) - 1)
        chosen = set(rng.permutation(len(ids))[:n_test].tolist())
        test = [i for k, i in enumerate(ids) if k in chosen]
    test_set = set(test)
    return DatasetSplit([i for i in ids if i not in test_set], test)


def group_split(groups: Sequence[str], fraction: float, seed: int) -> np.ndarray:
    """Boolean mask selecting about ``fraction`` of the distinct groups."""
    uniq = sorted(set(groups))
    if len(uniq) < 2 or fraction <= 0:
        return np.zeros(len(groups), dtype=bool)
    n = min(max(int(round(fraction * len(uniq))), 1), len(uniq) - 1)
    rng = np.random.default_rng(seed)
    chosen = {uniq[i] for i in rng.permutation(len(uniq))[:n]}
    return np.array([g in chosen for g in groups])


# -- serialized clips and manifest ----------------------------------------

CLIP_MAGIC = b"NEOCLIP1"
_CLIP_HEADER = struct.Struct("<8s4I8x")
assert _CLIP_HEADER.size == 32


def write_clip(path, frames: np.ndarray) -> None:
    """Write ``(T, h, w, c)`` frames as little-endian float32 behind a 32-byte header."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError("frames must be (T, h, w, c)")
    with open(path, "wb") as fh:
        fh.write(_CLIP_HEADER.pack(CLIP_MAGIC, *frames.shape))
        fh.write(frames.astype("<f4").tobytes())


def read_clip(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, t, h, w, c = _CLIP_HEADER.unpack_from(raw)
    if magic != CLIP_MAGIC:
        raise ValueError(f"{path}: not a serialized clip")
    data = np.frombuffer(raw, dtype="<f4", offset=_CLIP_HEADER.size)
    if data.size != t * h * w * c:
        raise ValueError(f"{path}: truncated clip payload")
    return data.reshape(t, h, w, c).astype(np.float32)


MANIFEST_FIELDS = ("clip_id", "source_id", "start_time", "y", "path")


def write_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: r.get(k, "") for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["start_time"] = float(r["start_time"])
    return rows
