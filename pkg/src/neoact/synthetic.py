"""Procedural toy resuscitation episodes with motion-coded activities.

Whenever the baby is on the table, three props are drawn at rest: a mask
disk above the head, a glove patch on the torso and a suction tube to the
right.  An activity only changes how its prop moves (disk pulses, glove
slides sideways, tube pushes into the body), so the rest pose of every
activity is the same picture and single frames are ambiguous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LABELS, AnnotationTrack, Episode

GRID_S = 0.2             # event times are multiples of this
EVENT_MIN_S, EVENT_MAX_S = 3.0, 15.0
PRESENCE_MIN_S, PRESENCE_MAX_S = 30.0, 120.0

VENT_HZ = 1.0
STIM_HZ = 1.6
SUCT_HZ = 0.5
NOISE_SIGMA = 0.05
MASK_RADIUS = 0.08

BACKGROUND = 0.25
BABY_RGB = np.array([0.90, 0.65, 0.60])
MASK_RGB = np.array([0.30, 0.55, 0.95])
GLOVE_RGB = np.array([0.15, 0.35, 1.00])
TUBE_RGB = np.array([0.95, 0.95, 0.95])

DEFAULT_FREQUENCIES = (0.45, 0.5, 0.3, 0.9)


@dataclass
class ScenarioScript:
    duration_s: float
    events: list[tuple[str, float, float]] = field(default_factory=list)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({"duration_s": self.duration_s, "seed": self.seed,
                           "events": [list(e) for e in self.events]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioScript":
        raw = json.loads(text)
        return cls(raw["duration_s"], [(a, float(s), float(e)) for a, s, e in raw["events"]], raw["seed"])

    def events_of(self, label: str) -> list[tuple[float, float]]:
        return [(s, e) for a, s, e in self.events if a == label]

    def tracks(self) -> list[AnnotationTrack]:
        out = []
        for lab in LABELS:
            iv = [(int(round(s * 1000)), int(round(e * 1000))) for s, e in self.events_of(lab)]
            if iv:
                out.append(AnnotationTrack(lab, sorted(iv)))
        return out


def _q(t: float) -> float:
    return round(round(t / GRID_S) * GRID_S, 6)


def _floor(t: float) -> float:
    return round(np.floor(t / GRID_S + 1e-9) * GRID_S, 6)


def _lane(rng, lo: float, hi: float, choices: list[tuple[str, float]]) -> list[tuple[str, float, float]]:
    """Fill [lo, hi] with non-overlapping events; each slot picks a choice or idles."""
    events = []
    t = lo + rng.uniform(0.0, 4.0)
    while True:
        u = rng.uniform()
        dur = rng.uniform(EVENT_MIN_S, EVENT_MAX_S)
        acc = 0.0
        picked = None
        for name, p in choices:
            acc += p
            if u < acc:
                picked = name
                break
        s, e = _q(t), min(_q(t + dur), _floor(hi))
        if picked and e - s >= EVENT_MIN_S:
            events.append((picked, s, e))
        t = e + GRID_S + rng.uniform(0.0, 2.0)
        if t + EVENT_MIN_S > hi:
            return events


def sample_script(duration_s: float, class_frequencies=DEFAULT_FREQUENCIES, seed: int = 0) -> ScenarioScript:
    """Random episode layout.

    ``class_frequencies`` are per-slot probabilities in ``LABELS`` order.
    Ventilation and suction share one lane so they never overlap;
    stimulation has its own lane; both lanes live inside baby presence.
    """
    if duration_s < 3:
        raise ValueError("duration_s must be at least 3")
    f = [float(x) for x in class_frequencies]
    if len(f) != 4 or any(not 0 <= x <= 1 for x in f):
        raise ValueError("class_frequencies must be 4 values in [0, 1]")
    fv, fst, fsu, fb = f
    if fv + fsu > 1:
        fv, fsu = fv / (fv + fsu), fsu / (fv + fsu)
    rng = np.random.default_rng(seed)
    events: list[tuple[str, float, float]] = []
    t = _q(rng.uniform(0.0, 10.0))
    while t + EVENT_MIN_S <= duration_s:
        if rng.uniform() < fb:
            s = t
            e = min(_q(s + rng.uniform(PRESENCE_MIN_S, PRESENCE_MAX_S)), _floor(duration_s))
            if e - s >= EVENT_MIN_S:
                events.append(("baby_on_table", s, e))
                events += _lane(rng, s, e, [("ventilation", fv), ("suction", fsu)])
                events += _lane(rng, s, e, [("stimulation", fst)])
            t = e
        t = _q(t + rng.uniform(EVENT_MIN_S, EVENT_MAX_S))
    events.sort(key=lambda ev: (ev[1], LABELS.index(ev[0])))
    return ScenarioScript(float(duration_s), events, seed)


def script_violations(script: ScenarioScript) -> list[str]:
    """Invariant breaches: vent/suction overlap, or an activity outside baby presence."""
    problems = []
    for vs, ve in script.events_of("ventilation"):
        for ss, se in script.events_of("suction"):
            if min(ve, se) > max(vs, ss):
                problems.append(f"ventilation [{vs},{ve}) overlaps suction [{ss},{se})")
    babies = script.events_of("baby_on_table")
    for a, s, e in script.events:
        if a != "baby_on_table" and not any(bs <= s and e <= be for bs, be in babies):
            problems.append(f"{a} [{s},{e}) outside baby_on_table")
    return problems


class EpisodeFrames:
    """Lazily rendered frames of one script; frame k is a pure function of (script, k)."""

    def __init__(self, script: ScenarioScript, h: int = 64, w: int = 64, fps: int = 25,
                 noise_sigma: float = NOISE_SIGMA):
        if h < 16 or w < 16:
            raise ValueError("frames must be at least 16x16")
        self.script, self.h, self.w, self.fps = script, h, w, fps
        self.noise_sigma = noise_sigma
        self.n_frames = int(round(script.duration_s * fps))
        yy, xx = np.mgrid[0:h, 0:w]
        self._y = (yy + 0.5) / h
        self._x = (xx + 0.5) / w
        self._baby = ((self._y - 0.58) / 0.22) ** 2 + ((self._x - 0.5) / 0.15) ** 2 <= 1.0
        self._mask_d2 = (self._y - 0.22) ** 2 + ((self._x - 0.5) * w / h) ** 2
        self._spans = {lab: script.events_of(lab) for lab in LABELS}

    def __len__(self) -> int:
        return self.n_frames

    def _phase(self, label: str, t: float) -> float | None:
        for s, e in self._spans[label]:
            if s <= t < e:
                return t - s
        return None

    def clean_frame(self, k: int) -> np.ndarray:
        t = (k + 0.5) / self.fps
        img = np.full((self.h, self.w, 3), BACKGROUND)
        if self._phase("baby_on_table", t) is None:
            return img
        img[self._baby] = BABY_RGB

        level, radius = 0.6, MASK_RADIUS
        tv = self._phase("ventilation", t)
        if tv is not None:
            s = np.sin(2 * np.pi * VENT_HZ * tv)
            level, radius = 0.6 + 0.4 * s, MASK_RADIUS * (1 + 0.4 * s)
        img[self._mask_d2 <= radius ** 2] = MASK_RGB * level

        cx = 0.5
        ts = self._phase("stimulation", t)
        if ts is not None:
            cx += 0.12 * np.sin(2 * np.pi * STIM_HZ * ts)
        glove = (np.abs(self._y - 0.6) <= 0.07) & (np.abs(self._x - cx) <= 0.07)
        img[glove] = GLOVE_RGB

        tip = 0.9
        tu = self._phase("suction", t)
        if tu is not None:
            tip -= 0.35 * (1 - np.cos(2 * np.pi * SUCT_HZ * tu)) / 2
        tube = (np.abs(self._y - 0.5) <= 1.0 / self.h + 1e-9) & (self._x >= tip)
        img[tube] = TUBE_RGB
        return img

    def frame(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_frames:
            raise IndexError(k)
        img = self.clean_frame(k)
        if self.noise_sigma > 0:
            rng = np.random.default_rng([self.script.seed, k])
            img = img + rng.normal(0.0, self.noise_sigma, img.shape)
        return np.clip(img, 0.0, 1.0)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.frame(k)


def render_episode(script: ScenarioScript, h: int = 64, w: int = 64, fps: int = 25,
                   noise_sigma: float = NOISE_SIGMA) -> tuple[EpisodeFrames, list[AnnotationTrack]]:
    return EpisodeFrames(script, h, w, fps, noise_sigma), script.tracks()


def make_episode(source_id: str, script: ScenarioScript, h: int = 64, w: int = 64, fps: int = 25,
                 noise_sigma: float = NOISE_SIGMA) -> tuple[Episode, list[AnnotationTrack]]:
    frames, tracks = render_episode(script, h, w, fps, noise_sigma)
    return Episode(source_id, frames, script.duration_s), tracks
