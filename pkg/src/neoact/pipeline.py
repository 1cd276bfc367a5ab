"""Glue: synthetic datasets to model-ready arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Episode, extract_clips, resample_clip
from .synthetic import DEFAULT_FREQUENCIES, ScenarioScript, make_episode, sample_script


@dataclass
class SyntheticEpisode:
    source_id: str
    script: ScenarioScript
    episode: Episode
    tracks: list


@dataclass
class ClipArrays:
    """Resampled clips stacked for training: ``x`` is float32 ``(N, T, H, W, 3)``."""

    x: np.ndarray
    y: np.ndarray
    clip_ids: list[str]
    source_ids: list[str]
    spans: np.ndarray = field(default=None)

    def subset(self, mask) -> "ClipArrays":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return ClipArrays(self.x[idx], self.y[idx], [self.clip_ids[i] for i in idx],
                          [self.source_ids[i] for i in idx], self.spans[idx])

    def __len__(self) -> int:
        return len(self.y)


def episode_seed(seed: int, i: int) -> int:
    return int(np.random.default_rng([seed, 11, i]).integers(2 ** 31))


def synthetic_episodes(n_episodes: int, duration_s: float, seed: int,
                       frequencies=DEFAULT_FREQUENCIES, h: int = 64, w: int = 64,
                       fps: int = 25) -> list[SyntheticEpisode]:
    out = []
    for i in range(n_episodes):
        sid = f"ep{i:03d}"
        script = sample_script(duration_s, frequencies, episode_seed(seed, i))
        ep, tracks = make_episode(sid, script, h, w, fps)
        out.append(SyntheticEpisode(sid, script, ep, tracks))
    return out


def clip_arrays(episodes: list[SyntheticEpisode], t: int, size=(32, 32), window_s: float = 3.0,
                stride_s: float = 3.0) -> ClipArrays:
    xs, ys, cids, sids, spans = [], [], [], [], []
    for se in episodes:
        for clip, y in extract_clips(se.episode, se.tracks, window_s, stride_s):
            xs.append(resample_clip(clip, t, size).astype(np.float32))
            ys.append(y.as_array())
            cids.append(clip.clip_id)
            sids.append(clip.source_id)
            spans.append((clip.start_time, clip.end_time))
    x = np.stack(xs) if xs else np.zeros((0, t, *size, 3), np.float32)
    return ClipArrays(x, np.array(ys, dtype=np.int64).reshape(-1, 4), cids, sids,
                      np.array(spans, dtype=np.float64).reshape(-1, 2))
