"""Synthetic visual stream standing in for lip-movement features.

25 Hz frames of 32-dim character embeddings drawn from a frozen seed-0
codebook, cross-faded at character boundaries, with small Gaussian jitter.
The visual stream depends only on (text, duration, seed) and is never
touched by acoustic noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import CHAR_SAMPLES, SAMPLE_RATE, VOCABULARY, _CHAR_INDEX

VIDEO_FPS = 25
VIDEO_DIM = 32
JITTER_SIGMA = 0.05
CROSSFADE_S = 0.040          # 40 ms linear blend around character boundaries
CHAR_SECONDS = CHAR_SAMPLES / SAMPLE_RATE
REST_INDEX = len(VOCABULARY)  # codebook row used past the end of the text


@dataclass(frozen=True)
class LipFrameSequence:
    """(T_v, 32) visual features at 25 Hz."""

    frames: np.ndarray
    frame_rate: int = VIDEO_FPS

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 2 or f.shape[1] != VIDEO_DIM or f.shape[0] == 0:
            raise ValueError(f"lip frames must be non-empty (T, {VIDEO_DIM})")
        if not np.all(np.isfinite(f)):
            raise ValueError("lip frames contain non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def codebook() -> np.ndarray:
    """Frozen (28, 32) embedding table: 27 characters + one rest row."""
    rng = np.random.default_rng(0)
    return rng.normal(0.0, 1.0, (len(VOCABULARY) + 1, VIDEO_DIM)).astype(np.float32)


_CODEBOOK = codebook()


def n_video_frames(duration_samples: int) -> int:
    return int(np.ceil(duration_samples / SAMPLE_RATE * VIDEO_FPS))


def _slot_vec(text: str, slot: int) -> np.ndarray:
    """Codebook row for character slot `slot`; past the text it is rest."""
    if slot < len(text):
        return _CODEBOOK[_CHAR_INDEX[text[slot]]]
    return _CODEBOOK[REST_INDEX]


def _embedding_at(text: str, t: float, clip_end: float) -> np.ndarray:
    """Codebook embedding active at time t, cross-faded near boundaries.

    A midpoint landing exactly on the clip end clamps to the last active
    slot; only boundaries strictly inside the clip are faded across.
    """
    t_eff = min(t, clip_end - 1e-9)
    base = _slot_vec(text, int(t_eff // CHAR_SECONDS))
    k = int(round(t / CHAR_SECONDS))
    boundary = k * CHAR_SECONDS
    if 0.0 < boundary < clip_end - 1e-9 and abs(t - boundary) < CROSSFADE_S / 2:
        w = 0.5 + (t - boundary) / CROSSFADE_S   # 0 at left edge, 1 at right
        return (1.0 - w) * _slot_vec(text, k - 1) + w * _slot_vec(text, k)
    return base


def synth_video(text: str, duration: int, seed: int = 0) -> LipFrameSequence:
    """Render 25 Hz lip features for `text` over `duration` audio samples."""
    if not text:
        raise ValueError("text must be non-empty")
    for c in text:
        if c not in _CHAR_INDEX:
            raise ValueError(f"character {c!r} outside the toy vocabulary")
    if duration <= 0:
        raise ValueError("duration must be positive")
    t_v = n_video_frames(duration)
    clip_end = duration / SAMPLE_RATE
    frames = np.empty((t_v, VIDEO_DIM), dtype=np.float32)
    for f in range(t_v):
        midpoint = (f + 0.5) / VIDEO_FPS
        frames[f] = _embedding_at(text, midpoint, clip_end)
    rng = np.random.default_rng(seed)
    frames += rng.normal(0.0, JITTER_SIGMA, frames.shape).astype(np.float32)
    return LipFrameSequence(frames)


def save_video(path: str | Path, v: LipFrameSequence) -> None:
    """Raw little-endian float32, row-major (T_v, 32) (`.vf32`)."""
    v.frames.astype("<f4").tofile(Path(path))


def load_video(path: str | Path) -> LipFrameSequence:
    data = np.fromfile(Path(path), dtype="<f4")
    if data.size % VIDEO_DIM != 0:
        raise ValueError("file size is not a multiple of the frame dim")
    return LipFrameSequence(data.reshape(-1, VIDEO_DIM))
