"""Desk-scale AV corpus synthesis, on-disk layout, and JSONL manifests.

A sample is one utterance: text drawn from a small closed lexicon, the
deterministic chord waveform for it, and the matching visual stream.
Manifests are JSON-lines with one record per sample:
{id, text, audio_path, video_path, category, snr_db, split}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import Waveform, load_waveform, save_waveform, synth_utterance
from .video import LipFrameSequence, load_video, save_video, synth_video

# Closed toy lexicon: short a-z words, so word error rate is meaningful.
LEXICON = (
    "an at be by do go he if in is it me no of on or so to up we",
    "ace add aim air arm art bad bag bat bed bee big bit box boy bun cab",
    "cap car cat cow cup day dig dog ear eat egg elf end far fig fix fly",
    "fox fun gap gem hat hen hop ice ink jam jet key kit lab leg lip log",
)
WORDS = tuple(w for line in LEXICON for w in line.split())
MIN_WORDS, MAX_WORDS = 1, 2


@dataclass(frozen=True)
class AvSample:
    """One clean audio-visual utterance."""

    sample_id: str
    text: str
    clean: Waveform
    video: LipFrameSequence

    @property
    def n_words(self) -> int:
        return len(self.text.split())


def make_text(rng: np.random.Generator) -> str:
    n = int(rng.integers(MIN_WORDS, MAX_WORDS + 1))
    return " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), n))


def synth_corpus(n: int, seed: int, id_prefix: str = "utt") -> list[AvSample]:
    """Deterministic corpus of n clean AV samples."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        text = make_text(rng)
        clean = synth_utterance(text)
        video = synth_video(text, len(clean), seed=int(rng.integers(2 ** 31)))
        out.append(AvSample(f"{id_prefix}-{i:06d}", text, clean, video))
    return out


def save_corpus(samples: Sequence[AvSample], root: str | Path,
                manifest_name: str, split_of=None) -> Path:
    """Write audio/video files and one JSONL manifest; returns its path."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "video").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        audio_path = f"audio/{s.sample_id}.f32"
        video_path = f"video/{s.sample_id}.vf32"
        save_waveform(root / audio_path, s.clean)
        save_video(root / video_path, s.video)
        lines.append(json.dumps({
            "id": s.sample_id,
            "text": s.text,
            "audio_path": audio_path,
            "video_path": video_path,
            "category": None,
            "snr_db": None,
            "split": split_of(s) if split_of else s.sample_id.split("-")[0],
        }))
    manifest = root / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(root: str | Path, manifest_name: str,
                split: str | None = None) -> list[AvSample]:
    root = Path(root)
    out = []
    for line in (root / manifest_name).read_text().splitlines():
        rec = json.loads(line)
        if split is not None and rec["split"] != split:
            continue
        out.append(AvSample(rec["id"], rec["text"],
                            load_waveform(root / rec["audio_path"]),
                            load_video(root / rec["video_path"])))
    return out


def split_ids(samples: Sequence[AvSample]) -> set[str]:
    return {s.sample_id for s in samples}
