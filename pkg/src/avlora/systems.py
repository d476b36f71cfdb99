"""Evaluation-grid system wrappers: direct specialists, classifier-routed
inference, and oracle-routed inference (true scenario from the cell)."""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .asr import AsrModel
from .audio import CATEGORIES, NoiseCategory
from .autodiff import no_grad
from .lora import AdapterRegistry, AdapterSet, inject
from .selector import (
    NoiseClassifier,
    RoutedResult,
    RoutingDecision,
    classify_batch,
    route,
)
from .video import LipFrameSequence


def worker_cap(default: int = 1) -> int:
    """Worker count cap from AVX_THREADS (fan-out stays off by default)."""
    raw = os.environ.get("AVX_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


def _stack_videos(videos: Sequence[LipFrameSequence]) -> np.ndarray:
    return np.stack([v.frames for v in videos])


class DirectSystem:
    """One fixed adapter set end to end (a specialist or the full set)."""

    def __init__(self, base: AsrModel, adapter_set: AdapterSet,
                 model_id: str | None = None):
        self.base = base
        self.adapted = inject(base, adapter_set)
        self.model_id = model_id or f"direct-{adapter_set.scenario.scenario_id}"

    def transcribe_batch(self, mels: np.ndarray,
                         videos: Sequence[LipFrameSequence],
                         sample_ids: Sequence[str] | None = None) -> list[str]:
        fusion = self.adapted.adapter_set.fusion
        with no_grad():
            fused = fusion.fuse_batch(mels, _stack_videos(videos))
            memory = self.adapted.encode_batch(fused)
            seqs = self.adapted.greedy_batch(memory)
        tok = self.base.tokenizer
        return [tok.decode(s) for s in seqs]


class BareBaseSystem:
    """The frozen core alone on the raw noisy mel (no fusion, no adapters)."""

    def __init__(self, base: AsrModel, model_id: str = "base-audio-only"):
        self.base = base
        self.model_id = model_id

    def transcribe_batch(self, mels, videos, sample_ids=None) -> list[str]:
        with no_grad():
            seqs = self.base.greedy_batch(self.base.encode_batch(mels))
        return [self.base.tokenizer.decode(s) for s in seqs]


class RoutedSystem:
    """Classify each clip, swap in the chosen set per group, transcribe.

    Swaps are serialized per group; decisions are logged in input order
    as (sample_id, RoutedResult).
    """

    def __init__(self, registry: AdapterRegistry, clf: NoiseClassifier,
                 mode: str, model_id: str | None = None):
        if mode not in ("category", "level"):
            raise ValueError(f"unknown routing mode {mode!r}")
        self.registry = registry
        self.clf = clf
        self.mode = mode
        self.model_id = model_id or f"routed-{mode}"
        self.decision_log: list[tuple[str, RoutedResult]] = []

    def _decide(self, mels: np.ndarray) -> list[RoutedResult]:
        prepped = np.stack([self.clf._prep(m[None])[0] for m in mels])
        probs, snrs = classify_batch(self.clf, prepped)
        out = []
        for i in range(len(mels)):
            d = route(self.mode, probs[i], float(snrs[i]), self.registry)
            out.append(RoutedResult("", d, probs[i]))
        return out

    def transcribe_batch(self, mels: np.ndarray,
                         videos: Sequence[LipFrameSequence],
                         sample_ids: Sequence[str] | None = None) -> list[str]:
        results = self._decide(mels)
        vids = _stack_videos(videos)
        hyps: list[str | None] = [None] * len(results)
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(results):
            groups.setdefault(r.decision.chosen_set, []).append(i)
        tok = self.registry.base.tokenizer
        for chosen, idxs in sorted(groups.items()):
            self.registry.swap(chosen)
            with self.registry.read_session() as adapted:
                with no_grad():
                    fused = adapted.adapter_set.fusion.fuse_batch(
                        mels[idxs], vids[idxs])
                    seqs = adapted.greedy_batch(adapted.encode_batch(fused))
            for i, seq in zip(idxs, seqs):
                hyps[i] = tok.decode(seq)
        ids = sample_ids or [f"clip-{i}" for i in range(len(results))]
        for sid, r, h in zip(ids, results, hyps):
            self.decision_log.append((sid, RoutedResult(h, r.decision,
                                                        r.category_probs)))
        return hyps


class OracleRoutedSystem:
    """Routing from the evaluation cell's true (category, SNR)."""

    def __init__(self, registry: AdapterRegistry, mode: str,
                 model_id: str | None = None):
        self.registry = registry
        self.mode = mode
        self.model_id = model_id or f"oracle-routed-{mode}"
        self._cell: tuple[NoiseCategory, float] | None = None
        self.decision_log: list[tuple[str, RoutedResult]] = []

    def begin_cell(self, category: NoiseCategory, snr_db: float) -> None:
        self._cell = (category, snr_db)

    def current_decision(self) -> RoutingDecision:
        if self._cell is None:
            raise RuntimeError("begin_cell was never called")
        category, snr_db = self._cell
        if self.mode == "category":
            probs = np.zeros(len(CATEGORIES), dtype=np.float32)
            probs[CATEGORIES.index(category)] = 1.0
            return route("category", probs, None, self.registry)
        return route("level", None, snr_db, self.registry)

    def transcribe_batch(self, mels, videos, sample_ids=None) -> list[str]:
        decision = self.current_decision()
        self.registry.swap(decision.chosen_set)
        with self.registry.read_session() as adapted:
            with no_grad():
                fused = adapted.adapter_set.fusion.fuse_batch(
                    mels, _stack_videos(videos))
                seqs = adapted.greedy_batch(adapted.encode_batch(fused))
        tok = self.registry.base.tokenizer
        hyps = [tok.decode(s) for s in seqs]
        ids = sample_ids or [f"clip-{i}" for i in range(len(hyps))]
        for sid, h in zip(ids, hyps):
            self.decision_log.append((sid, RoutedResult(h, decision, None)))
        return hyps
