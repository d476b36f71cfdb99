"""Word error rate and the noise-category x SNR evaluation grid."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .audio import CATEGORIES, NoiseCategory, NoiseBank, make_noise, mix_at_snr
from .corpus import AvSample
from .video import LipFrameSequence

GRID_SNRS_DB = (-10.0, 0.0, 10.0, 20.0)


@dataclass(frozen=True)
class WerCounts:
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / self.n_ref


def wer(reference: str, hypothesis: str) -> WerCounts:
    """Word-level Levenshtein alignment with uniform costs.

    Ties are resolved substitution-first, then deletion; the total error
    count is the canonical edit distance either way.
    """
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise ValueError("reference must contain at least one word")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int32)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerCounts(subs, dels, ins, n)


@dataclass(frozen=True)
class GridCell:
    model_id: str
    category: str
    snr_db: float
    wer_percent: float
    n_words: int
    n_errors: int


@dataclass
class WerReport:
    """Per-(model, category, SNR) corpus WER rows, Table-layout friendly."""

    model_id: str
    rows: list[GridCell] = field(default_factory=list)
    trainable_params: int | None = None
    total_params: int | None = None

    def cell(self, category: str, snr_db: float) -> GridCell:
        for r in self.rows:
            if r.category == category and r.snr_db == snr_db:
                return r
        raise KeyError((category, snr_db))

    def by_category(self) -> dict[str, float]:
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            e, w = out.get(r.category, (0, 0))
            out[r.category] = (e + r.n_errors, w + r.n_words)
        return {c: 100.0 * e / w for c, (e, w) in out.items()}

    def by_snr(self) -> dict[float, float]:
        out: dict[float, tuple[int, int]] = {}
        for r in self.rows:
            e, w = out.get(r.snr_db, (0, 0))
            out[r.snr_db] = (e + r.n_errors, w + r.n_words)
        return {s: 100.0 * e / w for s, (e, w) in out.items()}


class TranscriptionSystem(Protocol):
    """Anything that turns a contaminated AV sample into text.

    Systems may also define `begin_cell(category, snr_db)`; the grid
    calls it before each cell so oracle-routed systems can see the truth.
    """

    model_id: str

    def transcribe_batch(self, mels: np.ndarray,
                         videos: Sequence[LipFrameSequence],
                         sample_ids: Sequence[str] | None = None) -> list[str]:
        ...


def eval_grid(system: TranscriptionSystem, corpus: Sequence[AvSample],
              bank: NoiseBank, seed: int,
              categories: Sequence[NoiseCategory] = CATEGORIES,
              snrs_db: Sequence[float] = GRID_SNRS_DB,
              noise_split: str = "test",
              mel_fn: Callable | None = None) -> WerReport:
    """Contaminate every clip at each exact (category, SNR) and score it.

    Corpus-level WER per cell: total errors / total reference words.
    Deterministic for a fixed seed; noise comes from the bank's held-out
    split only.
    """
    if not corpus:
        raise ValueError("evaluation corpus is empty")
    from .audio import log_mel
    mel_fn = mel_fn or log_mel
    report = WerReport(model_id=system.model_id)
    for cat in categories:
        for si, snr in enumerate(snrs_db):
            # seed by global category id so sharded runs reproduce exactly
            cell_rng = np.random.default_rng([seed, CATEGORIES.index(cat), si])
            if hasattr(system, "begin_cell"):
                system.begin_cell(cat, snr)
            # group same-length clips so transcription can run batched
            buckets: dict[int, list[int]] = {}
            for idx, s in enumerate(corpus):
                buckets.setdefault(len(s.clean), []).append(idx)
            errors = words = 0
            for length in sorted(buckets):
                idxs = buckets[length]
                mels, vids, refs, ids = [], [], [], []
                for idx in idxs:
                    s = corpus[idx]
                    noise = make_noise(cat, len(s.clean), bank,
                                       seed=int(cell_rng.integers(2 ** 31)),
                                       split=noise_split)
                    noisy = mix_at_snr(s.clean, noise, snr)
                    mels.append(mel_fn(noisy).frames)
                    vids.append(s.video)
                    refs.append(s.text)
                    ids.append(s.sample_id)
                hyps = system.transcribe_batch(np.stack(mels), vids, ids)
                for ref, hyp in zip(refs, hyps):
                    c = wer(ref, hyp)
                    errors += c.errors
                    words += c.n_ref
            report.rows.append(GridCell(system.model_id, cat.value, snr,
                                        100.0 * errors / words, words, errors))
    return report


@dataclass(frozen=True)
class CellDelta:
    category: str
    snr_db: float
    delta: float


@dataclass(frozen=True)
class Comparison:
    deltas: list[CellDelta]
    wins_a: int
    wins_b: int
    ties: int


def compare(report_a: WerReport, report_b: WerReport) -> Comparison:
    """Per-cell wer_a - wer_b plus a win/loss summary (a wins when lower)."""
    keys_a = [(r.category, r.snr_db) for r in report_a.rows]
    keys_b = [(r.category, r.snr_db) for r in report_b.rows]
    if keys_a != keys_b:
        raise ValueError("reports cover different grids")
    deltas, wins_a, wins_b, ties = [], 0, 0, 0
    for ra, rb in zip(report_a.rows, report_b.rows):
        d = ra.wer_percent - rb.wer_percent
        deltas.append(CellDelta(ra.category, ra.snr_db, d))
        if d < 0:
            wins_a += 1
        elif d > 0:
            wins_b += 1
        else:
            ties += 1
    return Comparison(deltas, wins_a, wins_b, ties)


# -- report emission ----------------------------------------------------------


def _fmt_params(n: int | None) -> str:
    if n is None:
        return "-"
    if n >= 1_000_000:
        return f"{n / 1e6:.0f}M"
    if n >= 1_000:
        return f"{n / 1e3:.0f}k"
    return str(n)


def report_to_csv(reports: Sequence[WerReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["model_id", "category", "snr_db", "wer_percent",
                "n_words", "n_errors"])
    for rep in reports:
        for r in rep.rows:
            w.writerow([r.model_id, r.category, f"{r.snr_db:g}",
                        f"{r.wer_percent:.4f}", r.n_words, r.n_errors])
    return buf.getvalue()


def report_to_markdown(reports: Sequence[WerReport],
                       categories: Sequence[str] | None = None,
                       snrs_db: Sequence[float] | None = None) -> str:
    """Grid-shaped markdown: one row per model, category-grouped SNR columns."""
    categories = list(categories or [c.value for c in CATEGORIES])
    snrs_db = list(snrs_db or GRID_SNRS_DB)
    head1 = ["Models", "TrP", "ToP"]
    for cat in categories:
        head1 += [f"{cat.capitalize()} {int(s)}dB" for s in snrs_db]
    lines = ["| " + " | ".join(head1) + " |",
             "|" + "---|" * len(head1)]
    for rep in reports:
        cells = [rep.model_id, _fmt_params(rep.trainable_params),
                 _fmt_params(rep.total_params)]
        for cat in categories:
            for s in snrs_db:
                cells.append(f"{rep.cell(cat, s).wer_percent:.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def save_report(reports: Sequence[WerReport], path: str | Path,
                fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "csv":
        path.write_text(report_to_csv(reports))
    elif fmt == "md":
        path.write_text(report_to_markdown(reports))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def save_report_rows_json(report: WerReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(
        [r.__dict__ for r in report.rows], indent=1))
