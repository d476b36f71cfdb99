"""Evaluation tests: WER vs brute-force oracle, grid, reports, compare."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avlora.audio import CATEGORIES, build_noise_bank
from avlora.corpus import synth_corpus
from avlora.evalkit import (
    GRID_SNRS_DB,
    WerReport,
    GridCell,
    compare,
    eval_grid,
    report_to_csv,
    report_to_markdown,
    wer,
)


def brute_force_distance(ref: list[str], hyp: list[str]) -> int:
    """Exhaustive-recursion edit distance over all alignments."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        brute_force_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        brute_force_distance(ref[1:], hyp) + 1,
        brute_force_distance(ref, hyp[1:]) + 1,
    )


WORDS = ["a", "b", "c", "dd"]


class TestWer:
    def test_identity(self):
        c = wer("a b c", "a b c")
        assert (c.substitutions, c.deletions, c.insertions) == (0, 0, 0)
        assert c.rate == 0.0

    def test_single_substitution(self):
        c = wer("a b c", "a x c")
        assert c.substitutions == 1 and c.deletions == 0 and c.insertions == 0
        assert c.rate == pytest.approx(1 / 3)

    def test_empty_hypothesis_is_all_deletions(self):
        c = wer("a b c", "")
        assert c.deletions == 3 and c.rate == 1.0

    def test_rate_can_exceed_one(self):
        c = wer("a", "x y z")
        assert c.rate > 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            wer("   ", "a")

    def test_sdi_sum_equals_distance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ref = [WORDS[i] for i in rng.integers(0, 4, rng.integers(1, 7))]
            hyp = [WORDS[i] for i in rng.integers(0, 4, rng.integers(0, 7))]
            c = wer(" ".join(ref), " ".join(hyp))
            assert c.errors == brute_force_distance(ref, hyp)

    @given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6),
           st.lists(st.sampled_from(WORDS), min_size=0, max_size=6))
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force(self, ref, hyp):
        c = wer(" ".join(ref), " ".join(hyp))
        assert c.errors == brute_force_distance(ref, hyp)


class _StubSystem:
    """Transcription stub: constant function of the reference-free input."""

    def __init__(self, model_id, texts_by_call):
        self.model_id = model_id
        self._texts = texts_by_call

    def transcribe_batch(self, mels, videos, sample_ids=None):
        return [self._texts] * len(videos)


class _EchoSystem:
    """Perfect recognizer: replays the reference text (cheats via lookup)."""

    model_id = "echo"

    def __init__(self, corpus):
        from avlora.audio import expected_mel_frames
        self._by_frames = {}
        for s in corpus:
            self._by_frames.setdefault(expected_mel_frames(len(s.clean)), s.text)

    def transcribe_batch(self, mels, videos, sample_ids=None):
        # all clips in a batch share one duration, hence one bucket text
        return [self._by_frames[mels.shape[1]]] * mels.shape[0]


@pytest.fixture(scope="module")
def bank():
    return build_noise_bank(n_clips_per_category=20, seed=3)


@pytest.fixture(scope="module")
def tiny_corpus():
    # unique text lengths so the echo stub's length lookup is exact
    corpus = synth_corpus(10, seed=77, id_prefix="ev")
    seen, out = set(), []
    for s in corpus:
        if len(s.text) not in seen:
            seen.add(len(s.text))
            out.append(s)
    return out


class TestEvalGrid:
    def test_perfect_stub_scores_zero(self, bank, tiny_corpus):
        rep = eval_grid(_EchoSystem(tiny_corpus), tiny_corpus, bank, seed=1)
        assert len(rep.rows) == 16
        assert all(r.wer_percent == 0.0 for r in rep.rows)

    def test_empty_stub_scores_hundred(self, bank, tiny_corpus):
        rep = eval_grid(_StubSystem("empty", ""), tiny_corpus, bank, seed=1)
        assert all(r.wer_percent == 100.0 for r in rep.rows)

    def test_deterministic_per_seed(self, bank, tiny_corpus):
        a = eval_grid(_StubSystem("x", "go"), tiny_corpus, bank, seed=5)
        b = eval_grid(_StubSystem("x", "go"), tiny_corpus, bank, seed=5)
        assert a.rows == b.rows

    def test_empty_corpus_rejected(self, bank):
        with pytest.raises(ValueError):
            eval_grid(_StubSystem("x", ""), [], bank, seed=0)

    def test_corpus_wer_is_error_weighted(self):
        # two clips, unequal lengths: corpus WER = total errors / total words
        rep = WerReport("m")
        rep.rows.append(GridCell("m", "babble", 0.0, 0.0, 0, 0))
        counts = [wer("a b c d", "a b c x"), wer("a", "b")]
        errors = sum(c.errors for c in counts)
        words = sum(c.n_ref for c in counts)
        assert errors / words == pytest.approx(2 / 5)
        mean_of_rates = np.mean([c.rate for c in counts])
        assert errors / words != pytest.approx(mean_of_rates)


class TestCompare:
    def rep(self, model_id, values):
        r = WerReport(model_id)
        i = 0
        for cat in CATEGORIES:
            for snr in GRID_SNRS_DB:
                r.rows.append(GridCell(model_id, cat.value, snr,
                                       values[i], 100, int(values[i])))
                i += 1
        return r

    def test_self_compare_is_zero(self):
        a = self.rep("a", list(range(16)))
        c = compare(a, a)
        assert all(d.delta == 0 for d in c.deltas)
        assert c.wins_a == 0 and c.wins_b == 0 and c.ties == 16

    def test_antisymmetry(self):
        rng = np.random.default_rng(1)
        a = self.rep("a", rng.uniform(0, 50, 16).tolist())
        b = self.rep("b", rng.uniform(0, 50, 16).tolist())
        ab = compare(a, b)
        ba = compare(b, a)
        for d1, d2 in zip(ab.deltas, ba.deltas):
            assert d1.delta == pytest.approx(-d2.delta)
        assert ab.wins_a == ba.wins_b

    def test_shape_mismatch_rejected(self):
        a = self.rep("a", list(range(16)))
        b = WerReport("b")
        b.rows = a.rows[:8]
        with pytest.raises(ValueError):
            compare(a, b)


class TestReports:
    def paper_shaped_report(self):
        # the reference row: base full-spectrum with its published cells
        values = {
            ("babble", -10.0): 60.7, ("babble", 0.0): 10.0,
            ("babble", 10.0): 2.9, ("babble", 20.0): 2.5,
            ("music", -10.0): 13.7, ("music", 0.0): 4.1,
            ("music", 10.0): 2.8, ("music", 20.0): 2.5,
            ("natural", -10.0): 18.8, ("natural", 0.0): 4.7,
            ("natural", 10.0): 2.7, ("natural", 20.0): 2.4,
            ("sidespeaker", -10.0): 16.6, ("sidespeaker", 0.0): 8.6,
            ("sidespeaker", 10.0): 3.7, ("sidespeaker", 20.0): 2.4,
        }
        rep = WerReport("LoRa-AVSR base - Full noise spectrum",
                        trainable_params=18_000_000, total_params=92_000_000)
        for cat in CATEGORIES:
            for snr in GRID_SNRS_DB:
                rep.rows.append(GridCell(rep.model_id, cat.value, snr,
                                         values[(cat.value, snr)], 100, 0))
        return rep

    def test_markdown_matches_table_layout(self):
        md = report_to_markdown([self.paper_shaped_report()])
        lines = md.splitlines()
        assert lines[0].startswith("| Models | TrP | ToP | Babble -10dB")
        row = lines[2]
        cells = [c.strip() for c in row.strip("|").split("|")]
        assert cells[0] == "LoRa-AVSR base - Full noise spectrum"
        assert cells[1] == "18M" and cells[2] == "92M"
        # the (babble, 0 dB) cell renders as "10.0"
        assert cells[3 + 1] == "10.0"
        assert len(cells) == 3 + 16

    def test_markdown_matches_golden_fixture(self):
        from pathlib import Path
        golden = Path(__file__).parent / "golden" / "table_layout.md"
        assert report_to_markdown([self.paper_shaped_report()]) == golden.read_text()

    def test_csv_roundtrips_values(self):
        rep = self.paper_shaped_report()
        csv_text = report_to_csv([rep])
        lines = csv_text.strip().splitlines()
        assert lines[0] == "model_id,category,snr_db,wer_percent,n_words,n_errors"
        assert len(lines) == 17
        assert "babble,0,10.0000,100,0" in lines[2]

    def test_aggregates(self):
        rep = self.paper_shaped_report()
        rep.rows = [GridCell("m", "babble", 0.0, 50.0, 10, 5),
                    GridCell("m", "babble", 10.0, 10.0, 40, 4),
                    GridCell("m", "music", 0.0, 0.0, 50, 0)]
        by_cat = rep.by_category()
        assert by_cat["babble"] == pytest.approx(100 * 9 / 50)
        by_snr = rep.by_snr()
        assert by_snr[0.0] == pytest.approx(100 * 5 / 60)
