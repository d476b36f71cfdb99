"""Word error rate and the category x SNR evaluation grid.

Run:  python3 demos/07_wer_grid.py
"""

from avlora.audio import build_noise_bank, expected_mel_frames
from avlora.corpus import synth_corpus
from avlora.evalkit import compare, eval_grid, report_to_markdown, wer

c = wer("we go far", "we fog far")
print(f"'we go far' vs 'we fog far': S={c.substitutions} D={c.deletions} "
      f"I={c.insertions}, WER {c.rate:.1%}")
c = wer("up", "it is up")
print(f"rates can exceed 100%: {c.rate:.1%}")

# Grid evaluation contaminates every test clip at each exact
# (category, SNR) cell; corpus WER is total errors / total words.
# One sample per distinct duration, so the echo stub below can key on it.
seen, corpus = set(), []
for s in synth_corpus(40, seed=5, id_prefix="demo"):
    if len(s.text) not in seen:
        seen.add(len(s.text))
        corpus.append(s)
bank = build_noise_bank(30, seed=6)


class NoisyEcho:
    """Stand-in recognizer: perfect text, except it drops one word at
    low SNR (so the grid has something to show)."""

    model_id = "noisy-echo"

    def __init__(self, corpus):
        self._text = {expected_mel_frames(len(s.clean)): s.text for s in corpus}
        self._snr = 0.0

    def begin_cell(self, category, snr_db):
        self._snr = snr_db

    def transcribe_batch(self, mels, videos, sample_ids=None):
        text = self._text[mels.shape[1]]
        if self._snr < 0:
            text = " ".join(text.split()[1:])
        return [text] * mels.shape[0]


report = eval_grid(NoisyEcho(corpus), corpus, bank, seed=1)
print("\nmarkdown report (Table-style layout):\n")
print(report_to_markdown([report]))

perfect = eval_grid(NoisyEcho(corpus), corpus, bank, seed=1)
cmp = compare(report, perfect)
print(f"self-comparison: {cmp.ties} ties of {len(cmp.deltas)} cells")
