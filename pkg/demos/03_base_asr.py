"""Pre-train the miniature frozen core on clean chord speech and decode.

A 2+2-layer, d=64 encoder-decoder with a character tokenizer; training
is plain teacher-forced cross-entropy. A few hundred samples suffice on
this toy mapping.

Run:  python3 demos/03_base_asr.py      (~1 minute on one CPU core)
"""

from avlora.asr import BaseTrainConfig, train_base, transcribe
from avlora.corpus import synth_corpus

corpus = synth_corpus(400, seed=0, id_prefix="demo")
samples = [(s.clean, s.text) for s in corpus]

cfg = BaseTrainConfig(steps=400, seed=0, val_count=40, log_every=100)
model, metrics = train_base(samples, cfg)

print("training loss:")
for step, loss in metrics["history"]:
    print(f"  step {step:>4}: {loss:.4f}")
print(f"held-out clean WER: {metrics['val_wer_percent']:.2f}%")

print("\ngreedy decoding on fresh clean utterances:")
for s in synth_corpus(5, seed=9, id_prefix="fresh"):
    hyp = transcribe(model, s.clean)
    mark = "ok " if hyp == s.text else "ERR"
    print(f"  [{mark}] {s.text!r} -> {hyp!r}")
