"""The noise-scenario selector: train the 10-conv residual classifier
heads briefly, then route utterances to adapter sets by category and by
the 5 dB SNR threshold.

Run:  python3 demos/06_classifier_routing.py      (~3 minutes)
"""

import numpy as np

from avlora.asr import AsrModel
from avlora.audio import (
    NoiseScenario,
    build_noise_bank,
    contaminate,
)
from avlora.corpus import synth_corpus
from avlora.lora import AdapterRegistry, init_adapter_set
from avlora.selector import (
    ClassifierTrainConfig,
    classify,
    infer_routed,
    route,
    train_classifier,
)

corpus = synth_corpus(400, seed=0, id_prefix="demo")
bank = build_noise_bank(60, seed=1)

from avlora.selector import build_classifier_dataset

train_ds = build_classifier_dataset(corpus[:-50], bank, n_draws=2000, seed=0)
val_ds = build_classifier_dataset(corpus[-50:], bank, n_draws=200, seed=1,
                                  clean_prob=0.0, noise_split="val")
cfg = ClassifierTrainConfig(steps=500, batch_size=32, seed=0)
clf_cat, m = train_classifier("category", train_ds, cfg, val_dataset=val_ds)
print(f"category head after {cfg.steps} steps: "
      f"val accuracy {m['category_accuracy']:.1%}")

clf_snr, m = train_classifier("snr", train_ds, cfg, val_dataset=val_ds)
print(f"snr head: MAE {m['snr_mae_db']:.2f} dB, 5 dB-threshold decisions "
      f"{m['threshold_decision_accuracy']:.1%}")
print("per-category threshold accuracy:",
      {k: f"{v:.1%}" for k, v in m["per_category_decision_accuracy"].items()})

# Routing policy: argmax over categories, or threshold the SNR estimate.
base = AsrModel(seed=0)
reg = AdapterRegistry(base)
for sid in ("babble", "music", "natural", "sidespeaker", "high", "low"):
    reg.register(init_adapter_set(base, NoiseScenario.parse(sid), seed=3))

d = route("category", np.array([0.05, 0.8, 0.1, 0.05]), None, reg)
print(f"distribution peaked on music -> set {d.chosen_set!r}")
for snr in (3.0, 5.0, 7.2):
    d = route("level", None, snr, reg)
    print(f"snr estimate {snr:+.1f} dB -> set {d.chosen_set!r}")

# End to end: contaminate, classify, swap, fuse, decode.
sample = corpus[7]
noisy, meta = contaminate(sample.clean, NoiseScenario.parse("full"), bank,
                          seed=11, clean_prob=0.0)
res = infer_routed(reg, clf_snr, noisy, sample.video, mode="level")
print(f"\ntruth: {meta.category.value} at {meta.snr_db:+.1f} dB")
print(f"routed to {res.decision.chosen_set!r} "
      f"(estimate {res.decision.predicted_snr_db:+.1f} dB); "
      f"transcript {res.transcript!r} (ref {sample.text!r})")
