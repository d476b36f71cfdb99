"""Noise-scenario classification and adapter-set routing.

A 10-conv residual trunk (one input conv, four blocks of two convs with
parameter-free stride-2 skips, one output conv; 64 channels; batch-free
per-channel normalization) reads the noisy mel and feeds two heads: a
4-way category softmax and a scalar SNR regressor. Routing picks the
adapter set by argmax category or by thresholding the SNR estimate at
5 dB. Note the deliberate constant mismatch carried over from the
method: level-specific sets are *trained* on a 0 dB split while the
selector *routes* at 5 dB.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .audio import (
    CATEGORIES,
    DEFAULT_CLEAN_PROB,
    MelSpectrogram,
    NoiseBank,
    NoiseCategory,
    NoiseScenario,
    Waveform,
    contaminate,
    log_mel,
)
from .autodiff import Adam, Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import AvSample
from .layers import ChannelNorm, Conv1d, Linear
from .lora import AdapterRegistry
from .video import LipFrameSequence

ROUTE_THRESHOLD_DB = 5.0      # HighNoise iff predicted SNR < 5 dB
LEVEL_SPLIT_DB = 0.0          # training-time split between level sets
CLASSIFIER_FRAMES = 96        # mel frames after crop/pad
MIN_CLASSIFY_FRAMES = 10
SNR_CLEAN_LABEL_DB = 30.0     # clean draws train the regressor at the top
N_CATEGORIES = len(CATEGORIES)


@dataclass(frozen=True)
class ClassifierConfig:
    channels: int = 64
    n_blocks: int = 4
    n_mels: int = 80
    frames: int = CLASSIFIER_FRAMES


class _ResBlock:
    """Two convs, first strided; skip path subsamples time by 2."""

    def __init__(self, name: str, ch: int, rng, role: str):
        self.conv1 = Conv1d(f"{name}.conv1", ch, ch, rng, role, stride=2)
        self.norm1 = ChannelNorm(f"{name}.norm1", ch, role)
        self.conv2 = Conv1d(f"{name}.conv2", ch, ch, rng, role)
        self.norm2 = ChannelNorm(f"{name}.norm2", ch, role)

    @property
    def params(self):
        return (self.conv1.params + self.norm1.params
                + self.conv2.params + self.norm2.params)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return ad.relu(ad.add(h, x[:, :, ::2]))


class NoiseClassifier:
    """Category head + SNR regression head over a shared conv trunk."""

    def __init__(self, cfg: ClassifierConfig = ClassifierConfig(),
                 seed: int = 0, role: str = "classifier"):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        self.conv_in = Conv1d("clf.conv_in", cfg.n_mels, ch, rng, role)
        self.norm_in = ChannelNorm("clf.norm_in", ch, role)
        self.blocks = [_ResBlock(f"clf.b{i}", ch, rng, role)
                       for i in range(cfg.n_blocks)]
        self.conv_out = Conv1d("clf.conv_out", ch, ch, rng, role)
        self.norm_out = ChannelNorm("clf.norm_out", ch, role)
        self.cat_fc1 = Linear("clf.cat.fc1", ch, ch, rng, role)
        self.cat_fc2 = Linear("clf.cat.fc2", ch, N_CATEGORIES, rng, role)
        self.snr_fc1 = Linear("clf.snr.fc1", ch, ch, rng, role)
        self.snr_fc2 = Linear("clf.snr.fc2", ch, 1, rng, role)

    @property
    def n_conv_layers(self) -> int:
        return 2 + 2 * len(self.blocks)

    @property
    def params(self) -> list[Tensor]:
        out = self.conv_in.params + self.norm_in.params
        for b in self.blocks:
            out += b.params
        out += self.conv_out.params + self.norm_out.params
        out += self.cat_fc1.params + self.cat_fc2.params
        out += self.snr_fc1.params + self.snr_fc2.params
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def _prep(self, mels: np.ndarray) -> np.ndarray:
        """Crop/pad each (T, 80) mel to the fixed frame count.

        Short clips are loop-padded (tiled in time) so channel statistics
        stay representative of the clip rather than of a constant fill.
        """
        if mels.ndim == 2:
            mels = mels[None]
        B, T, _ = mels.shape
        if T < MIN_CLASSIFY_FRAMES:
            raise ValueError(f"need at least {MIN_CLASSIFY_FRAMES} mel frames")
        F = self.cfg.frames
        if T >= F:
            return np.ascontiguousarray(mels[:, :F])
        reps = -(-F // T)
        return np.ascontiguousarray(np.tile(mels, (1, reps, 1))[:, :F])

    def summary(self, mels: np.ndarray) -> Tensor:
        """Trunk forward: (B, T, 80) -> pooled (B, 64)."""
        x = Tensor(self._prep(mels)) if not isinstance(mels, Tensor) else mels
        h = ad.transpose(x, (0, 2, 1))
        h = ad.relu(self.norm_in(self.conv_in(h)))
        for b in self.blocks:
            h = b(h)
        h = ad.relu(self.norm_out(self.conv_out(h)))
        return ad.mean(h, axis=2)

    def category_logits(self, pooled: Tensor) -> Tensor:
        return self.cat_fc2(ad.relu(self.cat_fc1(pooled)))

    def snr_estimate(self, pooled: Tensor) -> Tensor:
        return self.snr_fc2(ad.relu(self.snr_fc1(pooled)))


def classify(clf: NoiseClassifier, mel: MelSpectrogram | np.ndarray
             ) -> tuple[np.ndarray, float]:
    """(category distribution over 4, snr estimate in dB) for one mel."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    with no_grad():
        pooled = clf.summary(frames[None] if frames.ndim == 2 else frames)
        probs = ad.softmax(clf.category_logits(pooled)).data[0]
        snr = float(clf.snr_estimate(pooled).data[0, 0])
    return probs, snr


def classify_batch(clf: NoiseClassifier, mels: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        pooled = clf.summary(mels)
        probs = ad.softmax(clf.category_logits(pooled)).data
        snrs = clf.snr_estimate(pooled).data[:, 0]
    return probs, snrs


# -- routing --------------------------------------------------------------------


@dataclass(frozen=True)
class RoutingDecision:
    mode: str                             # "category" | "level"
    predicted_category: NoiseCategory | None
    predicted_snr_db: float | None
    chosen_set: str

    def __post_init__(self):
        if self.mode == "level":
            want = "high" if self.predicted_snr_db < ROUTE_THRESHOLD_DB else "low"
            if self.chosen_set != want:
                raise ValueError("level decision violates the 5 dB threshold rule")


def route(mode: str, category_probs: np.ndarray | None,
          snr_db: float | None, registry: AdapterRegistry) -> RoutingDecision:
    """Pick the adapter set; argmax ties break toward the lowest index and
    an estimate exactly at the threshold routes to LowNoise."""
    if mode == "category":
        if category_probs is None:
            raise ValueError("category routing needs a distribution")
        idx = int(np.argmax(category_probs))   # argmax takes the first maximum
        chosen = CATEGORIES[idx].value
        decision = RoutingDecision(mode, CATEGORIES[idx], None, chosen)
    elif mode == "level":
        if snr_db is None:
            raise ValueError("level routing needs an snr estimate")
        chosen = "high" if snr_db < ROUTE_THRESHOLD_DB else "low"
        decision = RoutingDecision(mode, None, float(snr_db), chosen)
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    registry.get(decision.chosen_set)      # missing set is an error
    return decision


# -- training ---------------------------------------------------------------------


@dataclass
class ClassifierTrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    lr_final: float = 1e-4
    seed: int = 0
    clean_prob: float = 0.05
    dataset_draws: int = 8000


class ClassifierDiverged(RuntimeError):
    pass


@dataclass
class ClassifierDataset:
    """Pre-contaminated (noisy mel, label) pairs, prepped to 96 frames.

    Category labels are indices into the four categories, -1 for the
    clean draws (which carry no category); SNR labels put clean draws at
    the top of the range.
    """

    mels: np.ndarray      # (N, frames, 80)
    categories: np.ndarray
    snrs_db: np.ndarray

    def __len__(self) -> int:
        return len(self.mels)


def build_classifier_dataset(samples: Sequence[AvSample], bank: NoiseBank,
                             n_draws: int, seed: int,
                             clean_prob: float = DEFAULT_CLEAN_PROB,
                             noise_split: str = "train",
                             frames: int = CLASSIFIER_FRAMES) -> ClassifierDataset:
    """Contaminate train-split draws across all categories and SNRs."""
    rng = np.random.default_rng(seed)
    full = NoiseScenario("full")
    prep = NoiseClassifier.__new__(NoiseClassifier)      # _prep only needs cfg
    prep.cfg = ClassifierConfig(frames=frames)
    mels = np.empty((n_draws, frames, 80), dtype=np.float32)
    cats = np.empty(n_draws, dtype=np.int64)
    snrs = np.empty(n_draws, dtype=np.float32)
    for i in range(n_draws):
        s = samples[int(rng.integers(0, len(samples)))]
        noisy, meta = contaminate(s.clean, full, bank,
                                  seed=int(rng.integers(2 ** 31)),
                                  clean_prob=clean_prob, split=noise_split)
        mels[i] = prep._prep(log_mel(noisy).frames)[0]
        cats[i] = -1 if meta.clean else CATEGORIES.index(meta.category)
        snrs[i] = SNR_CLEAN_LABEL_DB if meta.clean else meta.snr_db
    return ClassifierDataset(mels, cats, snrs)


def train_classifier(head: str, dataset: ClassifierDataset,
                     cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                     clf: NoiseClassifier | None = None,
                     val_dataset: ClassifierDataset | None = None,
                     ) -> tuple[NoiseClassifier, dict]:
    """Train one head (category: cross-entropy; snr: mean squared error).

    Clean draws are excluded from the category loss (they carry no
    category label) and anchor the regressor at the top of the range.
    """
    if head not in ("category", "snr"):
        raise ValueError("head must be 'category' or 'snr'")
    if len(dataset) < cfg.batch_size:
        raise ValueError("dataset smaller than one batch")
    clf = clf or NoiseClassifier(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(clf.params)
    history = []
    value = float("nan")
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), cfg.batch_size)
        mels = dataset.mels[idx]
        cats = dataset.categories[idx]
        snrs = dataset.snrs_db[idx]
        opt.zero_grad()
        pooled = clf.summary(mels)
        if head == "category":
            keep = np.nonzero(cats >= 0)[0]
            logits = clf.category_logits(pooled)
            logp = ad.log_softmax(logits)
            picked = ad.take(logp, (keep, cats[keep]))
            loss = ad.mul(ad.mean(picked), -1.0)
        else:
            pred = clf.snr_estimate(pooled)
            err = ad.sub(ad.reshape(pred, (-1,)), snrs)
            loss = ad.mean(ad.mul(err, err))
        value = float(loss.data)
        if not math.isfinite(value):
            raise ClassifierDiverged(f"non-finite loss at step {step}")
        loss.backward()
        frac = step / max(1, cfg.steps - 1)
        opt.step(cfg.lr * (1 - frac) + cfg.lr_final * frac)
        if step % 100 == 0 or step == cfg.steps - 1:
            history.append((step, value))
    metrics = {"head": head, "history": history, "final_loss": value}
    if val_dataset is not None:
        metrics.update(evaluate_on_dataset(clf, head, val_dataset))
    return clf, metrics


def evaluate_on_dataset(clf: NoiseClassifier, head: str,
                        dataset: ClassifierDataset) -> dict:
    """Metrics on a pre-built labeled dataset (clean draws excluded)."""
    keep = dataset.categories >= 0
    mels = dataset.mels[keep]
    cats = dataset.categories[keep]
    snrs = dataset.snrs_db[keep]
    probs, est = classify_batch(clf, mels)
    if head == "category":
        return {"category_accuracy": float(np.mean(probs.argmax(1) == cats))}
    true_high = snrs < ROUTE_THRESHOLD_DB
    pred_high = est < ROUTE_THRESHOLD_DB
    correct = pred_high == true_high
    per_cat = {c.value: float(np.mean(correct[cats == i]))
               for i, c in enumerate(CATEGORIES)}
    return {"snr_mae_db": float(np.mean(np.abs(est - snrs))),
            "threshold_decision_accuracy": float(np.mean(correct)),
            "per_category_decision_accuracy": per_cat}


def evaluate_classifier(clf: NoiseClassifier, head: str,
                        samples: Sequence[AvSample], bank: NoiseBank,
                        seed: int = 0, noise_split: str = "val",
                        draws_per_sample: int = 2) -> dict:
    """Validation metrics from fresh draws; the SNR head reports MAE,
    5 dB-threshold decision accuracy, and the per-category breakout."""
    ds = build_classifier_dataset(samples, bank,
                                  n_draws=draws_per_sample * len(samples),
                                  seed=seed, clean_prob=0.0,
                                  noise_split=noise_split,
                                  frames=clf.cfg.frames)
    return evaluate_on_dataset(clf, head, ds)


# -- end-to-end routed inference ---------------------------------------------------


@dataclass
class RoutedResult:
    transcript: str
    decision: RoutingDecision
    category_probs: np.ndarray | None = None


def infer_routed(registry: AdapterRegistry, clf: NoiseClassifier,
                 noisy: Waveform, video: LipFrameSequence,
                 mode: str) -> RoutedResult:
    """Noisy mel -> classify -> route -> swap -> fuse -> decode."""
    mel = log_mel(noisy)
    probs, snr = classify(clf, mel)
    decision = route(mode, probs, snr, registry)
    registry.swap(decision.chosen_set)
    with registry.read_session() as adapted:
        text = adapted.transcribe(noisy, video)
    return RoutedResult(text, decision, probs)


class OracleClassifier:
    """Stub that routes from the true contamination metadata."""

    def __init__(self, category: NoiseCategory | None = None,
                 snr_db: float | None = None):
        self.category = category
        self.snr_db = snr_db

    def decide(self, mode: str, registry: AdapterRegistry) -> RoutingDecision:
        probs = None
        if self.category is not None:
            probs = np.eye(N_CATEGORIES, dtype=np.float32)[
                CATEGORIES.index(self.category)]
        return route(mode, probs, self.snr_db, registry)


def decisions_to_jsonl(results: Sequence[tuple[str, RoutedResult]],
                       path: str | Path) -> None:
    """Routing log: {id, mode, category_probs, snr_est, chosen_set}."""
    with open(path, "w") as fh:
        for sample_id, r in results:
            d = r.decision
            fh.write(json.dumps({
                "id": sample_id,
                "mode": d.mode,
                "category_probs": None if r.category_probs is None else
                    [round(float(p), 6) for p in r.category_probs],
                "snr_est": d.predicted_snr_db,
                "chosen_set": d.chosen_set,
            }) + "\n")


# -- persistence ---------------------------------------------------------------------


def save_classifier(clf: NoiseClassifier, out_dir: str | Path,
                    extra_meta: dict | None = None) -> None:
    meta = {"kind": "classifier", "config": asdict(clf.cfg)}
    meta.update(extra_meta or {})
    save_checkpoint(out_dir, clf.named_tensors(), meta)


def load_classifier(in_dir: str | Path) -> NoiseClassifier:
    tensors, meta = load_checkpoint(in_dir)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{in_dir} is not a classifier checkpoint")
    clf = NoiseClassifier(ClassifierConfig(**meta["config"]))
    table = clf.named_tensors()
    if set(table) != set(tensors):
        raise ValueError("checkpoint names do not match the classifier")
    for name, t in table.items():
        t.data = tensors[name].data
    return clf
