"""Teacher-student distillation for adapter sets.

The frozen core decodes clean audio to produce targets at three levels
(mel, encoder embedding, decoder logits); the student runs noisy audio
plus video through the fusion front end and the adapter-injected core,
and is trained to match. Pre-training minimizes
0.5*MAE(mel) + MAE(embedding); fine-tuning adds soft cross-entropy at
the logit level. The staged schedule mirrors the reference recipe
(two pre-train stages on separate corpora training fusion + encoder
deltas at 1e-4, then two fine-tune stages over all deltas at 1e-5
decaying to 1e-7), with step counts scaled by one ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .asr import EOT, AsrModel, MAX_DECODE
from .audio import (
    MelSpectrogram,
    NoiseBank,
    NoiseScenario,
    Waveform,
    contaminate,
    log_mel,
)
from .autodiff import Adam, Tensor, no_grad
from .checkpoint import hash_tensors
from .corpus import AvSample
from .lora import AdapterSet

PRETRAIN_STEPS = 112_000       # reference schedule, scaled by scale_ratio
FINETUNE_STEPS = 21_000
STAGES = ("P1", "P2", "F1", "F2")


@dataclass(frozen=True)
class DistillTargets:
    """Clean-input teacher outputs; adapters disabled, fusion bypassed."""

    mel_c: MelSpectrogram
    emb_c: np.ndarray                 # (T', 64)
    logits_c: np.ndarray              # (L, vocab)
    teacher_tokens: list[int]         # greedy sequence incl <sot> (and <eot>)


@dataclass
class StudentOutputs:
    """Noisy-path outputs through fusion and the adapted core."""

    mel_n: Tensor                     # fusion output
    emb_n: Tensor
    logits_n: Tensor | None = None    # teacher-forced on teacher tokens


@dataclass(frozen=True)
class LossBreakdown:
    l_mel: float
    l_emb: float
    l_ce: float | None
    l_pre: float
    l_ft: float | None

    def __post_init__(self):
        for name in ("l_mel", "l_emb", "l_pre"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def teacher_input_tokens(tokens: Sequence[int]) -> list[int]:
    """Decoder input form: the greedy sequence without its final <eot>."""
    toks = list(tokens)
    if toks and toks[-1] == EOT:
        toks = toks[:-1]
    return toks[:MAX_DECODE]


def teacher_forward(model: AsrModel, clean: Waveform) -> DistillTargets:
    """Clean-input targets from the frozen core (no adapters, no fusion)."""
    mel_c = log_mel(clean)
    with no_grad():
        emb = model.encode_batch(mel_c.frames[None])
        tokens = model.greedy_batch(emb)[0]
        inputs = teacher_input_tokens(tokens)
        logits = model.decode_batch(emb, np.asarray([inputs])).data[0]
    return DistillTargets(mel_c, emb.data[0], logits, tokens)


def soft_cross_entropy(logits_teacher: np.ndarray, logits_student: Tensor,
                       mask: np.ndarray | None = None) -> Tensor:
    """Mean over positions of -sum_v p_teacher(v) * log p_student(v)."""
    z = logits_teacher - logits_teacher.max(axis=-1, keepdims=True)
    e = np.exp(z, dtype=np.float64)
    p_teacher = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)
    per_pos = ad.mul(ad.sum_(ad.mul(ad.log_softmax(logits_student), p_teacher),
                             axis=-1), -1.0)
    if mask is None:
        return ad.mean(per_pos)
    return ad.div(ad.sum_(ad.mul(per_pos, mask)), float(mask.sum()))


def teacher_entropy(logits_teacher: np.ndarray) -> float:
    """H(softmax(logits)): the soft-CE lower bound, reached at equality."""
    z = logits_teacher.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(np.mean(-(p * logp).sum(axis=-1)))


def _loss_graph(mel_c, mel_n: Tensor, emb_c, emb_n: Tensor,
                logits_c=None, logits_n: Tensor | None = None,
                ce_mask: np.ndarray | None = None):
    """Differentiable loss terms; teacher sides are constants."""
    l_mel = ad.mean_abs_error(mel_n, mel_c)
    l_emb = ad.mean_abs_error(emb_n, emb_c)
    l_pre = ad.add(ad.mul(l_mel, 0.5), l_emb)
    if logits_n is None:
        return l_pre, l_mel, l_emb, None
    l_ce = soft_cross_entropy(logits_c, logits_n, ce_mask)
    return ad.add(l_pre, l_ce), l_mel, l_emb, l_ce


def _breakdown(l_mel: float, l_emb: float, l_ce: float | None) -> LossBreakdown:
    l_pre = 0.5 * l_mel + l_emb
    l_ft = None if l_ce is None else l_pre + l_ce
    return LossBreakdown(l_mel, l_emb, l_ce, l_pre, l_ft)


def loss(targets: DistillTargets, student: StudentOutputs,
         phase: str = "ft") -> LossBreakdown:
    """Distillation loss for one sample; phase 'pre' leaves l_ft unset."""
    if phase not in ("pre", "ft"):
        raise ValueError("phase must be 'pre' or 'ft'")
    mel_n = student.mel_n.data if isinstance(student.mel_n, Tensor) else student.mel_n
    emb_n = student.emb_n.data if isinstance(student.emb_n, Tensor) else student.emb_n
    if mel_n.shape[-2:] != targets.mel_c.frames.shape:
        raise ValueError("mel shapes do not match")
    if emb_n.shape[-2:] != targets.emb_c.shape:
        raise ValueError("embedding shapes do not match")
    l_mel = float(np.mean(np.abs(mel_n - targets.mel_c.frames)))
    l_emb = float(np.mean(np.abs(emb_n - targets.emb_c)))
    if phase == "pre":
        return _breakdown(l_mel, l_emb, None)
    if student.logits_n is None:
        raise ValueError("fine-tuning loss needs student logits")
    logits_n = (student.logits_n.data if isinstance(student.logits_n, Tensor)
                else student.logits_n)
    if logits_n.shape[-2:] != targets.logits_c.shape:
        raise ValueError("logit shapes do not match")
    ce = float(soft_cross_entropy(targets.logits_c, Tensor(logits_n)).data)
    return _breakdown(l_mel, l_emb, ce)


# -- batched training ------------------------------------------------------------


@dataclass
class DistillSchedule:
    """Step counts and learning rates for the four stages."""

    scale_ratio: float = 0.01
    batch_size: int = 16
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    lr_floor: float = 1e-7
    lr_multiplier_after_stage1: float = 1.0   # convergence fix hook, default off
    clean_prob: float = 0.05

    def steps(self, stage: str) -> int:
        base = PRETRAIN_STEPS if stage in ("P1", "P2") else FINETUNE_STEPS
        return max(1, round(base * self.scale_ratio))

    def lr_at(self, stage: str, step: int) -> float:
        mult = 1.0 if stage == "P1" else self.lr_multiplier_after_stage1
        if stage in ("P1", "P2"):
            return self.lr_pretrain * mult
        if stage == "F1":
            return self.lr_finetune * mult
        n = self.steps("F2")
        frac = step / max(1, n - 1)
        hi, lo = self.lr_finetune * mult, self.lr_floor
        return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * frac))


@dataclass
class LogRow:
    step: int
    stage: str
    lr: float
    breakdown: LossBreakdown


class TeacherCache:
    """Per-sample teacher targets (pure function of base model + sample)."""

    def __init__(self, model: AsrModel):
        self.model = model
        self._store: dict[str, DistillTargets] = {}

    def get(self, sample: AvSample) -> DistillTargets:
        t = self._store.get(sample.sample_id)
        if t is None:
            t = self._store[sample.sample_id] = teacher_forward(
                self.model, sample.clean)
        return t


def _length_buckets(samples: Sequence[AvSample]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        buckets.setdefault(len(s.text), []).append(i)
    return buckets


def _pad_teacher_tokens(token_lists: list[list[int]]):
    """Teacher-forced batch: inputs padded with <eot>, mask over real rows."""
    inputs = [teacher_input_tokens(t) for t in token_lists]
    L = max(len(t) for t in inputs)
    toks = np.full((len(inputs), L), EOT, dtype=np.int64)
    mask = np.zeros((len(inputs), L), dtype=np.float32)
    for i, t in enumerate(inputs):
        toks[i, :len(t)] = t
        mask[i, :len(t)] = 1.0
    return toks, mask


def _pad_teacher_logits(logit_list: list[np.ndarray], L: int) -> np.ndarray:
    V = logit_list[0].shape[-1]
    out = np.zeros((len(logit_list), L, V), dtype=np.float32)
    for i, lg in enumerate(logit_list):
        out[i, :lg.shape[0]] = lg
    return out


@dataclass
class DistillBatch:
    mel_c: np.ndarray            # (B, T, 80)
    emb_c: np.ndarray            # (B, T', 64)
    noisy_mels: np.ndarray       # (B, T, 80)
    videos: np.ndarray           # (B, T_v, 32)
    teacher_tokens: np.ndarray   # (B, L) input form, <eot>-padded
    teacher_logits: np.ndarray   # (B, L, V) zero-padded
    ce_mask: np.ndarray          # (B, L)


def assemble_batch(samples: Sequence[AvSample], idxs: Sequence[int],
                   cache: TeacherCache, scenario: NoiseScenario,
                   bank: NoiseBank, seed: int,
                   clean_prob: float) -> DistillBatch:
    """Contaminate one equal-length batch; per-sample seeds keep results
    independent of assembly order."""
    mel_c, emb_c, noisy, videos, tok_lists, logit_list = [], [], [], [], [], []
    for slot, idx in enumerate(idxs):
        s = samples[idx]
        t = cache.get(s)
        w, _meta = contaminate(s.clean, scenario, bank,
                               seed=int(np.random.default_rng(
                                   [seed, slot]).integers(2 ** 31)),
                               clean_prob=clean_prob, split="train")
        mel_c.append(t.mel_c.frames)
        emb_c.append(t.emb_c)
        noisy.append(log_mel(w).frames)
        videos.append(s.video.frames)
        tok_lists.append(t.teacher_tokens)
        logit_list.append(t.logits_c)
    toks, mask = _pad_teacher_tokens(tok_lists)
    return DistillBatch(np.stack(mel_c), np.stack(emb_c), np.stack(noisy),
                        np.stack(videos), toks,
                        _pad_teacher_logits(logit_list, toks.shape[1]), mask)


def student_forward(base: AsrModel, adapter_set: AdapterSet,
                    batch: DistillBatch, with_decoder: bool) -> StudentOutputs:
    mel_n = adapter_set.fusion.fuse_batch(batch.noisy_mels, batch.videos)
    emb_n = base.encode_batch(mel_n, deltas=adapter_set.deltas)
    logits_n = None
    if with_decoder:
        logits_n = base.decode_batch(emb_n, batch.teacher_tokens,
                                     deltas=adapter_set.deltas)
    return StudentOutputs(mel_n, emb_n, logits_n)


def batch_loss(base: AsrModel, adapter_set: AdapterSet, batch: DistillBatch,
               phase: str):
    """(loss tensor, LossBreakdown) for one batch."""
    student = student_forward(base, adapter_set, batch, with_decoder=phase == "ft")
    if phase == "pre":
        total, l_mel, l_emb, _ = _loss_graph(batch.mel_c, student.mel_n,
                                             batch.emb_c, student.emb_n)
        return total, _breakdown(float(l_mel.data), float(l_emb.data), None)
    total, l_mel, l_emb, l_ce = _loss_graph(
        batch.mel_c, student.mel_n, batch.emb_c, student.emb_n,
        batch.teacher_logits, student.logits_n, batch.ce_mask)
    return total, _breakdown(float(l_mel.data), float(l_emb.data),
                             float(l_ce.data))


class DistillDiverged(RuntimeError):
    pass


@dataclass
class DistillResult:
    adapter_set: AdapterSet
    log: list[LogRow]
    val_l_ft_initial: float
    val_l_ft_final: float
    base_hash_unchanged: bool
    stage_steps: dict[str, int] = field(default_factory=dict)


def validation_l_ft(base: AsrModel, adapter_set: AdapterSet,
                    val_samples: Sequence[AvSample], cache: TeacherCache,
                    scenario: NoiseScenario, bank: NoiseBank,
                    seed: int, clean_prob: float) -> float:
    """Mean fine-tuning loss over a fixed contaminated validation set."""
    buckets = _length_buckets(val_samples)
    total, count = 0.0, 0
    with no_grad():
        for key in sorted(buckets):
            idxs = buckets[key]
            batch = assemble_batch(val_samples, idxs, cache, scenario, bank,
                                   seed=seed + key, clean_prob=clean_prob)
            _, bd = batch_loss(base, adapter_set, batch, phase="ft")
            total += bd.l_ft * len(idxs)
            count += len(idxs)
    return total / count


def train_adapters(base: AsrModel, adapter_set: AdapterSet,
                   scenario: NoiseScenario, pretrain_corpus: Sequence[AvSample],
                   main_corpus: Sequence[AvSample],
                   val_samples: Sequence[AvSample], bank: NoiseBank,
                   schedule: DistillSchedule = DistillSchedule(),
                   seed: int = 0, log_path: str | Path | None = None,
                   progress: Callable[[str, int, LossBreakdown], None] | None = None,
                   ) -> DistillResult:
    """Run the four-stage schedule; the base model is bit-frozen throughout.

    On a non-finite loss the adapter set is rolled back to the last
    stage-start snapshot and DistillDiverged is raised, so callers still
    hold a usable (last-good) set.
    """
    base.freeze()
    base_hashes = hash_tensors(base.named_tensors(), role="base")
    cache = TeacherCache(base)
    log: list[LogRow] = []
    val_initial = validation_l_ft(base, adapter_set, val_samples, cache,
                                  scenario, bank, seed=seed * 7 + 1,
                                  clean_prob=schedule.clean_prob)

    stage_corpora = {"P1": pretrain_corpus, "P2": main_corpus,
                     "F1": main_corpus, "F2": main_corpus}
    stage_steps: dict[str, int] = {}
    global_step = 0
    for stage in STAGES:
        corpus = stage_corpora[stage]
        phase = "pre" if stage in ("P1", "P2") else "ft"
        adapter_set.set_trainable(fusion=True, encoder_deltas=True,
                                  decoder_deltas=phase == "ft")
        trainable = adapter_set.trainable_tensors()
        opt = Adam(trainable)
        buckets = _length_buckets(corpus)
        keys = sorted(buckets)
        weights = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
        weights /= weights.sum()
        steps = schedule.steps(stage)
        stage_steps[stage] = steps
        snapshot = {n: t.data.copy()
                    for n, t in adapter_set.named_tensors().items()}
        rng = np.random.default_rng([seed, STAGES.index(stage)])
        for step in range(steps):
            key = keys[rng.choice(len(keys), p=weights)]
            idxs = rng.choice(buckets[key], size=schedule.batch_size)
            batch = assemble_batch(corpus, idxs, cache, scenario, bank,
                                   seed=int(rng.integers(2 ** 31)),
                                   clean_prob=schedule.clean_prob)
            opt.zero_grad()
            total, bd = batch_loss(base, adapter_set, batch, phase)
            if not math.isfinite(float(total.data)):
                for n, t in adapter_set.named_tensors().items():
                    t.data = snapshot[n]
                raise DistillDiverged(
                    f"non-finite loss in stage {stage} step {step}; "
                    f"adapter set rolled back to the {stage} start")
            total.backward()
            lr = schedule.lr_at(stage, step)
            opt.step(lr)
            log.append(LogRow(global_step, stage, lr, bd))
            if progress is not None:
                progress(stage, global_step, bd)
            global_step += 1

    val_final = validation_l_ft(base, adapter_set, val_samples, cache,
                                scenario, bank, seed=seed * 7 + 1,
                                clean_prob=schedule.clean_prob)
    unchanged = hash_tensors(base.named_tensors(), role="base") == base_hashes
    if log_path is not None:
        write_metrics_csv(log, log_path)
    return DistillResult(adapter_set, log, val_initial, val_final,
                         unchanged, stage_steps)


def write_metrics_csv(log: Sequence[LogRow], path: str | Path) -> None:
    """Per-step metrics: step, stage, lr, l_mel, l_emb, l_ce, l_pre, l_ft."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "lr", "l_mel", "l_emb", "l_ce",
                    "l_pre", "l_ft"])
        for row in log:
            bd = row.breakdown
            w.writerow([row.step, row.stage, f"{row.lr:.3e}",
                        f"{bd.l_mel:.6f}", f"{bd.l_emb:.6f}",
                        "" if bd.l_ce is None else f"{bd.l_ce:.6f}",
                        f"{bd.l_pre:.6f}",
                        "" if bd.l_ft is None else f"{bd.l_ft:.6f}"])


# -- finite-difference gradient checker -------------------------------------------


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               n_coords: int = 100, epsilon: float = 1e-3,
               seed: int = 0) -> float:
    """Central finite differences vs analytic gradients.

    Samples `n_coords` scalar coordinates across `params` and returns the
    max of |g_fd - g| / max(1e-8, |g_fd| + |g|). The probe evaluations
    run with float64 forward math so the oracle side is not limited by
    float32 rounding noise; the analytic gradients under test stay
    float32. Parameters outside the graph (masked) have analytic
    gradient exactly zero.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    worst = 0.0
    with ad.no_grad(), ad.float64_forward():
        for _ in range(n_coords):
            pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
            ci = int(rng.integers(0, sizes[pi]))
            flat = params[pi].data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + np.float32(epsilon)
            hi = float(loss_fn().data)
            flat[ci] = orig - np.float32(epsilon)
            lo = float(loss_fn().data)
            flat[ci] = orig
            g_fd = (hi - lo) / (2.0 * epsilon)
            g_an = float(grads[pi].reshape(-1)[ci])
            err = abs(g_fd - g_an) / max(1e-8, abs(g_fd) + abs(g_an))
            worst = max(worst, err)
    return worst
