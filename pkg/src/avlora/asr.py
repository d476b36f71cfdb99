"""Miniature frozen encoder-decoder ASR core.

A Whisper-shaped stand-in: 2-conv mel stem (second conv stride 2),
sinusoidal encoder positions, 2+2 pre-norm transformer layers at d=64,
character tokenizer, greedy decoding, and supervised pre-training on
clean audio. The attention q/k/v/o projections are the only adapter
injection sites; their parameter names are stable across save/load.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .audio import MelSpectrogram, N_MELS, Waveform, log_mel
from .autodiff import Adam, Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    Conv1d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    causal_mask,
    sinusoidal_positions,
)

VOCAB = "abcdefghijklmnopqrstuvwxyz "
SOT, EOT, PAD = 27, 28, 29
VOCAB_SIZE = 31          # 27 characters + sot/eot/pad + one reserved slot
MAX_DECODE = 34


class Tokenizer:
    """Character tokenizer over a-z and space, with fixed special ids."""

    sot, eot, pad = SOT, EOT, PAD
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        try:
            return [VOCAB.index(c) for c in text]
        except ValueError:
            raise ValueError(f"text contains characters outside {VOCAB!r}")

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(VOCAB[i] for i in ids if 0 <= i < len(VOCAB))


@dataclass(frozen=True)
class AsrConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    n_mels: int = N_MELS
    vocab_size: int = VOCAB_SIZE
    max_decode: int = MAX_DECODE


class EncoderLayer:
    def __init__(self, name: str, cfg: AsrConfig, rng, role: str):
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model, role)
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.d_model,
                                       cfg.n_heads, rng, role)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model, role)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, rng, role)

    @property
    def params(self):
        return self.ln1.params + self.attn.params + self.ln2.params + self.ff.params

    def __call__(self, x, deltas=None):
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, deltas=deltas))
        return ad.add(x, self.ff(self.ln2(x)))


class DecoderLayer:
    def __init__(self, name: str, cfg: AsrConfig, rng, role: str):
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model, role)
        self.self_attn = MultiHeadAttention(f"{name}.self", cfg.d_model,
                                            cfg.n_heads, rng, role)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model, role)
        self.cross_attn = MultiHeadAttention(f"{name}.cross", cfg.d_model,
                                             cfg.n_heads, rng, role)
        self.ln3 = LayerNorm(f"{name}.ln3", cfg.d_model, role)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, rng, role)

    @property
    def params(self):
        return (self.ln1.params + self.self_attn.params + self.ln2.params
                + self.cross_attn.params + self.ln3.params + self.ff.params)

    def __call__(self, x, memory, mask, deltas=None):
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h, mask=mask, deltas=deltas))
        x = ad.add(x, self.cross_attn(self.ln2(x), memory, deltas=deltas))
        return ad.add(x, self.ff(self.ln3(x)))


class AsrModel:
    """The frozen core. Forward passes never mutate weights; adapter
    deltas, when passed, ride alongside the base projections."""

    def __init__(self, cfg: AsrConfig = AsrConfig(), seed: int = 0,
                 role: str = "base"):
        self.cfg = cfg
        self.tokenizer = Tokenizer()
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.conv1 = Conv1d("enc.conv1", cfg.n_mels, d, rng, role)
        self.conv2 = Conv1d("enc.conv2", d, d, rng, role, stride=2)
        self.enc_layers = [EncoderLayer(f"enc.l{i}", cfg, rng, role)
                           for i in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm("enc.ln_post", d, role)
        self.tok_emb = Tensor(rng.normal(0, 0.02, (cfg.vocab_size, d)),
                              requires_grad=True, name="dec.tok_emb", role=role)
        self.pos_emb = Tensor(rng.normal(0, 0.02, (cfg.max_decode, d)),
                              requires_grad=True, name="dec.pos_emb", role=role)
        self.dec_layers = [DecoderLayer(f"dec.l{i}", cfg, rng, role)
                           for i in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm("dec.ln_post", d, role)
        self.proj = Linear("dec.proj", d, cfg.vocab_size, rng, role)

    # -- parameter table -----------------------------------------------------

    @property
    def params(self) -> list[Tensor]:
        out = self.conv1.params + self.conv2.params
        for l in self.enc_layers:
            out += l.params
        out += self.enc_ln.params + [self.tok_emb, self.pos_emb]
        for l in self.dec_layers:
            out += l.params
        out += self.dec_ln.params + self.proj.params
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        table = {p.name: p for p in self.params}
        if len(table) != len(self.params):
            raise RuntimeError("duplicate parameter names")
        return table

    def attention_layers(self) -> list[Linear]:
        """All q/k/v/o projections, encoder then decoder (self, cross)."""
        out = []
        for l in self.enc_layers:
            out += list(l.attn.projections)
        for l in self.dec_layers:
            out += list(l.self_attn.projections)
            out += list(l.cross_attn.projections)
        return out

    def adapter_site_names(self) -> list[str]:
        return [lin.name for lin in self.attention_layers()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def freeze(self) -> "AsrModel":
        """Stop gradient bookkeeping on base weights (data already immutable
        by contract; this just skips useless grad accumulation)."""
        for p in self.params:
            p.requires_grad = False
        return self

    # -- forward passes --------------------------------------------------------

    def encode_batch(self, mels, deltas=None) -> Tensor:
        """(B, T, 80) mel batch -> (B, ceil(T/2), 64) embeddings."""
        x = mels if isinstance(mels, Tensor) else Tensor(mels)
        if x.ndim != 3 or x.shape[2] != self.cfg.n_mels:
            raise ValueError(f"expected (B, T, {self.cfg.n_mels}) mel batch")
        if x.shape[1] < 2:
            raise ValueError("need at least 2 mel frames")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("non-finite values in mel input")
        h = ad.transpose(x, (0, 2, 1))
        h = ad.gelu(self.conv1(h))
        h = ad.gelu(self.conv2(h))
        h = ad.transpose(h, (0, 2, 1))                     # (B, T', d)
        h = ad.add(h, sinusoidal_positions(h.shape[1], self.cfg.d_model))
        for layer in self.enc_layers:
            h = layer(h, deltas=deltas)
        return self.enc_ln(h)

    def decode_batch(self, memory, tokens: np.ndarray, deltas=None) -> Tensor:
        """Teacher-forced logits: (B, L) token ids -> (B, L, vocab)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (B, L)")
        B, L = tokens.shape
        if L > self.cfg.max_decode:
            raise ValueError(f"token length {L} exceeds cap {self.cfg.max_decode}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range")
        mem = memory if isinstance(memory, Tensor) else Tensor(memory)
        h = ad.add(ad.embedding(self.tok_emb, tokens),
                   ad.embedding(self.pos_emb, np.arange(L)))
        mask = causal_mask(L)
        for layer in self.dec_layers:
            h = layer(h, mem, mask, deltas=deltas)
        return self.proj(self.dec_ln(h))

    def greedy_batch(self, memory, deltas=None) -> list[list[int]]:
        """Greedy decoding for a batch of encoder embeddings.

        Returns full token sequences including <sot> and, when reached
        before the cap, <eot>. No KV cache: each step re-runs the prefix.
        """
        mem = memory if isinstance(memory, Tensor) else Tensor(memory)
        B = mem.shape[0]
        seqs = np.full((B, 1), SOT, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with no_grad():
            while seqs.shape[1] < self.cfg.max_decode and not done.all():
                logits = self.decode_batch(mem, seqs, deltas=deltas).data
                nxt = logits[:, -1, :].argmax(axis=1)
                nxt[done] = EOT
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOT
        return [self._trim(list(s)) for s in seqs]

    @staticmethod
    def _trim(seq: list[int]) -> list[int]:
        if EOT in seq:
            return seq[:seq.index(EOT) + 1]
        return seq


# -- spec-level single-sample operations ---------------------------------------


def encode(model: AsrModel, mel: MelSpectrogram, deltas=None) -> np.ndarray:
    """Deterministic encoder pass: (T, 80) mel -> (ceil(T/2), 64)."""
    with no_grad():
        out = model.encode_batch(mel.frames[None], deltas=deltas)
    return out.data[0]


def decode_logits(model: AsrModel, emb: np.ndarray, tokens: Sequence[int],
                  deltas=None) -> np.ndarray:
    """Causal teacher-forced logits for one embedding, (L, vocab)."""
    tokens = list(tokens)
    if not tokens or tokens[0] != SOT:
        raise ValueError("token sequence must begin with <sot>")
    with no_grad():
        out = model.decode_batch(np.asarray(emb)[None],
                                 np.asarray([tokens]), deltas=deltas)
    return out.data[0]


def greedy_decode(model: AsrModel, emb: np.ndarray, deltas=None) -> str:
    """Argmax decoding from <sot> until <eot> or the 34-token cap."""
    seq = model.greedy_batch(np.asarray(emb)[None], deltas=deltas)[0]
    return model.tokenizer.decode(seq)


def transcribe(model: AsrModel, w: Waveform, deltas=None) -> str:
    return greedy_decode(model, encode(model, log_mel(w), deltas=deltas),
                         deltas=deltas)


# -- base pre-training ----------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BaseTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-4
    val_count: int = 100
    log_every: int = 200
    seed: int = 0


def _length_buckets(texts: Sequence[str]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, t in enumerate(texts):
        buckets.setdefault(len(t), []).append(i)
    return buckets


def cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level CE against hard targets, (B, L, V) vs (B, L)."""
    B, L, _ = logits.shape
    logp = ad.log_softmax(logits)
    bi = np.repeat(np.arange(B), L)
    li = np.tile(np.arange(L), B)
    picked = ad.take(logp, (bi, li, targets.reshape(-1)))
    return ad.mul(ad.mean(picked), -1.0)


def train_base(samples: Sequence[tuple[Waveform, str]],
               cfg: BaseTrainConfig = BaseTrainConfig(),
               model_cfg: AsrConfig = AsrConfig()) -> tuple[AsrModel, dict]:
    """Supervised teacher-forced pre-training on clean audio.

    Holds out the last `val_count` samples for a greedy-decoding WER
    check. Aborts with TrainingDiverged if the loss goes non-finite.
    """
    from .evalkit import wer

    if len(samples) < cfg.val_count + 1:
        raise ValueError("dataset too small for the requested validation split")
    model = AsrModel(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    train = samples[:len(samples) - cfg.val_count] if cfg.val_count else samples
    val = samples[len(samples) - cfg.val_count:] if cfg.val_count else []

    mels = [log_mel(w).frames for w, _ in train]
    token_ids = [model.tokenizer.encode(t) for _, t in train]
    buckets = _length_buckets([t for _, t in train])
    keys = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
    weights /= weights.sum()

    opt = Adam(model.params)
    history: list[tuple[int, float]] = []
    loss_val = float("nan")
    for step in range(cfg.steps):
        key = keys[rng.choice(len(keys), p=weights)]
        idxs = rng.choice(buckets[key], size=cfg.batch_size)
        mel_batch = np.stack([mels[i] for i in idxs])
        toks = np.stack([[SOT] + token_ids[i] for i in idxs])
        targets = np.stack([token_ids[i] + [EOT] for i in idxs])
        opt.zero_grad()
        memory = model.encode_batch(mel_batch)
        logits = model.decode_batch(memory, toks)
        loss = cross_entropy_loss(logits, targets)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        loss.backward()
        frac = step / max(1, cfg.steps - 1)
        opt.step(cfg.lr * (1 - frac) + cfg.lr_final * frac)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, loss_val))

    metrics = {"final_loss": loss_val, "history": history}
    if val:
        metrics["val_wer_percent"] = evaluate_clean_wer(model, val)
    return model, metrics


def evaluate_clean_wer(model: AsrModel, samples: Sequence[tuple[Waveform, str]],
                       wer_fn=None) -> float:
    """Corpus greedy-decoding WER on clean audio, in percent."""
    from .evalkit import wer as _wer
    wer_fn = wer_fn or _wer
    buckets: dict[int, list[int]] = {}
    for i, (w, _) in enumerate(samples):
        buckets.setdefault(len(w), []).append(i)
    errors = words = 0
    with no_grad():
        for length in sorted(buckets):
            idxs = buckets[length]
            mel_batch = np.stack([log_mel(samples[i][0]).frames for i in idxs])
            memory = model.encode_batch(mel_batch)
            for i, seq in zip(idxs, model.greedy_batch(memory)):
                counts = wer_fn(samples[i][1], model.tokenizer.decode(seq))
                errors += counts.errors
                words += counts.n_ref
    return 100.0 * errors / words


# -- persistence ----------------------------------------------------------------


def save_asr(model: AsrModel, out_dir: str | Path,
             extra_meta: dict | None = None) -> None:
    meta = {"kind": "asr", "config": asdict(model.cfg)}
    meta.update(extra_meta or {})
    save_checkpoint(out_dir, model.named_tensors(), meta)


def load_asr(in_dir: str | Path) -> AsrModel:
    tensors, meta = load_checkpoint(in_dir)
    if meta.get("kind") != "asr":
        raise ValueError(f"{in_dir} is not an ASR checkpoint")
    model = AsrModel(AsrConfig(**meta["config"]))
    table = model.named_tensors()
    if set(table) != set(tensors):
        raise ValueError("checkpoint tensor names do not match the model")
    for name, t in table.items():
        src = tensors[name].data
        if src.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data = src
    return model
