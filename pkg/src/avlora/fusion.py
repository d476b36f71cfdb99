"""AV fusion front end: per-modality conv stems, audio-as-query cross
attention, and a mel-shaped output head with a global residual from the
noisy input mel. The output feeds the frozen ASR core in place of the
raw mel, so shape (T, 80) is preserved exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .audio import MelSpectrogram, N_MELS
from .autodiff import Tensor, no_grad
from .layers import (
    Conv1d,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    sinusoidal_positions,
)
from .video import VIDEO_DIM, LipFrameSequence

MEL_PER_VIDEO_FRAME = 4          # 100 Hz mel hop vs 25 Hz video


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_mels: int = N_MELS
    video_dim: int = VIDEO_DIM


class CrossAttentionLayer:
    """Pre-norm residual cross-attention: audio queries, visual keys/values."""

    def __init__(self, name: str, cfg: FusionConfig, rng, role: str):
        self.ln_q = LayerNorm(f"{name}.ln_q", cfg.d_model, role)
        self.ln_kv = LayerNorm(f"{name}.ln_kv", cfg.d_model, role)
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.d_model,
                                       cfg.n_heads, rng, role)

    @property
    def params(self):
        return self.ln_q.params + self.ln_kv.params + self.attn.params

    def __call__(self, x: Tensor, visual: Tensor) -> Tensor:
        return ad.add(x, self.attn(self.ln_q(x), self.ln_kv(visual)))


class FusionModule:
    """Produces the enhanced mel the adapted core consumes.

    The output head starts at zero, so a fresh module is the identity on
    the noisy mel (the residual path); training learns a correction.
    """

    def __init__(self, cfg: FusionConfig = FusionConfig(), seed: int = 0,
                 role: str = "fusion"):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.a_conv1 = Conv1d("fus.astem.conv1", cfg.n_mels, d, rng, role)
        self.a_conv2 = Conv1d("fus.astem.conv2", d, d, rng, role)
        self.v_conv1 = Conv1d("fus.vstem.conv1", cfg.video_dim, d, rng, role)
        self.v_conv2 = Conv1d("fus.vstem.conv2", d, d, rng, role)
        self.layers = [CrossAttentionLayer(f"fus.x{i}", cfg, rng, role)
                       for i in range(cfg.n_layers)]
        self.head = Linear("fus.head", d, cfg.n_mels, rng, role, init_std=0.0)

    @property
    def params(self) -> list[Tensor]:
        out = (self.a_conv1.params + self.a_conv2.params
               + self.v_conv1.params + self.v_conv2.params)
        for l in self.layers:
            out += l.params
        return out + self.head.params

    def named_tensors(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    # -- forward ---------------------------------------------------------------

    def _stem(self, x: Tensor, conv1: Conv1d, conv2: Conv1d) -> Tensor:
        h = ad.transpose(x, (0, 2, 1))
        h = ad.gelu(conv1(h))
        h = ad.gelu(conv2(h))
        return ad.transpose(h, (0, 2, 1))

    def fuse_batch(self, mels, videos) -> Tensor:
        """(B, T, 80) noisy mels + (B, T_v, 32) lip features -> (B, T, 80)."""
        x = mels if isinstance(mels, Tensor) else Tensor(mels)
        v = videos if isinstance(videos, Tensor) else Tensor(videos)
        if x.ndim != 3 or x.shape[2] != self.cfg.n_mels:
            raise ValueError(f"expected (B, T, {self.cfg.n_mels}) mels")
        if v.ndim != 3 or v.shape[2] != self.cfg.video_dim:
            raise ValueError(f"expected (B, T_v, {self.cfg.video_dim}) videos")
        if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(v.data))):
            raise ValueError("non-finite fusion inputs")
        T, t_v = x.shape[1], v.shape[1]
        if abs(-(-T // MEL_PER_VIDEO_FRAME) - t_v) > 1:
            raise ValueError(f"audio/video duration mismatch: T={T}, T_v={t_v}")
        audio = self._stem(x, self.a_conv1, self.a_conv2)
        visual = align_rates(self._stem(v, self.v_conv1, self.v_conv2), T)
        # shared positions on both streams: cross-attention can align by
        # time even when heavy noise makes the audio queries contentless
        pos = sinusoidal_positions(T, self.cfg.d_model)
        h = ad.add(audio, pos)
        visual = ad.add(visual, pos)
        for layer in self.layers:
            h = layer(h, visual)
        return ad.add(x, self.head(h))


def align_rates(visual, T: int):
    """Repeat 25 Hz features to the 100 Hz mel rate.

    Output frame t copies visual frame floor(t/4), clamped to the last
    frame. Accepts (T_v, D) or batched (B, T_v, D).
    """
    if T < 1:
        raise ValueError("target length must be >= 1")
    arr = visual if isinstance(visual, Tensor) else Tensor(np.asarray(visual))
    t_v = arr.shape[-2]
    if t_v == 0:
        raise ValueError("empty video")
    idx = np.minimum(np.arange(T) // MEL_PER_VIDEO_FRAME, t_v - 1)
    if arr.ndim == 3:
        return ad.take(arr, (slice(None), idx))
    return ad.take(arr, idx)


def fuse(fm: FusionModule, noisy_mel: MelSpectrogram,
         video: LipFrameSequence) -> MelSpectrogram:
    """Single-sample fusion; deterministic, shape-preserving."""
    with no_grad():
        out = fm.fuse_batch(noisy_mel.frames[None], video.frames[None])
    return MelSpectrogram(out.data[0])


def fusion_metadata(fm: FusionModule) -> dict:
    return {"fusion_config": asdict(fm.cfg)}
