"""Low-rank adapter machinery.

An adapter set bundles one low-rank delta per attention projection of the
frozen core plus a fusion module; sets are the swappable unit. Injection
never mutates the base model: deltas ride alongside the wrapped linears
at call time, so swapping is a pointer change whose cost is the adapter
payload only.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .asr import AsrModel
from .audio import NoiseScenario, Waveform, log_mel
from .autodiff import Tensor
from .checkpoint import (
    hash_tensors,
    load_checkpoint,
    save_checkpoint,
    serialized_size,
)
from .fusion import FusionConfig, FusionModule, fuse
from .video import LipFrameSequence

DEFAULT_RANK = 4
LORA_INIT_STD = 0.02


@dataclass
class LoraDelta:
    """Per-layer low-rank weight delta: effective update (alpha/r) * B @ A.

    a: (r, d_in) Gaussian-initialized; b: (d_out, r) zero-initialized, so
    a fresh delta is exactly inert.
    """

    target: str
    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError("delta factor shapes do not match the rank")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    def effective_delta(self) -> np.ndarray:
        """(d_out, d_in) dense update."""
        return np.float32(self.scale) * (self.b.data @ self.a.data)

    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)


@dataclass
class AdapterSet:
    """All deltas for one scenario plus that scenario's fusion module."""

    scenario: NoiseScenario
    deltas: dict[str, LoraDelta]
    fusion: FusionModule
    trainability: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trainability:
            self.trainability = {n: True for n in self.named_tensors()}

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for d in self.deltas.values():
            out[d.a.name] = d.a
            out[d.b.name] = d.b
        out.update(self.fusion.named_tensors())
        return out

    def tensors_for(self, kinds: tuple[str, ...]) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.role in kinds]

    def trainable_tensors(self) -> list[Tensor]:
        return [t for n, t in self.named_tensors().items()
                if self.trainability.get(n, True)]

    def set_trainable(self, *, fusion: bool, encoder_deltas: bool,
                      decoder_deltas: bool) -> None:
        """Stage mask: which tensor groups the optimizer may touch."""
        for name, t in self.named_tensors().items():
            if t.role == "fusion":
                self.trainability[name] = fusion
            elif name.startswith("enc."):
                self.trainability[name] = encoder_deltas
            else:
                self.trainability[name] = decoder_deltas

    def serialized_bytes(self) -> int:
        return serialized_size(self.named_tensors())


def init_adapter_set(model: AsrModel, scenario: NoiseScenario, seed: int = 0,
                     rank: int = DEFAULT_RANK, alpha: float | None = None,
                     fusion_cfg: FusionConfig = FusionConfig()) -> AdapterSet:
    """Fresh set: one delta per q/k/v/o site (A Gaussian, B zero), plus a
    seeded fusion module. alpha defaults to the rank (scaling factor 1)."""
    rng = np.random.default_rng(seed)
    alpha = float(rank if alpha is None else alpha)
    deltas: dict[str, LoraDelta] = {}
    for lin in model.attention_layers():
        a = Tensor(rng.normal(0.0, LORA_INIT_STD, (rank, lin.d_in)),
                   requires_grad=True, name=f"{lin.name}.lora_a", role="adapter")
        b = Tensor(np.zeros((lin.d_out, rank), dtype=np.float32),
                   requires_grad=True, name=f"{lin.name}.lora_b", role="adapter")
        deltas[lin.name] = LoraDelta(lin.name, a, b, rank, alpha)
    fusion = FusionModule(fusion_cfg, seed=seed + 1)
    return AdapterSet(scenario, deltas, fusion)


class AdaptedAsr:
    """The base model with an adapter set riding along (base untouched)."""

    def __init__(self, model: AsrModel, adapter_set: AdapterSet):
        check_compatible(model, adapter_set)
        self.model = model
        self.adapter_set = adapter_set

    @property
    def deltas(self) -> dict[str, LoraDelta]:
        return self.adapter_set.deltas

    def encode_batch(self, mels):
        return self.model.encode_batch(mels, deltas=self.deltas)

    def decode_batch(self, memory, tokens):
        return self.model.decode_batch(memory, tokens, deltas=self.deltas)

    def greedy_batch(self, memory):
        return self.model.greedy_batch(memory, deltas=self.deltas)

    def transcribe(self, noisy: Waveform, video: LipFrameSequence) -> str:
        mel = fuse(self.adapter_set.fusion, log_mel(noisy), video)
        emb = self.model.encode_batch(mel.frames[None], deltas=self.deltas)
        return self.model.tokenizer.decode(self.model.greedy_batch(
            emb, deltas=self.deltas)[0])


def check_compatible(model: AsrModel, adapter_set: AdapterSet) -> None:
    sites = model.adapter_site_names()
    missing = [s for s in sites if s not in adapter_set.deltas]
    extra = [s for s in adapter_set.deltas if s not in sites]
    if missing or extra:
        raise ValueError(f"adapter set mismatch: missing={missing}, extra={extra}")
    for lin in model.attention_layers():
        d = adapter_set.deltas[lin.name]
        if (d.d_in, d.d_out) != (lin.d_in, lin.d_out):
            raise ValueError(f"delta shape mismatch at {lin.name}")


def inject(model: AsrModel, adapter_set: AdapterSet) -> AdaptedAsr:
    """Wrap every q/k/v/o projection with its delta; W is untouched."""
    return AdaptedAsr(model, adapter_set)


def merge(model: AsrModel, adapter_set: AdapterSet) -> AsrModel:
    """Plain model with W' = W + (alpha/r) * B @ A folded in.

    The input model object is left unchanged; deltas store the update in
    math convention (d_out, d_in) while weights are stored (d_in, d_out),
    hence the transpose.
    """
    check_compatible(model, adapter_set)
    merged = AsrModel(model.cfg, seed=0)
    src = model.named_tensors()
    for name, t in merged.named_tensors().items():
        t.data = src[name].data.copy()
    by_site = {lin.name: lin for lin in merged.attention_layers()}
    for site, delta in adapter_set.deltas.items():
        by_site[site].w.data = by_site[site].w.data + delta.effective_delta().T
    return merged


def count_params(model: AsrModel, adapter_set: AdapterSet) -> dict[str, int]:
    """TrP/ToP accounting: trainable adapter+fusion versus everything."""
    trainable = 0
    for d in adapter_set.deltas.values():
        if adapter_set.trainability.get(d.a.name, True):
            trainable += d.rank * d.d_in
        if adapter_set.trainability.get(d.b.name, True):
            trainable += d.rank * d.d_out
    for name, t in adapter_set.fusion.named_tensors().items():
        if adapter_set.trainability.get(name, True):
            trainable += t.size
    return {"trainable": trainable, "total": trainable + model.param_count()}


def format_params_row(model_id: str, counts: dict[str, int]) -> str:
    """Table-style 'TrP 18M / ToP 92M' row (raw counts for toy sizes)."""

    def fmt(n: int) -> str:
        return f"{n / 1e6:.0f}M" if n >= 1_000_000 else f"{n:,}"

    return f"{model_id}: TrP {fmt(counts['trainable'])} / ToP {fmt(counts['total'])}"


# -- registry with swap ---------------------------------------------------------


class _RWLock:
    """Many readers or one writer; writers wait for in-flight readers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    def acquire_read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True

    def release_write(self):
        with self._cond:
            self._writing = False
            self._cond.notify_all()


class AdapterRegistry:
    """Holds the frozen base and the available sets; one set is live.

    swap() replaces only the adapter/fusion payload (counted in
    bytes_moved); the base tensors are never copied or touched.
    """

    def __init__(self, base: AsrModel):
        self.base = base
        self._sets: dict[str, AdapterSet] = {}
        self._active_id: str | None = None
        self._lock = _RWLock()
        self.swap_count = 0
        self.bytes_moved = 0

    def register(self, adapter_set: AdapterSet) -> None:
        check_compatible(self.base, adapter_set)
        self._sets[adapter_set.scenario.scenario_id] = adapter_set

    @property
    def scenario_ids(self) -> list[str]:
        return sorted(self._sets)

    @property
    def active_id(self) -> str | None:
        return self._active_id

    def get(self, scenario_id: str) -> AdapterSet:
        if scenario_id not in self._sets:
            raise KeyError(f"registry holds no adapter set {scenario_id!r}")
        return self._sets[scenario_id]

    def swap(self, scenario_id: str) -> int:
        """Make `scenario_id` live; returns bytes rewritten (payload only)."""
        incoming = self.get(scenario_id)
        self._lock.acquire_write()
        try:
            self._active_id = scenario_id
            moved = incoming.serialized_bytes()
            self.swap_count += 1
            self.bytes_moved += moved
            return moved
        finally:
            self._lock.release_write()

    def active(self) -> AdaptedAsr:
        if self._active_id is None:
            raise RuntimeError("no adapter set has been swapped in")
        return AdaptedAsr(self.base, self._sets[self._active_id])

    def read_session(self):
        """Context manager blocking swaps while inference is in flight."""
        registry = self

        class _Session:
            def __enter__(self):
                registry._lock.acquire_read()
                return registry.active()

            def __exit__(self, *exc):
                registry._lock.release_read()
                return False

        return _Session()

    def base_hashes(self) -> dict[str, str]:
        return hash_tensors(self.base.named_tensors(), role="base")


# -- persistence -----------------------------------------------------------------


def save_adapter_set(adapter_set: AdapterSet, out_dir: str | Path,
                     extra_meta: dict | None = None) -> None:
    any_delta = next(iter(adapter_set.deltas.values()))
    meta = {
        "kind": "adapter_set",
        "scenario": adapter_set.scenario.scenario_id,
        "rank": any_delta.rank,
        "alpha": any_delta.alpha,
        "fusion_config": asdict(adapter_set.fusion.cfg),
        "trainability": adapter_set.trainability,
    }
    meta.update(extra_meta or {})
    save_checkpoint(out_dir, adapter_set.named_tensors(), meta)


def load_adapter_set(in_dir: str | Path, model: AsrModel) -> AdapterSet:
    tensors, meta = load_checkpoint(in_dir)
    if meta.get("kind") != "adapter_set":
        raise ValueError(f"{in_dir} is not an adapter-set checkpoint")
    scenario = NoiseScenario.parse(meta["scenario"])
    rank, alpha = int(meta["rank"]), float(meta["alpha"])
    deltas = {}
    for lin in model.attention_layers():
        a = tensors[f"{lin.name}.lora_a"]
        b = tensors[f"{lin.name}.lora_b"]
        deltas[lin.name] = LoraDelta(lin.name, a, b, rank, alpha)
    fusion = FusionModule(FusionConfig(**meta["fusion_config"]))
    for name, t in fusion.named_tensors().items():
        t.data = tensors[name].data
    trainability = {k: bool(v) for k, v in meta.get("trainability", {}).items()}
    out = AdapterSet(scenario, deltas, fusion, trainability)
    check_compatible(model, out)
    return out
