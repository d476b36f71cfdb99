"""Noise-adaptive audio-visual speech recognition at desk scale.

A frozen miniature ASR transformer extended with swappable low-rank
adapter sets and an AV fusion front end, trained by teacher-student
distillation against its own clean-input outputs, with a CNN noise
classifier routing each utterance to the best-matching adapter set.
Pure numpy/scipy; everything is deterministic under its seeds.
"""

from .asr import AsrConfig, AsrModel, Tokenizer, greedy_decode, train_base
from .audio import (
    MelSpectrogram,
    NoiseBank,
    NoiseCategory,
    NoiseScenario,
    Waveform,
    build_noise_bank,
    contaminate,
    log_mel,
    make_noise,
    mix_at_snr,
    synth_utterance,
)
from .corpus import AvSample, synth_corpus
from .distill import (
    DistillSchedule,
    DistillTargets,
    LossBreakdown,
    StudentOutputs,
    grad_check,
    loss,
    teacher_forward,
    train_adapters,
)
from .evalkit import WerReport, compare, eval_grid, wer
from .fusion import FusionConfig, FusionModule, align_rates, fuse
from .lora import (
    AdapterRegistry,
    AdapterSet,
    LoraDelta,
    count_params,
    init_adapter_set,
    inject,
    merge,
)
from .selector import (
    NoiseClassifier,
    RoutingDecision,
    classify,
    infer_routed,
    route,
    train_classifier,
)
from .video import LipFrameSequence, synth_video

__version__ = "0.1.0"
