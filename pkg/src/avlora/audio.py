"""Audio synthesis, noise generation, exact-SNR mixing, and the log-mel front end.

Everything here is a pure function of its inputs and seed: repeated calls
are bit-identical. All waveforms are mono float32 at 16 kHz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16_000
CHAR_SAMPLES = 1600          # 100 ms per character
RAMP_SAMPLES = 160           # 10 ms raised-cosine onset/offset
TARGET_RMS = 0.1
BABBLE_MERGE_COUNT = 30

N_FFT = 400
HOP = 160
N_MELS = 80
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-10
DYNAMIC_RANGE = 8.0

VOCABULARY = "abcdefghijklmnopqrstuvwxyz "
_CHAR_INDEX = {c: i for i, c in enumerate(VOCABULARY)}

SNR_RANGE_DB = (-15.0, 30.0)
HIGH_NOISE_RANGE_DB = (-15.0, 0.0)
LOW_NOISE_RANGE_DB = (0.0, 30.0)
DEFAULT_CLEAN_PROB = 0.05


class NoiseCategory(str, Enum):
    BABBLE = "babble"
    MUSIC = "music"
    NATURAL = "natural"
    SIDESPEAKER = "sidespeaker"


CATEGORIES = tuple(NoiseCategory)
NOISE_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz audio; samples are finite float32 in roughly [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def power(self) -> float:
        """Full-clip mean-square power."""
        return float(np.mean(self.samples.astype(np.float64) ** 2))

    def rms(self) -> float:
        return float(np.sqrt(self.power()))


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel features, time-major (T, 80)."""

    frames: np.ndarray
    hop: int = HOP
    window: int = N_FFT

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 2 or f.shape[1] != N_MELS:
            raise ValueError(f"mel frames must be (T, {N_MELS})")
        if not np.all(np.isfinite(f)):
            raise ValueError("mel frames contain non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class NoiseScenario:
    """Which slice of the noise spectrum an adapter set (or draw) covers.

    Exactly one of: the full spectrum, a single category, or an SNR level
    band (high = [-15, 0) dB, low = [0, 30] dB).
    """

    kind: str                               # "full" | "category" | "level"
    category: NoiseCategory | None = None
    level: str | None = None                # "high" | "low"

    def __post_init__(self):
        if self.kind == "full":
            ok = self.category is None and self.level is None
        elif self.kind == "category":
            ok = isinstance(self.category, NoiseCategory) and self.level is None
        elif self.kind == "level":
            ok = self.level in ("high", "low") and self.category is None
        else:
            ok = False
        if not ok:
            raise ValueError(f"invalid scenario: {self!r}")

    @property
    def scenario_id(self) -> str:
        if self.kind == "full":
            return "full"
        if self.kind == "category":
            return self.category.value
        return self.level

    @property
    def snr_range_db(self) -> tuple[float, float]:
        if self.kind == "level":
            return HIGH_NOISE_RANGE_DB if self.level == "high" else LOW_NOISE_RANGE_DB
        return SNR_RANGE_DB

    @classmethod
    def parse(cls, name: str) -> "NoiseScenario":
        name = name.lower()
        if name == "full":
            return cls("full")
        if name in ("high", "highnoise"):
            return cls("level", level="high")
        if name in ("low", "lownoise"):
            return cls("level", level="low")
        return cls("category", category=NoiseCategory(name))


SCENARIO_IDS = ("babble", "music", "natural", "sidespeaker", "high", "low", "full")


# -- speech synthesis ---------------------------------------------------------


def _char_chord(char: str) -> np.ndarray:
    """100 ms two-partial chord for one character, RMS-normalized to 0.1.

    Per-character normalization makes concatenation exact: a clip built
    from normalized chords has clip RMS 0.1 and shares a bitwise prefix
    with any shorter text.
    """
    idx = _CHAR_INDEX[char]
    f0 = 200.0 + 15.0 * idx
    t = np.arange(CHAR_SAMPLES, dtype=np.float32) / SAMPLE_RATE
    wave = np.sin(2 * np.pi * f0 * t) + 0.5 * np.sin(2 * np.pi * 2 * f0 * t)
    ramp = 0.5 * (1 - np.cos(np.pi * np.arange(RAMP_SAMPLES) / RAMP_SAMPLES))
    env = np.ones(CHAR_SAMPLES, dtype=np.float32)
    env[:RAMP_SAMPLES] = ramp
    env[-RAMP_SAMPLES:] = ramp[::-1]
    wave = (wave * env).astype(np.float32)
    rms = np.sqrt(np.mean(wave.astype(np.float64) ** 2))
    return (wave * np.float32(TARGET_RMS / rms)).astype(np.float32)


_CHORD_CACHE: dict[str, np.ndarray] = {}


def _chord(char: str) -> np.ndarray:
    cached = _CHORD_CACHE.get(char)
    if cached is None:
        if char not in _CHAR_INDEX:
            raise ValueError(f"character {char!r} outside the toy vocabulary")
        cached = _CHORD_CACHE[char] = _char_chord(char)
    return cached


def synth_utterance(text: str, seed: int = 0) -> Waveform:
    """Concatenative chord speech: one fixed 100 ms chord per character.

    The waveform is a pure function of the text; `seed` is part of the
    interface for forward compatibility but does not alter the output
    (prefix equality across texts would otherwise break).
    """
    if not text:
        raise ValueError("text must be non-empty")
    if len(text) > 32:
        raise ValueError("text longer than 32 characters")
    return Waveform(np.concatenate([_chord(c) for c in text]))


def _renorm(samples: np.ndarray, target: float = TARGET_RMS) -> np.ndarray:
    rms = np.sqrt(np.mean(samples.astype(np.float64) ** 2))
    if rms == 0.0:
        raise ValueError("cannot normalize an all-zero signal")
    return (samples * np.float32(target / rms)).astype(np.float32)


def _tile_crop(samples: np.ndarray, duration: int) -> np.ndarray:
    """Loop from the start and cut to `duration` samples (offset-free)."""
    reps = -(-duration // samples.size)
    return np.tile(samples, reps)[:duration]


# -- noise bank ---------------------------------------------------------------


def _random_text(rng: np.random.Generator, lo: int = 4, hi: int = 12) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(VOCABULARY[i] for i in rng.integers(0, 26, n))


def _music_source(rng: np.random.Generator, n: int) -> np.ndarray:
    f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(400.0))))
    t = np.arange(n, dtype=np.float32) / SAMPLE_RATE
    wave = np.zeros(n, dtype=np.float32)
    for k in range(1, 5):
        phase = rng.uniform(0, 2 * np.pi)
        wave += (np.sin(2 * np.pi * k * f0 * t + phase) / k).astype(np.float32)
    return _renorm(wave)


def _natural_source(rng: np.random.Generator, n: int) -> np.ndarray:
    white = rng.normal(0.0, 1.0, n)
    fc = rng.uniform(300.0, 2000.0)
    a = np.exp(-2 * np.pi * fc / SAMPLE_RATE)  # one-pole low-pass
    low = lfilter([1.0 - a], [1.0, -a], white)
    return _renorm(low.astype(np.float32))


@dataclass
class NoiseBank:
    """Per-category source clips with disjoint 80/10/10 train/val/test splits.

    `clips[cat]` is the ordered clip list; `splits[cat][split]` holds the
    indices assigned to each split (clip identity = index).
    """

    clips: dict[NoiseCategory, list[Waveform]]
    splits: dict[NoiseCategory, dict[str, list[int]]]

    def clip_ids(self, category: NoiseCategory, split: str) -> list[int]:
        if split not in NOISE_SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return self.splits[category][split]


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 clip-count split, rounding toward train."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def build_noise_bank(n_clips_per_category: int = 100, seed: int = 0,
                     clip_seconds: float = 2.0) -> NoiseBank:
    """Synthesize source material for the four noise categories."""
    rng = np.random.default_rng(seed)
    n = int(clip_seconds * SAMPLE_RATE)
    clips: dict[NoiseCategory, list[Waveform]] = {}
    splits: dict[NoiseCategory, dict[str, list[int]]] = {}
    for cat in CATEGORIES:
        lst = []
        for _ in range(n_clips_per_category):
            if cat in (NoiseCategory.BABBLE, NoiseCategory.SIDESPEAKER):
                w = _tile_crop(synth_utterance(_random_text(rng)).samples, n)
                lst.append(Waveform(_renorm(w)))
            elif cat is NoiseCategory.MUSIC:
                lst.append(Waveform(_music_source(rng, n)))
            else:
                lst.append(Waveform(_natural_source(rng, n)))
        clips[cat] = lst
        n_train, n_val, n_test = split_counts(n_clips_per_category)
        order = list(range(n_clips_per_category))
        splits[cat] = {
            "train": order[:n_train],
            "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:],
        }
    return NoiseBank(clips, splits)


def save_noise_bank(bank: NoiseBank, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {}
    for cat in CATEGORIES:
        cat_dir = out / cat.value
        cat_dir.mkdir(exist_ok=True)
        for i, w in enumerate(bank.clips[cat]):
            save_waveform(cat_dir / f"clip_{i:04d}.f32", w)
        meta[cat.value] = {"n_clips": len(bank.clips[cat]),
                           "splits": bank.splits[cat]}
    (out / "bank.json").write_text(json.dumps(meta, indent=1))


def load_noise_bank(in_dir: str | Path) -> NoiseBank:
    root = Path(in_dir)
    meta = json.loads((root / "bank.json").read_text())
    clips, splits = {}, {}
    for cat in CATEGORIES:
        m = meta[cat.value]
        clips[cat] = [load_waveform(root / cat.value / f"clip_{i:04d}.f32")
                      for i in range(m["n_clips"])]
        splits[cat] = {k: list(v) for k, v in m["splits"].items()}
    return NoiseBank(clips, splits)


def make_noise(category: NoiseCategory, duration: int, bank: NoiseBank,
               seed: int, split: str = "train") -> Waveform:
    """Compose one noise clip of `duration` samples from the bank split.

    babble: mean of 30 independently drawn speech clips; sidespeaker: one
    utterance; music: 3 slowly amplitude-modulated chords; natural:
    low-pass noise shaped by a random burst envelope. All RMS 0.1.
    """
    if not isinstance(category, NoiseCategory):
        raise ValueError(f"unknown noise category {category!r}")
    if duration < CHAR_SAMPLES:
        raise ValueError(f"duration must be >= {CHAR_SAMPLES} samples")
    rng = np.random.default_rng(seed)
    ids = bank.clip_ids(category, split)
    if not ids:
        raise ValueError(f"bank has no {category.value!r} clips in split {split!r}")
    pool = bank.clips[category]

    def draw() -> np.ndarray:
        return _tile_crop(pool[ids[rng.integers(0, len(ids))]].samples, duration)

    if category is NoiseCategory.BABBLE:
        acc = np.zeros(duration, dtype=np.float64)
        for _ in range(BABBLE_MERGE_COUNT):
            acc += draw()
        mixed = (acc / BABBLE_MERGE_COUNT).astype(np.float32)
    elif category is NoiseCategory.SIDESPEAKER:
        mixed = draw()
    elif category is NoiseCategory.MUSIC:
        t = np.arange(duration, dtype=np.float32) / SAMPLE_RATE
        acc = np.zeros(duration, dtype=np.float32)
        for _ in range(3):
            chord = draw()
            rate = rng.uniform(0.2, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            env = 0.1 + 0.9 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + phase))
            acc += chord * env.astype(np.float32)
        mixed = acc
    else:  # natural: burst envelope over low-pass noise
        base = draw()
        t = np.arange(duration, dtype=np.float32) / SAMPLE_RATE
        env = np.full(duration, 0.05, dtype=np.float32)
        n_bursts = max(1, int(rng.poisson(2.0 * duration / SAMPLE_RATE)))
        for _ in range(n_bursts):
            center = rng.uniform(0, duration / SAMPLE_RATE)
            width = rng.uniform(0.05, 0.2)
            amp = rng.uniform(0.5, 1.0)
            arg = (t - center) / width
            lobe = np.where(np.abs(arg) < 1.0, 0.5 * (1 + np.cos(np.pi * arg)), 0.0)
            env += (amp * lobe).astype(np.float32)
        mixed = base * env
    return Waveform(_renorm(mixed))


# -- SNR mixing ---------------------------------------------------------------


def snr_gain(clean_power: float, noise_power: float, snr_db: float) -> float:
    """Gain g so that 10*log10(P_clean / P_gnoise) == snr_db."""
    return float(np.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return clean + g*noise with the gain set for an exact full-clip SNR."""
    if len(clean) != len(noise):
        raise ValueError("clean and noise must have equal length")
    p_clean, p_noise = clean.power(), noise.power()
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power")
    if p_noise == 0.0:
        raise ValueError("noise signal has zero power")
    g = np.float32(snr_gain(p_clean, p_noise, snr_db))
    return Waveform(clean.samples + g * noise.samples)


# -- contamination ------------------------------------------------------------


@dataclass(frozen=True)
class ContaminationMeta:
    category: NoiseCategory | None
    snr_db: float
    clean: bool


def contaminate(clean: Waveform, scenario: NoiseScenario, bank: NoiseBank,
                seed: int, clean_prob: float = DEFAULT_CLEAN_PROB,
                split: str = "train") -> tuple[Waveform, ContaminationMeta]:
    """Draw a (category, SNR) per the scenario and mix; sometimes pass clean.

    With probability `clean_prob` the clean waveform is returned untouched,
    tagged snr_db=+inf. The visual stream is never contaminated, so this
    operates on audio only.
    """
    if not 0.0 <= clean_prob <= 1.0:
        raise ValueError("clean_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    if rng.random() < clean_prob:
        return clean, ContaminationMeta(None, float("inf"), True)
    if scenario.kind == "category":
        category = scenario.category
    else:
        category = CATEGORIES[rng.integers(0, len(CATEGORIES))]
    lo, hi = scenario.snr_range_db
    snr_db = float(rng.uniform(lo, hi))
    noise = make_noise(category, len(clean), bank,
                       seed=int(rng.integers(0, 2 ** 31)), split=split)
    return mix_at_snr(clean, noise, snr_db), ContaminationMeta(category, snr_db, False)


# -- log-mel front end --------------------------------------------------------


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers_hz(n_mels: int = N_MELS, fmax: float = MEL_FMAX) -> np.ndarray:
    pts = np.linspace(0.0, hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def _mel_filterbank() -> np.ndarray:
    """Triangular HTK-mel filters, (80, 201) for a 400-point rfft at 16 kHz."""
    n_bins = N_FFT // 2 + 1
    fft_hz = np.arange(n_bins) * (SAMPLE_RATE / N_FFT)
    pts_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(MEL_FMAX), N_MELS + 2))
    fb = np.zeros((N_MELS, n_bins), dtype=np.float64)
    for m in range(N_MELS):
        lo, center, hi = pts_hz[m], pts_hz[m + 1], pts_hz[m + 2]
        up = (fft_hz - lo) / (center - lo)
        down = (hi - fft_hz) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


_MEL_FB: np.ndarray | None = None
_HANN: np.ndarray | None = None


def log_mel(w: Waveform) -> MelSpectrogram:
    """Whisper-style log-mel: Hann-400/hop-160 power STFT (no centering),
    80 HTK-mel triangles to 8 kHz, log10 clamp at 1e-10, 8-decade dynamic
    range clamp, then (x + 4) / 4.
    """
    global _MEL_FB, _HANN
    x = w.samples
    if x.size < N_FFT:
        raise ValueError(f"input shorter than one window ({N_FFT} samples)")
    if _MEL_FB is None:
        _MEL_FB = _mel_filterbank()
        _HANN = (0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT))
                 ).astype(np.float32)
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP]
    spec = np.abs(np.fft.rfft(frames * _HANN, axis=1)) ** 2
    power = spec.astype(np.float32) @ _MEL_FB.T
    # log-domain math in float64 so the clamp floor lands exactly on -1.5
    logm = np.log10(np.maximum(power.astype(np.float64), LOG_FLOOR))
    logm = np.maximum(logm, logm.max() - DYNAMIC_RANGE)
    return MelSpectrogram(((logm + 4.0) / 4.0).astype(np.float32))


def expected_mel_frames(n_samples: int) -> int:
    return 1 + (n_samples - N_FFT) // HOP


# -- raw f32 audio files ------------------------------------------------------


def save_waveform(path: str | Path, w: Waveform) -> None:
    """Raw little-endian float32 PCM, mono 16 kHz (`.f32`)."""
    w.samples.astype("<f4").tofile(Path(path))


def load_waveform(path: str | Path) -> Waveform:
    data = np.fromfile(Path(path), dtype="<f4")
    return Waveform(data)
