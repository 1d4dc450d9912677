"""Balanced speaker-count mixture datasets.

Builds fixed-length audio segments labeled with the number of concurrent
speakers, class k in {0,1,2,3,4,>=5}. Speech comes either from a built-in
synthetic voice generator (harmonic stacks with syllabic amplitude
modulation and pauses) or from user-supplied mono WAV pools; class 0 is
colored noise. Splits are balanced per class, train/test speaker pools are
disjoint, and every byte written is a pure function of the master seed.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 6
MAX_SPEAKERS = 7  # the ">=5" class draws k from {5, 6, 7}
PEAK_LEVEL = 0.9
SOURCE_MARGIN_SECONDS = 0.5  # sources run longer than the segment for offset crops

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class VoiceSpec:
    """Parameters of one synthetic voice."""

    f0_hz: float
    rolloff: float = 0.75
    syllable_hz: float = 4.0
    mod_depth: float = 0.8
    pause_density: float = 0.3
    jitter: float = 0.01

    def __post_init__(self):
        if not 85.0 <= self.f0_hz <= 255.0:
            raise ValueError(f"f0 must lie in [85, 255] Hz, got {self.f0_hz}")
        if not 0.0 < self.rolloff < 1.0:
            raise ValueError("rolloff must lie in (0, 1)")
        if not 0.0 <= self.pause_density <= 1.0:
            raise ValueError("pause density must lie in [0, 1]")


@dataclass(frozen=True)
class SpeakerSource:
    """A speaker identity: either a synthetic voice or a waveform pool."""

    id: str
    voice: VoiceSpec | None = None
    wave: np.ndarray | None = None

    def __post_init__(self):
        if (self.voice is None) == (self.wave is None):
            raise ValueError("speaker source needs exactly one of voice or wave")
        if self.wave is not None:
            if self.wave.ndim != 1:
                raise ValueError("waveform pools must be mono")
            if not np.all(np.isfinite(self.wave)):
                raise ValueError("waveform pool contains non-finite samples")


def sample_voice(rng: np.random.Generator) -> VoiceSpec:
    return VoiceSpec(
        f0_hz=float(rng.uniform(85.0, 255.0)),
        rolloff=float(rng.uniform(0.55, 0.85)),
        syllable_hz=float(rng.uniform(2.0, 6.0)),
        mod_depth=float(rng.uniform(0.5, 0.9)),
        pause_density=float(rng.uniform(0.15, 0.45)),
        jitter=float(rng.uniform(0.002, 0.02)),
    )


def _pause_gate(n: int, sample_rate: int, pause_density: float,
                rng: np.random.Generator) -> np.ndarray:
    """Per-sample gate with smooth edges; at least half the signal stays active."""
    chunks = []
    pos = 0
    while pos < n:
        ln = int(rng.uniform(0.15, 0.35) * sample_rate)
        ln = max(1, min(ln, n - pos))
        chunks.append((pos, ln, bool(rng.random() < pause_density)))
        pos += ln
    active = sum(ln for _, ln, silent in chunks if not silent)
    order = rng.permutation(len(chunks))
    for idx in order:
        if active >= 0.55 * n:
            break
        pos_i, ln, silent = chunks[idx]
        if silent:
            chunks[idx] = (pos_i, ln, False)
            active += ln
    gate = np.zeros(n)
    for pos_i, ln, silent in chunks:
        if not silent:
            gate[pos_i:pos_i + ln] = 1.0
    ramp = max(1, int(0.010 * sample_rate))
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.convolve(gate, kernel, mode="same")


def synth_speaker_signal(spec: VoiceSpec, duration_s: float, sample_rate: int,
                         rng: np.random.Generator) -> np.ndarray:
    """One voice's waveform: harmonics + syllabic modulation + pauses.

    Bounded in [-1, 1], deterministic under the generator state, and silent
    only in the degenerate pause_density == 1 case.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    if spec.pause_density >= 1.0:
        return np.zeros(n, dtype=np.float32)

    t = np.arange(n) / sample_rate
    vibrato_phase = rng.uniform(0, 2 * np.pi)
    inst_f0 = spec.f0_hz * (1.0 + spec.jitter * np.sin(2 * np.pi * 4.7 * t + vibrato_phase))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate

    n_harm = max(1, min(12, int(0.45 * sample_rate / spec.f0_hz)))
    amps = spec.rolloff ** np.arange(n_harm)
    harm_phases = rng.uniform(0, 2 * np.pi, n_harm)
    y = np.zeros(n)
    for h in range(n_harm):
        y += amps[h] * np.sin((h + 1) * phase + harm_phases[h])
    y /= amps.sum()

    env_phase = rng.uniform(0, 2 * np.pi)
    env = 1.0 - spec.mod_depth * (0.5 + 0.5 * np.sin(
        2 * np.pi * spec.syllable_hz * t + env_phase))
    gate = _pause_gate(n, sample_rate, spec.pause_density, rng)
    return (y * env * gate).astype(np.float32)


def synth_noise(duration_s: float, sample_rate: int, rng: np.random.Generator,
                tilt: float = 1.0) -> np.ndarray:
    """Colored noise (1/f^tilt spectral shape) as the non-speech class."""
    n = int(round(duration_s * sample_rate))
    white = rng.normal(size=n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    shaping = (1.0 + freqs) ** (-tilt / 2.0)
    y = np.fft.irfft(spectrum * shaping, n=n)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y / peak
    return y.astype(np.float32)


def activity_fraction(samples: np.ndarray, sample_rate: int,
                      frame_ms: float = 20.0) -> float:
    """Fraction of frames with non-negligible energy."""
    frame = max(1, int(sample_rate * frame_ms / 1000.0))
    n_frames = len(samples) // frame
    if n_frames == 0:
        return 0.0
    trimmed = np.asarray(samples[:n_frames * frame], dtype=np.float64)
    rms = np.sqrt((trimmed.reshape(n_frames, frame) ** 2).mean(axis=1))
    return float(np.mean(rms > 1e-4))


@dataclass(frozen=True)
class MixtureExample:
    samples: np.ndarray
    sample_rate: int
    label: int
    true_speaker_count: int
    seed: int


def _crop(wave_arr: np.ndarray, segment_len: int, rng: np.random.Generator,
          who: str) -> np.ndarray:
    if len(wave_arr) < segment_len:
        raise ValueError(f"{who} is shorter than the segment "
                         f"({len(wave_arr)} < {segment_len} samples)")
    if len(wave_arr) == segment_len:
        return wave_arr
    off = int(rng.integers(len(wave_arr) - segment_len + 1))
    return wave_arr[off:off + segment_len]


def make_mixture(sources, noise, k: int, rng: np.random.Generator,
                 segment_len: int, sample_rate: int, seed: int = 0) -> MixtureExample:
    """Overlap k speaker segments (or noise when k == 0) into one example.

    Each source gets a uniform [-3, +3] dB gain; the sum is peak-normalized
    to 0.9; the label is min(k, 5).
    """
    if k < 0:
        raise ValueError("speaker count must be non-negative")
    if len(sources) != k:
        raise ValueError(f"expected {k} sources, got {len(sources)}")
    if k == 0:
        if noise is None:
            raise ValueError("the zero-speaker class requires a noise source")
        mix = _crop(np.asarray(noise, dtype=np.float64), segment_len, rng, "noise").copy()
    else:
        mix = np.zeros(segment_len, dtype=np.float64)
        for i, src in enumerate(sources):
            seg = _crop(np.asarray(src, dtype=np.float64), segment_len, rng, f"source {i}")
            gain = 10.0 ** (rng.uniform(-3.0, 3.0) / 20.0)
            mix += gain * seg
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix *= PEAK_LEVEL / peak
    return MixtureExample(samples=mix.astype(np.float32), sample_rate=sample_rate,
                          label=min(k, 5), true_speaker_count=k, seed=seed)


def write_wav(path, samples: np.ndarray, sample_rate: int):
    """Mono 16-bit little-endian PCM."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0),
                  -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return samples, rate


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    speakers: int
    seed: int


@dataclass
class Manifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)


def write_manifest(path, manifest: Manifest):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("path,label,speakers,seed\n")
        for e in manifest.entries:
            fh.write(f"{e.path},{e.label},{e.speakers},{e.seed}\n")


def read_manifest(path, split: str) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != "path,label,speakers,seed":
        raise ValueError(f"{path}: bad manifest header")
    entries = []
    for ln in lines[1:]:
        p, label, speakers, seed = ln.split(",")
        entries.append(ManifestEntry(p, int(label), int(speakers), int(seed)))
    return Manifest(split=split, entries=entries)


@dataclass(frozen=True)
class DatasetConfig:
    out_dir: str
    seed: int = 0
    sample_rate: int = 16000
    segment_seconds: float = 5.0
    train_per_class: int = 1000
    val_per_class: int = 100
    test_per_class: int = 300
    train_speakers: int = 40
    test_speakers: int = 16
    source_dir: str | None = None  # per-speaker mono WAVs; synthetic voices if None

    def counts(self) -> dict[str, int]:
        return {"train": self.train_per_class, "val": self.val_per_class,
                "test": self.test_per_class}


def _example_seed(master: int, split: str, label: int, index: int) -> int:
    ss = np.random.SeedSequence([master, _SPLIT_IDS[split], label, index])
    return int(ss.generate_state(1, np.uint64)[0])


def _synthetic_pool(master: int, tag: str, tag_id: int, count: int) -> list[SpeakerSource]:
    pool = []
    for i in range(count):
        ss = np.random.SeedSequence([master, 1000 + tag_id, i])
        rng = np.random.default_rng(ss)
        pool.append(SpeakerSource(id=f"{tag}{i:03d}", voice=sample_voice(rng)))
    return pool


def _wav_pools(cfg: DatasetConfig) -> tuple[list[SpeakerSource], list[SpeakerSource]]:
    files = sorted(Path(cfg.source_dir).glob("*.wav"))
    need = cfg.train_speakers + cfg.test_speakers
    if len(files) < need:
        raise ValueError(
            f"insufficient distinct sources for disjoint splits: found {len(files)} "
            f"WAV files in {cfg.source_dir}, need {need}")
    sources = []
    for f in files[:need]:
        samples, rate = read_wav(f)
        if rate != cfg.sample_rate:
            raise ValueError(f"{f}: sample rate {rate} != configured {cfg.sample_rate}")
        sources.append(SpeakerSource(id=f.stem, wave=samples))
    return sources[:cfg.train_speakers], sources[cfg.train_speakers:need]


def _source_segment(src: SpeakerSource, duration_s: float, sample_rate: int,
                    rng: np.random.Generator) -> np.ndarray:
    if src.voice is not None:
        return synth_speaker_signal(src.voice, duration_s, sample_rate, rng)
    return src.wave


def build_example(pool, label: int, seed: int, segment_len: int,
                  sample_rate: int, segment_seconds: float) -> tuple[MixtureExample, list[str]]:
    """One deterministic example: pick speakers, synthesize, mix."""
    rng = np.random.default_rng(seed)
    if label == 0:
        k = 0
    elif label < 5:
        k = label
    else:
        k = 5 + int(rng.integers(3))
    if k > len(pool):
        raise ValueError(f"insufficient distinct sources: need {k} speakers, "
                         f"pool has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    duration = segment_seconds + SOURCE_MARGIN_SECONDS
    sources = [_source_segment(s, duration, sample_rate, rng) for s in chosen]
    noise = synth_noise(duration, sample_rate, rng,
                        tilt=float(rng.uniform(0.3, 1.2))) if k == 0 else None
    ex = make_mixture(sources, noise, k, rng, segment_len, sample_rate, seed=seed)
    return ex, [s.id for s in chosen]


def build_dataset(cfg: DatasetConfig) -> dict[str, Manifest]:
    """Write WAVs, per-split manifests, and a meta record; fully seeded."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.source_dir is not None:
        train_pool, test_pool = _wav_pools(cfg)
    else:
        train_pool = _synthetic_pool(cfg.seed, "train", 0, cfg.train_speakers)
        test_pool = _synthetic_pool(cfg.seed, "test", 1, cfg.test_speakers)
    if min(len(train_pool), len(test_pool)) < MAX_SPEAKERS:
        raise ValueError(f"insufficient distinct sources: each split pool needs "
                         f">= {MAX_SPEAKERS} speakers for the top class")

    segment_len = int(round(cfg.segment_seconds * cfg.sample_rate))
    manifests = {}
    for split, per_class in cfg.counts().items():
        if per_class <= 0:
            continue
        pool = test_pool if split == "test" else train_pool
        manifest = Manifest(split=split)
        for label in range(NUM_CLASSES):
            class_dir = out / split / f"class{label}"
            class_dir.mkdir(parents=True, exist_ok=True)
            for idx in range(per_class):
                seed = _example_seed(cfg.seed, split, label, idx)
                ex, _ = build_example(pool, label, seed, segment_len,
                                      cfg.sample_rate, cfg.segment_seconds)
                rel = f"{split}/class{label}/{split}_{label}_{idx:05d}.wav"
                write_wav(out / rel, ex.samples, cfg.sample_rate)
                manifest.entries.append(ManifestEntry(
                    rel, ex.label, ex.true_speaker_count, seed))
        write_manifest(out / f"manifest_{split}.csv", manifest)
        manifests[split] = manifest

    meta = {
        "sample_rate": cfg.sample_rate,
        "segment_seconds": cfg.segment_seconds,
        "seed": cfg.seed,
        "num_classes": NUM_CLASSES,
        "speakers": {
            "train": [s.id for s in train_pool],
            "test": [s.id for s in test_pool],
        },
        "counts": cfg.counts(),
    }
    with open(out / "dataset_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifests


def load_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Waveforms and labels of one split, in manifest order."""
    root = Path(data_dir)
    manifest = read_manifest(root / f"manifest_{split}.csv", split)
    if not manifest.entries:
        raise ValueError(f"split {split!r} is empty")
    xs, ys = [], []
    for e in manifest.entries:
        samples, _ = read_wav(root / e.path)
        xs.append(samples)
        ys.append(e.label)
    return np.stack(xs), np.array(ys, dtype=np.int64)
