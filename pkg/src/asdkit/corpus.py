"""Clip data model, DCASE-style file ingestion and a synthetic machine-sound corpus."""

from __future__ import annotations

import csv
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import CorpusIOError, EmptyCorpus, MalformedName, UsageError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DOMAINS = ("source", "target")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomaly", "unknown")
MANIFEST_COLUMNS = ("clip_id", "machine", "section", "domain", "split", "condition", "attribute")


@dataclass
class AudioClip:
    clip_id: str
    machine: str
    section: str
    domain: str
    split: str
    condition: str
    index: int = 0
    attribute: str | None = None
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise MalformedName(f"{self.clip_id}: unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise MalformedName(f"{self.clip_id}: unknown split {self.split!r}")
        if self.condition not in CONDITIONS:
            raise MalformedName(f"{self.clip_id}: unknown condition {self.condition!r}")
        if self.split == "train" and self.condition != "normal":
            raise MalformedName(f"{self.clip_id}: training clips must be normal")

    @property
    def duration(self) -> float:
        return 0.0 if self.samples is None else len(self.samples) / SAMPLE_RATE

    def descriptor(self) -> "AudioClip":
        """Copy without audio payload."""
        return replace(self, samples=None)


def format_filename(clip: AudioClip) -> str:
    """Relative path `<machine>/section_<NN>_<domain>_<split>_<condition>_<idx>[_<attr>].wav`."""
    name = f"section_{clip.section}_{clip.domain}_{clip.split}_{clip.condition}_{clip.index:04d}"
    if clip.attribute is not None:
        name += f"_{clip.attribute}"
    return f"{clip.machine}/{name}.wav"


def parse_filename(path: str | os.PathLike) -> AudioClip:
    """Parse a DCASE-convention path into a clip descriptor (no audio loaded)."""
    p = Path(path)
    if p.suffix.lower() != ".wav":
        raise MalformedName(f"{path}: not a .wav file")
    if len(p.parts) < 2:
        raise MalformedName(f"{path}: expected a <machine>/ parent directory")
    machine = p.parts[-2] if p.parts[-2] not in SPLITS else p.parts[-3] if len(p.parts) > 2 else ""
    if not machine:
        raise MalformedName(f"{path}: cannot determine machine directory")
    tokens = p.stem.split("_")
    if len(tokens) < 6 or tokens[0] != "section":
        raise MalformedName(f"{path}: expected section_<NN>_<domain>_<split>_<condition>_<idx>")
    _, section, domain, split, condition, idx, *attr = tokens
    if not section.isdigit() or not idx.isdigit():
        raise MalformedName(f"{path}: section and index must be numeric")
    if domain not in DOMAINS:
        raise MalformedName(f"{path}: unknown domain token {domain!r}")
    if split not in SPLITS:
        raise MalformedName(f"{path}: unknown split token {split!r}")
    if condition not in CONDITIONS:
        raise MalformedName(f"{path}: unknown condition token {condition!r}")
    return AudioClip(
        clip_id=f"{machine}/{p.stem}",
        machine=machine,
        section=section,
        domain=domain,
        split=split,
        condition=condition,
        index=int(idx),
        attribute="_".join(attr) if attr else None,
        path=str(path),
    )


@dataclass
class CorpusManifest:
    clips: list[AudioClip]

    def __post_init__(self):
        self.clips = sorted(self.clips, key=lambda c: c.clip_id)
        dup = [k for k, n in Counter(c.clip_id for c in self.clips).items() if n > 1]
        if dup:
            raise UsageError(f"duplicate clip ids: {dup[:5]}")

    def __len__(self):
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    @property
    def machines(self) -> list[str]:
        return sorted({c.machine for c in self.clips})

    def counts(self) -> dict[tuple[str, str, str], int]:
        return dict(Counter((c.machine, c.domain, c.split) for c in self.clips))

    def select(self, **criteria) -> list[AudioClip]:
        return [c for c in self.clips if all(getattr(c, k) == v for k, v in criteria.items())]

    def by_id(self) -> dict[str, AudioClip]:
        return {c.clip_id: c for c in self.clips}

    def to_csv(self, path: str | os.PathLike, extra: dict[str, str] | None = None):
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(MANIFEST_COLUMNS) + list(extra))
            for c in self.clips:
                row = [getattr(c, k) for k in MANIFEST_COLUMNS]
                row[-1] = row[-1] or ""
                w.writerow(row + list(extra.values()))


def read_wav(path: str | os.PathLike) -> np.ndarray:
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise CorpusIOError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise CorpusIOError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype.kind == "f":
        return data.astype(np.float32)
    raise CorpusIOError(f"{path}: unsupported sample format {data.dtype}")


def load_corpus(root: str | os.PathLike, keep_audio: bool = True) -> CorpusManifest:
    """Ingest every WAV under `root`; the first directory level names the machine.

    Every unreadable or misnamed file is collected and reported together.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyCorpus(f"{root}: not a directory")
    clips, failures = [], []
    for path in sorted(root.rglob("*.wav")):
        rel = path.relative_to(root)
        try:
            clip = parse_filename(Path(rel.parts[0]) / rel.name)
            clip.path = str(path)
            samples = read_wav(path)
            if keep_audio:
                clip.samples = samples
        except MalformedName as e:
            failures.append(f"{path}: {e}")
        except Exception as e:  # scipy raises ValueError/EOFError on corrupt headers
            failures.append(f"{path}: {e}")
        else:
            clips.append(clip)
    if failures:
        raise CorpusIOError("unreadable files:\n  " + "\n  ".join(failures))
    if not clips:
        raise EmptyCorpus(f"{root}: no WAV files found")
    return CorpusManifest(clips)


def write_corpus(manifest: CorpusManifest, root: str | os.PathLike) -> None:
    """Write clips as float32 WAV files in the DCASE layout (lossless round trip)."""
    root = Path(root)
    for clip in manifest:
        if clip.samples is None:
            raise UsageError(f"{clip.clip_id}: no audio to write")
        out = root / format_filename(clip)
        out.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(out, SAMPLE_RATE, np.asarray(clip.samples, dtype=np.float32))
        clip.path = str(out)


# --- synthetic corpus -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    machines: int = 2
    attributes_per_machine: int = 3
    clips_per_attribute: int = 40
    noise_level_db: float = -20.0  # noise power relative to signal power
    anomaly_kind: str = "pitch_shift"
    seed: int = 0
    duration_s: float = 1.0
    target_train_clips: int = 0
    test_normal_per_domain: int = 0
    test_anomaly_per_machine: int = 0
    attribute_spacing: float = 1.35  # fundamental ratio between consecutive attributes
    anomaly_shift: float = 1.12  # pitch factor applied by pitch_shift anomalies
    f0_jitter: float = 0.003
    timbre_jitter: float = 0.05  # relative per-clip spread of harmonic amplitudes
    machine_f0_ratio: float = 1.0  # 1.0: machines share a pitch range and differ by timbre

    def __post_init__(self):
        if self.machines < 1 or self.attributes_per_machine < 1 or self.clips_per_attribute < 0:
            raise UsageError("machines and attributes_per_machine must be >= 1")
        if self.anomaly_kind not in ("pitch_shift", "transient_burst"):
            raise UsageError(f"unknown anomaly_kind {self.anomaly_kind!r}")
        if self.duration_s < 1.0:
            raise UsageError("synthetic clips must be at least 1 s long")
        if self.attribute_spacing <= 1.0:
            raise UsageError("attribute_spacing must exceed 1")


def machine_name(m: int) -> str:
    return f"machine{m:02d}"


def machine_base_f0(m: int, ratio: float = 1.0) -> float:
    return 90.0 * ratio ** (m % 4) * (1.0 + 0.07 * (m // 4))


def attribute_f0(spec: SyntheticSpec, m: int, a: int) -> float:
    """Fundamental of attribute `a`; index `attributes_per_machine` is the target-domain attribute."""
    return machine_base_f0(m, spec.machine_f0_ratio) * spec.attribute_spacing**a


def _machine_timbre(spec: SyntheticSpec, m: int, n_harm: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1000 + m])
    k = np.arange(1, n_harm + 1)
    decay = 0.5 + 0.1 * (m % 3)
    env = k ** (-decay) * rng.uniform(0.3, 1.0, n_harm)
    if m % 2:
        env[1::2] *= 0.2  # odd-harmonic emphasis
    return env


def _harmonic(spec: SyntheticSpec, m: int, f0: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = f0 * (1.0 + spec.f0_jitter * rng.standard_normal())
    n_harm = int(7800 // f0)
    env = _machine_timbre(spec, m, n_harm) * np.abs(1.0 + spec.timbre_jitter * rng.standard_normal(n_harm))
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    k = np.arange(1, n_harm + 1)[:, None]
    x = (env[:, None] * np.sin(2 * np.pi * f0 * k * t + phases[:, None])).sum(axis=0)
    return x / np.sqrt(np.mean(x**2))


def _add_noise(spec: SyntheticSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    power = np.mean(x**2) * 10 ** (spec.noise_level_db / 10)
    return x + np.sqrt(power) * rng.standard_normal(len(x))


def _bursts(x: np.ndarray, rng: np.random.Generator, count: int = 4) -> np.ndarray:
    x = x.copy()
    width = int(0.02 * SAMPLE_RATE)
    env = np.exp(-np.arange(width) / (width / 5))
    rms = np.sqrt(np.mean(x**2))
    for start in rng.integers(0, len(x) - width, count):
        x[start : start + width] += 3 * rms * env * rng.standard_normal(width)
    return x


def generate_synthetic(spec: SyntheticSpec) -> CorpusManifest:
    """Generate a corpus whose clips are a pure function of `spec`.

    Each (machine, attribute) is a harmonic complex with its own fundamental and
    a machine-specific harmonic envelope. Source-domain train clips cover
    `attributes_per_machine` attributes; the target domain uses one extra attribute.
    Test anomalies come from the normal templates of either domain.
    """
    clips = []
    a_count = spec.attributes_per_machine
    for m in range(spec.machines):
        name = machine_name(m)
        rng = np.random.default_rng([spec.seed, m])
        counter: Counter = Counter()

        def emit(domain, split, condition, attr_idx, anomalous=False):
            key = (domain, split, condition)
            idx = counter[key]
            counter[key] += 1
            f0 = attribute_f0(spec, m, attr_idx)
            if anomalous and spec.anomaly_kind == "pitch_shift":
                f0 *= spec.anomaly_shift
            x = _harmonic(spec, m, f0, rng)
            if anomalous and spec.anomaly_kind == "transient_burst":
                x = _bursts(x, rng)
            x = 0.1 * _add_noise(spec, x, rng)
            clips.append(
                AudioClip(
                    clip_id="",
                    machine=name,
                    section="00",
                    domain=domain,
                    split=split,
                    condition=condition,
                    index=idx,
                    attribute=f"attr_{attr_idx}",
                    samples=x.astype(np.float32),
                )
            )

        for a in range(a_count):
            for _ in range(spec.clips_per_attribute):
                emit("source", "train", "normal", a)
        for _ in range(spec.target_train_clips):
            emit("target", "train", "normal", a_count)
        for domain in DOMAINS:
            for i in range(spec.test_normal_per_domain):
                emit(domain, "test", "normal", i % a_count if domain == "source" else a_count)
        for i in range(spec.test_anomaly_per_machine):
            domain = DOMAINS[i % 2]
            attr = (i // 2) % a_count if domain == "source" else a_count
            emit(domain, "test", "anomaly", attr, anomalous=True)
    for c in clips:
        c.clip_id = format_filename(c)[: -len(".wav")]
    return CorpusManifest(clips)
