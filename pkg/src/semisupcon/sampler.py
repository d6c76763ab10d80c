"""Datasets, manifests and semi-supervised batch assembly."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .targets import BatchLayout

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Clip:
    clip_id: str
    duration: float
    labels: Optional[frozenset] = None
    path: Optional[str] = None
    # synthesis hook, sample_rate -> waveform; used instead of ``path``
    synth: Optional[Callable] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class DatasetHandle:
    clips: tuple
    kind: str  # "labeled" | "unlabeled"
    vocabulary: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "vocabulary", frozenset(self.vocabulary))
        if self.kind not in ("labeled", "unlabeled"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        for clip in self.clips:
            if self.kind == "labeled":
                if not clip.labels:
                    raise ConfigError(f"labeled clip {clip.clip_id} has no labels")
                unknown = set(clip.labels) - self.vocabulary
                if unknown:
                    raise ConfigError(f"clip {clip.clip_id}: labels {sorted(unknown)} "
                                      "are not in the declared vocabulary")
            elif clip.labels is not None:
                raise ConfigError(f"unlabeled dataset holds labeled clip {clip.clip_id}")

    def __len__(self):
        return len(self.clips)

    def subset(self, indices) -> "DatasetHandle":
        return DatasetHandle(tuple(self.clips[i] for i in indices), self.kind, self.vocabulary)

    def unlabeled(self) -> "DatasetHandle":
        """The same clips with labels stripped."""
        return DatasetHandle(tuple(dataclasses.replace(c, labels=None) for c in self.clips),
                             "unlabeled")


@dataclass(frozen=True)
class SamplerConfig:
    p_s: float = 1.0
    b_s: float = 0.5
    origins_per_batch: int = 96
    views_per_origin: int = 2
    segment_seconds: float = 2.7
    sample_rate: int = 22050
    seed: int = 0

    def __post_init__(self):
        for name in ("p_s", "b_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.views_per_origin < 2:
            raise ConfigError("views_per_origin must be at least 2")
        if self.origins_per_batch < 1:
            raise ConfigError("origins_per_batch must be positive")
        if self.segment_seconds <= 0 or self.sample_rate <= 0:
            raise ConfigError("segment length and sample rate must be positive")

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    @property
    def n_labeled(self) -> int:
        # round() guards against float noise such as 0.1 * 30 = 3.0000000000000004
        return math.ceil(round(self.b_s * self.origins_per_batch, 9))

    @property
    def total_views(self) -> int:
        return self.origins_per_batch * self.views_per_origin


@dataclass
class ViewBatch:
    layout: BatchLayout
    audio: np.ndarray  # (total_views, segment_samples)
    origin_clip_ids: tuple
    segment_starts: np.ndarray  # per view, in samples


# ----------------------------------------------------------------- audio IO

def read_wav(path, sample_rate: int) -> np.ndarray:
    """Mono float64 audio at ``sample_rate``, whatever the file's format."""
    from scipy.io import wavfile
    from scipy.signal import resample_poly

    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = (data.astype(np.float64) - (info.max + info.min + 1) / 2) / ((info.max - info.min + 1) / 2)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if rate != sample_rate:
        g = math.gcd(int(rate), int(sample_rate))
        data = resample_poly(data, sample_rate // g, rate // g)
    return data


def write_wav(path, audio: np.ndarray, sample_rate: int) -> None:
    from scipy.io import wavfile

    wavfile.write(path, int(sample_rate), np.asarray(audio, dtype=np.float32))


@lru_cache(maxsize=4096)
def _load_cached(clip: Clip, sample_rate: int) -> np.ndarray:
    if clip.synth is not None:
        audio = clip.synth(sample_rate)
    elif clip.path is not None:
        audio = read_wav(clip.path, sample_rate)
    else:
        raise ConfigError(f"clip {clip.clip_id} has no audio source")
    audio = np.ascontiguousarray(audio, dtype=np.float64)
    audio.flags.writeable = False
    return audio


def load_audio(clip: Clip, sample_rate: int) -> np.ndarray:
    return _load_cached(clip, sample_rate)


# ----------------------------------------------------------------- manifests

def read_manifest(path) -> tuple:
    """Parse a line-delimited manifest into (labeled, unlabeled) handles.

    An optional ``{"vocabulary": [...]}`` record declares the label set;
    it is required as soon as any clip carries labels. Relative clip paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    vocabulary = None
    labeled, unlabeled = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        record = json.loads(line)
        if "vocabulary" in record:
            vocabulary = frozenset(record["vocabulary"])
            continue
        try:
            clip_path = Path(record["path"])
            duration = float(record["duration_seconds"])
        except KeyError as exc:
            raise ConfigError(f"{path}:{lineno}: missing field {exc}") from None
        if not clip_path.is_absolute():
            clip_path = path.parent / clip_path
        labels = record.get("labels")
        clip = Clip(record.get("id", str(clip_path)), duration,
                    frozenset(labels) if labels else None, str(clip_path))
        if clip.labels is None:
            unlabeled.append(clip)
            continue
        if vocabulary is None:
            raise ConfigError(f"{path}:{lineno}: labeled clip before any vocabulary record")
        unknown = clip.labels - vocabulary
        if unknown:
            raise ConfigError(f"{path}:{lineno}: unknown labels {sorted(unknown)}")
        labeled.append(clip)
    return (DatasetHandle(labeled, "labeled", vocabulary or frozenset()),
            DatasetHandle(unlabeled, "unlabeled"))


def write_manifest(path, clips: Sequence[Clip], vocabulary=None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        if vocabulary:
            fh.write(json.dumps({"vocabulary": sorted(vocabulary)}) + "\n")
        for clip in clips:
            rel = Path(clip.path)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            record = {"id": clip.clip_id, "path": str(rel),
                      "duration_seconds": clip.duration}
            if clip.labels:
                record["labels"] = sorted(clip.labels)
            fh.write(json.dumps(record) + "\n")


# ----------------------------------------------------------------- sampling

def select_labeled_subset(labeled: DatasetHandle, p_s: float, seed: int) -> DatasetHandle:
    if not 0.0 <= p_s <= 1.0:
        raise ConfigError(f"p_s must lie in [0, 1], got {p_s}")
    n = int(math.floor(p_s * len(labeled) + 0.5))
    if p_s > 0 and n == 0:
        raise ConfigError(f"p_s={p_s} selects no clip out of {len(labeled)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(labeled), size=n, replace=False))
    return labeled.subset(chosen.tolist())


def _draw_origins(pool: DatasetHandle, count: int, min_seconds: float, rng) -> list:
    if count == 0:
        return []
    if len(pool) == 0:
        raise ConfigError(f"cannot draw {count} origins from an empty {pool.kind} pool")
    chosen = []
    for idx in rng.permutation(len(pool)):
        clip = pool.clips[idx]
        if clip.duration + 1e-9 < min_seconds:
            logger.warning("skipping clip %s: %.3fs is shorter than %.3fs",
                           clip.clip_id, clip.duration, min_seconds)
            continue
        chosen.append(clip)
        if len(chosen) == count:
            return chosen
    raise ConfigError(f"{pool.kind} pool has only {len(chosen)} usable clips, need {count}")


def sample_batch(labeled_subset: DatasetHandle, unlabeled: DatasetHandle,
                 config: SamplerConfig, rng: np.random.Generator) -> ViewBatch:
    """Labeled origins come first, then unlabeled ones; each origin
    contributes ``views_per_origin`` consecutive non-overlapping segments
    starting at a uniform random offset."""
    seg = config.segment_samples
    m = config.views_per_origin
    n_lab = config.n_labeled
    need = m * config.segment_seconds
    origins = (_draw_origins(labeled_subset, n_lab, need, rng)
               + _draw_origins(unlabeled, config.origins_per_batch - n_lab, need, rng))

    audio = np.empty((len(origins) * m, seg))
    starts = np.empty(len(origins) * m, dtype=np.int64)
    for k, clip in enumerate(origins):
        wave = load_audio(clip, config.sample_rate)
        span = m * seg
        if wave.size < span:
            raise ConfigError(f"clip {clip.clip_id} decodes to {wave.size} samples, "
                              f"shorter than {span}")
        offset = int(rng.integers(0, wave.size - span + 1))
        for v in range(m):
            start = offset + v * seg
            audio[k * m + v] = wave[start:start + seg]
            starts[k * m + v] = start

    labels = [c.labels if k < n_lab else None for k, c in enumerate(origins)]
    layout = BatchLayout.from_origins(len(origins), m, labels)
    return ViewBatch(layout, audio, tuple(c.clip_id for c in origins), starts)


def center_segments(clips: Sequence[Clip], segment_samples: int, sample_rate: int) -> np.ndarray:
    """One segment per clip taken from its middle, for evaluation."""
    out = np.empty((len(clips), segment_samples))
    for k, clip in enumerate(clips):
        wave = load_audio(clip, sample_rate)
        if wave.size < segment_samples:
            raise ConfigError(f"clip {clip.clip_id} is shorter than one evaluation segment")
        start = (wave.size - segment_samples) // 2
        out[k] = wave[start:start + segment_samples]
    return out
