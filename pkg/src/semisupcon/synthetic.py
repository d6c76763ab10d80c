"""Synthetic harmonic-tone corpus with pitch-class and timbre labels.

Each clip is a sum of harmonics of one fundamental (a pitch class, possibly
moved by an octave factor and detuned by a few cents) weighted by one
timbre's harmonic profile, with random harmonic phases and slow amplitude
modulation, plus white noise. Optionally a quieter accompanying tone with
its own random pitch and timbre is mixed in; it carries no label.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import ConfigError
from .sampler import Clip, DatasetHandle


def semitone_ladder(base_hz: float = 220.0, n: int = 12) -> tuple:
    return tuple(base_hz * 2.0 ** (k / 12.0) for k in range(n))


DEFAULT_TIMBRES = (
    (1.0, 0.5, 0.33, 0.25, 0.2, 0.17),   # sawtooth-like
    (1.0, 0.0, 0.33, 0.0, 0.2, 0.0),     # odd harmonics
    (1.0, 0.9, 0.1, 0.6, 0.05, 0.3),
    (0.3, 1.0, 0.6, 0.2, 0.4, 0.1),      # weak fundamental
)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_clips: int = 200
    clip_seconds: float = 2.0
    sample_rate: int = 8000
    fundamentals: tuple = semitone_ladder()
    timbres: tuple = DEFAULT_TIMBRES
    octaves: tuple = (1.0,)
    label_rule: str = "pitch"  # "pitch" | "timbre" | "both"
    noise_floor: float = 0.01
    amplitude: tuple = (0.1, 0.4)
    modulation_depth: tuple = (0.0, 0.5)
    detune_cents: float = 0.0
    accompaniment_level: tuple = (0.0, 0.0)  # relative to the labeled tone
    labeled_fraction: float = 0.5
    seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        for f in ("fundamentals", "timbres", "octaves", "amplitude", "modulation_depth",
                  "accompaniment_level"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        object.__setattr__(self, "timbres", tuple(tuple(t) for t in self.timbres))
        if not self.fundamentals or not self.timbres:
            raise ConfigError("pitch and timbre vocabularies must be non-empty")
        top = max(self.fundamentals) * max(self.octaves)
        if top > self.sample_rate / 4:
            raise ConfigError(f"fundamental {top:.1f} Hz exceeds a quarter of the "
                              f"sample rate ({self.sample_rate / 4:.1f} Hz)")
        if self.label_rule not in ("pitch", "timbre", "both"):
            raise ConfigError(f"unknown label rule {self.label_rule!r}")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["timbres"] = [list(t) for t in self.timbres]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def vocabulary(self) -> frozenset:
        pitch = {f"pitch:{k}" for k in range(len(self.fundamentals))}
        timbre = {f"timbre:{k}" for k in range(len(self.timbres))}
        return frozenset({"pitch": pitch, "timbre": timbre, "both": pitch | timbre}[self.label_rule])


def harmonic_tone(t: np.ndarray, f0: float, profile, phases, sample_rate: int) -> np.ndarray:
    """Harmonic sum normalised so the profile's amplitudes add up to 1."""
    wave = np.zeros(t.size)
    for h, (a, phase) in enumerate(zip(profile, phases), start=1):
        if a == 0 or h * f0 >= sample_rate / 2:
            continue
        wave += a * np.sin(2 * np.pi * h * f0 * t + phase)
    return wave / np.sum(np.abs(profile))


def synthesize(sample_rate: int, *, f0: float, profile: tuple, phases: tuple,
               amplitude: float, mod_rate: float, mod_depth: float,
               seconds: float, noise_floor: float, noise_seed: int,
               accompaniment: tuple = ()) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    wave = harmonic_tone(t, f0, profile, phases, sample_rate)
    # accompaniment: (f0, profile, phases, level)
    for a_f0, a_profile, a_phases, level in accompaniment:
        wave += level * harmonic_tone(t, a_f0, a_profile, a_phases, sample_rate)
    wave *= amplitude
    wave *= 1.0 + mod_depth * np.sin(2 * np.pi * mod_rate * t)
    if noise_floor > 0:
        wave += noise_floor * np.random.default_rng(noise_seed).standard_normal(n)
    return wave


def _balanced(n: int, k: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def clip_labels(spec: SyntheticDatasetSpec, pitch: int, timbre: int) -> frozenset:
    labels = set()
    if spec.label_rule in ("pitch", "both"):
        labels.add(f"pitch:{pitch}")
    if spec.label_rule in ("timbre", "both"):
        labels.add(f"timbre:{timbre}")
    return frozenset(labels)


def generate_clips(spec: SyntheticDatasetSpec) -> list:
    """All clips with labels attached, in generation order."""
    rng = np.random.default_rng(spec.seed)
    pitches = _balanced(spec.n_clips, len(spec.fundamentals), rng)
    timbres = _balanced(spec.n_clips, len(spec.timbres), rng)
    # clip ids key the audio cache, so they must change with any generation parameter
    tag = spec.digest()[:10]
    clips = []
    for idx in range(spec.n_clips):
        p, tb = int(pitches[idx]), int(timbres[idx])
        octave = float(spec.octaves[int(rng.integers(len(spec.octaves)))])
        profile = spec.timbres[tb]
        detune = 2.0 ** (rng.uniform(-spec.detune_cents, spec.detune_cents) / 1200.0)
        accompaniment = ()
        if spec.accompaniment_level[1] > 0:
            a_profile = spec.timbres[int(rng.integers(len(spec.timbres)))]
            a_f0 = (spec.fundamentals[int(rng.integers(len(spec.fundamentals)))]
                    * spec.octaves[int(rng.integers(len(spec.octaves)))])
            accompaniment = ((a_f0, a_profile,
                              tuple(rng.uniform(0, 2 * np.pi, len(a_profile)).tolist()),
                              float(rng.uniform(*spec.accompaniment_level))),)
        synth = partial(
            synthesize,
            f0=spec.fundamentals[p] * octave * detune,
            accompaniment=accompaniment,
            profile=profile,
            phases=tuple(rng.uniform(0, 2 * np.pi, len(profile)).tolist()),
            amplitude=float(rng.uniform(*spec.amplitude)),
            mod_rate=float(rng.uniform(0.5, 4.0)),
            mod_depth=float(rng.uniform(*spec.modulation_depth)),
            seconds=spec.clip_seconds,
            noise_floor=spec.noise_floor,
            noise_seed=int(rng.integers(2**31)),
        )
        clips.append(Clip(f"{spec.name}-{tag}-{idx:05d}", spec.clip_seconds,
                          clip_labels(spec, p, tb), None, synth))
    return clips


def generate_synthetic_dataset(spec: SyntheticDatasetSpec):
    """Split generated clips into (labeled, unlabeled) handles.

    The first ``labeled_fraction`` of clips keep their labels; the rest are
    handed out unlabeled.
    """
    clips = generate_clips(spec)
    n_lab = int(math.floor(spec.labeled_fraction * len(clips) + 0.5))
    labeled = DatasetHandle(clips[:n_lab], "labeled", spec.vocabulary)
    unlabeled = DatasetHandle([dataclasses.replace(c, labels=None) for c in clips[n_lab:]],
                              "unlabeled")
    return labeled, unlabeled


def pitch_class_of(clip: Clip) -> int:
    for label in clip.labels or ():
        if label.startswith("pitch:"):
            return int(label.split(":")[1])
    raise ValueError(f"clip {clip.clip_id} has no pitch label")
