"""Stochastic audio augmentation chain and its severity scaling.

Stages run in a fixed order: gain, polarity inversion, colored noise, one
frequency filter, pitch shift, delay. Each stage fires independently with
its own probability and draws its parameters uniformly within its range.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError

logger = logging.getLogger(__name__)

PEAK_LIMIT = 1.0
SEVERITIES = (0, 1, 2, 3, 4)
FILTERS = ("lowpass", "highpass", "bandpass", "bandcut")


@dataclass(frozen=True)
class ChainConfig:
    gain_p: float = 0.4
    gain_db: tuple = (-15.0, 5.0)
    polarity_p: float = 0.6
    noise_p: float = 0.6
    noise_snr_db: tuple = (3.0, 30.0)
    noise_decay_db: tuple = (-2.0, 2.0)
    lowpass_p: float = 0.3
    lowpass_khz: tuple = (0.15, 7.0)
    highpass_p: float = 0.3
    highpass_khz: tuple = (0.2, 2.4)
    bandpass_p: float = 0.3
    bandpass_center_khz: tuple = (0.2, 4.0)
    bandpass_fraction: tuple = (0.5, 2.0)
    bandcut_p: float = 0.3
    bandcut_center_khz: tuple = (0.2, 4.0)
    bandcut_fraction: tuple = (0.5, 2.0)
    pitch_p: float = 0.6
    pitch_semitones: tuple = (-4.0, 4.0)
    delay_p: float = 0.6
    delay_ms: tuple = (100.0, 500.0)
    delay_reflections: tuple = (1.0, 3.0)
    delay_attenuation_db: tuple = (-6.0, -3.0)
    delay_wet: tuple = (0.25, 1.0)
    severity: int = 2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_p"):
                if not 0.0 <= value <= 1.0:
                    raise ConfigError(f"{f.name}={value} is not a probability")
            elif f.name == "severity":
                if value not in SEVERITIES:
                    raise ConfigError(f"severity must be one of {SEVERITIES}, got {value}")
            else:
                lo, hi = value
                object.__setattr__(self, f.name, (float(lo), float(hi)))
                if lo > hi:
                    raise ConfigError(f"{f.name}: min {lo} exceeds max {hi}")

    def probabilities(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name.endswith("_p")}

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown chain fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ChainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_chain() -> ChainConfig:
    return ChainConfig()


def identity_chain() -> ChainConfig:
    return scale_severity(default_chain(), 0)


# How each range endpoint moves as severity grows: "mul" multiplies it by s/2,
# "div" divides it by s/2, None leaves it fixed. Chosen so that every stage
# gets harsher with s (deeper gain swings, lower SNR, steeper noise color,
# lower low-pass / higher high-pass cutoffs, narrower band-pass, wider
# band-cut, wider transposition, later and louder echoes, wetter mix).
SEVERITY_DIRECTIONS = {
    "gain_db": ("mul", "mul"),
    "noise_snr_db": ("div", "div"),
    "noise_decay_db": ("mul", "mul"),
    "lowpass_khz": ("div", "div"),
    "highpass_khz": ("mul", "mul"),
    "bandpass_center_khz": (None, "mul"),
    "bandpass_fraction": ("div", None),
    "bandcut_center_khz": (None, "mul"),
    "bandcut_fraction": ("mul", None),
    "pitch_semitones": ("mul", "mul"),
    "delay_ms": ("mul", None),
    "delay_reflections": ("mul", "mul"),
    "delay_attenuation_db": ("div", "div"),
    "delay_wet": ("mul", None),
}

# physically valid ranges applied after scaling
_CLAMPS = {
    "delay_wet": (0.0, 1.0),
    "delay_reflections": (1.0, None),
    "noise_snr_db": (-20.0, None),
    "delay_attenuation_db": (None, 0.0),
}


def _move(value: float, how: Optional[str], factor: float) -> float:
    if how == "mul":
        return value * factor
    if how == "div":
        return value / factor
    return value


def scale_severity(config: ChainConfig, severity: int) -> ChainConfig:
    """Rescale a training chain (severity 2) to another severity level.

    Probabilities become clamp(p * s/2, 0, 1). At s = 0 every probability is
    zero, so ranges are left as they are.
    """
    if severity not in SEVERITIES:
        raise ConfigError(f"severity must be one of {SEVERITIES}, got {severity}")
    if config.severity != 2:
        raise ConfigError("severity scaling starts from a severity-2 chain")
    factor = severity / 2.0
    changes = {name: min(max(p * factor, 0.0), 1.0)
               for name, p in config.probabilities().items()}
    if severity > 0:
        for name, (how_lo, how_hi) in SEVERITY_DIRECTIONS.items():
            lo, hi = getattr(config, name)
            lo, hi = _move(lo, how_lo, factor), _move(hi, how_hi, factor)
            lo, hi = min(lo, hi), max(lo, hi)
            floor, ceil = _CLAMPS.get(name, (None, None))
            if floor is not None:
                lo, hi = max(lo, floor), max(hi, floor)
            if ceil is not None:
                lo, hi = min(lo, ceil), min(hi, ceil)
            changes[name] = (lo, hi)
    return dataclasses.replace(config, severity=severity, **changes)


# ---------------------------------------------------------------- DSP blocks

def rbj_biquad(kind: str, f0: float, q: float, sample_rate: float):
    """Second-order section coefficients (b, a), a[0] normalised to 1."""
    w0 = 2.0 * math.pi * f0 / sample_rate
    cw, sw = math.cos(w0), math.sin(w0)
    alpha = sw / (2.0 * q)
    if kind == "lowpass":
        b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
    elif kind == "highpass":
        b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
    elif kind == "bandpass":
        b = [alpha, 0.0, -alpha]
    elif kind == "bandcut":
        b = [1.0, -2 * cw, 1.0]
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    a = [1 + alpha, -2 * cw, 1 - alpha]
    return np.array(b) / a[0], np.array(a) / a[0]


def colored_noise(n: int, decay_db_per_octave: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise whose power spectrum falls by ``decay`` dB per octave
    (negative values tilt power towards low frequencies)."""
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.arange(n // 2 + 1, dtype=np.float64)
    freqs[0] = 1.0
    exponent = decay_db_per_octave / (20.0 * math.log10(2.0))
    spec *= freqs ** exponent
    spec[0] = 0.0
    noise = np.fft.irfft(spec, n)
    return noise / (np.std(noise) + 1e-300)


def add_noise(x: np.ndarray, snr_db: float, decay: float, rng) -> np.ndarray:
    noise = colored_noise(x.size, decay, rng)
    p_sig = np.mean(x * x)
    p_noise = np.mean(noise * noise)
    if p_sig == 0.0:
        return x.copy()
    scale = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return x + scale * noise


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Resample by 2**(k/12) then trim or zero-pad back to the input length."""
    ratio = 2.0 ** (semitones / 12.0)
    n = x.size
    positions = np.arange(0.0, n - 1, ratio)
    y = np.interp(positions, np.arange(n), x)
    if y.size >= n:
        return y[:n]
    return np.concatenate([y, np.zeros(n - y.size)])


def delay(x: np.ndarray, delay_samples: int, reflections: int,
          attenuation_db: float, wet: float) -> np.ndarray:
    echoes = np.zeros_like(x)
    for k in range(1, reflections + 1):
        shift = k * delay_samples
        if shift >= x.size:
            break
        echoes[shift:] += 10.0 ** (k * attenuation_db / 20.0) * x[:x.size - shift]
    return (1.0 - wet) * x + wet * echoes


# ---------------------------------------------------------------- the chain

def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_plan(config: ChainConfig, rng: np.random.Generator) -> list:
    """Draw which stages fire and their parameters, in chain order."""
    plan = []
    if rng.random() < config.gain_p:
        plan.append(("gain", {"db": _uniform(rng, config.gain_db)}))
    if rng.random() < config.polarity_p:
        plan.append(("polarity", {}))
    if rng.random() < config.noise_p:
        plan.append(("noise", {"snr_db": _uniform(rng, config.noise_snr_db),
                               "decay_db": _uniform(rng, config.noise_decay_db)}))

    fired = [name for name in FILTERS if rng.random() < getattr(config, f"{name}_p")]
    if fired:
        name = fired[int(rng.integers(len(fired)))]
        if name == "lowpass":
            params = {"cutoff_khz": _uniform(rng, config.lowpass_khz)}
        elif name == "highpass":
            params = {"cutoff_khz": _uniform(rng, config.highpass_khz)}
        else:
            params = {"center_khz": _uniform(rng, getattr(config, f"{name}_center_khz")),
                      "fraction": _uniform(rng, getattr(config, f"{name}_fraction"))}
        plan.append((name, params))

    if rng.random() < config.pitch_p:
        plan.append(("pitch", {"semitones": _uniform(rng, config.pitch_semitones)}))
    if rng.random() < config.delay_p:
        lo, hi = config.delay_reflections
        plan.append(("delay", {
            "ms": _uniform(rng, config.delay_ms),
            "reflections": int(rng.integers(math.ceil(lo), math.floor(hi) + 1))
            if math.floor(hi) >= math.ceil(lo) else int(round(lo)),
            "attenuation_db": _uniform(rng, config.delay_attenuation_db),
            "wet": _uniform(rng, config.delay_wet),
        }))
    return plan


def render_plan(segment: np.ndarray, plan: list, sample_rate: float, rng) -> np.ndarray:
    x = np.array(segment, dtype=np.float64)
    nyq_cap = 0.45 * sample_rate
    for name, p in plan:
        if name == "gain":
            x = x * 10.0 ** (p["db"] / 20.0)
        elif name == "polarity":
            x = -x
        elif name == "noise":
            x = add_noise(x, p["snr_db"], p["decay_db"], rng)
        elif name in ("lowpass", "highpass"):
            f0 = min(p["cutoff_khz"] * 1000.0, nyq_cap)
            b, a = rbj_biquad(name, f0, 1 / math.sqrt(2), sample_rate)
            x = lfilter(b, a, x)
        elif name in ("bandpass", "bandcut"):
            f0 = min(p["center_khz"] * 1000.0, nyq_cap)
            b, a = rbj_biquad(name, f0, 1.0 / p["fraction"], sample_rate)
            x = lfilter(b, a, x)
        elif name == "pitch":
            x = pitch_shift(x, p["semitones"])
        elif name == "delay":
            x = delay(x, int(round(p["ms"] * sample_rate / 1000.0)), p["reflections"],
                      p["attenuation_db"], p["wet"])
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > PEAK_LIMIT:
        logger.warning("augmented segment peaks at %.2f, clipping to %.1f", peak, PEAK_LIMIT)
        np.clip(x, -PEAK_LIMIT, PEAK_LIMIT, out=x)
    return x


def apply_chain(segment: np.ndarray, config: ChainConfig, rng: np.random.Generator,
                sample_rate: float = 22050) -> np.ndarray:
    segment = np.asarray(segment)
    if not np.all(np.isfinite(segment)):
        raise ValueError("segment contains non-finite samples")
    plan = sample_plan(config, rng)
    if not plan:
        return segment.copy()
    return render_plan(segment, plan, sample_rate, rng)
