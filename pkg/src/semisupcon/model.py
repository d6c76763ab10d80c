"""Small audio encoder plus projection head."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .nn import Affine, Conv1d, LayerNorm, MeanPool, ReLU, Sequential


@dataclass(frozen=True)
class EncoderConfig:
    """``frames``: shared MLP over framed log-magnitude spectra, mean-pooled.
    ``conv``: strided 1-D convolutions on the raw waveform, mean-pooled."""

    architecture: str = "frames"
    d_embed: int = 64
    d_proj: int = 32
    hidden: int = 128
    frame_length: int = 256
    hop: int = 128
    conv_channels: tuple = (16, 32, 64)
    conv_kernel: int = 4
    conv_stride: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.architecture not in ("frames", "conv"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.d_proj > self.d_embed:
            raise ConfigError("projector width must not exceed the embedding width")
        if min(self.d_embed, self.d_proj, self.hidden) < 1:
            raise ConfigError("layer widths must be positive")
        if self.hop < 1 or self.frame_length < 2:
            raise ConfigError("invalid framing")


def spectral_frames(audio: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """(views, samples) -> (views, frames, bins) log-magnitude spectra."""
    audio = np.atleast_2d(audio)
    if audio.shape[1] < frame_length:
        raise ConfigError(f"segments of {audio.shape[1]} samples are shorter than one frame")
    frames = np.lib.stride_tricks.sliding_window_view(audio, frame_length, axis=1)[:, ::hop]
    window = np.hanning(frame_length)
    mag = np.abs(np.fft.rfft(frames * window, axis=-1))
    return np.log(mag + 1e-3)


class Model:
    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        c = config
        if c.architecture == "frames":
            n_bins = c.frame_length // 2 + 1
            self.encoder = Sequential([
                LayerNorm("encoder.norm", n_bins),
                Affine("encoder.fc1", n_bins, c.hidden), ReLU(),
                Affine("encoder.fc2", c.hidden, c.d_embed), ReLU(),
                MeanPool(),
            ])
        else:
            layers, c_in = [], 1
            for k, c_out in enumerate(c.conv_channels):
                layers += [Conv1d(f"encoder.conv{k}", c_in, c_out, c.conv_kernel, c.conv_stride), ReLU()]
                c_in = c_out
            layers += [MeanPool(), Affine("encoder.fc", c_in, c.d_embed)]
            self.encoder = Sequential(layers)
        self.projector = Sequential([
            Affine("projector.fc1", c.d_embed, c.d_embed), ReLU(),
            Affine("projector.fc2", c.d_embed, c.d_proj),
        ])
        rng = np.random.default_rng(seed)
        self.params = {**self.encoder.init(rng), **self.projector.init(rng)}

    def frontend(self, audio: np.ndarray) -> np.ndarray:
        audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
        if not np.all(np.isfinite(audio)):
            raise NonFiniteError("non-finite samples in input audio")
        if self.config.architecture == "frames":
            return spectral_frames(audio, self.config.frame_length, self.config.hop)
        return audio[:, :, None]

    def embed(self, audio: np.ndarray) -> np.ndarray:
        """Encoder outputs (views, d_embed); the projector is not used."""
        return self.encoder.forward(self.params, self.frontend(audio))

    def forward(self, audio: np.ndarray) -> np.ndarray:
        """Projected embeddings (views, d_proj), caching activations for backward."""
        try:
            h = self.encoder.forward(self.params, self.frontend(audio))
            return self.projector.forward(self.params, h)
        except NonFiniteError as exc:
            raise NonFiniteError(f"forward pass: {exc}") from None

    def backward(self, dz: np.ndarray) -> dict:
        grads = {}
        dh = self.projector.backward(self.params, grads, dz)
        self.encoder.backward(self.params, grads, dh)
        return grads

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def digest(self, encoder_only: bool = False) -> str:
        params = self.encoder_params() if encoder_only else self.params
        h = hashlib.sha256()
        for name in sorted(params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name]).tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        d = dataclasses.asdict(self.config)
        d["conv_channels"] = list(d["conv_channels"])
        return d
