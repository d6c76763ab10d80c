"""Contrastive pretraining loop, checkpoints and run configuration.

All randomness derives from ``TrainConfig.seed``:

    [seed, 0]                 parameter initialisation
    [seed, 1]                 labeled-subset selection (p_s)
    [seed, 2, step]           batch sampling at ``step``
    [seed, 3, step, view]     augmentation of one view at ``step``

Because every stream is keyed by the step counter, resuming from a
checkpoint continues the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .augment import ChainConfig, apply_chain
from .errors import ConfigError, NonFiniteError
from .losses import semi_supervised_loss
from .model import EncoderConfig, Model
from .nn import Adam
from .sampler import DatasetHandle, SamplerConfig, ViewBatch, sample_batch, select_labeled_subset
from .targets import build_targets, sparsity

logger = logging.getLogger(__name__)

STREAM_INIT, STREAM_SUBSET, STREAM_SAMPLER, STREAM_AUGMENT = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 1e-4
    tau: float = 0.1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    target_mode: str = "binary"
    criterion: int = 1
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.target_mode not in ("binary", "weighted"):
            raise ConfigError(f"target_mode must be binary or weighted, got {self.target_mode!r}")
        if self.criterion < 1:
            raise ConfigError("criterion must be >= 1")
        if self.sampler.seed != self.seed:
            object.__setattr__(self, "sampler", dataclasses.replace(self.sampler, seed=self.seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["chain"] = self.chain.to_dict()
        d["encoder"]["conv_channels"] = list(self.encoder.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        if "sampler" in d:
            d["sampler"] = _build(SamplerConfig, d["sampler"], "sampler")
        if "chain" in d:
            d["chain"] = ChainConfig.from_dict(d["chain"])
        if "encoder" in d:
            d["encoder"] = _build(EncoderConfig, d["encoder"], "encoder")
        return cls(**d)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def _build(cls, d: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
    return cls(**d)


def config_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


# ----------------------------------------------------------------- checkpoints

MAGIC = b"SSCKPT\x00\x00"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    seed: int

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self) -> Model:
        model = Model(self.train_config().encoder)
        model.params = {k: v.copy() for k, v in self.params.items()}
        return model

    def optimizer(self) -> Adam:
        cfg = self.train_config()
        opt = Adam(lr=cfg.learning_rate)
        opt.m = {k: v.copy() for k, v in self.adam_m.items()}
        opt.v = {k: v.copy() for k, v in self.adam_v.items()}
        opt.t = self.adam_t
        return opt

    def _blocks(self):
        for prefix, table in (("param", self.params), ("adam.m", self.adam_m), ("adam.v", self.adam_v)):
            for name in sorted(table):
                yield f"{prefix}/{name}", np.ascontiguousarray(table[name])

    def save(self, path) -> None:
        """Magic, version, config digest, JSON header, then raw parameter blocks."""
        blocks, index, offset = [], [], 0
        for name, arr in self._blocks():
            raw = arr.astype("<f8").tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blocks.append(raw)
            offset += len(raw)
        header = json.dumps({"config": self.config, "step": self.step, "adam_t": self.adam_t,
                             "seed": self.seed, "blocks": index}, sort_keys=True).encode()
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(bytes.fromhex(self.config_digest))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blocks:
                fh.write(raw)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", data[8:12])
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        digest = data[12:44].hex()
        (hlen,) = struct.unpack("<Q", data[44:52])
        header = json.loads(data[52:52 + hlen])
        if config_digest(header["config"]) != digest:
            raise ConfigError(f"{path}: config digest does not match the stored config")
        base = 52 + hlen
        tables = {"param": {}, "adam.m": {}, "adam.v": {}}
        for block in header["blocks"]:
            start = base + block["offset"]
            arr = np.frombuffer(data[start:start + block["nbytes"]], dtype="<f8")
            prefix, name = block["name"].split("/", 1)
            tables[prefix][name] = arr.reshape(block["shape"]).astype(np.float64)
        return cls(header["config"], header["step"], tables["param"], tables["adam.m"],
                   tables["adam.v"], header["adam_t"], header["seed"])

    def digest(self) -> str:
        h = hashlib.sha256(self.config_digest.encode())
        h.update(str(self.step).encode())
        for name, arr in self._blocks():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def checkpoint_of(model: Model, opt: Adam, config: TrainConfig, step: int) -> Checkpoint:
    return Checkpoint(config.to_dict(), step, {k: v.copy() for k, v in model.params.items()},
                      {k: v.copy() for k, v in opt.m.items()},
                      {k: v.copy() for k, v in opt.v.items()}, opt.t, config.seed)


# ----------------------------------------------------------------- training

@dataclass
class StepResult:
    loss: float
    s_sl: Optional[float]
    s_smssl: float


def augment_batch(batch: ViewBatch, chain: ChainConfig, seed: int, step: int,
                  sample_rate: int) -> ViewBatch:
    audio = np.stack([apply_chain(view, chain, stream(seed, STREAM_AUGMENT, step, v), sample_rate)
                      for v, view in enumerate(batch.audio)])
    return dataclasses.replace(batch, audio=audio)


def train_step(model: Model, opt: Adam, batch: ViewBatch, config: TrainConfig,
               target=None) -> StepResult:
    """One forward pass, loss/gradient, backward pass and Adam update."""
    if target is None:
        target = build_targets(batch.layout, config.target_mode, config.criterion)
    z = model.forward(batch.audio)
    result = semi_supervised_loss(z, target, config.tau)
    grads = model.backward(result.gradient)
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad} for batch clips "
                             f"{list(batch.origin_clip_ids)}")
    opt.step(model.params, grads)
    report = sparsity(target, batch.layout)
    return StepResult(result.loss, report.s_sl, report.s_smssl)


def pretrain(config: TrainConfig, labeled: DatasetHandle, unlabeled: DatasetHandle,
             out_dir=None, resume: Optional[Checkpoint] = None,
             on_step: Optional[Callable] = None) -> Checkpoint:
    """Train for ``config.steps`` steps (counted from 0, including resumed ones).

    With ``out_dir``, per-step records ``{step, loss, s_sl, s_smssl}`` go to
    ``train_log.jsonl`` and checkpoints to ``ckpt_<step>.bin`` / ``final.bin``.
    ``on_step(step, batch, target, result)`` is called after each step.
    """
    sc = config.sampler
    if sc.n_labeled > 0 and sc.p_s == 0:
        raise ConfigError("b_s > 0 requires labeled data, but p_s = 0")
    subset = select_labeled_subset(labeled, sc.p_s, int(stream(config.seed, STREAM_SUBSET).integers(2**63)))
    if sc.n_labeled > len(subset):
        raise ConfigError(f"batch needs {sc.n_labeled} labeled origins but the subset "
                          f"holds {len(subset)} clips")
    if sc.origins_per_batch - sc.n_labeled > len(unlabeled):
        raise ConfigError("not enough unlabeled clips for one batch")

    if resume is not None:
        if resume.config_digest != config.digest():
            logger.warning("resuming from a checkpoint trained with a different config")
        model, opt, start = resume.model(), resume.optimizer(), resume.step
    else:
        model = Model(config.encoder, seed=int(stream(config.seed, STREAM_INIT).integers(2**63)))
        opt, start = Adam(lr=config.learning_rate), 0
    opt.lr = config.learning_rate

    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")
    try:
        for step in range(start, config.steps):
            batch = sample_batch(subset, unlabeled, sc, stream(config.seed, STREAM_SAMPLER, step))
            if config.augment:
                batch = augment_batch(batch, config.chain, config.seed, step, sc.sample_rate)
            target = build_targets(batch.layout, config.target_mode, config.criterion)
            result = train_step(model, opt, batch, config, target)
            if log is not None:
                log.write(json.dumps({"step": step, "loss": result.loss, "s_sl": result.s_sl,
                                      "s_smssl": result.s_smssl}) + "\n")
            if on_step is not None:
                on_step(step, batch, target, result)
            done = step + 1
            if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                checkpoint_of(model, opt, config, done).save(out_dir / f"ckpt_{done:07d}.bin")
    finally:
        if log is not None:
            log.close()
    ckpt = checkpoint_of(model, opt, config, max(start, config.steps))
    if out_dir is not None:
        ckpt.save(out_dir / "final.bin")
    return ckpt
