"""Frozen-encoder probing, ranking metrics and the corruption sweep."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .augment import SEVERITIES, ChainConfig, apply_chain, scale_severity
from .errors import ConfigError
from .nn import Adam, Affine, Dropout, ReLU, Sequential

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------- metrics

def _as_2d(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    return scores, labels.astype(bool)


def _valid(labels: np.ndarray) -> np.ndarray:
    pos = labels.sum(axis=0)
    return (pos > 0) & (pos < labels.shape[0])


def auroc_per_class(scores, labels) -> np.ndarray:
    """Mann-Whitney AUROC per class, ties counted one half; NaN for classes
    lacking positives or negatives."""
    scores, labels = _as_2d(scores, labels)
    out = np.full(scores.shape[1], np.nan)
    for c in np.flatnonzero(_valid(labels)):
        y = labels[:, c]
        ranks = rankdata(scores[:, c])
        n_pos, n_neg = y.sum(), (~y).sum()
        out[c] = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return out


def average_precision_per_class(scores, labels) -> np.ndarray:
    """Sum over score thresholds of precision times recall increment.

    Tied scores form one threshold, so the value does not depend on how
    ties happen to be ordered.
    """
    scores, labels = _as_2d(scores, labels)
    out = np.full(scores.shape[1], np.nan)
    for c in np.flatnonzero(_valid(labels)):
        order = np.argsort(-scores[:, c], kind="stable")
        s, y = scores[order, c], labels[order, c]
        tp = np.cumsum(y)
        last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
        precision = tp[last] / (last + 1)
        recall_step = np.diff(np.r_[0, tp[last]]) / y.sum()
        out[c] = np.sum(precision * recall_step)
    return out


def excluded_classes(labels) -> list:
    _, labels = _as_2d(np.zeros(np.shape(labels)), labels)
    return np.flatnonzero(~_valid(labels)).tolist()


def auroc(scores, labels) -> float:
    per = auroc_per_class(scores, labels)
    if np.all(np.isnan(per)):
        raise ValueError("no class has both positives and negatives")
    return float(np.nanmean(per))


def average_precision(scores, labels) -> float:
    per = average_precision_per_class(scores, labels)
    if np.all(np.isnan(per)):
        raise ValueError("no class has both positives and negatives")
    return float(np.nanmean(per))


def top1_accuracy(scores, targets) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(targets)))


@dataclass
class MetricReport:
    auroc: float
    average_precision: float
    top1_accuracy: Optional[float]
    per_class_auroc: list = field(default_factory=list)
    per_class_ap: list = field(default_factory=list)
    excluded_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def to_json(self) -> str:
        # NaN (excluded classes) is written as null to stay valid JSON
        d = self.to_dict()
        for key in ("per_class_auroc", "per_class_ap"):
            d[key] = [None if v is None or v != v else v for v in d[key]]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        for key in ("per_class_auroc", "per_class_ap"):
            d[key] = [float("nan") if v is None else v for v in d[key]]
        return cls.from_dict(d)

    def table(self) -> str:
        acc = "-" if self.top1_accuracy is None else f"{self.top1_accuracy:.4f}"
        return (f"{'AUROC':>8} {'AP':>8} {'top-1':>8}\n"
                f"{self.auroc:8.4f} {self.average_precision:8.4f} {acc:>8}")


def metric_report(scores: np.ndarray, labels: np.ndarray, multilabel: bool = False) -> MetricReport:
    """``labels`` are class indices (single-label) or a multi-hot matrix."""
    if multilabel:
        hot = np.asarray(labels, dtype=bool)
        acc = None
    else:
        targets = np.asarray(labels, dtype=np.int64)
        hot = np.zeros(scores.shape, dtype=bool)
        hot[np.arange(targets.size), targets] = True
        acc = top1_accuracy(scores, targets)
    per_auc = auroc_per_class(scores, hot)
    per_ap = average_precision_per_class(scores, hot)
    excluded = np.flatnonzero(np.isnan(per_auc)).tolist()
    if excluded:
        logger.info("metric report excludes degenerate classes %s", excluded)
    return MetricReport(float(np.nanmean(per_auc)), float(np.nanmean(per_ap)), acc,
                        per_auc.tolist(), per_ap.tolist(), excluded)


# ----------------------------------------------------------------- probing

@dataclass(frozen=True)
class ProbeConfig:
    hidden: Optional[int] = None  # None: linear probe
    dropout: float = 0.0
    weight_decay: float = 1e-6
    learning_rate: float = 3e-4
    batch_size: int = 64
    max_steps: int = 5000
    eval_every: int = 50
    patience: int = 10
    multilabel: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class Probe:
    config: ProbeConfig
    n_classes: int
    mean: np.ndarray
    scale: np.ndarray
    params: dict
    steps_trained: int = 0

    def network(self, rng=None) -> Sequential:
        d_in = self.mean.size
        rng = rng if rng is not None else np.random.default_rng(0)
        if self.config.hidden is None:
            layers = [Dropout(self.config.dropout, rng), Affine("probe.out", d_in, self.n_classes)]
        else:
            layers = [Affine("probe.hidden", d_in, self.config.hidden), ReLU(),
                      Dropout(self.config.dropout, rng),
                      Affine("probe.out", self.config.hidden, self.n_classes)]
        return Sequential(layers)

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return self.network().forward(self.params, x)

    def scores(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        if self.config.multilabel:
            return 1.0 / (1.0 + np.exp(-z))
        return _softmax(z)

    def evaluate(self, features, labels) -> MetricReport:
        return metric_report(self.scores(features), labels, self.config.multilabel)

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        meta = json.dumps({"config": dataclasses.asdict(self.config), "n_classes": self.n_classes,
                           "steps_trained": self.steps_trained})
        np.savez(path, mean=self.mean, scale=self.scale, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path) -> "Probe":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
            return cls(ProbeConfig(**meta["config"]), meta["n_classes"], data["mean"],
                       data["scale"], params, meta["steps_trained"])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probe_loss(logits, y, multilabel):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    if multilabel:
        p = 1.0 / (1.0 + np.exp(-logits))
        loss = np.mean(np.logaddexp(0, logits) - y * logits) * logits.shape[1]
        return loss, (p - y) / n
    p = _softmax(logits)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig,
                splits: dict, n_classes: Optional[int] = None) -> Probe:
    """Fit a probe on ``splits['train']`` with early stopping on ``splits['val']``.

    ``labels`` are class indices, or a multi-hot matrix when the config is
    multilabel. The best validation-loss parameters are kept.
    """
    train_idx, val_idx = np.asarray(splits["train"]), np.asarray(splits["val"])
    used = [np.asarray(splits[k]) for k in ("train", "val", "test") if k in splits]
    flat = np.concatenate(used)
    if np.unique(flat).size != flat.size:
        raise ConfigError("probe splits overlap")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if config.multilabel:
        y_all = labels.astype(np.float64)
        n_classes = y_all.shape[1]
        if not _valid(labels[train_idx].astype(bool)).any():
            raise ConfigError("training split has no class with both positives and negatives")
    else:
        y_all = labels.astype(np.int64)
        n_classes = n_classes or int(y_all.max()) + 1
        if np.unique(y_all[train_idx]).size < 2:
            raise ConfigError("training split holds a single class")

    x_train = features[train_idx]
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0) + 1e-8
    probe = Probe(config, n_classes, mean, scale, {})
    rng = np.random.default_rng(config.seed)
    net = probe.network(rng)
    probe.params = net.init(rng)
    opt = Adam(lr=config.learning_rate, weight_decay=config.weight_decay)

    x = (features - mean) / scale
    best, best_params, stale, step = np.inf, probe.params, 0, 0
    while step < config.max_steps:
        order = rng.permutation(train_idx)
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = net.forward(probe.params, x[idx], train=True)
            _, dlogits = _probe_loss(logits, y_all[idx], config.multilabel)
            grads = {}
            net.backward(probe.params, grads, dlogits)
            opt.step(probe.params, grads)
            step += 1
            if step % config.eval_every == 0 or step == config.max_steps:
                val_loss, _ = _probe_loss(net.forward(probe.params, x[val_idx]),
                                          y_all[val_idx], config.multilabel)
                if val_loss < best - 1e-12:
                    best, best_params, stale = val_loss, dict(probe.params), 0
                else:
                    stale += 1
                if stale >= config.patience:
                    break
            if step >= config.max_steps:
                break
        if stale >= config.patience:
            break
    probe.params = best_params
    probe.steps_trained = step
    return probe


def make_splits(n: int, seed: int, fractions=(0.6, 0.2, 0.2), strata=None) -> dict:
    """Disjoint train/val/test index sets; stratified when ``strata`` is given."""
    rng = np.random.default_rng(seed)
    groups = [np.arange(n)] if strata is None else [
        np.flatnonzero(np.asarray(strata) == s) for s in np.unique(strata)]
    out = {"train": [], "val": [], "test": []}
    for g in groups:
        g = rng.permutation(g)
        n_train = int(round(fractions[0] * g.size))
        n_val = int(round(fractions[1] * g.size))
        out["train"] += g[:n_train].tolist()
        out["val"] += g[n_train:n_train + n_val].tolist()
        out["test"] += g[n_train + n_val:].tolist()
    return {k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in out.items()}


def probe_encoder(model, audio: np.ndarray, labels, config: ProbeConfig, splits: dict,
                  n_classes: Optional[int] = None):
    """Embed with the frozen encoder, fit a probe, score the test split.

    Returns (probe, test MetricReport, embeddings). Raises if the encoder's
    parameters changed while probing.
    """
    before = model.digest()
    features = model.embed(audio)
    probe = train_probe(features, labels, config, splits, n_classes)
    if model.digest() != before:
        raise RuntimeError("probe training modified the encoder parameters")
    test = np.asarray(splits["test"])
    labels = np.asarray(labels)
    report = probe.evaluate(features[test], labels[test])
    return probe, report, features


# ----------------------------------------------------------------- robustness

def corrupt(audio: np.ndarray, chain: ChainConfig, severity: int, seed: int,
            sample_rate: int) -> np.ndarray:
    cfg = scale_severity(chain, severity)
    return np.stack([apply_chain(x, cfg, np.random.default_rng([seed, severity, k]), sample_rate)
                     for k, x in enumerate(audio)])


def robustness_sweep(model, probe: Probe, audio: np.ndarray, labels, chain: ChainConfig,
                     severities: Sequence[int] = SEVERITIES, seed: int = 0,
                     sample_rate: int = 22050) -> list:
    """Corrupt test audio at each severity, embed, and score with a probe
    trained on clean embeddings. Returns [(severity, MetricReport), ...]."""
    rows = []
    for s in severities:
        if s not in SEVERITIES:
            raise ConfigError(f"severity {s} is outside {SEVERITIES}")
        corrupted = corrupt(audio, chain, s, seed, sample_rate)
        rows.append((s, probe.evaluate(model.embed(corrupted), labels)))
    return rows
