"""Command-line entry point.

Config files are JSON with optional ``train``, ``probe`` and ``synthetic``
sections, each mirroring the matching dataclass. Values resolve as
command-line flag > config file > built-in default, and every run directory
gets a ``run_manifest.json`` recording the resolved config and where each
value came from.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import SEVERITIES, ChainConfig, apply_chain, scale_severity
from .errors import ConfigError
from .evaluation import MetricReport, Probe, ProbeConfig, make_splits, probe_encoder, robustness_sweep
from .sampler import (
    Clip,
    center_segments,
    read_manifest,
    read_wav,
    sample_batch,
    select_labeled_subset,
    write_manifest,
    write_wav,
)
from .synthetic import SyntheticDatasetSpec, generate_synthetic_dataset
from .targets import build_targets, sparsity
from .train import Checkpoint, TrainConfig, pretrain, stream

logger = logging.getLogger("semisupcon")

# flag dest -> dotted path inside the train section
TRAIN_FLAGS = {
    "steps": "steps",
    "learning_rate": "learning_rate",
    "tau": "tau",
    "target_mode": "target_mode",
    "criterion": "criterion",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
    "p_s": "sampler.p_s",
    "b_s": "sampler.b_s",
    "origins_per_batch": "sampler.origins_per_batch",
    "views_per_origin": "sampler.views_per_origin",
    "segment_seconds": "sampler.segment_seconds",
    "sample_rate": "sampler.sample_rate",
}


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int
    config: dict
    sources: dict
    artifacts: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# ----------------------------------------------------------------- config resolution

def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(d: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    for p in parents:
        d = d.setdefault(p, {})
    d[leaf] = value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(data) - {"train", "probe", "synthetic"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return data


def resolve(defaults: dict, file_section: dict, flags: dict) -> tuple:
    """Layer flags over the file section over defaults; report each key's source."""
    merged = _merge(defaults, file_section)
    sources = {k: "default" for k in _flatten(defaults)}
    sources.update({k: "file" for k in _flatten(file_section)})
    for dotted, value in flags.items():
        if value is not None:
            _set(merged, dotted, value)
            sources[dotted] = "cli"
    return merged, sources


def resolve_train_config(args) -> tuple:
    file_cfg = load_config_file(args.config)
    flags = {path: getattr(args, dest, None) for dest, path in TRAIN_FLAGS.items()}
    merged, sources = resolve(TrainConfig().to_dict(), file_cfg.get("train", {}), flags)
    # the sampler seed always follows the run seed
    merged["sampler"]["seed"] = merged["seed"]
    return TrainConfig.from_dict(merged), sources


def resolve_probe_config(args) -> tuple:
    file_cfg = load_config_file(args.config)
    section = file_cfg.get("probe", {})
    unknown = set(section) - {f.name for f in dataclasses.fields(ProbeConfig)}
    if unknown:
        raise ConfigError(f"unknown probe fields: {sorted(unknown)}")
    merged, sources = resolve(dataclasses.asdict(ProbeConfig()), section, {"seed": args.seed})
    return ProbeConfig(**merged), sources


# ----------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def encode_labels(clips, prefix: str = None) -> tuple:
    """Class indices when every clip has exactly one label, else multi-hot.

    Returns (labels, vocabulary list, multilabel flag).
    """
    sets = [frozenset(l for l in c.labels if prefix is None or l.startswith(prefix)) for c in clips]
    vocab = sorted(set().union(*sets)) if sets else []
    if not vocab:
        raise ConfigError("no labels to probe" + (f" with prefix {prefix!r}" if prefix else ""))
    index = {v: k for k, v in enumerate(vocab)}
    if all(len(s) == 1 for s in sets):
        return np.array([index[next(iter(s))] for s in sets]), vocab, False
    hot = np.zeros((len(sets), len(vocab)), dtype=bool)
    for k, s in enumerate(sets):
        hot[k, [index[v] for v in s]] = True
    return hot, vocab, True


def _probe_inputs(args, ckpt: Checkpoint):
    labeled, _ = read_manifest(args.manifest)
    if len(labeled) == 0:
        raise ConfigError(f"{args.manifest} holds no labeled clips")
    sc = ckpt.train_config().sampler
    audio = center_segments(labeled.clips, sc.segment_samples, sc.sample_rate)
    labels, vocab, multilabel = encode_labels(labeled.clips, args.label_prefix)
    return audio, labels, vocab, multilabel, sc.sample_rate


def _load_splits(path, n: int) -> dict:
    if path is None:
        return {"test": np.arange(n)}
    return {k: np.asarray(v, dtype=np.int64) for k, v in json.loads(Path(path).read_text()).items()}


def _check_digest(args, ckpt: Checkpoint) -> None:
    if args.config is None:
        return
    section = load_config_file(args.config).get("train")
    if section is None:
        return
    expected = TrainConfig.from_dict(_merge(TrainConfig().to_dict(), section))
    if expected.digest() != ckpt.config_digest:
        logger.warning("checkpoint config digest %s differs from the config file's %s",
                       ckpt.config_digest[:12], expected.digest()[:12])


def _write_report(out: Path, stem: str, report: MetricReport) -> dict:
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.table() + "\n")
    return {"report": str(out / f"{stem}.json"), "table": str(out / f"{stem}.txt")}


# ----------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    config, sources = resolve_train_config(args)
    labeled, unlabeled = read_manifest(args.manifest)
    out = _out_dir(args)
    manifest = RunManifest("pretrain", sys.argv, config.seed, config.to_dict(), sources)
    manifest.write(out)
    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt = pretrain(config, labeled, unlabeled, out_dir=out, resume=resume)
    manifest.artifacts = {"checkpoint": str(out / "final.bin"), "log": str(out / "train_log.jsonl"),
                          "checkpoint_digest": ckpt.digest()}
    manifest.write(out)
    print(f"checkpoint {out / 'final.bin'} step {ckpt.step} digest {ckpt.digest()[:16]}")
    return 0


def cmd_probe(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_digest(args, ckpt)
    config, sources = resolve_probe_config(args)
    audio, labels, vocab, multilabel, _ = _probe_inputs(args, ckpt)
    config = dataclasses.replace(config, multilabel=multilabel)
    strata = None if multilabel else labels
    splits = make_splits(len(audio), config.seed, strata=strata)
    probe, report, _ = probe_encoder(ckpt.model(), audio, labels, config, splits,
                                     n_classes=len(vocab))
    out = _out_dir(args)
    probe.save(out / "probe.npz")
    (out / "splits.json").write_text(json.dumps({k: v.tolist() for k, v in splits.items()}) + "\n")
    (out / "vocabulary.json").write_text(json.dumps(vocab) + "\n")
    artifacts = {"probe": str(out / "probe.npz"), "splits": str(out / "splits.json"),
                 **_write_report(out, "report", report)}
    RunManifest("probe", sys.argv, config.seed, {"probe": dataclasses.asdict(config),
                "checkpoint_config": ckpt.config}, sources, artifacts).write(out)
    print(report.table())
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_digest(args, ckpt)
    probe = Probe.load(args.probe)
    audio, labels, _, _, _ = _probe_inputs(args, ckpt)
    test = _load_splits(args.splits, len(audio))["test"]
    report = probe.evaluate(ckpt.model().embed(audio[test]), labels[test])
    out = _out_dir(args)
    artifacts = _write_report(out, "report", report)
    RunManifest("evaluate", sys.argv, args.seed or 0, {"checkpoint_config": ckpt.config},
                {}, artifacts).write(out)
    print(report.table())
    return 0


def cmd_robustness(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_digest(args, ckpt)
    probe = Probe.load(args.probe)
    audio, labels, _, _, sr = _probe_inputs(args, ckpt)
    test = _load_splits(args.splits, len(audio))["test"]
    severities = [args.severity] if args.severity is not None else list(SEVERITIES)
    seed = args.seed if args.seed is not None else 0
    chain = ckpt.train_config().chain
    if chain.severity != 2:
        chain = ChainConfig()
    rows = robustness_sweep(ckpt.model(), probe, audio[test], labels[test], chain,
                            severities, seed=seed, sample_rate=sr)
    out = _out_dir(args)
    with open(out / "robustness.jsonl", "w") as fh:
        for s, rep in rows:
            fh.write(json.dumps({"severity": s, **json.loads(rep.to_json())}, sort_keys=True) + "\n")
    lines = [f"{'severity':>8} {'AUROC':>8} {'AP':>8} {'top-1':>8}"]
    for s, rep in rows:
        acc = "-" if rep.top1_accuracy is None else f"{rep.top1_accuracy:.4f}"
        lines.append(f"{s:>8} {rep.auroc:8.4f} {rep.average_precision:8.4f} {acc:>8}")
    (out / "robustness.txt").write_text("\n".join(lines) + "\n")
    RunManifest("robustness", sys.argv, seed, {"severities": severities, "chain": chain.to_dict()},
                {}, {"report": str(out / "robustness.jsonl"),
                     "table": str(out / "robustness.txt")}).write(out)
    print("\n".join(lines))
    return 0


def format_grid(entries: np.ndarray) -> str:
    rows = []
    for row in entries:
        rows.append(" ".join("." if v == 0 else ("1" if v == 1 else f"{v:.2f}") for v in row))
    return "\n".join(rows)


def cmd_inspect_matrix(args) -> int:
    config, sources = resolve_train_config(args)
    labeled, unlabeled = read_manifest(args.manifest)
    sc = config.sampler
    subset = select_labeled_subset(labeled, sc.p_s, int(stream(config.seed, 1).integers(2**63)))
    batch = sample_batch(subset, unlabeled, sc, stream(config.seed, 2, 0))
    target = build_targets(batch.layout, config.target_mode, config.criterion)
    report = sparsity(target, batch.layout)
    out = _out_dir(args)
    (out / "matrix.txt").write_text(format_grid(target.entries) + "\n")
    with open(out / "matrix.jsonl", "w") as fh:
        for i, j in zip(*np.nonzero(target.entries)):
            fh.write(json.dumps({"i": int(i), "j": int(j), "value": float(target.entries[i, j])}) + "\n")
    (out / "sparsity.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    (out / "batch.json").write_text(json.dumps({
        "origin_clip_ids": list(batch.origin_clip_ids),
        "origin_of": [int(o) for o in batch.layout.origin_of],
        "labeled_views": [bool(v) for v in batch.layout.labeled_views],
        "mode": target.mode}) + "\n")
    RunManifest("inspect-matrix", sys.argv, config.seed, config.to_dict(), sources,
                {"grid": str(out / "matrix.txt"), "entries": str(out / "matrix.jsonl"),
                 "sparsity": str(out / "sparsity.json")}).write(out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    file_cfg = load_config_file(args.config).get("train", {})
    chain = ChainConfig.from_dict(file_cfg["chain"]) if "chain" in file_cfg else ChainConfig()
    severity = 2 if args.severity is None else args.severity
    chain = scale_severity(chain, severity)
    audio = read_wav(args.input, args.sample_rate)
    seed = args.seed if args.seed is not None else 0
    out = apply_chain(audio, chain, np.random.default_rng(seed), args.sample_rate)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_wav(args.output, out, args.sample_rate)
    print(f"wrote {args.output} at severity {severity}")
    return 0


def cmd_gen_synthetic(args) -> int:
    section = load_config_file(args.config).get("synthetic", {})
    flags = {"n_clips": args.n_clips, "clip_seconds": args.clip_seconds,
             "sample_rate": args.sample_rate, "label_rule": args.label_rule,
             "labeled_fraction": args.labeled_fraction, "seed": args.seed}
    defaults = SyntheticDatasetSpec().to_dict()
    merged, sources = resolve(defaults, section, flags)
    spec = SyntheticDatasetSpec(**{k: tuple(tuple(x) if isinstance(x, list) else x for x in v)
                                   if isinstance(v, list) else v for k, v in merged.items()})
    labeled, unlabeled = generate_synthetic_dataset(spec)
    out = _out_dir(args)
    audio_dir = out / "audio"
    audio_dir.mkdir(exist_ok=True)
    clips = []
    for clip in labeled.clips + unlabeled.clips:
        path = audio_dir / f"{clip.clip_id}.wav"
        write_wav(path, clip.synth(spec.sample_rate), spec.sample_rate)
        clips.append(Clip(clip.clip_id, clip.duration, clip.labels, str(path)))
    write_manifest(out / "manifest.jsonl", clips, spec.vocabulary)
    RunManifest("gen-synthetic", sys.argv, spec.seed, spec.to_dict(), sources,
                {"manifest": str(out / "manifest.jsonl"), "audio": str(audio_dir)}).write(out)
    print(f"{len(labeled)} labeled and {len(unlabeled)} unlabeled clips in {out / 'manifest.jsonl'}")
    return 0


# ----------------------------------------------------------------- parser

def _train_flags(p) -> None:
    p.add_argument("--manifest", required=True, help="line-delimited clip manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--p-s", type=float, help="share of the labeled pool available for training")
    p.add_argument("--b-s", type=float, help="share of labeled origins per batch")
    p.add_argument("--origins-per-batch", type=int)
    p.add_argument("--views-per-origin", type=int)
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--criterion", type=int, help="shared labels needed for a positive pair")
    p.add_argument("--target-mode", choices=["binary", "weighted"])
    p.add_argument("--checkpoint-every", type=int)


def _eval_flags(p, probe=True) -> None:
    p.add_argument("--checkpoint", required=True)
    if probe:
        p.add_argument("--probe", required=True)
        p.add_argument("--splits", help="splits.json written by the probe command; its test set is used")
    p.add_argument("--manifest", required=True, help="manifest of labeled evaluation clips")
    p.add_argument("--label-prefix", help="only probe labels starting with this prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semisupcon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="fit a probe on a frozen encoder")
    _eval_flags(p, probe=False)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("evaluate", parents=[common], help="score a trained probe")
    _eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("robustness", parents=[common], help="corruption-severity sweep")
    _eval_flags(p)
    p.add_argument("--severity", type=int, choices=SEVERITIES, help="a single severity instead of 0-4")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("inspect-matrix", parents=[common], help="dump one batch's target matrix")
    _train_flags(p)
    p.set_defaults(func=cmd_inspect_matrix)

    p = sub.add_parser("augment", parents=[common], help="apply the augmentation chain to a WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--severity", type=int, choices=SEVERITIES)
    p.add_argument("--sample-rate", type=int, default=22050)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic tone corpus")
    p.add_argument("--n-clips", type=int)
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--label-rule", choices=["pitch", "timbre", "both"])
    p.add_argument("--labeled-fraction", type=float)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
