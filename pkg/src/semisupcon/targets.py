"""Target contrastive matrices built from batch provenance and labels.

Views are indexed 0..V-1. A view's positives are its sibling views (same
origin clip) and, for labeled origins, views of other labeled origins whose
label sets share at least ``criterion`` labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import StructuralError

LabelSet = frozenset


@dataclass(frozen=True)
class BatchLayout:
    """Which origin each view came from, and which origins carry labels."""

    origin_of: np.ndarray
    labeled_mask: np.ndarray
    label_of: tuple
    views_per_origin: int = field(init=False)

    def __post_init__(self):
        origin_of = np.asarray(self.origin_of, dtype=np.int64)
        labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        object.__setattr__(self, "origin_of", origin_of)
        object.__setattr__(self, "labeled_mask", labeled_mask)
        object.__setattr__(self, "label_of", tuple(
            None if ls is None else frozenset(ls) for ls in self.label_of))

        n_origins = len(labeled_mask)
        if len(self.label_of) != n_origins:
            raise StructuralError("label_of and labeled_mask differ in length")
        if origin_of.ndim != 1 or origin_of.size == 0:
            raise StructuralError("origin_of must be a non-empty 1-D map")
        if origin_of.min() < 0 or origin_of.max() >= n_origins:
            raise StructuralError("origin_of refers to an unknown origin")
        counts = np.bincount(origin_of, minlength=n_origins)
        if not np.all(counts == counts[0]):
            raise StructuralError(
                f"non-uniform views per origin: {sorted(set(counts.tolist()))}")
        if counts[0] < 2:
            raise StructuralError("every origin needs at least 2 views")
        for k, (flag, labels) in enumerate(zip(labeled_mask, self.label_of)):
            if bool(flag) != (labels is not None):
                raise StructuralError(f"origin {k}: labeled_mask disagrees with label_of")
            if labels is not None and len(labels) == 0:
                raise StructuralError(f"origin {k}: labeled origin with empty label set")
        object.__setattr__(self, "views_per_origin", int(counts[0]))

    @classmethod
    def from_origins(cls, n_origins: int, views_per_origin: int,
                     labels: Optional[Sequence] = None) -> "BatchLayout":
        """Origin-major layout: views of origin k sit at k*M .. k*M+M-1."""
        if labels is None:
            labels = [None] * n_origins
        origin_of = np.repeat(np.arange(n_origins), views_per_origin)
        mask = [ls is not None for ls in labels]
        return cls(origin_of, mask, tuple(labels))

    @property
    def total_views(self) -> int:
        return int(self.origin_of.size)

    @property
    def n_origins(self) -> int:
        return int(self.labeled_mask.size)

    @property
    def labeled_views(self) -> np.ndarray:
        return self.labeled_mask[self.origin_of]

    def permuted(self, perm: np.ndarray) -> "BatchLayout":
        return BatchLayout(self.origin_of[np.asarray(perm)], self.labeled_mask, self.label_of)


@dataclass(frozen=True)
class TargetMatrix:
    entries: np.ndarray
    mode: str = "binary"

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", m)
        if self.mode not in ("binary", "weighted"):
            raise StructuralError(f"unknown target mode {self.mode!r}")
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise StructuralError(f"target matrix must be square, got {m.shape}")
        if not np.array_equal(m, m.T):
            raise StructuralError("target matrix is not symmetric")
        if np.any(np.diag(m) != 0):
            raise StructuralError("target matrix has a nonzero diagonal")
        if self.mode == "binary" and not np.all((m == 0) | (m == 1)):
            raise StructuralError("binary target has entries outside {0, 1}")
        if np.any(m < 0) or np.any(m > 1):
            raise StructuralError("target entries must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def positives(self) -> np.ndarray:
        return self.entries > 0

    def permuted(self, perm: np.ndarray) -> "TargetMatrix":
        perm = np.asarray(perm)
        return TargetMatrix(self.entries[np.ix_(perm, perm)], self.mode)


@dataclass(frozen=True)
class SparsityReport:
    """Positive-count diagnostics of a target matrix.

    ``s_smssl`` and ``s_sl`` are densities (positives over off-diagonal
    pairs) for all views and for labeled views only. ``mean_positives_per_anchor``
    is the raw count per anchor and ``mean_supervised_positives`` the same
    restricted to labeled anchors and labeled partners. Labeled-view fields
    are None when the batch has no labeled views.
    """

    s_smssl: float
    s_sl: Optional[float]
    mean_positives_per_anchor: float
    mean_supervised_positives: Optional[float]

    def to_dict(self) -> dict:
        return {
            "s_smssl": self.s_smssl,
            "s_sl": self.s_sl,
            "mean_positives_per_anchor": self.mean_positives_per_anchor,
            "mean_supervised_positives": self.mean_supervised_positives,
        }


def _same_origin(layout: BatchLayout) -> np.ndarray:
    same = layout.origin_of[:, None] == layout.origin_of[None, :]
    np.fill_diagonal(same, False)
    return same


def _shared_label_counts(layout: BatchLayout):
    """Return (shared-count matrix between origins, per-origin label counts)."""
    vocab = sorted(set().union(*(ls for ls in layout.label_of if ls is not None)))
    index = {lab: k for k, lab in enumerate(vocab)}
    hot = np.zeros((layout.n_origins, len(vocab)), dtype=np.int64)
    for k, labels in enumerate(layout.label_of):
        if labels is not None:
            hot[k, [index[lab] for lab in labels]] = 1
    return hot @ hot.T, hot.sum(axis=1)


def _expand(origin_matrix: np.ndarray, layout: BatchLayout) -> np.ndarray:
    idx = layout.origin_of
    out = origin_matrix[np.ix_(idx, idx)].astype(np.float64)
    np.fill_diagonal(out, 0.0)
    return out


def build_self_supervised_targets(layout: BatchLayout) -> TargetMatrix:
    return TargetMatrix(_same_origin(layout).astype(np.float64), "binary")


def build_supervised_targets(layout: BatchLayout, criterion: int = 1) -> TargetMatrix:
    """Positives between labeled views sharing at least ``criterion`` labels.

    Sibling views of a labeled origin are always positive, whatever the
    criterion, since they inherit the same label set.
    """
    if int(criterion) != criterion or criterion < 1:
        raise ValueError(f"criterion must be a positive integer, got {criterion}")
    if not layout.labeled_mask.any():
        return TargetMatrix(np.zeros((layout.total_views,) * 2), "binary")
    shared, _ = _shared_label_counts(layout)
    both = layout.labeled_mask[:, None] & layout.labeled_mask[None, :]
    pos = both & (shared >= criterion)
    pos[np.diag_indices_from(pos)] = layout.labeled_mask
    return TargetMatrix(_expand(pos, layout), "binary")


def compute_semantic_weights(layout: BatchLayout) -> TargetMatrix:
    """Weights 2*|shared| / (|labels_i| + |labels_j|) between labeled origins."""
    alpha = np.zeros((layout.n_origins,) * 2)
    if layout.labeled_mask.any():
        shared, sizes = _shared_label_counts(layout)
        both = layout.labeled_mask[:, None] & layout.labeled_mask[None, :]
        denom = sizes[:, None] + sizes[None, :]
        np.divide(2.0 * shared, denom, out=alpha, where=both)
    np.fill_diagonal(alpha, 1.0)
    return TargetMatrix(_expand(alpha, layout), "weighted")


def combine_targets(ssl: TargetMatrix, sup: TargetMatrix) -> TargetMatrix:
    if ssl.entries.shape != sup.entries.shape:
        raise StructuralError(
            f"cannot combine targets of shapes {ssl.entries.shape} and {sup.entries.shape}")
    mode = "binary" if ssl.mode == sup.mode == "binary" else "weighted"
    return TargetMatrix(np.maximum(ssl.entries, sup.entries), mode)


def build_targets(layout: BatchLayout, strategy: str = "binary", criterion: int = 1) -> TargetMatrix:
    """Self-supervised targets augmented with label information.

    ``strategy`` is ``"binary"`` (shared-label criterion) or ``"weighted"``
    (semantic weights).
    """
    ssl = build_self_supervised_targets(layout)
    if strategy == "binary":
        return combine_targets(ssl, build_supervised_targets(layout, criterion))
    if strategy == "weighted":
        return combine_targets(ssl, compute_semantic_weights(layout))
    raise ValueError(f"unknown target strategy {strategy!r}")


def sparsity(target: TargetMatrix, layout: BatchLayout) -> SparsityReport:
    if target.size != layout.total_views:
        raise StructuralError("target and layout disagree on the number of views")
    pos = target.positives()
    n = target.size
    s_smssl = pos.sum() / (n * (n - 1))
    mean_pos = pos.sum() / n

    lab = layout.labeled_views
    n_lab = int(lab.sum())
    if n_lab == 0:
        return SparsityReport(float(s_smssl), None, float(mean_pos), None)
    sub = pos[np.ix_(lab, lab)]
    s_sl = sub.sum() / (n_lab * (n_lab - 1))
    return SparsityReport(float(s_smssl), float(s_sl), float(mean_pos), float(sub.sum() / n_lab))
