"""Semi-supervised contrastive loss over a target matrix, with analytic gradients.

For anchor i with positive weights w_ij (0/1 in binary mode, semantic weights
in weighted mode) and cosine logits l_ij = sim(z_i, z_j) / tau:

    loss_i = -sum_j (w_ij / W_i) * (log w_ij + l_ij - log sum_{k != i} exp(l_ik))

Binary targets make the log w_ij term vanish, giving the NT-Xent loss for
sibling-only targets and the SupCon loss for label-derived targets. The
denominator always runs over every view except the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, NonFiniteError, StructuralError, ZeroNormError
from .targets import TargetMatrix


@dataclass
class LossResult:
    loss: float
    per_anchor_loss: np.ndarray  # NaN where the anchor has no positives
    gradient: np.ndarray
    anchor_mask: np.ndarray


def _check_inputs(embeddings, target: TargetMatrix, tau: float, dtype):
    z = np.asarray(embeddings, dtype=dtype)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise StructuralError(f"embeddings must be (views >= 2, dims >= 2), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("embeddings contain non-finite values")
    if target.size != z.shape[0]:
        raise StructuralError(
            f"target side {target.size} does not match {z.shape[0]} embedding rows")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return z


def _normalize(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(int(zero[0]))
    return z / norms[:, None], norms


def cosine_similarity_matrix(embeddings) -> np.ndarray:
    z = np.asarray(embeddings, dtype=np.float64)
    u, _ = _normalize(z)
    sim = u @ u.T
    np.clip(sim, -1.0, 1.0, out=sim)
    np.fill_diagonal(sim, 1.0)
    return sim


def _forward(z: np.ndarray, target: TargetMatrix, tau: float):
    u, norms = _normalize(z)
    n = z.shape[0]
    logits = (u @ u.T) / tau
    off = ~np.eye(n, dtype=bool)
    # max-shift per row over non-anchor entries
    shift = np.where(off, logits, -np.inf).max(axis=1, keepdims=True)
    expl = np.where(off, np.exp(logits - shift), 0.0)
    denom = expl.sum(axis=1, keepdims=True)
    log_prob = logits - shift - np.log(denom)

    w = target.entries.astype(z.dtype, copy=False)
    w_sum = w.sum(axis=1)
    mask = w_sum > 0
    if not mask.any():
        raise DegenerateBatchError("no anchor in the batch has a positive")
    q = np.zeros_like(w)
    q[mask] = w[mask] / w_sum[mask, None]
    log_w = np.zeros_like(w)
    if target.mode == "weighted":
        np.log(w, out=log_w, where=w > 0)

    per_anchor = np.full(n, np.nan, dtype=z.dtype)
    per_anchor[mask] = -(q[mask] * (log_w[mask] + np.where(off, log_prob, 0.0)[mask])).sum(axis=1)
    loss = per_anchor[mask].mean()
    return loss, per_anchor, mask, (u, norms, expl / denom, q)


def loss_only(embeddings, target: TargetMatrix, tau: float = 0.1, dtype=np.float64) -> float:
    z = _check_inputs(embeddings, target, tau, dtype)
    loss, _, _, _ = _forward(z, target, tau)
    return float(loss)


def semi_supervised_loss(embeddings, target: TargetMatrix, tau: float = 0.1,
                         dtype=np.float64) -> LossResult:
    """Loss averaged over anchors with at least one positive, and its gradient
    with respect to the raw (unnormalized) embeddings."""
    z = _check_inputs(embeddings, target, tau, dtype)
    loss, per_anchor, mask, (u, norms, softmax, q) = _forward(z, target, tau)

    # d loss / d logits, rows of anchors without positives contribute nothing
    g = np.zeros_like(softmax)
    g[mask] = (softmax[mask] - q[mask]) / mask.sum()
    g_sim = (g + g.T) / tau
    grad_u = g_sim @ u
    grad_z = (grad_u - u * np.sum(grad_u * u, axis=1, keepdims=True)) / norms[:, None]
    if not np.all(np.isfinite(grad_z)):
        raise NonFiniteError("non-finite loss gradient")
    return LossResult(float(loss), per_anchor, grad_z, mask)
