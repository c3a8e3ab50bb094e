"""Classification and metric-learning losses.

Both losses reduce by summation over the batch. An optional mean reduction
is exposed for schedule portability but stays off by default.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor

__all__ = ["cross_entropy_loss", "batch_hard_triplet_loss", "pairwise_distances"]


def cross_entropy_loss(scores: Tensor, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Softmax cross-entropy, -sum_i log softmax(scores_i)[labels_i].

    scores: (N, C) raw class scores; labels: integer array in [0, C).
    """
    scores = as_tensor(scores)
    if scores.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: scores must be (N, C), got {scores.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"cross_entropy_loss: labels must lie in [0, {c})")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"cross_entropy_loss: unknown reduction {reduction!r}")

    s = scores.data
    m = s.max(axis=1, keepdims=True)
    z = s - m
    lse = m[:, 0] + np.log(np.exp(z).sum(axis=1))
    per_sample = lse - s[np.arange(n), labels]
    total = per_sample.sum()
    factor = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(total * factor)

    def backward(g):
        if scores.requires_grad:
            soft = np.exp(z)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(n), labels] -= 1.0
            scores._accumulate(float(g) * factor * soft)

    return _make(out, (scores,), backward)


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between rows, exact zeros on the diagonal."""
    sq = (features * features).sum(axis=1)
    d2 = sq[:, None] - 2.0 * features @ features.T + sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def batch_hard_triplet_loss(
    features: Tensor,
    labels: np.ndarray,
    margin: float,
    reduction: str = "sum",
) -> Tensor:
    """Batch-hard triplet loss over a P-identities-by-K-images batch.

    For each anchor the hardest positive is the farthest same-identity
    sample and the hardest negative the closest other-identity sample;
    the anchor contributes max(0, margin + d_pos - d_neg). Every identity
    in the batch must appear at least twice.
    """
    features = as_tensor(features)
    if features.data.ndim != 2:
        raise ShapeError(f"batch_hard_triplet_loss: features must be (N, D), got {features.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"batch_hard_triplet_loss: labels shape {labels.shape} != ({n},)")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"batch_hard_triplet_loss: unknown reduction {reduction!r}")
    _, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2:
        raise ValueError("batch_hard_triplet_loss: every identity needs at least 2 samples")
    if np.all(counts == n):
        raise ValueError("batch_hard_triplet_loss: batch holds a single identity, no negatives")

    f = features.data
    dist = pairwise_distances(f)
    same = labels[:, None] == labels[None, :]
    pos_mask = same.copy()
    np.fill_diagonal(pos_mask, False)

    pos_dist = np.where(pos_mask, dist, -np.inf)
    neg_dist = np.where(~same, dist, np.inf)
    pos_idx = pos_dist.argmax(axis=1)
    neg_idx = neg_dist.argmin(axis=1)
    d_pos = pos_dist[np.arange(n), pos_idx]
    d_neg = neg_dist[np.arange(n), neg_idx]
    hinge_arg = margin + d_pos - d_neg
    active = hinge_arg > 0.0
    per_anchor = np.where(active, hinge_arg, 0.0)
    factor = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per_anchor.sum() * factor)

    # distance from the probe to the nearest selection or hinge kink
    margins = [np.abs(hinge_arg).min()]
    if pos_mask.sum(axis=1).max() > 1:
        top2 = np.sort(np.where(pos_mask, dist, -np.inf), axis=1)[:, -2:]
        gap = top2[:, 1] - top2[:, 0]
        margins.append(gap[np.isfinite(gap)].min() if np.isfinite(gap).any() else np.inf)
    bot2 = np.sort(np.where(~same, dist, np.inf), axis=1)[:, :2]
    gap = bot2[:, 1] - bot2[:, 0]
    margins.append(gap[np.isfinite(gap)].min() if np.isfinite(gap).any() else np.inf)
    kink = float(min(margins))

    def backward(g):
        if not features.requires_grad:
            return
        grad = np.zeros_like(f)
        scale = float(g) * factor
        for a in np.nonzero(active)[0]:
            p, ng = pos_idx[a], neg_idx[a]
            if d_pos[a] > 0.0:
                u = (f[a] - f[p]) / d_pos[a]
                grad[a] += scale * u
                grad[p] -= scale * u
            if d_neg[a] > 0.0:
                v = (f[a] - f[ng]) / d_neg[a]
                grad[a] -= scale * v
                grad[ng] += scale * v
        features._accumulate(grad)

    return _make(out, (features,), backward, kink_margin=kink)
