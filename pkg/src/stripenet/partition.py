"""Stripe partitioning: receptive partition, uniform stripes, and
activation-balanced pooling.

Receptive partition (RP) splits an intermediate feature map into horizontal
stripes and concatenates them along the batch axis, so the layers after the
split process each stripe as an independent sample through the same weights.
The output is stripe-major: rows ``[s*n, (s+1)*n)`` of the result hold
stripe ``s`` of every original sample, in original sample order, so
``split_batch(result, n_s)[s]`` is exactly stripe ``s``'s independent
forward batch.

Activation-balanced pooling (ABP) re-cuts a final feature map so each stripe
holds an (as nearly as possible) equal share of the per-channel spatial
maxima, then average-pools each stripe. Boundaries are chosen by exact
minimization of the count spread over all cut placements, with ties broken
toward the lexicographically smallest cut vector; this reproduces uniform
cuts on row-uniform histograms and is never worse than any threshold rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, concat, require_rank4, split

__all__ = [
    "StripeBoundaries",
    "MaxActivationHistogram",
    "PartitionError",
    "receptive_partition",
    "uniform_stripes",
    "max_activation_histogram",
    "abp_boundaries",
    "stripe_average_pool",
]


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class StripeBoundaries:
    """Row cuts [h_0, ..., h_{n_s}] over a map of height H; h_0 = 0, h_{n_s} = H."""

    cuts: tuple[int, ...]

    def __post_init__(self):
        c = self.cuts
        if len(c) < 2 or c[0] != 0:
            raise PartitionError(f"cuts must start at 0, got {c}")
        if any(a >= b for a, b in zip(c, c[1:])):
            raise PartitionError(f"cuts must be strictly increasing, got {c}")

    @property
    def n_s(self) -> int:
        return len(self.cuts) - 1

    @property
    def height(self) -> int:
        return self.cuts[-1]

    def stripe_rows(self, k: int) -> range:
        return range(self.cuts[k], self.cuts[k + 1])


@dataclass(frozen=True)
class MaxActivationHistogram:
    """Cumulative per-row counts of channel spatial maxima.

    ``cumulative[h]`` is the number of channels whose spatial maximum lies in
    rows 0..h; ``cumulative[H-1]`` equals the channel count.
    """

    cumulative: tuple[int, ...]

    def __post_init__(self):
        c = self.cumulative
        if not c:
            raise PartitionError("histogram must cover at least one row")
        if any(a > b for a, b in zip(c, c[1:])) or c[0] < 0:
            raise PartitionError("cumulative counts must be non-decreasing and non-negative")

    @property
    def height(self) -> int:
        return len(self.cumulative)

    @property
    def total(self) -> int:
        return self.cumulative[-1]

    def counts(self) -> np.ndarray:
        """Per-row (non-cumulative) counts."""
        return np.diff(np.concatenate([[0], self.cumulative]))


def receptive_partition(fmap: Tensor, n_s: int) -> Tensor:
    """Split (n,c,h,w) into n_s horizontal stripes stacked along the batch axis."""
    fmap = as_tensor(fmap)
    require_rank4(fmap, "receptive_partition")
    n, c, h, w = fmap.shape
    if n_s < 1:
        raise PartitionError(f"stripe count must be >= 1, got {n_s}")
    if h % n_s != 0:
        raise PartitionError(f"height {h} is not divisible by {n_s} stripes")
    if n_s == 1:
        return fmap
    return concat(split(fmap, n_s, axis=2), axis=0)


def uniform_stripes(fmap: Tensor, n_s: int) -> list[Tensor]:
    """n_s equal-height horizontal slices of an (n,c,h,w) map, top to bottom."""
    fmap = as_tensor(fmap)
    require_rank4(fmap, "uniform_stripes")
    h = fmap.shape[2]
    if n_s < 1:
        raise PartitionError(f"stripe count must be >= 1, got {n_s}")
    if h % n_s != 0:
        raise PartitionError(f"height {h} is not divisible by {n_s} stripes")
    return split(fmap, n_s, axis=2)


def max_activation_histogram(fmap) -> MaxActivationHistogram:
    """Row histogram of per-channel spatial maxima for a single-sample map.

    Ties go to the first occurrence in row-major order, so every channel
    contributes exactly one count.
    """
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] != 1:
        raise ShapeError(f"max_activation_histogram expects (1,C,H,W), got {data.shape}")
    _, c, h, w = data.shape
    flat_argmax = data.reshape(c, h * w).argmax(axis=1)
    rows = flat_argmax // w
    per_row = np.bincount(rows, minlength=h)
    return MaxActivationHistogram(tuple(int(v) for v in np.cumsum(per_row)))


def abp_boundaries(hist: MaxActivationHistogram, n_s: int) -> StripeBoundaries:
    """Cut the map so per-stripe max-activation counts are as balanced as possible.

    Exhaustively minimizes (max stripe count - min stripe count) over all
    C(H-1, n_s-1) placements of interior cuts, breaking ties toward the
    lexicographically smallest cut vector. Enumeration is vectorized and
    cheap for the map heights this models produce (H <= 64, n_s <= 8).
    """
    h = hist.height
    if n_s < 1:
        raise PartitionError(f"stripe count must be >= 1, got {n_s}")
    if n_s > h:
        raise PartitionError(f"cannot cut {h} rows into {n_s} stripes")
    if n_s == 1:
        return StripeBoundaries((0, h))
    if comb(h - 1, n_s - 1) > 5_000_000:
        raise PartitionError(
            f"exact balancing over C({h - 1},{n_s - 1}) cut placements is infeasible"
        )
    cum = np.concatenate([[0], np.asarray(hist.cumulative, dtype=np.int64)])
    # all interior cut placements, lexicographic order
    placements = np.array(list(combinations(range(1, h), n_s - 1)), dtype=np.int64)
    full = np.concatenate(
        [
            np.zeros((len(placements), 1), dtype=np.int64),
            placements,
            np.full((len(placements), 1), h, dtype=np.int64),
        ],
        axis=1,
    )
    stripe_counts = cum[full[:, 1:]] - cum[full[:, :-1]]
    spread = stripe_counts.max(axis=1) - stripe_counts.min(axis=1)
    best = int(np.argmin(spread))  # first occurrence = lexicographically smallest
    return StripeBoundaries(tuple(int(v) for v in full[best]))


def stripe_average_pool(fmap: Tensor, bounds: StripeBoundaries) -> list[Tensor]:
    """Average each stripe of a (1,C,H,W) map over its rows and all columns.

    Returns one (1, C) tensor per stripe; gradients distribute uniformly over
    each stripe's region.
    """
    fmap = as_tensor(fmap)
    require_rank4(fmap, "stripe_average_pool")
    n, c, h, w = fmap.shape
    if n != 1:
        raise ShapeError(f"stripe_average_pool expects a single-sample map, got n={n}")
    if bounds.height != h:
        raise PartitionError(f"boundaries cover {bounds.height} rows but map has {h}")
    outs: list[Tensor] = []
    for k in range(bounds.n_s):
        lo, hi = bounds.cuts[k], bounds.cuts[k + 1]
        region = fmap.data[:, :, lo:hi, :]
        pooled = region.mean(axis=(2, 3))

        def backward(g, lo=lo, hi=hi):
            if fmap.requires_grad:
                grad = np.zeros_like(fmap.data)
                grad[:, :, lo:hi, :] = g[:, :, None, None] / ((hi - lo) * w)
                fmap._accumulate(grad)

        outs.append(_make(pooled, (fmap,), backward))
    return outs
