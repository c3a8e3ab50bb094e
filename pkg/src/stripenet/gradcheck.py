"""Finite-difference verification of analytic gradients.

Central differences with step h on every element of every leaf, compared
against the gradients produced by the reverse pass. Probes that land on a
non-differentiable point (a ReLU input at zero, a tie inside a max window,
a hinge boundary) are detected through the ``kink_margin`` the kernels
record, and are either resampled or rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradCheckResult", "NonDifferentiableProbe", "grad_check", "run_battery"]


class NonDifferentiableProbe(RuntimeError):
    """The probe sits too close to a kink for finite differences to be valid."""


@dataclass
class GradCheckResult:
    max_rel_error: float
    kink_margin: float
    resamples: int
    passed: bool


def _min_kink_margin(out: Tensor) -> float:
    margins = [n.kink_margin for n in out.graph_nodes() if n.kink_margin is not None]
    return float(min(margins)) if margins else np.inf


def grad_check(
    graph_fn: Callable[[list[Tensor]], Tensor],
    leaves: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    sampler: Callable[[], Sequence[np.ndarray]] | None = None,
    max_resamples: int = 10,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients for a scalar graph.

    graph_fn receives one Tensor per leaf and must return a scalar Tensor.
    All leaves are treated as differentiable (inputs and parameters alike).
    If the probe lands on a kink, a fresh probe is drawn from ``sampler``;
    without a sampler a kinked probe raises :class:`NonDifferentiableProbe`.
    """
    kink_threshold = 4.0 * step
    resamples = 0
    arrays = [np.asarray(a, dtype=np.float64) for a in leaves]
    while True:
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = graph_fn(tensors)
        if out.data.size != 1:
            raise ValueError(f"grad_check: graph must produce a scalar, got {out.shape}")
        margin = _min_kink_margin(out)
        if margin > kink_threshold:
            break
        if sampler is None or resamples >= max_resamples:
            raise NonDifferentiableProbe(
                f"probe within {margin:.3g} of a kink (threshold {kink_threshold:.3g})"
            )
        resamples += 1
        arrays = [np.asarray(a, dtype=np.float64) for a in sampler()]

    out.backward()
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def forward_value(probe: list[np.ndarray]) -> float:
        with no_grad():
            return float(graph_fn([Tensor(a) for a in probe]).data.reshape(()))

    max_rel = 0.0
    for li, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        work = [a.copy() for a in arrays]
        flat = work[li].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = forward_value(work)
            flat[idx] = orig - step
            f_minus = forward_value(work)
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[li]), np.abs(numeric)), 1.0)
        rel = np.abs(analytic[li] - numeric) / denom
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))

    return GradCheckResult(
        max_rel_error=max_rel,
        kink_margin=margin,
        resamples=resamples,
        passed=max_rel < tolerance,
    )


def _scalarize(t: Tensor) -> Tensor:
    """Deterministic weighted sum of all elements, built from primitive ops."""
    from .tensor import add, reshape, scale, split

    size = t.data.size
    parts = split(reshape(t, (size,)), size, axis=0)
    acc = reshape(parts[0], ())
    weight = 1.0
    for part in parts[1:]:
        weight *= 0.97
        acc = add(acc, scale(reshape(part, ()), weight))
    return acc


def _battery_cases(seed: int):
    """(name, graph_fn, leaf sampler) triples covering every trainable kernel."""
    from . import ops
    from .losses import batch_hard_triplet_loss, cross_entropy_loss

    rng = np.random.default_rng(seed)
    mean = rng.normal(size=3) * 0.1
    var = 1.0 + 0.2 * rng.random(3)
    ce_labels = rng.integers(0, 5, size=4)
    tri_labels = np.repeat(np.arange(3), 2)

    def conv(ts):
        x, w, b = ts
        return _scalarize(ops.conv2d(x, w, b, stride=(2, 1), padding=(1, 1)))

    def bn(training):
        def fn(ts):
            x, g, b = ts
            return _scalarize(
                ops.batchnorm(x, g, b, mean.copy(), var.copy(), training=training)
            )

        return fn

    def maxpool(ts):
        return _scalarize(ops.maxpool2d(ts[0], kernel=(2, 2), stride=(2, 1), padding=(1, 0)))

    def avgpool(ts):
        return _scalarize(ops.avgpool2d(ts[0], kernel=(2, 2), stride=(1, 2), padding=(0, 1)))

    def gmp(ts):
        return _scalarize(ops.global_max_pool(ts[0]))

    def lin(ts):
        return _scalarize(ops.linear(ts[0], ts[1], ts[2]))

    def relu_fn(ts):
        return _scalarize(ts[0].relu())

    def ce(ts):
        return cross_entropy_loss(ts[0], ce_labels)

    def triplet(ts):
        return batch_hard_triplet_loss(ts[0], tri_labels, margin=0.6)

    def stack(ts):
        x, w, b, g, bb, lw, lb = ts
        h = ops.conv2d(x, w, b, stride=(2, 2), padding=(1, 1))
        h = ops.batchnorm(h, g, bb, mean.copy(), var.copy(), training=False)
        h = ops.flatten_spatial(ops.global_max_pool(h.relu()))
        return cross_entropy_loss(ops.linear(h, lw, lb), ce_labels[:2])

    def shapes(*dims):
        return lambda: [rng.normal(size=s) for s in dims]

    return [
        ("conv2d", conv, shapes((2, 2, 5, 4), (3, 2, 3, 3), (3,))),
        ("batchnorm-train", bn(True), shapes((2, 3, 4, 3), (3,), (3,))),
        ("batchnorm-eval", bn(False), shapes((2, 3, 4, 3), (3,), (3,))),
        ("maxpool2d", maxpool, shapes((2, 3, 6, 5),)),
        ("avgpool2d", avgpool, shapes((2, 3, 5, 6),)),
        ("global-max-pool", gmp, shapes((2, 4, 3, 3),)),
        ("linear", lin, shapes((3, 5), (4, 5), (4,))),
        ("relu", relu_fn, shapes((3, 4),)),
        ("cross-entropy", ce, shapes((4, 5),)),
        ("batch-hard-triplet", triplet, shapes((6, 5),)),
        ("conv-bn-pool-linear-ce", stack,
         shapes((2, 2, 6, 4), (3, 2, 3, 3), (3,), (3,), (3,), (5, 3), (5,))),
    ]


def run_battery(seed: int = 0, tolerance: float = 1e-4, verbose: bool = False) -> list[str]:
    """Gradient-check every differentiable kernel; returns the failing names."""
    failures = []
    for name, fn, sampler in _battery_cases(seed):
        result = grad_check(fn, sampler(), tolerance=tolerance, sampler=sampler)
        if not result.passed:
            failures.append(name)
        if verbose:
            status = "PASS" if result.passed else "FAIL"
            extra = f" (resampled {result.resamples})" if result.resamples else ""
            print(f"{name}: max relative error {result.max_rel_error:.3e} {status}{extra}")
    if verbose:
        print(f"{len(failures)} of {len(_battery_cases(seed))} kernels failed"
              if failures else "all kernels pass")
    return failures
