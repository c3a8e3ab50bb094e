"""Forward and adjoint kernels for the convolutional building blocks.

Every kernel here is a per-sample map in eval mode (output for sample i
depends only on input sample i); train-mode batch normalization is the one
deliberate exception. Max-style ops resolve ties in favour of the first
occurrence in row-major scan order, and report how close the probe sits to
a tie through ``kink_margin``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, require_rank4

__all__ = [
    "conv2d",
    "batchnorm",
    "maxpool2d",
    "avgpool2d",
    "global_max_pool",
    "linear",
    "flatten_spatial",
]


def _out_size(size: int, k: int, s: int, p: int) -> int:
    span = size + 2 * p - k
    if span < 0:
        raise ShapeError(f"window {k} exceeds padded extent {size + 2 * p}")
    return span // s + 1


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols


def _col2im(gcols: np.ndarray, padded_shape, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gcols[:, :, i, j]
    return gxp


def _unpad(gxp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return gxp
    h, w = gxp.shape[2] - 2 * ph, gxp.shape[3] - 2 * pw
    return gxp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of an NCHW input with (cout, cin, kh, kw) filters.

    Output spatial size per axis is floor((size + 2p - k)/s) + 1. Linear in
    both the input and the weights.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    require_rank4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4, got {weight.data.ndim}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin}")
    sh, sw = stride
    ph, pw = padding
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise ShapeError("conv2d: kernel/stride must be >= 1 and padding >= 0")
    oh = _out_size(h, kh, sh, ph)
    ow = _out_size(w, kw, sw, pw)

    xp = _pad(x.data, ph, pw)
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)          # (n, c, kh, kw, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(cout, c * kh * kw)
    out = np.einsum("ok,nkp->nop", wmat, cols2, optimize=True).reshape(n, cout, oh, ow)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(n, cout, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", gmat, cols2, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols2 = np.einsum("ok,nop->nkp", wmat, gmat, optimize=True)
            gcols = gcols2.reshape(n, c, kh, kw, oh, ow)
            gxp = _col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
            x._accumulate(_unpad(gxp, ph, pw))

    return _make(out, parents, backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over the channel axis of 2-D or 4-D tensors.

    Train mode normalizes with batch statistics taken over all axes except
    the channel axis and updates the running buffers in place (population
    variance on both paths); eval mode is a deterministic per-sample affine
    map using the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes, shape = (0,), (1, -1)
    else:
        raise ShapeError(f"batchnorm expects rank 2 or 4, got {x.data.ndim}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm: {name} shape {t.shape} != ({c},)")
    if eps <= 0:
        raise ValueError("batchnorm: eps must be positive")

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
        if np.any(var + eps <= 0.0):
            raise ValueError("batchnorm: running variance plus eps must be positive")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.data.size // c

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(shape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(shape)
                gx = (gxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), backward)


def _pool_prepare(x: Tensor, kernel, stride, padding, op: str, fill: float):
    require_rank4(x, op)
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise ShapeError(f"{op}: kernel/stride must be >= 1 and padding >= 0")
    if ph >= kh or pw >= kw:
        raise ShapeError(f"{op}: padding must be smaller than the kernel")
    n, c, h, w = x.shape
    oh = _out_size(h, kh, sh, ph)
    ow = _out_size(w, kw, sw, pw)
    xp = _pad(x.data, ph, pw, value=fill)
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    return cols, xp.shape, (n, c, oh, ow), (kh, kw, sh, sw, ph, pw)


def maxpool2d(x: Tensor, kernel, stride, padding=(0, 0)) -> Tensor:
    """Windowed max; on ties the first window position in row-major order
    receives the full gradient."""
    x = as_tensor(x)
    cols, padded_shape, out_shape, (kh, kw, sh, sw, ph, pw) = _pool_prepare(
        x, kernel, stride, padding, "maxpool2d", fill=-np.inf
    )
    n, c, oh, ow = out_shape
    flat = cols.reshape(n, c, kh * kw, oh, ow)
    arg = flat.argmax(axis=2)                     # first occurrence on ties
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    finite = np.where(np.isfinite(flat), flat, -np.inf)
    top2 = np.partition(finite, kh * kw - 2, axis=2)[:, :, -2:] if kh * kw > 1 else None
    margin = float(np.min(top2[:, :, 1] - top2[:, :, 0])) if top2 is not None else np.inf
    if not np.isfinite(margin):
        margin = np.inf

    def backward(g):
        if x.requires_grad:
            gcols_flat = np.zeros_like(flat)
            np.put_along_axis(gcols_flat, arg[:, :, None], g[:, :, None], axis=2)
            gcols = gcols_flat.reshape(n, c, kh, kw, oh, ow)
            gxp = _col2im(gcols, padded_shape, kh, kw, sh, sw, oh, ow)
            x._accumulate(_unpad(gxp, ph, pw))

    return _make(out, (x,), backward, kink_margin=margin)


def avgpool2d(x: Tensor, kernel, stride, padding=(0, 0)) -> Tensor:
    """Windowed mean (padding zeros count toward the window size)."""
    x = as_tensor(x)
    cols, padded_shape, out_shape, (kh, kw, sh, sw, ph, pw) = _pool_prepare(
        x, kernel, stride, padding, "avgpool2d", fill=0.0
    )
    n, c, oh, ow = out_shape
    out = cols.mean(axis=(2, 3))
    inv = 1.0 / (kh * kw)

    def backward(g):
        if x.requires_grad:
            gcols = np.broadcast_to(g[:, :, None, None] * inv, (n, c, kh, kw, oh, ow))
            gxp = _col2im(np.ascontiguousarray(gcols), padded_shape, kh, kw, sh, sw, oh, ow)
            x._accumulate(_unpad(gxp, ph, pw))

    return _make(out, (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial maximum per (sample, channel), returned as (n, c, 1, 1)."""
    x = as_tensor(x)
    require_rank4(x, "global_max_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_max_pool: empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c, 1, 1)
    if h * w > 1:
        top2 = np.partition(flat, h * w - 2, axis=2)[:, :, -2:]
        margin = float(np.min(top2[:, :, 1] - top2[:, :, 0]))
    else:
        margin = np.inf

    def backward(g):
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[:, :, None], g.reshape(n, c, 1), axis=2)
            x._accumulate(gflat.reshape(x.shape))

    return _make(out, (x,), backward, kink_margin=margin)


def flatten_spatial(x: Tensor) -> Tensor:
    """(n, c, 1, 1) -> (n, c)."""
    x = as_tensor(x)
    require_rank4(x, "flatten_spatial")
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"flatten_spatial expects 1x1 maps, got {h}x{w}")
    from .tensor import reshape

    return reshape(x, (n, c))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map (n, d) @ weight.T + bias with weight shaped (out, d)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, parents, backward)
