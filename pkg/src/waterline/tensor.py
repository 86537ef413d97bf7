"""Dense float64 operators with reverse-mode gradients.

Activations are laid out ``C x H x W`` and convolution kernels
``Cout x Cin/groups x kH x kW``. Every forward op is a pure function of its
arguments; the matching ``*_vjp`` takes the same operands plus the upstream
gradient and returns a dict of gradients keyed by operand role.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

DTYPE = np.float64

OpGrad = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an op's contract."""


class NonFiniteError(ValueError):
    """Raised when an op meets NaN or infinite values it cannot normalize."""


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Return ``data`` as a float64 array, optionally reshaped to ``shape``."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(
                f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    return arr


def _require_chw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be C x H x W, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def _pads(size: int, k: int, stride: int, padding: str):
    if padding == "valid":
        if size < k:
            raise ShapeError(
                f"kernel extent {k} exceeds input extent {size} under valid padding")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv_geometry(x, w, b, stride, groups, padding):
    _require_chw(x)
    if w.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (out, in/groups, kH, kW), got {w.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if groups < 1:
        raise ShapeError(f"groups must be >= 1, got {groups}")
    c, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if c % groups:
        raise ShapeError(f"input channels {c} not divisible by groups {groups}")
    if cout % groups:
        raise ShapeError(f"kernel out-channels {cout} not divisible by groups {groups}")
    if cin_g != c // groups:
        raise ShapeError(
            f"kernel in-channels per group {cin_g} != input channels / groups = {c // groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias length {b.shape} != kernel out-channels {cout}")
    pt, pb, oh = _pads(h, kh, stride, padding)
    pl, pr, ow = _pads(wd, kw, stride, padding)
    return (pt, pb, pl, pr), (oh, ow)


def _im2col(x, kh, kw, stride, pads, out_hw, groups):
    pt, pb, pl, pr = pads
    oh, ow = out_hw
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr))) if any(pads) else x
    cols = np.empty((c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(groups, (c // groups) * kh * kw, oh * ow)


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None,
           stride: int = 1, groups: int = 1, padding: str = "same") -> np.ndarray:
    """Grouped 2-D cross-correlation plus bias.

    ``groups=1`` is a standard convolution, ``groups=C`` with one kernel per
    channel is depthwise. ``same`` padding zero-pads so that the output
    extent is ``ceil(H / stride)``.
    """
    pads, (oh, ow) = _conv_geometry(x, w, b, stride, groups, padding)
    cout, cin_g, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pads, (oh, ow), groups)
    wg = w.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(wg, cols).reshape(cout, oh, ow)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_vjp(x, w, b, stride, groups, padding, gout) -> OpGrad:
    """Gradients of :func:`conv2d` with respect to input, kernel and bias."""
    pads, (oh, ow) = _conv_geometry(x, w, b, stride, groups, padding)
    cout, cin_g, kh, kw = w.shape
    if gout.shape != (cout, oh, ow):
        raise ShapeError(
            f"upstream gradient shape {gout.shape} != output shape {(cout, oh, ow)}")
    cols = _im2col(x, kh, kw, stride, pads, (oh, ow), groups)
    g = gout.reshape(groups, cout // groups, oh * ow)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).reshape(w.shape)
    wg = w.reshape(groups, cout // groups, cin_g * kh * kw)
    gcols = np.matmul(wg.transpose(0, 2, 1), g).reshape(x.shape[0], kh, kw, oh, ow)
    pt, pb, pl, pr = pads
    c, h, wd = x.shape
    gxp = np.zeros((c, h + pt + pb, wd + pl + pr), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
    grads = {"input": gxp[:, pt:pt + h, pl:pl + wd].copy(), "kernel": gw}
    if b is not None:
        grads["bias"] = gout.sum(axis=(1, 2))
    return grads


# ---------------------------------------------------------------------------
# channel permutation, pooling, dense

def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel for every output channel of :func:`channel_shuffle`."""
    if groups < 1 or channels % groups:
        raise ShapeError(f"channels {channels} not divisible by groups {groups}")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Transpose the ``groups x (C/groups)`` channel grid."""
    _require_chw(x)
    return x[shuffle_permutation(x.shape[0], groups)]


def channel_shuffle_vjp(groups: int, gout: np.ndarray) -> OpGrad:
    perm = shuffle_permutation(gout.shape[0], groups)
    gx = np.empty_like(gout)
    gx[perm] = gout
    return {"input": gx}


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _require_chw(x)
    return x.mean(axis=(1, 2), keepdims=True)


def global_avg_pool_vjp(input_shape, gout: np.ndarray) -> OpGrad:
    c, h, w = input_shape
    if gout.shape != (c, 1, 1):
        raise ShapeError(f"upstream gradient shape {gout.shape} != {(c, 1, 1)}")
    return {"input": np.broadcast_to(gout / (h * w), (c, h, w)).copy()}


def fully_connected(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Affine map ``w @ x + b`` on a flat vector; ``w`` is ``out x in``."""
    x = np.ravel(x)
    if w.ndim != 2 or w.shape[1] != x.size:
        raise ShapeError(f"weight columns {w.shape} do not match input length {x.size}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias length {b.shape} != weight rows {w.shape[0]}")
    out = w @ x
    if b is not None:
        out = out + b
    return out


def fully_connected_vjp(x, w, b, gout) -> OpGrad:
    x = np.ravel(x)
    if gout.shape != (w.shape[0],):
        raise ShapeError(f"upstream gradient shape {gout.shape} != {(w.shape[0],)}")
    grads = {"input": w.T @ gout, "weight": np.outer(gout, x)}
    if b is not None:
        grads["bias"] = gout.copy()
    return grads


# ---------------------------------------------------------------------------
# activations

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x, gout) -> OpGrad:
    return {"input": gout * (x > 0)}


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_vjp(y, gout) -> OpGrad:
    """``y`` is the forward output."""
    return {"input": gout * y * (1.0 - y)}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax input must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_vjp(y, gout) -> OpGrad:
    """``y`` is the forward output."""
    return {"input": y * (gout - np.dot(gout.ravel(), y.ravel()))}


# ---------------------------------------------------------------------------
# elementwise structure

def scale_channels(x: np.ndarray, scales: np.ndarray) -> np.ndarray:
    _require_chw(x)
    scales = np.ravel(scales)
    if scales.size != x.shape[0]:
        raise ShapeError(f"scales length {scales.size} != channels {x.shape[0]}")
    return x * scales[:, None, None]


def scale_channels_vjp(x, scales, gout) -> OpGrad:
    scales = np.ravel(scales)
    return {"input": gout * scales[:, None, None],
            "scales": (gout * x).sum(axis=(1, 2))}


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def residual_add_vjp(gout) -> OpGrad:
    return {"a": gout.copy(), "b": gout.copy()}


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    _require_chw(x)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_nearest_vjp(factor: int, gout: np.ndarray) -> OpGrad:
    c, h, w = gout.shape
    g = gout.reshape(c, h // factor, factor, w // factor, factor)
    return {"input": g.sum(axis=(2, 4))}


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(fn: Callable[[np.ndarray], float], x: np.ndarray,
                      analytic: np.ndarray, eps: float = 1e-5,
                      indices: Optional[Sequence[int]] = None) -> float:
    """Worst relative error between ``analytic`` and central differences of ``fn``.

    ``fn`` must map an array shaped like ``x`` to a scalar. ``indices``
    restricts the check to those flat positions (all elements by default).
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator. ``x`` is restored before returning.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = np.asarray(analytic, dtype=DTYPE)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} != operand shape {x.shape}")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("operand must be a contiguous array that can be perturbed in place")
    ga = analytic.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(fn(x))
        flat[i] = orig - eps
        fm = _scalar(fn(x))
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        denom = max(abs(ga[i]), abs(num), 1e-8)
        worst = max(worst, abs(ga[i] - num) / denom)
    return worst


def _scalar(v) -> float:
    arr = np.asarray(v)
    if arr.size != 1:
        raise ValueError(f"function under check must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(()))
