"""Differentiable primitives.

Each op computes its forward value with numpy and records a closure mapping
the output gradient to input gradients.  Dtypes follow the inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ConfigError, ShapeError, Tensor, as_tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), bw, "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scalar_mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_result(out, (x,), bw, "gelu")


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scalar_mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from e
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def slice(x: Tensor, idx) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(x.data[idx], (x,), bw, "slice")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=axis)

    def bw(g):
        res = []
        for i in range(len(xs)):
            sl = [builtins.slice(None)] * g.ndim
            sl[axis] = builtins.slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return res

    return make_result(out, xs, bw, "concat")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    neg = tuple(-s for s in shifts)
    return make_result(
        np.roll(x.data, shifts, axis=axes), (x,), lambda g: (np.roll(g, neg, axis=axes),), "roll"
    )


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis with integer indices (scatter-add backward)."""
    indices = np.asarray(indices)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return make_result(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def pad_hw(x: Tensor, pad: int, channels_last: bool = True) -> Tensor:
    if pad == 0:
        return x
    if channels_last:
        widths = ((0, 0), (pad, pad), (pad, pad), (0, 0))
        crop = (builtins.slice(None), builtins.slice(pad, -pad), builtins.slice(pad, -pad))
    else:
        widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
        crop = (builtins.slice(None), builtins.slice(None), builtins.slice(pad, -pad), builtins.slice(pad, -pad))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[crop],), "pad")


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``w`` has shape ``(d_in, d_out)``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(*lead, wd.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g2.sum(axis=0))
        return res

    return make_result(out, inputs, bw, "linear")


# -- normalization / softmax ---------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased variance estimator."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def cross_entropy_with_logits(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Mean over all non-class positions of ``-log softmax(logits)[target]``."""
    ld = logits.data
    target = np.asarray(target)
    axis = axis % ld.ndim
    k = ld.shape[axis]
    expect = ld.shape[:axis] + ld.shape[axis + 1 :]
    if target.shape != expect:
        raise ShapeError(f"cross_entropy: logits {ld.shape} vs target {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ShapeError(f"cross_entropy: target ids outside [0, {k})")
    shifted = ld - ld.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    onehot = np.moveaxis(np.eye(k, dtype=ld.dtype)[target], -1, axis)
    count = target.size
    loss = -(logp * onehot).sum() / count

    def bw(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return make_result(np.asarray(loss, dtype=ld.dtype), (logits,), bw, "cross_entropy")


# -- convolutions ---------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding.

    ``w`` has shape ``(C_out, C_in // groups, kh, kw)``.  The depthwise case
    (``groups == C_in == C_out``, stride 1) takes a shift-and-add fast path.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd_ = x.shape
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: channels in={cin}/out={cout} not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ShapeError(f"conv2d: weight {w.shape} does not match input {x.shape} with groups={groups}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} < 1 for input {x.shape}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")

    if groups == cin == cout and stride == 1:
        y = depthwise_conv2d(permute(x, (0, 2, 3, 1)), w, bias, padding)
        return permute(y, (0, 3, 1, 2))
    if groups == 1:
        return _conv2d_dense(x, w, bias, stride, padding)
    # grouped: split channels, run each group densely, stitch back
    outs = []
    og = cout // groups
    for gi in range(groups):
        xs = slice(x, (builtins.slice(None), builtins.slice(gi * cpg, (gi + 1) * cpg)))
        ws = slice(w, builtins.slice(gi * og, (gi + 1) * og))
        bs = None if bias is None else slice(bias, builtins.slice(gi * og, (gi + 1) * og))
        outs.append(_conv2d_dense(xs, ws, bs, stride, padding))
    return concat(outs, axis=1)


def _conv2d_dense(x: Tensor, w: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    xd, wd = x.data, w.data
    n, cin, h, wdt = xd.shape
    cout, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wdt, kw, stride, padding)
    # (N, C, Ho, Wo, kh, kw) view over the padded input
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    w2 = wd.reshape(cout, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return res

    return make_result(out, inputs, bw, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 depthwise conv on channels-last input ``(N, H, W, C)``.

    ``w`` uses the conv2d layout ``(C, 1, kh, kw)``.
    """
    n, h, wdt, c = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {w.shape} vs input channels {c}")
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = h + 2 * padding - kh + 1, wdt + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv2d: output extent {ho}x{wo} < 1")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    k = w.data[:, 0].transpose(1, 2, 0)  # (kh, kw, C)
    out = np.zeros((n, ho, wo, c), dtype=np.result_type(xd, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + ho, j : j + wo, :] * k[i, j]
    if bias is not None:
        out += bias.data
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += g * k[i, j]
            gx = gxp[:, padding : padding + h, padding : padding + wdt] if padding else gxp
        if w.requires_grad:
            gk = np.empty_like(k)
            g2 = g.reshape(-1, c)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = np.einsum("pc,pc->c", g2, xp[:, i : i + ho, j : j + wo, :].reshape(-1, c))
            gw = gk.transpose(2, 0, 1)[:, None]
        res = [gx, gw]
        if bias is not None:
            res.append(g.reshape(-1, c).sum(axis=0))
        return res

    return make_result(out, inputs, bw, "depthwise_conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed conv (adjoint of :func:`conv2d`), NCHW, weight ``(C_in, C_out, kh, kw)``.

    Output extent is ``(H - 1) * stride - 2 * padding + kh``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    n, cin, h, wdt = xd.shape
    _, cout, kh, kw = wd.shape
    hf, wf = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent {ho}x{wo} < 1")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} vs {cout} output channels")
    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    # (N*H*W, C_out, kh, kw): each input pixel's contribution stamp
    stamps = (x2 @ wd.reshape(cin, -1)).reshape(n, h, wdt, cout, kh, kw)
    full = np.zeros((n, cout, hf, wf), dtype=stamps.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * wdt : stride] += stamps[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, padding : padding + ho, padding : padding + wo] if padding else full
    if bias is not None:
        out = out + bias.data[:, None, None]
    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gst = np.empty((n, h, wdt, cout, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gst[:, :, :, :, i, j] = gf[
                    :, :, i : i + stride * h : stride, j : j + stride * wdt : stride
                ].transpose(0, 2, 3, 1)
        gs2 = gst.reshape(n * h * wdt, -1)
        gx = (gs2 @ wd.reshape(cin, -1).T).reshape(n, h, wdt, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ gs2).reshape(wd.shape) if w.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return make_result(out, inputs, bw, "conv_transpose2d")
