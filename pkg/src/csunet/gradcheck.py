"""Central finite-difference gradient verification (float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``.

    Normalizing by the gradient's overall scale keeps entries that are
    legitimately ~0 from turning finite-difference noise into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), floor)
    return float(np.abs(a - n).max()) / scale


def numeric_grad(
    fn: Callable[[], Tensor],
    t: Tensor,
    indices: Sequence[tuple[int, ...]] | None = None,
    h: float = 1e-6,
) -> np.ndarray:
    """d fn() / d t by central differences, either full or at ``indices``.

    ``fn`` must re-read ``t.data`` on every call.
    """
    flat = t.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [int(np.ravel_multi_index(ix, t.shape)) for ix in indices]
    out = np.empty(len(positions))
    for k, p in enumerate(positions):
        orig = flat[p]
        flat[p] = orig + h
        fp = float(fn().data.sum())
        flat[p] = orig - h
        fm = float(fn().data.sum())
        flat[p] = orig
        out[k] = (fp - fm) / (2 * h)
    return out if indices is not None else out.reshape(t.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Compare backprop gradients of ``sum(fn())`` with finite differences.

    The gradients of all ``inputs`` form one vector for the error, so an
    input whose gradient is exactly zero (a softmax-invariant shift, say)
    is judged against the op's overall gradient scale.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.sum().backward()
    analytic, numeric = [], []
    for t in inputs:
        analytic.append((t.grad if t.grad is not None else np.zeros_like(t.data)).ravel())
        numeric.append(numeric_grad(fn, t, h=h).ravel())
    return rel_error(np.concatenate(analytic), np.concatenate(numeric), floor)


def check_sampled(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int,
    rng: np.random.Generator,
    h: float = 1e-6,
    floor: float = 1e-8,
) -> tuple[float, list[tuple[str, tuple[int, ...], float, float]]]:
    """Check ``n_samples`` randomly chosen scalar entries across ``params``.

    Entries are drawn uniformly over all scalars.  The error is normalized
    by the largest sampled gradient, as in :func:`rel_error`.  Returns it
    with one ``(name, index, analytic, numeric)`` row per sample.
    """
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    for k in names:
        params[k].requires_grad = True
        params[k].grad = None
    fn().backward()
    picks = rng.choice(int(sizes.sum()), size=n_samples, replace=False)
    offsets = np.cumsum(sizes)
    rows = []
    for p in sorted(picks):
        which = int(np.searchsorted(offsets, p, side="right"))
        name = names[which]
        local = int(p - (offsets[which - 1] if which else 0))
        t = params[name]
        ix = tuple(int(i) for i in np.unravel_index(local, t.shape))
        a = float(t.grad[ix]) if t.grad is not None else 0.0
        n = float(numeric_grad(fn, t, [ix], h=h)[0])
        rows.append((name, ix, a, n))
    worst = rel_error(np.array([r[2] for r in rows]), np.array([r[3] for r in rows]), floor)
    return worst, rows
