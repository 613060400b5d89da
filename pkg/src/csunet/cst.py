"""Window attention machinery and the convolutional Swin transformer block.

Feature maps here are channels-last ``(N, H, W, d)``.  Block parameters live
in a flat ``{local_name: Tensor}`` mapping; :func:`init_block_params` builds
one and documents the names.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError, Tensor

MASK_VALUE = -1e9

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class WindowGrid:
    """Tiling of an ``height x width`` map into ``window_size`` squares."""

    window_size: int
    shift: int
    height: int
    width: int

    def __post_init__(self):
        m = self.window_size
        if m < 1:
            raise ConfigError(f"window_size must be >= 1, got {m}")
        if self.height % m or self.width % m:
            raise ShapeError(f"feature map {self.height}x{self.width} not divisible by window {m}")
        if not 0 <= self.shift < m:
            raise ConfigError(f"shift must lie in [0, {m}), got {self.shift}")

    @property
    def num_windows(self) -> int:
        return (self.height // self.window_size) * (self.width // self.window_size)

    @classmethod
    def for_map(cls, window_size: int, height: int, width: int, shifted: bool) -> "WindowGrid":
        return cls(window_size, window_size // 2 if shifted else 0, height, width)


@dataclass(frozen=True)
class BlockSpec:
    """Static structure of one transformer block.

    The boolean switches select the convolutional or the Swin-style variant
    of each sub-module, which is how the ablation variants are expressed.
    """

    dim: int
    heads: int
    window_size: int
    conv_projection: bool = True
    use_bias_table: bool = False
    conv_attention_refine: bool = True
    use_dsf: bool = True
    mlp_ratio: int = 4
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


# -- windows -----------------------------------------------------------------


def _check_map(x: Tensor, grid: WindowGrid) -> None:
    if x.ndim != 4 or x.shape[1] != grid.height or x.shape[2] != grid.width:
        raise ShapeError(f"expected (N, {grid.height}, {grid.width}, d) map, got {x.shape}")


def window_partition(x: Tensor, grid: WindowGrid) -> Tensor:
    """``(N, H, W, d) -> (N * nH * nW, M, M, d)``, windows in row-major tile order."""
    _check_map(x, grid)
    n, h, w, d = x.shape
    m = grid.window_size
    t = ops.reshape(x, (n, h // m, m, w // m, m, d))
    t = ops.permute(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (n * (h // m) * (w // m), m, m, d))


def window_reverse(wins: Tensor, grid: WindowGrid) -> Tensor:
    m = grid.window_size
    h, w = grid.height, grid.width
    nw = grid.num_windows
    if wins.ndim != 4 or wins.shape[1:3] != (m, m) or wins.shape[0] % nw:
        raise ShapeError(f"window tensor {wins.shape} does not fit grid {grid}")
    n, d = wins.shape[0] // nw, wins.shape[3]
    t = ops.reshape(wins, (n, h // m, w // m, m, m, d))
    t = ops.permute(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (n, h, w, d))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Torus roll of a channels-last map by ``(dy, dx)``."""
    if dy == 0 and dx == 0:
        return x
    return ops.roll(x, (dy, dx), (1, 2))


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """``(M*M, M*M)`` indices into a ``(2M-1)**2`` relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def region_ids(grid: WindowGrid) -> np.ndarray:
    """Per-pixel id of the pre-shift region each position of the rolled map came from."""
    m, s = grid.window_size, grid.shift
    img = np.zeros((grid.height, grid.width), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    cnt = 0
    for hs in bands:
        for ws in bands:
            img[hs, ws] = cnt
            cnt += 1
    return img


@lru_cache(maxsize=None)
def shift_attention_mask(grid: WindowGrid) -> np.ndarray | None:
    """``(nW, M*M, M*M)`` additive mask, ``MASK_VALUE`` across regions; None if unshifted."""
    if grid.shift == 0:
        return None
    m = grid.window_size
    ids = region_ids(grid)
    wins = ids.reshape(grid.height // m, m, grid.width // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    mask = np.where(wins[:, :, None] != wins[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


# -- attention ---------------------------------------------------------------


def conv_qkv(win: Tensor, p: Params) -> tuple[Tensor, Tensor, Tensor]:
    """Per-window depthwise 3x3 conv + layer norm for each of q, k, v.

    Zero padding happens at the window border, so windows never see each
    other.  Returns three ``(B_w, M*M, d)`` token tensors.
    """
    b, m, _, d = win.shape
    res = []
    for name in ("q", "k", "v"):
        t = ops.depthwise_conv2d(win, p[f"{name}_conv.weight"], None, padding=1)
        t = ops.layer_norm(t, p[f"{name}_norm.weight"], p[f"{name}_norm.bias"])
        res.append(ops.reshape(t, (b, m * m, d)))
    return res[0], res[1], res[2]


def linear_qkv(win: Tensor, p: Params) -> tuple[Tensor, Tensor, Tensor]:
    b, m, _, d = win.shape
    tokens = ops.reshape(win, (b, m * m, d))
    qkv = ops.linear(tokens, p["qkv.weight"], p["qkv.bias"])
    return qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]


def relative_bias(table: Tensor, m: int) -> Tensor:
    """Gather a ``((2M-1)**2, heads)`` table into ``(heads, M*M, M*M)`` biases."""
    idx = relative_position_index(m)
    b = ops.take(table, idx.reshape(-1), axis=0)
    b = ops.reshape(b, (m * m, m * m, table.shape[1]))
    return ops.permute(b, (2, 0, 1))


def window_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention inside each window.

    ``q, k, v`` are ``(B_w, T, d)``; ``mask`` is ``(nW, T, T)`` and repeats
    every ``nW`` windows along the batch.  Returns the ``(B_w, T, d)`` output
    and the ``(B_w, heads, T, T)`` attention weights.
    """
    bw, t, d = q.shape
    dh = d // heads

    def split(x):
        return ops.permute(ops.reshape(x, (bw, t, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    logits = ops.scalar_mul(ops.matmul(qh, ops.permute(kh, (0, 1, 3, 2))), dh**-0.5)
    if bias is not None:
        logits = ops.add(logits, bias)
    if mask is not None:
        nw = mask.shape[0]
        logits = ops.reshape(logits, (bw // nw, nw, heads, t, t))
        logits = ops.add(logits, Tensor(mask[None, :, None].astype(logits.dtype)))
        logits = ops.reshape(logits, (bw, heads, t, t))
    attn = ops.softmax(logits, axis=-1)
    out = ops.matmul(attn, vh)
    out = ops.reshape(ops.permute(out, (0, 2, 1, 3)), (bw, t, d))
    return out, attn


def w_cmsa(x: Tensor, p: Params, grid: WindowGrid, spec: BlockSpec) -> Tensor:
    """(Shifted-)window convolutional multi-head self-attention on ``(N, H, W, d)``."""
    _check_map(x, grid)
    m, s = grid.window_size, grid.shift
    if s:
        x = cyclic_shift(x, -s, -s)
    wins = window_partition(x, grid)
    bw, _, _, d = wins.shape
    q, k, v = conv_qkv(wins, p) if spec.conv_projection else linear_qkv(wins, p)
    bias = relative_bias(p["rel_bias_table"], m) if spec.use_bias_table else None
    out, _ = window_attention(q, k, v, spec.heads, bias, shift_attention_mask(grid))
    if spec.conv_attention_refine:
        out = ops.depthwise_conv2d(
            ops.reshape(out, (bw, m, m, d)), p["refine.weight"], p["refine.bias"], padding=1
        )
    else:
        out = ops.reshape(ops.linear(out, p["proj.weight"], p["proj.bias"]), (bw, m, m, d))
    y = window_reverse(out, grid)
    if s:
        y = cyclic_shift(y, s, s)
    return y


# -- feed-forward -------------------------------------------------------------


def dsf(x: Tensor, p: Params) -> Tensor:
    """7x7 depthwise conv -> LN -> pointwise 4d -> GELU -> pointwise d (no residual)."""
    t = ops.depthwise_conv2d(x, p["dw.weight"], p["dw.bias"], padding=3)
    t = ops.layer_norm(t, p["norm.weight"], p["norm.bias"])
    t = ops.gelu(ops.linear(t, p["pw1.weight"], p["pw1.bias"]))
    return ops.linear(t, p["pw2.weight"], p["pw2.bias"])


def mlp(x: Tensor, p: Params) -> Tensor:
    """Swin-style token MLP: LN -> linear 4d -> GELU -> linear d (no residual)."""
    t = ops.layer_norm(x, p["norm.weight"], p["norm.bias"])
    t = ops.gelu(ops.linear(t, p["fc1.weight"], p["fc1.bias"]))
    return ops.linear(t, p["fc2.weight"], p["fc2.bias"])


# -- blocks ------------------------------------------------------------------


def sub(params: Params, prefix: str) -> dict[str, Tensor]:
    """View of ``params`` under ``prefix.`` with the prefix stripped."""
    pre = prefix + "."
    return {k[len(pre) :]: v for k, v in params.items() if k.startswith(pre)}


def cst_block(x: Tensor, p: Params, grid: WindowGrid, spec: BlockSpec) -> Tensor:
    """``z = x + ls_attn * attn(LN(x))``; ``out = z + ls_ffn * ffn(z)``."""
    h = ops.layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    z = ops.add(x, ops.mul(w_cmsa(h, sub(p, "attn"), grid, spec), p["ls_attn"]))
    ffn = dsf(z, sub(p, "dsf")) if spec.use_dsf else mlp(z, sub(p, "mlp"))
    return ops.add(z, ops.mul(ffn, p["ls_ffn"]))


def cst_layer(x: Tensor, blocks: tuple[Params, Params], spec: BlockSpec) -> Tensor:
    """W-CMSA block followed by its shifted twin."""
    _, h, w, _ = x.shape
    # a single window covering the map cannot shift
    shifted = min(h, w) > spec.window_size
    x = cst_block(x, blocks[0], WindowGrid.for_map(spec.window_size, h, w, False), spec)
    return cst_block(x, blocks[1], WindowGrid.for_map(spec.window_size, h, w, shifted), spec)


# -- parameters ---------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def _ln(d: int) -> dict[str, np.ndarray]:
    return {"weight": np.ones(d), "bias": np.zeros(d)}


def _linear(rng, din: int, dout: int, bias: bool = True) -> dict[str, np.ndarray]:
    out = {"weight": trunc_normal(rng, (din, dout), 1.0 / np.sqrt(din))}
    if bias:
        out["bias"] = np.zeros(dout)
    return out


def _dwconv(rng, d: int, k: int, bias: bool = True) -> dict[str, np.ndarray]:
    out = {"weight": trunc_normal(rng, (d, 1, k, k), 1.0 / k)}
    if bias:
        out["bias"] = np.zeros(d)
    return out


def _flatten(prefix: str, tree: dict) -> dict[str, np.ndarray]:
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            flat.update(_flatten(name, v))
        else:
            flat[name] = v
    return flat


def init_block_params(spec: BlockSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters for one block, keyed by local dotted name.

    Names: ``norm1.*``; ``attn.{q,k,v}_conv.weight`` + ``attn.{q,k,v}_norm.*``
    (or ``attn.qkv.*``); ``attn.rel_bias_table`` when enabled;
    ``attn.refine.*`` (or ``attn.proj.*``); ``dsf.{dw,norm,pw1,pw2}.*`` (or
    ``mlp.{norm,fc1,fc2}.*``); ``ls_attn``, ``ls_ffn``.
    """
    d = spec.dim
    attn: dict = {}
    if spec.conv_projection:
        for n in "qkv":
            attn[f"{n}_conv"] = _dwconv(rng, d, 3, bias=False)
            attn[f"{n}_norm"] = _ln(d)
    else:
        attn["qkv"] = _linear(rng, d, 3 * d)
    if spec.use_bias_table:
        attn["rel_bias_table"] = trunc_normal(rng, ((2 * spec.window_size - 1) ** 2, spec.heads), 0.02)
    if spec.conv_attention_refine:
        attn["refine"] = _dwconv(rng, d, 3)
    else:
        attn["proj"] = _linear(rng, d, d)
    hidden = spec.mlp_ratio * d
    if spec.use_dsf:
        ffn = {"dsf": {"dw": _dwconv(rng, d, 7), "norm": _ln(d), "pw1": _linear(rng, d, hidden), "pw2": _linear(rng, hidden, d)}}
    else:
        ffn = {"mlp": {"norm": _ln(d), "fc1": _linear(rng, d, hidden), "fc2": _linear(rng, hidden, d)}}
    tree = {
        "norm1": _ln(d),
        "attn": attn,
        **ffn,
        "ls_attn": np.full(d, spec.layer_scale_init),
        "ls_ffn": np.full(d, spec.layer_scale_init),
    }
    return {k: Tensor(v.astype(dtype), name=k) for k, v in _flatten("", tree).items()}
