"""Named float64 gradient-check cases for every differentiable op and module.

Each case builds small random inputs, and its function returns the op output
weighted by a fixed random tensor.  That keeps ops whose plain sum is
constant (softmax, for example) from passing trivially.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cst, network, ops
from .gradcheck import check_gradients, check_sampled
from .losses import combined_loss, soft_dice_loss
from .tensor import Tensor

TOLERANCES = {"elementary": 1e-6, "composite": 1e-5, "full": 1e-4}
FULL_SAMPLES = 20


@dataclass
class CaseResult:
    name: str
    tier: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tolerance


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        return Tensor(rng.standard_normal(shape))
    return Tensor(rng.uniform(lo, hi, shape))


def _params(tree: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in tree.items()}


def _weighted(rng, body: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """``body() * R`` with ``R`` drawn once on the first call."""
    cache: list[np.ndarray] = []

    def fn():
        out = body()
        if not cache:
            cache.append(rng.standard_normal(out.shape))
        return ops.mul(out, Tensor(cache[0]))

    return fn


def _block_params(spec: cst.BlockSpec, rng) -> dict[str, Tensor]:
    p = cst.init_block_params(spec, rng, np.float64)
    # O(1) layer scale and non-trivial norms so every branch carries gradient
    for k, v in p.items():
        if k.startswith("ls_") or k.endswith("norm.weight") or k.endswith("norm1.weight"):
            v.data = rng.uniform(0.5, 1.5, v.shape)
        elif k.endswith(".bias"):
            v.data = 0.1 * rng.standard_normal(v.shape)
    return p


# -- case builders: each returns (fn, inputs) ---------------------------------


def _elementwise(op):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        return (lambda: op(a, b)), [a, b]

    return build


def _unary(op, positive=False):
    def build(rng):
        x = _t(rng, 3, 5, lo=0.5, hi=2.0) if positive else _t(rng, 3, 5)
        return (lambda: op(x)), [x]

    return build


def _div(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4, lo=0.5, hi=2.0)
    return (lambda: ops.div(a, b)), [a, b]


def _reduce(op):
    def build(rng):
        x = _t(rng, 2, 3, 4)
        return (lambda: op(x, axis=1, keepdims=True)), [x]

    return build


def _reshape_permute(rng):
    x = _t(rng, 2, 3, 4)
    return (lambda: ops.permute(ops.reshape(x, (4, 3, 2)), (2, 0, 1))), [x]


def _slice(rng):
    x = _t(rng, 4, 6)
    return (lambda: ops.slice(x, (np.s_[1:3], np.s_[::2]))), [x]


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 5)
    return (lambda: ops.concat([a, b], axis=1)), [a, b]


def _roll(rng):
    x = _t(rng, 1, 4, 5, 2)
    return (lambda: ops.roll(x, (-2, 1), (1, 2))), [x]


def _take(rng):
    x = _t(rng, 5, 3)
    idx = np.array([[0, 4, 4], [2, 0, 1]])
    return (lambda: ops.take(x, idx, axis=0)), [x]


def _pad(rng):
    x = _t(rng, 1, 3, 3, 2)
    return (lambda: ops.pad_hw(x, 1)), [x]


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    return (lambda: ops.matmul(a, b)), [a, b]


def _linear(rng):
    x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
    return (lambda: ops.linear(x, w, b)), [x, w, b]


def _layer_norm(rng):
    x, g, b = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)
    return (lambda: ops.layer_norm(x, g, b)), [x, g, b]


def _softmax(rng):
    x = _t(rng, 3, 6)
    return (lambda: ops.softmax(x, axis=-1)), [x]


def _cross_entropy(rng):
    x = _t(rng, 2, 4, 3, 3)
    target = rng.integers(0, 4, (2, 3, 3))
    return (lambda: ops.cross_entropy_with_logits(x, target, axis=1)), [x]


def _conv2d(rng):
    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    return (lambda: ops.conv2d(x, w, b, stride=2, padding=1)), [x, w, b]


def _conv2d_grouped(rng):
    x, w, b = _t(rng, 1, 4, 5, 5), _t(rng, 6, 2, 3, 3), _t(rng, 6)
    return (lambda: ops.conv2d(x, w, b, stride=1, padding=1, groups=2)), [x, w, b]


def _depthwise(rng):
    x, w, b = _t(rng, 2, 5, 5, 3), _t(rng, 3, 1, 3, 3), _t(rng, 3)
    return (lambda: ops.depthwise_conv2d(x, w, b, padding=1)), [x, w, b]


def _conv_transpose(rng):
    x, w, b = _t(rng, 2, 3, 3, 4), _t(rng, 3, 2, 2, 2), _t(rng, 2)
    return (lambda: ops.conv_transpose2d(x, w, b, stride=2)), [x, w, b]


def _window_partition(rng):
    grid = cst.WindowGrid(2, 0, 4, 6)
    x = _t(rng, 1, 4, 6, 3)
    return (lambda: cst.window_reverse(ops.scalar_mul(cst.window_partition(x, grid), 1.0), grid)), [x]


def _cyclic_shift(rng):
    x = _t(rng, 1, 4, 4, 2)
    return (lambda: cst.cyclic_shift(x, -1, -1)), [x]


def _loss(rng):
    x = _t(rng, 2, 3, 4, 4)
    mask = rng.integers(0, 3, (2, 4, 4))
    return (lambda: combined_loss(x, mask)), [x]


def _dice(rng):
    x = _t(rng, 2, 3, 4, 4)
    mask = rng.integers(0, 3, (2, 4, 4))
    return (lambda: soft_dice_loss(x, mask)), [x]


def _attention_case(shift: int, **flags):
    def build(rng):
        spec = cst.BlockSpec(dim=4, heads=2, window_size=2, **flags)
        grid = cst.WindowGrid(2, shift, 4, 4)
        p = cst.sub(_block_params(spec, rng), "attn")
        x = _t(rng, 1, 4, 4, 4)
        return (lambda: cst.w_cmsa(x, p, grid, spec)), [x, *p.values()]

    return build


def _window_attention(rng):
    q, k, v = _t(rng, 2, 4, 4), _t(rng, 2, 4, 4), _t(rng, 2, 4, 4)
    bias = _t(rng, 2, 4, 4)
    return (lambda: cst.window_attention(q, k, v, 2, bias)[0]), [q, k, v, bias]


def _dsf(rng):
    spec = cst.BlockSpec(dim=4, heads=1, window_size=2)
    p = cst.sub(_block_params(spec, rng), "dsf")
    x = _t(rng, 1, 4, 4, 4)
    return (lambda: cst.dsf(x, p)), [x, *p.values()]


def _mlp(rng):
    spec = cst.BlockSpec(dim=4, heads=1, window_size=2, use_dsf=False)
    p = cst.sub(_block_params(spec, rng), "mlp")
    x = _t(rng, 1, 3, 3, 4)
    return (lambda: cst.mlp(x, p)), [x, *p.values()]


def _block(rng):
    spec = cst.BlockSpec(dim=4, heads=2, window_size=2, use_bias_table=True)
    grid = cst.WindowGrid(2, 1, 4, 4)
    p = _block_params(spec, rng)
    x = _t(rng, 1, 4, 4, 4)
    return (lambda: cst.cst_block(x, p, grid, spec)), [x, *p.values()]


def _embedding(rng):
    p = _params(
        {
            "conv1.weight": 0.5 * rng.standard_normal((2, 3, 3, 3)), "conv1.bias": 0.1 * rng.standard_normal(2),
            "conv2.weight": 0.5 * rng.standard_normal((2, 2, 3, 3)), "conv2.bias": 0.1 * rng.standard_normal(2),
            "norm.weight": rng.uniform(0.5, 1.5, 2), "norm.bias": 0.1 * rng.standard_normal(2),
            "conv3.weight": 0.5 * rng.standard_normal((4, 2, 3, 3)), "conv3.bias": 0.1 * rng.standard_normal(4),
            "conv4.weight": 0.5 * rng.standard_normal((4, 4, 3, 3)), "conv4.bias": 0.1 * rng.standard_normal(4),
        }
    )
    x = _t(rng, 1, 3, 8, 8)
    return (lambda: network.conv_token_embedding(x, p)), [x, *p.values()]


def _patch_merging(rng):
    p = _params({"weight": rng.standard_normal((8, 4))})
    x = _t(rng, 1, 4, 4, 2)
    return (lambda: network.patch_merging(x, p)), [x, *p.values()]


def _conv_upsample(rng):
    p = _params(
        {
            "norm.weight": rng.uniform(0.5, 1.5, 4), "norm.bias": 0.1 * rng.standard_normal(4),
            "weight": rng.standard_normal((4, 2, 2, 2)), "bias": 0.1 * rng.standard_normal(2),
        }
    )
    x = _t(rng, 1, 2, 3, 4)
    return (lambda: network.conv_upsample(x, p)), [x, *p.values()]


def _skip_conv(rng):
    p = _params(
        {
            "conv1.weight": 0.5 * rng.standard_normal((2, 4, 3, 3)), "conv1.bias": 0.1 * rng.standard_normal(2),
            "conv2.weight": 0.5 * rng.standard_normal((2, 2, 3, 3)), "conv2.bias": 0.1 * rng.standard_normal(2),
        }
    )
    up, skip = _t(rng, 1, 3, 3, 2), _t(rng, 1, 3, 3, 2)
    return (lambda: network.skip_conv(up, skip, p)), [up, skip, *p.values()]


def _linear_upsample(rng):
    p = _params(
        {"expand.weight": rng.standard_normal((4, 8)), "norm.weight": rng.uniform(0.5, 1.5, 2),
         "norm.bias": 0.1 * rng.standard_normal(2)}
    )
    x = _t(rng, 1, 2, 2, 4)
    return (lambda: network.linear_upsample(x, p)), [x, *p.values()]


def _patch_expansion(rng):
    p = _params(
        {"expand.weight": rng.standard_normal((2, 32)), "norm.weight": rng.uniform(0.5, 1.5, 2),
         "norm.bias": 0.1 * rng.standard_normal(2), "classifier.weight": rng.standard_normal((2, 3)),
         "classifier.bias": 0.1 * rng.standard_normal(3)}
    )
    x = _t(rng, 1, 1, 2, 2)
    return (lambda: network.patch_expansion(x, p)), [x, *p.values()]


CASES: dict[str, tuple[str, Callable]] = {
    "add": ("elementary", _elementwise(ops.add)),
    "sub": ("elementary", _elementwise(ops.sub)),
    "mul": ("elementary", _elementwise(ops.mul)),
    "div": ("elementary", _div),
    "exp": ("elementary", _unary(ops.exp)),
    "log": ("elementary", _unary(ops.log, positive=True)),
    "gelu": ("elementary", _unary(ops.gelu)),
    "sum": ("elementary", _reduce(ops.sum)),
    "mean": ("elementary", _reduce(ops.mean)),
    "reshape_permute": ("elementary", _reshape_permute),
    "slice": ("elementary", _slice),
    "concat": ("elementary", _concat),
    "roll": ("elementary", _roll),
    "take": ("elementary", _take),
    "pad": ("elementary", _pad),
    "matmul": ("elementary", _matmul),
    "linear": ("elementary", _linear),
    "layer_norm": ("elementary", _layer_norm),
    "softmax": ("elementary", _softmax),
    "cross_entropy": ("elementary", _cross_entropy),
    "conv2d": ("elementary", _conv2d),
    "conv2d_grouped": ("elementary", _conv2d_grouped),
    "depthwise_conv2d": ("elementary", _depthwise),
    "conv_transpose2d": ("elementary", _conv_transpose),
    "window_partition": ("elementary", _window_partition),
    "cyclic_shift": ("elementary", _cyclic_shift),
    "dice_loss": ("composite", _dice),
    "combined_loss": ("composite", _loss),
    "window_attention": ("composite", _window_attention),
    "w_cmsa": ("composite", _attention_case(0)),
    "sw_cmsa": ("composite", _attention_case(1, use_bias_table=True)),
    "w_msa_linear": ("composite", _attention_case(1, conv_projection=False, use_bias_table=True,
                                                  conv_attention_refine=False)),
    "dsf": ("composite", _dsf),
    "mlp": ("composite", _mlp),
    "cst_block": ("composite", _block),
    "conv_token_embedding": ("composite", _embedding),
    "patch_merging": ("composite", _patch_merging),
    "conv_upsample": ("composite", _conv_upsample),
    "skip_conv": ("composite", _skip_conv),
    "linear_upsample": ("composite", _linear_upsample),
    "patch_expansion": ("composite", _patch_expansion),
}


def run_case(name: str, seed: int = 0) -> CaseResult:
    """Gradient check of one named case; raises KeyError for unknown names."""
    tier, build = CASES[name]
    rng = np.random.default_rng(seed)
    fn, inputs = build(rng)
    err = check_gradients(_weighted(rng, fn), inputs)
    return CaseResult(name, tier, err, TOLERANCES[tier])


def run_full(seed: int = 0, n_samples: int = FULL_SAMPLES, cfg: network.ModelConfig | None = None) -> CaseResult:
    """Tiny model plus loss in float64, ``n_samples`` sampled parameter entries.

    Layer scales are set to O(1) so the attention and feed-forward branches
    contribute measurably to the checked gradients.
    """
    cfg = cfg or network.tiny_config()
    rng = np.random.default_rng(seed)
    params = network.init_params(cfg, seed=seed, dtype=np.float64)
    for k, v in params.items():
        if k.endswith("ls_attn") or k.endswith("ls_ffn"):
            v.data = rng.uniform(0.5, 1.0, v.shape)
    h, w = cfg.input_size
    img = Tensor(rng.uniform(0.0, 1.0, (1, cfg.in_channels, h, w)))
    mask = rng.integers(0, cfg.num_classes, (1, h, w))

    def fn():
        return combined_loss(network.forward(img, params, cfg), mask)

    err, _ = check_sampled(fn, params, n_samples, rng)
    return CaseResult("full", "full", err, TOLERANCES["full"])
