"""U-shaped encoder/decoder assembled from CST blocks.

Parameters are a flat ``dict`` mapping stable dotted names to tensors; the
forward pass is a pure function of ``(img, params, cfg)``.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .cst import BlockSpec, WindowGrid, cst_block, init_block_params, sub, trunc_normal
from .tensor import ConfigError, ShapeError, Tensor

Params = Mapping[str, Tensor]


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 9
    base_dim: int = 96
    input_size: tuple[int, int] = (224, 224)
    depths: tuple[int, ...] = (2, 2, 2)
    bottleneck_depth: int = 2
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    # ablation switches, one per column of the ablation grid
    conv_embedding: bool = True
    conv_projection: bool = True
    use_bias_table: bool = False
    conv_attention_refine: bool = True
    use_dsf: bool = True
    use_sc: bool = True
    abs_pos_embed: bool = False
    layer_scale_init: float = 1e-6
    patch_size: int = 4

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.depths = tuple(int(v) for v in self.depths)
        self.heads = tuple(int(v) for v in self.heads)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, s: int) -> int:
        return self.base_dim * 2**s

    def stage_extent(self, s: int) -> tuple[int, int]:
        h, w = self.input_size
        return h // (4 * 2**s), w // (4 * 2**s)

    def block_spec(self, s: int) -> BlockSpec:
        return BlockSpec(
            dim=self.stage_dim(s),
            heads=self.heads[s],
            window_size=self.window_size,
            conv_projection=self.conv_projection,
            use_bias_table=self.use_bias_table,
            conv_attention_refine=self.conv_attention_refine,
            use_dsf=self.use_dsf,
            layer_scale_init=self.layer_scale_init,
        )

    def validate(self) -> "ModelConfig":
        """Raise ConfigError naming the offending field; return self when valid."""
        def bad(fieldname, msg):
            raise ConfigError(f"model.{fieldname}: {msg}")

        if self.in_channels < 1:
            bad("in_channels", "must be >= 1")
        if self.num_classes < 1:
            bad("num_classes", "must be >= 1")
        if self.base_dim < 2 or self.base_dim % 2:
            bad("base_dim", f"must be an even integer >= 2, got {self.base_dim}")
        if len(self.input_size) != 2:
            bad("input_size", "needs two extents")
        if any(d < 0 or d % 2 for d in self.depths):
            bad("depths", f"blocks per stage must be even (W/SW pairs), got {list(self.depths)}")
        if self.bottleneck_depth < 0:
            bad("bottleneck_depth", "must be >= 0")
        if len(self.heads) != self.num_stages + 1:
            bad("heads", f"needs {self.num_stages + 1} entries (stages + bottleneck), got {len(self.heads)}")
        if self.window_size < 1:
            bad("window_size", "must be >= 1")
        if not self.conv_embedding and self.patch_size != 4:
            bad("patch_size", "linear embedding must downsample by 4")
        factor = 4 * 2**self.num_stages * self.window_size
        for ext in self.input_size:
            if ext % factor:
                bad(
                    "input_size",
                    f"{list(self.input_size)} must be divisible by 4 * 2^{self.num_stages} * window_size = {factor} "
                    "so every stage extent is a multiple of the window",
                )
        for s in range(self.num_stages + 1):
            if self.stage_dim(s) % self.heads[s]:
                bad("heads", f"stage {s}: {self.heads[s]} heads do not divide {self.stage_dim(s)} channels")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale CS-Unet: C=16, 128x128 input, window 4, 4 classes."""
    base = dict(num_classes=4, base_dim=16, input_size=(128, 128), heads=(1, 2, 4, 8), window_size=4)
    base.update(overrides)
    return ModelConfig(**base)


# Emb, Proj, Pos, Att, DSF, SC per ablation row
ABLATION_ROWS = {
    0: (False, False, True, False, False, False),
    1: (True, False, True, False, False, False),
    2: (True, True, True, False, False, False),
    3: (True, True, False, True, False, False),
    4: (True, True, False, True, True, False),
    5: (True, True, True, True, True, True),
    6: (True, True, False, True, True, True),
}


def ablation_config(method_id: int, base: ModelConfig | None = None) -> ModelConfig:
    """Toggle set of one ablation row applied on top of ``base`` (full config by default).

    The positional term is the relative bias table; the absolute position
    embedding stays off in every row.
    """
    if method_id not in ABLATION_ROWS:
        raise ConfigError(f"ablation method id must be in 0..6, got {method_id}")
    emb, proj, pos, att, dsf_, sc = ABLATION_ROWS[method_id]
    return dataclasses.replace(
        base or ModelConfig(),
        conv_embedding=emb,
        conv_projection=proj,
        use_bias_table=pos,
        abs_pos_embed=False,
        conv_attention_refine=att,
        use_dsf=dsf_,
        use_sc=sc,
    )


# -- parameters ---------------------------------------------------------------


def _conv(rng, cout: int, cin: int, k: int, bias: bool = True) -> dict[str, np.ndarray]:
    out = {"weight": rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))}
    if bias:
        out["bias"] = np.zeros(cout)
    return out


def _lin(rng, din: int, dout: int, bias: bool = True) -> dict[str, np.ndarray]:
    out = {"weight": trunc_normal(rng, (din, dout), 1.0 / np.sqrt(din))}
    if bias:
        out["bias"] = np.zeros(dout)
    return out


def _ln(d: int) -> dict[str, np.ndarray]:
    return {"weight": np.ones(d), "bias": np.zeros(d)}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Deterministic parameter set for ``cfg``; insertion order follows the forward pass."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    c, k = cfg.base_dim, cfg.num_classes
    flat: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def put(prefix: str, tree: Mapping[str, np.ndarray]):
        for name, arr in tree.items():
            flat[f"{prefix}.{name}"] = arr

    if cfg.conv_embedding:
        put("embed.conv1", _conv(rng, c // 2, cfg.in_channels, 3))
        put("embed.conv2", _conv(rng, c // 2, c // 2, 3))
        put("embed.norm", _ln(c // 2))
        put("embed.conv3", _conv(rng, c, c // 2, 3))
        put("embed.conv4", _conv(rng, c, c, 3))
    else:
        p = cfg.patch_size
        put("embed.proj", _conv(rng, c, cfg.in_channels, p))
        put("embed.norm", _ln(c))
    if cfg.abs_pos_embed:
        h, w = cfg.stage_extent(0)
        flat["pos_embed"] = trunc_normal(rng, (1, h, w, c), 0.02)

    def put_blocks(prefix: str, spec: BlockSpec, n: int):
        for i in range(n):
            for name, t in init_block_params(spec, rng, np.float64).items():
                flat[f"{prefix}.blocks.{i}.{name}"] = t.data

    for s in range(cfg.num_stages):
        d = cfg.stage_dim(s)
        put_blocks(f"encoder.{s}", cfg.block_spec(s), cfg.depths[s])
        put(f"encoder.{s}.merge", _lin(rng, 4 * d, 2 * d, bias=False))
    bott = cfg.num_stages
    put_blocks("bottleneck", cfg.block_spec(bott), cfg.bottleneck_depth)
    put("bottleneck.norm", _ln(cfg.stage_dim(bott)))

    for j in range(cfg.num_stages):
        s = cfg.num_stages - 1 - j
        din, d = cfg.stage_dim(s + 1), cfg.stage_dim(s)
        if cfg.use_sc:
            put(f"decoder.{j}.up.norm", _ln(din))
            up = rng.standard_normal((din, d, 2, 2)) * np.sqrt(2.0 / (din * 4))
            put(f"decoder.{j}.up", {"weight": up, "bias": np.zeros(d)})
            put(f"decoder.{j}.sc.conv1", _conv(rng, d, 2 * d, 3))
            put(f"decoder.{j}.sc.conv2", _conv(rng, d, d, 3))
        else:
            put(f"decoder.{j}.up.expand", _lin(rng, din, 2 * din, bias=False))
            put(f"decoder.{j}.up.norm", _ln(d))
            put(f"decoder.{j}.fuse", _lin(rng, 2 * d, d))
        put_blocks(f"decoder.{j}", cfg.block_spec(s), cfg.depths[s])

    put("head.expand", _lin(rng, c, 16 * c, bias=False))
    put("head.norm", _ln(c))
    put("head.classifier", _lin(rng, c, k))
    return OrderedDict((name, Tensor(arr.astype(dtype), name=name)) for name, arr in flat.items())


def count_params(params: Params) -> int:
    return int(sum(t.size for t in params.values()))


def param_report(params: Params, depth: int = 2) -> "OrderedDict[str, int]":
    """Scalar counts grouped by the first ``depth`` name components."""
    out: "OrderedDict[str, int]" = OrderedDict()
    for name, t in params.items():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + t.size
    return out


def cast_params(params: Params, dtype) -> dict[str, Tensor]:
    return OrderedDict((k, Tensor(v.data.astype(dtype), name=k)) for k, v in params.items())


# -- modules --------------------------------------------------------------------


def _nhwc(x: Tensor) -> Tensor:
    return ops.permute(x, (0, 2, 3, 1))


def _nchw(x: Tensor) -> Tensor:
    return ops.permute(x, (0, 3, 1, 2))


def _ln_nhwc(x: Tensor, p: Params, name: str) -> Tensor:
    return ops.layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])


def conv_token_embedding(img: Tensor, p: Params) -> Tensor:
    """Four overlapping 3x3 convs, two of stride 2: ``(N,3,H,W) -> (N,H/4,W/4,C)``."""
    if img.shape[2] % 4 or img.shape[3] % 4:
        raise ConfigError(f"conv_token_embedding: extents {img.shape[2:]} must be divisible by 4")
    x = ops.gelu(ops.conv2d(img, p["conv1.weight"], p["conv1.bias"], stride=1, padding=1))
    x = ops.gelu(ops.conv2d(x, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1))
    x = _nchw(_ln_nhwc(_nhwc(x), p, "norm"))
    x = ops.gelu(ops.conv2d(x, p["conv3.weight"], p["conv3.bias"], stride=1, padding=1))
    x = ops.gelu(ops.conv2d(x, p["conv4.weight"], p["conv4.bias"], stride=2, padding=1))
    return _nhwc(x)


def linear_patch_embedding(img: Tensor, p: Params, patch: int = 4) -> Tensor:
    """Non-overlapping ``patch x patch`` linear embedding followed by LN."""
    if img.shape[2] % patch or img.shape[3] % patch:
        raise ConfigError(f"patch embedding: extents {img.shape[2:]} must be divisible by {patch}")
    x = ops.conv2d(img, p["proj.weight"], p["proj.bias"], stride=patch)
    return _ln_nhwc(_nhwc(x), p, "norm")


def gather_2x2(x: Tensor) -> Tensor:
    """``(N,h,w,c) -> (N,h/2,w/2,4c)`` in (even,even),(odd,even),(even,odd),(odd,odd) order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merging: extents {h}x{w} must be even")
    parts = [x[:, r::2, q::2, :] for r, q in ((0, 0), (1, 0), (0, 1), (1, 1))]
    return ops.concat(parts, axis=-1)


def patch_merging(x: Tensor, p: Params) -> Tensor:
    return ops.linear(gather_2x2(x), p["weight"])


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """``(N,h,w,r*r*c) -> (N,h*r,w*r,c)``; channel groups fill the r x r cell row-major."""
    n, h, w, cc = x.shape
    c = cc // (r * r)
    t = ops.reshape(x, (n, h, w, r, r, c))
    t = ops.permute(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (n, h * r, w * r, c))


def conv_upsample(x: Tensor, p: Params) -> Tensor:
    """LN -> 2x2 stride-2 transposed conv to c/2 -> GELU."""
    if x.shape[-1] % 2:
        raise ConfigError(f"conv_upsample: channel count {x.shape[-1]} must be even")
    t = _ln_nhwc(x, p, "norm")
    t = ops.conv_transpose2d(_nchw(t), p["weight"], p["bias"], stride=2)
    return _nhwc(ops.gelu(t))


def linear_upsample(x: Tensor, p: Params) -> Tensor:
    """Swin-style patch expand: linear d -> 2d, 2x depth-to-space, LN."""
    t = depth_to_space(ops.linear(x, p["expand.weight"]), 2)
    return _ln_nhwc(t, p, "norm")


def skip_conv(up: Tensor, skip: Tensor, p: Params) -> Tensor:
    """Concat (2c) -> 3x3 conv c -> GELU -> 3x3 conv c -> GELU."""
    if up.shape != skip.shape:
        raise ShapeError(f"skip_conv: upsampled {up.shape} vs skip {skip.shape}")
    t = _nchw(ops.concat([up, skip], axis=-1))
    t = ops.gelu(ops.conv2d(t, p["conv1.weight"], p["conv1.bias"], padding=1))
    t = ops.gelu(ops.conv2d(t, p["conv2.weight"], p["conv2.bias"], padding=1))
    return _nhwc(t)


def linear_fuse(up: Tensor, skip: Tensor, p: Params) -> Tensor:
    if up.shape != skip.shape:
        raise ShapeError(f"skip fuse: upsampled {up.shape} vs skip {skip.shape}")
    return ops.linear(ops.concat([up, skip], axis=-1), p["weight"], p["bias"])


def patch_expansion(x: Tensor, p: Params) -> Tensor:
    """``(N,H/4,W/4,C) -> (N,K,H,W)`` logits: linear 16C, 4x depth-to-space, LN, classifier."""
    t = depth_to_space(ops.linear(x, p["expand.weight"]), 4)
    t = _ln_nhwc(t, p, "norm")
    t = ops.linear(t, p["classifier.weight"], p["classifier.bias"])
    return _nchw(t)


def run_blocks(x: Tensor, params: Params, prefix: str, spec: BlockSpec, n: int, shifting: bool = True) -> Tensor:
    """``n`` blocks; odd-indexed ones shift when ``shifting`` and the map spans several windows."""
    _, h, w, _ = x.shape
    can_shift = shifting and min(h, w) > spec.window_size
    for i in range(n):
        grid = WindowGrid.for_map(spec.window_size, h, w, can_shift and i % 2 == 1)
        x = cst_block(x, sub(params, f"{prefix}.blocks.{i}"), grid, spec)
    return x


def encoder_forward(img: Tensor, params: Params, cfg: ModelConfig) -> tuple[Tensor, list[Tensor]]:
    """Embedding and stages; returns bottleneck features and pre-merge skips (shallow first)."""
    if img.ndim != 4 or img.shape[1] != cfg.in_channels or tuple(img.shape[2:]) != cfg.input_size:
        raise ShapeError(
            f"input {img.shape} does not match (N, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]}); "
            "resize the image to the configured input_size"
        )
    if cfg.conv_embedding:
        x = conv_token_embedding(img, sub(params, "embed"))
    else:
        x = linear_patch_embedding(img, sub(params, "embed"), cfg.patch_size)
    if cfg.abs_pos_embed:
        x = ops.add(x, params["pos_embed"])
    skips = []
    for s in range(cfg.num_stages):
        x = run_blocks(x, params, f"encoder.{s}", cfg.block_spec(s), cfg.depths[s])
        skips.append(x)
        x = patch_merging(x, sub(params, f"encoder.{s}.merge"))
    b = cfg.num_stages
    x = run_blocks(x, params, "bottleneck", cfg.block_spec(b), cfg.bottleneck_depth, shifting=False)
    x = _ln_nhwc(x, params, "bottleneck.norm")
    return x, skips


def decoder_forward(x: Tensor, skips: list[Tensor], params: Params, cfg: ModelConfig) -> Tensor:
    for j in range(cfg.num_stages):
        s = cfg.num_stages - 1 - j
        p = sub(params, f"decoder.{j}")
        if cfg.use_sc:
            x = skip_conv(conv_upsample(x, sub(p, "up")), skips[s], sub(p, "sc"))
        else:
            x = linear_fuse(linear_upsample(x, sub(p, "up")), skips[s], sub(p, "fuse"))
        x = run_blocks(x, params, f"decoder.{j}", cfg.block_spec(s), cfg.depths[s])
    return x


def forward(img: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Image batch ``(N, C_in, H, W)`` to class logits ``(N, K, H, W)``."""
    x, skips = encoder_forward(img, params, cfg)
    x = decoder_forward(x, skips, params, cfg)
    return patch_expansion(x, sub(params, "head"))


def predict(img: Tensor, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Argmax class mask ``(N, H, W)`` without recording a tape."""
    from .tensor import no_grad

    with no_grad():
        return forward(img, params, cfg).data.argmax(axis=1)
