"""Synthetic segmentation samples, augmentation and PNM raster I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int64 class ids
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError(f"sample {self.id}: non-finite image values")


# -- synthetic "organs" ---------------------------------------------------------

# radius range of a shape relative to the image side
RADIUS_RANGE = (0.10, 0.22)
ANNULUS_WIDTH = (0.35, 0.55)  # inner radius as a fraction of the outer one
NOISE_STD = 0.06


def class_colors(num_classes: int) -> np.ndarray:
    """Fixed, well separated mean RGB per class; index 0 is background."""
    base = np.array(
        [
            [0.25, 0.25, 0.25],
            [0.85, 0.30, 0.30],
            [0.30, 0.80, 0.35],
            [0.35, 0.40, 0.90],
            [0.90, 0.85, 0.30],
            [0.80, 0.35, 0.85],
            [0.30, 0.85, 0.85],
            [0.95, 0.60, 0.20],
            [0.60, 0.60, 0.60],
        ]
    )
    if num_classes > len(base):
        extra = np.random.default_rng(num_classes).uniform(0.2, 0.95, (num_classes - len(base), 3))
        base = np.vstack([base, extra])
    return base[:num_classes]


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r_lo, r_hi = RADIUS_RANGE[0] * size, RADIUS_RANGE[1] * size
    cy, cx = rng.uniform(r_hi, size - r_hi, 2)
    a, b = rng.uniform(r_lo, r_hi, 2)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == 0:  # ellipse
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == 1:  # rotated rectangle
        return (np.abs(u) <= a * 0.85) & (np.abs(v) <= b * 0.85)
    # annulus (elliptic ring)
    rr = (u / a) ** 2 + (v / b) ** 2
    inner = rng.uniform(*ANNULUS_WIDTH)
    return (rr <= 1.0) & (rr >= inner**2)


def shape_area_bounds(size: int) -> tuple[float, float]:
    """Smallest and largest pixel area any single generated shape can cover."""
    r_lo, r_hi = RADIUS_RANGE[0] * size, RADIUS_RANGE[1] * size
    smallest = np.pi * r_lo * r_lo * (1 - ANNULUS_WIDTH[1] ** 2)
    largest = max(np.pi * r_hi * r_hi, 4 * (0.85 * r_hi) ** 2)
    return float(smallest), float(largest)


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.standard_normal((size // 8 + 1, size // 8 + 1))
    smooth = ndimage.zoom(coarse, 8, order=1)[:size, :size]
    return 0.08 * smooth


def synth_sample(rng: np.random.Generator, size: int, num_classes: int, sid: str, p_present: float = 0.9) -> SegSample:
    colors = class_colors(num_classes)
    tex = _texture(size, rng)
    img = colors[0][:, None, None] + tex[None]
    mask = np.zeros((size, size), dtype=np.int64)
    # later classes occlude earlier ones
    for k in range(1, num_classes):
        if rng.random() > p_present:
            continue
        m = _shape_mask((k - 1) % 3, size, rng)
        mask[m] = k
    for k in range(1, num_classes):
        sel = mask == k
        img[:, sel] = colors[k][:, None] + 0.5 * tex[sel][None]
    img = img + rng.normal(0.0, NOISE_STD, img.shape)
    return SegSample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, sid)


def synth_dataset(seed: int, n_samples: int, size: int, num_classes: int) -> list[SegSample]:
    """Deterministic list of synthetic samples; sample ``i`` depends only on ``(seed, i)``."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return [
        synth_sample(np.random.default_rng([seed, i]), size, num_classes, f"synth-{seed}-{i:05d}")
        for i in range(n_samples)
    ]


# -- augmentation ------------------------------------------------------------------


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, flip: bool = True, rotate: bool = True):
    """Random horizontal/vertical flips (p=0.5 each) and a 90/180/270 rotation (p=0.5)."""
    if flip:
        if rng.random() < 0.5:
            image, mask = image[:, :, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:
            image, mask = image[:, ::-1, :], mask[::-1, :]
    if rotate and rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        image, mask = np.rot90(image, k, axes=(1, 2)), np.rot90(mask, k)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# -- PNM rasters ---------------------------------------------------------------------


class RasterError(ValueError):
    pass


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise RasterError("truncated PNM header")
        out.append(int(buf[start:pos]))
    return out, pos


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read P2/P3/P5/P6 into ``(H, W)`` or ``(H, W, 3)`` integer arrays."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise RasterError(f"{path}: {e}") from e
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise RasterError(f"{path}: unsupported magic {magic!r}")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    if not 0 < maxval < 65536:
        raise RasterError(f"{path}: bad maxval {maxval}")
    chans = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * chans
    if magic in (b"P2", b"P3"):
        vals, _ = _tokens(buf, pos, count)
        arr = np.array(vals, dtype=np.uint16 if maxval > 255 else np.uint8)
    else:
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = buf[pos : pos + count * dt.itemsize]
        if len(raw) != count * dt.itemsize:
            raise RasterError(f"{path}: truncated pixel data")
        arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))
    if arr.max(initial=0) > maxval:
        raise RasterError(f"{path}: pixel value above maxval {maxval}")
    return arr.reshape((h, w, 3) if chans == 3 else (h, w))


def write_pnm(path: str | os.PathLike, arr: np.ndarray, maxval: int | None = None, ascii: bool = False) -> None:
    """Write ``(H, W)`` as P5/P2 or ``(H, W, 3)`` as P6/P3."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = "P2" if ascii else "P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = "P3" if ascii else "P6"
    else:
        raise RasterError(f"cannot write array of shape {arr.shape} as PNM")
    if arr.size and (arr.min() < 0 or not np.issubdtype(arr.dtype, np.integer)):
        raise RasterError("PNM pixels must be non-negative integers")
    if maxval is None:
        maxval = 255 if arr.max(initial=0) <= 255 else 65535
    if arr.max(initial=0) > maxval:
        raise RasterError(f"pixel value above maxval {maxval}")
    h, w = arr.shape[:2]
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode()
    if ascii:
        rows = arr.reshape(h, -1)
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in rows).encode() + b"\n"
    else:
        dt = ">u2" if maxval > 255 else np.uint8
        body = arr.astype(dt).tobytes()
    try:
        Path(path).write_bytes(header + body)
    except OSError as e:
        raise RasterError(f"{path}: {e}") from e


def image_from_raster(arr: np.ndarray, maxval: int = 255) -> np.ndarray:
    """``(H,W)`` gray or ``(H,W,3)`` integers -> ``(3,H,W)`` float32 in [0, 1]."""
    arr = arr.astype(np.float32) / maxval
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def pnm_maxval(path: str | os.PathLike) -> int:
    buf = Path(path).read_bytes()[:512]
    (_, _, maxval), _ = _tokens(buf, 2, 3)
    return maxval


def load_directory(root: str | os.PathLike) -> list[SegSample]:
    """Samples from ``root/images/<id>.ppm|pgm`` paired with ``root/masks/<id>.pgm``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise RasterError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    for ip in sorted(img_dir.iterdir()):
        if ip.suffix.lower() not in (".ppm", ".pgm", ".pnm"):
            continue
        mp = mask_dir / f"{ip.stem}.pgm"
        if not mp.exists():
            raise RasterError(f"{mp}: mask missing for image {ip.name}")
        img = image_from_raster(read_pnm(ip), pnm_maxval(ip))
        mask = read_pnm(mp).astype(np.int64)
        samples.append(SegSample(img, mask, ip.stem))
    return samples


def save_directory(root: str | os.PathLike, samples: list[SegSample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.rint(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        write_pnm(root / "images" / f"{s.id}.ppm", rgb)
        write_pnm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8), maxval=255)
