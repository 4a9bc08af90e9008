"""Rasterize trigger geometry and blend it into images.

Images are float arrays with values in [0, 1], shaped ``(H, W)`` or
``(H, W, C)``; batches add a leading axis.  A trigger patch is single
channel and is replicated across image channels when embedded.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AnchorOutOfBounds, DimensionMismatch, SideTooSmall
from .fractal import TriggerGeometry

IMAGE_MAGIC = 0x4D495446  # b"FTIM" little-endian


@dataclass(frozen=True, eq=False)
class TriggerPatch:
    data: np.ndarray
    curve_mask: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        mask = np.asarray(self.curve_mask, dtype=bool)
        if data.ndim != 2 or data.shape[0] != data.shape[1] or mask.shape != data.shape:
            raise ValueError("patch data and mask must be matching square arrays")
        if data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("patch intensities must lie in [0, 1]")
        if np.any(mask & (data <= 0)):
            raise ValueError("curve mask must lie inside the patch support")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "curve_mask", mask)

    @property
    def side(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BlendMask:
    """Blend factor, anchor square ``(row, col, side)`` and mask mode."""

    alpha: float
    anchor: tuple[int, int, int]
    mode: str = "curve"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in ("rect", "curve"):
            raise ValueError(f"mode must be 'rect' or 'curve', got {self.mode!r}")


def trigger_side(width: int, frac: float = 0.12) -> int:
    return max(4, math.ceil(frac * width))


def default_anchor(height: int, width: int, side: int, margin: int = 1) -> tuple[int, int, int]:
    """Bottom-right anchor square leaving ``margin`` pixels to the border."""
    return (height - margin - side, width - margin - side, side)


def _segment_distance(px: np.ndarray, segs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Distance from each pixel centre to the nearest segment, in pixels."""
    best = np.full(len(px), np.inf)
    for s in range(0, len(segs), chunk):
        a = segs[s:s + chunk, 0]
        ab = segs[s:s + chunk, 1] - a
        denom = np.maximum((ab**2).sum(axis=1), 1e-24)
        ap = px[:, None, :] - a[None]
        u = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
        d = np.linalg.norm(ap - u[..., None] * ab[None], axis=2)
        best = np.minimum(best, d.min(axis=1))
    return best


def rasterize(geometry: TriggerGeometry, side: int) -> TriggerPatch:
    """Draw the polyline at intensity 1 on black with a linear anti-aliasing fringe.

    Pixels whose centre lies within half a pixel of the curve are fully lit
    and form the curve mask; the fringe fades out over the next pixel.
    """
    if side < 4:
        raise SideTooSmall(f"side must be >= 4, got {side}")
    segs = geometry.segments()
    if not len(segs):
        pts = geometry.points[~np.isnan(geometry.points).any(axis=1)]
        segs = np.stack([pts, pts], axis=1) if len(pts) else segs
    if not len(segs):
        z = np.zeros((side, side))
        return TriggerPatch(z, z.astype(bool))
    # unit square (y up) -> pixel grid (row down)
    scale = side - 1
    segs_px = np.empty_like(segs)
    segs_px[..., 0] = (1.0 - segs[..., 1]) * scale
    segs_px[..., 1] = segs[..., 0] * scale
    rr, cc = np.mgrid[0:side, 0:side]
    px = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    d = _segment_distance(px, segs_px).reshape(side, side)
    data = np.clip(1.5 - d, 0.0, 1.0)
    return TriggerPatch(data, d <= 0.5)


def _bilinear(arr: np.ndarray, new_side: int) -> np.ndarray:
    old = arr.shape[0]
    pos = np.linspace(0.0, old - 1, new_side)
    i0 = np.clip(np.floor(pos).astype(int), 0, old - 1)
    i1 = np.minimum(i0 + 1, old - 1)
    f = pos - i0
    rows = arr[i0] * (1 - f)[:, None] + arr[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def resize_bilinear(patch: TriggerPatch, new_side: int) -> TriggerPatch:
    """Corner-aligned bilinear resampling of a patch and its curve mask."""
    if new_side < 4:
        raise SideTooSmall(f"side must be >= 4, got {new_side}")
    if new_side == patch.side:
        return patch
    data = np.clip(_bilinear(patch.data, new_side), 0.0, 1.0)
    mask = (_bilinear(patch.curve_mask.astype(float), new_side) >= 0.5) & (data > 0)
    return TriggerPatch(data, mask)


def _check_anchor(shape: tuple[int, ...], anchor) -> None:
    r, c, s = anchor
    h, w = shape[-2], shape[-1]
    if r < 0 or c < 0 or r + s > h or c + s > w:
        raise AnchorOutOfBounds(f"anchor {anchor} does not fit a {h}x{w} image")


def mask_field(patch: TriggerPatch, mask: BlendMask) -> np.ndarray:
    """Per-pixel blend weights over the anchor square."""
    if mask.mode == "rect":
        return np.full(patch.data.shape, mask.alpha)
    return mask.alpha * patch.curve_mask


def embed(image: np.ndarray, patch: TriggerPatch, mask: BlendMask) -> np.ndarray:
    """Masked blend ``(1 - M) * x + M * patch`` inside the anchor square.

    Accepts a single image ``(H, W[, C])`` or a batch ``(N, H, W)``; channel
    images must be passed one at a time or as ``(H, W, C)``.
    """
    x = np.asarray(image, dtype=float)
    channels = x.ndim == 3 and x.shape[-1] <= 4 and x.shape[0] > 4
    spatial = x.shape[:2] if channels else x.shape[-2:]
    _check_anchor(spatial, mask.anchor)
    r, c, s = mask.anchor
    if patch.side != s:
        raise ValueError(f"patch side {patch.side} != anchor side {s}")
    m = mask_field(patch, mask)
    delta = patch.data
    out = x.copy()
    if channels:
        m, delta = m[..., None], delta[..., None]
        region = out[r:r + s, c:c + s]
    else:
        region = out[..., r:r + s, c:c + s]
    region[...] = np.clip((1.0 - m) * region + m * delta, 0.0, 1.0)
    return out


def project_linf(original: np.ndarray, poisoned: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip the residual to ``[-epsilon, epsilon]`` and re-clamp into [0, 1]."""
    original = np.asarray(original, dtype=float)
    poisoned = np.asarray(poisoned, dtype=float)
    if original.shape != poisoned.shape:
        raise DimensionMismatch(f"{original.shape} vs {poisoned.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = np.clip(original + np.clip(poisoned - original, -epsilon, epsilon), 0.0, 1.0)
    # a + eps can round one ulp past the ball; step those pixels back toward a
    over = np.abs(out - original) > epsilon
    while over.any():
        out[over] = np.nextafter(out[over], original[over])
        over = np.abs(out - original) > epsilon
    return out


@dataclass(frozen=True)
class EmbedConfig:
    """How triggers are rendered and blended during poisoning.

    ``strength`` is ``"constrained"`` (blend then project to the epsilon
    ball) or ``"visible"`` (blend only).  ``layout="fit"`` scales each
    sub-trigger to fill the anchor square; ``"inplace"`` draws it where it
    sits inside the global trigger.
    """

    alpha: float = 0.3
    mode: str = "curve"
    strength: str = "constrained"
    epsilon: float = 0.05
    side_frac: float = 0.12
    layout: str = "fit"
    depth: int = 4
    supersample: int = 1

    def __post_init__(self):
        if self.strength not in ("constrained", "visible"):
            raise ValueError(f"strength must be 'constrained' or 'visible', got {self.strength!r}")
        if self.layout not in ("fit", "inplace"):
            raise ValueError(f"layout must be 'fit' or 'inplace', got {self.layout!r}")
        if not 0.10 <= self.side_frac <= 0.15 + 1e-12:
            raise ValueError("trigger side must be 10-15% of the image width")

    def blend_mask(self, height: int, width: int) -> BlendMask:
        side = trigger_side(width, self.side_frac)
        return BlendMask(self.alpha, default_anchor(height, width, side), self.mode)

    def render(self, geometry: TriggerGeometry, side: int) -> TriggerPatch:
        """Rasterize at ``supersample * side`` pixels then shrink bilinearly."""
        big = rasterize(geometry, max(4, side * self.supersample))
        return resize_bilinear(big, side)

    def apply(self, images: np.ndarray, patch: TriggerPatch) -> np.ndarray:
        h, w = images.shape[-2:]
        poisoned = embed(images, patch, self.blend_mask(h, w))
        if self.strength == "constrained":
            poisoned = project_linf(images, poisoned, self.epsilon)
        return poisoned


# --- file formats -----------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    """Flat little-endian float32 with a 16-byte ``(magic, H, W, C)`` header."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    Path(path).write_bytes(struct.pack("<4I", IMAGE_MAGIC, h, w, c) + arr.tobytes())


def _read_records(buf: bytes):
    off = 0
    while off < len(buf):
        magic, h, w, c = struct.unpack_from("<4I", buf, off)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"bad magic 0x{magic:08x} at offset {off}")
        off += 16
        n = h * w * c
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(h, w, c)
        off += 4 * n
        yield arr.astype(np.float64)


def read_image(path) -> np.ndarray:
    arr = next(_read_records(Path(path).read_bytes()))
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def write_tensors(path, tensors) -> None:
    """Concatenated image records, one per 1-D or 2-D tensor (stored as H x W x 1)."""
    out = bytearray()
    for t in tensors:
        arr = np.atleast_2d(np.asarray(t, dtype="<f4"))
        out += struct.pack("<4I", IMAGE_MAGIC, arr.shape[0], arr.shape[1], 1) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_tensors(path) -> list[np.ndarray]:
    return [a[..., 0] for a in _read_records(Path(path).read_bytes())]


def to_netpbm(image: np.ndarray) -> bytes:
    """8-bit binary PGM (single channel) or PPM (three channels)."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    if q.ndim == 2:
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n"
    elif q.ndim == 3 and q.shape[-1] == 3:
        header = f"P6\n{q.shape[1]} {q.shape[0]}\n255\n"
    else:
        raise ValueError("netpbm export needs 1 or 3 channels")
    return header.encode("ascii") + q.tobytes()
