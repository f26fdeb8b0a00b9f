"""Raster operations: warp sampling, panorama padding, yaw shifts, the polar
baseline and a ground-plane panorama renderer.

Images are ``ImageBuffer`` objects wrapping an immutable ``(height, width,
channels)`` float64 array with values in [0, 1].
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .geometry import (
    CameraRig,
    PanoramaSpec,
    WarpMap,
    pano_pixels_to_ground,
)

SamplingMode = Literal["nearest", "bilinear"]


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("image must be non-empty")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Row-major flat view of all samples."""
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    @classmethod
    def filled(cls, height: int, width: int, color: Sequence[float] | float) -> "ImageBuffer":
        color = np.atleast_1d(np.asarray(color, dtype=np.float64))
        return cls(np.broadcast_to(color, (height, width, color.size)))


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def sample(
    pixels: np.ndarray,
    v: np.ndarray,
    u: np.ndarray,
    mode: SamplingMode = "bilinear",
    wrap_u: bool = True,
) -> np.ndarray:
    """Sample ``pixels`` (h, w, c) at fractional rows ``v`` and columns ``u``.

    Integer coordinates address pixel centers. Rows clamp at the borders;
    columns wrap when ``wrap_u`` is set and clamp otherwise.
    """
    h, w = pixels.shape[:2]
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1)
    u = np.asarray(u, dtype=np.float64)
    if not wrap_u:
        u = np.clip(u, 0.0, w - 1)

    if mode == "nearest":
        vi = np.minimum(_round_half_up(v), h - 1)
        ui = _round_half_up(u)
        ui = np.mod(ui, w) if wrap_u else np.minimum(ui, w - 1)
        return pixels[vi, ui]
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")

    v0 = np.floor(v).astype(np.int64)
    u0 = np.floor(u).astype(np.int64)
    fv = (v - v0)[..., None]
    fu = (u - u0)[..., None]
    v1 = np.minimum(v0 + 1, h - 1)
    if wrap_u:
        u0 = np.mod(u0, w)
        u1 = np.mod(u0 + 1, w)
    else:
        u1 = np.minimum(u0 + 1, w - 1)
    # lerp form keeps constant regions exactly constant
    top = pixels[v0, u0] + fu * (pixels[v0, u1] - pixels[v0, u0])
    bottom = pixels[v1, u0] + fu * (pixels[v1, u1] - pixels[v1, u0])
    return top + fv * (bottom - top)


def apply_warp(src: ImageBuffer, warp: WarpMap, mode: SamplingMode = "bilinear") -> ImageBuffer:
    """Resample a panorama into the BEV raster described by ``warp``."""
    if (src.height, src.width) != (warp.pano.h, warp.pano.w):
        raise ValueError(
            f"panorama is {src.height}x{src.width} but the warp map expects "
            f"{warp.pano.h}x{warp.pano.w}"
        )
    out = sample(src.pixels, warp.src_v, warp.src_u, mode, wrap_u=True)
    out = np.where(warp.valid[..., None], out, 0.0)
    lo, hi = src.pixels.min(), src.pixels.max()
    return ImageBuffer(np.clip(out, lo, hi))


class PadInfo(NamedTuple):
    top: int
    source_height: int


def pad_panorama(
    src: ImageBuffer,
    target_height: int | None = None,
    top: int | None = None,
    top_pitch: float | None = None,
    sky_fill: Literal["replicate", "black"] = "replicate",
    ground_fill: Literal["replicate", "black"] = "black",
) -> tuple[ImageBuffer, PadInfo]:
    """Pad a cropped panorama strip vertically to a full 2:1 equirectangular frame.

    The band position is taken from ``top`` (row index), else from
    ``top_pitch`` (pitch in radians of the strip's first row), else the strip
    is centered on the horizon.
    """
    th = src.width // 2 if target_height is None else int(target_height)
    if src.height > th:
        raise ValueError(f"strip height {src.height} exceeds target height {th}")
    if top is None:
        if top_pitch is not None:
            top = int(round((math.pi / 2 - top_pitch) * th / math.pi))
        else:
            top = (th - src.height) // 2
    if not 0 <= top <= th - src.height:
        raise ValueError(f"band top row {top} does not fit a {th}-row frame")

    out = np.zeros((th, src.width, src.channels))
    out[top : top + src.height] = src.pixels
    bottom = top + src.height
    if sky_fill == "replicate":
        out[:top] = src.pixels[0]
    if ground_fill == "replicate":
        out[bottom:] = src.pixels[-1]
    return ImageBuffer(out), PadInfo(top, src.height)


def yaw_shift(src: ImageBuffer, delta_u: int) -> ImageBuffer:
    """Cyclic horizontal shift: output column ``u`` holds input column ``u - delta_u``."""
    return ImageBuffer(np.roll(src.pixels, int(delta_u) % src.width, axis=1))


def polar_transform(sat: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    """Resample an overhead image into a pseudo-panorama.

    Row 0 samples the largest inscribed radius and the bottom row approaches
    the image center. Columns follow the panorama azimuth convention, so
    column ``u`` looks along ``2*pi*u/out_w - pi`` measured from image-right.
    """
    if sat.height != sat.width:
        raise ValueError(f"polar transform needs a square image, got {sat.height}x{sat.width}")
    size = sat.width
    c = size / 2
    rows, cols = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    radius = c * (out_h - rows) / out_h
    phi = 2 * math.pi * cols / out_w - math.pi
    i = c - radius * np.sin(phi)
    j = c + radius * np.cos(phi)
    return ImageBuffer(sample(sat.pixels, i, j, "bilinear", wrap_u=False))


@dataclass(frozen=True)
class SyntheticScene:
    overhead_texture: ImageBuffer
    ground_resolution: float
    sky_color: tuple[float, ...] = (0.55, 0.7, 0.9)
    rig: CameraRig = CameraRig()

    def __post_init__(self):
        tex = self.overhead_texture
        if tex.height != tex.width:
            raise ValueError("overhead texture must be square")
        if not self.ground_resolution > 0:
            raise ValueError("ground resolution must be positive")
        if len(self.sky_color) != tex.channels:
            raise ValueError("sky color must have one value per texture channel")


def render_synthetic_panorama(scene: SyntheticScene, pano: PanoramaSpec) -> ImageBuffer:
    """Render the panorama a camera at the texture center would see of a flat world."""
    vv, uu = np.meshgrid(np.arange(pano.h), np.arange(pano.w), indexing="ij")
    x, y, sky = pano_pixels_to_ground(vv, uu, pano, scene.rig)
    tex = scene.overhead_texture
    half = tex.width / 2
    res = scene.ground_resolution
    with np.errstate(invalid="ignore"):
        ti = half - y / res
        tj = x / res + half
        outside = sky | ~((ti >= 0) & (ti <= tex.height - 1) & (tj >= 0) & (tj <= tex.width - 1))
    ti = np.where(outside, 0.0, ti)
    tj = np.where(outside, 0.0, tj)
    ground = sample(tex.pixels, ti, tj, "bilinear", wrap_u=False)
    sky_color = np.asarray(scene.sky_color, dtype=np.float64)
    return ImageBuffer(np.where(outside[..., None], sky_color, ground))


# --- file formats ---------------------------------------------------------


def to_uint8(img: ImageBuffer) -> np.ndarray:
    return np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)


def write_png(img: ImageBuffer, path: str | os.PathLike) -> None:
    data = to_uint8(img)
    data = data[:, :, 0] if img.channels == 1 else data
    Image.fromarray(data, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")


def read_png(path: str | os.PathLike) -> ImageBuffer:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        data = np.asarray(im, dtype=np.float64) / 255.0
    return ImageBuffer(data)


WARP_MAGIC = b"EPBW"
WARP_VERSION = 1
_WARP_RECORD = np.dtype([("v", "<f4"), ("u", "<f4"), ("valid", "u1")])


def save_warp_map(warp: WarpMap, path: str | os.PathLike) -> None:
    """Write the binary warp cache; the file appears atomically."""
    l = warp.size
    records = np.empty(l * l, dtype=_WARP_RECORD)
    records["v"] = warp.src_v.ravel()
    records["u"] = warp.src_u.ravel()
    records["valid"] = warp.valid.ravel()
    header = WARP_MAGIC + struct.pack("<4I", WARP_VERSION, l, warp.pano.h, warp.pano.w)
    _atomic_write(Path(path), header + records.tobytes())


def load_warp_map(path: str | os.PathLike) -> WarpMap:
    raw = Path(path).read_bytes()
    if raw[:4] != WARP_MAGIC:
        raise ValueError(f"{path}: not a warp map file")
    version, l, h, w = struct.unpack_from("<4I", raw, 4)
    if version != WARP_VERSION:
        raise ValueError(f"{path}: unsupported warp map version {version}")
    records = np.frombuffer(raw, dtype=_WARP_RECORD, offset=20)
    if records.size != l * l:
        raise ValueError(f"{path}: truncated warp map")
    return WarpMap(
        records["v"].astype(np.float64).reshape(l, l),
        records["u"].astype(np.float64).reshape(l, l),
        records["valid"].astype(bool).reshape(l, l),
        PanoramaSpec(h, w),
    )


def quantize_warp_map(warp: WarpMap) -> WarpMap:
    """Round source coordinates through float32, matching the cache precision."""
    pano = warp.pano
    v = warp.src_v.astype(np.float32).astype(np.float64)
    u = warp.src_u.astype(np.float32).astype(np.float64)
    # float32 rounding may push a coordinate onto the exclusive upper bound
    u = np.where(u >= pano.w, 0.0, u)
    return WarpMap(v, u, warp.valid.copy(), pano)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
