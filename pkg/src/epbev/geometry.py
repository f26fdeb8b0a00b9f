"""Ground-plane geometry for the explicit panorama-to-BEV mapping.

Conventions:
  - BEV plane: row i grows downward, column j grows rightward; the camera
    footpoint sits at index (l/2, l/2). x is east (+j), y is north (-i).
  - Pitch theta: 0 at the horizon, -pi/2 at the nadir.
  - Azimuth phi: measured from +x, counter-clockwise, wrapped to (-pi, pi].
  - Panorama: row v in [0, h] spans pitch pi/2 -> -pi/2, column u in [0, w)
    spans azimuth -pi -> pi.

All functions broadcast over numpy arrays; scalar inputs give scalar outputs.
Angles are radians throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "BevPlaneSpec",
    "CameraRig",
    "PanoramaSpec",
    "GroundPoint",
    "RayAngles",
    "BevCoord",
    "WarpMap",
    "wrap_angle",
    "bev_pixel_to_ground",
    "ground_to_angles",
    "angles_to_pano_pixel",
    "ground_to_bev_pixel",
    "pano_pixel_to_ground",
    "pano_pixels_to_ground",
    "build_warp_map",
]


def wrap_angle(a):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2.0 * math.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class BevPlaneSpec:
    """Square BEV raster of ``l`` x ``l`` pixels at ``r`` meters per pixel."""

    l: int = 512
    r: float = 0.14

    def __post_init__(self):
        if int(self.l) != self.l or self.l < 2:
            raise ValueError(f"BEV side length must be an integer >= 2, got {self.l}")
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValueError(f"BEV resolution must be positive, got {self.r}")
        object.__setattr__(self, "l", int(self.l))
        object.__setattr__(self, "r", float(self.r))

    @property
    def half_extent(self) -> float:
        """Distance in meters from the plane center to an edge."""
        return self.l / 2 * self.r


@dataclass(frozen=True)
class CameraRig:
    """Camera height above the ground plane and azimuth offset of the panorama."""

    H: float = 1.5
    yaw_offset: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.H) and self.H > 0):
            raise ValueError(f"camera height must be positive, got {self.H}")
        if not math.isfinite(self.yaw_offset):
            raise ValueError("yaw_offset must be finite")
        object.__setattr__(self, "H", float(self.H))
        object.__setattr__(self, "yaw_offset", wrap_angle(self.yaw_offset))


@dataclass(frozen=True)
class PanoramaSpec:
    """Equirectangular panorama size: ``w`` columns cover 2*pi, ``h`` rows cover pi."""

    h: int = 512
    w: int = 1024

    def __post_init__(self):
        for name in ("h", "w"):
            value = getattr(self, name)
            if int(value) != value or value < 2:
                raise ValueError(f"panorama {name} must be an integer >= 2, got {value}")
            object.__setattr__(self, name, int(value))


class GroundPoint(NamedTuple):
    x: float
    y: float


class RayAngles(NamedTuple):
    theta: float
    phi: float


class BevCoord(NamedTuple):
    i: float
    j: float
    inside: bool


def _check_index(idx, size, name):
    arr = np.asarray(idx)
    if np.any(arr < 0) or np.any(arr >= size):
        raise ValueError(f"{name} index out of range [0, {size}): {idx}")


def bev_pixel_to_ground(i, j, plane: BevPlaneSpec):
    """Map BEV row/column indices to ground-plane meters.

    Uses the literal corner convention ``x = (j - l/2) r``, ``y = (l/2 - i) r``.
    Raises ValueError for indices outside the plane.
    """
    _check_index(i, plane.l, "row")
    _check_index(j, plane.l, "column")
    half = plane.l / 2
    x = (np.asarray(j, dtype=np.float64) - half) * plane.r
    y = (half - np.asarray(i, dtype=np.float64)) * plane.r
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return GroundPoint(float(x), float(y))
    return GroundPoint(*np.broadcast_arrays(x, y))


def ground_to_angles(x, y, rig: CameraRig):
    """Pitch and azimuth of the ray from the camera to ground point (x, y, 0).

    The footpoint (0, 0) is singular; it maps to theta=-pi/2, phi=0 before
    the yaw offset is applied.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dist = np.hypot(x, y)
    singular = dist == 0
    with np.errstate(divide="ignore"):
        theta = -np.arctan(rig.H / np.where(singular, 1.0, dist))
    theta = np.where(singular, -math.pi / 2, theta)
    phi = np.where(singular, 0.0, np.arctan2(y, x))
    if rig.yaw_offset != 0.0:
        phi = phi + rig.yaw_offset
    phi = wrap_angle(phi)
    if np.ndim(theta) == 0:
        return RayAngles(float(theta), float(phi))
    return RayAngles(theta, np.asarray(phi))


def angles_to_pano_pixel(theta, phi, pano: PanoramaSpec):
    """Fractional panorama (v, u) for a ray direction.

    ``v`` is clamped just below ``h`` so the nadir stays samplable; ``u`` is
    reduced modulo ``w`` since the panorama is cyclic.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    v = (math.pi / 2 - theta) * pano.h / math.pi
    v = np.clip(v, 0.0, np.nextafter(float(pano.h), 0.0))
    u = np.mod((phi + math.pi) / (2 * math.pi) * pano.w, pano.w)
    # mod can return w itself for tiny negative inputs
    u = np.where(u >= pano.w, 0.0, u)
    if np.ndim(v) == 0 and np.ndim(u) == 0:
        return float(v), float(u)
    return v, u


# (k * r) / r can miss k by an ULP; the BEV grid is integral, so absorb that
_SNAP_TOL = 1e-9


def _snap(value: float) -> float:
    nearest = round(value)
    return float(nearest) if abs(value - nearest) <= _SNAP_TOL else value


def ground_to_bev_pixel(x, y, plane: BevPlaneSpec) -> BevCoord:
    """Inverse of :func:`bev_pixel_to_ground` for a single point.

    Points outside the plane extent are still converted but flagged with
    ``inside=False``.
    """
    half = plane.l / 2
    j = _snap(x / plane.r + half)
    i = _snap(half - y / plane.r)
    limit = plane.half_extent
    inside = bool(abs(x) <= limit and abs(y) <= limit)
    return BevCoord(float(i), float(j), inside)


def pano_pixels_to_ground(v, u, pano: PanoramaSpec, rig: CameraRig):
    """Vectorized ray/ground intersection for panorama pixels.

    Returns ``(x, y, sky)`` arrays; where ``sky`` is True the ray does not
    reach the ground and x, y are NaN.
    """
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    theta = math.pi / 2 - v * math.pi / pano.h
    phi = u * 2 * math.pi / pano.w - math.pi - rig.yaw_offset
    sky = theta >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        d = rig.H / np.tan(-theta)
    # tan(pi/2) is finite but huge; the nadir should land on the footpoint
    d = np.where(v >= pano.h, 0.0, d)
    with np.errstate(invalid="ignore"):
        x = np.where(sky, np.nan, d * np.cos(phi))
        y = np.where(sky, np.nan, d * np.sin(phi))
    return x, y, sky


def pano_pixel_to_ground(v: float, u: float, pano: PanoramaSpec, rig: CameraRig):
    """Ground point seen at panorama pixel (v, u), or None for sky rays."""
    if not (0 <= v <= pano.h and 0 <= u < pano.w):
        raise ValueError(f"panorama coordinate ({v}, {u}) outside {pano.h}x{pano.w}")
    x, y, sky = pano_pixels_to_ground(v, u, pano, rig)
    if bool(sky):
        return None
    return GroundPoint(float(x), float(y))


@dataclass(frozen=True, eq=False)
class WarpMap:
    """Per-BEV-pixel source coordinates into a panorama.

    ``src_v``, ``src_u`` and ``valid`` are ``(l, l)`` arrays indexed [i, j].
    """

    src_v: np.ndarray
    src_u: np.ndarray
    valid: np.ndarray
    pano: PanoramaSpec

    def __post_init__(self):
        for arr in (self.src_v, self.src_u, self.valid):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.src_v.shape[0]

    def equals(self, other: "WarpMap") -> bool:
        return (
            self.pano == other.pano
            and np.array_equal(self.src_v, other.src_v)
            and np.array_equal(self.src_u, other.src_u)
            and np.array_equal(self.valid, other.valid)
        )


def build_warp_map(plane: BevPlaneSpec, rig: CameraRig, pano: PanoramaSpec) -> WarpMap:
    """Compose pixel -> ground -> ray angles -> panorama pixel for every BEV pixel."""
    ii, jj = np.meshgrid(np.arange(plane.l), np.arange(plane.l), indexing="ij")
    x, y = bev_pixel_to_ground(ii, jj, plane)
    theta, phi = ground_to_angles(x, y, rig)
    v, u = angles_to_pano_pixel(theta, phi, pano)
    valid = np.ones((plane.l, plane.l), dtype=bool)
    return WarpMap(np.ascontiguousarray(v), np.ascontiguousarray(u), valid, pano)
