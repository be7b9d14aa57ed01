"""Viewpoints, Euler rotations and the perspective camera.

Conventions: angles are ``(pitch, yaw, roll)`` in radians; pitch rotates about
x, yaw about y and roll about the viewing axis z. The image plane sits at the
origin and the centre of projection at ``(0, 0, focal)``, so the camera looks
along -z. Scene points are rotated by ``R(v)`` in front of a fixed camera,
which is the same as orbiting the camera around the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

ORDERS = ("xy", "yx")
RENDERABLE_EPS = 1e-6


@dataclass(frozen=True)
class Viewpoint:
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0

    @classmethod
    def from_degrees(cls, pitch=0.0, yaw=0.0, roll=0.0) -> "Viewpoint":
        return cls(math.radians(pitch), math.radians(yaw), math.radians(roll))

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll])

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([self.pitch, self.yaw, self.roll], dtype=dtype)

    def degrees(self) -> Tuple[float, float, float]:
        return tuple(math.degrees(a) for a in (self.pitch, self.yaw, self.roll))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Square pinhole camera.

    ``half_width`` is the half extent of the image in scene units at the image
    plane; ``focal`` defaults to four times that (about 14 degrees half field of
    view for the object).
    """

    image_size: int = 32
    half_width: float = 1.0
    focal: Optional[float] = None
    principal_point: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")
        if self.focal is None:
            object.__setattr__(self, "focal", 4.0 * self.half_width)
        if self.principal_point is None:
            c = self.image_size / 2.0
            object.__setattr__(self, "principal_point", (c, c))
        if self.focal <= 0:
            raise ValueError("focal must be positive")

    @property
    def pixels_per_unit(self) -> float:
        return self.image_size / (2.0 * self.half_width)

    @property
    def pixels_per_radian(self) -> float:
        return self.focal * self.pixels_per_unit


@dataclass(frozen=True)
class ViewpointDistribution:
    """Independent uniform ranges per angle, in degrees."""

    pitch: Tuple[float, float] = (-15.0, 15.0)
    yaw: Tuple[float, float] = (-65.0, 65.0)
    roll: Tuple[float, float] = (0.0, 0.0)
    order: str = "xy"

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"rotation order must be one of {ORDERS}")
        for lo, hi in (self.pitch, self.yaw, self.roll):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError("viewpoint ranges must be finite with lo <= hi")

    @classmethod
    def symmetric(cls, pitch=15.0, yaw=65.0, roll=0.0, order="xy"):
        return cls((-pitch, pitch), (-yaw, yaw), (-roll, roll), order)

    @property
    def low(self) -> np.ndarray:
        return np.radians([self.pitch[0], self.yaw[0], self.roll[0]])

    @property
    def high(self) -> np.ndarray:
        return np.radians([self.pitch[1], self.yaw[1], self.roll[1]])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @property
    def active(self) -> np.ndarray:
        """Which angles have a non-degenerate range."""
        return self.high > self.low

    def contains(self, angles, atol: float = 0.0) -> bool:
        a = np.asarray(angles, dtype=float)
        return bool(np.all(a >= self.low - atol) and np.all(a <= self.high + atol))

    def clamp(self, angles: torch.Tensor) -> torch.Tensor:
        """Project onto the box; bounds are rounded inward for low precision dtypes."""
        lo64, hi64 = torch.as_tensor(self.low), torch.as_tensor(self.high)
        lo, hi = lo64.to(angles.dtype), hi64.to(angles.dtype)
        lo = torch.where(lo.double() < lo64, torch.nextafter(lo, hi), lo)
        hi = torch.where(hi.double() > hi64, torch.nextafter(hi, lo), hi)
        return torch.maximum(torch.minimum(angles, hi), lo)

    def max_abs(self) -> np.ndarray:
        return np.maximum(np.abs(self.low), np.abs(self.high))


CELEBA_GAN = ViewpointDistribution.symmetric(pitch=15.0, yaw=65.0, roll=0.0)
CELEBA_AE = ViewpointDistribution.symmetric(pitch=20.0, yaw=75.0, roll=15.0)
TURNTABLE = ViewpointDistribution((15.0, 15.0), (-180.0, 180.0), (0.0, 0.0), "yx")


def sample_viewpoint(dist: ViewpointDistribution, rng: np.random.Generator) -> Viewpoint:
    return Viewpoint(*sample_viewpoints(dist, 1, rng)[0])


def sample_viewpoints(dist: ViewpointDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 3) angles in radians, each uniform on its range."""
    return rng.uniform(dist.low, dist.high, size=(n, 3))


def _axis_rotations(angles: torch.Tensor):
    c, s = torch.cos(angles), torch.sin(angles)
    one, zero = torch.ones_like(c[..., 0]), torch.zeros_like(c[..., 0])

    def mat(rows):
        return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)

    cp, sp = c[..., 0], s[..., 0]
    cy, sy = c[..., 1], s[..., 1]
    cr, sr = c[..., 2], s[..., 2]
    rx = mat([[one, zero, zero], [zero, cp, -sp], [zero, sp, cp]])
    ry = mat([[cy, zero, sy], [zero, one, zero], [-sy, zero, cy]])
    rz = mat([[cr, -sr, zero], [sr, cr, zero], [zero, zero, one]])
    return rx, ry, rz


def rotation_matrix(angles, order: str = "xy") -> torch.Tensor:
    """R = Rz(roll) Rx(pitch) Ry(yaw) for order ``xy``; ``yx`` swaps the last two.

    ``angles`` is a Viewpoint or a (..., 3) tensor.
    """
    if isinstance(angles, Viewpoint):
        angles = angles.as_tensor()
    if order not in ORDERS:
        raise ValueError(f"rotation order must be one of {ORDERS}")
    rx, ry, rz = _axis_rotations(angles)
    if order == "xy":
        return rz @ rx @ ry
    return rz @ ry @ rx


def project(points: torch.Tensor, angles, camera: CameraIntrinsics, order: str = "xy"):
    """Rotate points (..., N, 3) by R(v) and project them.

    Returns ``(pixels, depth, renderable)``: pixels (..., N, 2) as (x, y) with
    y growing downwards, depth (..., N) = distance from the centre of
    projection along the viewing axis, and a mask of points strictly in
    front of the camera.
    """
    if isinstance(angles, Viewpoint):
        angles = angles.as_tensor(points.dtype)
    rot = rotation_matrix(angles, order)
    cam = points @ rot.transpose(-1, -2)
    depth = camera.focal - cam[..., 2]
    renderable = depth > RENDERABLE_EPS
    safe = torch.where(renderable, depth, torch.ones_like(depth))
    scale = camera.focal * camera.pixels_per_unit / safe
    cx, cy = camera.principal_point
    px = cx + cam[..., 0] * scale
    py = cy - cam[..., 1] * scale
    return torch.stack([px, py], dim=-1), depth, renderable


def orthographic(points: torch.Tensor, camera: CameraIntrinsics) -> torch.Tensor:
    """Orthographic pixel positions at zero viewpoint; used as a distortion reference."""
    cx, cy = camera.principal_point
    k = camera.pixels_per_unit
    return torch.stack([cx + points[..., 0] * k, cy - points[..., 1] * k], dim=-1)


def bin_centers(lo: float, hi: float, bins: int) -> np.ndarray:
    if bins == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, bins)
