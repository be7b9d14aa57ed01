"""Background texture on a far sphere, imaged as a shifted window.

A viewpoint change moves the background by a 2D shift that is linear in
(yaw, pitch). ``angular_scale`` < 1 emulates a wider field of view for the
background than for the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .camera import CameraIntrinsics, Viewpoint, ViewpointDistribution

DEFAULT_ANGULAR_SCALE = 0.2


@dataclass
class BackgroundSphere:
    texture: torch.Tensor  # (Hb, Wb, 3) or batched (B, Hb, Wb, 3)
    angular_scale: float = DEFAULT_ANGULAR_SCALE

    @property
    def side(self) -> int:
        return self.texture.shape[-2]

    @classmethod
    def constant(cls, side: int, color=(1.0, 1.0, 1.0), angular_scale=DEFAULT_ANGULAR_SCALE,
                 dtype=torch.float64):
        tex = torch.tensor(color, dtype=dtype).expand(side, side, 3).clone()
        return cls(tex, angular_scale)


def max_shift(dist: ViewpointDistribution, camera: CameraIntrinsics,
              angular_scale: float = DEFAULT_ANGULAR_SCALE) -> float:
    """Largest |shift| in pixels reachable inside the viewpoint support."""
    amax = dist.max_abs()
    return angular_scale * camera.pixels_per_radian * float(max(amax[0], amax[1]))


def texture_side(dist: ViewpointDistribution, camera: CameraIntrinsics,
                 angular_scale: float = DEFAULT_ANGULAR_SCALE) -> int:
    """image side + 2 * ceil(max shift) + 2."""
    return camera.image_size + 2 * math.ceil(max_shift(dist, camera, angular_scale)) + 2


def background_shift(angles, camera: CameraIntrinsics,
                     angular_scale: float = DEFAULT_ANGULAR_SCALE) -> torch.Tensor:
    """(dx, dy) in pixels for (..., 3) angles; the lookup window moves by this much."""
    if isinstance(angles, Viewpoint):
        angles = angles.as_tensor()
    k = angular_scale * camera.pixels_per_radian
    return torch.stack([angles[..., 1] * k, angles[..., 0] * k], dim=-1)


def _bilinear(texture: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (B, Hb, Wb, C) at continuous index coords u (col), v (row) of shape (B, N)."""
    b, hb, wb, ch = texture.shape
    lo_u, lo_v = torch.floor(u.detach()), torch.floor(v.detach())
    fu, fv = (u - lo_u).unsqueeze(-1), (v - lo_v).unsqueeze(-1)
    i0 = lo_u.long().clamp(0, wb - 1)
    j0 = lo_v.long().clamp(0, hb - 1)
    i1 = (i0 + 1).clamp(max=wb - 1)
    j1 = (j0 + 1).clamp(max=hb - 1)
    flat = texture.reshape(b, hb * wb, ch)

    def gather(jj, ii):
        idx = (jj * wb + ii).unsqueeze(-1).expand(-1, -1, ch)
        return torch.gather(flat, 1, idx)

    top = gather(j0, i0) * (1 - fu) + gather(j0, i1) * fu
    bot = gather(j1, i0) * (1 - fu) + gather(j1, i1) * fu
    return top * (1 - fv) + bot * fv


def sample_background(texture: torch.Tensor, pixels: torch.Tensor, angles: torch.Tensor,
                      camera: CameraIntrinsics,
                      angular_scale: float = DEFAULT_ANGULAR_SCALE) -> torch.Tensor:
    """Colors at pixel-centre coordinates ``pixels`` (B, N, 2) for viewpoints (B, 3).

    The image pixel centre ``(x, y)`` reads the texture at
    ``(x, y) + margin + shift(v)``, where texture texel centres sit at
    integer + 0.5 and the margin centres the image inside the texture.
    """
    hb, wb = texture.shape[-3], texture.shape[-2]
    mx = (wb - camera.image_size) / 2.0
    my = (hb - camera.image_size) / 2.0
    shift = background_shift(angles, camera, angular_scale)
    u = pixels[..., 0] + mx + shift[..., 0:1] - 0.5
    v = pixels[..., 1] + my + shift[..., 1:2] - 0.5
    with torch.no_grad():
        if bool((u < 0).any() or (u > wb - 1).any() or (v < 0).any() or (v > hb - 1).any()):
            raise ValueError("background shift leaves the texture; enlarge the texture")
    return _bilinear(texture, u, v)


def pixel_centers(image_size: int, dtype=torch.float64) -> torch.Tensor:
    """(H*W, 2) pixel centres as (x, y), row-major."""
    r = torch.arange(image_size, dtype=dtype) + 0.5
    yy, xx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def background_image(bg: BackgroundSphere, angles, camera: CameraIntrinsics) -> torch.Tensor:
    """The shifted background window alone, (H, W, 3) or (B, H, W, 3)."""
    tex = bg.texture
    batched = tex.dim() == 4
    if isinstance(angles, Viewpoint):
        angles = angles.as_tensor(tex.dtype)
    if not batched:
        tex, angles = tex.unsqueeze(0), angles.unsqueeze(0)
    n = camera.image_size
    pix = pixel_centers(n, tex.dtype).expand(tex.shape[0], -1, -1)
    img = sample_background(tex, pix, angles, camera, bg.angular_scale)
    img = img.reshape(tex.shape[0], n, n, 3)
    return img if batched else img[0]
