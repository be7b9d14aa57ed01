"""Ambiguity probes (depth inversion, canonical-frame offset) and the
ground-truth shape metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .. import camera as cam
from ..background import BackgroundSphere, texture_side
from ..geometry import SurfaceMesh, build_tessellation, spherical_to_cartesian
from ..renderer import SceneRepresentation, render_scenes

# ------------------------------------------------------------- hollow mask


def invert_relief(rho: torch.Tensor) -> torch.Tensor:
    """Reflect a radial grid through its mean: ``2 * mean - rho``.

    A grid that is constant up to a few ulps (a sphere whose radii were read
    back from vertex positions) maps to itself exactly.
    """
    flat = rho.reshape(rho.shape[:-2] + (-1,))
    mean = flat.mean(-1, keepdim=True)
    spread = flat.amax(-1, keepdim=True) - flat.amin(-1, keepdim=True)
    flat_relief = spread <= 8 * torch.finfo(flat.dtype).eps * flat.abs().amax(-1, keepdim=True)
    return torch.where(flat_relief, flat, 2.0 * mean - flat).reshape(rho.shape)


def normalized_gap(a: torch.Tensor, b: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """``|a - b| / |a - reference|`` per image over (H, W, 3).

    ``reference`` is the background-only render, so the denominator is the
    object's share of the image.
    """
    num = (a - b).flatten(-3).norm(dim=-1)
    den = (a - reference).flatten(-3).norm(dim=-1)
    return torch.where(den > 0, num / den.clamp(min=1e-300), torch.zeros_like(num))


@dataclass
class HollowMaskReport:
    views: np.ndarray  # (K, 3) radians
    gaps: np.ndarray  # (K,)

    def gap_at(self, pitch_deg: float = 0.0, yaw_deg: float = 0.0) -> float:
        target = np.radians([pitch_deg, yaw_deg])
        k = int(np.argmin(np.abs(self.views[:, :2] - target).sum(1)))
        return float(self.gaps[k])

    def to_dict(self) -> dict:
        return {"views_deg": np.degrees(self.views).tolist(), "gaps": self.gaps.tolist()}


def _radial_from_mesh(mesh: SurfaceMesh) -> torch.Tensor:
    t = mesh.topology
    return mesh.radii().reshape(mesh.radii().shape[:-1] + (t.grid_rows, t.grid_cols))


def probe_views(dist: cam.ViewpointDistribution, per_axis: int = 9,
                extra: Sequence[Sequence[float]] = ((0.0, 0.0), (0.0, 60.0))) -> np.ndarray:
    """Yaw sweep at pitch 0 over the support plus ``extra`` (pitch, yaw) pairs in degrees."""
    yaws = np.linspace(dist.low[1], dist.high[1], per_axis)
    views = [[0.0, y, 0.0] for y in yaws]
    views += [[math.radians(p), math.radians(y), 0.0] for p, y in extra]
    return np.asarray(views)


def hollow_mask_probe(mesh: SurfaceMesh, texture: torch.Tensor, dist: cam.ViewpointDistribution,
                      camera: Optional[cam.CameraIntrinsics] = None,
                      background: Optional[BackgroundSphere] = None, blur_width: float = 1.0,
                      views: Optional[np.ndarray] = None) -> HollowMaskReport:
    """Render a surface and its depth-inverted twin with the same per-vertex
    colors and report the normalized image gap at each view."""
    camera = camera or cam.CameraIntrinsics()
    views = probe_views(dist) if views is None else np.asarray(views, dtype=np.float64)
    if background is None:
        side = texture_side(cam.ViewpointDistribution.symmetric(90.0, 90.0, 90.0), camera)
        background = BackgroundSphere.constant(side, (1.0, 1.0, 1.0), dtype=torch.float64)
    rho = _radial_from_mesh(mesh).detach().to(torch.float64)
    topo = mesh.topology
    radii = torch.stack([rho, invert_relief(rho), torch.full_like(rho, 1e-6)])
    pos = spherical_to_cartesian(radii, topo)
    tex = texture.detach().to(torch.float64).expand(3, -1, -1)
    scene = SceneRepresentation(SurfaceMesh(topo, pos), tex, background)
    gaps = []
    with torch.no_grad():
        for v in views:
            ang = torch.as_tensor(v, dtype=torch.float64).expand(3, 3)
            img = render_scenes(scene, ang, camera, blur_width, dist.order)
            gaps.append(float(normalized_gap(img[0], img[1], img[2])))
    return HollowMaskReport(views, np.asarray(gaps))


# ------------------------------------------------------ reference ambiguity


@dataclass
class ReferenceReport:
    offsets_deg: List[Optional[float]]
    search_deg: np.ndarray = field(repr=False)

    @property
    def defined(self) -> List[float]:
        return [o for o in self.offsets_deg if o is not None]

    @property
    def median(self) -> Optional[float]:
        d = self.defined
        return float(np.median(d)) if d else None

    def to_dict(self) -> dict:
        return {"offsets_deg": self.offsets_deg, "median_deg": self.median,
                "undefined": sum(o is None for o in self.offsets_deg)}


def reference_ambiguity_probe(G, n: int = 8, seed: int = 0, search_deg: float = 90.0,
                              step_deg: float = 0.5, blur_width: float = 1.0,
                              flat_tol: float = 1e-3, z=None) -> ReferenceReport:
    """Estimate each sample's canonical-frame yaw offset.

    For an object that is mirror symmetric in its own frame, the mirrored
    frontal render equals the render at yaw ``-2 * offset``. The offset is
    read off a grid search over yaw; when the matching cost is flat (to
    ``flat_tol`` in per-pixel mean squared error) the offset is undefined.
    Backgrounds are replaced by a plain one so only the object is compared.
    """
    if z is None:
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(n, G.z_dim, generator=gen)
    yaws = np.arange(-search_deg, search_deg + 0.5 * step_deg, step_deg)
    camera = G.camera
    wide = cam.ViewpointDistribution.symmetric(0.0, search_deg, 0.0)
    side = texture_side(wide, camera, G.angular_scale)
    offsets: List[Optional[float]] = []
    with torch.no_grad():
        scenes = G(z)
        dtype = scenes.texture.dtype
        plain = BackgroundSphere(torch.ones(side, side, 3, dtype=dtype), G.angular_scale)
        ang = torch.zeros(len(yaws), 3, dtype=dtype)
        ang[:, 1] = torch.as_tensor(np.radians(yaws), dtype=dtype)
        topo = scenes.surface.topology
        for i in range(z.shape[0]):
            def batch(m):
                pos = scenes.surface.positions[i : i + 1].expand(m, -1, -1)
                return SceneRepresentation(SurfaceMesh(topo, pos),
                                           scenes.texture[i : i + 1].expand(m, -1, -1), plain)
            front = render_scenes(batch(1), ang[:1] * 0, camera, blur_width, G.dist.order)[0]
            mirrored = front.flip(1)
            sweep = [render_scenes(batch(len(ang[lo : lo + 64])), ang[lo : lo + 64], camera,
                                   blur_width, G.dist.order) for lo in range(0, len(yaws), 64)]
            cost = ((torch.cat(sweep) - mirrored) ** 2).flatten(1).mean(1).double().numpy()
            if cost.max() - cost.min() < flat_tol:
                offsets.append(None)
                continue
            offsets.append(-0.5 * _refine(yaws, cost, int(np.argmin(cost))))
    return ReferenceReport(offsets, yaws)


def _refine(xs: np.ndarray, cost: np.ndarray, k: int) -> float:
    """Parabolic refinement of a grid minimum."""
    if 0 < k < len(xs) - 1:
        c0, c1, c2 = cost[k - 1], cost[k], cost[k + 1]
        den = c0 - 2.0 * c1 + c2
        if den > 0:
            return float(xs[k] + 0.5 * (c0 - c2) / den * (xs[1] - xs[0]))
    return float(xs[k])


# ----------------------------------------------------------- radial error


def sample_radial(rho: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of a (rows, cols) radial grid at unit directions (N, 3).

    Rows run over theta in [0, pi] from +z; columns over phi in [0, 2 pi)
    and wrap around.
    """
    rows, cols = rho.shape[-2:]
    d = directions.to(rho.dtype)
    theta = torch.arccos(d[:, 2].clamp(-1.0, 1.0))
    phi = torch.remainder(torch.atan2(d[:, 1], d[:, 0]), 2.0 * math.pi)
    r = theta / math.pi * (rows - 1)
    c = phi / (2.0 * math.pi) * cols
    r0 = r.floor().clamp(0, rows - 2).long()
    c0 = c.floor().long() % cols
    fr = (r - r0).clamp(0.0, 1.0)
    fc = c - c.floor()
    c1 = (c0 + 1) % cols
    top = rho[r0, c0] * (1 - fc) + rho[r0, c1] * fc
    bot = rho[r0 + 1, c0] * (1 - fc) + rho[r0 + 1, c1] * fc
    return top * (1 - fr) + bot * fr


def rotate_radial(rho: torch.Tensor, yaw: float) -> torch.Tensor:
    """Radial grid of the surface rotated by ``yaw`` about the vertical axis."""
    rows, cols = rho.shape[-2:]
    topo = build_tessellation(rows, cols)
    dirs = torch.as_tensor(topo.directions(), dtype=rho.dtype)
    rot = cam.rotation_matrix(torch.tensor([0.0, yaw, 0.0], dtype=rho.dtype))
    # rho_rot(d) = rho(R^T d)
    return sample_radial(rho, dirs @ rot).reshape(rows, cols)


def radial_error(rho_est: torch.Tensor, rho_true: torch.Tensor, register_deg: float = 0.0,
                 step_deg: float = 1.0) -> dict:
    """Mean absolute radial error, relative to the true mean radius.

    With ``register_deg`` > 0 the estimate is first yaw-rotated by the grid
    offset in ``[-register_deg, register_deg]`` that minimizes the error.
    """
    rho_est = rho_est.detach().to(torch.float64)
    rho_true = rho_true.detach().to(torch.float64)
    best = (float((rho_est - rho_true).abs().mean()), 0.0)
    if register_deg > 0:
        for deg in np.arange(-register_deg, register_deg + 0.5 * step_deg, step_deg):
            if deg == 0:
                continue
            rot = rotate_radial(rho_est, math.radians(deg))
            err = float((rot - rho_true).abs().mean())
            if err < best[0]:
                best = (err, float(deg))
    scale = float(rho_true.mean())
    return {"mae": best[0], "relative": best[0] / scale, "yaw_deg": best[1]}
