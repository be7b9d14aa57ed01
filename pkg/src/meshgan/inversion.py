"""Per-image inversion of a frozen generator and the renderer.

Minimizes ``|x_s - R(G(z), v)|^2 + mu |z|^2`` over ``(z, v)`` with Adam,
projecting ``v`` onto the viewpoint box after every step. Several starts run
as one batch; the best iterate seen so far is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from . import camera as cam
from .renderer import DEFAULT_BLUR, SceneRepresentation, render_scenes

Z_PENALTY = 1e-3


@dataclass
class InversionOptions:
    iterations: int = 500
    lr: float = 1e-2
    n_starts: int = 8
    z_penalty: float = Z_PENALTY
    blur_width: float = DEFAULT_BLUR
    grid_per_axis: Optional[int] = None
    z_samples: int = 1
    tol: float = 0.0  # stop once the best residual drops below this
    prune_after: int = 100  # then keep only the ``keep`` best starts
    keep: int = 2
    seed: int = 0


@dataclass
class Candidate:
    z: torch.Tensor
    angles: torch.Tensor
    residual: float


@dataclass
class InversionResult:
    z: torch.Tensor
    angles: torch.Tensor
    scene: SceneRepresentation
    residual: float  # mean squared error per pixel and channel
    iterations: int
    history: List[float] = field(default_factory=list)
    start: int = 0

    def report(self) -> dict:
        return {
            "residual": self.residual,
            "viewpoint_rad": [float(a) for a in self.angles],
            "viewpoint_deg": [math.degrees(float(a)) for a in self.angles],
            "iterations": self.iterations,
            "start": self.start,
        }


def per_pixel_residual(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared error over (H, W, 3), one value per batch entry."""
    return ((x - y) ** 2).flatten(1).mean(1)


def _render(G, z, angles, blur_width):
    return render_scenes(G(z), angles, G.camera, blur_width, G.dist.order)


def _grid_viewpoints(dist: cam.ViewpointDistribution, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) if act else np.array([lo])
            for lo, hi, act in zip(dist.low, dist.high, dist.active)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def invert_grid_init(x_s: torch.Tensor, G, dist: cam.ViewpointDistribution, n_starts: int,
                     seed: int = 0, grid_per_axis: Optional[int] = None, z_samples: int = 1,
                     blur_width: float = DEFAULT_BLUR) -> List[Candidate]:
    """Viewpoint grid crossed with latent draws, ranked by forward residual.

    The first latent draw is the prior mean ``z = 0``; further draws are
    standard normal. ``n_starts == 1`` returns the box centre with ``z = 0``.
    """
    dtype = x_s.dtype
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    if n_starts == 1 and grid_per_axis is None:
        z = torch.zeros(1, G.z_dim, dtype=dtype)
        ang = torch.as_tensor(dist.center, dtype=dtype).unsqueeze(0)
        with torch.no_grad():
            res = per_pixel_residual(_render(G, z, ang, blur_width), x_s.unsqueeze(0))
        return [Candidate(z[0], ang[0], float(res[0]))]
    n_active = max(int(dist.active.sum()), 1)
    if grid_per_axis is None:
        grid_per_axis = max(2, math.ceil((4 * n_starts) ** (1.0 / n_active)))
    views = torch.as_tensor(_grid_viewpoints(dist, grid_per_axis), dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    zs = torch.cat([torch.zeros(1, G.z_dim, dtype=dtype),
                    torch.randn(z_samples - 1, G.z_dim, generator=gen, dtype=dtype)])
    z_all = zs.repeat_interleave(len(views), 0)
    v_all = views.repeat(len(zs), 1)
    res = []
    with torch.no_grad():
        for lo in range(0, len(z_all), 32):
            img = _render(G, z_all[lo : lo + 32], v_all[lo : lo + 32], blur_width)
            res.append(per_pixel_residual(img, x_s.unsqueeze(0)))
    res = torch.cat(res)
    order = torch.argsort(res, stable=True)
    return [Candidate(z_all[i], v_all[i], float(res[i])) for i in order[:n_starts].tolist()]


def _prune(opt, z, v, keep, lr):
    """Restrict the batch of starts to rows ``keep``, carrying Adam moments over."""
    new_z = z.detach()[keep].clone().requires_grad_(True)
    new_v = v.detach()[keep].clone().requires_grad_(True)
    new_opt = torch.optim.Adam([new_z, new_v], lr=lr)
    for old, new in ((z, new_z), (v, new_v)):
        st = opt.state.get(old)
        if st:
            new_opt.state[new] = {k: (t[keep].clone() if t.dim() else t.clone())
                                  for k, t in st.items()}
    return new_opt, new_z, new_v


def invert(x_s: torch.Tensor, G, dist: cam.ViewpointDistribution,
           opts: Optional[InversionOptions] = None) -> InversionResult:
    """Recover ``(z*, v*)`` for an (H, W, 3) image; ``G`` is left untouched."""
    opts = opts or InversionOptions()
    x_s = x_s.detach()
    for p in G.parameters():
        p.requires_grad_(False)
    pool = invert_grid_init(x_s, G, dist, max(opts.n_starts * 2, 1) if opts.n_starts > 1 else 1,
                            opts.seed, opts.grid_per_axis, opts.z_samples, opts.blur_width)
    active, spare = pool[: opts.n_starts], pool[opts.n_starts :]
    z = torch.stack([c.z for c in active]).clone().requires_grad_(True)
    v = torch.stack([c.angles for c in active]).clone().requires_grad_(True)
    best_res = torch.tensor([c.residual for c in active], dtype=torch.float64)
    best_z, best_v = z.detach().clone(), v.detach().clone()
    history = [float(best_res.min())]
    opt = torch.optim.Adam([z, v], lr=opts.lr)
    target = x_s.unsqueeze(0)
    npix = x_s.numel()
    it = 0
    for it in range(1, opts.iterations + 1):
        if history[-1] < opts.tol:
            it -= 1
            break
        if it == opts.prune_after + 1 and len(best_res) > opts.keep:
            keep = torch.argsort(best_res, stable=True)[: opts.keep]
            opt, z, v = _prune(opt, z, v, keep, opts.lr)
            best_res, best_z, best_v = best_res[keep], best_z[keep], best_v[keep]
        opt.zero_grad()
        img = _render(G, z, v, opts.blur_width)
        res = per_pixel_residual(img, target)
        loss_each = res * npix + opts.z_penalty * (z**2).sum(1)
        bad = ~torch.isfinite(loss_each.detach())
        if bool(bad.any()):
            with torch.no_grad():
                for i in bad.nonzero().flatten().tolist():
                    if not spare:
                        raise RuntimeError("inversion diverged on every start")
                    c = spare.pop(0)
                    z[i], v[i] = c.z, c.angles
                    opt.state.clear()
            continue
        # residual of the iterate that was just rendered
        with torch.no_grad():
            cur = res.detach().to(torch.float64)
            better = cur < best_res
            best_res = torch.where(better, cur, best_res)
            best_z[better], best_v[better] = z.detach()[better], v.detach()[better]
        loss_each.sum().backward()
        opt.step()
        with torch.no_grad():
            v.copy_(dist.clamp(v))
        history.append(float(best_res.min()))
    # score the final iterate too
    if opts.iterations > 0:
        with torch.no_grad():
            cur = per_pixel_residual(_render(G, z, v, opts.blur_width), target).to(torch.float64)
            better = cur < best_res
            best_res = torch.where(better, cur, best_res)
            best_z[better], best_v[better] = z.detach()[better], v.detach()[better]
            history.append(float(best_res.min()))
    k = int(torch.argmin(best_res))
    z_star, v_star = best_z[k], dist.clamp(best_v[k])
    with torch.no_grad():
        scene = G(z_star.unsqueeze(0))
    return InversionResult(z_star, v_star, scene, float(best_res[k]), it, history, k)
