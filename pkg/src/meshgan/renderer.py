"""Differentiable triangle rasterizer with linearly matted (blurred) silhouettes.

Every triangle/pixel pair inside a triangle's expanded bounding box becomes a
candidate fragment. Coverage is hard across interior mesh edges, so adjacent
front-facing triangles tile the image without seams. Across contour edges
(the neighbour faces the other way, or there is no neighbour) the coverage
ramps linearly over a band of ``blur_width`` pixels centred on the edge:

    alpha = clamp(0.5 + s / blur_width, 0, 1)

where ``s`` is the signed distance to the contour part of the triangle
boundary (positive inside, rounded at corners). Fragments are sorted front to
back per pixel and alpha-composited over the shifted background, so the image
is a continuous function of vertex positions, colors, background texels and
the viewpoint, and autograd through it yields exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from . import camera as cam
from .background import BackgroundSphere, pixel_centers, sample_background
from .geometry import SurfaceMesh, triangle_adjacency

DEFAULT_BLUR = 1.0
SCREEN_AREA_EPS = 1e-10
# float32 screen coordinates near 16 px carry ~2e-6 px rounding, so twice-areas
# below this many px^2 have unreliable barycentric denominators
SCREEN_AREA_EPS_F32 = 1e-3
_BIG = 1e6


@dataclass
class SceneRepresentation:
    """Generator output: surface positions, per-vertex colors and background."""

    surface: SurfaceMesh
    texture: torch.Tensor
    background: BackgroundSphere

    def __post_init__(self):
        if self.texture.shape != self.surface.positions.shape:
            raise ValueError("texture must hold one RGB value per vertex")
        if not bool(torch.isfinite(self.texture.detach()).all()):
            raise ValueError("texture must be finite")

    @property
    def batched(self) -> bool:
        return self.surface.positions.dim() == 3


@dataclass
class FragmentList:
    """Composited fragments, sorted by (pixel, depth, triangle).

    ``pixel`` is the flat index ``b * H * W + y * W + x``; ``rank`` is the
    fragment's position front to back within its pixel.
    """

    pixel: torch.Tensor
    triangle: torch.Tensor
    depth: torch.Tensor
    barycentric: torch.Tensor
    alpha: torch.Tensor
    rank: torch.Tensor
    weight: torch.Tensor
    residual: torch.Tensor  # transmittance left for the background, per pixel

    def at(self, pixel: int) -> Dict[str, np.ndarray]:
        sel = (self.pixel == pixel).nonzero().flatten()
        return {
            "triangle": self.triangle[sel].numpy(),
            "depth": self.depth[sel].numpy(),
            "alpha": self.alpha[sel].numpy(),
            "weight": self.weight[sel].numpy(),
        }


@dataclass
class SceneGradients:
    positions: torch.Tensor
    colors: torch.Tensor
    background: torch.Tensor
    viewpoint: torch.Tensor

    def slots(self) -> Dict[str, torch.Tensor]:
        return {
            "positions": self.positions,
            "colors": self.colors,
            "background": self.background,
            "viewpoint": self.viewpoint,
        }


class MeshTopology:
    """Triangle list plus edge adjacency, converted once for the rasterizer."""

    def __init__(self, triangles, adjacency=None):
        tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if adjacency is None:
            adjacency = triangle_adjacency(tri)
        self.triangles = torch.as_tensor(tri.copy())
        self.adjacency = torch.as_tensor(np.array(adjacency, dtype=np.int64))

    @classmethod
    def of(cls, mesh: SurfaceMesh) -> "MeshTopology":
        key = id(mesh.topology)
        hit = _TOPOLOGY_CACHE.get(key)
        if hit is None or hit[0] is not mesh.topology:
            hit = (mesh.topology, cls(mesh.topology.triangles, mesh.topology.adjacency))
            _TOPOLOGY_CACHE[key] = hit
        return hit[1]

    def __len__(self):
        return len(self.triangles)


_TOPOLOGY_CACHE: Dict[int, tuple] = {}


def contour_edges(screen: torch.Tensor, live: torch.Tensor, topo: MeshTopology) -> torch.Tensor:
    """(B, T, 3) mask of edges that bound the silhouette or a self-occlusion.

    An edge is a contour edge when it has no neighbour, or when the neighbour
    winds the other way on screen. Degenerate neighbours are looked through
    (treated as continuing the surface).
    """
    a = screen[:, :, 1] - screen[:, :, 0]
    b = screen[:, :, 2] - screen[:, :, 0]
    orient = torch.sign(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    adj = topo.adjacency
    nb = adj.clamp(min=0)
    nb_orient = orient[:, nb]
    nb_live = live[:, nb]
    unshared = (adj < 0).unsqueeze(0)
    flipped = nb_live & (nb_orient != orient.unsqueeze(-1))
    return unshared | flipped


def _candidate_pairs(screen, live, size, pad):
    """Enumerate (triangle, pixel) pairs whose pixel centre lies in the padded bbox."""
    bsz, ntri = live.shape
    lo = screen.amin(dim=2)
    hi = screen.amax(dim=2)
    if pad is not None:
        lo = lo - pad.unsqueeze(-1)
        hi = hi + pad.unsqueeze(-1)
    x0 = torch.ceil(lo[..., 0] - 0.5).clamp(min=0).long()
    y0 = torch.ceil(lo[..., 1] - 0.5).clamp(min=0).long()
    x1 = torch.floor(hi[..., 0] - 0.5).clamp(max=size - 1).long()
    y1 = torch.floor(hi[..., 1] - 0.5).clamp(max=size - 1).long()
    nx = (x1 - x0 + 1).clamp(min=0)
    ny = (y1 - y0 + 1).clamp(min=0)
    count = (nx * ny * live).reshape(-1)
    total = int(count.sum())
    owner = torch.repeat_interleave(torch.arange(bsz * ntri), count)
    start = torch.cumsum(count, 0) - count
    local = torch.arange(total) - start[owner]
    nx_o = nx.reshape(-1)[owner]
    px = x0.reshape(-1)[owner] + local % nx_o
    py = y0.reshape(-1)[owner] + torch.div(local, nx_o, rounding_mode="floor")
    return owner, px, py


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _edge_geometry(verts, p, orient):
    """Signed edge distances, inside test and segment feet for pixel centres p."""
    edge = torch.roll(verts, -1, dims=1) - verts
    rel = p.unsqueeze(1) - verts
    len2 = (edge**2).sum(-1)
    e = _cross(edge, rel) * orient.unsqueeze(-1) / torch.sqrt(len2)
    t = ((rel * edge).sum(-1) / len2).clamp(0, 1)
    gap2 = ((rel - t.unsqueeze(-1) * edge) ** 2).sum(-1)
    return {"e": e, "inside": (e >= 0).all(-1), "t": t, "gap2": gap2}


def _covered(geo, cmask, blur_width):
    """Pairs with non-zero coverage."""
    if blur_width <= 0:
        return geo["inside"]
    e = geo["e"]
    hard_ok = ((e >= 0) | cmask).all(-1)
    half2 = (0.5 * blur_width) ** 2
    near = (cmask & (geo["gap2"] < half2)).any(-1)
    return hard_ok & (geo["inside"] | near)


def render_batch(
    positions: torch.Tensor,
    colors: torch.Tensor,
    topo: MeshTopology,
    background: torch.Tensor,
    angles: torch.Tensor,
    camera: cam.CameraIntrinsics,
    blur_width: float = DEFAULT_BLUR,
    order: str = "xy",
    angular_scale: float = 0.2,
    return_fragments: bool = False,
):
    """Render B scenes sharing one triangle list.

    positions, colors: (B, V, 3); background: (B, Hb, Wb, 3); angles: (B, 3).
    Returns images (B, H, W, 3) and, optionally, the FragmentList.
    """
    if blur_width < 0:
        raise ValueError("blur_width must be non-negative")
    if not bool(torch.isfinite(positions.detach()).all()):
        raise ValueError("non-finite vertex positions")
    bsz = positions.shape[0]
    size = camera.image_size
    npix = size * size
    dtype = positions.dtype

    pix_xy = pixel_centers(size, dtype)
    bg = sample_background(background, pix_xy.expand(bsz, -1, -1), angles, camera, angular_scale)
    bg = bg.reshape(bsz * npix, 3)

    ntri = len(topo)
    if ntri == 0:
        return _finish(bg, None, bsz, size, return_fragments, dtype)

    pix, depth, ok = cam.project(positions, angles, camera, order)
    tri = topo.triangles
    screen = pix[:, tri]  # (B, T, 3, 2)
    with torch.no_grad():
        sd = screen.detach()
        area2 = _cross(sd[:, :, 1] - sd[:, :, 0], sd[:, :, 2] - sd[:, :, 0])
        live = ok[:, tri].all(-1) & (area2.abs() > _area_eps(dtype))
        contour = contour_edges(sd, live, topo)
        pad = (0.5 * blur_width + 1e-9) * contour.any(-1) if blur_width > 0 else None
        owner, px, py = _candidate_pairs(sd, live, size, pad)
        p = torch.stack([px, py], dim=-1).to(dtype) + 0.5
        orient = torch.sign(area2.reshape(-1)[owner])
        cmask = contour.reshape(bsz * ntri, 3)[owner]
        geo = _edge_geometry(sd.reshape(bsz * ntri, 3, 2)[owner], p, orient)
        keep = _covered(geo, cmask, blur_width)
        idx = keep.nonzero().flatten()
        owner, p, orient, cmask = owner[idx], p[idx], orient[idx], cmask[idx]
        px, py = px[idx], py[idx]
        inside = geo["inside"][idx]

    if owner.numel() == 0:
        return _finish(bg, None, bsz, size, return_fragments, dtype)

    verts = screen.reshape(bsz * ntri, 3, 2)[owner]  # (K, 3, 2)
    edge = torch.roll(verts, -1, dims=1) - verts
    rel = p.unsqueeze(1) - verts
    cr = _cross(edge, rel)  # (K, 3) twice the signed sub-areas
    # affine barycentrics; vertex i is opposite edge (i + 1) % 3
    w_true = torch.roll(cr, -1, dims=1) / cr.sum(-1, keepdim=True)

    if blur_width > 0:
        length2 = (edge**2).sum(-1)
        e = cr * orient.unsqueeze(-1) / torch.sqrt(length2)  # positive inside
        t = ((rel * edge).sum(-1) / length2).clamp(0.0, 1.0)
        gap2 = ((rel - t.unsqueeze(-1) * edge) ** 2).sum(-1)
        # line distance where the foot is interior: same value, but its gradient
        # stays well defined on the edge itself
        interior = (t > 0) & (t < 1)
        dist = torch.where(interior, e.abs(), torch.sqrt(gap2.clamp(min=1e-30)))
        s_in, k_in = torch.where(cmask, e, torch.full_like(e, _BIG)).min(-1)
        d_out, k_out = torch.where(cmask, dist, torch.full_like(dist, _BIG)).min(-1)
        s = torch.where(inside, s_in, -d_out)
        alpha = (0.5 + s / blur_width).clamp(0.0, 1.0)
        # colour/depth at the foot on the nearest contour edge, blended
        # quadratically into the true barycentrics across the inner half-band
        k = torch.where(inside, k_in, k_out).unsqueeze(-1)
        tk = t.gather(1, k)
        w_near = torch.zeros_like(w_true).scatter(1, k, 1.0 - tk)
        w_near = w_near.scatter(1, (k + 1) % 3, tk)
        beta = torch.where(inside, (2.0 * s_in / blur_width).clamp(0.0, 1.0),
                           torch.zeros_like(s_in)).unsqueeze(-1)
        solid = (inside & (s_in >= 0.5 * blur_width)).unsqueeze(-1)
        weights = torch.where(solid, w_true, w_near + beta * (w_true - w_near))
    else:
        alpha = torch.ones_like(cr[:, 0])
        weights = w_true

    tri_id = owner % ntri
    batch_id = torch.div(owner, ntri, rounding_mode="floor")
    vid = tri[tri_id]  # (K, 3)
    col_v = colors[batch_id.unsqueeze(-1), vid]  # (K, 3, 3)
    color_k = (weights.unsqueeze(-1) * col_v).sum(1)
    pixel_k = batch_id * npix + py * size + px

    with torch.no_grad():
        depth_k = (weights.detach() * depth.detach()[batch_id.unsqueeze(-1), vid]).sum(-1)
        order_idx = _fragment_order(pixel_k, depth_k, tri_id)
        pixel_s = pixel_k[order_idx]
        rank = _segment_rank(pixel_s)

    frag = dict(
        pixel=pixel_s,
        triangle=tri_id[order_idx],
        depth=depth_k[order_idx],
        barycentric=weights[order_idx],
        alpha=alpha[order_idx],
        color=color_k[order_idx],
        rank=rank,
    )
    return _finish(bg, frag, bsz, size, return_fragments, dtype)


def _area_eps(dtype) -> float:
    return SCREEN_AREA_EPS if dtype == torch.float64 else SCREEN_AREA_EPS_F32


def _fragment_order(pixel, depth, tri_id):
    keys = (tri_id.numpy(), depth.numpy(), pixel.numpy())
    return torch.as_tensor(np.lexsort(keys))


def _segment_rank(sorted_pixel):
    n = sorted_pixel.numel()
    if n == 0:
        return sorted_pixel.clone()
    pos = torch.arange(n)
    new = torch.ones(n, dtype=torch.bool)
    new[1:] = sorted_pixel[1:] != sorted_pixel[:-1]
    start = torch.where(new, pos, torch.zeros_like(pos))
    start = torch.cummax(start, 0).values
    return pos - start


def _finish(bg, frag, bsz, size, return_fragments, dtype):
    npix = size * size
    if frag is None or frag["pixel"].numel() == 0:
        img = bg.reshape(bsz, size, size, 3)
        if return_fragments:
            empty = torch.zeros(0, dtype=torch.long)
            fl = FragmentList(empty, empty, torch.zeros(0, dtype=dtype),
                              torch.zeros(0, 3, dtype=dtype), torch.zeros(0, dtype=dtype),
                              empty, torch.zeros(0, dtype=dtype),
                              torch.ones(bsz * npix, dtype=dtype))
            return img, fl
        return img

    pixel, rank = frag["pixel"], frag["rank"]
    depth_k = int(rank.max()) + 1
    dense_a = torch.zeros(bsz * npix, depth_k, dtype=dtype).index_put((pixel, rank), frag["alpha"])
    dense_c = torch.zeros(bsz * npix, depth_k, 3, dtype=dtype).index_put((pixel, rank), frag["color"])
    trans = torch.cumprod(1.0 - dense_a, dim=1)
    before = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    weight = dense_a * before
    residual = trans[:, -1]
    out = (weight.unsqueeze(-1) * dense_c).sum(1) + residual.unsqueeze(-1) * bg
    img = out.reshape(bsz, size, size, 3)
    if not return_fragments:
        return img
    fl = FragmentList(
        pixel=pixel,
        triangle=frag["triangle"],
        depth=frag["depth"],
        barycentric=frag["barycentric"].detach(),
        alpha=frag["alpha"].detach(),
        rank=rank,
        weight=weight.detach()[pixel, rank],
        residual=residual.detach(),
    )
    return img, fl


# ----------------------------------------------------------------- scene API


def _as_batch(scene: SceneRepresentation, viewpoint):
    pos = scene.surface.positions
    col = scene.texture
    tex = scene.background.texture
    if isinstance(viewpoint, cam.Viewpoint):
        ang = viewpoint.as_tensor(pos.dtype)
    else:
        ang = torch.as_tensor(viewpoint, dtype=pos.dtype)
    if not scene.batched:
        pos, col = pos.unsqueeze(0), col.unsqueeze(0)
    if tex.dim() == 3:
        tex = tex.unsqueeze(0).expand(pos.shape[0], -1, -1, -1)
    if ang.dim() == 1:
        ang = ang.unsqueeze(0).expand(pos.shape[0], -1)
    return pos, col, tex, ang


def rasterize(
    scene: SceneRepresentation,
    viewpoint,
    camera: cam.CameraIntrinsics,
    blur_width: float = DEFAULT_BLUR,
    order: str = "xy",
):
    """Render a scene; returns ``(image, fragments)``.

    The image is (H, W, 3) for a single scene or (B, H, W, 3) when the scene
    is batched.
    """
    pos, col, tex, ang = _as_batch(scene, viewpoint)
    img, frags = render_batch(
        pos, col, MeshTopology.of(scene.surface), tex, ang, camera, blur_width, order,
        scene.background.angular_scale, return_fragments=True,
    )
    return (img if scene.batched else img[0]), frags


@dataclass
class RenderContext:
    """Inputs and output of one forward pass, kept for the matching backward pass."""

    scene: SceneRepresentation
    viewpoint: object
    camera: cam.CameraIntrinsics
    blur_width: float
    order: str
    image: torch.Tensor
    fragments: FragmentList
    _leaves: tuple = field(repr=False, default=())

    def matches(self, scene, viewpoint, camera, blur_width, order="xy") -> bool:
        pos, col, tex, ang = _as_batch(scene, viewpoint)
        mine = [leaf.detach() for leaf in self._leaves]
        same = all(a.shape == b.shape and torch.equal(a, b)
                   for a, b in zip(mine, (pos, col, tex, ang)))
        return (
            same
            and camera == self.camera
            and blur_width == self.blur_width
            and order == self.order
            and scene.surface.topology is self.scene.surface.topology
        )


def forward(scene, viewpoint, camera, blur_width=DEFAULT_BLUR, order="xy") -> RenderContext:
    """Differentiable forward pass that records what the backward pass needs."""
    leaves = tuple(t.detach().clone().requires_grad_(True) for t in _as_batch(scene, viewpoint))
    pos, col, tex, ang = leaves
    img, frags = render_batch(pos, col, MeshTopology.of(scene.surface), tex, ang, camera,
                              blur_width, order, scene.background.angular_scale,
                              return_fragments=True)
    return RenderContext(scene, viewpoint, camera, blur_width, order,
                         img if scene.batched else img[0], frags, leaves)


def rasterize_backward(scene, viewpoint, camera, blur_width, upstream, order="xy",
                       context: Optional[RenderContext] = None) -> SceneGradients:
    """Vector-Jacobian product of the rendered image with ``upstream``.

    With a ``context`` from :func:`forward`, the inputs must be the ones that
    produced it.
    """
    if context is None:
        context = forward(scene, viewpoint, camera, blur_width, order)
    elif not context.matches(scene, viewpoint, camera, blur_width, order):
        raise ValueError("backward inputs differ from the recorded forward pass")
    upstream = torch.as_tensor(upstream, dtype=context.image.dtype)
    if upstream.shape != context.image.shape:
        raise ValueError("upstream gradient must match the image shape")
    grads = torch.autograd.grad(context.image, context._leaves, upstream,
                                retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, context._leaves)]
    pos_g, col_g, tex_g, ang_g = grads
    if not scene.batched:
        pos_g, col_g = pos_g[0], col_g[0]
        ang_g = ang_g.sum(0)
        if scene.background.texture.dim() == 3:
            tex_g = tex_g.sum(0)
    return SceneGradients(pos_g, col_g, tex_g, ang_g)


def render_image(scene, viewpoint, camera, blur_width=DEFAULT_BLUR, order="xy") -> torch.Tensor:
    return rasterize(scene, viewpoint, camera, blur_width, order)[0]


def render_scenes(scene: SceneRepresentation, angles, camera: cam.CameraIntrinsics,
                  blur_width: float = DEFAULT_BLUR, order: str = "xy") -> torch.Tensor:
    """Differentiable render of a batched scene at (B, 3) angles; (B, H, W, 3)."""
    pos, col, tex, ang = _as_batch(scene, angles)
    return render_batch(pos, col, MeshTopology.of(scene.surface), tex, ang, camera,
                        blur_width, order, scene.background.angular_scale)


# ----------------------------------------------------------------- gradcheck

GRADCHECK_SLOTS = ("positions", "colors", "background", "viewpoint", "silhouette")
# central-difference steps: scene units, colour units, texel units, radians
_FD_STEP = {"positions": 1e-7, "colors": 1e-4, "background": 1e-4, "viewpoint": 1e-8,
            "silhouette": 1e-7}


@dataclass
class GradcheckReport:
    blur_width: float
    max_rel_error: Dict[str, float]
    checked: Dict[str, int]
    silhouette_pixel: Optional[tuple] = None

    def passed(self, tol: float = 1e-3, slots: Optional[Sequence[str]] = None) -> bool:
        slots = GRADCHECK_SLOTS if slots is None else slots
        return all(self.max_rel_error[s] < tol for s in slots)

    def lines(self):
        return [f"{s:<11s} max_rel_err={self.max_rel_error[s]:.3e} n={self.checked[s]}"
                for s in GRADCHECK_SLOTS]


def random_scene(seed: int, rows: int = 9, cols: int = 12, image_size: int = 32,
                 dist: Optional[cam.ViewpointDistribution] = None):
    """Small bumpy scene for gradient checks: ``(scene, viewpoint, camera)``."""
    from .background import texture_side
    from .geometry import build_tessellation

    dist = cam.CELEBA_AE if dist is None else dist
    rng = np.random.default_rng(seed)
    topo = build_tessellation(rows, cols)
    rho = torch.as_tensor(0.5 + 0.25 * rng.random((rows, cols)))
    mesh = SurfaceMesh.from_radial(rho, topo)
    camera = cam.CameraIntrinsics(image_size=image_size)
    side = texture_side(dist, camera)
    bg = BackgroundSphere(torch.as_tensor(rng.random((side, side, 3))))
    colors = torch.as_tensor(rng.random((topo.num_vertices, 3)))
    view = cam.Viewpoint(*cam.sample_viewpoints(dist, 1, rng)[0])
    return SceneRepresentation(mesh, colors, bg), view, camera


def _rel_errors(analytic: torch.Tensor, numeric: torch.Tensor, floor: float) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / denom


def _pick_entries(grad: torch.Tensor, n: int, rng: np.random.Generator,
                  allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """Half among entries with a significant analytic value, half uniformly."""
    flat = grad.reshape(-1).abs().numpy()
    pool = np.arange(flat.size) if allowed is None else np.flatnonzero(allowed)
    if pool.size == 0:
        return np.zeros(0, dtype=np.int64)
    peak = flat[pool].max()
    big = pool[flat[pool] >= 1e-2 * peak] if peak > 0 else np.zeros(0, int)
    k_big = min(len(big), n - n // 2)
    chosen = list(rng.choice(big, size=k_big, replace=False)) if k_big else []
    rest = rng.choice(pool, size=min(pool.size, n - k_big), replace=False)
    return np.unique(np.array(chosen + list(rest), dtype=np.int64))


def _fd_batch(fn, base, index, step):
    """Central differences of ``fn`` (batched loss) w.r.t. flat entries of ``base[0]``."""
    n = len(index)
    rep = base.expand((2 * n,) + tuple(base.shape[1:])).clone()
    flat = rep.reshape(2 * n, -1)
    idx = torch.as_tensor(index)
    rows = torch.arange(n)
    flat[rows, idx] += step
    flat[rows + n, idx] -= step
    vals = fn(rep, 2 * n)
    return (vals[:n] - vals[n:]) / (2 * step)


def _silhouette_candidates(pos, ang, topo, camera, order, rng, tries=64):
    """Yield cameras whose principal point puts a contour edge through a pixel centre.

    Each item is ``(camera, triangle, edge, (row, col))``.
    """
    with torch.no_grad():
        pix, _, ok = cam.project(pos, ang, camera, order)
        screen = pix[:, topo.triangles]
        area2 = _cross(screen[:, :, 1] - screen[:, :, 0], screen[:, :, 2] - screen[:, :, 0])
        live = ok[:, topo.triangles].all(-1) & (area2.abs() > SCREEN_AREA_EPS)
        contour = contour_edges(screen, live, topo)[0] & live[0].unsqueeze(-1)
    cand = contour.nonzero().numpy()
    rng.shuffle(cand)
    size = camera.image_size
    cx, cy = camera.principal_point
    for t, k in cand[:tries]:
        va, vb = int(topo.triangles[t, k]), int(topo.triangles[t, (k + 1) % 3])
        mid = 0.5 * (pix[0, va] + pix[0, vb])
        target = torch.floor(mid) + 0.5
        if not (0 <= target[0] < size and 0 <= target[1] < size):
            continue
        dx, dy = (target - mid).tolist()
        shifted = cam.CameraIntrinsics(camera.image_size, camera.half_width, camera.focal,
                                       (cx + dx, cy + dy))
        yield shifted, int(t), int(k), (int(target[1]), int(target[0]))


def _silhouette_setup(pos, col, tex, ang, topo, camera, order, scale, rng):
    """Pick a contour edge that is front-most at its constructed pixel.

    Only the neighbour across the edge may precede it. Visibility is judged
    with a unit blur so every blur width checks the same construction.
    """
    for shifted, t, k, (py, px) in _silhouette_candidates(pos, ang, topo, camera, order, rng):
        with torch.no_grad():
            _, frags = render_batch(pos, col, topo, tex, ang, shifted, 1.0, order, scale,
                                    return_fragments=True)
        here = frags.pixel == py * camera.image_size + px
        mine = here & (frags.triangle == t)
        if not bool(mine.any()) or abs(float(frags.alpha[mine][0]) - 0.5) > 1e-6:
            continue
        front = here & (frags.rank < frags.rank[mine][0])
        partner = int(topo.adjacency[t, k])
        if bool((frags.triangle[front] == partner).all()):
            verts = (int(topo.triangles[t, k]), int(topo.triangles[t, (k + 1) % 3]))
            return shifted, verts, (py, px)
    return None


def gradcheck(scene: SceneRepresentation, viewpoint, camera: cam.CameraIntrinsics,
              blur_width: float = DEFAULT_BLUR, seed: int = 0, n_entries: int = 12,
              order: str = "xy") -> GradcheckReport:
    """Compare analytic scene gradients with central differences.

    The scalar under test is ``sum(u * image)`` for a seeded random ``u``.
    Each slot samples ``n_entries`` entries; the ``silhouette`` slot moves the
    principal point so that a visible contour edge passes exactly through a
    pixel centre and checks the coordinates of that edge's end points.
    Vertices sharing a position with another vertex are not perturbed.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-4 * max|a_slot|)``.
    """
    if scene.batched:
        raise ValueError("gradcheck expects a single scene")
    rng = np.random.default_rng(seed)
    f64 = torch.float64
    scene = SceneRepresentation(
        SurfaceMesh(scene.surface.topology, scene.surface.positions.detach().to(f64)),
        scene.texture.detach().to(f64),
        BackgroundSphere(scene.background.texture.detach().to(f64), scene.background.angular_scale),
    )
    base = _as_batch(scene, viewpoint)
    base = tuple(b[:1].contiguous() for b in base)
    topo = MeshTopology.of(scene.surface)
    scale = scene.background.angular_scale
    size = camera.image_size
    upstream = torch.as_tensor(rng.standard_normal((size, size, 3)))

    def batched_loss(slot, camera_):
        def fn(value, n):
            args = [b.expand((n,) + tuple(b.shape[1:])) for b in base]
            args[slot] = value
            img = render_batch(*args[:2], topo, args[2], args[3], camera_, blur_width, order, scale)
            return (img * upstream).sum((1, 2, 3))
        return fn

    grads = rasterize_backward(scene, viewpoint, camera, blur_width, upstream, order).slots()
    names = ("positions", "colors", "background", "viewpoint")
    errors, counts = {}, {}
    # moving one of several coincident vertices (collapsed poles) un-degenerates
    # triangles, which is not differentiable; leave those out
    pos0 = base[0][0]
    shared = (torch.cdist(pos0, pos0) == 0).sum(-1) > 1
    allowed = {"positions": (~shared).repeat_interleave(3).numpy()}
    for slot, name in enumerate(names):
        g = grads[name]
        index = _pick_entries(g, n_entries, rng, allowed.get(name))
        numeric = _fd_batch(batched_loss(slot, camera), base[slot], index, _FD_STEP[name])
        analytic = g.reshape(-1)[torch.as_tensor(index)]
        floor = 1e-4 * float(g.abs().max()) + 1e-12
        rel = _rel_errors(analytic, numeric, floor)
        errors[name] = float(rel.max()) if len(index) else 0.0
        counts[name] = len(index)

    setup = _silhouette_setup(*base[:2], base[2], base[3], topo, camera, order, scale, rng)
    pixel = None
    if setup is None:
        errors["silhouette"], counts["silhouette"] = float("nan"), 0
    else:
        shifted, verts, pixel = setup
        g = rasterize_backward(scene, viewpoint, shifted, blur_width, upstream, order).positions
        index = np.array([3 * v + c for v in verts for c in range(3)])
        numeric = _fd_batch(batched_loss(0, shifted), base[0], index, _FD_STEP["silhouette"])
        analytic = g.reshape(-1)[torch.as_tensor(index)]
        floor = 1e-4 * float(analytic.abs().max()) + 1e-12
        errors["silhouette"] = float(_rel_errors(analytic, numeric, floor).max())
        counts["silhouette"] = len(index)
    return GradcheckReport(blur_width, errors, counts, pixel)
