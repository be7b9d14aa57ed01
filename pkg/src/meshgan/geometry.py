"""Sphere tessellation, hierarchical radial fields and mesh helpers.

Vertices live on a (rows x cols) grid over polar angle theta (measured
from +z, rows span [0, pi] inclusive) and azimuth phi (cols span [0, 2*pi),
the seam is closed by index wrapping). Vertex ``(r, c)`` has index
``r * cols + c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np
import torch

NUM_BASES = 33
MIN_LEVEL = 2
FULL_MAX_LEVEL = 6
FULL_OUTPUT_SIDE = 129
DEFAULT_MAX_LEVEL = 5
DEGENERATE_AREA = 1e-12


def level_side(level: int) -> int:
    return 2 ** level + 1


def side_level(side: int) -> int:
    """Inverse of :func:`level_side`; raises for sides that are not 2**k + 1."""
    k = side - 1
    if side < 2 or k & (k - 1):
        raise ValueError(f"grid side {side} is not of the form 2**k + 1")
    return k.bit_length() - 1


@dataclass(frozen=True, eq=False)
class TessellationTopology:
    grid_rows: int
    grid_cols: int
    triangles: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    adjacency: np.ndarray = field(repr=False)

    @property
    def num_vertices(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def directions(self) -> np.ndarray:
        """Unit direction per vertex, shape (V, 3)."""
        st = np.sin(self.theta)
        return np.stack(
            [st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)], axis=-1
        )


def triangle_adjacency(triangles: np.ndarray) -> np.ndarray:
    """Neighbour across each edge, shape (T, 3); -1 when the edge is unshared.

    Edge ``k`` of a triangle joins its vertices ``k`` and ``(k + 1) % 3``.
    Edges shared by more than two triangles are treated as unshared.
    """
    triangles = np.asarray(triangles, dtype=np.int64)
    adj = np.full(triangles.shape, -1, dtype=np.int64)
    owners: Dict[Tuple[int, int], list] = {}
    for t, tri in enumerate(triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            if a == b:
                continue
            owners.setdefault((min(a, b), max(a, b)), []).append((t, k))
    for pair in owners.values():
        if len(pair) == 2:
            (t0, k0), (t1, k1) = pair
            adj[t0, k0] = t1
            adj[t1, k1] = t0
    return adj


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def build_tessellation(rows: int, cols: int) -> TessellationTopology:
    if rows < 2 or cols < 3:
        raise ValueError(f"tessellation needs rows >= 2 and cols >= 3, got {rows}x{cols}")
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    theta = (np.pi * r / (rows - 1)).ravel()
    phi = (2.0 * np.pi * c / cols).ravel()

    tris = []
    for i in range(rows - 1):
        for j in range(cols):
            jn = (j + 1) % cols
            a, b = i * cols + j, i * cols + jn
            lo, lo_n = (i + 1) * cols + j, (i + 1) * cols + jn
            # (d theta) x (d phi) points outward
            tris.append((a, lo, lo_n))
            tris.append((a, lo_n, b))
    triangles = np.asarray(tris, dtype=np.int64)
    return TessellationTopology(
        grid_rows=rows,
        grid_cols=cols,
        triangles=_frozen(triangles),
        theta=_frozen(theta),
        phi=_frozen(phi),
        adjacency=_frozen(triangle_adjacency(triangles)),
    )


def grid_topology(max_level: int = DEFAULT_MAX_LEVEL) -> TessellationTopology:
    side = level_side(max_level)
    return build_tessellation(side, side)


# ---------------------------------------------------------------- radial field


@lru_cache(maxsize=64)
def _interp_matrix(src: int, dst: int) -> np.ndarray:
    factor = (dst - 1) // (src - 1)
    mat = np.zeros((dst, src))
    for k in range(dst):
        i, rem = divmod(k, factor)
        if rem == 0:
            mat[k, i] = 1.0
        else:
            w = rem / factor
            mat[k, i] = 1.0 - w
            mat[k, i + 1] = w
    return mat


def upsample_bilinear(grid, target_side: int):
    """Bilinear upsampling of a (2**n+1)-sided grid onto a (2**m+1)-sided grid.

    Works on numpy arrays or torch tensors with the grid in the last two
    axes. Lattice nodes shared with the source are copied exactly.
    """
    src = grid.shape[-1]
    if grid.shape[-2] != src:
        raise ValueError("grid must be square")
    n, m = side_level(src), side_level(target_side)
    if m < n:
        raise ValueError(f"cannot upsample side {src} to smaller side {target_side}")
    if m == n:
        return grid
    mat = _interp_matrix(src, target_side)
    if isinstance(grid, torch.Tensor):
        u = torch.as_tensor(mat, dtype=grid.dtype, device=grid.device)
        return u @ grid @ u.T
    return mat @ np.asarray(grid) @ mat.T


@dataclass
class RadialField:
    """Average radial map plus 32 learned bases, each a stack of levels.

    ``bases[level]`` has shape (33, 2**level+1, 2**level+1); index 0 is the
    average radial distance whose coefficient is pinned to 1.
    ``coefficients`` holds the 32 learned mixing weights for bases 1..32.
    ``output_side`` defaults to the finest level's side; the full-size layout
    uses levels 2..6 composed onto a 129-sided grid.
    """

    coefficients: torch.Tensor
    bases: Dict[int, torch.Tensor]
    output_side: Optional[int] = None

    def __post_init__(self):
        if self.coefficients.shape[-1] != NUM_BASES - 1:
            raise ValueError("expected 32 learned coefficients")
        levels = sorted(self.bases)
        if levels != list(range(MIN_LEVEL, levels[-1] + 1)):
            raise ValueError(f"levels must run contiguously from {MIN_LEVEL}, got {levels}")
        for lvl, b in self.bases.items():
            side = level_side(lvl)
            if tuple(b.shape) != (NUM_BASES, side, side):
                raise ValueError(f"level {lvl} bases have shape {tuple(b.shape)}")
        if self.output_side is not None and side_level(self.output_side) < levels[-1]:
            raise ValueError("output_side is coarser than the finest basis level")

    @property
    def max_level(self) -> int:
        return max(self.bases)

    @property
    def side(self) -> int:
        if self.output_side is not None:
            return self.output_side
        return level_side(self.max_level)

    @property
    def alphas(self) -> torch.Tensor:
        one = torch.ones(self.coefficients.shape[:-1] + (1,), dtype=self.coefficients.dtype)
        return torch.cat([one, self.coefficients], dim=-1)

    @classmethod
    def initial(
        cls,
        max_level: int = DEFAULT_MAX_LEVEL,
        mean_radius: float = 0.5,
        basis_std: float = 0.01,
        generator: Optional[torch.Generator] = None,
        dtype=torch.float64,
        output_side: Optional[int] = None,
    ) -> "RadialField":
        """Near-sphere init: average stack sums to ``mean_radius``, learned bases ~ N(0, basis_std)."""
        levels = range(MIN_LEVEL, max_level + 1)
        bases = {}
        for lvl in levels:
            side = level_side(lvl)
            b = torch.randn(NUM_BASES, side, side, generator=generator, dtype=dtype) * basis_std
            b[0] = mean_radius / len(levels)
            bases[lvl] = b
        return cls(torch.zeros(NUM_BASES - 1, dtype=dtype), bases, output_side)


def compose_radial(field: RadialField) -> torch.Tensor:
    """rho = sum_i alpha_i sum_n upsample_n(rho_{i,n}), with alpha_0 = 1.

    ``field.coefficients`` may carry leading batch dimensions; the result
    then has shape (..., side, side).
    """
    alphas = field.alphas
    side = field.side
    out = None
    for lvl, basis in field.bases.items():
        mixed = torch.tensordot(alphas, basis, dims=([-1], [0]))
        term = upsample_bilinear(mixed, side)
        out = term if out is None else out + term
    return out


def single_valued_poles(rho: torch.Tensor) -> torch.Tensor:
    """Replace the first and last grid rows (theta = 0 and pi) by their mean.

    Those rows all point along the z axis; distinct radii there would open
    the pole fans into slivers standing along the axis.
    """
    top = rho[..., :1, :].mean(-1, keepdim=True).expand_as(rho[..., :1, :])
    bot = rho[..., -1:, :].mean(-1, keepdim=True).expand_as(rho[..., -1:, :])
    return torch.cat([top, rho[..., 1:-1, :], bot], dim=-2)


def spherical_to_cartesian(rho: torch.Tensor, topology: TessellationTopology) -> torch.Tensor:
    """Map a (..., rows, cols) radial grid to vertex positions (..., V, 3).

    Pole rows are collapsed to their mean radius first.
    """
    if tuple(rho.shape[-2:]) != (topology.grid_rows, topology.grid_cols):
        raise ValueError(
            f"radial grid {tuple(rho.shape[-2:])} does not match topology "
            f"{topology.grid_rows}x{topology.grid_cols}"
        )
    with torch.no_grad():
        if not bool(torch.isfinite(rho).all()) or not bool((rho > 0).all()):
            raise ValueError("radii must be finite and strictly positive")
    rho = single_valued_poles(rho)
    dirs = torch.as_tensor(topology.directions(), dtype=rho.dtype)
    flat = rho.reshape(rho.shape[:-2] + (-1, 1))
    return flat * dirs


@dataclass
class SurfaceMesh:
    topology: TessellationTopology
    positions: torch.Tensor

    def __post_init__(self):
        if self.positions.shape[-2:] != (self.topology.num_vertices, 3):
            raise ValueError("positions do not match topology vertex count")
        if not bool(torch.isfinite(self.positions.detach()).all()):
            raise ValueError("mesh positions must be finite")

    @property
    def triangles(self) -> np.ndarray:
        return self.topology.triangles

    @classmethod
    def from_radial(cls, rho: torch.Tensor, topology: Optional[TessellationTopology] = None):
        if topology is None:
            topology = build_tessellation(rho.shape[-2], rho.shape[-1])
        return cls(topology, spherical_to_cartesian(rho, topology))

    def radii(self) -> torch.Tensor:
        return self.positions.norm(dim=-1)


def triangle_normals(
    positions: torch.Tensor, triangles: np.ndarray, eps: float = DEGENERATE_AREA
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit normals (..., T, 3) and a validity mask (..., T).

    Degenerate triangles (twice-area below ``eps``) get a zero normal and
    ``False`` in the mask.
    """
    tri = torch.as_tensor(np.array(triangles, dtype=np.int64))
    p0 = positions[..., tri[:, 0], :]
    p1 = positions[..., tri[:, 1], :]
    p2 = positions[..., tri[:, 2], :]
    cross = torch.cross(p1 - p0, p2 - p0, dim=-1)
    norm = cross.norm(dim=-1)
    valid = norm > eps
    safe = torch.where(valid, norm, torch.ones_like(norm))
    normals = cross / safe.unsqueeze(-1) * valid.unsqueeze(-1)
    return normals, valid


def vertex_normals(positions: torch.Tensor, triangles: np.ndarray) -> torch.Tensor:
    """Area-weighted vertex normals (..., V, 3); isolated vertices get zero."""
    tri = torch.as_tensor(np.array(triangles, dtype=np.int64))
    p0, p1, p2 = (positions[..., tri[:, k], :] for k in range(3))
    face = torch.cross(p1 - p0, p2 - p0, dim=-1)
    acc = torch.zeros_like(positions)
    for k in range(3):
        acc = acc.index_add(-2, tri[:, k], face)
    norm = acc.norm(dim=-1, keepdim=True)
    return acc / norm.clamp(min=1e-12)


def enforce_scale(obj, max_radius: float = 1.0):
    """Uniformly shrink a radial map or a mesh so its largest radius is ``max_radius``.

    Returns ``(rescaled, factor)``. Objects already inside the bound come back
    unchanged with factor 1. A leading batch dimension is handled per sample
    for tensors: radial maps (B, R, C) or positions (B, V, 3).
    """
    if max_radius <= 0:
        raise ValueError("max_radius must be positive")
    if isinstance(obj, SurfaceMesh):
        scaled, factor = _scale_positions(obj.positions, max_radius)
        return SurfaceMesh(obj.topology, scaled), factor
    if obj.shape[-1] == 3 and obj.dim() >= 2 and obj.shape[-2] != 3:
        return _scale_positions(obj, max_radius)
    return _scale_radial(obj, max_radius)


def _scale_radial(rho: torch.Tensor, max_radius: float):
    peak = rho.amax(dim=(-2, -1), keepdim=True)
    over = peak > max_radius
    scaled = torch.where(over, rho / peak * max_radius, rho)
    factor = torch.where(over, max_radius / peak, torch.ones_like(peak))
    return scaled, factor.squeeze(-1).squeeze(-1)


def _scale_positions(pos: torch.Tensor, max_radius: float):
    peak = pos.norm(dim=-1).amax(dim=-1, keepdim=True).unsqueeze(-1)
    over = peak > max_radius
    scaled = torch.where(over, pos / peak * max_radius, pos)
    factor = torch.where(over, max_radius / peak, torch.ones_like(peak))
    return scaled, factor.squeeze(-1).squeeze(-1)
