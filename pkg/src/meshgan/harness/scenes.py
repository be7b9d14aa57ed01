"""Parametric star-shaped scene families with recorded ground truth.

Each scene is a plain dict of floats (the sidecar record). Everything needed
to rebuild and re-render the scene is in the record, so an image can be
reproduced from it bit for bit.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Dict, Optional

import numpy as np
import torch

from .. import camera as cam
from ..background import BackgroundSphere, texture_side
from ..geometry import SurfaceMesh, build_tessellation, level_side, spherical_to_cartesian
from ..renderer import SceneRepresentation, render_image

FAMILIES = ("ellipsoids", "bumpy-spheres", "two-lobe", "sphere", "identity")
IDENTITY_LEVEL = 4
TEXTURES = ("solid", "bands", "spots")
BACKGROUNDS = ("flat", "gradient", "waves")
DATA_LEVEL = 5
CAP_DEG = 70.0  # bumpy-sphere relief lives within this angle of the +z pole
SMOOTH_FREQ = (1.0, 2.0)
IDENTITY_Z = 10  # IdentityGenerator latent size


def _grid_angles(level: int):
    side = level_side(level)
    topo = build_tessellation(side, side)
    return topo, topo.theta.reshape(side, side), topo.phi.reshape(side, side)


def _unit(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def _angle_to(dirs: np.ndarray, center) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    return np.arccos(np.clip(dirs @ c, -1.0, 1.0))


# ------------------------------------------------------------------ shapes


def cap_window(theta: np.ndarray, cap_deg: float = CAP_DEG) -> np.ndarray:
    """Smooth weight that is 1 at the pole and 0 beyond ``cap_deg``."""
    t = np.clip(theta / math.radians(cap_deg), 0.0, 1.0)
    return np.cos(0.5 * math.pi * t) ** 2


def radial_grid(shape: dict, level: int = DATA_LEVEL) -> np.ndarray:
    """(side, side) radii for a shape record."""
    _, theta, phi = _grid_angles(level)
    d = _unit(theta, phi)
    kind = shape["family"]
    if kind == "sphere":
        return np.full(theta.shape, float(shape["radius"]))
    if kind == "ellipsoids":
        a, b, c = shape["axes"]
        return 1.0 / np.sqrt(d[..., 0] ** 2 / a**2 + d[..., 1] ** 2 / b**2 + d[..., 2] ** 2 / c**2)
    if kind == "bumpy-spheres":
        w = cap_window(theta, shape.get("cap_deg", CAP_DEG))
        g = np.zeros(theta.shape)
        for bump in shape["bumps"]:
            ang = _angle_to(d, bump["center"])
            g += bump["height"] * np.exp(-((ang / bump["width"]) ** 2))
        # zero vertex mean, so the reflection through the mean keeps the outside fixed
        c = float((w * g).sum() / w.sum())
        return float(shape["radius"]) + w * (g - c)
    if kind == "two-lobe":
        rho = np.full(theta.shape, float(shape["radius"]))
        for lobe in shape["lobes"]:
            ang = _angle_to(d, lobe["center"])
            rho += lobe["height"] * np.exp(-((ang / lobe["width"]) ** 2))
        return rho
    raise ValueError(f"unknown family {kind!r}")


def _random_direction(rng, max_polar_deg: float):
    """Direction within ``max_polar_deg`` of +z, roughly area-uniform."""
    cmin = math.cos(math.radians(max_polar_deg))
    ct = rng.uniform(cmin, 1.0)
    ph = rng.uniform(0.0, 2.0 * math.pi)
    st = math.sqrt(1.0 - ct * ct)
    return [st * math.cos(ph), st * math.sin(ph), ct]


def sample_shape(family: str, rng: np.random.Generator) -> dict:
    if family == "sphere":
        return {"family": family, "radius": 0.5}
    if family == "ellipsoids":
        return {"family": family, "axes": [float(v) for v in rng.uniform(0.3, 0.65, size=3)]}
    if family == "bumpy-spheres":
        bumps = []
        for _ in range(int(rng.integers(3, 6))):
            bumps.append({
                "center": _random_direction(rng, 0.6 * CAP_DEG),
                "height": float(rng.uniform(0.12, 0.2) * rng.choice([-1.0, 1.0])),
                "width": float(rng.uniform(0.25, 0.45)),
            })
        return {"family": family, "radius": 0.5, "cap_deg": CAP_DEG, "bumps": bumps}
    if family == "two-lobe":
        first = _random_direction(rng, 90.0)
        second = [-first[0] + rng.uniform(-0.3, 0.3), -first[1], -first[2]]
        lobes = [first, second]
        return {
            "family": family,
            "radius": float(rng.uniform(0.3, 0.4)),
            "lobes": [{"center": [float(x) for x in c], "height": float(rng.uniform(0.15, 0.3)),
                       "width": float(rng.uniform(0.5, 0.8))} for c in lobes],
        }
    raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")


# -------------------------------------------------------- texture, background


def texture_colors(texture: dict, level: int = DATA_LEVEL) -> np.ndarray:
    """(V, 3) per-vertex colors in [0, 1]."""
    _, theta, phi = _grid_angles(level)
    base = np.asarray(texture["base"], dtype=np.float64)
    kind = texture["id"]
    if kind == "solid":
        f = np.zeros(theta.shape)
    elif kind == "bands":
        f = np.cos(texture["freq"] * theta)
    elif kind == "spots":
        f = np.cos(texture["freq"] * theta) * np.cos(2.0 * phi)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    accent = np.asarray(texture.get("accent", base), dtype=np.float64)
    mix = (0.5 + 0.5 * f)[..., None]
    out = (1.0 - mix) * base + mix * accent
    return np.clip(out.reshape(-1, 3), 0.0, 1.0)


def background_texture(background: dict, side: int) -> np.ndarray:
    """(side, side, 3) texture in [0, 1]."""
    u = (np.arange(side) + 0.5) / side
    uu, vv = np.meshgrid(u, u, indexing="xy")
    top = np.asarray(background["top"], dtype=np.float64)
    bottom = np.asarray(background.get("bottom", top), dtype=np.float64)
    kind = background["id"]
    if kind == "flat":
        mix = np.zeros_like(uu)
    elif kind == "gradient":
        mix = vv
    elif kind == "waves":
        mix = 0.5 + 0.5 * np.sin(2.0 * math.pi * (1.5 * uu + 0.5 * vv))
    else:
        raise ValueError(f"unknown background {kind!r}")
    mix = mix[..., None]
    return np.clip((1.0 - mix) * top + mix * bottom, 0.0, 1.0)


def sample_texture(rng: np.random.Generator, pattern: Optional[str] = None,
                   freq=(3.0, 6.0)) -> dict:
    pattern = pattern or TEXTURES[int(rng.integers(1, len(TEXTURES)))]
    base = rng.uniform(0.15, 0.9, size=3)
    accent = np.clip(1.0 - base + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
    return {"id": pattern, "base": [float(v) for v in base], "accent": [float(v) for v in accent],
            "freq": float(rng.uniform(*freq))}


def sample_background(rng: np.random.Generator, pattern: str = "gradient") -> dict:
    jitter = rng.uniform(-0.05, 0.05, size=2)
    top = np.array([0.55, 0.75, 0.95]) + jitter[0]
    bottom = np.array([0.35, 0.55, 0.25]) + jitter[1]
    return {"id": pattern, "top": [float(v) for v in top], "bottom": [float(v) for v in bottom]}


# ------------------------------------------------------------------- scenes


@lru_cache(maxsize=8)
def identity_generator(level: int, dist: cam.ViewpointDistribution, camera: cam.CameraIntrinsics,
                       angular_scale: float = 0.2):
    from ..networks import IdentityGenerator

    return IdentityGenerator(level, dist, camera, angular_scale, dtype=torch.float64)


def sample_record(family: str, rng: np.random.Generator, dist: cam.ViewpointDistribution) -> dict:
    """One sidecar record: shape, texture, background and an independent viewpoint.

    The ``identity`` family records the identity generator's latent instead.
    """
    if family == "identity":
        z = rng.standard_normal(IDENTITY_Z)
        view = cam.sample_viewpoints(dist, 1, rng)[0]
        return {"z": [float(v) for v in z], "viewpoint": [float(a) for a in view]}
    shape = sample_shape(family, rng)
    if family == "sphere":
        texture = sample_texture(rng, "solid")
    elif family == "bumpy-spheres":
        # low-frequency paint; relief is what the hollow-mask probe looks at
        texture = sample_texture(rng, freq=SMOOTH_FREQ)
    else:
        texture = sample_texture(rng)
    background = sample_background(rng)
    view = cam.sample_viewpoints(dist, 1, rng)[0]
    return {"shape": shape, "texture": texture, "background": background,
            "viewpoint": [float(a) for a in view]}


def build_scene(record: dict, dist: cam.ViewpointDistribution, camera: cam.CameraIntrinsics,
                level: int = DATA_LEVEL, angular_scale: float = 0.2,
                radial: Optional[np.ndarray] = None) -> SceneRepresentation:
    """Float64 scene for a record; ``radial`` overrides the record's shape."""
    if "z" in record:
        G = identity_generator(level, dist, camera, angular_scale)
        with torch.no_grad():
            return G(torch.tensor([record["z"]], dtype=torch.float64))
    side = level_side(level)
    topo = build_tessellation(side, side)
    rho = radial_grid(record["shape"], level) if radial is None else radial
    pos = spherical_to_cartesian(torch.as_tensor(rho, dtype=torch.float64), topo)
    colors = torch.as_tensor(texture_colors(record["texture"], level))
    bg = background_texture(record["background"], texture_side(dist, camera, angular_scale))
    return SceneRepresentation(SurfaceMesh(topo, pos), colors,
                               BackgroundSphere(torch.as_tensor(bg), angular_scale))


def render_record(record: dict, dist: cam.ViewpointDistribution, camera: cam.CameraIntrinsics,
                  level: int = DATA_LEVEL, blur_width: float = 1.0, angular_scale: float = 0.2,
                  viewpoint=None) -> torch.Tensor:
    scene = build_scene(record, dist, camera, level, angular_scale)
    view = record["viewpoint"] if viewpoint is None else viewpoint
    with torch.no_grad():
        img = render_image(scene, torch.as_tensor(view, dtype=torch.float64), camera,
                           blur_width, dist.order)
    return img[0] if scene.batched else img


def describe(record: dict) -> Dict[str, str]:
    if "z" in record:
        return {"family": "identity"}
    return {"family": record["shape"]["family"], "texture": record["texture"]["id"],
            "background": record["background"]["id"]}
