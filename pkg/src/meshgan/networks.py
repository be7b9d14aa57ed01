"""Toy generator, critic and encoder, the analytic identity generator, and
checkpoint I/O.

Images are (B, H, W, 3) tensors in [0, 1]; networks permute to channels-first
internally.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import camera as cam
from .background import BackgroundSphere, texture_side
from .geometry import (
    DEFAULT_MAX_LEVEL,
    MIN_LEVEL,
    NUM_BASES,
    RadialField,
    SurfaceMesh,
    build_tessellation,
    compose_radial,
    enforce_scale,
    level_side,
    spherical_to_cartesian,
)
from .renderer import SceneRepresentation

Z_DIM = 64
Z_OBJ = 48
ANGLE_BINS = 21
LEAK = 0.2
MIN_RADIUS = 0.05


def _leaky(x):
    return F.leaky_relu(x, LEAK)


def _to_channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _to_channels_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


# ------------------------------------------------------------------ generator


class Generator(nn.Module):
    """Three sub-generators: background from ``z_b``, texture and shape from ``z_o``.

    The shape head is a linear map from ``z_o`` to the 32 mixing weights of a
    :class:`RadialField` whose basis grids are parameters of this module.
    """

    def __init__(
        self,
        z_dim: int = Z_DIM,
        z_obj: int = Z_OBJ,
        max_level: int = DEFAULT_MAX_LEVEL,
        dist: cam.ViewpointDistribution = cam.CELEBA_GAN,
        camera: Optional[cam.CameraIntrinsics] = None,
        angular_scale: float = 0.2,
        max_radius: float = 1.0,
        mean_radius: float = 0.5,
        basis_std: float = 0.01,
        width: int = 32,
        seed: int = 0,
        white_background: bool = False,
    ):
        super().__init__()
        if not 0 < z_obj < z_dim:
            raise ValueError("need 0 < z_obj < z_dim")
        self.z_dim, self.z_obj = z_dim, z_obj
        self.camera = camera or cam.CameraIntrinsics()
        self.dist = dist
        self.angular_scale = angular_scale
        self.max_radius = max_radius
        self.max_level = max_level
        self.white_background = white_background
        self.side = level_side(max_level)
        self.topology = build_tessellation(self.side, self.side)
        self.bg_side = texture_side(dist, self.camera, angular_scale)

        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            w = width
            # background: 4x4 seed map, four stride-2 upsamplings to 64x64
            self.bg_fc = nn.Linear(z_dim - z_obj, 4 * w * 4 * 4)
            self.bg_convs = nn.ModuleList([
                nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1),
                nn.ConvTranspose2d(2 * w, w, 4, 2, 1),
                nn.ConvTranspose2d(w, w // 2, 4, 2, 1),
                nn.ConvTranspose2d(w // 2, 3, 4, 2, 1),
            ])
            # texture: 3x3 seed map, each layer maps side s to 2s - 1
            n_up = max_level - 1
            chans = [4 * w] + [max(4 * w >> (i + 1), 8) for i in range(n_up - 1)] + [3]
            self.tex_fc = nn.Linear(z_obj, chans[0] * 9)
            self.tex_convs = nn.ModuleList(
                [nn.ConvTranspose2d(chans[i], chans[i + 1], 3, 2, 1) for i in range(n_up)]
            )
            self._tex_chans = chans[0]
            self._bg_chans = 4 * w
            self.alpha_fc = nn.Linear(z_obj, NUM_BASES - 1)
            nn.init.normal_(self.alpha_fc.weight, std=0.1 / math.sqrt(z_obj))
            nn.init.zeros_(self.alpha_fc.bias)
        field = RadialField.initial(max_level, mean_radius, basis_std, gen, torch.float32)
        self.bases = nn.ParameterDict({str(k): nn.Parameter(v) for k, v in field.bases.items()})

    def split(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return z[:, : self.z_obj], z[:, self.z_obj :]

    def radial(self, z: torch.Tensor) -> torch.Tensor:
        """Scale-enforced radial maps (B, side, side)."""
        z_o, _ = self.split(z)
        field = RadialField(self.alpha_fc(z_o), {int(k): v for k, v in self.bases.items()})
        rho = compose_radial(field).clamp(min=MIN_RADIUS)
        return enforce_scale(rho, self.max_radius)[0]

    def texture(self, z: torch.Tensor) -> torch.Tensor:
        z_o, _ = self.split(z)
        h = self.tex_fc(z_o).reshape(-1, self._tex_chans, 3, 3)
        for conv in self.tex_convs:
            h = conv(_leaky(h))
        h = torch.sigmoid(h)  # (B, 3, side, side)
        return _to_channels_last(h).reshape(z.shape[0], -1, 3)

    def background(self, z: torch.Tensor) -> torch.Tensor:
        _, z_b = self.split(z)
        if self.white_background:
            return torch.ones(z.shape[0], self.bg_side, self.bg_side, 3, dtype=z.dtype)
        h = self.bg_fc(z_b).reshape(-1, self._bg_chans, 4, 4)
        for conv in self.bg_convs:
            h = conv(_leaky(h))
        h = torch.sigmoid(h)
        if h.shape[-1] != self.bg_side:
            h = F.interpolate(h, size=(self.bg_side, self.bg_side), mode="bilinear",
                              align_corners=False)
        return _to_channels_last(h)

    def forward(self, z: torch.Tensor) -> SceneRepresentation:
        rho = self.radial(z)
        mesh = SurfaceMesh(self.topology, spherical_to_cartesian(rho, self.topology))
        return SceneRepresentation(mesh, self.texture(z),
                                   BackgroundSphere(self.background(z), self.angular_scale))


# ------------------------------------------------------------ critic, encoder


class ConvTrunk(nn.Module):
    """Four stride-2 convolutions with leaky rectifiers, flattened."""

    def __init__(self, image_size: int = 32, width: int = 32):
        super().__init__()
        if image_size % 16:
            raise ValueError("image_size must be a multiple of 16")
        chans = [3, width, 2 * width, 4 * width, 8 * width]
        self.convs = nn.ModuleList(
            [nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1) for i in range(4)]
        )
        self.out_features = chans[-1] * (image_size // 16) ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = _to_channels_first(x)
        for conv in self.convs:
            h = _leaky(conv(h))
        return h.flatten(1)


class Critic(nn.Module):
    def __init__(self, image_size: int = 32, width: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.trunk = ConvTrunk(image_size, width)
            self.head = nn.Linear(self.trunk.out_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x)).squeeze(-1)


@dataclass
class EncoderOutput:
    z: torch.Tensor
    angle_logits: torch.Tensor  # (B, 3, bins)
    angles: torch.Tensor  # (B, 3) radians


def expected_angles(logits: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Softmax expectation over bin centres; ``centers`` has shape (3, bins)."""
    return (torch.softmax(logits, dim=-1) * centers).sum(-1)


class Encoder(nn.Module):
    """Critic-like trunk with a latent head and one binned head per Euler angle."""

    def __init__(
        self,
        z_dim: int = Z_DIM,
        dist: cam.ViewpointDistribution = cam.CELEBA_GAN,
        image_size: int = 32,
        width: int = 32,
        bins: int = ANGLE_BINS,
        seed: int = 0,
    ):
        super().__init__()
        self.z_dim, self.bins, self.dist = z_dim, bins, dist
        centers = np.stack([cam.bin_centers(lo, hi, bins) if bins > 1 else [0.5 * (lo + hi)]
                            for lo, hi in zip(dist.low, dist.high)])
        self.register_buffer("centers", torch.as_tensor(centers, dtype=torch.float32))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.trunk = ConvTrunk(image_size, width)
            self.z_head = nn.Linear(self.trunk.out_features, z_dim)
            self.angle_head = nn.Linear(self.trunk.out_features, 3 * bins)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        h = self.trunk(x)
        logits = self.angle_head(h).reshape(-1, 3, self.bins)
        angles = expected_angles(logits, self.centers.to(logits.dtype))
        return EncoderOutput(self.z_head(h), logits, angles)


# ---------------------------------------------------------- identity generator


def _shape_harmonics(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Four smooth shape modes, each mirror-symmetric about the plane x = 0."""
    ct, st = np.cos(theta), np.sin(theta)
    return np.stack([
        0.5 * (3.0 * ct**2 - 1.0),
        st**2 * np.cos(2.0 * phi),
        st * ct * np.sin(phi),
        ct,
    ])


def _texture_pattern(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Fixed pattern in [-1, 1], mirror-symmetric about x = 0."""
    return np.clip(0.6 * np.cos(3.0 * theta) + 0.4 * np.sin(theta) * np.sin(phi), -1.0, 1.0)


def _background_patterns(side: int) -> Tuple[np.ndarray, np.ndarray]:
    """A fixed base pattern and a tinted pattern, both smooth and aperiodic."""
    u = (np.arange(side) + 0.5) / side
    uu, vv = np.meshgrid(u, u, indexing="xy")
    base = 0.5 * np.sin(2.3 * math.pi * uu + 0.4) * np.cos(1.7 * math.pi * vv - 0.3)
    tinted = np.sin(3.1 * math.pi * uu * vv + 1.3 * math.pi * vv) * np.cos(1.9 * math.pi * uu)
    return base, tinted


class IdentityGenerator(nn.Module):
    """Generator whose latent directly sets shape, texture and background.

    ``z = [shape (4) | texture tints (3) | background tints (3)]``. The shape
    entries are the first four mixing weights of a :class:`RadialField` whose
    learned bases are fixed smooth harmonics (scaled by ``shape_amp``); the
    tints modulate fixed patterns through ``tanh`` so colors stay in [0, 1].
    ``yaw_offset`` (radians) pre-rotates every object about the vertical axis.
    """

    n_shape = 4

    def __init__(
        self,
        max_level: int = 4,
        dist: cam.ViewpointDistribution = cam.CELEBA_GAN,
        camera: Optional[cam.CameraIntrinsics] = None,
        angular_scale: float = 0.2,
        mean_radius: float = 0.5,
        shape_amp: float = 0.1,
        max_radius: float = 1.0,
        yaw_offset: float = 0.0,
        dtype=torch.float32,
    ):
        super().__init__()
        self.z_dim = self.n_shape + 6
        self.z_obj = self.n_shape + 3
        self.camera = camera or cam.CameraIntrinsics()
        self.dist = dist
        self.angular_scale = angular_scale
        self.max_radius = max_radius
        self.yaw_offset = yaw_offset
        self.max_level = max_level
        self.side = level_side(max_level)
        self.topology = build_tessellation(self.side, self.side)
        self.bg_side = texture_side(dist, self.camera, angular_scale)

        topo = self.topology
        theta = topo.theta.reshape(self.side, self.side)
        phi = topo.phi.reshape(self.side, self.side)
        bases = {}
        for lvl in range(MIN_LEVEL, max_level + 1):
            s = level_side(lvl)
            b = np.zeros((NUM_BASES, s, s))
            if lvl == max_level:
                b[0] = mean_radius
                b[1 : 1 + self.n_shape] = shape_amp * _shape_harmonics(theta, phi)
            bases[lvl] = torch.as_tensor(b, dtype=dtype)
        self._bases = bases
        for k, v in bases.items():
            self.register_buffer(f"basis_{k}", v)
        pattern = _texture_pattern(topo.theta, topo.phi)
        self.register_buffer("pattern", torch.as_tensor(pattern, dtype=dtype))
        base, tinted = _background_patterns(self.bg_side)
        self.register_buffer("bg_base", torch.as_tensor(base, dtype=dtype))
        self.register_buffer("bg_tinted", torch.as_tensor(tinted, dtype=dtype))

    def _field(self, z: torch.Tensor) -> RadialField:
        coeff = torch.zeros(z.shape[0], NUM_BASES - 1, dtype=z.dtype)
        coeff = torch.cat([z[:, : self.n_shape], coeff[:, self.n_shape :]], dim=1)
        bases = {k: getattr(self, f"basis_{k}").to(z.dtype) for k in self._bases}
        return RadialField(coeff, bases)

    def radial(self, z: torch.Tensor) -> torch.Tensor:
        rho = compose_radial(self._field(z)).clamp(min=MIN_RADIUS)
        return enforce_scale(rho, self.max_radius)[0]

    def texture(self, z: torch.Tensor) -> torch.Tensor:
        tint = torch.tanh(z[:, self.n_shape : self.n_shape + 3])  # (B, 3)
        return 0.5 + 0.45 * tint.unsqueeze(1) * self.pattern.to(z.dtype)[None, :, None]

    def background(self, z: torch.Tensor) -> torch.Tensor:
        tint = torch.tanh(z[:, self.n_shape + 3 :])  # (B, 3)
        base = self.bg_base.to(z.dtype)[None, :, :, None]
        tinted = self.bg_tinted.to(z.dtype)[None, :, :, None]
        return 0.5 + 0.3 * base + 0.2 * tint[:, None, None, :] * tinted

    def forward(self, z: torch.Tensor) -> SceneRepresentation:
        rho = self.radial(z)
        pos = spherical_to_cartesian(rho, self.topology)
        if self.yaw_offset:
            rot = cam.rotation_matrix(torch.tensor([0.0, self.yaw_offset, 0.0], dtype=z.dtype))
            pos = pos @ rot.T
        mesh = SurfaceMesh(self.topology, pos)
        return SceneRepresentation(mesh, self.texture(z),
                                   BackgroundSphere(self.background(z), self.angular_scale))


# ----------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MGCKPT\x00\x01"
CHECKPOINT_VERSION = 1
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Single file: magic, version, manifest length, JSON manifest, raw tensors.

    Tensor payloads are little-endian and stored in manifest order.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        key = str(t.dtype).replace("torch.", "")
        if key not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[key][1], copy=False).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {},
                           "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    head = len(CHECKPOINT_MAGIC)
    version, mlen = struct.unpack_from("<IQ", data, head)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = head + struct.calcsize("<IQ")
    manifest = json.loads(data[start : start + mlen])
    body = start + mlen
    tensors = {}
    for ent in manifest["tensors"]:
        dtype, code = _DTYPES[ent["dtype"]]
        lo = body + ent["offset"]
        arr = np.frombuffer(data, dtype=code, count=ent["nbytes"] // np.dtype(code).itemsize,
                            offset=lo).reshape(ent["shape"])
        tensors[ent["name"]] = torch.as_tensor(arr.copy(), dtype=dtype)
    return tensors, manifest["meta"]


def save_module(path, module: nn.Module, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, dict(module.state_dict()), meta)


def load_module(path, module: nn.Module) -> dict:
    """Load into ``module``; names and shapes must match exactly."""
    tensors, meta = load_checkpoint(path)
    own = module.state_dict()
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, t in tensors.items():
        if tuple(own[name].shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs "
                             f"{tuple(own[name].shape)}")
    module.load_state_dict(tensors)
    return meta


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
