"""Synthetic dataset archives: a directory of PNGs, a JSON sidecar holding
every scene's ground truth, and a manifest with seeds and a config hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .. import camera as cam
from .io import read_png, to_uint8, write_png
from .scenes import DATA_LEVEL, FAMILIES, IDENTITY_LEVEL, render_record, sample_record

SIDECAR = "scenes.json"
MANIFEST = "manifest.json"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class DatasetConfig:
    family: str = "ellipsoids"
    n: int = 256
    seed: int = 0
    image_size: int = 32
    level: int = DATA_LEVEL
    blur_width: float = 1.0
    angular_scale: float = 0.2
    dist: cam.ViewpointDistribution = cam.CELEBA_GAN

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist"] = asdict(self.dist)
        return d

    @property
    def camera(self) -> cam.CameraIntrinsics:
        return cam.CameraIntrinsics(self.image_size)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        dd = d.pop("dist")
        dist = cam.ViewpointDistribution(tuple(dd["pitch"]), tuple(dd["yaw"]), tuple(dd["roll"]),
                                         dd["order"])
        return cls(dist=dist, **d)


@dataclass
class Dataset:
    root: Path
    config: DatasetConfig
    records: List[dict]

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, i: int) -> Path:
        return self.root / self.records[i]["file"]

    def images(self) -> torch.Tensor:
        """(N, H, W, 3) float32 in [0, 1] as stored (8-bit quantized)."""
        size = self.config.image_size
        if not self.records:
            return torch.zeros(0, size, size, 3)
        return torch.as_tensor(np.stack([read_png(self.image_path(i)) for i in range(len(self))]))

    def viewpoints(self) -> torch.Tensor:
        return torch.as_tensor([r["viewpoint"] for r in self.records], dtype=torch.float64)

    def render(self, i: int) -> torch.Tensor:
        """Re-render record ``i`` from the sidecar alone."""
        c = self.config
        return render_record(self.records[i], c.dist, c.camera, c.level, c.blur_width,
                             c.angular_scale)


def make_dataset(family: str, n: int, dist: cam.ViewpointDistribution = cam.CELEBA_GAN,
                 seed: int = 0, out_dir=None, **overrides) -> Dataset:
    """Sample ``n`` scenes of one family, render each at its own viewpoint and
    write the archive to ``out_dir``."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if n < 0:
        raise ValueError("n must be non-negative")
    if out_dir is None:
        raise ValueError("out_dir is required")
    if family == "identity":
        overrides.setdefault("level", IDENTITY_LEVEL)
    cfg = DatasetConfig(family=family, n=n, seed=seed, dist=dist, **overrides)
    root = Path(out_dir)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    hashes = {}
    for i in range(n):
        rec = sample_record(family, rng, dist)
        rec["index"] = i
        rec["file"] = f"{IMAGE_DIR}/{i:05d}.png"
        img = render_record(rec, dist, cfg.camera, cfg.level, cfg.blur_width, cfg.angular_scale)
        write_png(root / rec["file"], to_uint8(img))
        hashes[rec["file"]] = _sha256(root / rec["file"])
        records.append(rec)
    (root / SIDECAR).write_text(json.dumps(records, indent=1, sort_keys=True))
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "seed": seed, "count": n,
                "sidecar": SIDECAR, "sidecar_sha256": _sha256(root / SIDECAR), "images": hashes}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Dataset(root, cfg, records)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    records = json.loads((root / manifest["sidecar"]).read_text())
    return Dataset(root, DatasetConfig.from_dict(manifest["config"]), records)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def archive_digest(root) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix().encode()
        h.update(len(rel).to_bytes(8, "little") + rel)
        data = p.read_bytes()
        h.update(len(data).to_bytes(8, "little") + data)
    return h.hexdigest()


def verify_roundtrip(ds: Dataset, indices: Optional[List[int]] = None) -> List[int]:
    """Indices whose stored PNG differs from a fresh render of the sidecar record."""
    bad = []
    for i in range(len(ds)) if indices is None else indices:
        stored = np.asarray(read_png(ds.image_path(i)))
        fresh = to_uint8(ds.render(i)).astype(np.float32) / 255.0
        if not np.array_equal(stored, fresh):
            bad.append(i)
    return bad
