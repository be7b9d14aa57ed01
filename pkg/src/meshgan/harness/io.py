"""File formats: 8-bit PNG, float32 NPY and OBJ with per-vertex colors."""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
import torch
from PIL import Image


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def to_uint8(image) -> np.ndarray:
    """Quantize an (H, W, 3) image in [0, 1] to 8 bits with round-half-even."""
    arr = np.clip(_as_numpy(image).astype(np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    """RGB, no alpha; PNG metadata is left empty so output bytes are reproducible."""
    arr = image if isinstance(image, np.ndarray) and image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    """Float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_npy(path, grid) -> None:
    np.save(path, _as_numpy(grid).astype("<f4"), allow_pickle=False)


def read_npy(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def write_obj(path, positions, colors, triangles) -> None:
    """``v x y z r g b`` lines then 1-based ``f i j k`` lines."""
    pos = _as_numpy(positions).astype(np.float64)
    col = _as_numpy(colors).astype(np.float64)
    tri = np.asarray(triangles, dtype=np.int64)
    if pos.shape != col.shape:
        raise ValueError("one color per vertex required")
    lines = ["# vertices with rgb colors"]
    lines += [f"v {p[0]!r} {p[1]!r} {p[2]!r} {c[0]!r} {c[1]!r} {c[2]!r}"
              for p, c in zip(pos.tolist(), col.tolist())]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in tri.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_obj`; vertices without colors get white."""
    pos, col, tri = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            pos.append(vals[:3])
            col.append(vals[3:6] if len(vals) >= 6 else [1.0, 1.0, 1.0])
        elif parts[0] == "f":
            tri.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return (np.asarray(pos, dtype=np.float64).reshape(-1, 3),
            np.asarray(col, dtype=np.float64).reshape(-1, 3),
            np.asarray(tri, dtype=np.int64).reshape(-1, 3))


def image_grid(rows, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile a list of rows of (H, W, 3) images into one float array."""
    rows = [[_as_numpy(im).astype(np.float32) for im in row] for row in rows]
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), fill, np.float32)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y : y + h, x : x + w] = im
    return out
