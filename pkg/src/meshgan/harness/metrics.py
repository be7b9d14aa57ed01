"""Evaluation measures for the toy adversarial run."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch


def nearest_image_distance(samples: torch.Tensor, reference: torch.Tensor,
                           chunk: int = 64) -> torch.Tensor:
    """Per sample, the smallest mean per-pixel RGB distance to any reference image.

    samples (S, H, W, 3), reference (N, H, W, 3); returns (S,).
    """
    s = samples.detach().double().flatten(1, 2)  # (S, P, 3)
    best = []
    for lo in range(0, s.shape[0], chunk):
        part = s[lo : lo + chunk]
        dmin = None
        for rlo in range(0, reference.shape[0], 256):
            r = reference[rlo : rlo + 256].detach().double().flatten(1, 2)
            d = (part[:, None] - r[None]).norm(dim=-1).mean(-1)  # (s, r)
            m = d.min(1).values
            dmin = m if dmin is None else torch.minimum(dmin, m)
        best.append(dmin)
    return torch.cat(best)


def decile_means(values: Sequence[float]):
    """Means of the first and last 10% windows of a series."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 10:
        raise ValueError("need at least 10 values")
    k = len(v) // 10
    return float(v[:k].mean()), float(v[-k:].mean())
