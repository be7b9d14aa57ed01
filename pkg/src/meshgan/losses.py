"""Training objectives: WGAN critic/generator losses, gradient penalty,
normal-smoothing regularizer and the autoencoder reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional

import numpy as np
import torch

from .geometry import DEGENERATE_AREA, TessellationTopology, triangle_adjacency, triangle_normals

LAMBDA_GP = 10.0
N_CRITIC = 5


@dataclass
class LossReport:
    """Named scalar terms and the total; ``targets`` says which nets a term trains."""

    total: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)
    targets: Dict[str, str] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def wgan_losses(critic_real: torch.Tensor, critic_fake: torch.Tensor):
    """Returns ``(critic_loss, generator_loss)``.

    The critic maximizes ``mean(real) - mean(fake)``, so its loss is the
    negation; the generator minimizes ``-mean(fake)``.
    """
    if critic_real.numel() == 0 or critic_fake.numel() == 0:
        raise ValueError("empty critic batch")
    estimate = critic_real.mean() - critic_fake.mean()
    return -estimate, -critic_fake.mean()


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float = LAMBDA_GP,
    generator: Optional[torch.Generator] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``lambda_gp * E[(|grad D(x_hat)| - 1)^2]`` on real/fake interpolates.

    Interpolation weights are drawn antithetically: every ``eps`` is paired
    with ``1 - eps``, so swapping ``real`` and ``fake`` evaluates the same
    set of points. The graph is kept so the penalty can be backpropagated.
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    n = real.shape[0]
    if eps is None:
        eps = torch.rand(n, generator=generator, dtype=real.dtype)
    eps = eps.reshape((n,) + (1,) * (real.dim() - 1)).to(real.dtype)
    eps = torch.cat([eps, 1.0 - eps])
    a = torch.cat([real, real]).detach()
    b = torch.cat([fake, fake]).detach()
    x_hat = (a + eps * (b - a)).requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.reshape(2 * n, -1).norm(dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


@lru_cache(maxsize=16)
def _pairs_cached(triangles_bytes: bytes, count: int) -> np.ndarray:
    tri = np.frombuffer(triangles_bytes, dtype=np.int64).reshape(count, 3)
    adj = triangle_adjacency(tri)
    i, _ = np.nonzero(adj >= 0)
    j = adj[adj >= 0]
    keep = i < j
    return np.stack([i[keep], j[keep]], axis=1)


def adjacent_pairs(triangles) -> np.ndarray:
    """Unordered edge-adjacent triangle pairs ``(i, j)`` with ``i < j``, shape (P, 2)."""
    if isinstance(triangles, TessellationTopology):
        triangles = triangles.triangles
    tri = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64))
    return _pairs_cached(tri.tobytes(), len(tri))


def smoothing_loss(positions: torch.Tensor, triangles, normalize: bool = False,
                   eps: float = DEGENERATE_AREA) -> torch.Tensor:
    """Sum over edge-adjacent triangle pairs of ``1 - n_i . n_j``.

    Pairs involving a degenerate triangle are skipped. ``positions`` may be
    batched (B, V, 3); the result then has shape (B,). With ``normalize``
    the sum is divided by the number of adjacent pairs.
    """
    pairs = torch.as_tensor(adjacent_pairs(triangles))
    if isinstance(triangles, TessellationTopology):
        triangles = triangles.triangles
    normals, valid = triangle_normals(positions, triangles, eps)
    ni = normals[..., pairs[:, 0], :]
    nj = normals[..., pairs[:, 1], :]
    both = valid[..., pairs[:, 0]] & valid[..., pairs[:, 1]]
    terms = (1.0 - (ni * nj).sum(-1)) * both
    total = terms.sum(-1)
    if normalize:
        total = total / max(len(pairs), 1)
    return total


def autoencoder_loss(x_r: torch.Tensor, x_e: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels and channels (and batch)."""
    if x_r.shape != x_e.shape:
        raise ValueError(f"shape mismatch {tuple(x_r.shape)} vs {tuple(x_e.shape)}")
    return ((x_r - x_e) ** 2).mean()


def combined_generator_objective(critic_fake: torch.Tensor, positions: torch.Tensor,
                                 triangles, lambda_s: float = 0.0,
                                 normalize: bool = False) -> LossReport:
    """Generator loss plus ``lambda_s`` times the batch-mean smoothing loss.

    The scale bound is not a term here; generated shapes are rescaled with
    ``geometry.enforce_scale`` before rendering.
    """
    _, gen = wgan_losses(critic_fake.detach(), critic_fake)
    smooth = smoothing_loss(positions, triangles, normalize).mean()
    total = gen + lambda_s * smooth if lambda_s else gen
    return LossReport(total, {"generator": gen, "smoothing": smooth},
                      {"generator": "G", "smoothing": "G"})
