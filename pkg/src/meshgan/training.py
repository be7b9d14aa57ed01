"""Adversarial training of the generator, then encoder training against a
frozen generator.

Both trainers draw every random number from one seeded numpy generator and
save it with the weights, so a restored run continues bit-identically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import camera as cam
from .geometry import vertex_normals
from .harness.io import image_grid, write_png
from .losses import (
    LAMBDA_GP,
    N_CRITIC,
    autoencoder_loss,
    combined_generator_objective,
    gradient_penalty,
    wgan_losses,
)
from .networks import (
    Critic,
    Encoder,
    Generator,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)
from .renderer import SceneRepresentation, render_scenes

LOSS_NAMES_GAN = ("critic_loss", "wasserstein", "gradient_penalty", "generator_loss",
                  "smoothing")
LOSS_NAMES_AE = ("autoencoder_loss",)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 16
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.5, 0.9)
    n_critic: int = N_CRITIC
    lambda_gp: float = LAMBDA_GP
    lambda_s: float = 0.0
    smooth_normalize: bool = False
    blur_width: float = 1.0
    downsample: int = 1
    image_size: int = 32
    z_dim: int = 64
    z_obj: int = 48
    max_level: int = 5
    width: int = 32
    max_radius: float = 1.0
    angular_scale: float = 0.2
    white_background: bool = False
    dist: cam.ViewpointDistribution = cam.CELEBA_GAN
    seed: int = 0
    checkpoint_every: int = 0
    sample_every: int = 0
    n_samples: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist"] = asdict(self.dist)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("dist"), dict):
            dd = d["dist"]
            d["dist"] = cam.ViewpointDistribution(tuple(dd["pitch"]), tuple(dd["yaw"]),
                                                  tuple(dd["roll"]), dd["order"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def sampler(z_dim: int, batch: int, rng: np.random.Generator) -> torch.Tensor:
    """i.i.d. standard normal latents (batch, z_dim), float32."""
    return torch.as_tensor(rng.standard_normal((batch, z_dim)), dtype=torch.float32)


def render_views(G, z: torch.Tensor, angles: torch.Tensor, blur_width: float = 1.0,
                 downsample: int = 1, scene: Optional[SceneRepresentation] = None):
    """Render ``G(z)`` at ``angles``; with ``downsample`` > 1 the render is box-filtered."""
    scene = G(z) if scene is None else scene
    img = render_scenes(scene, angles, G.camera, blur_width, G.dist.order)
    if downsample > 1:
        img = F.avg_pool2d(img.permute(0, 3, 1, 2), downsample).permute(0, 2, 3, 1)
    return img


def write_curves(path, rows: List[Tuple[int, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "name", "value"])
        for step, name, value in rows:
            w.writerow([step, name, repr(float(value))])


def read_curves(path) -> Dict[str, List[Tuple[int, float]]]:
    out: Dict[str, List[Tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["name"], []).append((int(row["step"]), float(row["value"])))
    return out


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}.{idx}.{key}"] = torch.as_tensor(val)
    return tensors, sd["param_groups"]


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors, groups):
    state: Dict[int, dict] = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups})


def _module_tensors(prefix: str, module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load_module_tensors(prefix: str, module, tensors) -> None:
    own = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(own)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def make_generator(cfg: TrainConfig) -> Generator:
    camera = cam.CameraIntrinsics(cfg.image_size * cfg.downsample)
    return Generator(cfg.z_dim, cfg.z_obj, cfg.max_level, cfg.dist, camera, cfg.angular_scale,
                     cfg.max_radius, width=cfg.width, seed=cfg.seed,
                     white_background=cfg.white_background)


# ------------------------------------------------------------------- panels


def normal_colors(scene: SceneRepresentation) -> torch.Tensor:
    n = vertex_normals(scene.surface.positions, scene.surface.topology.triangles)
    return 0.5 * (n + 1.0)


def _with(scene: SceneRepresentation, colors=None, background=None) -> SceneRepresentation:
    from .background import BackgroundSphere

    tex = scene.texture if colors is None else colors
    bg = scene.background
    if background is not None:
        bg = BackgroundSphere(torch.full_like(bg.texture, background), bg.angular_scale)
    return SceneRepresentation(scene.surface, tex, bg)


def sample_panel(G, z: torch.Tensor, sweep: int = 5, blur_width: float = 1.0) -> np.ndarray:
    """Rows per latent: frontal view, normal map, then a yaw sweep over the support."""
    with torch.no_grad():
        scene = G(z)
        n = z.shape[0]
        zero = torch.zeros(n, 3)
        front = render_views(G, z, zero, blur_width, scene=scene)
        normals = render_views(G, z, zero, blur_width, scene=_with(scene, normal_colors(scene), 1.0))
        lo, hi = G.dist.low[1], G.dist.high[1]
        views = []
        for yaw in np.linspace(lo, hi, sweep):
            ang = torch.tensor([[0.0, float(yaw), 0.0]]).expand(n, 3)
            views.append(render_views(G, z, ang, blur_width, scene=scene))
    rows = [[front[i], normals[i]] + [v[i] for v in views] for i in range(n)]
    return image_grid(rows)


def reconstruction_panel(G, E, images: torch.Tensor, blur_width: float = 1.0) -> np.ndarray:
    """Input, estimate, background only, texture, normal map and three novel views."""
    with torch.no_grad():
        out = E(images)
        scene = G(out.z)
        n = images.shape[0]
        est = render_views(G, out.z, out.angles, blur_width, scene=scene)
        bg = render_scenes(_shrunk(scene), out.angles, G.camera, blur_width, G.dist.order)
        zero = torch.zeros(n, 3)
        tex = render_views(G, out.z, zero, blur_width, scene=_with(scene, background=1.0))
        nrm = render_views(G, out.z, zero, blur_width,
                           scene=_with(scene, normal_colors(scene), 1.0))
        novel = []
        for yaw in (G.dist.low[1], 0.0, G.dist.high[1]):
            ang = out.angles.clone()
            ang[:, 1] = float(yaw)
            novel.append(render_views(G, out.z, ang, blur_width, scene=scene))
    rows = [[images[i], est[i], bg[i], tex[i], nrm[i]] + [v[i] for v in novel] for i in range(n)]
    return image_grid(rows)


def _shrunk(scene: SceneRepresentation) -> SceneRepresentation:
    """The same scene with the object collapsed to a tiny sphere behind nothing."""
    from .geometry import SurfaceMesh

    pos = scene.surface.positions * 1e-6
    return SceneRepresentation(SurfaceMesh(scene.surface.topology, pos), scene.texture,
                               scene.background)


# ---------------------------------------------------------------- GAN trainer


class GanTrainer:
    """WGAN-GP loop: ``n_critic`` critic updates per generator update."""

    def __init__(self, images: torch.Tensor, cfg: TrainConfig, out_dir=None):
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ValueError("images must be (N, H, W, 3)")
        if images.shape[1] != cfg.image_size:
            raise ValueError("dataset resolution differs from image_size")
        self.images = images.float()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.G = make_generator(cfg)
        self.D = Critic(cfg.image_size, cfg.width, seed=cfg.seed + 1)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.step_count = 0
        self.curves: List[Tuple[int, str, float]] = []
        self.out_dir = Path(out_dir) if out_dir else None
        self.fixed_z = sampler(cfg.z_dim, cfg.n_samples, np.random.default_rng(cfg.seed + 7))

    def _fake(self, n: int, grad: bool):
        z = sampler(self.cfg.z_dim, n, self.rng)
        # an independent viewpoint per fake image
        v = torch.as_tensor(cam.sample_viewpoints(self.cfg.dist, n, self.rng), dtype=torch.float32)
        if grad:
            scene = self.G(z)
            return render_views(self.G, z, v, self.cfg.blur_width, self.cfg.downsample, scene), scene
        with torch.no_grad():
            return render_views(self.G, z, v, self.cfg.blur_width, self.cfg.downsample), None

    def _real(self, n: int) -> torch.Tensor:
        idx = self.rng.integers(0, len(self.images), size=n)
        return self.images[torch.as_tensor(idx)]

    def critic_step(self) -> Dict[str, float]:
        cfg = self.cfg
        real = self._real(cfg.batch)
        fake, _ = self._fake(cfg.batch, grad=False)
        eps = torch.as_tensor(self.rng.random(cfg.batch), dtype=torch.float32)
        self.opt_d.zero_grad()
        d_real, d_fake = self.D(real), self.D(fake)
        loss_d, _ = wgan_losses(d_real, d_fake)
        gp = gradient_penalty(self.D, real, fake, cfg.lambda_gp, eps=eps)
        total = loss_d + gp
        if not torch.isfinite(total):
            raise NonFiniteLoss("critic loss is not finite")
        total.backward()
        self.opt_d.step()
        loss_d = loss_d.detach()
        return {"critic_loss": float(loss_d), "wasserstein": float(-loss_d),
                "gradient_penalty": float(gp.detach())}

    def generator_step(self) -> Dict[str, float]:
        cfg = self.cfg
        for p in self.D.parameters():
            p.requires_grad_(False)
        try:
            fake, scene = self._fake(cfg.batch, grad=True)
            self.opt_g.zero_grad()
            report = combined_generator_objective(self.D(fake), scene.surface.positions,
                                                  self.G.topology, cfg.lambda_s,
                                                  cfg.smooth_normalize)
            if not torch.isfinite(report.total):
                raise NonFiniteLoss("generator loss is not finite")
            report.total.backward()
            self.opt_g.step()
        finally:
            for p in self.D.parameters():
                p.requires_grad_(True)
        s = report.scalars()
        return {"generator_loss": s["generator"], "smoothing": s["smoothing"]}

    def step(self) -> Dict[str, float]:
        try:
            for _ in range(self.cfg.n_critic):
                logs = self.critic_step()
            logs.update(self.generator_step())
        except NonFiniteLoss:
            if self.out_dir:
                self.save(self.out_dir / "diagnostic.ckpt")
            raise
        self.step_count += 1
        for name in LOSS_NAMES_GAN:
            self.curves.append((self.step_count, name, logs[name]))
        return logs

    def run(self, steps: Optional[int] = None, callback=None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            logs = self.step()
            if callback is not None:
                callback(self.step_count, logs)
            k = self.step_count
            if self.out_dir and self.cfg.checkpoint_every and k % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"step{k:06d}.ckpt")
            if self.out_dir and self.cfg.sample_every and k % self.cfg.sample_every == 0:
                self.write_samples(self.out_dir / f"samples_{k:06d}.png")
        if self.out_dir:
            self.finish()
        return self

    def finish(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.save(self.out_dir / "final.ckpt")
        write_curves(self.out_dir / "losses.csv", self.curves)
        self.write_samples(self.out_dir / "samples_final.png")
        manifest = {"kind": "gan", "steps": self.step_count, "config": self.cfg.to_dict(),
                    "files": sorted(p.name for p in self.out_dir.iterdir())}
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def write_samples(self, path):
        write_png(path, sample_panel(self.G, self.fixed_z, blur_width=self.cfg.blur_width))

    def state(self):
        tensors = {**_module_tensors("G", self.G), **_module_tensors("D", self.D)}
        tg, gg = _optimizer_tensors("opt_g", self.opt_g)
        td, gd = _optimizer_tensors("opt_d", self.opt_d)
        tensors.update(tg)
        tensors.update(td)
        meta = {"step": self.step_count, "rng": _rng_state(self.rng), "groups_g": gg,
                "groups_d": gd, "config": self.cfg.to_dict(), "curves": self.curves}
        return tensors, meta

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tensors, meta = self.state()
        save_checkpoint(path, tensors, meta)

    def load(self, path) -> "GanTrainer":
        tensors, meta = load_checkpoint(path)
        _load_module_tensors("G", self.G, tensors)
        _load_module_tensors("D", self.D, tensors)
        _restore_optimizer("opt_g", self.opt_g, tensors, meta["groups_g"])
        _restore_optimizer("opt_d", self.opt_d, tensors, meta["groups_d"])
        _set_rng_state(self.rng, meta["rng"])
        self.step_count = meta["step"]
        self.curves = [tuple(r) for r in meta["curves"]]
        return self


def train_gan(images: torch.Tensor, cfg: TrainConfig, out_dir=None, callback=None) -> GanTrainer:
    return GanTrainer(images, cfg, out_dir).run(callback=callback)


# ------------------------------------------------------------ encoder trainer


@dataclass
class EncoderConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0  # decoupled (AdamW); 0 is plain Adam
    blur_width: float = 1.0
    downsample: int = 1
    image_size: int = 32
    width: int = 32
    bins: int = 21
    seed: int = 0
    checkpoint_every: int = 0
    n_panels: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderTrainer:
    """Trains the encoder through the frozen generator and renderer."""

    def __init__(self, images: torch.Tensor, G, cfg: EncoderConfig, out_dir=None):
        self.images = images.float()
        self.G = G
        self.cfg = cfg
        for p in G.parameters():
            p.requires_grad_(False)
        self.g_checksum = parameter_checksum(G)
        self.rng = np.random.default_rng(cfg.seed)
        self.E = Encoder(G.z_dim, G.dist, cfg.image_size, cfg.width, cfg.bins, seed=cfg.seed)
        self.opt = torch.optim.AdamW(self.E.parameters(), lr=cfg.lr, betas=cfg.betas,
                                     weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.curves: List[Tuple[int, str, float]] = []
        self.out_dir = Path(out_dir) if out_dir else None

    def loss(self, x: torch.Tensor) -> torch.Tensor:
        out = self.E(x)
        x_e = render_views(self.G, out.z, out.angles, self.cfg.blur_width, self.cfg.downsample)
        return autoencoder_loss(x, x_e)

    def step(self) -> Dict[str, float]:
        idx = self.rng.integers(0, len(self.images), size=self.cfg.batch)
        x = self.images[torch.as_tensor(idx)]
        self.opt.zero_grad()
        loss = self.loss(x)
        if not torch.isfinite(loss):
            if self.out_dir:
                self.save(self.out_dir / "diagnostic.ckpt")
            raise NonFiniteLoss("autoencoder loss is not finite")
        loss.backward()
        self.opt.step()
        self.step_count += 1
        value = float(loss.detach())
        self.curves.append((self.step_count, "autoencoder_loss", value))
        return {"autoencoder_loss": value}

    def run(self, steps: Optional[int] = None, callback=None) -> "EncoderTrainer":
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            logs = self.step()
            if callback is not None:
                callback(self.step_count, logs)
            k = self.step_count
            if self.out_dir and self.cfg.checkpoint_every and k % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"encoder{k:06d}.ckpt")
        if parameter_checksum(self.G) != self.g_checksum:
            raise RuntimeError("generator parameters changed during encoder training")
        if self.out_dir:
            self.finish()
        return self

    def finish(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.save(self.out_dir / "encoder.ckpt")
        write_curves(self.out_dir / "losses.csv", self.curves)
        panel = reconstruction_panel(self.G, self.E, self.images[: self.cfg.n_panels],
                                     self.cfg.blur_width)
        write_png(self.out_dir / "reconstructions.png", panel)
        manifest = {"kind": "encoder", "steps": self.step_count, "config": self.cfg.to_dict(),
                    "generator_checksum": self.g_checksum,
                    "files": sorted(p.name for p in self.out_dir.iterdir())}
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tensors = _module_tensors("E", self.E)
        to, go = _optimizer_tensors("opt", self.opt)
        tensors.update(to)
        meta = {"step": self.step_count, "rng": _rng_state(self.rng), "groups": go,
                "config": self.cfg.to_dict(), "generator_checksum": self.g_checksum}
        save_checkpoint(path, tensors, meta)

    def load(self, path) -> "EncoderTrainer":
        tensors, meta = load_checkpoint(path)
        _load_module_tensors("E", self.E, tensors)
        _restore_optimizer("opt", self.opt, tensors, meta["groups"])
        _set_rng_state(self.rng, meta["rng"])
        self.step_count = meta["step"]
        return self


def train_encoder(images: torch.Tensor, G, cfg: EncoderConfig, out_dir=None,
                  callback=None) -> EncoderTrainer:
    return EncoderTrainer(images, G, cfg, out_dir).run(callback=callback)


# ------------------------------------------------------------------ loading


def load_generator(source, dist: Optional[cam.ViewpointDistribution] = None):
    """A generator from a GAN checkpoint path, or ``"identity"`` for the
    analytic identity generator (float32)."""
    if str(source) == "identity":
        from .networks import IdentityGenerator

        return IdentityGenerator(dist=dist or cam.CELEBA_GAN)
    tensors, meta = load_checkpoint(source)
    cfg = TrainConfig.from_dict(meta["config"])
    G = make_generator(cfg)
    _load_module_tensors("G", G, tensors)
    return G


def load_encoder(path, G) -> Encoder:
    tensors, meta = load_checkpoint(path)
    cfg = meta["config"]
    E = Encoder(G.z_dim, G.dist, cfg["image_size"], cfg["width"], cfg["bins"], seed=cfg["seed"])
    _load_module_tensors("E", E, tensors)
    return E
