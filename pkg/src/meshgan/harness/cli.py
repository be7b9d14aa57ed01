"""Command-line front end: ``meshgan <command> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .. import camera as cam
from ..geometry import SurfaceMesh
from ..inversion import InversionOptions, invert
from ..renderer import gradcheck, random_scene, render_image
from . import config as cfgmod
from .datasets import archive_digest, load_dataset, make_dataset
from .io import read_png, write_obj, write_png
from .probes import hollow_mask_probe, reference_ambiguity_probe
from .scenes import FAMILIES, build_scene, sample_record

PRESETS = {"celeba-gan": cam.CELEBA_GAN, "celeba-ae": cam.CELEBA_AE, "turntable": cam.TURNTABLE}


class CommandError(RuntimeError):
    pass


def _dist(args, cp) -> cam.ViewpointDistribution:
    if getattr(args, "views", None):
        return PRESETS[args.views]
    return cfgmod.viewpoint_distribution(cp)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _parse_view(text: Optional[str], cp) -> List[float]:
    if text:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 3:
            raise CommandError("--view takes pitch,yaw,roll in degrees")
        return vals
    return list(cfgmod.view_degrees(cp, "render"))


def _scene_for(args, cp, dist, camera):
    """A single float64 scene from ``--generator`` or a family sample."""
    generator = getattr(args, "generator", None)
    if generator:
        from ..training import load_generator

        G = load_generator(generator, dist)
        z = torch.as_tensor(np.random.default_rng(args.seed).standard_normal((1, G.z_dim)),
                            dtype=torch.float32)
        with torch.no_grad():
            scene = G(z)
        return scene, G.camera
    family = args.family or cp.get("render", "family", fallback="sphere")
    level = int(cp.get("render", "level", fallback="5"))
    rec = sample_record(family, np.random.default_rng(args.seed), dist)
    return build_scene(rec, dist, camera, level), camera


def _single(scene):
    from ..background import BackgroundSphere
    from ..renderer import SceneRepresentation

    if not scene.batched:
        return scene
    bg = scene.background
    tex = bg.texture[0] if bg.texture.dim() == 4 else bg.texture
    return SceneRepresentation(SurfaceMesh(scene.surface.topology, scene.surface.positions[0]),
                               scene.texture[0], BackgroundSphere(tex, bg.angular_scale))


# ---------------------------------------------------------------- commands


def cmd_render(args, cp) -> int:
    dist = _dist(args, cp)
    camera = cam.CameraIntrinsics(int(cp.get("camera", "image_size", fallback="32")))
    scene, camera = _scene_for(args, cp, dist, camera)
    scene = _single(scene)
    view = np.radians(_parse_view(args.view, cp))
    blur = args.blur if args.blur is not None else float(cp.get("render", "blur_width",
                                                                 fallback="1.0"))
    with torch.no_grad():
        img = render_image(scene, torch.as_tensor(view, dtype=scene.texture.dtype), camera, blur,
                           dist.order)
    out = _out(args)
    write_png(out / "render.png", img)
    write_obj(out / "render.obj", scene.surface.positions, scene.texture, scene.surface.triangles)
    print(f"wrote {out / 'render.png'} and {out / 'render.obj'}")
    return 0


def cmd_gradcheck(args, cp) -> int:
    scene, view, camera = random_scene(args.seed)
    blur = args.blur if args.blur is not None else 1.0
    report = gradcheck(scene, view, camera, blur_width=blur, seed=args.seed,
                       n_entries=args.entries)
    for line in report.lines():
        print(line)
    ok = report.passed(args.tol)
    if args.out:
        _write_json(_out(args) / "gradcheck.json",
                    {"blur_width": blur, "max_rel_error": report.max_rel_error, "passed": ok})
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_invert(args, cp) -> int:
    from ..training import load_generator

    dist = _dist(args, cp)
    G = load_generator(args.generator, dist)
    opts = cfgmod.build(cp, "inversion", InversionOptions, seed=args.seed)
    if args.iterations is not None:
        opts.iterations = args.iterations
    x = torch.as_tensor(read_png(args.image))
    if x.shape[0] != G.camera.image_size:
        raise CommandError(f"image is {x.shape[0]} px; generator renders {G.camera.image_size}")
    res = invert(x, G, G.dist, opts)
    out = _out(args)
    scene = _single(res.scene)
    write_obj(out / "mesh.obj", scene.surface.positions, scene.texture, scene.surface.triangles)
    with torch.no_grad():
        rec = render_image(scene, res.angles, G.camera, opts.blur_width, G.dist.order)
    write_png(out / "reconstruction.png", rec)
    report = res.report()
    report["z"] = [float(v) for v in res.z]
    _write_json(out / "report.json", report)
    print(f"residual {res.residual:.3e} viewpoint_deg "
          + " ".join(f"{d:.3f}" for d in report["viewpoint_deg"]))
    return 0


def cmd_make_dataset(args, cp) -> int:
    dist = _dist(args, cp)
    family = args.family or cp.get("dataset", "family", fallback="ellipsoids")
    n = args.n if args.n is not None else int(cp.get("dataset", "n", fallback="256"))
    extra = {}
    if cp.has_option("dataset", "level"):
        extra["level"] = int(cp.get("dataset", "level"))
    ds = make_dataset(family, n, dist, args.seed, args.out, **extra)
    print(f"{len(ds)} images in {ds.root} sha256 {archive_digest(ds.root)}")
    return 0


def cmd_train_gan(args, cp) -> int:
    from ..training import TrainConfig, train_gan

    ds = load_dataset(args.data)
    over = {"seed": args.seed, "dist": ds.config.dist, "image_size": ds.config.image_size}
    if args.steps is not None:
        over["steps"] = args.steps
    cfg = cfgmod.build(cp, "gan", TrainConfig, **over)
    trainer = train_gan(ds.images(), cfg, _out(args))
    last = {name: v for _, name, v in trainer.curves[-5:]} if trainer.curves else {}
    print(f"trained {trainer.step_count} steps; "
          + " ".join(f"{k} {v:.4g}" for k, v in sorted(last.items())))
    return 0


def cmd_train_ae(args, cp) -> int:
    from ..training import EncoderConfig, load_generator, train_encoder

    ds = load_dataset(args.data)
    G = load_generator(args.generator, ds.config.dist)
    over = {"seed": args.seed, "image_size": ds.config.image_size}
    if args.steps is not None:
        over["steps"] = args.steps
    cfg = cfgmod.build(cp, "encoder", EncoderConfig, **over)
    trainer = train_encoder(ds.images(), G, cfg, _out(args))
    final = trainer.curves[-1][2] if trainer.curves else float("nan")
    print(f"trained {trainer.step_count} steps; autoencoder_loss {final:.4g}")
    return 0


def cmd_probe(args, cp) -> int:
    out = _out(args)
    if args.kind == "hollow-mask":
        dist = _dist(args, cp)
        camera = cam.CameraIntrinsics()
        rng = np.random.default_rng(args.seed)
        reports = []
        for _ in range(args.n):
            rec = sample_record(args.family or "bumpy-spheres", rng, dist)
            scene = build_scene(rec, dist, camera)
            rep = hollow_mask_probe(scene.surface, scene.texture, dist, camera)
            reports.append({"shape": rec["shape"], **rep.to_dict(),
                            "frontal": rep.gap_at(0, 0), "yaw60": rep.gap_at(0, 60)})
        front = float(np.median([r["frontal"] for r in reports])) if reports else math.nan
        side = float(np.median([r["yaw60"] for r in reports])) if reports else math.nan
        _write_json(out / "hollow_mask.json",
                    {"scenes": reports, "median_frontal": front, "median_yaw60": side})
        print(f"hollow-mask median gap frontal {front:.4f} yaw60 {side:.4f}")
        return 0
    from ..training import load_generator

    G = load_generator(args.generator, _dist(args, cp))
    if args.yaw_offset:
        if args.generator != "identity":
            raise CommandError("--yaw-offset applies to the identity generator only")
        G.yaw_offset = math.radians(args.yaw_offset)
    rep = reference_ambiguity_probe(G, args.n, args.seed)
    _write_json(out / "reference.json", rep.to_dict())
    med = "undefined" if rep.median is None else f"{rep.median:.3f}"
    print(f"reference offset median_deg {med} over {len(rep.defined)}/{args.n} samples")
    return 0


def cmd_export_obj(args, cp) -> int:
    dist = _dist(args, cp)
    scene, _ = _scene_for(args, cp, dist, cam.CameraIntrinsics())
    scene = _single(scene)
    out = _out(args)
    write_obj(out / "mesh.obj", scene.surface.positions, scene.texture, scene.surface.triangles)
    print(f"wrote {out / 'mesh.obj'}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with run options")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    views = argparse.ArgumentParser(add_help=False)
    views.add_argument("--views", choices=sorted(PRESETS),
                       help="viewpoint preset; overrides [viewpoints]")

    p = argparse.ArgumentParser(prog="meshgan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("render", parents=[common, views], help="render a scene to PNG and OBJ")
    s.add_argument("--family", choices=FAMILIES)
    s.add_argument("--generator", help="checkpoint path or 'identity'")
    s.add_argument("--view", help="pitch,yaw,roll in degrees")
    s.add_argument("--blur", type=float)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check")
    s.add_argument("--blur", type=float)
    s.add_argument("--entries", type=int, default=12)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck, out=None)

    s = sub.add_parser("invert", parents=[common, views], help="invert an image")
    s.add_argument("--image", required=True)
    s.add_argument("--generator", default="identity")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("train-gan", parents=[common], help="adversarial training")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("train-ae", parents=[common], help="encoder training")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--generator", default="identity")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("make-dataset", parents=[common, views], help="synthetic dataset")
    s.add_argument("--family", choices=FAMILIES)
    s.add_argument("--n", type=int)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("probe", parents=[common, views], help="ambiguity probes")
    s.add_argument("--kind", choices=("hollow-mask", "reference"), default="hollow-mask")
    s.add_argument("--family", choices=FAMILIES)
    s.add_argument("--generator", default="identity")
    s.add_argument("--yaw-offset", type=float, default=0.0, help="degrees")
    s.add_argument("--n", type=int, default=8)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("export-obj", parents=[common, views], help="write a colored OBJ")
    s.add_argument("--family", choices=FAMILIES)
    s.add_argument("--generator", help="checkpoint path or 'identity'")
    s.set_defaults(func=cmd_export_obj)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on unknown flags
    try:
        cp = cfgmod.read_config(args.config)
        return args.func(args, cp)
    except (CommandError, cfgmod.ConfigError, ValueError, RuntimeError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"meshgan {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
