import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from meshgan import camera as cam
from meshgan.geometry import SurfaceMesh, build_tessellation, spherical_to_cartesian
from meshgan.harness import cli
from meshgan.harness import config as cfgmod
from meshgan.harness import io
from meshgan.harness import metrics
from meshgan.harness import probes
from meshgan.harness.datasets import (FAMILIES, archive_digest, load_dataset, make_dataset,
                                      verify_roundtrip)
from meshgan.harness.scenes import build_scene, sample_record
from meshgan.networks import IdentityGenerator
from meshgan.training import EncoderConfig, TrainConfig

D = torch.float64

# ------------------------------------------------------------------- io


def test_png_roundtrip_uint8_exact(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    io.write_png(tmp_path / "a.png", arr)
    back = io.read_png(tmp_path / "a.png")
    assert np.array_equal(np.rint(back * 255).astype(np.uint8), arr)


def test_to_uint8_clips_and_rounds():
    got = io.to_uint8(np.array([[[-1.0, 0.5 / 255, 2.0]]]))
    assert got.tolist() == [[[0, 0, 255]]]  # 0.5 rounds half to even


def test_npy_roundtrip_float32_exact(tmp_path):
    g = np.random.default_rng(1).standard_normal((9, 9)).astype(np.float32)
    io.write_npy(tmp_path / "g.npy", g)
    back = io.read_npy(tmp_path / "g.npy")
    assert back.dtype == np.float32 and np.array_equal(back, g)


def test_obj_roundtrip(tmp_path):
    topo = build_tessellation(5, 6)
    pos = spherical_to_cartesian(0.5 + 0.1 * torch.rand(5, 6, dtype=D), topo)
    col = torch.rand(30, 3, dtype=D)
    io.write_obj(tmp_path / "m.obj", pos, col, topo.triangles)
    p, c, t = io.read_obj(tmp_path / "m.obj")
    assert np.array_equal(p, pos.numpy()) and np.array_equal(c, col.numpy())
    assert np.array_equal(t, np.asarray(topo.triangles))
    with pytest.raises(ValueError):
        io.write_obj(tmp_path / "x.obj", pos, col[:3], topo.triangles)


def test_image_grid_layout():
    a, b = np.zeros((2, 3, 3)), np.ones((2, 3, 3)) * 0.5
    g = io.image_grid([[a, b]], pad=1, fill=1.0)
    assert g.shape == (4, 9, 3)
    assert np.all(g[1:3, 1:4] == 0) and np.all(g[1:3, 5:8] == 0.5) and np.all(g[0] == 1)


# ---------------------------------------------------------------- config


def _ini(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return cfgmod.read_config(str(p))


def test_config_sections_coerced(tmp_path):
    cp = _ini(tmp_path, "[gan]\nsteps = 7\nlambda_s = 0.5\nbetas = 0.1, 0.2\n"
                        "[viewpoints]\npitch = 10\nyaw = -30, 40\norder = yx\n")
    c = cfgmod.build(cp, "gan", TrainConfig)
    assert c.steps == 7 and c.lambda_s == 0.5 and c.betas == (0.1, 0.2)
    d = cfgmod.viewpoint_distribution(cp)
    assert d.pitch == (-10.0, 10.0) and d.yaw == (-30.0, 40.0) and d.order == "yx"
    assert d.roll == cam.CELEBA_GAN.roll


def test_config_errors(tmp_path):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.read_config(str(tmp_path / "missing.cfg"))
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.build(_ini(tmp_path, "[gan]\nbogus = 1\n"), "gan", TrainConfig)
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.build(_ini(tmp_path, "[encoder]\nsteps = many\n"), "encoder", EncoderConfig)
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.viewpoint_distribution(_ini(tmp_path, "[viewpoints]\ntilt = 3\n"))


def test_missing_sections_give_defaults():
    cp = cfgmod.read_config(None)
    assert cfgmod.viewpoint_distribution(cp) == cam.CELEBA_GAN
    assert cfgmod.view_degrees(cp) == (0.0, 0.0, 0.0)
    assert cfgmod.build(cp, "gan", TrainConfig) == TrainConfig()


# --------------------------------------------------------------- metrics


def test_nearest_image_distance_matches_naive():
    rng = np.random.default_rng(0)
    s, r = rng.random((5, 4, 4, 3)), rng.random((300, 4, 4, 3))
    got = metrics.nearest_image_distance(torch.as_tensor(s), torch.as_tensor(r), chunk=2).numpy()
    naive = [min(np.linalg.norm(a - b, axis=-1).mean() for b in r) for a in s]
    assert np.allclose(got, naive, rtol=1e-12)
    assert float(metrics.nearest_image_distance(torch.as_tensor(r[:3]), torch.as_tensor(r)).max()) == 0


def test_decile_means():
    assert metrics.decile_means(list(range(100))) == (4.5, 94.5)
    with pytest.raises(ValueError):
        metrics.decile_means([1.0] * 9)


# --------------------------------------------------------------- datasets


def test_empty_dataset_has_valid_manifest(tmp_path):
    ds = make_dataset("ellipsoids", 0, out_dir=tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["count"] == 0 and man["images"] == {} and man["config_hash"] == ds.config.digest()
    again = load_dataset(tmp_path)
    assert len(again) == 0 and again.images().shape == (0, 32, 32, 3)


def test_fixed_seed_byte_identical(tmp_path):
    a = make_dataset("two-lobe", 3, seed=4, out_dir=tmp_path / "a")
    make_dataset("two-lobe", 3, seed=4, out_dir=tmp_path / "b")
    make_dataset("two-lobe", 3, seed=5, out_dir=tmp_path / "c")
    assert archive_digest(tmp_path / "a") == archive_digest(tmp_path / "b")
    assert archive_digest(tmp_path / "a") != archive_digest(tmp_path / "c")
    assert len(a) == 3


@pytest.mark.parametrize("family", FAMILIES)
def test_images_rerender_from_sidecar(tmp_path, family):
    make_dataset(family, 2, seed=1, out_dir=tmp_path)
    ds = load_dataset(tmp_path)
    assert verify_roundtrip(ds) == []
    assert cam.CELEBA_GAN.contains(ds.viewpoints().numpy())


def test_roundtrip_detects_tampering(tmp_path):
    ds = make_dataset("sphere", 2, out_dir=tmp_path)
    img = io.read_png(ds.image_path(1))
    img[0, 0] = 1.0 - img[0, 0]
    io.write_png(ds.image_path(1), img)
    assert verify_roundtrip(load_dataset(tmp_path)) == [1]


def test_make_dataset_rejects_bad_args(tmp_path):
    with pytest.raises(ValueError):
        make_dataset("cubes", 1, out_dir=tmp_path)
    with pytest.raises(ValueError):
        make_dataset("sphere", -1, out_dir=tmp_path)


# ----------------------------------------------------------------- probes


def _scene(family, seed=0):
    rec = sample_record(family, np.random.default_rng(seed), cam.CELEBA_GAN)
    return build_scene(rec, cam.CELEBA_GAN, cam.CameraIntrinsics())


@given(st.floats(0.1, 2.0))
def test_invert_relief_constant_fixed_point(r):
    rho = torch.full((9, 9), r, dtype=D)
    assert torch.equal(probes.invert_relief(rho), rho)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_invert_relief_involution_and_mean(seed):
    rho = torch.rand(2, 9, 9, dtype=D, generator=torch.Generator().manual_seed(seed)) + 0.2
    inv = probes.invert_relief(rho)
    assert torch.allclose(probes.invert_relief(inv), rho, atol=1e-14)
    assert torch.allclose(inv.mean((-2, -1)), rho.mean((-2, -1)), atol=1e-14)


def test_normalized_gap_cases():
    ref = torch.zeros(4, 4, 3, dtype=D)
    a = torch.ones(4, 4, 3, dtype=D)
    assert probes.normalized_gap(a, a, ref).item() == 0.0
    assert probes.normalized_gap(a, ref, ref).item() == 1.0
    assert probes.normalized_gap(ref, a, ref).item() == 0.0  # no object share


def test_zero_relief_sphere_gap_is_zero():
    topo = build_tessellation(17, 17)
    mesh = SurfaceMesh(topo, spherical_to_cartesian(torch.full((17, 17), 0.6, dtype=D), topo))
    tex = torch.rand(17 * 17, 3, dtype=D)
    rep = probes.hollow_mask_probe(mesh, tex, cam.CELEBA_GAN)
    assert len(rep.gaps) == 11 and np.all(rep.gaps == 0.0)


def test_hollow_mask_frontal_live_side_broken():
    s = _scene("bumpy-spheres", seed=3)
    rep = probes.hollow_mask_probe(s.surface, s.texture, cam.CELEBA_GAN)
    assert rep.gap_at(0, 0) < rep.gap_at(0, 60)
    assert rep.to_dict()["views_deg"][-1] == pytest.approx([0.0, 60.0, 0.0])


def test_hollow_mask_probe_deterministic():
    s = _scene("bumpy-spheres", seed=1)
    a = probes.hollow_mask_probe(s.surface, s.texture, cam.CELEBA_GAN, views=[[0, 0.5, 0]])
    b = probes.hollow_mask_probe(s.surface, s.texture, cam.CELEBA_GAN, views=[[0, 0.5, 0]])
    assert np.array_equal(a.gaps, b.gaps)


_FAST = dict(search_deg=40.0, step_deg=1.0)


def test_reference_probe_identity_aligned():
    rep = probes.reference_ambiguity_probe(IdentityGenerator(), n=2, seed=0, **_FAST)
    assert rep.median is not None and abs(rep.median) < 5.0


def test_reference_probe_built_in_offset():
    G = IdentityGenerator(yaw_offset=math.radians(30.0))
    rep = probes.reference_ambiguity_probe(G, n=2, seed=0, search_deg=80.0, step_deg=1.0)
    assert rep.median == pytest.approx(30.0, abs=2.0)


def test_reference_probe_constant_sphere_undefined():
    G = IdentityGenerator()
    z = torch.zeros(1, G.z_dim)  # sphere with flat texture
    rep = probes.reference_ambiguity_probe(G, z=z, **_FAST)
    assert rep.offsets_deg == [None] and rep.median is None
    assert rep.to_dict()["undefined"] == 1


def test_refine_recovers_parabola_vertex():
    xs = np.arange(-5.0, 5.5, 1.0)
    assert probes._refine(xs, (xs - 0.3) ** 2, 5) == pytest.approx(0.3, abs=1e-12)
    assert probes._refine(xs, xs, 0) == -5.0


def test_radial_error_and_registration():
    topo = build_tessellation(33, 33)
    d = torch.as_tensor(topo.directions(), dtype=D)
    rho = (0.5 + 0.1 * d[:, 0] + 0.05 * d[:, 2]).reshape(33, 33)
    assert probes.radial_error(rho, rho) == {"mae": 0.0, "relative": 0.0, "yaw_deg": 0.0}
    # grid lookup at the nodes returns the nodes
    assert torch.allclose(probes.sample_radial(rho, d), rho.flatten(), atol=1e-12)
    turned = probes.rotate_radial(rho, math.radians(20.0))
    err = probes.radial_error(turned, rho, register_deg=30.0)
    assert abs(err["yaw_deg"]) == pytest.approx(20.0, abs=1.0)
    assert err["relative"] < probes.radial_error(turned, rho)["relative"]


# -------------------------------------------------------------------- cli


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_gradcheck_seed_1(capsys, tmp_path):
    code, out, _ = _run(["gradcheck", "--seed", "1", "--out", str(tmp_path)], capsys)
    assert code == 0 and out.strip().endswith("PASS")
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert {"positions", "colors", "background", "viewpoint", "silhouette"} == set(rep["max_rel_error"])
    assert max(rep["max_rel_error"].values()) < 1e-3


def test_cli_render_from_config(capsys, tmp_path):
    cfg = tmp_path / "sphere.cfg"
    cfg.write_text("[render]\nfamily = sphere\nyaw = 20\n")
    code, out, _ = _run(["render", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    img = io.read_png(tmp_path / "o" / "render.png")
    assert img.shape == (32, 32, 3)
    pos, _, tri = io.read_obj(tmp_path / "o" / "render.obj")
    assert pos.shape == (33 * 33, 3) and tri.shape[1] == 3


def test_cli_make_dataset_twice_identical(capsys, tmp_path):
    shas = []
    for name in ("a", "b"):
        code, out, _ = _run(["make-dataset", "--family", "ellipsoids", "--n", "4", "--seed", "7",
                             "--out", str(tmp_path / name)], capsys)
        assert code == 0
        shas.append(out.split()[-1])
    assert shas[0] == shas[1] == archive_digest(tmp_path / "a")


def test_cli_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["render", "--bogus"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_errors_are_one_line(capsys, tmp_path):
    code, _, err = _run(["render", "--config", str(tmp_path / "nope.cfg")], capsys)
    assert code == 1 and err.count("\n") == 1 and err.startswith("meshgan render: error:")
    code, _, err = _run(["render", "--view", "1,2", "--out", str(tmp_path)], capsys)
    assert code == 1 and "--view" in err


def test_cli_invert_identity(capsys, tmp_path):
    G = IdentityGenerator(dtype=D)
    z = torch.zeros(1, 10, dtype=D)
    with torch.no_grad():
        from meshgan.inversion import _render
        img = _render(G, z, torch.tensor([[0.0, 0.2, 0.0]], dtype=D), 1.0)[0]
    io.write_png(tmp_path / "x.png", img)
    code, out, _ = _run(["invert", "--image", str(tmp_path / "x.png"), "--iterations", "3",
                         "--out", str(tmp_path / "o")], capsys)
    assert code == 0 and out.startswith("residual")
    names = {p.name for p in (tmp_path / "o").iterdir()}
    assert names == {"mesh.obj", "reconstruction.png", "report.json"}


def test_cli_probe_and_export(capsys, tmp_path):
    code, out, _ = _run(["probe", "--kind", "hollow-mask", "--n", "1", "--out", str(tmp_path)],
                        capsys)
    assert code == 0 and "frontal" in out
    rep = json.loads((tmp_path / "hollow_mask.json").read_text())
    assert len(rep["scenes"]) == 1
    code, _, err = _run(["probe", "--kind", "reference", "--generator", "missing.ckpt",
                         "--out", str(tmp_path)], capsys)
    assert code == 1 and err.count("\n") == 1
    code, _, _ = _run(["export-obj", "--family", "two-lobe", "--out", str(tmp_path)], capsys)
    assert code == 0 and (tmp_path / "mesh.obj").exists()


def test_cli_train_commands(capsys, tmp_path):
    _run(["make-dataset", "--family", "sphere", "--n", "4", "--out", str(tmp_path / "d")], capsys)
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("[gan]\nbatch = 2\nwidth = 4\nmax_level = 2\nn_critic = 1\nn_samples = 2\n"
                   "[encoder]\nbatch = 2\nwidth = 4\nn_panels = 2\n")
    code, out, _ = _run(["train-gan", "--data", str(tmp_path / "d"), "--steps", "1", "--config",
                         str(cfg), "--out", str(tmp_path / "g")], capsys)
    assert code == 0 and "trained 1 steps" in out
    code, out, _ = _run(["train-ae", "--data", str(tmp_path / "d"), "--generator",
                         str(tmp_path / "g" / "final.ckpt"), "--steps", "1", "--config", str(cfg),
                         "--out", str(tmp_path / "e")], capsys)
    assert code == 0 and "autoencoder_loss" in out
