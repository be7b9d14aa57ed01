import math

import numpy as np
import pytest
import torch

from meshgan import camera as cam
from meshgan import networks as nw
from meshgan.geometry import NUM_BASES

D = torch.float64


@pytest.fixture(scope="module")
def small_gen():
    return nw.Generator(max_level=3, width=8, seed=1)


def test_generator_deterministic(small_gen):
    z = torch.randn(2, nw.Z_DIM)
    a, b = small_gen(z), small_gen(z)
    assert torch.equal(a.surface.positions, b.surface.positions)
    assert torch.equal(a.texture, b.texture)
    assert torch.equal(a.background.texture, b.background.texture)
    again = nw.Generator(max_level=3, width=8, seed=1)
    assert nw.parameter_checksum(again) == nw.parameter_checksum(small_gen)


def test_background_latent_is_independent(small_gen):
    z = torch.randn(3, nw.Z_DIM)
    z2 = z.clone()
    z2[:, nw.Z_OBJ:] += torch.randn(3, nw.Z_DIM - nw.Z_OBJ)
    a, b = small_gen(z), small_gen(z2)
    assert torch.equal(a.surface.positions, b.surface.positions)
    assert torch.equal(a.texture, b.texture)
    assert not torch.equal(a.background.texture, b.background.texture)


def test_generator_output_invariants(small_gen):
    z = torch.randn(4, nw.Z_DIM)
    s = small_gen(z)
    assert s.surface.positions.shape == (4, 81, 3)
    assert s.texture.min() >= 0 and s.texture.max() <= 1
    bg = s.background.texture
    assert bg.shape == (4, small_gen.bg_side, small_gen.bg_side, 3)
    assert bg.min() >= 0 and bg.max() <= 1
    r = s.surface.positions.norm(dim=-1)
    assert bool((r.amax(-1) <= 1.0 + 1e-6).all()) and bool((r > 0).all())
    assert len(small_gen.bases) == 2 and small_gen.bases["3"].shape == (NUM_BASES, 9, 9)


def test_alpha_head_jacobian_fd():
    g = nw.Generator(max_level=3, width=8, seed=2).double()
    z_o = torch.randn(2, nw.Z_OBJ, dtype=D, requires_grad=True)
    assert torch.autograd.gradcheck(g.alpha_fc, (z_o,), eps=1e-6, rtol=1e-4)


def test_generator_backprop_fd():
    g = nw.Generator(max_level=2, width=8, seed=3).double()
    z = torch.randn(1, nw.Z_DIM, dtype=D, requires_grad=True)
    f = lambda z: (g.radial(z), g.texture(z), g.background(z))
    assert torch.autograd.gradcheck(f, (z,), eps=1e-6, atol=1e-7, rtol=1e-4, fast_mode=True)


def test_zero_critic_outputs_zero():
    c = nw.Critic(32, width=8)
    with torch.no_grad():
        for p in c.parameters():
            p.zero_()
    assert torch.equal(c(torch.rand(3, 32, 32, 3)), torch.zeros(3))


def test_critic_input_gradient_fd():
    c = nw.Critic(16, width=4, seed=5).double()
    x = torch.rand(1, 16, 16, 3, dtype=D, requires_grad=True)
    assert torch.autograd.gradcheck(c, (x,), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_critic_pixel_order_matters():
    c = nw.Critic(32, width=8, seed=0)
    x = torch.rand(1, 32, 32, 3)
    perm = torch.randperm(32 * 32)
    y = x.reshape(1, -1, 3)[:, perm].reshape(1, 32, 32, 3)
    assert c(x).item() != c(y).item()


def test_encoder_uniform_logits_give_midpoint():
    dist = cam.ViewpointDistribution((-10.0, 30.0), (-65.0, 65.0), (0.0, 0.0))
    e = nw.Encoder(dist=dist, width=8)
    got = nw.expected_angles(torch.zeros(1, 3, nw.ANGLE_BINS), e.centers)
    assert torch.allclose(got[0], torch.as_tensor(dist.center, dtype=torch.float32), atol=1e-6)


def test_encoder_one_hot_limit():
    e = nw.Encoder(dist=cam.CELEBA_AE, width=8)
    logits = torch.full((1, 3, nw.ANGLE_BINS), -1e4, dtype=D)
    logits[0, :, 4] = 1e4
    got = nw.expected_angles(logits, e.centers.double())
    assert torch.allclose(got[0], e.centers[:, 4].double(), atol=1e-6)


def test_expectation_matches_naive_sum():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 3, 7))
    centers = rng.standard_normal((3, 7))
    got = nw.expected_angles(torch.as_tensor(logits), torch.as_tensor(centers)).numpy()
    for b in range(2):
        for a in range(3):
            p = np.exp(logits[b, a]) / np.exp(logits[b, a]).sum()
            assert got[b, a] == pytest.approx(sum(p[k] * centers[a, k] for k in range(7)), abs=1e-12)


def test_encoder_angles_inside_support():
    e = nw.Encoder(dist=cam.CELEBA_AE, width=8, seed=3)
    with torch.no_grad():
        e.angle_head.weight.mul_(1e3)
        out = e(torch.rand(8, 32, 32, 3) * 50)
    assert out.z.shape == (8, nw.Z_DIM) and out.angle_logits.shape == (8, 3, nw.ANGLE_BINS)
    assert cam.CELEBA_AE.contains(out.angles.double().numpy(), atol=1e-6)


def test_encoder_backprop_fd():
    e = nw.Encoder(z_dim=4, dist=cam.CELEBA_AE, image_size=16, width=4, bins=5).double()
    x = torch.rand(1, 16, 16, 3, dtype=D, requires_grad=True)
    f = lambda x: (e(x).z, e(x).angles)
    assert torch.autograd.gradcheck(f, (x,), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_bin_centers_cover_range():
    c = cam.bin_centers(-1.0, 1.0, 21)
    assert c[0] == -1.0 and c[-1] == 1.0 and len(c) == 21


# ----------------------------------------------------------- identity generator


def test_identity_generator_layout():
    G = nw.IdentityGenerator(dtype=D)
    assert G.z_dim == 10
    z = torch.zeros(1, 10, dtype=D)
    s = G(z)
    # z = 0: a sphere of the mean radius with a flat mid-grey texture
    assert torch.allclose(s.surface.radii(), torch.full((1, G.side**2), 0.5, dtype=D), atol=1e-12)
    assert torch.allclose(s.texture, torch.full_like(s.texture, 0.5))


def test_identity_latent_partition():
    G = nw.IdentityGenerator(dtype=D)
    z = torch.randn(2, 10, dtype=D)
    z2 = z.clone()
    z2[:, 7:] += 1.0
    a, b = G(z), G(z2)
    assert torch.equal(a.surface.positions, b.surface.positions)
    assert torch.equal(a.texture, b.texture)
    assert not torch.equal(a.background.texture, b.background.texture)


def test_identity_yaw_offset_rotates():
    z = torch.randn(1, 10, dtype=D)
    base = nw.IdentityGenerator(dtype=D)(z).surface.positions
    off = nw.IdentityGenerator(dtype=D, yaw_offset=math.radians(30))(z).surface.positions
    R = cam.rotation_matrix(torch.tensor([0.0, math.radians(30), 0.0], dtype=D))
    assert torch.allclose(off, base @ R.T, atol=1e-12)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, small_gen):
    p = tmp_path / "g.ckpt"
    nw.save_module(p, small_gen, {"note": "x"})
    other = nw.Generator(max_level=3, width=8, seed=9)
    meta = nw.load_module(p, other)
    assert meta == {"note": "x"}
    assert nw.parameter_checksum(other) == nw.parameter_checksum(small_gen)
    tensors, _ = nw.load_checkpoint(p)
    assert all(t.dtype == torch.float32 for t in tensors.values())


def test_checkpoint_rejects_shape_mismatch(tmp_path, small_gen):
    p = tmp_path / "g.ckpt"
    nw.save_module(p, small_gen)
    with pytest.raises(ValueError):
        nw.load_module(p, nw.Generator(max_level=3, width=16))
    with pytest.raises(ValueError):
        nw.load_module(p, nw.Generator(max_level=4, width=8))
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nw.load_checkpoint(tmp_path / "junk")


def test_checkpoint_little_endian_layout(tmp_path):
    p = tmp_path / "t.ckpt"
    nw.save_checkpoint(p, {"a": torch.tensor([1.0, 2.0], dtype=D)})
    data = p.read_bytes()
    assert data.startswith(nw.CHECKPOINT_MAGIC)
    assert data.endswith(np.array([1.0, 2.0], dtype="<f8").tobytes())
