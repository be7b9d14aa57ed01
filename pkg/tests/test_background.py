import math

import pytest
import torch
from hypothesis import given, strategies as st

from meshgan import background as bgm
from meshgan import camera as cam

K = cam.CameraIntrinsics(32)
D = torch.float64


def _angles(p=0.0, y=0.0, r=0.0):
    return torch.tensor([p, y, r], dtype=D)


def test_zero_viewpoint_no_shift():
    assert bgm.background_shift(_angles(), K).tolist() == [0.0, 0.0]


def test_yaw_shift_linear():
    s = bgm.background_shift(cam.Viewpoint.from_degrees(yaw=10.0), K, 0.2)
    assert s[0].item() == pytest.approx(0.2 * math.radians(10.0) * K.pixels_per_radian, abs=1e-12)
    assert s[1].item() == 0.0


@given(st.lists(st.floats(-0.5, 0.5), min_size=6, max_size=6))
def test_shift_additive(a):
    v1, v2 = _angles(*a[:3]), _angles(*a[3:])
    lhs = bgm.background_shift(v1 + v2, K)
    rhs = bgm.background_shift(v1, K) + bgm.background_shift(v2, K)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_texture_side_margin():
    # image + 2 ceil(max shift) + 2 with shift = 0.2 * rad(65) * 64
    assert bgm.max_shift(cam.CELEBA_GAN, K) == pytest.approx(0.2 * math.radians(65) * 64)
    assert bgm.texture_side(cam.CELEBA_GAN, K) == 64
    assert bgm.texture_side(cam.CELEBA_AE, K) == 68


@given(st.floats(-1.1, 1.1), st.floats(-0.26, 0.26))
def test_constant_texture_constant_image(yaw, pitch):
    bg = bgm.BackgroundSphere.constant(64, (0.2, 0.4, 0.6))
    img = bgm.background_image(bg, _angles(pitch, yaw), K)
    assert torch.allclose(img, torch.tensor([0.2, 0.4, 0.6], dtype=D).expand(32, 32, 3),
                          atol=1e-15)


def test_integer_shift_relabels_texture():
    tex = torch.rand(64, 64, 3, dtype=D)
    bg = bgm.BackgroundSphere(tex)
    k = 0.2 * K.pixels_per_radian
    img = bgm.background_image(bg, _angles(2.0 / k, 3.0 / k), K)
    # margin 16, shift (dx, dy) = (3, 2)
    assert torch.allclose(img, tex[18:50, 19:51], atol=1e-12)
    base = bgm.background_image(bg, _angles(), K)
    assert torch.equal(base, tex[16:48, 16:48])


def test_half_pixel_shift_blends_step_edge():
    tex = torch.zeros(64, 64, 3, dtype=D)
    tex[:, 32:] = 1.0
    bg = bgm.BackgroundSphere(tex)
    k = 0.2 * K.pixels_per_radian
    img = bgm.background_image(bg, _angles(0.0, 0.5 / k), K)
    # column c reads texel 16 + c + 0.5; the edge between 31 and 32 falls in column 15
    assert torch.allclose(img[:, 15], torch.full((32, 3), 0.5, dtype=D), atol=1e-12)
    assert torch.all(img[:, 14] == 0.0) and torch.all(img[:, 16] == 1.0)


def test_off_texture_raises():
    bg = bgm.BackgroundSphere.constant(34)
    with pytest.raises(ValueError):
        bgm.background_image(bg, cam.Viewpoint.from_degrees(yaw=30.0), K)


def test_gradients_match_finite_differences():
    small = cam.CameraIntrinsics(8)
    tex = torch.rand(14, 14, 3, dtype=D, requires_grad=True)
    a = torch.tensor([0.1234, -0.3456, 0.0], dtype=D, requires_grad=True)
    f = lambda t, v: bgm.background_image(bgm.BackgroundSphere(t), v, small)
    assert torch.autograd.gradcheck(f, (tex, a), eps=1e-7, atol=1e-6, rtol=1e-4)


def test_batched_matches_single():
    tex = torch.rand(2, 64, 64, 3, dtype=D)
    a = torch.tensor([[0.1, 0.2, 0.0], [-0.2, 0.5, 0.0]], dtype=D)
    both = bgm.background_image(bgm.BackgroundSphere(tex), a, K)
    for i in range(2):
        one = bgm.background_image(bgm.BackgroundSphere(tex[i]), a[i], K)
        assert torch.equal(both[i], one)


def test_pixel_centers():
    pc = bgm.pixel_centers(4)
    assert pc.shape == (16, 2)
    assert pc[0].tolist() == [0.5, 0.5] and pc[5].tolist() == [1.5, 1.5]
