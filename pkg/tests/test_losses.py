import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from meshgan import geometry as geo
from meshgan import losses as L

from oracles import naive_smoothing

D = torch.float64


def test_wgan_symmetric_zero():
    s = torch.tensor([0.3, -1.2, 2.0], dtype=D)
    critic, _ = L.wgan_losses(s, s.clone())
    assert critic.item() == 0.0


def test_wgan_unit_gap():
    critic, gen = L.wgan_losses(torch.ones(2, dtype=D), torch.zeros(2, dtype=D))
    assert -critic.item() == 1.0
    assert gen.item() == 0.0


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 10_000))
def test_wgan_matches_mean_difference(nr, nf, seed):
    rng = np.random.default_rng(seed)
    r, f = rng.standard_normal(nr), rng.standard_normal(nf)
    critic, gen = L.wgan_losses(torch.as_tensor(r), torch.as_tensor(f))
    est = sum(r) / nr - sum(f) / nf
    assert abs(-critic.item() - est) < 1e-12
    assert abs(gen.item() + sum(f) / nf) < 1e-12


def test_wgan_empty_rejected():
    with pytest.raises(ValueError):
        L.wgan_losses(torch.zeros(0), torch.zeros(3))


def _linear(w):
    return lambda x: (x.flatten(1) * w).sum(-1)


def test_gp_unit_linear_critic_zero():
    w = torch.randn(12, dtype=D)
    w = w / w.norm()
    real, fake = torch.randn(4, 3, 4, dtype=D), torch.randn(4, 3, 4, dtype=D)
    assert L.gradient_penalty(_linear(w), real, fake).item() == pytest.approx(0.0, abs=1e-24)


def test_gp_double_slope_equals_lambda():
    w = torch.randn(12, dtype=D)
    w = 2 * w / w.norm()
    real, fake = torch.randn(4, 12, dtype=D), torch.randn(4, 12, dtype=D)
    assert L.gradient_penalty(_linear(w), real, fake, 10.0).item() == pytest.approx(10.0, rel=1e-12)


def test_gp_matches_finite_difference_norms():
    g = torch.Generator().manual_seed(3)
    net = torch.nn.Sequential(torch.nn.Linear(6, 8), torch.nn.Tanh(), torch.nn.Linear(8, 1)).double()
    critic = lambda x: net(x).squeeze(-1)
    real, fake = torch.randn(3, 6, dtype=D, generator=g), torch.randn(3, 6, dtype=D, generator=g)
    eps = torch.rand(3, dtype=D, generator=g)
    gp = L.gradient_penalty(critic, real, fake, 10.0, eps=eps).item()
    h = 1e-6
    pens = []
    for i, e in enumerate(torch.cat([eps, 1 - eps]).tolist()):
        x = real[i % 3] + e * (fake[i % 3] - real[i % 3])
        grad = torch.stack([(critic((x + h * d)[None]) - critic((x - h * d)[None]))[0] / (2 * h)
                            for d in torch.eye(6, dtype=D)])
        pens.append((grad.norm().item() - 1.0) ** 2)
    assert gp == pytest.approx(10.0 * float(np.mean(pens)), rel=1e-3)


def test_gp_swap_invariant():
    net = torch.nn.Sequential(torch.nn.Linear(5, 7), torch.nn.Softplus(), torch.nn.Linear(7, 1)).double()
    critic = lambda x: net(x).squeeze(-1)
    real, fake = torch.randn(6, 5, dtype=D), torch.randn(6, 5, dtype=D)
    eps = torch.rand(6, dtype=D)
    a = L.gradient_penalty(critic, real, fake, eps=eps)
    b = L.gradient_penalty(critic, fake, real, eps=eps)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_gp_differentiable_and_shape_checked():
    net = torch.nn.Linear(4, 1).double()
    critic = lambda x: net(x).squeeze(-1)
    gp = L.gradient_penalty(critic, torch.randn(3, 4, dtype=D), torch.randn(3, 4, dtype=D))
    gp.backward()
    assert net.weight.grad is not None and torch.isfinite(net.weight.grad).all()
    with pytest.raises(ValueError):
        L.gradient_penalty(critic, torch.randn(3, 4), torch.randn(2, 4))


def test_smoothing_flat_patch_zero():
    xs = np.linspace(0, 1, 5)
    pos = torch.tensor([[x, y, 0.0] for y in xs for x in xs], dtype=D)
    tri = []
    for r in range(4):
        for c in range(4):
            a, b, d, e = 5 * r + c, 5 * r + c + 1, 5 * (r + 1) + c, 5 * (r + 1) + c + 1
            tri += [(a, b, e), (a, e, d)]
    assert L.smoothing_loss(pos, np.array(tri)).item() == 0.0


def test_smoothing_fold_90_degrees():
    pos = torch.tensor([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=D)
    # shared edge (0, 1); normals +z and -y... opposite windings keep them consistent
    tri = np.array([[0, 1, 2], [1, 0, 3]])
    assert L.smoothing_loss(pos, tri).item() == pytest.approx(1.0, abs=1e-15)


def test_smoothing_sphere_matches_naive_oracle():
    topo = geo.build_tessellation(33, 33)
    pos = geo.spherical_to_cartesian(torch.ones(33, 33, dtype=D), topo)
    tri = np.array(topo.triangles)
    got = L.smoothing_loss(pos, topo).item()
    assert got == pytest.approx(naive_smoothing(pos, tri), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_smoothing_rigid_and_scale_invariant(seed):
    from meshgan.camera import rotation_matrix

    g = torch.Generator().manual_seed(seed)
    topo = geo.build_tessellation(9, 12)
    rho = 0.5 + 0.2 * torch.rand(9, 12, dtype=D, generator=g)
    pos = geo.spherical_to_cartesian(rho, topo)
    base = L.smoothing_loss(pos, topo)
    R = rotation_matrix(torch.rand(3, dtype=D, generator=g) * 3)
    assert L.smoothing_loss(pos @ R.T, topo).item() == pytest.approx(base.item(), rel=1e-12)
    assert L.smoothing_loss(3.7 * pos, topo).item() == pytest.approx(base.item(), rel=1e-12)


def test_smoothing_gradient_fd():
    g = torch.Generator().manual_seed(0)
    topo = geo.build_tessellation(5, 6)
    rho = 0.5 + 0.2 * torch.rand(5, 6, dtype=D, generator=g)
    pos = geo.spherical_to_cartesian(rho, topo).detach()
    # separate the collapsed pole vertices so every triangle is non-degenerate
    pos = (pos + 0.02 * torch.randn(pos.shape, dtype=D, generator=g)).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda p: L.smoothing_loss(p, topo), (pos,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def test_smoothing_batched_and_normalized():
    topo = geo.build_tessellation(9, 12)
    pos = geo.spherical_to_cartesian(0.5 + 0.1 * torch.rand(2, 9, 12, dtype=D), topo)
    both = L.smoothing_loss(pos, topo)
    assert both.shape == (2,)
    assert both[1].item() == pytest.approx(L.smoothing_loss(pos[1], topo).item(), rel=1e-14)
    norm = L.smoothing_loss(pos, topo, normalize=True)
    assert torch.allclose(norm * len(L.adjacent_pairs(topo)), both)


def test_autoencoder_loss_cases():
    x = torch.rand(2, 8, 8, 3, dtype=D)
    assert L.autoencoder_loss(x, x).item() == 0.0
    assert L.autoencoder_loss(x, x + 0.1).item() == pytest.approx(0.01, rel=1e-12)
    y = torch.rand(2, 8, 8, 3, dtype=D)
    naive = sum(float(a - b) ** 2 for a, b in zip(x.flatten().tolist(), y.flatten().tolist()))
    assert L.autoencoder_loss(x, y).item() == pytest.approx(naive / x.numel(), rel=1e-12)
    with pytest.raises(ValueError):
        L.autoencoder_loss(x, y[:1])


def test_autoencoder_loss_gradient_fd():
    x = torch.rand(1, 4, 4, 3, dtype=D)
    y = torch.rand(1, 4, 4, 3, dtype=D, requires_grad=True)
    assert torch.autograd.gradcheck(lambda e: L.autoencoder_loss(x, e), (y,), rtol=1e-4)


def test_combined_objective_linear():
    topo = geo.build_tessellation(9, 12)
    pos = geo.spherical_to_cartesian(0.5 + 0.1 * torch.rand(3, 9, 12, dtype=D), topo)
    fake = torch.randn(3, dtype=D)
    pure = L.combined_generator_objective(fake, pos, topo, 0.0)
    assert pure.total.item() == L.wgan_losses(fake, fake)[1].item()
    rep = L.combined_generator_objective(fake, pos, topo, 0.25)
    s = L.smoothing_loss(pos, topo).mean()
    assert rep.total.item() == pytest.approx(-fake.mean().item() + 0.25 * s.item(), rel=1e-14)
    assert set(rep.scalars()) == {"generator", "smoothing", "total"}
    assert rep.terms["smoothing"].item() >= 0


def test_large_smoothing_weight_flattens_bumps():
    # a bumpy radial field driven by a dominant smoothing term ends no rougher than the sphere
    g = torch.Generator().manual_seed(0)
    field = geo.RadialField.initial(max_level=4, basis_std=0.05, generator=g)
    topo = geo.build_tessellation(17, 17)
    sphere = L.smoothing_loss(geo.spherical_to_cartesian(torch.full((17, 17), 0.5, dtype=D), topo),
                              topo).item()
    coef = (0.5 * torch.randn(32, dtype=D, generator=g)).requires_grad_(True)
    opt = torch.optim.Adam([coef], lr=0.02)
    history = []
    for _ in range(200):
        rho = geo.compose_radial(geo.RadialField(coef, field.bases))
        pos, _ = geo.enforce_scale(geo.spherical_to_cartesian(rho, topo).unsqueeze(0))
        rep = L.combined_generator_objective(torch.zeros(1, dtype=D), pos, topo, 1e3)
        history.append(rep.terms["smoothing"].item())
        opt.zero_grad()
        rep.total.backward()
        opt.step()
    assert history[0] > 10 * sphere
    assert history[-1] <= sphere
