import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from asdt.backbone import ToyBackbone
from asdt.class_teacher import (
    ClassHead,
    cam_to_probmaps,
    cams_to_pseudolabels,
    class_forward,
    classification_loss,
    compute_cams,
    multiscale_cams,
    normalize_cams,
)
from conftest import gradient_relative_error


def test_zero_features_give_half():
    scores = class_forward(torch.zeros(2, 5, 4, 4), torch.randn(3, 5), torch.zeros(3))
    assert torch.equal(scores, torch.full((2, 3), 0.5))


def test_constant_features_pool_to_constant():
    v = torch.randn(5)
    feats = v.view(1, 5, 1, 1).expand(1, 5, 6, 7)
    W = torch.eye(5)
    assert torch.allclose(torch.logit(class_forward(feats, W)), v[None], atol=1e-5)


def test_channel_mismatch_raises():
    with pytest.raises(ValueError):
        class_forward(torch.zeros(1, 4, 2, 2), torch.zeros(3, 5))
    with pytest.raises(ValueError):
        compute_cams(torch.zeros(1, 4, 2, 2), torch.zeros(3, 5))


def test_class_forward_gradient(gen):
    for _ in range(20):
        feats = torch.randn(2, 6, 3, 3, generator=gen, dtype=torch.float64)
        W = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        b = torch.randn(4, generator=gen, dtype=torch.float64)
        proj = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        fn = lambda: (class_forward(feats, W, b) * proj).sum()  # noqa: E731
        assert gradient_relative_error(fn, [feats, W, b]) < 1e-4


def test_loss_closed_forms():
    assert classification_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item() == pytest.approx(math.log(2), rel=1e-6)
    perfect = classification_loss(torch.tensor([[1.0, 0.0, 1.0]]), torch.tensor([[1.0, 0.0, 1.0]]))
    assert perfect.item() == pytest.approx(0, abs=1e-6)
    assert torch.isfinite(classification_loss(torch.tensor([[0.0]]), torch.tensor([[1.0]])))


def test_loss_matches_direct_formula(rng):
    for _ in range(20):
        y = rng.integers(0, 2, (3, 5)).astype(np.float64)
        p = rng.uniform(0.01, 0.99, (3, 5))
        oracle = np.mean([-sum(y[n, c] * math.log(p[n, c]) + (1 - y[n, c]) * math.log(1 - p[n, c]) for c in range(5))
                          for n in range(3)])
        ours = classification_loss(torch.from_numpy(p), torch.from_numpy(y)).item()
        assert ours == pytest.approx(oracle, rel=1e-12)


def test_loss_decreases_after_small_step(gen):
    feats = torch.randn(4, 8, 5, 5, generator=gen)
    tags = (torch.rand(4, 3, generator=gen) > 0.5).float()
    head = ClassHead(8, 3)
    opt = torch.optim.SGD(head.parameters(), lr=0.1)
    before = classification_loss(head(feats), tags)
    before.backward()
    opt.step()
    after = classification_loss(head(feats), tags)
    assert 0 <= after.item() < before.item()


def test_cam_identity_weighting(gen):
    feats = torch.randn(1, 1, 6, 6, generator=gen)
    cam = compute_cams(feats, torch.ones(1, 1))
    pos = F.relu(feats)
    expected = (pos - pos.min()) / (pos.max() - pos.min())
    assert torch.allclose(cam, expected)


def test_constant_cam_normalizes_to_zero():
    feats = torch.full((1, 3, 5, 5), 2.0)
    cam = compute_cams(feats, torch.rand(2, 3))
    assert (cam == 0).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0.01, 100))
def test_cam_positive_scale_invariance(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(2, 4, 6, 6, generator=g, dtype=torch.float64)
    W = torch.randn(3, 4, generator=g, dtype=torch.float64)
    a = compute_cams(feats, W)
    b = compute_cams(alpha * feats, W)
    assert torch.allclose(a, b, atol=1e-10)
    assert a.min() >= 0 and a.max() <= 1


def test_untagged_classes_zeroed(gen):
    feats = torch.randn(1, 4, 6, 6, generator=gen)
    cam = compute_cams(feats, torch.randn(3, 4, generator=gen), torch.tensor([[1.0, 0.0, 1.0]]))
    assert (cam[0, 1] == 0).all()


@pytest.fixture(scope="module")
def trained_net():
    from asdt.synthdata import render_shapes_sample, normalize

    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    samples = [render_shapes_sample(rng, 3, 64) for _ in range(16)]
    x = torch.from_numpy(np.stack([normalize(s.image) for s in samples])).permute(0, 3, 1, 2).float()
    tags = torch.from_numpy(np.stack([s.tags for s in samples])).float()
    net = ToyBackbone()
    head = ClassHead(net.out_channels, 3)
    opt = torch.optim.SGD(list(net.parameters()) + list(head.parameters()), lr=0.01, momentum=0.9)
    for _ in range(30):
        loss = classification_loss(head(net(x)), tags)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net.eval(), head, x, tags


def test_multiscale_single_scale_identity(trained_net):
    net, head, x, tags = trained_net
    base = compute_cams(net(x).detach(), head.fc.weight.detach(), tags)
    assert torch.allclose(multiscale_cams(x, net, head, (1.0,), tags, flip=False), base, atol=1e-6)
    assert torch.allclose(multiscale_cams(x, net, head, (1.0, 1.0), tags, flip=False), base, atol=1e-6)


def test_multiscale_range(trained_net):
    net, head, x, tags = trained_net
    out = multiscale_cams(x, net, head, (0.5, 1.0, 1.5, 2.0), tags)
    assert out.shape == (16, 3, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_multiscale_agreement(trained_net):
    net, head, x, tags = trained_net
    with torch.no_grad():
        base = compute_cams(net(x), head.fc.weight, tags)
        up = compute_cams(net(F.interpolate(x, scale_factor=2, mode="bilinear")), head.fc.weight, tags)
        down = F.interpolate(up, size=base.shape[-2:], mode="bilinear")
    mask = tags.bool()
    a, b = base[mask].flatten(1), down[mask].flatten(1)
    corr = [np.corrcoef(u, v)[0, 1] for u, v in zip(a.numpy(), b.numpy()) if u.std() > 0 and v.std() > 0]
    assert np.mean(corr) > 0


# ---- pseudo labels ---------------------------------------------------------------


def test_saturated_and_empty_maps():
    tags = torch.tensor([[0.0, 1.0]])
    cams = torch.zeros(1, 2, 4, 4)
    cams[0, 1] = 1.0
    B, R = cams_to_pseudolabels(cams, tags)
    assert (B[0, 2] == 1).all() and (R == 1).all()
    B, R = cams_to_pseudolabels(torch.zeros(1, 2, 4, 4), tags)
    assert (B[0, 0] == 1).all() and (R == 1).all()


def test_dead_zone_is_unreliable():
    cams = torch.zeros(1, 1, 2, 2)
    cams[0, 0, 0, 1] = 0.2
    B, R = cams_to_pseudolabels(cams, torch.ones(1, 1), theta_fg=0.3, theta_bg=0.05)
    assert R[0, 0, 1] == 0 and (B[0, :, 0, 1] == 0).all()
    assert R.sum() == 3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_pseudolabel_invariants(seed):
    g = torch.Generator().manual_seed(seed)
    cams = torch.rand(2, 4, 5, 5, generator=g)
    tags = (torch.rand(2, 4, generator=g) > 0.5).float()
    B, R = cams_to_pseudolabels(cams, tags)
    per_pixel = B.sum(1)
    assert torch.equal(per_pixel, R)
    for n in range(2):
        for c in range(4):
            if tags[n, c] == 0:
                assert (B[n, c + 1] == 0).all()


def test_probmaps():
    tags = torch.tensor([[1.0, 1.0]])
    cams = torch.zeros(1, 2, 3, 3)
    cams[0, 0, 1, 1] = 1.0
    P = cam_to_probmaps(cams, tags)
    assert P[0, 1, 1, 1] == 1.0
    assert (P[0, 0] + (cams[0, 0] == 1).float() == 1).all()
    assert (cam_to_probmaps(torch.zeros(1, 2, 3, 3), tags)[:, 0] == 1).all()


def test_probmaps_sum_to_one(gen):
    cams = torch.rand(3, 4, 6, 6, generator=gen, dtype=torch.float64)
    tags = (torch.rand(3, 4, generator=gen) > 0.3).double()
    P = cam_to_probmaps(cams, tags)
    assert torch.allclose(P.sum(1), torch.ones(3, 6, 6, dtype=torch.float64), atol=1e-6)


def test_normalize_cams_range(gen):
    out = normalize_cams(torch.randn(2, 3, 5, 5, generator=gen) * 10)
    assert out.min() >= 0 and out.max() <= 1
