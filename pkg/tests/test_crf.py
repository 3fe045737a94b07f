import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from asdt import crf
from asdt.crf import CrfParams, crf_refine, harden, harden_labels


def mean_field_oracle(P, image, params, spacing=1.0):
    """Synchronous mean-field with explicit per-pair loops."""
    P = P.numpy()
    image = image.numpy()
    K, H, W = P.shape
    pix = [(y, x) for y in range(H) for x in range(W)]
    unary = np.log(np.maximum(P, 1e-12))
    Q = np.exp(unary) / np.exp(unary).sum(0, keepdims=True)
    kern = {}
    for i, (y, x) in enumerate(pix):
        for j, (y2, x2) in enumerate(pix):
            if i == j:
                continue
            d2 = ((y - y2) ** 2 + (x - x2) ** 2) * spacing**2
            c2 = float(((image[:, y, x] - image[:, y2, x2]) ** 2).sum())
            kern[i, j] = params.w_appearance * math.exp(
                -d2 / (2 * params.theta_alpha**2) - c2 / (2 * params.theta_beta**2)
            ) + params.w_smoothness * math.exp(-d2 / (2 * params.theta_gamma**2))
    for _ in range(params.n_iters):
        new = np.empty_like(Q)
        for i, (y, x) in enumerate(pix):
            msg = [sum(kern[i, j] * Q[l, pix[j][0], pix[j][1]] for j in range(len(pix)) if j != i) for l in range(K)]
            energy = [unary[l, y, x] - params.compat * sum(msg[m] for m in range(K) if m != l) for l in range(K)]
            e = np.exp(np.array(energy) - max(energy))
            new[:, y, x] = e / e.sum()
        Q = new
    return Q


def random_maps(gen, K=2, H=8, W=8):
    P = torch.softmax(torch.randn(K, H, W, generator=gen, dtype=torch.float64) * 1.5, dim=0)
    image = torch.rand(3, H, W, generator=gen, dtype=torch.float64) * 255
    return P, image


def test_matches_bruteforce_oracle(gen):
    params = CrfParams(n_iters=5, theta_alpha=6.0, theta_beta=40.0, theta_gamma=2.0)
    for _ in range(3):
        P, image = random_maps(gen)
        ours = crf_refine(P, image, params).numpy()
        assert np.abs(ours - mean_field_oracle(P, image, params)).max() < 1e-6


def test_matches_oracle_with_spacing(gen):
    params = CrfParams(n_iters=3)
    P, image = random_maps(gen, K=3, H=5, W=5)
    ours = crf_refine(P, image, params, spacing=4.0).numpy()
    assert np.abs(ours - mean_field_oracle(P, image, params, spacing=4.0)).max() < 1e-6


def test_zero_pairwise_is_identity(gen):
    P, image = random_maps(gen, K=4)
    out = crf_refine(P, image, CrfParams(n_iters=7, w_appearance=0, w_smoothness=0))
    assert torch.allclose(out, P, rtol=0, atol=1e-12)


def test_zero_iterations_debug_identity(gen):
    P, image = random_maps(gen)
    assert torch.equal(crf_refine(P, image, CrfParams(n_iters=0, debug=True)), P)
    with pytest.raises(ValueError):
        CrfParams(n_iters=0)


def test_simplex_after_every_iteration(gen):
    P, image = random_maps(gen, K=3, H=10, W=9)
    for k in range(1, 11):
        out = crf_refine(P, image, CrfParams(n_iters=k))
        assert (out >= 0).all()
        assert torch.allclose(out.sum(0), torch.ones(10, 9, dtype=torch.float64), atol=1e-6)


def test_deterministic_and_channel_equivariant(gen):
    P, image = random_maps(gen, K=4, H=7, W=7)
    params = CrfParams()
    a = crf_refine(P, image, params)
    assert torch.equal(a, crf_refine(P, image, params))
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(crf_refine(P[perm], image, params), a[perm], atol=1e-12)


def test_chunked_path_equals_dense(gen, monkeypatch):
    P, image = random_maps(gen, K=3, H=9, W=8)
    params = CrfParams(n_iters=4)
    dense = crf_refine(P, image, params)
    monkeypatch.setattr(crf, "DENSE_LIMIT", 10)
    chunked = crf_refine(P, image, params)
    assert torch.allclose(dense, chunked, atol=1e-12)


def test_misaligned_raises(gen):
    P, image = random_maps(gen)
    with pytest.raises(ValueError):
        crf_refine(P, image[:, :-1], CrfParams())


def test_batch_wrapper(gen):
    P1, im1 = random_maps(gen)
    P2, im2 = random_maps(gen)
    out = crf.crf_refine_batch(torch.stack([P1, P2]), torch.stack([im1, im2]), CrfParams(n_iters=2))
    assert torch.equal(out[1], crf_refine(P2, im2, CrfParams(n_iters=2)))


def test_smooths_isolated_noise():
    P = torch.zeros(2, 8, 8, dtype=torch.float64)
    P[0] = 0.8
    P[1] = 0.2
    P[:, 4, 4] = torch.tensor([0.4, 0.6])
    image = torch.full((3, 8, 8), 100.0, dtype=torch.float64)
    out = crf_refine(P, image, CrfParams())
    assert harden_labels(P)[4, 4] == 1
    assert harden_labels(out)[4, 4] == 0


# ---- harden -------------------------------------------------------------------------


def test_uniform_hardens_to_background():
    P = torch.full((4, 3, 3), 0.25)
    assert (harden_labels(P) == 0).all()
    assert harden(P)[0].sum() == 9


def test_onehot_is_fixed_point(gen):
    lab = torch.randint(0, 5, (6, 6), generator=gen)
    onehot = torch.nn.functional.one_hot(lab, 5).permute(2, 0, 1).double()
    assert torch.equal(harden(onehot), onehot)


def test_ties_prefer_lower_index():
    P = torch.tensor([0.1, 0.45, 0.45]).view(3, 1, 1)
    assert harden_labels(P).item() == 1


def test_matches_argmax_scan(gen):
    P = torch.softmax(torch.randn(2, 5, 7, 7, generator=gen), dim=1)
    got = harden_labels(P).numpy()
    arr = P.numpy()
    for n in range(2):
        for y in range(7):
            for x in range(7):
                best = 0
                for c in range(1, 5):
                    if arr[n, c, y, x] > arr[n, best, y, x]:
                        best = c
                assert got[n, y, x] == best
    H = harden(P)
    assert torch.equal(H.sum(1), torch.ones(2, 7, 7))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_rehardening_idempotent(seed):
    g = torch.Generator().manual_seed(seed)
    P = torch.softmax(torch.randn(4, 5, 5, generator=g), dim=0)
    once = harden(P)
    assert torch.equal(harden(once), once)
