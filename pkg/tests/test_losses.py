import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from privpose.geometry import gaussian_peak
from privpose.losses import LossWeights, hallucination_loss, pose_loss, total_loss
from privpose.model import ConfigError


def central_diff(f, x, eps=1e-6):
    """Finite-difference gradient of scalar f at float64 tensor x."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return (a - b).norm().item() / max(b.norm().item(), 1e-12)


def test_hallucination_examples():
    a = torch.ones(2, 3, 4, 4)
    assert hallucination_loss(a, a).item() == 0
    assert hallucination_loss(a, torch.zeros_like(a)).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        hallucination_loss(a, torch.zeros(2, 3, 4, 5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_hallucination_symmetric_and_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    b = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(a.numel(), generator=g)
    l = hallucination_loss(a, b)
    assert l.item() >= 0
    assert l.item() == pytest.approx(hallucination_loss(b, a).item(), rel=1e-12)
    pa = a.reshape(-1)[perm].reshape(a.shape)
    pb = b.reshape(-1)[perm].reshape(b.shape)
    assert l.item() == pytest.approx(hallucination_loss(pa, pb).item(), rel=1e-12)


def test_pose_loss_identity_and_empty_masks():
    x = torch.rand(2, 3, 8, 8)
    m = torch.ones(2, 3, dtype=torch.bool)
    assert pose_loss(x, x, x, x, m, m).item() == 0
    z = torch.zeros(2, 3, dtype=torch.bool)
    assert pose_loss(x, x, torch.zeros_like(x), x * 2, z, z).item() == 0


def test_pose_loss_single_channel_analytic():
    H, W, sigma = 24, 20, 2.0
    g = gaussian_peak((9.0, 11.0), sigma, H, W)
    gt = torch.zeros(1, 2, H, W, dtype=torch.float64)
    gt[0, 0] = torch.from_numpy(g)
    m_uv = torch.tensor([[True, False]])
    m_uz = torch.zeros(1, 2, dtype=torch.bool)
    pred = torch.zeros_like(gt)
    # the squared Gaussian is separable: sum exp(-d^2/sigma^2) over rows times over cols
    rows = np.exp(-((np.arange(H) - 11.0) ** 2) / sigma ** 2).sum()
    cols = np.exp(-((np.arange(W) - 9.0) ** 2) / sigma ** 2).sum()
    expected = rows * cols / (H * W)
    got = pose_loss(pred, pred, gt, gt, m_uv, m_uz).item()
    assert got == pytest.approx(expected, rel=1e-12)
    # far from the borders this tends to pi*sigma^2 / (H*W)
    assert got == pytest.approx(np.pi * sigma ** 2 / (H * W), rel=1e-6)


def test_pose_loss_counts_both_spaces():
    pred = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    gt_uv = torch.ones_like(pred)
    gt_uz = torch.full_like(pred, 2.0)
    m = torch.ones(1, 1, dtype=torch.bool)
    # (1 + 4) / 2 visible channels
    assert pose_loss(pred, pred, gt_uv, gt_uz, m, m).item() == pytest.approx(2.5)
    assert pose_loss(pred, pred, gt_uv, gt_uz, m, ~m).item() == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_pose_loss_ignores_masked_channels(seed):
    g = torch.Generator().manual_seed(seed)
    shape = (2, 3, 4, 4)
    p_uv, p_uz, g_uv, g_uz = (torch.rand(shape, generator=g, dtype=torch.float64)
                              for _ in range(4))
    m_uv = torch.rand(2, 3, generator=g) > 0.5
    m_uz = torch.rand(2, 3, generator=g) > 0.5
    base = pose_loss(p_uv, p_uz, g_uv, g_uz, m_uv, m_uz)
    noise = torch.randn(shape, generator=g, dtype=torch.float64) * 100
    q_uv = torch.where(m_uv[..., None, None], p_uv, p_uv + noise)
    q_uz = torch.where(m_uz[..., None, None], p_uz, noise)
    assert pose_loss(q_uv, q_uz, g_uv, g_uz, m_uv, m_uz).item() == base.item()
    assert base.item() >= 0


def test_pose_loss_shape_mismatch():
    a = torch.zeros(1, 2, 4, 4)
    m = torch.ones(1, 2, dtype=torch.bool)
    with pytest.raises(ValueError):
        pose_loss(a, a, torch.zeros(1, 2, 4, 5), a, m, m)


def test_total_loss_and_weights():
    assert total_loss(0.0, 0.0) == 0
    assert total_loss(0.5, 1.5) == 2.0
    assert total_loss(0.5, 1.5, LossWeights(w_pi=0.0)) == 1.5
    with pytest.raises(ConfigError):
        LossWeights(w_pi=-1)


@pytest.mark.parametrize("which", ["hallucination", "pose_uv", "pose_uz", "total"])
def test_gradients_match_central_differences(which):
    g = torch.Generator().manual_seed(7)
    shape = (2, 3, 4, 4)
    fd, fh, p_uv, p_uz, g_uv, g_uz = (torch.randn(shape, generator=g, dtype=torch.float64)
                                      for _ in range(6))
    m_uv = torch.tensor([[1, 0, 1], [1, 1, 0]], dtype=torch.bool)
    m_uz = torch.tensor([[0, 1, 1], [1, 0, 0]], dtype=torch.bool)
    w = LossWeights(0.7, 1.3)
    if which == "hallucination":
        x, f = fh, lambda t: hallucination_loss(fd, t)
    elif which == "pose_uv":
        x, f = p_uv, lambda t: pose_loss(t, p_uz, g_uv, g_uz, m_uv, m_uz)
    elif which == "pose_uz":
        x, f = p_uz, lambda t: pose_loss(p_uv, t, g_uv, g_uz, m_uv, m_uz)
    else:
        x = p_uv

        def f(t):
            return total_loss(hallucination_loss(fd, fh + t), pose_loss(t, p_uz, g_uv, g_uz,
                                                                        m_uv, m_uz), w)
    x = x.clone().requires_grad_(True)
    f(x).backward()
    numeric = central_diff(f, x.detach().clone())
    assert rel_err(x.grad, numeric) < 1e-4
