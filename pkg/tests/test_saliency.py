import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from handrecov.saliency import (NotTrainedError, PatchSaliency,
                                PatchSaliencyMLP, SaliencyMap, SaliencyNet,
                                SaliencySource, distill_loss,
                                estimate_saliency, pool_patch_teacher,
                                train_estimator)
from handrecov.structure import DimensionError, StructureMap
from conftest import make_unit_normal_map


def test_pool_constant_map():
    m = SaliencyMap(values=np.full((64, 64), 0.3, np.float32),
                    source=SaliencySource.from_image)
    p = pool_patch_teacher(m, 16)
    assert p.values.shape == (16,)
    assert np.allclose(p.values, 0.3)


def test_pool_single_hot_pixel():
    values = np.zeros((64, 64), np.float32)
    values[0, 0] = 1.0
    p = pool_patch_teacher(SaliencyMap(values, SaliencySource.from_image), 16)
    assert p.values[0] == 1.0
    assert (p.values[1:] == 0).all()


def test_pool_matches_bruteforce(rng):
    values = rng.uniform(0, 1, size=(64, 64)).astype(np.float32)
    p = pool_patch_teacher(SaliencyMap(values, SaliencySource.from_image), 16)
    idx = 0
    for bi in range(4):
        for bj in range(4):
            patch = values[bi * 16:(bi + 1) * 16, bj * 16:(bj + 1) * 16]
            expected = max(patch[i, j] for i in range(16) for j in range(16))
            assert p.values[idx] == pytest.approx(expected)
            idx += 1


def test_pool_rejects_indivisible():
    m = SaliencyMap(np.zeros((60, 60), np.float32), SaliencySource.from_image)
    with pytest.raises(DimensionError):
        pool_patch_teacher(m, 16)


@settings(max_examples=25, deadline=None)
@given(p=st.sampled_from([4, 8, 16]), seed=st.integers(0, 10 ** 6))
def test_pool_dominates_patch_mean(p, seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 1, size=(32, 32)).astype(np.float32)
    pooled = pool_patch_teacher(
        SaliencyMap(values, SaliencySource.from_image), p).values
    g = 32 // p
    means = values.reshape(g, p, g, p).mean(axis=(1, 3)).reshape(-1)
    assert (pooled >= means - 1e-6).all()


def test_estimate_saliency_range_untrained(rng):
    net = SaliencyNet(32, base_channels=4)
    out = estimate_saliency(net, np.zeros((3, 32, 32), np.float32))
    assert out.values.shape == (32, 32)
    assert np.isfinite(out.values).all()
    assert out.values.min() >= 0 and out.values.max() <= 1
    assert out.source == SaliencySource.from_image


def test_estimate_saliency_accepts_structure_maps(rng):
    vec, fg = make_unit_normal_map(rng, 32)
    m = StructureMap(values=vec, kind="normal", background_mask=~fg)
    net = SaliencyNet(32, base_channels=4)
    out = estimate_saliency(net, m)
    assert out.source == SaliencySource.from_structure


def test_estimate_saliency_deterministic(rng):
    net = SaliencyNet(32, base_channels=4)
    x = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    a = estimate_saliency(net, x).values
    b = estimate_saliency(net, x).values
    assert np.array_equal(a, b)


def test_estimate_saliency_errors(rng):
    with pytest.raises(NotTrainedError):
        estimate_saliency(None, np.zeros((3, 32, 32), np.float32))
    net = SaliencyNet(32, base_channels=4)
    with pytest.raises(DimensionError):
        estimate_saliency(net, np.zeros((3, 16, 16), np.float32))
    with pytest.raises(DimensionError):
        estimate_saliency(net, np.zeros((1, 32, 32), np.float32))


def test_distill_loss_oracles(rng):
    pred = torch.zeros(1, 8)
    teacher = torch.ones(1, 8)
    assert float(distill_loss(pred, pred)) == 0.0
    assert float(distill_loss(pred, teacher)) == pytest.approx(1.0)
    a = torch.from_numpy(rng.uniform(0, 1, (2, 16)).astype(np.float32))
    b = torch.from_numpy(rng.uniform(0, 1, (2, 16)).astype(np.float32))
    manual = float(np.mean((a.numpy() - b.numpy()) ** 2))
    assert float(distill_loss(a, b)) == pytest.approx(manual, rel=1e-6)
    with pytest.raises(DimensionError):
        distill_loss(torch.zeros(1, 8), torch.zeros(1, 9))


def test_distill_gradients_reach_only_mlp():
    mlp = PatchSaliencyMLP(16, hidden=8)
    tokens = torch.randn(2, 64, 16, requires_grad=True)
    loss = distill_loss(mlp(tokens.detach()), torch.rand(2, 64))
    loss.backward()
    assert tokens.grad is None
    assert all(p.grad is not None for p in mlp.parameters())


def test_disc_training_reaches_iou():
    # Desk-scale oracle: a trivially learnable disc dataset; the generator's
    # own masks are the ground truth.
    rng = np.random.default_rng(0)
    size = 32
    images, masks = [], []
    for _ in range(48):
        jj, ii = np.meshgrid(np.arange(size), np.arange(size))
        cx, cy = rng.uniform(10, size - 10, 2)
        r = rng.uniform(5, 9)
        fg = ((jj - cx) ** 2 + (ii - cy) ** 2 <= r * r)
        bg_col = rng.uniform(0, 0.4, 3)
        fg_col = rng.uniform(0.6, 1.0, 3)
        img = np.where(fg, fg_col[:, None, None], bg_col[:, None, None])
        images.append(img.astype(np.float32))
        masks.append(fg.astype(np.float32))
    images = np.stack(images)
    masks = np.stack(masks)
    net = SaliencyNet(size, base_channels=4)
    train_estimator(net, images[:40], masks[:40], steps=500, batch_size=8,
                    lr=5e-4, seed=0)
    net.eval()
    with torch.no_grad():
        pred = net(torch.from_numpy(images[40:])).numpy()
    ious = []
    for p, t in zip(pred, masks[40:]):
        inter = ((p >= 0.5) & (t >= 0.5)).sum()
        union = ((p >= 0.5) | (t >= 0.5)).sum()
        ious.append(inter / max(union, 1))
    assert np.mean(ious) >= 0.8


def test_patch_saliency_validation():
    with pytest.raises(ValueError):
        PatchSaliency(values=np.array([0.2, 1.4]), patch_size=16)
    with pytest.raises(ValueError):
        SaliencyMap(values=np.full((8, 8), -0.1), source=SaliencySource.from_image)
