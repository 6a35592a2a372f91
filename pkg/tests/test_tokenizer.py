import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from handrecov.structure import DimensionError, StructureMap
from handrecov.tokenizer import (ParameterError, StructureTokenizer,
                                 TokenGrid, gumbel_sample, kl_weight_schedule,
                                 tau_schedule, tokenizer_loss, uniform_kl)
from conftest import make_unit_normal_map


@pytest.fixture
def tok():
    return StructureTokenizer(64, "normal", codebook_size=512,
                              embed_dim=32, base_channels=8)


def _normal_map(rng, size=64):
    vec, fg = make_unit_normal_map(rng, size)
    return StructureMap(values=vec, kind="normal", background_mask=~fg)


def test_encode_shape_and_determinism(tok, rng):
    m = _normal_map(rng)
    g1 = tok.encode(m)
    g2 = tok.encode(m)
    assert tuple(g1.logits.shape) == (512, 16, 16)
    assert torch.equal(g1.logits, g2.logits)
    assert torch.isfinite(tok.encode(
        StructureMap(np.zeros((3, 64, 64), np.float32), "normal",
                     np.ones((64, 64), bool))).logits).all()


def test_decode_shape_and_normalization(tok, rng):
    m = _normal_map(rng)
    out = tok.decode(tok.encode(m))
    assert out.values.shape == (3, 64, 64)
    norms = np.linalg.norm(out.values, axis=0)
    if out.foreground.any():
        assert np.abs(norms[out.foreground] - 1).max() <= 1e-3
    assert (norms[out.background_mask] == 0).all()


def test_decode_deterministic(tok, rng):
    m = _normal_map(rng)
    grid = tok.encode(m)
    a = tok.decode(grid).values
    b = tok.decode(grid).values
    assert np.array_equal(a, b)


def test_encoder_rejects_wrong_size(tok):
    with pytest.raises(DimensionError):
        tok.encoder(torch.zeros(1, 3, 32, 32))


def test_token_grid_validation():
    with pytest.raises(DimensionError):
        TokenGrid(logits=torch.zeros(512, 8, 8))


# -- Gumbel sampling --------------------------------------------------------

def test_soft_sample_rows_sum_to_one():
    logits = torch.randn(4, 512, 16, 16)
    w, _ = gumbel_sample(logits, 0.7, hard=False,
                         generator=torch.Generator().manual_seed(0))
    assert float((w.sum(dim=1) - 1).abs().max()) <= 1e-5


def test_hard_sample_is_one_hot_with_st_backward():
    logits = torch.randn(2, 16, 16, 16, requires_grad=True)
    gen = torch.Generator().manual_seed(1)
    w, idx = gumbel_sample(logits, 1.0, hard=True, generator=gen)
    flat = w.detach().permute(0, 2, 3, 1).reshape(-1, 16)
    assert ((flat.max(dim=1).values == 1) & (flat.sum(dim=1) == 1)).all()
    assert torch.equal(w.detach().argmax(dim=1), idx)
    # backward equals the soft backward under the same noise
    probe = torch.randn_like(w)
    (w * probe).sum().backward()
    g_hard = logits.grad.clone()
    logits.grad = None
    gen = torch.Generator().manual_seed(1)
    ws, _ = gumbel_sample(logits, 1.0, hard=False, generator=gen)
    (ws * probe).sum().backward()
    assert torch.allclose(g_hard, logits.grad)


def test_low_temperature_limit_matches_argmax_of_noisy_logits():
    logits = torch.randn(1, 32, 16, 16, dtype=torch.float64)
    gen = torch.Generator().manual_seed(3)
    u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype)
    noise = -torch.log(-torch.log(u))
    gen2 = torch.Generator().manual_seed(3)
    _, idx = gumbel_sample(logits, 1e-4, hard=True, generator=gen2)
    assert torch.equal(idx, (logits + noise).argmax(dim=1))


def test_gumbel_rejects_nonpositive_temperature():
    with pytest.raises(ParameterError):
        gumbel_sample(torch.zeros(1, 4, 16, 16), 0.0, hard=False)
    with pytest.raises(ParameterError):
        gumbel_sample(torch.zeros(1, 4, 16, 16), -1.0, hard=True)


def test_uniform_logits_sample_uniformly():
    k = 16
    logits = torch.zeros(1, k, 16, 16)
    gen = torch.Generator().manual_seed(9)
    counts = torch.zeros(k)
    draws = 400  # 400 * 256 cells ~ 1e5 categorical draws
    for _ in range(draws):
        _, idx = gumbel_sample(logits, 1.0, hard=True, generator=gen)
        counts += torch.bincount(idx.reshape(-1), minlength=k).float()
    n = draws * 256
    p = 1.0 / k
    sigma = math.sqrt(n * p * (1 - p))
    assert float((counts - n * p).abs().max()) <= 4 * sigma


# -- KL and the combined loss ------------------------------------------------

def test_kl_uniform_logits_zero():
    assert float(uniform_kl(torch.zeros(2, 512, 16, 16))) == pytest.approx(0.0, abs=1e-5)


def test_kl_one_hot_limit():
    logits = torch.full((1, 512, 16, 16), -1e4)
    logits[:, 7] = 1e4
    assert float(uniform_kl(logits)) == pytest.approx(math.log(512), abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.sampled_from([2, 16, 512]),
       scale=st.floats(0.01, 50.0))
def test_kl_bounds_property(seed, k, scale):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, k, 16, 16, generator=gen) * scale
    v = float(uniform_kl(logits))
    assert -1e-5 <= v <= math.log(k) + 1e-5


def test_tokenizer_loss_matches_hand_arithmetic(rng):
    torch.manual_seed(0)
    s_star = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    s_hat = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    logits = torch.randn(2, 5, 16, 16, dtype=torch.float64)

    def stub_disc(x):
        return [x.mean(dim=1, keepdim=True) * 0.25,
                x[..., ::2, ::2].mean(dim=1, keepdim=True) * 0.5]

    kl_w, adv_w = 3e-4, 0.01
    terms = tokenizer_loss(s_star, s_hat, logits, stub_disc, kl_w, adv_w)

    # oracle, hand-rolled in numpy
    l = logits.numpy()
    p = np.exp(l - l.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    kl = (p * np.log(p)).sum(axis=1).mean() + math.log(5)
    mse = ((s_hat.numpy() - s_star.numpy()) ** 2).mean()
    scores = [s.numpy() for s in stub_disc(s_hat)]
    adv = np.mean([np.abs(s - 1).mean() for s in scores])
    total = kl_w * kl + mse + adv_w * adv
    assert float(terms["kl"]) == pytest.approx(kl, rel=1e-6)
    assert float(terms["mse"]) == pytest.approx(mse, rel=1e-6)
    assert float(terms["adv"]) == pytest.approx(adv, rel=1e-6)
    assert float(terms["total"]) == pytest.approx(total, rel=1e-6)


def test_tokenizer_loss_trivial_cases():
    s = torch.randn(1, 3, 4, 4)
    uniform_logits = torch.zeros(1, 8, 16, 16)
    terms = tokenizer_loss(s, s.clone(), uniform_logits,
                           lambda x: [torch.ones(1, 1, 2, 2)], 1.0, 0.01)
    assert float(terms["kl"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["mse"]) == 0.0
    assert float(terms["adv"]) == 0.0


def test_schedules():
    assert tau_schedule(0, 1.0, 0.5, 100) == 1.0
    assert tau_schedule(50, 1.0, 0.5, 100) == pytest.approx(0.75)
    assert tau_schedule(100, 1.0, 0.5, 100) == 0.5
    assert tau_schedule(5000, 1.0, 0.5, 100) == 0.5
    assert kl_weight_schedule(0, 6.6e-7, 100) == 0.0
    assert kl_weight_schedule(100, 6.6e-7, 100) == pytest.approx(6.6e-7)
