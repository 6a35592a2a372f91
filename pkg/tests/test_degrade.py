import numpy as np
import pytest

from handrecov.config import DegradeConfig
from handrecov.degrade import (DegradationSpec, Keypoints2D, degrade,
                               make_partner_batch, sample_spec)
from handrecov.structure import item_rng


def _image(rng, size=48):
    return rng.uniform(0, 1, size=(3, size, size)).astype(np.float32)


def _disc_mask(size=48, r=16):
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    return (((jj - size / 2) ** 2 + (ii - size / 2) ** 2) <= r * r).astype(np.float32)


def _kp(size=48):
    joints = np.array([[size / 2, size / 2], [size / 2 + 8, size / 2],
                       [size / 2, size / 2 + 8]], dtype=np.float64)
    return Keypoints2D(joints=joints, visible=np.array([True, True, False]),
                       affinities=[(0, 1), (1, 2)])


def _spec(kinds, seed=0, blend=(0.5, 1.0), counts=None):
    return DegradationSpec(
        kinds=tuple(kinds),
        counts=counts or {k: 2 for k in kinds},
        blend_range=blend, radius_range=(3, 6), width_range=(2, 4),
        grayscale_prob=0.0, seed=seed,
    )


def test_zero_mask_returns_input_exactly(rng):
    x = _image(rng)
    out = degrade(x, np.zeros((48, 48), np.float32), _spec(["whole"]), _kp())
    assert np.array_equal(out, x)


def test_whole_kind_full_blend_paints_mask(rng):
    x = _image(rng)
    mask = _disc_mask()
    spec = _spec(["whole"], blend=(1.0, 1.0), counts={"whole": 1})
    out = degrade(x, mask, spec, _kp())
    inside = mask >= 0.5
    first = out[:, inside][:, 0]
    assert np.allclose(out[:, inside], first[:, None])
    assert np.array_equal(out[:, ~inside], x[:, ~inside])


def test_spot_footprint_matches_disc_oracle(rng):
    x = _image(rng)
    mask = _disc_mask(48, 20)
    kp = Keypoints2D(joints=np.array([[24.0, 24.0]]),
                     visible=np.array([True]), affinities=[])
    spec = DegradationSpec(kinds=("spot",), counts={"spot": 1},
                           blend_range=(1.0, 1.0), radius_range=(5, 5),
                           width_range=(2, 2), grayscale_prob=0.0, seed=3)
    out = degrade(x, mask, spec, kp)
    changed = np.any(out != x, axis=0)
    # brute-force per-pixel disc membership
    r_used = np.random.default_rng(np.random.SeedSequence([3])).uniform(5, 5)
    oracle = np.zeros((48, 48), bool)
    for i in range(48):
        for j in range(48):
            oracle[i, j] = ((j - 24.0) ** 2 + (i - 24.0) ** 2 <= r_used ** 2
                            and mask[i, j] >= 0.5)
    assert changed.sum() > 0
    assert not (changed & ~oracle).any()  # never outside disc cap mask
    # the blend color could coincide with the image only with prob 0
    assert (oracle & ~changed).sum() == 0


def test_line_footprint_within_width_of_visible_affinity(rng):
    x = _image(rng)
    mask = np.ones((48, 48), np.float32)
    kp = _kp()
    spec = DegradationSpec(kinds=("line",), counts={"line": 1},
                           blend_range=(1.0, 1.0), radius_range=(3, 3),
                           width_range=(4, 4), grayscale_prob=0.0, seed=5)
    out = degrade(x, mask, spec, kp)
    changed = np.any(out != x, axis=0)
    p0, p1 = kp.joints[0], kp.joints[1]  # the only fully visible affinity
    for i, j in zip(*np.nonzero(changed)):
        p = np.array([j, i], dtype=float)
        d = p1 - p0
        t = np.clip((p - p0) @ d / (d @ d), 0, 1)
        dist = np.linalg.norm(p - (p0 + t * d))
        assert dist <= 2.0 + 1e-9


def test_no_visible_joints_warns_and_skips(rng):
    x = _image(rng)
    mask = _disc_mask()
    kp = Keypoints2D(joints=np.array([[24.0, 24.0]]),
                     visible=np.array([False]), affinities=[])
    with pytest.warns(RuntimeWarning, match="no visible joints"):
        out = degrade(x, mask, _spec(["spot", "line"]), kp)
    assert np.array_equal(out, x)


def test_background_immutability_randomized(rng):
    cfg = DegradeConfig()
    kp = _kp()
    for trial in range(50):
        x = _image(rng)
        mask = _disc_mask(48, int(rng.integers(6, 22)))
        spec = sample_spec(item_rng(77, trial), cfg, seed=trial)
        out = degrade(x, mask, spec, kp)
        outside = mask < 0.5
        assert np.array_equal(out[:, outside], x[:, outside])
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_partner_batch_deterministic(rng):
    cfg = DegradeConfig()
    batch = [( _image(rng), _disc_mask(), _kp()) for _ in range(4)]
    out1 = make_partner_batch(batch, cfg, seed=11)
    out2 = make_partner_batch(batch, cfg, seed=11)
    for (d1, c1), (d2, c2) in zip(out1, out2):
        assert np.array_equal(d1, d2)
        assert np.array_equal(c1, c2)
    # clean side is the input
    for (d, c), (x, _, _) in zip(out1, batch):
        assert c is x or np.array_equal(c, x)


def test_partner_batch_out_of_mask_equality(rng):
    cfg = DegradeConfig()
    batch = [(_image(rng), _disc_mask(), _kp()) for _ in range(6)]
    for (degraded, clean), (x, mask, _) in zip(make_partner_batch(batch, cfg, 3), batch):
        outside = mask < 0.5
        assert np.array_equal(degraded[:, outside], clean[:, outside])


def test_kind_frequencies_follow_conditional_law():
    cfg = DegradeConfig()  # probs: spot .5, line .5, region .5, whole .125
    probs = {"spot": cfg.spot_prob, "line": cfg.line_prob,
             "region": cfg.region_prob, "whole": cfg.whole_prob}
    none_prob = np.prod([1 - p for p in probs.values()])
    n = 1000
    counts = {k: 0 for k in probs}
    for i in range(n):
        spec = sample_spec(item_rng(123, i), cfg, seed=i)
        for k in spec.kinds:
            counts[k] += 1
    for k, p in probs.items():
        expected = p / (1 - none_prob)
        sigma = np.sqrt(expected * (1 - expected) / n)
        assert abs(counts[k] / n - expected) <= 3 * sigma, (
            f"{k}: {counts[k] / n} vs {expected}"
        )


def test_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec(kinds=(), counts={}, blend_range=(0.5, 1.0),
                        radius_range=(3, 6), width_range=(2, 4),
                        grayscale_prob=0.0, seed=0)
    with pytest.raises(ValueError):
        _spec(["spot"], blend=(0.5, 1.5))
    with pytest.raises(ValueError):
        _spec(["glitter"])
