import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from queryveil.backends import ActivationTensor
from queryveil.errors import UndefinedDirectionError
from queryveil.pooling import (
    CROW,
    MAC,
    RMAC,
    SPOC,
    PoolingKind,
    gem,
    pool,
    pool_tensor,
    rmac_regions,
)

ALL_KINDS = (MAC, SPOC, gem(), RMAC, CROW)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(a @ b)


def test_constant_tensor_gives_uniform_descriptor():
    d = 8
    t = torch.full((d, 5, 7), 0.42, dtype=torch.float64)
    uniform = np.full(d, 1.0 / np.sqrt(d))
    for kind in ALL_KINDS:
        desc = pool(ActivationTensor(t), kind)
        assert np.allclose(desc.values, uniform, atol=1e-9), kind.label()


def test_gem_p1_equals_spoc(rng):
    t = torch.from_numpy(rng.random((6, 4, 5))).double()
    a = pool_tensor(t, gem(1.0))
    b = pool_tensor(t, SPOC)
    assert cosine(a, b) >= 1.0 - 1e-6


def test_gem_large_p_approaches_mac(rng):
    t = torch.from_numpy(rng.random((16, 6, 7))).double()
    a = pool_tensor(t, gem(100.0))
    b = pool_tensor(t, MAC)
    assert cosine(a, b) >= 0.999


def test_all_zero_tensor_raises():
    t = torch.zeros(4, 3, 3)
    for kind in ALL_KINDS:
        with pytest.raises(UndefinedDirectionError):
            pool_tensor(t, kind)


@settings(deadline=None, max_examples=40)
@given(
    seed=st.integers(0, 10_000),
    alpha=st.floats(1e-2, 1e2),
    kind=st.sampled_from(["mac", "spoc", "gem"]),
)
def test_positive_scaling_leaves_direction(seed, alpha, kind):
    local = np.random.default_rng(seed)
    vals = local.random((5, 4, 4))
    vals[vals < 0.1] = 0.0  # keep exact zeros in play
    t = torch.from_numpy(vals).double()
    if float(t.max()) == 0.0:
        return
    k = PoolingKind(kind)
    a = pool_tensor(t, k)
    b = pool_tensor(alpha * t, k)
    assert cosine(a, b) >= 1.0 - 1e-6


def test_gem_validation():
    with pytest.raises(ValueError):
        gem(-1.0)
    with pytest.raises(ValueError):
        PoolingKind("avgmax")


def test_pooling_parse_labels():
    assert PoolingKind.parse("GeM") == gem()
    assert PoolingKind.parse("gem5") == gem(5.0)
    assert PoolingKind.parse("R-MAC") == RMAC
    assert gem(3.0).label() == "gem"
    assert gem(2.5).label() == "gem2.5"


def test_rmac_regions_square_grid_counts():
    regions = rmac_regions(8, 8)
    # square maps: 1 + 4 + 9 regions over three scales
    assert len(regions) == 14
    for top, left, side in regions:
        assert side >= 1
        assert 0 <= top <= 8 - side
        assert 0 <= left <= 8 - side


def test_rmac_regions_cover_rectangular_maps():
    h, w = 6, 13
    regions = rmac_regions(h, w)
    covered = np.zeros((h, w), dtype=bool)
    for top, left, side in regions:
        assert 0 <= top <= h - side and 0 <= left <= w - side
        covered[top : top + side, left : left + side] = True
    assert covered.all()


def test_rmac_matches_bruteforce_regional_sum(rng):
    t = torch.from_numpy(rng.random((7, 5, 9))).double()
    acc = np.zeros(7)
    for top, left, side in rmac_regions(5, 9):
        v = t[:, top : top + side, left : left + side].amax(dim=(1, 2)).numpy()
        acc += v / (np.linalg.norm(v) + 1e-12)
    expected = acc / np.linalg.norm(acc)
    got = pool_tensor(t, RMAC).numpy()
    assert np.abs(got - expected).max() < 1e-9


def test_crow_matches_reference_formulas(rng):
    vals = rng.random((6, 4, 5))
    vals[vals < 0.3] = 0.0
    t = torch.from_numpy(vals).double()
    s = vals.sum(axis=0)
    alpha = (s / np.linalg.norm(s)) ** 0.5
    q = (vals > 0).mean(axis=(1, 2))
    w = np.where(q > 0, np.log(q.sum() / np.maximum(q, 1e-12)), 0.0)
    raw = (vals * alpha).sum(axis=(1, 2)) * w
    expected = raw / np.linalg.norm(raw)
    got = pool_tensor(t, CROW).numpy()
    assert np.abs(got - expected).max() < 1e-9


def test_pool_public_surface_returns_unit_descriptor(rng):
    t = ActivationTensor(torch.from_numpy(rng.random((12, 3, 4))).float())
    for kind in ALL_KINDS:
        desc = pool(t, kind)
        assert abs(np.linalg.norm(desc.values) - 1.0) < 1e-6
