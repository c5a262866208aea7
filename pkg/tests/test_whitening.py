import numpy as np
import pytest

from queryveil.descriptor import Descriptor
from queryveil.errors import InsufficientDataError, UndefinedDirectionError
from queryveil.whitening import (
    WhiteningTransform,
    learn_whitening,
    load_whitening,
    save_whitening,
    whiten,
    whiten_raw,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_identity_transform_is_a_noop(rng):
    t = WhiteningTransform.identity(6)
    desc = Descriptor.from_raw(rng.standard_normal(6))
    out = whiten(desc, t)
    assert np.allclose(out.values, desc.values, atol=1e-12)


def test_annihilating_projection_raises():
    d = 4
    proj = np.zeros((d, d))
    t = WhiteningTransform(np.zeros(d), proj)
    desc = Descriptor.from_raw(np.ones(d))
    with pytest.raises(UndefinedDirectionError):
        whiten(desc, t)


def test_learned_transform_whitens_its_training_set(rng):
    x = unit_rows(rng, 100, 8)
    t = learn_whitening([Descriptor.from_raw(v) for v in x])
    y = np.stack([whiten_raw(v, t) for v in x])
    # centered exactly, decorrelated to identity (biased covariance oracle)
    assert np.abs(y.mean(axis=0)).max() < 1e-6
    cov = (y - y.mean(axis=0)).T @ (y - y.mean(axis=0)) / y.shape[0]
    assert np.abs(cov - np.eye(8)).max() < 1e-5


def test_pre_whitened_set_learns_orthonormal_projection(rng):
    x = unit_rows(rng, 60, 5)
    first = learn_whitening(x)
    z = np.stack([whiten_raw(v, first) for v in x])
    second = learn_whitening(z)
    assert np.abs(second.mean).max() < 1e-9
    gram = second.projection @ second.projection.T
    assert np.abs(gram - np.eye(5)).max() < 1e-6


def test_duplication_invariance(rng):
    x = unit_rows(rng, 20, 6)
    a = learn_whitening(x)
    b = learn_whitening(np.vstack([x, x]))
    assert np.allclose(a.mean, b.mean, atol=1e-12)
    assert np.allclose(a.projection, b.projection, atol=1e-9)


def test_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        learn_whitening(unit_rows(rng, 1, 4))


def test_rank_deficient_sample_survives_floor(rng):
    x = np.tile(unit_rows(rng, 2, 6), (3, 1))  # rank <= 2
    t = learn_whitening(x)
    assert np.isfinite(t.projection).all()


def test_save_load_round_trip(tmp_path, rng):
    t = learn_whitening(unit_rows(rng, 30, 4))
    save_whitening(tmp_path / "w.json", t, metadata={"source": "test"})
    back, meta = load_whitening(tmp_path / "w.json")
    assert np.allclose(back.mean, t.mean)
    assert np.allclose(back.projection, t.projection)
    assert meta["source"] == "test"
