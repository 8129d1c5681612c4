import numpy as np
import pytest

from d2dpath import prototypes
from d2dpath.errors import InputError


def blobs(seed=0):
    rng = np.random.default_rng(seed)
    centres = np.eye(4) * 5
    return np.vstack([c + 0.1 * rng.normal(size=(10, 4)) for c in centres])


def test_terminal_class_is_k():
    pm = prototypes.build_prototypes(blobs(), 4)
    assert pm.terminal_class == 4 and pm.num_classes == 5


def test_map_user_recovers_blobs():
    F = blobs()
    pm = prototypes.build_prototypes(F, 4)
    labels = prototypes.map_users(F, pm)
    for b in range(4):
        assert len(set(labels[b * 10:(b + 1) * 10])) == 1
    assert len(set(labels)) == 4
    assert prototypes.map_user(F[0], pm) == labels[0]


def test_prototype_feature_range():
    pm = prototypes.build_prototypes(blobs(), 4)
    assert np.array_equal(prototypes.prototype_feature(2, pm), pm.centroids[2])
    with pytest.raises(InputError):
        prototypes.prototype_feature(4, pm)
    with pytest.raises(InputError):
        prototypes.prototype_feature(-1, pm)


def test_k_bounds():
    with pytest.raises(InputError):
        prototypes.build_prototypes(blobs(), 41)
    with pytest.raises(InputError):
        prototypes.build_prototypes(blobs(), 0)


def test_save_load(tmp_path):
    pm = prototypes.build_prototypes(blobs(), 3, seed=2)
    prototypes.save(pm, tmp_path / "p.json")
    back = prototypes.load(tmp_path / "p.json")
    assert np.array_equal(back.centroids, pm.centroids)
    assert back.terminal_class == 3
