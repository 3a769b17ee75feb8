import numpy as np
import pytest

from voiceface.geometry import AMDefinition, LandmarkMap, Mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mesh(rng, n_vertices=10, scale=100.0, topology_id="test"):
    return Mesh(rng.uniform(-scale, scale, size=(n_vertices, 3)), topology_id=topology_id)


def simple_landmarks(n_vertices=10):
    """Six named landmarks on the first six vertices."""
    names = ["a", "b", "c", "d", "e", "f"]
    return LandmarkMap({name: i for i, name in enumerate(names)})


def all_kind_definitions():
    return [
        AMDefinition("dist_ab", "distance", ("a", "b")),
        AMDefinition("prop_abcd", "proportion", ("a", "b", "c", "d")),
        AMDefinition("prop_shared", "proportion", ("a", "b", "a", "c")),
        AMDefinition("ang_abc", "angle", ("a", "b", "c")),
    ]


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
