import numpy as np
import pytest

from photocal.synth import SceneSpec, generate_scene, render_frame


@pytest.fixture(scope="session")
def scene():
    """Standard synthetic scene (seed 0)."""
    return generate_scene(SceneSpec(seed=0))


@pytest.fixture(scope="session")
def frames(scene):
    return [render_frame(scene, i) for i in range(scene.n_frames)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
