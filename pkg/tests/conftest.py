import functools
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def _library():
    from sisc.synth import build_shape_library

    return build_shape_library()


@functools.lru_cache(maxsize=64)
def scene(seed, **kw):
    from sisc.synth import SceneRecipe, generate

    return generate(SceneRecipe(seed=seed, **kw))


@pytest.fixture(scope="session")
def library():
    return _library()


@pytest.fixture(scope="session")
def get_scene():
    return scene
